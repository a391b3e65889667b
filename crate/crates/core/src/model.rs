//! The two-stream cross-modal fusion network, its L1 objective and the
//! ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{
    positional_encoding, AttentionHeadConfig, AttentionKernel, Bound, Conv1d, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, MultiScaleConv, MultiScaleConvConfig, ParamSet,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{modality} input has shape {got:?}, model expects {expected:?}")]
    DimMismatch {
        modality: Modality,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("non-finite activations after {layer}")]
    Numeric { layer: String },
    #[error("unknown ablation {0:?} (expected vision_stream, wifi_stream, multiscale_cnn or linear_attention)")]
    UnknownAblation(String),
    #[error("parameter mismatch: {0}")]
    Params(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Wifi,
    Vision,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Wifi => "wifi",
            Modality::Vision => "vision",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Streams {
    Both,
    WifiOnly,
    VisionOnly,
}

impl FromStr for Streams {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Streams::Both),
            "wifi_only" => Ok(Streams::WifiOnly),
            "vision_only" => Ok(Streams::VisionOnly),
            other => Err(ModelError::Config(format!("unknown streams value {other:?}"))),
        }
    }
}

/// What the sub-layer residual connections add back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residual {
    /// `sublayer(LN(z)) + LN(z)`.
    Normalized,
    /// `sublayer(LN(z)) + z`.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub kernel_sizes: Vec<usize>,
    pub attention_kernel: AttentionKernel,
    pub l_w: usize,
    pub d_w: usize,
    pub l_v: usize,
    pub d_v: usize,
    pub streams: Streams,
    pub use_multiscale: bool,
    pub scale_qk: bool,
    pub residual: Residual,
    /// Temporal convolution width of the modality embeddings.
    pub embed_kernel: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            kernel_sizes: vec![1, 3, 5],
            attention_kernel: AttentionKernel::Linear,
            l_w: 100,
            d_w: 30,
            l_v: 16,
            d_v: 256,
            streams: Streams::Both,
            use_multiscale: true,
            scale_qk: true,
            residual: Residual::Normalized,
            embed_kernel: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for gradient checks and overfit runs:
    /// 6x4 CSI sequences and 4 patches of 4x4x1 pixels.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            l_w: 6,
            d_w: 4,
            l_v: 4,
            d_v: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("l_w", self.l_w),
            ("d_w", self.d_w),
            ("l_v", self.l_v),
            ("d_v", self.d_v),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "d_model must be even, got {}",
                self.d_model
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.embed_kernel.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "embed_kernel must be odd, got {}",
                self.embed_kernel
            )));
        }
        self.multiscale_config().validate()?;
        Ok(())
    }

    fn multiscale_config(&self) -> MultiScaleConvConfig {
        MultiScaleConvConfig {
            kernel_sizes: self.kernel_sizes.clone(),
            d_model: self.d_model,
        }
    }

    fn head_config(&self) -> Result<AttentionHeadConfig, ModelError> {
        Ok(AttentionHeadConfig::new(
            self.d_model,
            self.n_heads,
            self.attention_kernel,
            self.scale_qk,
        )?)
    }

    pub fn uses(&self, modality: Modality) -> bool {
        match (self.streams, modality) {
            (Streams::Both, _) => true,
            (Streams::WifiOnly, m) => m == Modality::Wifi,
            (Streams::VisionOnly, m) => m == Modality::Vision,
        }
    }

    /// Key-sorted JSON, the form stored in checkpoints.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }
}

/// Components removable for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    VisionStream,
    WifiStream,
    MultiscaleCnn,
    LinearAttention,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::VisionStream,
        Ablation::WifiStream,
        Ablation::MultiscaleCnn,
        Ablation::LinearAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::VisionStream => "vision_stream",
            Ablation::WifiStream => "wifi_stream",
            Ablation::MultiscaleCnn => "multiscale_cnn",
            Ablation::LinearAttention => "linear_attention",
        }
    }
}

impl FromStr for Ablation {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ModelError::UnknownAblation(s.to_string()))
    }
}

/// Returns `cfg` with exactly one component group removed.
pub fn ablate(cfg: &ModelConfig, which: Ablation) -> Result<ModelConfig, ModelError> {
    let mut out = cfg.clone();
    match which {
        Ablation::VisionStream => {
            if cfg.streams == Streams::VisionOnly {
                return Err(ModelError::Config(
                    "cannot remove the vision stream from a vision-only model".into(),
                ));
            }
            out.streams = Streams::WifiOnly;
        }
        Ablation::WifiStream => {
            if cfg.streams == Streams::WifiOnly {
                return Err(ModelError::Config(
                    "cannot remove the wifi stream from a wifi-only model".into(),
                ));
            }
            out.streams = Streams::VisionOnly;
        }
        Ablation::MultiscaleCnn => out.use_multiscale = false,
        Ablation::LinearAttention => out.attention_kernel = AttentionKernel::Softmax,
    }
    Ok(out)
}

/// One layer of a cross-modal stream: attention from the query-side
/// sequence into the other modality's embedding, then the multi-scale
/// convolution and the feed-forward sub-layers.
#[derive(Debug, Clone)]
pub struct CrossModalBlock {
    ln_query: LayerNorm,
    ln_source: LayerNorm,
    attn: MultiHeadAttention,
    multiscale: Option<(LayerNorm, MultiScaleConv)>,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
    residual: Residual,
}

impl CrossModalBlock {
    fn new(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let d = cfg.d_model;
        let ln_query = LayerNorm::new(params, &format!("{name}.ln_query"), d);
        let ln_source = LayerNorm::new(params, &format!("{name}.ln_source"), d);
        let attn = MultiHeadAttention::new(params, rng, &format!("{name}.attn"), cfg.head_config()?, d, d)?;
        let multiscale = if cfg.use_multiscale {
            let ln = LayerNorm::new(params, &format!("{name}.ln_multiscale"), d);
            let conv = MultiScaleConv::new(params, rng, &format!("{name}.multiscale"), &cfg.multiscale_config())?;
            Some((ln, conv))
        } else {
            None
        };
        let ln_ffn = LayerNorm::new(params, &format!("{name}.ln_ffn"), d);
        let ffn = FeedForward::new(params, rng, &format!("{name}.ffn"), d, cfg.d_ff);
        Ok(Self {
            ln_query,
            ln_source,
            attn,
            multiscale,
            ln_ffn,
            ffn,
            residual: cfg.residual,
        })
    }

    fn residual_of(&self, raw: Var, normed: Var) -> Var {
        match self.residual {
            Residual::Normalized => normed,
            Residual::Raw => raw,
        }
    }

    /// `z_prev` is `[l_query, d_model]`, `source` is the other modality's
    /// layer-0 embedding. Output keeps the query length.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z_prev: Var, source: Var) -> Result<Var, TensorError> {
        let q = self.ln_query.forward(tape, bound, z_prev)?;
        let kv = self.ln_source.forward(tape, bound, source)?;
        let attended = self.attn.forward(tape, bound, q, kv)?;
        let z_hat = tape.add(attended, self.residual_of(z_prev, q))?;

        let z_mid = match &self.multiscale {
            Some((ln, conv)) => {
                let n = ln.forward(tape, bound, z_hat)?;
                let local = conv.forward(tape, bound, n)?;
                tape.add(local, self.residual_of(z_hat, n))?
            }
            None => z_hat,
        };

        let n = self.ln_ffn.forward(tape, bound, z_mid)?;
        let h = self.ffn.forward(tape, bound, n)?;
        tape.add(h, self.residual_of(z_mid, n))
    }
}

#[derive(Debug, Clone)]
struct SelfAttentionBlock {
    ln: LayerNorm,
    attn: MultiHeadAttention,
    residual: Residual,
}

impl SelfAttentionBlock {
    fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var, TensorError> {
        let n = self.ln.forward(tape, bound, z)?;
        let a = self.attn.forward(tape, bound, n, n)?;
        let res = match self.residual {
            Residual::Normalized => n,
            Residual::Raw => z,
        };
        tape.add(a, res)
    }
}

#[derive(Debug, Clone)]
struct Stream {
    name: &'static str,
    query: Modality,
    source: Modality,
    blocks: Vec<CrossModalBlock>,
    self_attn: SelfAttentionBlock,
}

#[derive(Debug, Clone)]
pub struct TransFusionModel {
    cfg: ModelConfig,
    params: ParamSet,
    wifi_embed: Option<Conv1d>,
    vision_embed: Option<Conv1d>,
    streams: Vec<Stream>,
    head_hidden: Linear,
    head_out: Linear,
}

impl TransFusionModel {
    /// Builds and initializes every parameter deterministically from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let d = cfg.d_model;

        let wifi_embed = cfg
            .uses(Modality::Wifi)
            .then(|| Conv1d::new(&mut params, &mut rng, "wifi_embed", cfg.embed_kernel, cfg.d_w, d))
            .transpose()?;
        let vision_embed = cfg
            .uses(Modality::Vision)
            .then(|| Conv1d::new(&mut params, &mut rng, "vision_embed", cfg.embed_kernel, cfg.d_v, d))
            .transpose()?;

        let layout: &[(&'static str, Modality, Modality)] = match cfg.streams {
            Streams::Both => &[
                ("w2v", Modality::Vision, Modality::Wifi),
                ("v2w", Modality::Wifi, Modality::Vision),
            ],
            Streams::WifiOnly => &[("w2w", Modality::Wifi, Modality::Wifi)],
            Streams::VisionOnly => &[("v2v", Modality::Vision, Modality::Vision)],
        };
        let mut streams = Vec::with_capacity(layout.len());
        for &(name, query, source) in layout {
            let blocks = (0..cfg.n_layers)
                .map(|i| CrossModalBlock::new(&mut params, &mut rng, &format!("{name}.block{i}"), cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let self_attn = SelfAttentionBlock {
                ln: LayerNorm::new(&mut params, &format!("{name}.self_attn.ln"), d),
                attn: MultiHeadAttention::new(
                    &mut params,
                    &mut rng,
                    &format!("{name}.self_attn.attn"),
                    cfg.head_config()?,
                    d,
                    d,
                )?,
                residual: cfg.residual,
            };
            streams.push(Stream {
                name,
                query,
                source,
                blocks,
                self_attn,
            });
        }

        let head_hidden = Linear::new(&mut params, &mut rng, "head.hidden", d * streams.len(), d, true);
        let head_out = Linear::new(&mut params, &mut rng, "head.out", d, 1, true);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            wifi_embed,
            vision_embed,
            streams,
            head_hidden,
            head_out,
        })
    }

    /// Builds the architecture for `cfg` and replaces its parameters by the
    /// named tensors in `named` (which must match exactly).
    pub fn from_named_params(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut model = Self::build(cfg)?;
        if named.len() != model.params.len() {
            return Err(ModelError::Params(format!(
                "expected {} tensors, got {}",
                model.params.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| ModelError::Params(format!("unexpected parameter {name}")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(ModelError::Params(format!(
                    "{name}: shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.with_grad(true);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, modality: Modality, shape: &[usize]) -> Result<(), ModelError> {
        let expected = match modality {
            Modality::Wifi => vec![self.cfg.l_w, self.cfg.d_w],
            Modality::Vision => vec![self.cfg.l_v, self.cfg.d_v],
        };
        if shape != expected.as_slice() {
            return Err(ModelError::DimMismatch {
                modality,
                got: shape.to_vec(),
                expected,
            });
        }
        Ok(())
    }

    fn ensure_finite(tape: &Tape, v: Var, layer: impl FnOnce() -> String) -> Result<(), ModelError> {
        if tape.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(ModelError::Numeric { layer: layer() })
        }
    }

    /// Temporal convolution to `d_model` plus the sinusoidal position table.
    /// Returns `None` for a modality the configuration does not use.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, modality: Modality, x: Var) -> Result<Option<Var>, ModelError> {
        let conv = match modality {
            Modality::Wifi => &self.wifi_embed,
            Modality::Vision => &self.vision_embed,
        };
        let Some(conv) = conv else { return Ok(None) };
        self.check_input(modality, tape.shape(x))?;
        let len = tape.shape(x)[0];
        let h = conv.forward(tape, bound, x)?;
        let pe = tape.constant(positional_encoding(len, self.cfg.d_model)?)?;
        let z = tape.add(h, pe)?;
        Self::ensure_finite(tape, z, || format!("{modality}_embed"))?;
        Ok(Some(z))
    }

    /// Predicted count for one sample as a `[1]` tape node.
    ///
    /// Inputs of a modality the configuration does not use are never read.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x_w: Var, x_v: Var) -> Result<Var, ModelError> {
        let z_w = self.embed(tape, bound, Modality::Wifi, x_w)?;
        let z_v = self.embed(tape, bound, Modality::Vision, x_v)?;
        let pick = |m: Modality| match m {
            Modality::Wifi => z_w.expect("wifi embedding present for configured stream"),
            Modality::Vision => z_v.expect("vision embedding present for configured stream"),
        };

        let mut finals = Vec::with_capacity(self.streams.len());
        for stream in &self.streams {
            let source = pick(stream.source);
            let mut z = pick(stream.query);
            for (i, block) in stream.blocks.iter().enumerate() {
                z = block.forward(tape, bound, z, source)?;
                Self::ensure_finite(tape, z, || format!("{}.block{i}", stream.name))?;
            }
            let z = stream.self_attn.forward(tape, bound, z)?;
            Self::ensure_finite(tape, z, || format!("{}.self_attn", stream.name))?;
            let len = tape.shape(z)[0];
            finals.push(tape.slice(z, 0, len - 1, len)?);
        }

        let fused = if finals.len() == 1 {
            finals[0]
        } else {
            tape.concat(&finals, 1)?
        };
        let h = self.head_hidden.forward(tape, bound, fused)?;
        let h = tape.relu(h)?;
        let out = self.head_out.forward(tape, bound, h)?;
        Self::ensure_finite(tape, out, || "head".to_string())?;
        Ok(tape.reshape(out, &[1])?)
    }

    /// Predictions for several samples recorded on one tape, as an `[m]` node.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        xs_w: &[Tensor],
        xs_v: &[Tensor],
    ) -> Result<Var, ModelError> {
        if xs_w.len() != xs_v.len() || xs_w.is_empty() {
            return Err(ModelError::Config(format!(
                "batch needs equal, non-zero sample counts (wifi {}, vision {})",
                xs_w.len(),
                xs_v.len()
            )));
        }
        let mut preds = Vec::with_capacity(xs_w.len());
        for (xw, xv) in xs_w.iter().zip(xs_v) {
            let xw = tape.constant(xw.clone())?;
            let xv = tape.constant(xv.clone())?;
            preds.push(self.forward(tape, bound, xw, xv)?);
        }
        Ok(if preds.len() == 1 {
            preds[0]
        } else {
            tape.concat(&preds, 0)?
        })
    }

    /// Gradient-free predictions, one per sample.
    pub fn predict(&self, xs_w: &[Tensor], xs_v: &[Tensor]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape)?;
        let preds = self.forward_batch(&mut tape, &bound, xs_w, xs_v)?;
        Ok(tape.value(preds).to_vec())
    }
}

/// Mean absolute error between `preds` and `labels` (both `[m]`).
pub fn l1_loss(tape: &mut Tape, preds: Var, labels: Var) -> Result<Var, ModelError> {
    let (ps, ls) = (tape.shape(preds), tape.shape(labels));
    if ps.len() != 1 || ps != ls {
        return Err(ModelError::Config(format!(
            "l1_loss needs equal-length vectors, got {ps:?} and {ls:?}"
        )));
    }
    let diff = tape.sub(labels, preds)?;
    let abs = tape.abs(diff)?;
    Ok(tape.mean(abs)?)
}
