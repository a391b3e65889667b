//! Neural building blocks on top of the autodiff tape.

mod attention;
mod params;

pub use attention::{
    attention, AttentionHeadConfig, AttentionKernel, MultiHeadAttention, LINEAR_ATTENTION_DENOM_FLOOR,
};
pub use params::{uniform_init, Bound, ParamId, ParamSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x · w (+ b)`, the bias broadcast over rows.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => {
            let rows = tape.shape(y)[0];
            let b = tape.expand_rows(b, rows)?;
            tape.add(y, b)
        }
        None => Ok(y),
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = params.add(format!("{name}.weight"), uniform_init(rng, &[d_in, d_out], d_in));
        let bias = bias.then(|| params.add(format!("{name}.bias"), params::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, TensorError> {
        linear(tape, x, bound.var(self.weight), self.bias.map(|b| bound.var(b)))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, d: usize) -> Self {
        let gain = params.add(format!("{name}.gain"), Tensor::full(&[d], 1.0).expect("positive width"));
        let bias = params.add(format!("{name}.bias"), params::zeros(&[d]));
        Self {
            gain,
            bias,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, bound.var(self.gain), bound.var(self.bias), self.eps)
    }
}

/// Same-padded temporal convolution `[len, d_in] -> [len, d_out]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub kernel_size: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Conv1d {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        kernel_size: usize,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self, TensorError> {
        if kernel_size.is_multiple_of(2) {
            return Err(TensorError::InvalidArgument(format!(
                "conv1d kernel size must be odd, got {kernel_size}"
            )));
        }
        let kernel = params.add(
            format!("{name}.kernel"),
            uniform_init(rng, &[kernel_size, d_in, d_out], kernel_size * d_in),
        );
        let bias = Some(params.add(format!("{name}.bias"), params::zeros(&[d_out])));
        Ok(Self {
            kernel,
            bias,
            kernel_size,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.conv1d(x, bound.var(self.kernel), self.bias.map(|b| bound.var(b)))
    }
}

/// Sinusoidal position table: `PE[pos, 2j] = sin(pos / 10000^(2j/d))`,
/// `PE[pos, 2j+1] = cos(pos / 10000^(2j/d))`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor, TensorError> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(TensorError::InvalidArgument(format!(
            "positional encoding width must be even, got {d}"
        )));
    }
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for j in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * j) as f64 / d as f64);
            data[pos * d + 2 * j] = angle.sin();
            data[pos * d + 2 * j + 1] = angle.cos();
        }
    }
    Tensor::new(&[len, d], data)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiScaleConvConfig {
    pub kernel_sizes: Vec<usize>,
    pub d_model: usize,
}

impl MultiScaleConvConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.kernel_sizes.is_empty() {
            return Err(TensorError::InvalidArgument(
                "multi-scale conv needs at least one kernel size".into(),
            ));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(TensorError::InvalidArgument(format!(
                "multi-scale kernel sizes must be odd, got {k}"
            )));
        }
        Ok(())
    }
}

/// Parallel same-padded convolutions, one per kernel size, summed and
/// passed through relu.
#[derive(Debug, Clone)]
pub struct MultiScaleConv {
    pub branches: Vec<Conv1d>,
}

impl MultiScaleConv {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &MultiScaleConvConfig,
    ) -> Result<Self, TensorError> {
        cfg.validate()?;
        let branches = cfg
            .kernel_sizes
            .iter()
            .map(|&k| Conv1d::new(params, rng, &format!("{name}.k{k}"), k, cfg.d_model, cfg.d_model))
            .collect::<Result<_, _>>()?;
        Ok(Self { branches })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, TensorError> {
        let mut acc: Option<Var> = None;
        for branch in &self.branches {
            let y = branch.forward(tape, bound, x)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        let summed = acc.expect("validated non-empty");
        tape.relu(summed)
    }
}

/// `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d_model: usize, d_ff: usize) -> Self {
        Self {
            fc1: Linear::new(params, rng, &format!("{name}.fc1"), d_model, d_ff, true),
            fc2: Linear::new(params, rng, &format!("{name}.fc2"), d_ff, d_model, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = self.fc1.forward(tape, bound, x)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, bound, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.5, -1.0, 2.0, 3.0])).unwrap();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let zero = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = linear(&mut tape, x, eye, Some(zero)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let x = tape.constant(t(&[1, 2], &[1.0, 1.0])).unwrap();
        let w = tape.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let b = tape.constant(t(&[1], &[1.0])).unwrap();
        let y = linear(&mut tape, x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[3.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let b = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let c = tape.constant(t(&[1, 2], &[4.0, 4.0])).unwrap();
        let y = tape.layer_norm(c, g, b, LAYER_NORM_EPS).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);

        let x = tape.constant(t(&[1, 2], &[1.0, 3.0])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-9);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-9);

        // uniform gain: row mean equals mean of the shift vector
        let g3 = tape.constant(t(&[3], &[2.0, 2.0, 2.0])).unwrap();
        let b3 = tape.constant(t(&[3], &[0.5, -1.0, 3.0])).unwrap();
        let x = tape.constant(t(&[2, 3], &[1.0, 7.0, -2.0, 0.3, 0.1, 9.0])).unwrap();
        let y = tape.layer_norm(x, g3, b3, LAYER_NORM_EPS).unwrap();
        for row in tape.value(y).chunks(3) {
            assert!((row.iter().sum::<f64>() / 3.0 - 2.5 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let w = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = tape.conv1d(x, w, None).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(4, 6).unwrap();
        assert_eq!(&pe.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(&[1, 0]) - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(4, 5).is_err());
        assert_eq!(positional_encoding(7, 8).unwrap(), positional_encoding(7, 8).unwrap());
    }

    #[test]
    fn multiscale_single_identity_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let cfg = MultiScaleConvConfig {
            kernel_sizes: vec![1],
            d_model: 2,
        };
        let ms = MultiScaleConv::new(&mut params, &mut rng, "ms", &cfg).unwrap();
        params
            .get_mut(ms.branches[0].kernel)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape).unwrap();
        let x = tape.constant(t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        let y = ms.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let bad = MultiScaleConvConfig {
            kernel_sizes: vec![1, 4],
            d_model: 2,
        };
        assert!(bad.validate().is_err());
        assert!(MultiScaleConvConfig {
            kernel_sizes: vec![],
            d_model: 2
        }
        .validate()
        .is_err());
    }

    #[test]
    fn ffn_identity_and_dead_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let ffn = FeedForward::new(&mut params, &mut rng, "ffn", 1, 1);
        params.get_mut(ffn.fc1.weight).data_mut()[0] = 1.0;
        params.get_mut(ffn.fc2.weight).data_mut()[0] = 1.0;
        params.get_mut(ffn.fc2.bias.unwrap()).data_mut()[0] = 0.25;

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape).unwrap();
        let x = tape.constant(t(&[1, 1], &[-1.0])).unwrap();
        let y = ffn.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y), &[0.25]);
        let x = tape.constant(t(&[1, 1], &[2.0])).unwrap();
        let y = ffn.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y), &[2.25]);
    }

    #[test]
    fn init_is_bounded_and_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let ta = uniform_init(&mut a, &[16, 4], 16);
        assert_eq!(ta, uniform_init(&mut b, &[16, 4], 16));
        assert!(ta.data().iter().all(|v| v.abs() <= 0.25));
    }
}
