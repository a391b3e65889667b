//! Finite-difference verification of every differentiable op, layer and
//! the end-to-end tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::layers::{
    attention, AttentionHeadConfig, AttentionKernel, Bound, Conv1d, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    MultiScaleConv, MultiScaleConvConfig, ParamSet,
};
use crate::model::{l1_loss, ModelConfig, TransFusionModel};
use crate::tensor::{grad_check_many, GradCheckConfig, ReduceKind, Tape, Tensor, TensorError, Var};

pub const LAYER_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    /// Coordinates skipped because their stencil crossed a kink.
    pub flagged: usize,
    pub pass: bool,
}

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive shape")
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var, TensorError> {
    let r = tape.constant(r.clone())?;
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

fn run(name: &str, seed: u64, tol: f64, f: Loss, inputs: &[Tensor]) -> Result<CheckResult, TensorError> {
    let cfg = GradCheckConfig {
        tol,
        ..GradCheckConfig::default()
    };
    let r = grad_check_many(f, inputs, cfg)?;
    Ok(CheckResult {
        name: name.to_string(),
        seed,
        max_rel_err: r.max_rel_err,
        tol,
        checked: r.checked,
        flagged: r.flagged.len(),
        pass: r.pass,
    })
}

/// A projected unary op check on a `[3, 4]` input.
fn unary(
    name: &str,
    seed: u64,
    rng: &mut ChaCha8Rng,
    lo: f64,
    hi: f64,
    op: fn(&mut Tape, Var) -> Result<Var, TensorError>,
) -> Result<CheckResult, TensorError> {
    let x = uniform(rng, &[3, 4], lo, hi);
    let r = uniform(rng, &[3, 4], -1.0, 1.0);
    run(
        name,
        seed,
        LAYER_TOL,
        Box::new(move |t, v| {
            let y = op(t, v[0])?;
            project(t, y, &r)
        }),
        &[x],
    )
}

/// Binds a parameter set whose tensors are the leading `vars`.
fn bound_from(vars: &[Var], n: usize) -> Bound {
    Bound::from_vars(vars[..n].to_vec())
}

/// Layer-level checks for one seed, relative tolerance [`LAYER_TOL`].
pub fn layer_checks(seed: u64) -> Result<Vec<CheckResult>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    out.push(unary("relu", seed, &mut rng, -1.0, 1.0, Tape::relu)?);
    out.push(unary("exp", seed, &mut rng, -1.0, 1.0, Tape::exp)?);
    out.push(unary("neg", seed, &mut rng, -1.0, 1.0, Tape::neg)?);
    out.push(unary("abs", seed, &mut rng, -1.0, 1.0, Tape::abs)?);
    out.push(unary("elu_plus_one", seed, &mut rng, -2.0, 2.0, Tape::elu_plus_one)?);
    out.push(unary("clamp_min", seed, &mut rng, -1.0, 1.0, |t, v| {
        t.clamp_min(v, 0.1)
    })?);
    out.push(unary("scalar_mul", seed, &mut rng, -1.0, 1.0, |t, v| {
        t.scalar_mul(v, -2.5)
    })?);
    out.push(unary("transpose", seed, &mut rng, -1.0, 1.0, |t, v| {
        let y = t.transpose(v)?;
        t.transpose(y)
    })?);
    out.push(unary("reshape", seed, &mut rng, -1.0, 1.0, |t, v| {
        let y = t.reshape(v, &[2, 6])?;
        t.reshape(y, &[3, 4])
    })?);
    out.push(unary("slice_concat", seed, &mut rng, -1.0, 1.0, |t, v| {
        let a = t.slice(v, 1, 0, 1)?;
        let b = t.slice(v, 1, 1, 4)?;
        t.concat(&[b, a], 1)
    })?);
    out.push(unary("softmax_rows", seed, &mut rng, -2.0, 2.0, Tape::softmax_rows)?);
    for (label, axis, kind) in [
        ("reduce_sum_axis0", Some(0), ReduceKind::Sum),
        ("reduce_mean_axis1", Some(1), ReduceKind::Mean),
        ("reduce_max_axis1", Some(1), ReduceKind::Max),
        ("reduce_mean_all", None, ReduceKind::Mean),
    ] {
        let x = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        out.push(run(
            label,
            seed,
            LAYER_TOL,
            Box::new(move |t, v| {
                let y = t.reduce(v[0], axis, kind)?;
                let y = t.exp(y)?;
                t.sum(y)
            }),
            &[x],
        )?);
    }

    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let r = uniform(&mut rng, &[3, 2], -1.0, 1.0);
    out.push(run(
        "matmul",
        seed,
        LAYER_TOL,
        Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, &r)
        }),
        &[a, b],
    )?);

    for (label, op) in [
        ("add", Tape::add as fn(&mut Tape, Var, Var) -> Result<Var, TensorError>),
        ("sub", Tape::sub),
        ("mul", Tape::mul),
        ("div", Tape::div),
    ] {
        let x = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let y = uniform(&mut rng, &[3, 4], 0.5, 1.5);
        let s = uniform(&mut rng, &[1], 0.5, 1.5);
        let r = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        out.push(run(
            label,
            seed,
            LAYER_TOL,
            Box::new(move |t, v| {
                let z = op(t, v[0], v[1])?;
                let z = op(t, z, v[2])?;
                project(t, z, &r)
            }),
            &[x, y, s],
        )?);
    }

    let x = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let row = uniform(&mut rng, &[3], -1.0, 1.0);
    let col = uniform(&mut rng, &[2], -1.0, 1.0);
    let r = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    out.push(run(
        "expand_rows_cols",
        seed,
        LAYER_TOL,
        Box::new(move |t, v| {
            let er = t.expand_rows(v[1], 2)?;
            let ec = t.expand_cols(v[2], 3)?;
            let z = t.add(v[0], er)?;
            let z = t.mul(z, ec)?;
            project(t, z, &r)
        }),
        &[x, row, col],
    )?);

    let x = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    let g = uniform(&mut rng, &[6], 0.5, 1.5);
    let bias = uniform(&mut rng, &[6], -0.5, 0.5);
    let r = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    out.push(run(
        "layer_norm",
        seed,
        LAYER_TOL,
        Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], crate::layers::LAYER_NORM_EPS)?;
            project(t, y, &r)
        }),
        &[x, g, bias],
    )?);

    for k in [1usize, 3, 5] {
        let x = uniform(&mut rng, &[6, 3], -1.0, 1.0);
        let w = uniform(&mut rng, &[k, 3, 2], -1.0, 1.0);
        let bias = uniform(&mut rng, &[2], -1.0, 1.0);
        let r = uniform(&mut rng, &[6, 2], -1.0, 1.0);
        out.push(run(
            &format!("conv1d_k{k}"),
            seed,
            LAYER_TOL,
            Box::new(move |t, v| {
                let y = t.conv1d(v[0], v[1], Some(v[2]))?;
                project(t, y, &r)
            }),
            &[x, w, bias],
        )?);
    }

    for kernel in [AttentionKernel::Softmax, AttentionKernel::Linear] {
        let q = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let k = uniform(&mut rng, &[5, 4], -1.0, 1.0);
        let vv = uniform(&mut rng, &[5, 2], -1.0, 1.0);
        let r = uniform(&mut rng, &[3, 2], -1.0, 1.0);
        let name = match kernel {
            AttentionKernel::Softmax => "attention_softmax",
            AttentionKernel::Linear => "attention_linear",
        };
        out.push(run(
            name,
            seed,
            LAYER_TOL,
            Box::new(move |t, v| {
                let y = attention(t, v[0], v[1], v[2], kernel, true)?;
                project(t, y, &r)
            }),
            &[q, k, vv],
        )?);
    }

    // Parameterized layers: parameters first, then the layer input(s).
    let layer = |name: &str,
                 params: ParamSet,
                 inputs: Vec<Tensor>,
                 out_shape: &[usize],
                 fwd: Box<dyn Fn(&mut Tape, &Bound, &[Var]) -> Result<Var, TensorError>>,
                 rng: &mut ChaCha8Rng|
     -> Result<CheckResult, TensorError> {
        let n = params.len();
        let mut all: Vec<Tensor> = params.tensors().to_vec();
        all.extend(inputs);
        let r = uniform(rng, out_shape, -1.0, 1.0);
        run(
            name,
            seed,
            LAYER_TOL,
            Box::new(move |t, v| {
                let bound = bound_from(v, n);
                let y = fwd(t, &bound, &v[n..])?;
                project(t, y, &r)
            }),
            &all,
        )
    };

    let mut ps = ParamSet::new();
    let lin = Linear::new(&mut ps, &mut rng, "lin", 4, 3, true);
    let x = uniform(&mut rng, &[5, 4], -1.0, 1.0);
    out.push(layer(
        "linear",
        ps,
        vec![x],
        &[5, 3],
        Box::new(move |t, b, v| lin.forward(t, b, v[0])),
        &mut rng,
    )?);

    let mut ps = ParamSet::new();
    let ln = LayerNorm::new(&mut ps, "ln", 4);
    let x = uniform(&mut rng, &[5, 4], -1.0, 1.0);
    out.push(layer(
        "layer_norm_module",
        ps,
        vec![x],
        &[5, 4],
        Box::new(move |t, b, v| ln.forward(t, b, v[0])),
        &mut rng,
    )?);

    let mut ps = ParamSet::new();
    let conv = Conv1d::new(&mut ps, &mut rng, "conv", 3, 4, 4)?;
    let x = uniform(&mut rng, &[5, 4], -1.0, 1.0);
    out.push(layer(
        "conv1d_module",
        ps,
        vec![x],
        &[5, 4],
        Box::new(move |t, b, v| conv.forward(t, b, v[0])),
        &mut rng,
    )?);

    let mut ps = ParamSet::new();
    let ms_cfg = MultiScaleConvConfig {
        kernel_sizes: vec![1, 3, 5],
        d_model: 4,
    };
    let ms = MultiScaleConv::new(&mut ps, &mut rng, "ms", &ms_cfg)?;
    let x = uniform(&mut rng, &[6, 4], -1.0, 1.0);
    out.push(layer(
        "multiscale_conv",
        ps,
        vec![x],
        &[6, 4],
        Box::new(move |t, b, v| ms.forward(t, b, v[0])),
        &mut rng,
    )?);

    let mut ps = ParamSet::new();
    let ffn = FeedForward::new(&mut ps, &mut rng, "ffn", 4, 8);
    let x = uniform(&mut rng, &[5, 4], -1.0, 1.0);
    out.push(layer(
        "feed_forward",
        ps,
        vec![x],
        &[5, 4],
        Box::new(move |t, b, v| ffn.forward(t, b, v[0])),
        &mut rng,
    )?);

    for kernel in [AttentionKernel::Softmax, AttentionKernel::Linear] {
        let mut ps = ParamSet::new();
        let cfg = AttentionHeadConfig::new(4, 2, kernel, true)?;
        let mha = MultiHeadAttention::new(&mut ps, &mut rng, "mha", cfg, 4, 4)?;
        let xq = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let xkv = uniform(&mut rng, &[5, 4], -1.0, 1.0);
        let name = match kernel {
            AttentionKernel::Softmax => "multi_head_softmax",
            AttentionKernel::Linear => "multi_head_linear",
        };
        out.push(layer(
            name,
            ps,
            vec![xq, xkv],
            &[3, 4],
            Box::new(move |t, b, v| mha.forward(t, b, v[0], v[1])),
            &mut rng,
        )?);
    }

    let preds = uniform(&mut rng, &[6], -1.0, 4.0);
    let labels = uniform(&mut rng, &[6], 0.0, 3.0);
    out.push(run(
        "l1_loss",
        seed,
        LAYER_TOL,
        Box::new(move |t, v| l1_loss(t, v[0], v[1]).map_err(|e| TensorError::InvalidArgument(e.to_string()))),
        &[preds, labels],
    )?);

    Ok(out)
}

/// L1 loss of the tiny model on two random samples, differentiated with
/// respect to every parameter and both inputs; tolerance [`END_TO_END_TOL`].
pub fn end_to_end_check(seed: u64, kernel: AttentionKernel) -> Result<CheckResult, TensorError> {
    let cfg = ModelConfig {
        seed,
        attention_kernel: kernel,
        ..ModelConfig::tiny()
    };
    let model = TransFusionModel::build(&cfg).map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = model.params().len();
    let mut inputs: Vec<Tensor> = model
        .params()
        .tensors()
        .iter()
        .map(|t| t.clone().with_grad(false))
        .collect();
    for _ in 0..2 {
        inputs.push(uniform(&mut rng, &[cfg.l_w, cfg.d_w], -1.0, 1.0));
        inputs.push(uniform(&mut rng, &[cfg.l_v, cfg.d_v], 0.0, 1.0));
    }
    let labels = Tensor::from_vec(vec![rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)])?;
    let name = match kernel {
        AttentionKernel::Softmax => "end_to_end_softmax",
        AttentionKernel::Linear => "end_to_end_linear",
    };
    run(
        name,
        seed,
        END_TO_END_TOL,
        Box::new(move |t, v| {
            let bound = bound_from(v, n);
            let map = |e: crate::model::ModelError| TensorError::InvalidArgument(e.to_string());
            let p0 = model.forward(t, &bound, v[n], v[n + 1]).map_err(map)?;
            let p1 = model.forward(t, &bound, v[n + 2], v[n + 3]).map_err(map)?;
            let preds = t.concat(&[p0, p1], 0)?;
            let y = t.constant(labels.clone())?;
            l1_loss(t, preds, y).map_err(map)
        }),
        &inputs,
    )
}

/// Layer checks plus both end-to-end checks for every seed.
pub fn gradient_suite(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<CheckResult>, TensorError> {
    let mut out = Vec::new();
    for seed in seeds {
        out.extend(layer_checks(seed)?);
        out.push(end_to_end_check(seed, AttentionKernel::Linear)?);
        out.push(end_to_end_check(seed, AttentionKernel::Softmax)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes() {
        let results = gradient_suite([7]).unwrap();
        for r in &results {
            assert!(r.pass, "{r:?}");
            assert!(r.checked > 0, "{r:?}");
        }
        assert!(results.len() > 30);
    }
}
