//! Central-difference checks of the analytic gradients, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{fuse, run_block, BlockSpec, ConnMethod, FuseVars, FusionKind, SchemeId, TransformOrder, TransformVars};
use crate::model::{ModelConfig, SeparationModel};
use crate::nnops::kernels::{Conv1dAttrs, Padding};
use crate::nnops::tape::{Graph, Var};
use crate::objectives::{pit_loss, pit_loss_grad};
use crate::params::{ParamKey, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one check. `tensors` lists the error of every checked tensor.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub tensors: Vec<(String, f64)>,
}

impl CheckResult {
    pub fn max_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.1).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_err() < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)` over whole tensors.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Random values bounded away from zero, for ops with a kink at the origin.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|v| if v.abs() < 0.1 { v + 0.2f64.copysign(v) } else { v })
}

/// Checks every input of `f` against central differences of the scalar
/// `<f(inputs), proj>` where `proj` is a fixed random tensor.
pub fn check_op<F>(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok((g, vars, y))
    };
    let (g, vars, y) = eval(&inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let proj = random(&mut rng, g.value(y).shape());
    let grads = g.backward(&[(y, proj.clone())])?;
    let mut tensors = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v)?;
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let probe = |delta: f64| -> Result<f64> {
                let mut xs = inputs.clone();
                xs[i].data_mut()[j] += delta;
                let (g, _, y) = eval(&xs)?;
                Ok(g.value(y).dot(&proj))
            };
            *slot = (probe(STEP)? - probe(-STEP)?) / (2.0 * STEP);
        }
        tensors.push((format!("input{i}"), rel_err(analytic.data(), &numeric)));
    }
    Ok(CheckResult {
        name: name.to_string(),
        tensors,
    })
}

/// Gradient check of every operator, a fusion unit and a small block.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    out.push(check_op(
        "conv1d stride 2 groups 3",
        vec![random(r, &[3, 16]), random(r, &[3, 1, 5]), random(r, &[3])],
        seed,
        |g, v| g.conv1d(v[0], v[1], Some(v[2]), Conv1dAttrs::new(2, 3, Padding::Valid)),
    )?);
    out.push(check_op(
        "conv1d same padding",
        vec![random(r, &[4, 12]), random(r, &[6, 2, 5]), random(r, &[6])],
        seed,
        |g, v| g.conv1d(v[0], v[1], Some(v[2]), Conv1dAttrs::new(2, 2, Padding::Same)),
    )?);
    out.push(check_op(
        "transposed_conv1d",
        vec![random(r, &[2, 7]), random(r, &[2, 3, 21])],
        seed,
        |g, v| g.transposed_conv1d(v[0], v[1], 10),
    )?);
    out.push(check_op(
        "depthwise_separable_conv",
        vec![
            random(r, &[4, 10]),
            random(r, &[4, 1, 5]),
            random(r, &[4]),
            random(r, &[6, 4, 1]),
            random(r, &[6]),
        ],
        seed,
        |g, v| {
            let h = g.conv1d(v[0], v[1], Some(v[2]), Conv1dAttrs::new(2, 4, Padding::Same))?;
            g.conv1d(h, v[3], Some(v[4]), Conv1dAttrs::POINTWISE)
        },
    )?);
    out.push(check_op("interpolate", vec![random(r, &[3, 5])], seed, |g, v| g.interpolate(v[0], 4))?);
    out.push(check_op("pixel_shuffle_1d", vec![random(r, &[6, 5])], seed, |g, v| g.pixel_shuffle(v[0], 2))?);
    out.push(check_op("relu", vec![random_off_zero(r, &[3, 9])], seed, |g, v| Ok(g.relu(v[0])))?);
    out.push(check_op(
        "prelu",
        vec![random_off_zero(r, &[3, 9]), Tensor::full(&[1], 0.25)],
        seed,
        |g, v| g.prelu(v[0], v[1]),
    )?);
    out.push(check_op(
        "prelu per channel",
        vec![random_off_zero(r, &[3, 9]), random(r, &[3])],
        seed,
        |g, v| g.prelu(v[0], v[1]),
    )?);
    out.push(check_op(
        "global_layer_norm",
        vec![random(r, &[4, 8]), random(r, &[4]), random(r, &[4])],
        seed,
        |g, v| g.global_layer_norm(v[0], v[1], v[2]),
    )?);
    out.push(check_op(
        "concat_channels",
        vec![random(r, &[2, 6]), random(r, &[1, 6])],
        seed,
        |g, v| g.concat_channels(v),
    )?);
    out.push(check_op(
        "add",
        vec![random(r, &[2, 6]), random(r, &[2, 6]), random(r, &[2, 6])],
        seed,
        |g, v| g.add(v),
    )?);
    out.push(check_op("mul", vec![random(r, &[3, 4]), random(r, &[3, 4])], seed, |g, v| g.mul(v[0], v[1]))?);
    out.push(check_op("pad_and_trim", vec![random(r, &[2, 7])], seed, |g, v| {
        let p = g.pad_frames(v[0], 3)?;
        let i = g.interpolate(p, 2)?;
        g.trim_frames(i, 11)
    })?);
    out.push(check_op("narrow_channels", vec![random(r, &[5, 4])], seed, |g, v| g.narrow_channels(v[0], 1, 3))?);

    let c = 3;
    out.push(check_op(
        "fuse concat",
        vec![
            random(r, &[c, 8]),
            random(r, &[c, 8]),
            random(r, &[c, 2 * c, 1]),
            random(r, &[c]),
            Tensor::full(&[1], 0.25),
            random(r, &[c]),
            random(r, &[c]),
        ],
        seed,
        |g, v| {
            let p = FuseVars {
                conv: Some((v[2], v[3])),
                transform: TransformVars {
                    prelu: v[4],
                    gain: v[5],
                    bias: v[6],
                },
            };
            fuse(g, &v[..2], FusionKind::Concat, p, TransformOrder::PreluThenNorm)
        },
    )?);

    out.push(block_check(SchemeId::AFrcnn, ConnMethod::B, FusionKind::Concat, seed)?);
    out.push(block_check(SchemeId::AFrcnn, ConnMethod::A, FusionKind::Sum, seed)?);
    Ok(out)
}

/// Checks one A-FRCNN-style block (C = 8, S = 3) with every tensor of the
/// block treated as a differentiable input.
pub fn block_check(scheme: SchemeId, method: ConnMethod, fusion: FusionKind, seed: u64) -> Result<CheckResult> {
    let cfg = ModelConfig {
        enc_channels: 8,
        channels: 8,
        stages: 3,
        blocks: 1,
        scheme,
        method,
        fusion,
        ..ModelConfig::default()
    };
    let spec = BlockSpec::new(scheme, cfg.stages, method, fusion, cfg.transform_order)?;
    let dims = cfg.dims();
    let keys: Vec<ParamKey> = spec.ties.keys().into_iter().collect();
    let specs: Vec<_> = keys.iter().flat_map(|k| k.specs(&dims)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::init(&specs, &mut rng);
    // Non-default affine values so the check exercises the gain and bias paths.
    for s in &specs {
        if s.name.ends_with("gain") || s.name.ends_with("bias") {
            let t = random(&mut rng, &s.shape);
            store.insert(s.name.clone(), t);
        }
    }
    let input = random(&mut rng, &[8, 16]);
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let mut inputs = vec![input];
    inputs.extend(names.iter().map(|n| store.get(n).expect("spec").clone()));
    let mut result = check_op(&format!("run_block {scheme} method {method:?} {fusion}"), inputs, seed, |g, v| {
        let mut st = ParamStore::default();
        for (i, n) in names.iter().enumerate() {
            st.insert(n.clone(), g.value(v[i + 1]).clone());
        }
        run_block_with_inputs(g, &spec, &st, &dims, v[0], &names, &v[1..])
    })?;
    for (i, t) in result.tensors.iter_mut().enumerate().skip(1) {
        t.0 = names[i - 1].clone();
    }
    Ok(result)
}

fn run_block_with_inputs(
    g: &mut Graph<f64>,
    spec: &BlockSpec,
    store: &ParamStore<f64>,
    dims: &crate::params::Dims,
    x: Var,
    names: &[String],
    vars: &[Var],
) -> Result<Var> {
    // Parameters are tape inputs here, so their gradients are tracked.
    g.alias_params(names.iter().cloned().zip(vars.iter().copied()));
    Ok(run_block(g, spec, store, dims, &[x])?[0])
}

/// End-to-end check of the pipeline under the PIT SI-SNR loss. Every model
/// tensor is checked.
pub fn model_check(cfg: ModelConfig, samples: usize, seed: u64) -> Result<CheckResult> {
    let model = SeparationModel::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    let mix: Vec<f64> = (0..samples).map(|_| rng.random_range(-0.5..0.5)).collect();
    let refs: Vec<Vec<f64>> = (0..cfg.speakers)
        .map(|_| (0..samples).map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect();

    let loss_of = |m: &SeparationModel<f64>| -> Result<f64> {
        let ests = m.forward(&mix)?;
        Ok(pit_loss(&ests, &refs)?.loss)
    };

    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(&[1, samples], mix.clone())?);
    let out = model.forward_graph(&mut g, x)?;
    let ests: Vec<Vec<f64>> = out.estimates.iter().map(|&v| g.value(v).data().to_vec()).collect();
    let (_, dl) = pit_loss_grad(&ests, &refs)?;
    let seeds: Vec<(Var, Tensor<f64>)> = out
        .estimates
        .iter()
        .zip(dl)
        .map(|(&v, d)| Ok((v, Tensor::from_vec(&[1, samples], d)?)))
        .collect::<Result<_>>()?;
    let grads = g.backward(&seeds)?.params();

    let mut tensors = Vec::new();
    let names: Vec<String> = model.store.names().cloned().collect();
    for name in names {
        let analytic = grads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(model.store.get(&name).expect("name").shape()));
        let n = analytic.len();
        let mut numeric = vec![0.0; n];
        let mut probe = model.clone();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.store.get(&name)?.data()[j];
            probe.store.get_mut(&name).expect("name").data_mut()[j] = orig + STEP;
            let up = loss_of(&probe)?;
            probe.store.get_mut(&name).expect("name").data_mut()[j] = orig - STEP;
            let down = loss_of(&probe)?;
            probe.store.get_mut(&name).expect("name").data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * STEP);
        }
        tensors.push((name, rel_err(analytic.data(), &numeric)));
    }
    Ok(CheckResult {
        name: format!("pipeline {} C={} S={} B={} T={samples}", cfg.scheme, cfg.channels, cfg.stages, cfg.blocks),
        tensors,
    })
}

/// Configuration of the small end-to-end check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        enc_channels: 8,
        channels: 8,
        stages: 3,
        blocks: 2,
        ..ModelConfig::default()
    }
}
