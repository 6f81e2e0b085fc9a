//! Numerical oracle suites shared by `jetflow check` and the test suite.
//!
//! Every suite builds its own micro models from a seed and reports one
//! [`CheckResult`] per check with the tolerance it was held to.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{SoftSampler, Temperatures};
use crate::config::{Precision, RunConfig};
use crate::data::{synth_shapes, SynthShapesSpec};
use crate::engine::{Conditioning, JetFormer, ModelShape, Trainer};
use crate::error::{Error, Result};
use crate::factoring::{slogdet, FactorMode, LinearInit};
use crate::flow::{Flow, FlowConfig};
use crate::gmm::{cfg_sample, gmm_nll, gmm_sample, GmmBatch, GmmParams};
use crate::nn::{Ctx, ParamStore};
use crate::rng::{stream, Purpose, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Measured error (or statistic) compared against `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckResult {
    /// Passes when `value < tolerance`.
    pub fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value < tolerance,
        }
    }

    /// Exact equality check; `value` is 0 or 1.
    pub fn exact(name: impl Into<String>, equal: bool) -> Self {
        Self {
            name: name.into(),
            value: if equal { 0.0 } else { 1.0 },
            tolerance: 0.0,
            pass: equal,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        if self.tolerance == 0.0 {
            write!(f, "{tag} {} (exact)", self.name)
        } else {
            write!(f, "{tag} {} value={:.3e} tol={:.1e}", self.name, self.value, self.tolerance)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Jacobian,
    Gradcheck,
    Invert,
    Gmm,
    Cfg,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Jacobian, Suite::Gradcheck, Suite::Invert, Suite::Gmm, Suite::Cfg];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Jacobian => "jacobian",
            Suite::Gradcheck => "gradcheck",
            Suite::Invert => "invert",
            Suite::Gmm => "gmm",
            Suite::Cfg => "cfg",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown suite {s:?}; expected jacobian, gradcheck, invert, gmm or cfg")))
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Jacobian => jacobian_suite(seed, &[8, 12, 16], 20),
        Suite::Gradcheck => gradcheck_suite(seed),
        Suite::Invert => invert_suite(seed),
        Suite::Gmm => gmm_suite(seed),
        Suite::Cfg => cfg_suite(seed),
    }
}

fn relative(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn micro_flow(dtype: DType, seed: u64, cfg: FlowConfig, head_std: f64) -> Result<(ParamStore, Flow)> {
    let mut store = ParamStore::new(dtype, seed);
    let flow = Flow::new(&mut store, cfg, &mut stream(seed, Purpose::Partition, &[]))?;
    store.randomize(head_std, |n| n.ends_with(".scale.weight") || n.ends_with(".shift.weight"))?;
    Ok((store, flow))
}

fn flat_forward(flow: &Flow, x: &[f64], tokens: usize, channels: usize) -> Result<(Vec<f64>, f64)> {
    let t = Tensor::from_vec(x.to_vec(), (1, tokens, channels), &Device::Cpu)?;
    let out = flow.forward(&t)?;
    let z = out.latents.flatten_all()?.to_vec1::<f64>()?;
    Ok((z, out.logdet.to_vec1::<f64>()?[0]))
}

/// Analytic log-determinant against log|det| of a central-difference
/// Jacobian, for flows over `dims` total dimensions (two tokens each).
pub fn jacobian_suite(seed: u64, dims: &[usize], draws: usize) -> Result<Vec<CheckResult>> {
    const TOL: f64 = 1e-3;
    const H: f64 = 1e-5;
    let mut results = Vec::new();
    for &dim in dims {
        if dim % 4 != 0 {
            return Err(Error::Shape(format!("jacobian check needs D divisible by 4, got {dim}")));
        }
        let (tokens, channels) = (2, dim / 2);
        let cfg = FlowConfig {
            depth: 2,
            width: 8,
            block_depth: 1,
            heads: 2,
            mlp_hidden: 16,
            tokens,
            channels,
        };
        let mut worst: f64 = 0.0;
        for draw in 0..draws {
            let (_store, flow) = micro_flow(DType::F64, seed ^ ((dim * 1000 + draw) as u64), cfg, 0.5)?;
            let mut rng = stream(seed, Purpose::Check, &[dim as u64, draw as u64]);
            let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (_, analytic) = flat_forward(&flow, &x, tokens, channels)?;
            let mut jac = DMatrix::<f64>::zeros(dim, dim);
            for j in 0..dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += H;
                xm[j] -= H;
                let (zp, _) = flat_forward(&flow, &xp, tokens, channels)?;
                let (zm, _) = flat_forward(&flow, &xm, tokens, channels)?;
                for i in 0..dim {
                    jac[(i, j)] = (zp[i] - zm[i]) / (2.0 * H);
                }
            }
            let (_, numeric) = slogdet(&jac);
            worst = worst.max(relative(analytic, numeric, 1e-6));
        }
        results.push(CheckResult::below(format!("logdet vs finite-difference Jacobian, D={dim}, {draws} draws"), worst, TOL));
    }
    Ok(results)
}

/// Micro end-to-end model used by the gradient check: pre-flow linear map
/// with d=4 of 48 channels, two-block flow, two-layer backbone, width 16.
pub fn gradcheck_model(seed: u64) -> Result<(JetFormer, crate::engine::PreparedBatch)> {
    let cfg = RunConfig {
        precision: Precision::F64,
        flow_depth: 2,
        flow_width: 16,
        flow_block_depth: 1,
        flow_heads: 2,
        flow_mlp: 32,
        backbone_depth: 2,
        backbone_width: 16,
        backbone_heads: 2,
        backbone_mlp: 32,
        mixture_components: 4,
        factor_mode: FactorMode::PreFlowLinear,
        factor_dims: Some(4),
        factor_init: LinearInit::RandomOrthogonal,
        dropout: 0.0,
        cond_drop: 0.0,
        text_weight: 0.5,
        stop_gradient: false,
        batch_size: 4,
        steps: 10,
        seed,
        ..RunConfig::default()
    };
    let mut spec = SynthShapesSpec::new(8, 8, seed);
    spec.captions = true;
    let data = synth_shapes(&spec)?;
    let mut trainer = Trainer::new(&cfg, data)?;
    trainer
        .model
        .store
        .randomize(0.3, |n| n.ends_with(".scale.weight") || n.ends_with(".shift.weight") || n.contains("gmm_head"))?;
    let batch = trainer.prepare_batch(0)?;
    Ok((trainer.model, batch))
}

fn total_loss(model: &JetFormer, batch: &crate::engine::PreparedBatch) -> Result<Tensor> {
    Ok(model.loss(batch, None, &mut Ctx::eval())?.total)
}

/// Gradient of the total loss against central differences for parameters
/// sampled from every part of the model.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckResult>> {
    const TOL: f64 = 1e-4;
    const H: f64 = 1e-3;
    const PER_GROUP: usize = 6;
    let (model, batch) = gradcheck_model(seed)?;
    let grads = total_loss(&model, &batch)?.backward()?;
    let groups: [(&str, fn(&str) -> bool); 6] = [
        ("flow", |n| n.starts_with("flow.")),
        ("linear map W", |n| n == "linear.weight"),
        ("backbone blocks", |n| n.starts_with("backbone.block")),
        ("backbone embeddings", |n| n == "backbone.soft_lift.weight" || n == "backbone.text_emb"),
        ("mixture head", |n| n.starts_with("backbone.gmm_head")),
        ("text head", |n| n.starts_with("backbone.vocab_head")),
    ];
    let mut rng = stream(seed, Purpose::Check, &[]);
    let mut results = Vec::new();
    for (label, pick) in groups {
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.clone()).filter(|n| pick(n)).collect();
        if names.is_empty() {
            return Err(Error::Shape(format!("no parameters in group {label}")));
        }
        let mut worst: f64 = 0.0;
        for _ in 0..PER_GROUP {
            let name = &names[rng.gen_range(0..names.len())];
            let var = model.store.get(name).expect("listed parameter");
            let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
            let idx = rng.gen_range(0..original.len());
            let analytic = match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all()?.to_vec1::<f64>()?[idx],
                None => 0.0,
            };
            let shape = var.shape().clone();
            let eval_at = |delta: f64| -> Result<f64> {
                let mut v = original.clone();
                v[idx] += delta;
                model.store.set(name, &Tensor::from_vec(v, &shape, &Device::Cpu)?)?;
                Ok(total_loss(&model, &batch)?.to_scalar::<f64>()?)
            };
            // Fourth-order central stencil.
            let numeric = (8.0 * (eval_at(H)? - eval_at(-H)?) - (eval_at(2.0 * H)? - eval_at(-2.0 * H)?)) / (12.0 * H);
            model.store.set(name, &Tensor::from_vec(original.clone(), &shape, &Device::Cpu)?)?;
            worst = worst.max(relative(analytic, numeric, 1e-6));
        }
        results.push(CheckResult::below(format!("total-loss gradient, {label} ({PER_GROUP} entries)"), worst, TOL));
    }
    Ok(results)
}

/// Forward-then-inverse on 256 random 16×16×3 inputs in both precisions.
pub fn invert_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = FlowConfig {
        depth: 4,
        width: 32,
        block_depth: 1,
        heads: 2,
        mlp_hidden: 64,
        tokens: 16,
        channels: 48,
    };
    let n = 256;
    let mut rng = stream(seed, Purpose::Check, &[1]);
    let x: Vec<f64> = (0..n * 16 * 48).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut results = Vec::new();
    for (precision, tol) in [(Precision::F32, 1e-3), (Precision::F64, 1e-8)] {
        let dtype = precision.dtype();
        let (_store, flow) = micro_flow(dtype, seed, cfg, 0.1)?;
        let xt = Tensor::from_vec(x.clone(), (n, 16, 48), &Device::Cpu)?.to_dtype(dtype)?;
        let back = flow.inverse(&flow.forward(&xt)?.latents)?;
        let err = (back - &xt)?
            .abs()?
            .flatten_all()?
            .max(0)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        let name = format!("max |x - f^-1(f(x))|, {n} inputs, {precision:?}").to_lowercase();
        results.push(CheckResult::below(name, err, tol));
    }
    Ok(results)
}

/// Random moderate mixture: k components in d dimensions.
pub fn random_mixture(rng: &mut StreamRng, k: usize, d: usize) -> GmmParams {
    GmmParams::new(
        k,
        d,
        (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("finite parameters")
}

/// Direct density sum: Σ_c w_c Π_j N(x_j; μ_cj, σ_cj), no log-space tricks.
pub fn naive_density(p: &GmmParams, x: &[f64]) -> f64 {
    let z: f64 = p.logits.iter().map(|l| l.exp()).sum();
    (0..p.k)
        .map(|c| {
            let w = p.logits[c].exp() / z;
            w * (0..p.d)
                .map(|j| {
                    let s = p.log_scales[c * p.d + j].exp();
                    let u = (x[j] - p.means[c * p.d + j]) / s;
                    (-0.5 * u * u).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
                })
                .product::<f64>()
        })
        .sum()
}

pub fn gmm_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = stream(seed, Purpose::Check, &[2]);
    let mut worst_host: f64 = 0.0;
    let mut worst_tensor: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=6);
        let p = random_mixture(&mut rng, k, d);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let oracle = -naive_density(&p, &x).ln();
        worst_host = worst_host.max(relative(gmm_nll(&p, &x), oracle, 1e-12));
        let dev = Device::Cpu;
        let batch = GmmBatch::from_parts(
            &Tensor::from_vec(p.logits.clone(), (1, k), &dev)?,
            &Tensor::from_vec(p.means.clone(), (1, k, d), &dev)?,
            &Tensor::from_vec(p.log_scales.clone(), (1, k, d), &dev)?,
        )?;
        let t = batch.nll(&Tensor::from_vec(x.clone(), (1, d), &dev)?)?.to_vec1::<f64>()?[0];
        worst_tensor = worst_tensor.max(relative(t, oracle, 1e-12));
    }
    let p = random_mixture(&mut rng, 3, 1);
    let (lo, hi, step) = (-30.0, 30.0, 1e-3);
    let n = ((hi - lo) / step) as usize;
    let dens: Vec<f64> = (0..=n).map(|i| (-gmm_nll(&p, &[lo + i as f64 * step])).exp()).collect();
    let integral = step * (dens.iter().sum::<f64>() - 0.5 * (dens[0] + dens[n]));
    Ok(vec![
        CheckResult::below("mixture NLL vs naive density sum, 1000 pairs", worst_host, 1e-8),
        CheckResult::below("tensor mixture NLL vs naive density sum, 1000 pairs", worst_tensor, 1e-8),
        CheckResult::below("d=1 density integrates to 1", (integral - 1.0).abs(), 1e-3),
    ])
}

/// Kolmogorov–Smirnov distance between `samples` and the density
/// ∝ exp(`log_density`) normalized numerically on [lo, hi].
pub fn ks_against_grid(samples: &mut [f64], log_density: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> f64 {
    let step = (hi - lo) / points as f64;
    let logs: Vec<f64> = (0..=points).map(|i| log_density(lo + i as f64 * step)).collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let mut cdf = vec![0.0; points + 1];
    for i in 1..=points {
        cdf[i] = cdf[i - 1] + 0.5 * step * (dens[i - 1] + dens[i]);
    }
    let total = cdf[points];
    let at = |x: f64| -> f64 {
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        let pos = (x - lo) / step;
        let i = (pos.floor() as usize).min(points - 1);
        let f = pos - i as f64;
        (cdf[i] * (1.0 - f) + cdf[i + 1] * f) / total
    };
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = at(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// The 1-D mixtures used for the guidance distribution check.
pub fn cfg_check_mixtures() -> (GmmParams, GmmParams) {
    let cond = GmmParams::new(2, 1, vec![0.0, -0.5], vec![-1.0, 1.5], vec![-0.3, -0.6]).expect("finite");
    let uncond = GmmParams::new(2, 1, vec![0.0, 0.0], vec![-0.5, 0.5], vec![0.4, 0.4]).expect("finite");
    (cond, uncond)
}

pub const CFG_CHECK_BUDGET: usize = 256;

pub fn cfg_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let (cond, uncond) = cfg_check_mixtures();
    let mut results = Vec::new();

    let mut a = stream(seed, Purpose::Check, &[3]);
    let mut b = stream(seed, Purpose::Check, &[3]);
    let same = (0..1000).all(|_| {
        let g = cfg_sample(&cond, &uncond, 0.0, &mut a, 64, 1.0, 1.0).expect("valid guidance");
        g.value == gmm_sample(&cond, &mut b, 1.0, 1.0)
    });
    results.push(CheckResult::exact("λ=0 guided draw equals plain draw, 1000 draws", same));

    let cfg = RunConfig {
        precision: Precision::F64,
        flow_depth: 1,
        flow_width: 8,
        flow_block_depth: 1,
        factor_mode: FactorMode::None,
        factor_dims: None,
        flow_heads: 2,
        flow_mlp: 16,
        backbone_depth: 1,
        backbone_width: 16,
        backbone_heads: 2,
        backbone_mlp: 32,
        mixture_components: 3,
        seed,
        ..RunConfig::default()
    };
    let shape = ModelShape {
        height: 8,
        width: 8,
        label_kind: crate::data::LabelKind::Class,
        num_classes: 3,
    };
    let mut model = JetFormer::build(&cfg, shape, None)?;
    model.store.randomize(0.3, |n| n.contains("gmm_head"))?;
    let cond_seq = [model.image_prefix(&Conditioning::Class(1))?];
    let uncond_seq = [model.image_prefix(&Conditioning::None)?];
    let temps = Temperatures { mixture: 1.0, scale: 1.0 };
    let run = |sampler| -> Result<Vec<Vec<f64>>> {
        let mut rngs = [stream(seed, Purpose::Sample, &[0, 0])];
        Ok(model
            .backbone
            .generate_soft(&cond_seq, Some(&uncond_seq), model.tokens(), sampler, temps, &mut rngs)?
            .tokens
            .remove(0))
    };
    let plain = run(SoftSampler::Plain)?;
    let guided = run(SoftSampler::Cfg { lambda: 0.0, budget: 64 })?;
    results.push(CheckResult::exact("λ=0 model sampling equals plain sampling", plain == guided));

    let lambda = 2.0;
    let mut rng = stream(seed, Purpose::Check, &[4]);
    let mut samples: Vec<f64> = (0..100_000)
        .map(|_| cfg_sample(&cond, &uncond, lambda, &mut rng, CFG_CHECK_BUDGET, 1.0, 1.0).map(|d| d.value[0]))
        .collect::<Result<_>>()?;
    let ks = ks_against_grid(
        &mut samples,
        |x| (1.0 + lambda) * cond.log_prob(&[x]) - lambda * uncond.log_prob(&[x]),
        -15.0,
        15.0,
        300_000,
    );
    results.push(CheckResult::below(
        format!("KS vs p_c^(1+λ) p_u^(-λ), λ=2, 1e5 draws, K={CFG_CHECK_BUDGET}"),
        ks,
        0.05,
    ));
    Ok(results)
}
