use candle_core::{DType, Device, Tensor};
use jetflow::backbone::TextMode;
use jetflow::check::ks_against_grid;
use jetflow::checkpoint::Checkpoint;
use jetflow::config::{Precision, RunConfig};
use jetflow::data::{synth_shapes, Label, SynthShapesSpec};
use jetflow::engine::{parameter_digest, JetFormer, ModelShape, PreparedBatch, Resample, SampleOptions, Trainer};
use jetflow::factoring::{pca_init, random_orthogonal_init, FactorMode, LinearInit};
use jetflow::flow::{Flow, FlowConfig, PatchGeometry};
use jetflow::gmm::{cfg_sample, GmmParams};
use jetflow::nn::{Ctx, ParamStore};
use jetflow::optim::AdamW;
use jetflow::rng::{stream, Purpose};
use nalgebra::DMatrix;
use rand::Rng;

fn flow_with_heads(dtype: DType, seed: u64, cfg: FlowConfig, std: f64) -> (ParamStore, Flow) {
    let mut store = ParamStore::new(dtype, seed);
    let flow = Flow::new(&mut store, cfg, &mut stream(seed, Purpose::Partition, &[])).unwrap();
    store.randomize(std, |n| n.ends_with(".scale.weight") || n.ends_with(".shift.weight")).unwrap();
    (store, flow)
}

fn forward_flat(flow: &Flow, x: &[f64]) -> (Vec<f64>, f64) {
    let cfg = flow.config;
    let t = Tensor::from_vec(x.to_vec(), (1, cfg.tokens, cfg.channels), &Device::Cpu).unwrap();
    let out = flow.forward(&t).unwrap();
    (out.latents.flatten_all().unwrap().to_vec1().unwrap(), out.logdet.to_vec1::<f64>().unwrap()[0])
}

#[test]
fn single_token_logdet_matches_jacobian() {
    let cfg = FlowConfig { depth: 2, width: 8, block_depth: 1, heads: 2, mlp_hidden: 16, tokens: 1, channels: 12 };
    for seed in 0..5 {
        let (_s, flow) = flow_with_heads(DType::F64, seed, cfg, 0.5);
        let mut rng = stream(seed, Purpose::Check, &[]);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, analytic) = forward_flat(&flow, &x);
        let h = 1e-5;
        let mut jac = DMatrix::<f64>::zeros(12, 12);
        for j in 0..12 {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[j] += h;
            b[j] -= h;
            let (fa, fb) = (forward_flat(&flow, &a).0, forward_flat(&flow, &b).0);
            for i in 0..12 {
                jac[(i, j)] = (fa[i] - fb[i]) / (2.0 * h);
            }
        }
        let numeric = jac.determinant().abs().ln();
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
        assert!(rel < 1e-3, "seed {seed}: analytic {analytic} vs numeric {numeric}");
    }
}

#[test]
fn tiny_image_round_trip() {
    // A 2x2x3 image is one 12-channel token at patch size 2.
    let g = PatchGeometry::new(2, 2, 2).unwrap();
    let cfg = FlowConfig { depth: 2, width: 8, block_depth: 1, heads: 2, mlp_hidden: 16, tokens: g.tokens(), channels: g.channels() };
    let (_s, flow) = flow_with_heads(DType::F32, 3, cfg, 0.3);
    let x = Tensor::randn(0f32, 1.0, (16, 1, 12), &Device::Cpu).unwrap();
    let back = flow.inverse(&flow.forward(&x).unwrap().latents).unwrap();
    let err = (back - &x).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap();
    assert!(err < 1e-5, "{err}");
}

fn shape_patches(count: usize) -> (Vec<Vec<f32>>, PatchGeometry) {
    let ds = synth_shapes(&SynthShapesSpec::new(16, count, 4)).unwrap();
    let images = ds.records.iter().map(|r| r.pixels.iter().map(|&p| p as f32 / 128.0 - 1.0).collect()).collect();
    (images, PatchGeometry::new(16, 16, 4).unwrap())
}

/// Patches as rows, gathered without the library's patch helpers.
fn patch_rows(images: &[Vec<f32>], g: PatchGeometry, size: usize) -> Vec<Vec<f64>> {
    let p = 4;
    let mut rows = Vec::new();
    for img in images {
        for by in 0..size / p {
            for bx in 0..size / p {
                let mut row = Vec::with_capacity(g.channels());
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..3 {
                            row.push(img[((by * p + y) * size + bx * p + x) * 3 + ch] as f64);
                        }
                    }
                }
                rows.push(row);
            }
        }
    }
    rows
}

fn covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let c = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..c).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    DMatrix::from_fn(c, c, |i, j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / n)
}

#[test]
fn pca_eigenvalues_match_dense_eigensolver() {
    let (images, g) = shape_patches(300);
    let basis = pca_init(&images, g).unwrap();
    let cov = covariance(&patch_rows(&images, g, 16));
    let mut expect: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    expect.sort_by(|a, b| b.total_cmp(a));
    for (a, b) in basis.eigenvalues.iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-6 * expect[0], "{a} vs {b}");
    }
}

#[test]
fn pca_subspace_reconstructs_better_than_random() {
    let (images, g) = shape_patches(300);
    let rows = patch_rows(&images, g, 16);
    let c = g.channels();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..c).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    // Mean squared residual after projecting centered patches onto the first d rows of `w`.
    let residual = |w: &[f64], d: usize| -> f64 {
        let mut total = 0.0;
        for r in &rows {
            let x: Vec<f64> = r.iter().zip(&mean).map(|(a, m)| a - m).collect();
            let mut recon = vec![0.0; c];
            for k in 0..d {
                let dir = &w[k * c..(k + 1) * c];
                let coef: f64 = dir.iter().zip(&x).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    recon[j] += coef * dir[j];
                }
            }
            total += x.iter().zip(&recon).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        total / n
    };
    let pca = pca_init(&images, g).unwrap();
    for d in [4, 16] {
        let ours = residual(&pca.weight, d);
        for seed in 0..5 {
            let random = random_orthogonal_init(c, &mut stream(seed, Purpose::Check, &[]));
            assert!(ours <= residual(&random, d), "d={d}");
        }
    }
}

#[test]
fn guided_draws_follow_the_tilted_density_with_full_budget() {
    let cond = GmmParams::new(2, 1, vec![0.0, -0.5], vec![-1.0, 1.5], vec![-0.3, -0.6]).unwrap();
    let uncond = GmmParams::new(2, 1, vec![0.0, 0.0], vec![-0.5, 0.5], vec![0.4, 0.4]).unwrap();
    let lambda = 2.0;
    let mut rng = stream(11, Purpose::Sample, &[]);
    let mut draws: Vec<f64> = (0..100_000)
        .map(|_| cfg_sample(&cond, &uncond, lambda, &mut rng, 1024, 1.0, 1.0).unwrap().value[0])
        .collect();
    let ks = ks_against_grid(
        &mut draws,
        |x| (1.0 + lambda) * cond.log_prob(&[x]) - lambda * uncond.log_prob(&[x]),
        -8.0,
        8.0,
        200_000,
    );
    assert!(ks < 0.05, "KS {ks}");
}

fn micro(precision: Precision) -> RunConfig {
    RunConfig {
        flow_block_depth: 1,
        factor_mode: FactorMode::None,
        factor_dims: None,
        precision,
        flow_depth: 2,
        flow_width: 16,
        flow_heads: 2,
        flow_mlp: 32,
        backbone_depth: 2,
        backbone_width: 32,
        backbone_heads: 2,
        backbone_mlp: 64,
        mixture_components: 4,
        batch_size: 4,
        dropout: 0.0,
        ..RunConfig::default()
    }
}

fn loss_value(model: &JetFormer, batch: &PreparedBatch) -> f64 {
    model.loss(batch, None, &mut Ctx::eval()).unwrap().total.to_scalar::<f64>().unwrap()
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let cfg = RunConfig { flow_depth: 0, text_weight: 0.5, stop_gradient: false, ..micro(Precision::F64) };
    let mut spec = SynthShapesSpec::new(8, 4, 2);
    spec.captions = true;
    let data = synth_shapes(&spec).unwrap();
    let mut tr = Trainer::new(&cfg, data).unwrap();
    tr.model.store.randomize(0.3, |n| n.starts_with("backbone.gmm_head")).unwrap();
    let batch = tr.prepare_batch(0).unwrap();
    let model = &tr.model;
    let grads = model.loss(&batch, None, &mut Ctx::eval()).unwrap().total.backward().unwrap();
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.clone()).filter(|n| n.starts_with("backbone.")).collect();
    let mut rng = stream(5, Purpose::Check, &[]);
    let h = 1e-3;
    for _ in 0..24 {
        let name = &names[rng.gen_range(0..names.len())];
        let var = model.store.get(name).unwrap();
        let original: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let idx = rng.gen_range(0..original.len());
        let analytic = grads.get(var.as_tensor()).map_or(0.0, |g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx]);
        let shape = var.shape().clone();
        let at = |delta: f64| {
            let mut v = original.clone();
            v[idx] += delta;
            model.store.set(name, &Tensor::from_vec(v, &shape, &Device::Cpu).unwrap()).unwrap();
            loss_value(model, &batch)
        };
        let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        model.store.set(name, &Tensor::from_vec(original, &shape, &Device::Cpu).unwrap()).unwrap();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-4, "{name}[{idx}]: {analytic} vs {numeric}");
    }
}

#[test]
fn standard_normal_prior_on_uniform_inputs_has_closed_form_bpd() {
    let cfg = RunConfig { flow_depth: 0, mixture_components: 1, ..micro(Precision::F64) };
    let data = synth_shapes(&SynthShapesSpec::new(8, 4, 0)).unwrap();
    let model = JetFormer::new(&cfg, ModelShape::of(&data), None).unwrap();
    let head: Vec<String> = model.store.iter().map(|(n, _)| n.clone()).filter(|n| n.starts_with("backbone.gmm_head")).collect();
    for name in &head {
        let zeros = model.store.get(name).unwrap().as_tensor().zeros_like().unwrap();
        model.store.set(name, &zeros).unwrap();
    }
    let mut rng = stream(0, Purpose::Check, &[]);
    let dims = 8 * 8 * 3;
    let pixels: Vec<Vec<f64>> = (0..4).map(|_| (0..dims).map(|_| rng.gen_range(0.0..256.0)).collect()).collect();
    let pack = model.pack_config(0.0);
    let seqs = data
        .records
        .iter()
        .map(|r| jetflow::data::pack_example(&r.label, jetflow::data::Direction::TextThenImage, &pack, &mut stream(0, Purpose::CondDrop, &[])).unwrap())
        .collect();
    let out = model.loss(&PreparedBatch { pixels: pixels.clone(), seqs }, None, &mut Ctx::eval()).unwrap();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    for (img, got) in pixels.iter().zip(&out.per_example_bpd) {
        let nats: f64 = img.iter().map(|&v| {
            let u = v / 128.0 - 1.0;
            half_log_2pi + 0.5 * u * u + 128f64.ln()
        }).sum();
        let expect = nats / (dims as f64 * std::f64::consts::LN_2);
        let got = got.unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        // Uniform data cannot beat 8 bits by more than the sampling slack of four images.
        assert!(got >= 8.0 - 0.05);
    }
}

#[test]
fn fixed_batch_loss_decreases_when_overfitting() {
    let cfg = RunConfig { jitter_std: 0.0, ..micro(Precision::F32) };
    let data = synth_shapes(&SynthShapesSpec::new(8, 4, 0)).unwrap();
    let mut tr = Trainer::new(&cfg, data).unwrap();
    let batch = tr.prepare_batch(0).unwrap();
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    for step in 0..200 {
        let out = tr.model.loss(&batch, None, &mut Ctx::eval()).unwrap();
        let v = out.total.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        if step == 0 {
            first = v;
        }
        last = v;
        let grads = AdamW::collect(&tr.model.store, &out.total.backward().unwrap()).unwrap();
        tr.opt.step(&tr.model.store, &grads, 1e-3).unwrap();
    }
    assert!(last < first - 0.5, "loss {first} -> {last}");
}

#[test]
fn resume_midway_equals_uninterrupted() {
    let cfg = RunConfig {
        flow_depth: 1,
        flow_width: 8,
        flow_mlp: 8,
        backbone_depth: 1,
        backbone_width: 16,
        backbone_mlp: 16,
        mixture_components: 2,
        batch_size: 2,
        steps: 200,
        ..micro(Precision::F32)
    };
    let data = synth_shapes(&SynthShapesSpec::new(8, 16, 0)).unwrap();
    let mut straight = Trainer::new(&cfg, data.clone()).unwrap();
    straight.run_until(200, |_, _| Ok(())).unwrap();
    let mut first = Trainer::new(&cfg, data.clone()).unwrap();
    first.run_until(100, |_, _| Ok(())).unwrap();
    let bytes = Checkpoint::of_trainer(&first).to_bytes().unwrap();
    drop(first);
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().trainer(data).unwrap();
    resumed.run_until(200, |_, _| Ok(())).unwrap();
    for ((n, a), (_, b)) in straight.model.store.iter().zip(resumed.model.store.iter()) {
        let (a, b): (Vec<f32>, Vec<f32>) = (
            a.as_tensor().flatten_all().unwrap().to_vec1().unwrap(),
            b.as_tensor().flatten_all().unwrap().to_vec1().unwrap(),
        );
        assert_eq!(a, b, "{n}");
    }
    assert_eq!(parameter_digest(&straight.model.store).unwrap(), parameter_digest(&resumed.model.store).unwrap());
}

#[test]
fn overfit_captioner_reproduces_training_captions() {
    let mut spec = SynthShapesSpec::new(8, 8, 6);
    spec.captions = true;
    let data = synth_shapes(&spec).unwrap();
    let cfg = RunConfig {
        flow_depth: 1,
        backbone_width: 64,
        backbone_heads: 4,
        backbone_mlp: 128,
        batch_size: 8,
        text_weight: 1.0,
        sigma0: 0.0,
        cond_drop: 0.0,
        lr: 3e-3,
        steps: 600,
        ..micro(Precision::F32)
    };
    let mut tr = Trainer::new(&cfg, data.clone()).unwrap();
    tr.run_until(cfg.steps, |_, _| Ok(())).unwrap();
    let images: Vec<Vec<u8>> = data.records.iter().map(|r| r.pixels.clone()).collect();
    let caps = tr.model.caption_images(&images, cfg.max_text + 1, TextMode::Greedy, 0).unwrap();
    for (r, c) in data.records.iter().zip(&caps) {
        let Label::Caption(truth) = &r.label else { unreachable!() };
        assert_eq!(String::from_utf8_lossy(c), String::from_utf8_lossy(truth));
    }
}

#[test]
fn resampling_gaussian_channels_stays_closer_than_resampling_soft_tokens() {
    let cfg = RunConfig {
        factor_mode: FactorMode::PreFlowLinear,
        factor_dims: Some(16),
        factor_init: LinearInit::Pca,
        sigma0: 0.0,
        steps: 300,
        batch_size: 8,
        ..micro(Precision::F32)
    };
    let data = synth_shapes(&SynthShapesSpec::new(8, 256, 0)).unwrap();
    let mut tr = Trainer::new(&cfg, data.clone()).unwrap();
    tr.run_until(cfg.steps, |_, _| Ok(())).unwrap();
    let mse = |a: &[u8], b: &[u8]| a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    let (mut gaussian, mut soft) = (0.0, 0.0);
    for (i, r) in data.records.iter().take(8).enumerate() {
        let opts = SampleOptions::from_config(&cfg, i as u64);
        let g = tr.model.resample_latents(&r.pixels, Resample::Factored, &opts).unwrap();
        let s = tr.model.resample_latents(&r.pixels, Resample::Kept, &opts).unwrap();
        assert_ne!(g, r.pixels);
        gaussian += mse(&g, &r.pixels);
        soft += mse(&s, &r.pixels);
    }
    assert!(gaussian < soft, "gaussian {gaussian} vs soft {soft}");
}
