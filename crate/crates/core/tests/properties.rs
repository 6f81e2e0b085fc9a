use candle_core::{DType, Device, Tensor};
use jetflow::checkpoint::Checkpoint;
use jetflow::config::RunConfig;
use jetflow::data::{flip_horizontal, parse_ppm, synth_shapes, write_ppm, SynthShapesSpec};
use jetflow::engine::{parameter_digest, JetFormer, ModelShape};
use jetflow::flow::{patchify, unpatchify, Flow, FlowConfig, PatchGeometry};
use jetflow::gmm::{cfg_sample, gmm_nll, gmm_sample, GmmParams};
use jetflow::nn::ParamStore;
use jetflow::rng::{stream, Purpose};
use proptest::prelude::*;

fn mixture(k: usize, d: usize, seed: u64) -> GmmParams {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = stream(seed, Purpose::Check, &[]);
    let mut draw = |n: usize, s: f64| (0..n).map(|_| { let v: f64 = StandardNormal.sample(&mut rng); s * v }).collect::<Vec<f64>>();
    let logits = draw(k, 1.0);
    let means = draw(k * d, 2.0);
    let scales = draw(k * d, 0.5);
    GmmParams::new(k, d, logits, means, scales).unwrap()
}

/// Direct sum over components of the product of univariate normal densities.
fn direct_density(p: &GmmParams, x: &[f64]) -> f64 {
    let z: f64 = p.logits.iter().map(|l| l.exp()).sum();
    (0..p.k)
        .map(|c| {
            let mut dens = p.logits[c].exp() / z;
            for j in 0..p.d {
                let s = p.log_scales[c * p.d + j].clamp(-7.0, 7.0).exp();
                let u = (x[j] - p.means[c * p.d + j]) / s;
                dens *= (-0.5 * u * u).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            }
            dens
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flow_inverts_and_contracts(seed in any::<u64>(), scale in 0.0f64..0.5, depth in 0usize..4) {
        let cfg = FlowConfig { depth, width: 8, block_depth: 1, heads: 2, mlp_hidden: 16, tokens: 4, channels: 6 };
        let mut store = ParamStore::new(DType::F64, seed);
        let flow = Flow::new(&mut store, cfg, &mut stream(seed, Purpose::Partition, &[])).unwrap();
        store.randomize(scale, |n| n.ends_with(".scale.weight") || n.ends_with(".shift.weight")).unwrap();
        let x = Tensor::randn(0f64, 1.0, (3, 4, 6), &Device::Cpu).unwrap();
        let out = flow.forward(&x).unwrap();
        let back = flow.inverse(&out.latents).unwrap();
        let err = (back - &x).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(err < 1e-9, "round trip error {err}");
        for ld in out.logdet.to_vec1::<f64>().unwrap() {
            prop_assert!(ld <= 0.0);
        }
    }

    #[test]
    fn mixture_nll_is_minus_log_density(seed in any::<u64>(), k in 1usize..5, d in 1usize..4) {
        let p = mixture(k, d, seed);
        let x: Vec<f64> = p.mean().iter().map(|m| m + 0.3).collect();
        let direct = -direct_density(&p, &x).ln();
        let nll = gmm_nll(&p, &x);
        prop_assert!((nll - direct).abs() <= 1e-9 * direct.abs().max(1.0), "{nll} vs {direct}");
    }

    #[test]
    fn zero_guidance_is_a_plain_draw(seed in any::<u64>(), budget in 1usize..32) {
        let (c, u) = (mixture(3, 2, seed), mixture(3, 2, seed ^ 1));
        let plain = gmm_sample(&c, &mut stream(seed, Purpose::Sample, &[]), 1.0, 1.0);
        let guided = cfg_sample(&c, &u, 0.0, &mut stream(seed, Purpose::Sample, &[]), budget, 1.0, 1.0).unwrap();
        prop_assert_eq!(plain, guided.value);
    }

    #[test]
    fn patchify_round_trips(hp in 1usize..4, wp in 1usize..4, patch in 1usize..4, seed in any::<u64>()) {
        let g = PatchGeometry::new(hp * patch, wp * patch, patch).unwrap();
        let mut rng = stream(seed, Purpose::Check, &[]);
        let img: Vec<u8> = (0..g.dims()).map(|_| rand::Rng::gen(&mut rng)).collect();
        let grid = patchify(&img, g).unwrap();
        prop_assert_eq!(grid.tokens(), hp * wp);
        prop_assert_eq!(unpatchify(&grid), img);
    }

    #[test]
    fn double_flip_is_identity(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = stream(seed, Purpose::Check, &[]);
        let img: Vec<u8> = (0..h * w * 3).map(|_| rand::Rng::gen(&mut rng)).collect();
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&img, h, w), h, w), img);
    }

    #[test]
    fn ppm_round_trips(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = stream(seed, Purpose::Check, &[]);
        let img: Vec<u8> = (0..h * w * 3).map(|_| rand::Rng::gen(&mut rng)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&path, w, h, &img).unwrap();
        let (pw, ph, back) = parse_ppm(&std::fs::read(&path).unwrap()).unwrap();
        prop_assert_eq!((pw, ph), (w, h));
        prop_assert_eq!(back, img);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0..=i64::MAX as u64, depth in 0usize..3) {
        let cfg = RunConfig {
            seed,
            flow_block_depth: 1,
            flow_depth: depth,
            flow_width: 8,
            flow_heads: 2,
            flow_mlp: 8,
            backbone_depth: 1,
            backbone_width: 8,
            backbone_heads: 2,
            backbone_mlp: 8,
            mixture_components: 2,
            ..RunConfig::default()
        };
        let data = synth_shapes(&SynthShapesSpec::new(8, 2, seed)).unwrap();
        let model = JetFormer::new(&cfg, ModelShape::of(&data), None).unwrap();
        let ck = Checkpoint::capture(&model, None, 3);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.step, 3);
        prop_assert_eq!(back.partitions.clone(), model.flow.partitions());
        let restored = back.model().unwrap();
        prop_assert_eq!(parameter_digest(&restored.store).unwrap(), parameter_digest(&model.store).unwrap());
    }
}

#[test]
fn seeds_beyond_toml_range_are_rejected() {
    let cfg = RunConfig { seed: u64::MAX, ..RunConfig::default() };
    assert!(matches!(cfg.validate(), Err(jetflow::Error::Config(_))));
}
