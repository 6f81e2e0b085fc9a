//! Mixture densities and guided sampling on a pair of 1-D mixtures.

use jetflow::check::cfg_check_mixtures;
use jetflow::gmm::{cfg_sample, gmm_nll};
use jetflow::rng::{stream, Purpose};

fn main() -> jetflow::Result<()> {
    let (cond, uncond) = cfg_check_mixtures();
    for x in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        println!("x={x:+.1}  -log p_c = {:.4}  -log p_u = {:.4}", gmm_nll(&cond, &[x]), gmm_nll(&uncond, &[x]));
    }
    let mut rng = stream(0, Purpose::Sample, &[]);
    for lambda in [0.0, 1.0, 4.0] {
        let n = 20_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let v = cfg_sample(&cond, &uncond, lambda, &mut rng, 64, 1.0, 1.0)?.value[0];
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        println!("lambda={lambda}: mean {mean:+.3}, std {:.3}", (sq / n as f64 - mean * mean).sqrt());
    }
    Ok(())
}
