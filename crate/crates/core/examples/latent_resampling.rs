//! With post-flow factoring, keep an image's soft tokens and redraw only the
//! Gaussian-prior channels.

use jetflow::config::RunConfig;
use jetflow::data::{synth_shapes, write_ppm, SynthShapesSpec};
use jetflow::engine::{Resample, SampleOptions, Trainer};
use jetflow::factoring::FactorMode;

fn main() -> jetflow::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let cfg = RunConfig {
        flow_depth: 4,
        flow_block_depth: 1,
        mixture_components: 16,
        flow_width: 32,
        flow_heads: 2,
        flow_mlp: 64,
        backbone_depth: 2,
        backbone_width: 64,
        backbone_mlp: 128,
        batch_size: 16,
        factor_mode: FactorMode::PostFlow,
        factor_dims: Some(16),
        steps,
        ..RunConfig::default()
    };
    let data = synth_shapes(&SynthShapesSpec::new(16, 512, 0))?;
    let source = data.records[0].pixels.clone();
    let mut trainer = Trainer::new(&cfg, data)?;
    trainer.run_until(steps, |_, _| Ok(()))?;
    let out = std::env::temp_dir().join("jetflow_resample");
    std::fs::create_dir_all(&out).map_err(|e| jetflow::Error::io(&out, e))?;
    write_ppm(&out.join("source.ppm"), 16, 16, &source)?;
    for seed in 0..4 {
        let img = trainer
            .model
            .resample_latents(&source, Resample::Factored, &SampleOptions::from_config(&cfg, seed))?;
        let moved: f64 =
            img.iter().zip(&source).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / img.len() as f64;
        write_ppm(&out.join(format!("resampled_{seed}.ppm")), 16, 16, &img)?;
        println!("seed {seed}: mean |change| {moved:.2} levels");
    }
    println!("images in {}", out.display());
    Ok(())
}
