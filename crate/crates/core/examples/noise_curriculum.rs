//! The RGB noise schedule and what it does to an image.

use jetflow::curriculum::{apply_rgb_noise, NoiseSchedule};
use jetflow::data::{synth_shapes, SynthShapesSpec};
use jetflow::rng::{stream, Purpose};

fn main() -> jetflow::Result<()> {
    let schedule = NoiseSchedule::new(64.0, 0.0)?;
    let steps = 5000;
    let image = &synth_shapes(&SynthShapesSpec::new(16, 1, 0))?.records[0].pixels;
    println!("step    sigma   mean |noisy - clean|");
    for step in (0..=steps).step_by(500) {
        let sigma = schedule.sigma_at_step(step, steps)?;
        let noisy = apply_rgb_noise(image, sigma, &mut stream(0, Purpose::RgbNoise, &[step]));
        let diff: f64 =
            noisy.iter().zip(image).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / image.len() as f64;
        println!("{step:>5}  {sigma:>7.3}  {diff:>8.3}");
    }
    Ok(())
}
