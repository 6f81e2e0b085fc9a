//! Captioned images: the model learns text-to-image and image-to-text in one
//! sequence model, then captions held-out images.

use jetflow::backbone::TextMode;
use jetflow::config::RunConfig;
use jetflow::data::{synth_shapes, Label, SynthShapesSpec};
use jetflow::engine::{evaluate_bpd, LabelMode, Trainer};

fn main() -> jetflow::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let mut spec = SynthShapesSpec::new(16, 1024, 0);
    spec.captions = true;
    let train = synth_shapes(&spec)?;
    spec.count = 8;
    spec.seed = 1;
    let held_out = synth_shapes(&spec)?;
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
        text_weight: 0.05,
        steps,
        ..RunConfig::default()
    };
    let mut trainer = Trainer::new(&cfg, train)?;
    trainer.run_until(steps, |_, r| {
        if r.step % 50 == 0 {
            println!(
                "step {:>5}  image bpd {:.4}  text nll/token {:.4}",
                r.step, r.breakdown.image_bpd, r.breakdown.text_nll_per_token
            );
        }
        Ok(())
    })?;
    let model = &trainer.model;
    println!("held-out bpd (matched captions): {:.4}", evaluate_bpd(model, &held_out, LabelMode::Matched, 0, 8)?.bpd);
    let images: Vec<Vec<u8>> = held_out.records.iter().map(|r| r.pixels.clone()).collect();
    let captions = model.caption_images(&images, cfg.max_text, TextMode::Greedy, 0)?;
    for (r, c) in held_out.records.iter().zip(captions) {
        if let Label::Caption(truth) = &r.label {
            println!("{:<16} -> {}", String::from_utf8_lossy(truth), String::from_utf8_lossy(&c));
        }
    }
    Ok(())
}
