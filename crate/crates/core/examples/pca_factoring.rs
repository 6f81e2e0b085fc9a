//! PCA basis of image patches and how much variance the leading channels keep.

use jetflow::data::{synth_shapes, SynthShapesSpec};
use jetflow::factoring::pca_init;
use jetflow::flow::PatchGeometry;

fn main() -> jetflow::Result<()> {
    let ds = synth_shapes(&SynthShapesSpec::new(16, 512, 0))?;
    let images: Vec<Vec<f32>> = ds
        .records
        .iter()
        .map(|r| r.pixels.iter().map(|&p| p as f32 / 128.0 - 1.0).collect())
        .collect();
    let geometry = PatchGeometry::new(16, 16, 4)?;
    let basis = pca_init(&images, geometry)?;
    let total: f64 = basis.eigenvalues.iter().sum();
    let mut kept = 0.0;
    for (i, ev) in basis.eigenvalues.iter().enumerate() {
        kept += ev;
        if [1, 4, 8, 16, 32, 48].contains(&(i + 1)) {
            println!("first {:>2} of {} channels: {:5.1}% of patch variance", i + 1, basis.channels, 100.0 * kept / total);
        }
    }
    Ok(())
}
