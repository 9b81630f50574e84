//! Writes a synthetic dataset as IDX files, loads it back and checks the
//! 8-bit quantization error.

use podsim::data::{load_idx, write_idx, SyntheticSpec};

fn main() -> podsim::Result<()> {
    let dir = std::env::temp_dir().join(format!("podsim-idx-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| podsim::Error::Io { path: dir.display().to_string(), source: e })?;
    let (images, labels) = (dir.join("images.idx"), dir.join("labels.idx"));

    let original = SyntheticSpec::new(10, 12, 12, 1, 0).generate(0..256)?;
    write_idx(&original, &images, &labels)?;
    let loaded = load_idx(&images, &labels)?;

    let worst = original
        .images
        .data()
        .iter()
        .zip(loaded.images.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!(
        "{} examples of {:?}, {} classes; labels equal: {}; max pixel error {worst:.5} (half step {:.5})",
        loaded.len(),
        loaded.image_shape(),
        loaded.num_classes,
        loaded.labels == original.labels,
        0.5 / 255.0
    );
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
