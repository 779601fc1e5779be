//! Synthetic scenes, light sampling, patches and the dataset format.

mod io;
mod scene;

use rand::Rng;

use crate::model::PhotoSample;
use crate::{Error, Result};

pub use io::{
    decode_sample, encode_sample, load_dataset, read_manifest, read_sample, write_manifest,
    write_normal_png, write_sample, DatasetManifest, MANIFEST_HEADER,
};
pub use scene::{generate_dataset, render_sample, GenConfig, SceneSpec, SurfaceKind};

/// Unit directions uniform on the cap `z >= min_z` of the upper hemisphere.
///
/// Area on a sphere is uniform in `z`, so `z` is drawn uniformly from
/// `[min_z, 1]` and the azimuth uniformly from `[0, 2 pi)`.
pub fn sample_lights(m: usize, min_z: f64, rng: &mut impl Rng) -> Result<Vec<[f32; 3]>> {
    if m == 0 {
        return Err(Error::Config("light count must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&min_z) {
        return Err(Error::Config(format!("min_z {min_z} outside [0, 1)")));
    }
    Ok((0..m)
        .map(|_| {
            let z: f64 = rng.gen_range(min_z..=1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            let v = [r * phi.cos(), r * phi.sin(), z];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [(v[0] / n) as f32, (v[1] / n) as f32, (v[2] / n) as f32]
        })
        .collect())
}

/// Square crops of side `size` on a `stride` grid whose masked fraction is at
/// least `min_mask_fraction`.
pub fn extract_patches(
    sample: &PhotoSample,
    size: usize,
    stride: usize,
    min_mask_fraction: f64,
) -> Result<Vec<PhotoSample>> {
    if size == 0 || stride == 0 || size > sample.height.min(sample.width) {
        return Err(Error::Config(format!(
            "patch size {size} with stride {stride} on a {}x{} sample",
            sample.height, sample.width
        )));
    }
    let mut out = Vec::new();
    for top in (0..=sample.height - size).step_by(stride) {
        for left in (0..=sample.width - size).step_by(stride) {
            let masked = (top..top + size)
                .flat_map(|y| (left..left + size).map(move |x| y * sample.width + x))
                .filter(|&p| sample.is_masked(p))
                .count();
            let fraction = masked as f64 / (size * size) as f64;
            if fraction >= min_mask_fraction && (min_mask_fraction <= 0.0 || masked > 0) {
                out.push(sample.crop(top, left, size, size)?);
            }
        }
    }
    Ok(out)
}
