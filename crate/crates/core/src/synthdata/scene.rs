use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::io::{write_manifest, write_sample, DatasetManifest};
use super::sample_lights;
use crate::model::PhotoSample;
use crate::{Error, Result};

const VIEW: [f64; 3] = [0.0, 0.0, 1.0];
const MIN_ALBEDO: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfaceKind {
    Sphere,
    /// Sum of Gaussian bumps over an elliptical footprint.
    Blob,
}

impl std::str::FromStr for SurfaceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(SurfaceKind::Sphere),
            "blob" => Ok(SurfaceKind::Blob),
            _ => Err(Error::Config(format!("unknown surface kind {s:?}, expected sphere or blob"))),
        }
    }
}

impl std::fmt::Display for SurfaceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SurfaceKind::Sphere => "sphere",
            SurfaceKind::Blob => "blob",
        })
    }
}

/// Everything needed to render one scene deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub kind: SurfaceKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `None` draws a smooth spatially varying map in `[0.05, 1]` from the seed.
    pub albedo: Option<f64>,
    pub specular: f64,
    pub shininess: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn lambertian_sphere(size: usize, seed: u64) -> Self {
        SceneSpec {
            kind: SurfaceKind::Sphere,
            height: size,
            width: size,
            channels: 1,
            albedo: None,
            specular: 0.0,
            shininess: 32.0,
            noise: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 || self.channels == 0 {
            return Err(Error::Config(format!(
                "scene {}x{}x{} too small",
                self.height, self.width, self.channels
            )));
        }
        if let Some(a) = self.albedo {
            if !(MIN_ALBEDO..=1.0).contains(&a) {
                return Err(Error::Config(format!("albedo {a} outside [0.05, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.specular) {
            return Err(Error::Config(format!("specular {} outside [0, 0.5]", self.specular)));
        }
        if !(8.0..=256.0).contains(&self.shininess) {
            return Err(Error::Config(format!("shininess {} outside [8, 256]", self.shininess)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be >= 0", self.noise)));
        }
        Ok(())
    }

    /// Unit normals `[h, w, 3]` and the footprint mask.
    pub fn geometry(&self) -> (Vec<[f64; 3]>, Vec<bool>) {
        match self.kind {
            SurfaceKind::Sphere => sphere(self.height, self.width),
            SurfaceKind::Blob => blob(self.height, self.width, self.seed),
        }
    }

    /// Diffuse albedo per pixel.
    pub fn albedo_map(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        if let Some(a) = self.albedo {
            return vec![a; h * w];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xa1be_d0a1);
        let base: f64 = rng.gen_range(0.3..0.8);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.1..0.25),
                    rng.gen_range(0.5..3.0) * std::f64::consts::TAU / w as f64,
                    rng.gen_range(0.5..3.0) * std::f64::consts::TAU / h as f64,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        (0..h * w)
            .map(|p| {
                let (x, y) = ((p % w) as f64, (p / w) as f64);
                let v = base
                    + waves
                        .iter()
                        .map(|&(amp, fx, fy, ph)| amp * (fx * x + fy * y + ph).sin())
                        .sum::<f64>();
                v.clamp(MIN_ALBEDO, 1.0)
            })
            .collect()
    }
}

fn sphere(h: usize, w: usize) -> (Vec<[f64; 3]>, Vec<bool>) {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let r = 0.45 * h.min(w) as f64;
    let mut normals = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let nx = (x as f64 - cx) / r;
            let ny = (cy - y as f64) / r;
            let rr = nx * nx + ny * ny;
            if rr < 1.0 {
                normals.push([nx, ny, (1.0 - rr).sqrt()]);
                mask.push(true);
            } else {
                normals.push([0.0; 3]);
                mask.push(false);
            }
        }
    }
    (normals, mask)
}

fn blob(h: usize, w: usize, seed: u64) -> (Vec<[f64; 3]>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10b);
    let s = h.min(w) as f64;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (rx, ry) = (rng.gen_range(0.35..0.49) * w as f64, rng.gen_range(0.35..0.49) * h as f64);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(3..7))
        .map(|_| {
            (
                cx + rng.gen_range(-0.6..0.6) * rx,
                cy + rng.gen_range(-0.6..0.6) * ry,
                rng.gen_range(0.08..0.3) * s,
                rng.gen_range(-0.3..0.5) * s,
            )
        })
        .collect();
    // base dome keeps the surface bulging toward the camera
    let dome = 0.4 * s;
    let height = |x: f64, y: f64| {
        let u = (x - cx) / rx;
        let v = (y - cy) / ry;
        let mut z = dome * (-(u * u + v * v)).exp();
        for &(bx, by, sigma, amp) in &bumps {
            let d2 = (x - bx).powi(2) + (y - by).powi(2);
            z += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        z
    };
    let mut normals = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let inside = ((xf - cx) / rx).powi(2) + ((yf - cy) / ry).powi(2) < 1.0;
            if !inside {
                normals.push([0.0; 3]);
                mask.push(false);
                continue;
            }
            // image rows grow downward while the normal's y axis points up
            let dzdx = (height(xf + 1.0, yf) - height(xf - 1.0, yf)) / 2.0;
            let dzdy = -(height(xf, yf + 1.0) - height(xf, yf - 1.0)) / 2.0;
            let n = [-dzdx, -dzdy, 1.0];
            let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
            normals.push([n[0] / len, n[1] / len, n[2] / len]);
            mask.push(true);
        }
    }
    (normals, mask)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Lambertian plus Blinn-Phong shading with attached shadows and clamped noise.
pub fn render_sample(spec: &SceneSpec, lights: &[[f32; 3]]) -> Result<PhotoSample> {
    spec.validate()?;
    if lights.is_empty() {
        return Err(Error::EmptySet("render with zero lights".into()));
    }
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let (normals, mask) = spec.geometry();
    let albedo = spec.albedo_map();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0005_eed0_f015e);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut images = Vec::with_capacity(lights.len() * h * w * c);
    for l in lights {
        let l = [l[0] as f64, l[1] as f64, l[2] as f64];
        let half = {
            let v = [l[0] + VIEW[0], l[1] + VIEW[1], l[2] + VIEW[2]];
            let n = dot(v, v).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        };
        for p in 0..h * w {
            let value = if mask[p] {
                let n = normals[p];
                let ndl = dot(n, l);
                if ndl > 0.0 {
                    albedo[p] * ndl + spec.specular * dot(n, half).max(0.0).powf(spec.shininess)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            for _ in 0..c {
                let v = if spec.noise > 0.0 && mask[p] {
                    (value + noise.sample(&mut rng)).max(0.0)
                } else {
                    value
                };
                images.push(v as f32);
            }
        }
    }
    Ok(PhotoSample {
        height: h,
        width: w,
        channels: c,
        images,
        lights: lights.to_vec(),
        mask: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        normals: Some(normals.iter().flatten().map(|&v| v as f32).collect()),
    })
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    /// `None` alternates spheres and blobs.
    pub kind: Option<SurfaceKind>,
    pub size: usize,
    pub channels: usize,
    pub lights: usize,
    pub min_z: f64,
    /// Largest specular strength; each scene draws uniformly up to it.
    pub max_specular: f64,
    /// Fraction of scenes rendered without a specular lobe.
    pub lambertian_fraction: f64,
    pub noise: f64,
    /// Use one light set for every sample.
    pub shared_lights: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 4,
            kind: Some(SurfaceKind::Sphere),
            size: 32,
            channels: 1,
            lights: 10,
            min_z: 0.2,
            max_specular: 0.0,
            lambertian_fraction: 1.0,
            noise: 0.0,
            shared_lights: false,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// Scene spec and light set of sample `i`; independent of every other sample.
    pub fn scene(&self, i: usize) -> Result<(SceneSpec, Vec<[f32; 3]>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64));
        let kind = self.kind.unwrap_or(if i % 2 == 0 {
            SurfaceKind::Sphere
        } else {
            SurfaceKind::Blob
        });
        let lambertian = rng.gen_bool(self.lambertian_fraction.clamp(0.0, 1.0));
        let specular = if lambertian || self.max_specular <= 0.0 {
            0.0
        } else {
            rng.gen_range(0.0..=self.max_specular)
        };
        let spec = SceneSpec {
            kind,
            height: self.size,
            width: self.size,
            channels: self.channels,
            albedo: None,
            specular,
            shininess: rng.gen_range(8.0..=256.0),
            noise: self.noise,
            seed: rng.gen(),
        };
        let lights = if self.shared_lights {
            sample_lights(self.lights, self.min_z, &mut ChaCha8Rng::seed_from_u64(self.seed))?
        } else {
            sample_lights(self.lights, self.min_z, &mut rng)?
        };
        Ok((spec, lights))
    }

    pub fn render(&self, i: usize) -> Result<PhotoSample> {
        let (spec, lights) = self.scene(i)?;
        render_sample(&spec, &lights)
    }

    pub fn echo(&self) -> Vec<(String, String)> {
        [
            ("count", self.count.to_string()),
            (
                "kind",
                self.kind.map_or("mixed".to_string(), |k| k.to_string()),
            ),
            ("size", self.size.to_string()),
            ("channels", self.channels.to_string()),
            ("lights", self.lights.to_string()),
            ("min_z", self.min_z.to_string()),
            ("max_specular", self.max_specular.to_string()),
            ("lambertian_fraction", self.lambertian_fraction.to_string()),
            ("noise", self.noise.to_string()),
            ("shared_lights", self.shared_lights.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Renders `cfg.count` samples into `dir` and writes the manifest last.
pub fn generate_dataset(cfg: &GenConfig, dir: &Path) -> Result<DatasetManifest> {
    use rayon::prelude::*;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let rel = PathBuf::from(format!("sample_{i:05}.pss"));
            write_sample(&dir.join(&rel), &cfg.render(i)?)?;
            Ok(rel)
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        config: cfg.echo(),
        paths,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}
