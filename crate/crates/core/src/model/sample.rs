use crate::{Error, Result};

/// Images of one scene under `m` calibrated directional lights.
///
/// Images are linear, divided by their light's power, and stored as
/// `[m, h, w, c]`. Normals, when present, are `[h, w, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhotoSample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<f32>,
    pub lights: Vec<[f32; 3]>,
    pub mask: Vec<f32>,
    pub normals: Option<Vec<f32>>,
}

impl PhotoSample {
    pub fn light_count(&self) -> usize {
        self.lights.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, j: usize) -> &[f32] {
        let n = self.pixels() * self.channels;
        &self.images[j * n..(j + 1) * n]
    }

    pub fn is_masked(&self, pixel: usize) -> bool {
        self.mask[pixel] > 0.5
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c, m) = (self.height, self.width, self.channels, self.lights.len());
        if m == 0 {
            return Err(Error::EmptySet("sample has no lights".into()));
        }
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Contract(format!("sample extents {h}x{w}x{c}")));
        }
        if self.images.len() != m * h * w * c {
            return Err(Error::Shape(format!(
                "{} image values for {m} images of {h}x{w}x{c}",
                self.images.len()
            )));
        }
        if self.mask.len() != h * w {
            return Err(Error::Shape(format!("mask has {} values for {h}x{w}", self.mask.len())));
        }
        for (j, l) in self.lights.iter().enumerate() {
            let n = l.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("light {j} has norm {n}")));
            }
        }
        if self.images.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Contract("negative or non-finite pixel value".into()));
        }
        if self.mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("mask is not binary".into()));
        }
        if let Some(nrm) = &self.normals {
            if nrm.len() != h * w * 3 {
                return Err(Error::Shape(format!("normal map has {} values", nrm.len())));
            }
            for p in (0..h * w).filter(|&p| self.is_masked(p)) {
                let len = nrm[p * 3..p * 3 + 3]
                    .iter()
                    .map(|&v| (v as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if (len - 1.0).abs() > 1e-4 {
                    return Err(Error::Contract(format!("normal at pixel {p} has length {len}")));
                }
            }
        }
        Ok(())
    }

    /// Keeps the listed lights, in the given order.
    pub fn select_lights(&self, indices: &[usize]) -> Result<PhotoSample> {
        let m = self.light_count();
        if let Some(&bad) = indices.iter().find(|&&j| j >= m) {
            return Err(Error::Contract(format!("light index {bad} but only {m} available")));
        }
        let mut images = Vec::with_capacity(indices.len() * self.pixels() * self.channels);
        for &j in indices {
            images.extend_from_slice(self.image(j));
        }
        Ok(PhotoSample {
            images,
            lights: indices.iter().map(|&j| self.lights[j]).collect(),
            ..self.clone()
        })
    }

    /// Spatial crop of every image, the mask and the normals.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<PhotoSample> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Contract(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let crop_plane = |src: &[f32], depth: usize| {
            let mut out = Vec::with_capacity(height * width * depth);
            for y in top..top + height {
                let start = (y * self.width + left) * depth;
                out.extend_from_slice(&src[start..start + width * depth]);
            }
            out
        };
        let mut images = Vec::with_capacity(self.light_count() * height * width * c);
        for j in 0..self.light_count() {
            images.extend(crop_plane(self.image(j), c));
        }
        Ok(PhotoSample {
            height,
            width,
            channels: c,
            images,
            lights: self.lights.clone(),
            mask: crop_plane(&self.mask, 1),
            normals: self.normals.as_ref().map(|n| crop_plane(n, 3)),
        })
    }

    pub fn ground_truth(&self) -> Option<NormalMap> {
        self.normals.as_ref().map(|n| NormalMap {
            height: self.height,
            width: self.width,
            normals: n.chunks(3).map(|v| [v[0], v[1], v[2]]).collect(),
            mask: self.mask.iter().map(|&m| m > 0.5).collect(),
        })
    }

    /// Divides image `j` by `powers[j]`, leaving intensities per unit light power.
    pub fn normalize_light_power(&mut self, powers: &[f32]) -> Result<()> {
        if powers.len() != self.light_count() || powers.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Contract(format!(
                "{} light powers for {} lights, all must be positive",
                powers.len(),
                self.light_count()
            )));
        }
        let n = self.pixels() * self.channels;
        for (j, &p) in powers.iter().enumerate() {
            for v in &mut self.images[j * n..(j + 1) * n] {
                *v /= p;
            }
        }
        Ok(())
    }
}

/// Field of unit normals with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub height: usize,
    pub width: usize,
    pub normals: Vec<[f32; 3]>,
    pub mask: Vec<bool>,
}

impl NormalMap {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn flat(&self) -> Vec<f32> {
        self.normals.iter().flatten().copied().collect()
    }
}

/// Unit-normalizes rows inside the mask; zero rows become `(0, 0, 1)`, rows
/// outside the mask become zero.
pub fn normalize_normals(raw: &[f32], mask: &[bool], height: usize, width: usize) -> NormalMap {
    let normals = raw
        .chunks(3)
        .zip(mask)
        .map(|(v, &inside)| {
            if !inside {
                return [0.0; 3];
            }
            let len = (v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>()).sqrt();
            if len == 0.0 || !len.is_finite() {
                [0.0, 0.0, 1.0]
            } else {
                [
                    (v[0] as f64 / len) as f32,
                    (v[1] as f64 / len) as f32,
                    (v[2] as f64 / len) as f32,
                ]
            }
        })
        .collect();
    NormalMap {
        height,
        width,
        normals,
        mask: mask.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_documented_cases() {
        let raw = [0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0, 5.0, 5.0, 5.0];
        let n = normalize_normals(&raw, &[true, true, true, false], 2, 2);
        assert_eq!(n.normals[0], [0.0, 0.0, 1.0]);
        assert_eq!(n.normals[1], [0.0, 0.0, 1.0]);
        assert!((n.normals[2][0] - 0.6).abs() < 1e-7 && (n.normals[2][2] - 0.8).abs() < 1e-7);
        assert_eq!(n.normals[3], [0.0; 3]);
    }

    fn sample() -> PhotoSample {
        PhotoSample {
            height: 2,
            width: 3,
            channels: 1,
            images: (0..12).map(|v| v as f32).collect(),
            lights: vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]],
            mask: vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            normals: None,
        }
    }

    #[test]
    fn crop_and_select() {
        let s = sample();
        s.validate().unwrap();
        let c = s.crop(1, 1, 1, 2).unwrap();
        assert_eq!(c.images, vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(c.mask, vec![0.0, 1.0]);
        let r = s.select_lights(&[1]).unwrap();
        assert_eq!(r.images, (6..12).map(|v| v as f32).collect::<Vec<_>>());
        assert!(s.select_lights(&[2]).is_err());
    }

    #[test]
    fn validation_catches_bad_lights() {
        let mut s = sample();
        s.lights[0] = [0.0, 0.0, 0.9];
        assert!(s.validate().is_err());
    }

    #[test]
    fn light_power_normalization() {
        let mut s = sample();
        s.normalize_light_power(&[2.0, 4.0]).unwrap();
        assert_eq!(s.images[1], 0.5);
        assert_eq!(s.images[7], 7.0 / 4.0);
    }
}
