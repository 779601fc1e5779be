//! Lambertian least-squares photometric stereo.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::model::{NormalMap, PhotoSample};
use crate::{Error, Result};

/// Lights above this condition number are treated as rank deficient.
pub const MAX_CONDITION: f64 = 1e6;
const MIN_ALBEDO: f64 = 1e-12;

/// Stacked unit light directions `L` (m x 3) with its Gram matrix.
#[derive(Clone, Debug)]
pub struct LightMatrix {
    rows: Vec<Vector3<f64>>,
    condition: f64,
    gram_inverse: Option<Matrix3<f64>>,
}

impl LightMatrix {
    pub fn new(lights: &[[f32; 3]]) -> Result<Self> {
        let rows: Vec<Vector3<f64>> = lights
            .iter()
            .map(|l| Vector3::new(l[0] as f64, l[1] as f64, l[2] as f64))
            .collect();
        for (j, r) in rows.iter().enumerate() {
            if (r.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("light {j} has norm {}", r.norm())));
            }
        }
        let gram: Matrix3<f64> = rows.iter().map(|r| r * r.transpose()).sum();
        let eig = SymmetricEigen::new(gram).eigenvalues;
        let (lo, hi) = (eig.min().max(0.0), eig.max());
        // singular values of L are square roots of the Gram eigenvalues
        let condition = if lo <= 0.0 { f64::INFINITY } else { (hi / lo).sqrt() };
        let gram_inverse = if condition < MAX_CONDITION {
            gram.try_inverse()
        } else {
            None
        };
        Ok(LightMatrix {
            rows,
            condition,
            gram_inverse,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }
}

/// Least-squares `b` with `L b ~ i`, returned as `(b / |b|, |b|)`.
pub fn woodham_solve(intensities: &[f64], l: &LightMatrix) -> Result<([f64; 3], f64)> {
    if intensities.len() != l.len() {
        return Err(Error::Shape(format!(
            "{} intensities for {} lights",
            intensities.len(),
            l.len()
        )));
    }
    let inv = l.gram_inverse.as_ref().ok_or(Error::DegenerateLighting {
        condition: l.condition,
    })?;
    let rhs: Vector3<f64> = l.rows.iter().zip(intensities).map(|(r, &i)| r * i).sum();
    let b = inv * rhs;
    let albedo = b.norm();
    if albedo < MIN_ALBEDO {
        return Ok(([0.0, 0.0, 1.0], 0.0));
    }
    let n = b / albedo;
    Ok(([n.x, n.y, n.z], albedo))
}

/// Per-pixel solution over a whole sample.
#[derive(Clone, Debug)]
pub struct SolvedMap {
    pub normals: NormalMap,
    pub albedo: Vec<f64>,
    /// Masked pixels left at zero because the lighting was degenerate.
    pub degenerate: usize,
    pub condition: f64,
}

/// Solves every masked pixel; colour channels are averaged first.
pub fn solve_map(sample: &PhotoSample) -> Result<SolvedMap> {
    let l = LightMatrix::new(&sample.lights)?;
    let (m, c, px) = (sample.light_count(), sample.channels, sample.pixels());
    let results: Vec<Result<([f64; 3], f64)>> = (0..px)
        .into_par_iter()
        .map(|p| {
            if !sample.is_masked(p) {
                return Ok(([0.0; 3], 0.0));
            }
            let obs: Vec<f64> = (0..m)
                .map(|j| {
                    let v = &sample.image(j)[p * c..(p + 1) * c];
                    v.iter().map(|&x| x as f64).sum::<f64>() / c as f64
                })
                .collect();
            woodham_solve(&obs, &l)
        })
        .collect();
    let mut normals = Vec::with_capacity(px);
    let mut albedo = Vec::with_capacity(px);
    let mut degenerate = 0;
    for r in results {
        match r {
            Ok((n, a)) => {
                normals.push([n[0] as f32, n[1] as f32, n[2] as f32]);
                albedo.push(a);
            }
            Err(Error::DegenerateLighting { .. }) => {
                degenerate += 1;
                normals.push([0.0; 3]);
                albedo.push(0.0);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SolvedMap {
        normals: NormalMap {
            height: sample.height,
            width: sample.width,
            normals,
            mask: (0..px).map(|p| sample.is_masked(p)).collect(),
        },
        albedo,
        degenerate,
        condition: l.condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_lights() {
        let l = LightMatrix::new(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert!((l.condition() - 1.0).abs() < 1e-12);
        let (n, a) = woodham_solve(&[0.0, 0.0, 1.0], &l).unwrap();
        assert_eq!(n, [0.0, 0.0, 1.0]);
        assert!((a - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dark_pixel_falls_back() {
        let l = LightMatrix::new(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(woodham_solve(&[0.0; 3], &l).unwrap(), ([0.0, 0.0, 1.0], 0.0));
    }

    #[test]
    fn colinear_lights_are_degenerate() {
        let l = LightMatrix::new(&[[0.0, 0.0, 1.0]; 3]).unwrap();
        assert!(l.condition() >= MAX_CONDITION);
        assert!(matches!(
            woodham_solve(&[1.0; 3], &l),
            Err(Error::DegenerateLighting { .. })
        ));
    }

    #[test]
    fn rejects_non_unit_lights() {
        assert!(LightMatrix::new(&[[0.0, 0.0, 2.0]]).is_err());
    }
}
