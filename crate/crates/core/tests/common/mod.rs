//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

use pst_core::diffarray::Tensor;
use pst_core::model::PhotoSample;
use pst_core::params::ParamStore;
use pst_core::synthdata::{extract_patches, GenConfig, SurfaceKind};

/// Row-major dense matrix.
#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &Tensor<f64>) -> Mat {
        let s = t.shape();
        let cols = *s.last().unwrap();
        Mat {
            rows: t.len() / cols,
            cols,
            data: t.data().to_vec(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self * w + b` with `w` stored `[in, out]`.
    pub fn affine(&self, w: &Mat, b: &[f64]) -> Mat {
        let mut out = vec![0.0; self.rows * w.cols];
        for r in 0..self.rows {
            for o in 0..w.cols {
                let mut acc = b[o];
                for i in 0..self.cols {
                    acc += self.at(r, i) * w.at(i, o);
                }
                out[r * w.cols + o] = acc;
            }
        }
        Mat {
            rows: self.rows,
            cols: w.cols,
            data: out,
        }
    }

    pub fn plus(&self, other: &Mat) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub fn weight(store: &ParamStore<f64>, name: &str) -> (Mat, Vec<f64>) {
    let w = store.get(&format!("{name}.weight")).unwrap();
    let b = store.get(&format!("{name}.bias")).unwrap();
    (Mat::from_tensor(w), b.data().to_vec())
}

/// Attention written out element by element from projected `q, k, v`.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let d = q.cols;
    let dk = d / heads;
    let mut out = vec![0.0; q.rows * d];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..q.rows {
            let scores: Vec<f64> = (0..k.rows)
                .map(|j| cols.clone().map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                out[i * d + c] = (0..k.rows).map(|j| exps[j] / z * v.at(j, c)).sum();
            }
        }
    }
    Mat {
        rows: q.rows,
        cols: d,
        data: out,
    }
}

pub fn oracle_multihead(store: &ParamStore<f64>, name: &str, xq: &Mat, xkv: &Mat, heads: usize) -> Mat {
    let (wq, bq) = weight(store, &format!("{name}.q"));
    let (wk, bk) = weight(store, &format!("{name}.k"));
    let (wv, bv) = weight(store, &format!("{name}.v"));
    let (wo, bo) = weight(store, &format!("{name}.o"));
    let a = attend(&xq.affine(&wq, &bq), &xkv.affine(&wk, &bk), &xkv.affine(&wv, &bv), heads);
    a.affine(&wo, &bo)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Residual block in eval mode: `H = Q + MHA`, `out = FFN2(GeLU(FFN1(H))) + H`.
pub fn oracle_encoder_block(store: &ParamStore<f64>, name: &str, f: &Mat, heads: usize) -> Mat {
    let (wq, bq) = weight(store, &format!("{name}.attn.q"));
    let (wk, bk) = weight(store, &format!("{name}.attn.k"));
    let (wv, bv) = weight(store, &format!("{name}.attn.v"));
    let (wo, bo) = weight(store, &format!("{name}.attn.o"));
    let q = f.affine(&wq, &bq);
    let a = attend(&q, &f.affine(&wk, &bk), &f.affine(&wv, &bv), heads).affine(&wo, &bo);
    let h = q.plus(&a);
    let (w1, b1) = weight(store, &format!("{name}.ffn1"));
    let (w2, b2) = weight(store, &format!("{name}.ffn2"));
    h.affine(&w1, &b1).map(gelu).affine(&w2, &b2).plus(&h)
}

pub fn angle_deg(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dot: f64 = (0..3).map(|k| a[k] as f64 * b[k] as f64).sum();
    let na: f64 = a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// 8x8 training patches cut from mixed Lambertian and glossy renders.
pub fn toy_patches(count: usize, seed: u64) -> Vec<PhotoSample> {
    let g = GenConfig {
        count: count / 4,
        kind: None,
        size: 32,
        channels: 1,
        lights: 10,
        max_specular: 0.5,
        lambertian_fraction: 0.5,
        seed,
        ..Default::default()
    };
    let mut patches = Vec::with_capacity(count);
    let mut i = 0;
    while patches.len() < count {
        patches.extend(extract_patches(&g.render(i).unwrap(), 8, 8, 0.5).unwrap());
        i += 1;
    }
    patches.truncate(count);
    patches
}

/// Held-out spheres with ten lights.
pub fn held_out_spheres(count: usize, size: usize, seed: u64) -> Vec<PhotoSample> {
    let g = GenConfig {
        count,
        kind: Some(SurfaceKind::Sphere),
        size,
        channels: 1,
        lights: 10,
        seed,
        ..Default::default()
    };
    (0..count).map(|i| g.render(i).unwrap()).collect()
}
