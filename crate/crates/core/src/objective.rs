//! Composite training loss and the angular-error metric.

use crate::diffarray::{Float, Tape, Var};
use crate::model::{Batch, ForwardOutput, Graph, NormalMap};
use crate::{Error, Result};

/// The four supervised terms and their unweighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub main: f64,
    pub single: f64,
    pub agg1: f64,
    pub agg2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(main: f64, single: f64, agg1: f64, agg2: f64) -> Self {
        LossBreakdown {
            main,
            single,
            agg1,
            agg2,
            total: main + single + agg1 + agg2,
        }
    }

    pub fn terms(&self) -> [(&'static str, f64); 4] {
        [
            ("main", self.main),
            ("single", self.single),
            ("agg1", self.agg1),
            ("agg2", self.agg2),
        ]
    }
}

/// Mean over masked pixels of `|a - b|^2`; zero when the mask is empty.
pub fn masked_mse(a: &[[f32; 3]], b: &[[f32; 3]], mask: &[bool]) -> Result<f64> {
    if a.len() != b.len() || a.len() != mask.len() {
        return Err(Error::Shape(format!(
            "masked_mse over {}, {} and {} pixels",
            a.len(),
            b.len(),
            mask.len()
        )));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for ((p, q), &inside) in a.iter().zip(b).zip(mask) {
        if inside {
            sum += (0..3).map(|k| (p[k] as f64 - q[k] as f64).powi(2)).sum::<f64>();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn map_mse(pred: &NormalMap, gt: &NormalMap, mask: &[bool]) -> Result<f64> {
    masked_mse(&pred.normals, &gt.normals, mask)
}

/// Loss of one materialized forward pass against ground truth.
pub fn ps_transformer_loss(out: &ForwardOutput, gt: &NormalMap, mask: &[bool]) -> Result<LossBreakdown> {
    if out.single.is_empty() {
        return Err(Error::Contract("forward output has no single-image predictions".into()));
    }
    let pixels = gt.normals.len();
    for (name, map) in [("N", &out.normal), ("N_agg1", &out.agg1), ("N_agg2", &out.agg2)]
        .into_iter()
        .chain(out.single.iter().map(|m| ("N_single", m)))
    {
        if map.normals.len() != pixels {
            return Err(Error::Contract(format!(
                "{name} has {} pixels, ground truth {pixels}",
                map.normals.len()
            )));
        }
    }
    let single = out
        .single
        .iter()
        .map(|m| map_mse(m, gt, mask))
        .sum::<Result<f64>>()?
        / out.single.len() as f64;
    Ok(LossBreakdown::from_terms(
        map_mse(&out.normal, gt, mask)?,
        single,
        map_mse(&out.agg1, gt, mask)?,
        map_mse(&out.agg2, gt, mask)?,
    ))
}

/// Mean angle in degrees between unit normals over masked pixels.
pub fn mean_angular_error(pred: &NormalMap, gt: &NormalMap, mask: &[bool]) -> Result<f64> {
    if pred.normals.len() != gt.normals.len() || pred.normals.len() != mask.len() {
        return Err(Error::Shape(format!(
            "angular error over {}, {} and {} pixels",
            pred.normals.len(),
            gt.normals.len(),
            mask.len()
        )));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for ((p, q), &inside) in pred.normals.iter().zip(&gt.normals).zip(mask) {
        if inside {
            let dot: f64 = (0..3).map(|k| p[k] as f64 * q[k] as f64).sum();
            sum += dot.clamp(-1.0, 1.0).acos().to_degrees();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("angular error over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// In-graph loss terms for a batch; each is the batch mean of per-sample terms.
pub struct GraphLoss {
    pub main: Var,
    pub single: Var,
    pub agg1: Var,
    pub agg2: Var,
    pub total: Var,
}

impl GraphLoss {
    pub fn breakdown<T: Float>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x)[0].as_f64();
        LossBreakdown {
            main: v(self.main),
            single: v(self.single),
            agg1: v(self.agg1),
            agg2: v(self.agg2),
            total: v(self.total),
        }
    }
}

pub fn graph_loss<T: Float>(tape: &mut Tape<T>, g: &Graph<T>, batch: &Batch<T>) -> Result<GraphLoss> {
    let gt = batch
        .normals
        .as_ref()
        .ok_or_else(|| Error::Contract("training batch has no ground-truth normals".into()))?;
    let (b, m, hw) = (
        batch.size,
        batch.lights_per_sample,
        batch.height * batch.width,
    );
    // weight 1/(count_b * B) on every masked component of sample b
    let mut weights = Vec::with_capacity(b * hw * 3);
    for bi in 0..b {
        let mask = &batch.mask[bi * hw..(bi + 1) * hw];
        let count = mask.iter().filter(|&&v| v > T::lit(0.5)).count();
        let w = if count == 0 {
            T::zero()
        } else {
            T::one() / T::lit((count * b) as f64)
        };
        for &v in mask {
            let x = if v > T::lit(0.5) { w } else { T::zero() };
            weights.extend([x; 3]);
        }
    }
    let target = tape.constant(crate::diffarray::Tensor::new(vec![b, batch.height, batch.width, 3], gt.clone())?);

    let term = |tape: &mut Tape<T>, pred: Var| -> Result<Var> {
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        tape.weighted_sum(sq, weights.clone())
    };
    let main = term(tape, g.normal)?;
    let agg1 = term(tape, g.agg1)?;
    let agg2 = term(tape, g.agg2)?;

    let mut single_target = Vec::with_capacity(b * m * hw * 3);
    let mut single_weights = Vec::with_capacity(b * m * hw * 3);
    let inv_m = T::one() / T::lit(m as f64);
    for bi in 0..b {
        for _ in 0..m {
            single_target.extend_from_slice(&gt[bi * hw * 3..(bi + 1) * hw * 3]);
            single_weights.extend(weights[bi * hw * 3..(bi + 1) * hw * 3].iter().map(|&w| w * inv_m));
        }
    }
    let st = tape.constant(crate::diffarray::Tensor::new(
        vec![b, m, batch.height, batch.width, 3],
        single_target,
    )?);
    let diff = tape.sub(g.single, st)?;
    let sq = tape.square(diff);
    let single = tape.weighted_sum(sq, single_weights)?;

    let t = tape.add(main, single)?;
    let t = tape.add(t, agg1)?;
    let total = tape.add(t, agg2)?;
    Ok(GraphLoss {
        main,
        single,
        agg1,
        agg2,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(normals: Vec<[f32; 3]>) -> NormalMap {
        NormalMap {
            height: 1,
            width: normals.len(),
            mask: vec![true; normals.len()],
            normals,
        }
    }

    #[test]
    fn mse_cases() {
        let a = [[0.0, 0.0, 1.0]];
        let b = [[0.0, 1.0, 0.0]];
        assert_eq!(masked_mse(&a, &a, &[true]).unwrap(), 0.0);
        assert_eq!(masked_mse(&a, &b, &[true]).unwrap(), 2.0);
        assert_eq!(masked_mse(&a, &b, &[false]).unwrap(), 0.0);
    }

    #[test]
    fn angular_cases() {
        let z = map(vec![[0.0, 0.0, 1.0]; 4]);
        let x = map(vec![[1.0, 0.0, 0.0]; 4]);
        let half = map(vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        let all = [true; 4];
        assert_eq!(mean_angular_error(&z, &z, &all).unwrap(), 0.0);
        assert!((mean_angular_error(&z, &x, &all).unwrap() - 90.0).abs() < 1e-12);
        assert!((mean_angular_error(&half, &z, &all).unwrap() - 45.0).abs() < 1e-12);
        assert!(matches!(
            mean_angular_error(&z, &x, &[false; 4]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn colinear_vectors_do_not_produce_nan() {
        let v = 1.0f32 / 3.0f32.sqrt();
        let a = map(vec![[v, v, v]]);
        let e = mean_angular_error(&a, &a, &[true]).unwrap();
        assert!(e.is_finite() && e < 0.1);
    }
}
