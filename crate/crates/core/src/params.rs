//! Named parameter storage shared by every learnable component.

use std::collections::BTreeMap;

use rand::Rng;

use crate::diffarray::{Float, RunningStats, Tape, Tensor, Var};
use crate::{Error, Result};

/// Learnable tensors and non-learnable buffers, keyed by dotted names
/// such as `branch1.block0.attn.q.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Weight `[fan_in, fan_out]` and bias `[fan_out]`, uniform in `±1/sqrt(fan_in)`.
    pub fn declare_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.insert(format!("{name}.weight"), uniform(vec![fan_in, fan_out], bound, rng));
        self.insert(format!("{name}.bias"), uniform(vec![fan_out], bound, rng));
    }

    /// 3x3 convolution `[c_out, c_in, 3, 3]` plus bias, uniform in `±1/sqrt(9 c_in)`.
    pub fn declare_conv(&mut self, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) {
        let bound = 1.0 / ((9 * c_in) as f64).sqrt();
        self.insert(format!("{name}.weight"), uniform(vec![c_out, c_in, 3, 3], bound, rng));
        self.insert(format!("{name}.bias"), uniform(vec![c_out], bound, rng));
    }

    /// Affine `gamma = 1`, `beta = 0` with running mean 0 and variance 1.
    pub fn declare_batchnorm(&mut self, name: &str, channels: usize) {
        self.insert(format!("{name}.gamma"), Tensor::full(vec![channels], T::one()));
        self.insert(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        self.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels]));
        self.insert_buffer(format!("{name}.running_var"), Tensor::full(vec![channels], T::one()));
    }

    pub fn running_stats(&self, name: &str) -> Result<RunningStats<T>> {
        let get = |suffix: &str| {
            self.buffers
                .get(&format!("{name}.{suffix}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Contract(format!("missing buffer {name}.{suffix}")))
        };
        Ok(RunningStats {
            mean: get("running_mean")?,
            var: get("running_var")?,
        })
    }

    pub fn set_running_stats(&mut self, name: &str, stats: &RunningStats<T>) -> Result<()> {
        for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let key = format!("{name}.{suffix}");
            let t = self
                .buffers
                .get_mut(&key)
                .ok_or_else(|| Error::Contract(format!("missing buffer {key}")))?;
            if t.len() != values.len() {
                return Err(Error::Shape(format!("{key}: {} vs {}", t.len(), values.len())));
            }
            t.data_mut().copy_from_slice(values);
        }
        Ok(())
    }

    /// Records every learnable tensor on `tape` as a gradient leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }
}

fn uniform<T: Float>(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

/// Tape handles for a [`ParamStore`], looked up by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }
}

/// Gradient check over every learnable tensor of `store` plus `extra` inputs.
///
/// `f` receives the bound parameters and the extra input handles.
pub fn grad_check_store<F>(
    store: &ParamStore<f64>,
    extra: &[Tensor<f64>],
    eps: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = store.params().map(|(_, t)| t.clone()).collect();
    inputs.extend_from_slice(extra);
    crate::diffarray::grad_check(
        |tape, vars| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            f(tape, &bound, &vars[names.len()..])
        },
        &inputs,
        eps,
    )
}
