use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Real, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Adam with bias correction. Parameters listed in `row_sparse` are
/// updated per row, and rows whose gradient is entirely zero keep both the
/// value and the moments (so anchors of classes absent from a batch, or
/// seen only at VLR, stay put).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
    pub row_sparse: Vec<String>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
            row_sparse: Vec::new(),
        }
    }

    pub fn with_row_sparse(mut self, names: &[&str]) -> Self {
        self.row_sparse = names.iter().map(|s| s.to_string()).collect();
        self
    }

    /// One update from the gradients recorded on `tape`. Parameters without
    /// a gradient are left untouched. A non-finite gradient aborts before
    /// any parameter changes.
    pub fn step_from_tape(&mut self, params: Vec<&mut Param<T>>, tape: &Tape<T>) -> Result<()> {
        let grads: Vec<Option<Tensor<T>>> = params.iter().map(|p| tape.param_grad(&p.name).cloned()).collect();
        let mut params = params;
        self.step(&mut params, &grads)
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        let next = self.step + 1;
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "adam",
                        format!("{}: gradient {:?} for parameter {:?}", p.name, g.shape(), p.value.shape()),
                    ));
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient {
                        param: p.name.clone(),
                        step: next,
                    });
                }
            }
        }
        self.step = next;
        let c = self.config;
        let t = next as i32;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let corr1 = T::from_f64(1.0 - c.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - c.beta2.powi(t));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.epsilon);

        for (p, g) in params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            let mo = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            let sparse = self.row_sparse.contains(&p.name) && p.value.ndim() >= 2;
            let row = if sparse { p.value.shape()[1..].iter().product() } else { p.value.len() };
            let gd = g.data();
            let (md, vd, pd) = (mo.m.data_mut(), mo.v.data_mut(), p.value.data_mut());
            for start in (0..gd.len()).step_by(row) {
                let end = start + row;
                if sparse && gd[start..end].iter().all(|&x| x == T::zero()) {
                    continue;
                }
                for i in start..end {
                    let gi = gd[i];
                    md[i] = b1 * md[i] + (one - b1) * gi;
                    vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                    let mh = md[i] / corr1;
                    let vh = vd[i] / corr2;
                    pd[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
