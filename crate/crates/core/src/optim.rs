//! Adam over named parameter sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{round_to_storage, Matrix, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter that has a gradient entry.
    ///
    /// Updated values are rounded to storage precision. Gradient names that
    /// do not exist in `params` are an error; parameters without a gradient
    /// entry are left untouched.
    pub fn update(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::ParameterMismatch(format!("gradient for unknown `{name}`")))?;
            if p.data.len() != g.data().len() {
                return Err(Error::shape(
                    format!("{} values for `{name}`", p.data.len()),
                    format!("{}", g.data().len()),
                ));
            }
        }
        self.step += 1;
        if self.cfg.lr == 0.0 {
            return Ok(());
        }
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.data().len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.data().len()]);
            for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = round_to_storage(*pv - self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps));
            }
        }
        Ok(())
    }
}

/// Elementwise mean of gradient maps that share the same names, summed in
/// slice order.
pub fn mean_gradients(parts: &[Gradients]) -> Result<Gradients> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Reduction("no gradients to average".into()))?;
    let mut out = Gradients::new();
    for (name, g0) in first {
        let mut acc = Matrix::zeros(g0.rows(), g0.cols());
        for p in parts {
            let g = p
                .get(name)
                .ok_or_else(|| Error::Reduction(format!("missing `{name}`")))?;
            acc.add_assign(g);
        }
        acc.scale_assign(1.0 / parts.len() as f64);
        out.insert(name.clone(), acc);
    }
    for p in parts {
        if p.len() != first.len() {
            return Err(Error::Reduction("gradient sets cover different names".into()));
        }
    }
    Ok(out)
}
