//! Plain SGD and Adam over a [`ParamSet`].

use std::collections::BTreeMap;

use uniavatar_core::{GradientMap, ParamSet};

use crate::config::OptimizerKind;
use crate::error::Result;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    steps: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Global L2 norm of the gradients that would be applied.
    pub fn grad_norm(grads: &GradientMap, trainable: &dyn Fn(&str) -> bool) -> f64 {
        grads
            .iter()
            .filter(|(n, _)| trainable(n))
            .flat_map(|(_, t)| t.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update to every parameter that has a gradient and
    /// passes `trainable`, with the gradients multiplied by `grad_scale`.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &GradientMap,
        trainable: &dyn Fn(&str) -> bool,
        grad_scale: f64,
    ) -> Result<()> {
        self.steps += 1;
        let t = self.steps as f64;
        for (name, g) in grads.iter() {
            if !trainable(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let p = p.data_mut();
            let g = g.data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.iter_mut().zip(g) {
                        *w -= self.lr * grad_scale * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
                    let c1 = 1.0 - BETA1.powf(t);
                    let c2 = 1.0 - BETA2.powf(t);
                    for i in 0..p.len() {
                        let gi = g[i] * grad_scale;
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
