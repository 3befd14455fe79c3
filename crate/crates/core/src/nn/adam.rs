use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::params::{GradMap, Param, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Param,
    pub v: Param,
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, Moments>,
}

/// Rows of a parameter that must not move (frozen identities).
pub type RowMask = BTreeMap<String, Vec<bool>>;

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_parts(config: AdamConfig, step: u64, moments: BTreeMap<String, Moments>) -> Self {
        Self {
            config,
            step,
            moments,
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// One update of every parameter in `params`. Every parameter must have
    /// a gradient of matching shape.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradMap) -> Result<()> {
        self.step_masked(params, grads, &RowMask::new())
    }

    /// Like [`AdamState::step`], but rows flagged `true` in `frozen` are left
    /// untouched (their moments too).
    pub fn step_masked(&mut self, params: &mut ParameterSet, grads: &GradMap, frozen: &RowMask) -> Result<()> {
        for name in params.names() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing gradient for `{name}`")))?;
            let p = params.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "adam gradient",
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let (rows, cols) = p.shape();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Param::zeros(rows, cols),
                v: Param::zeros(rows, cols),
            });
            if mom.m.shape() != (rows, cols) {
                grow(&mut mom.m, rows, cols);
                grow(&mut mom.v, rows, cols);
            }
            let mask = frozen.get(name.as_str());
            let (pd, md, vd) = (p.data_mut(), mom.m.data_mut(), mom.v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                if mask.is_some_and(|m| m.get(i / cols).copied().unwrap_or(false)) {
                    continue;
                }
                let m = c.beta1 * f64::from(md[i]) + (1.0 - c.beta1) * gi;
                let v = c.beta2 * f64::from(vd[i]) + (1.0 - c.beta2) * gi * gi;
                md[i] = m as f32;
                vd[i] = v as f32;
                let update = c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
                pd[i] = (f64::from(pd[i]) - update) as f32;
            }
        }
        Ok(())
    }
}

/// Extend moments with zero rows after a parameter gained rows.
fn grow(p: &mut Param, rows: usize, cols: usize) {
    let mut data = p.data().to_vec();
    data.resize(rows * cols, 0.0);
    *p = Param::from_f32(rows, cols, data).expect("resized to shape");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f32) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("w", Param::from_f32(1, 1, vec![v]).unwrap()).unwrap();
        ps
    }

    fn grad(v: f64) -> GradMap {
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::scalar(v));
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = single(0.5);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut ps, &grad(1.0)).unwrap();
        let after_one = ps.get("w").unwrap().data()[0];
        let m1 = adam.moments()["w"].m.data()[0];
        adam.step(&mut ps, &grad(0.0)).unwrap();
        // update uses the decayed momentum, but a fresh state with zero
        // gradient does not move
        let mut fresh = single(0.5);
        let mut adam2 = AdamState::new(AdamConfig::default());
        adam2.step(&mut fresh, &grad(0.0)).unwrap();
        assert_eq!(fresh.get("w").unwrap().data()[0], 0.5);
        assert!(adam.moments()["w"].m.data()[0].abs() < m1.abs());
        assert!(after_one < 0.5);
    }

    #[test]
    fn first_step_closed_form() {
        let mut ps = single(0.0);
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(cfg);
        adam.step(&mut ps, &grad(1.0)).unwrap();
        // m̂ = 1, v̂ = 1 → update = lr / (1 + eps)
        let expected = -cfg.lr / (1.0 + cfg.eps);
        assert!((f64::from(ps.get("w").unwrap().data()[0]) - expected).abs() < 1e-10);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut ps = single(1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        let mut prev = 1.0f32;
        for _ in 0..50 {
            adam.step(&mut ps, &grad(0.7)).unwrap();
            let now = ps.get("w").unwrap().data()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut ps = single(1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut ps, &GradMap::new()), Err(Error::Contract(_))));
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn frozen_rows_do_not_move() {
        let mut ps = ParameterSet::new();
        ps.insert("lib", Param::from_f32(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let mut g = GradMap::new();
        g.insert("lib".into(), Tensor::filled(2, 2, 1.0));
        let mut mask = RowMask::new();
        mask.insert("lib".into(), vec![true, false]);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step_masked(&mut ps, &g, &mask).unwrap();
        let d = ps.get("lib").unwrap().data();
        assert_eq!(&d[..2], &[1.0, 1.0]);
        assert!(d[2] < 1.0 && d[3] < 1.0);
    }
}
