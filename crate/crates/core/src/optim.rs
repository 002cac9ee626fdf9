use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// Note `beta2 = 0.9`, not the more common 0.999.
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam coefficients {self:?}")))
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// One bias-corrected Adam update of `param` in place. `t` is the 1-based
/// step count after this update.
pub fn adam_update(param: &Var, grad: &Tensor, moments: &mut Moments, t: u64, cfg: &AdamConfig) -> Result<()> {
    // Leaf gradients still reference the forward graph; moments built from
    // them would keep every past step alive.
    let grad = grad.detach();
    let m = moments
        .m
        .affine(cfg.beta1, 0.0)?
        .add(&grad.affine(1.0 - cfg.beta1, 0.0)?)?;
    let v = moments
        .v
        .affine(cfg.beta2, 0.0)?
        .add(&grad.sqr()?.affine(1.0 - cfg.beta2, 0.0)?)?;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let m_hat = m.affine(1.0 / bc1, 0.0)?;
    let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, cfg.eps)?;
    let next = param.as_tensor().sub(&m_hat.div(&denom)?.affine(cfg.lr, 0.0)?)?;
    param.set(&next)?;
    moments.m = m;
    moments.v = v;
    Ok(())
}

/// Adam over a fixed, named parameter list.
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<(String, Var)>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let moments = params
            .iter()
            .map(|(name, var)| {
                let z = var.as_tensor().zeros_like()?;
                Ok((name.clone(), Moments { m: z.clone(), v: z }))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            params,
            moments,
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn set_state(&mut self, step: u64, moments: BTreeMap<String, Moments>) -> Result<()> {
        for (name, _) in &self.params {
            if !moments.contains_key(name) {
                return Err(Error::Checkpoint(format!("optimizer state lacks `{name}`")));
            }
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }

    /// Applies one update using whatever gradients `grads` holds for the
    /// managed parameters; parameters without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let mut updates = Vec::new();
        for (name, var) in &self.params {
            if let Some(g) = grads.get(var.as_tensor()) {
                let total = g.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
                if !total.is_finite() {
                    // Sum overflow aside, a non-finite sum means a NaN/Inf entry.
                    let bad = g
                        .to_dtype(DType::F64)?
                        .flatten_all()?
                        .to_vec1::<f64>()?
                        .iter()
                        .any(|x| !x.is_finite());
                    if bad {
                        return Err(Error::BadGradient(name.clone()));
                    }
                }
                updates.push((name, var, g));
            }
        }
        self.step += 1;
        for (name, var, g) in updates {
            let moments = self.moments.get_mut(name).expect("moments exist for every parameter");
            adam_update(var, g, moments, self.step, &self.cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar_adam(x0: f64, steps: usize, cfg: &AdamConfig) -> f64 {
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * x;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v / (1.0 - cfg.beta2.powi(t as i32));
            x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        x
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let p = Var::new(&[1.5f64, -2.0], &Device::Cpu).unwrap();
        let mut mo = Moments {
            m: p.as_tensor().zeros_like().unwrap(),
            v: p.as_tensor().zeros_like().unwrap(),
        };
        let g = p.as_tensor().zeros_like().unwrap();
        adam_update(&p, &g, &mut mo, 1, &AdamConfig::default()).unwrap();
        assert_eq!(p.as_tensor().to_vec1::<f64>().unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn moments_do_not_retain_the_graph() {
        let p = Var::new(&[1f64, 2.0], &Device::Cpu).unwrap();
        let loss = p.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(p.as_tensor()).unwrap();
        assert!(g.track_op());
        let mut mo = Moments {
            m: p.as_tensor().zeros_like().unwrap(),
            v: p.as_tensor().zeros_like().unwrap(),
        };
        adam_update(&p, g, &mut mo, 1, &AdamConfig::default()).unwrap();
        assert!(!mo.m.track_op() && !mo.v.track_op());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = Var::new(&[0f64], &Device::Cpu).unwrap();
        let mut mo = Moments {
            m: p.as_tensor().zeros_like().unwrap(),
            v: p.as_tensor().zeros_like().unwrap(),
        };
        let g = Tensor::new(&[1f64], &Device::Cpu).unwrap();
        adam_update(&p, &g, &mut mo, 1, &AdamConfig::default()).unwrap();
        let x = p.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((x + 1e-3 / (1.0 + 1e-8)).abs() < 1e-14, "{x}");
    }

    #[test]
    fn ten_steps_on_square_match_scalar_reference() {
        let cfg = AdamConfig::default();
        let x = Var::new(&[0.8f64], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], cfg).unwrap();
        for _ in 0..10 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let got = x.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((got - scalar_adam(0.8, 10, &cfg)).abs() < 1e-10);
        assert_eq!(opt.step_count(), 10);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let x = Var::new(&[-1f64], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("layer.w".into(), x.clone())], AdamConfig::default()).unwrap();
        let loss = x.as_tensor().sqrt().unwrap().sum_all().unwrap();
        match opt.step(&loss.backward().unwrap()) {
            Err(Error::BadGradient(name)) => assert_eq!(name, "layer.w"),
            other => panic!("{other:?}"),
        }
    }
}
