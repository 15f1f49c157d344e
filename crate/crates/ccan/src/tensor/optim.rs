use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Parameter, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainSgd,
    Adam,
}

/// Mini-batch gradient descent settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer_kind: OptimizerKind,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.001,
            batch_size: 32,
            optimizer_kind: OptimizerKind::PlainSgd,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Updates parameters in place from their accumulated gradients and zeroes
/// the gradients afterwards. Adam moments are keyed by parameter position,
/// so the same optimizer must always see the same parameter list.
pub struct Optimizer<T: Real> {
    cfg: SgdConfig,
    step_count: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            step_count: 0,
            moments: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut [Parameter<T>]) -> Result<()> {
        for p in params.iter() {
            if p.grad().is_none() {
                return Err(Error::Usage(format!(
                    "parameter '{}' has no gradient; run backward first",
                    p.name
                )));
            }
        }
        self.step_count += 1;
        let lr = self.cfg.learning_rate;
        match self.cfg.optimizer_kind {
            OptimizerKind::PlainSgd => {
                let lr = T::from_f64(lr);
                for p in params.iter_mut() {
                    let g = p.grad().unwrap().to_vec();
                    for (v, gv) in p.value.data_mut().iter_mut().zip(g) {
                        *v = *v - lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.moments.is_empty() {
                    self.moments = params
                        .iter()
                        .map(|p| {
                            (
                                vec![T::zero(); p.value.numel()],
                                vec![T::zero(); p.value.numel()],
                            )
                        })
                        .collect();
                }
                if self.moments.len() != params.len() {
                    return Err(Error::Usage(
                        "optimizer was created for a different parameter list".into(),
                    ));
                }
                let t = self.step_count as f64;
                let bc1 = 1.0 - ADAM_BETA1.powf(t);
                let bc2 = 1.0 - ADAM_BETA2.powf(t);
                for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
                    let g = p.grad().unwrap().to_vec();
                    for ((pv, gv), (mv, vv)) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(g)
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        let gf = gv.as_f64();
                        let mf = ADAM_BETA1 * mv.as_f64() + (1.0 - ADAM_BETA1) * gf;
                        let vf = ADAM_BETA2 * vv.as_f64() + (1.0 - ADAM_BETA2) * gf * gf;
                        *mv = T::from_f64(mf);
                        *vv = T::from_f64(vf);
                        let update = lr * (mf / bc1) / ((vf / bc2).sqrt() + ADAM_EPS);
                        *pv = *pv - T::from_f64(update);
                    }
                }
            }
        }
        for p in params.iter_mut() {
            p.zero_grad();
        }
        Ok(())
    }
}
