//! Noise schedule and the single-shot forward diffusion jump.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Timestep count with per-step variances and cumulative signal coefficients.
///
/// `alpha_bar[t]` is the cumulative product of `(1 - beta_s)` for `s <= t`,
/// with `alpha_bar[0] = 1`; it decreases strictly in `t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    /// `betas[t-1]` is the variance added at step `t`, `t` in `1..=t_max`.
    pub betas: Vec<f64>,
    /// Length `t_max + 1`.
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear beta ramp (the conventional choice), `beta_start..beta_end`.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(t_max >= 1);
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        let s = DiffusionSchedule {
            t_max,
            betas,
            alpha_bar,
        };
        s.validate().expect("linear schedule is well-formed");
        s
    }

    /// Checks the cumulative-product identity and strict monotonicity.
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.betas.len() != self.t_max || self.alpha_bar.len() != self.t_max + 1 {
            return Err(DiffusionError::BadSchedule("length mismatch".into()));
        }
        if self.alpha_bar[0] != 1.0 {
            return Err(DiffusionError::BadSchedule("alpha_bar[0] != 1".into()));
        }
        let mut prod = 1.0;
        for t in 1..=self.t_max {
            prod *= 1.0 - self.betas[t - 1];
            if (self.alpha_bar[t] - prod).abs() > 1e-12 {
                return Err(DiffusionError::BadSchedule(format!(
                    "alpha_bar[{t}] deviates from the cumulative product"
                )));
            }
            if self.alpha_bar[t] >= self.alpha_bar[t - 1] {
                return Err(DiffusionError::BadSchedule(
                    "alpha_bar must decrease strictly".into(),
                ));
            }
            if self.alpha_bar[t] <= 0.0 {
                return Err(DiffusionError::BadSchedule("alpha_bar left (0,1]".into()));
            }
        }
        Ok(())
    }
}

/// `z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`, exactly.
///
/// `t = 0` returns `z0` unchanged.
pub fn forward_diffuse(
    z0: &Array3<f64>,
    t: usize,
    eps: &Array3<f64>,
    schedule: &DiffusionSchedule,
) -> Result<Array3<f64>, DiffusionError> {
    if t > schedule.t_max {
        return Err(DiffusionError::TimestepOutOfRange {
            t,
            t_max: schedule.t_max,
        });
    }
    if z0.dim() != eps.dim() {
        return Err(DiffusionError::ShapeMismatch {
            expected: format!("{:?}", z0.dim()),
            actual: format!("{:?}", eps.dim()),
        });
    }
    let ab = schedule.alpha_bar[t];
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}
