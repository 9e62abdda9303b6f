//! Shared pieces of the supervised training loops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::{Params, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Validation loss is recorded at step 0, every `val_every` steps and after the last step.
    pub val_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            steps: 1000,
            batch: 16,
            val_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch == 0 || self.val_every == 0 {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    /// Training loss of every step, before its update.
    pub train: Vec<f64>,
    /// `(step, loss)` pairs on the validation split.
    pub val: Vec<(usize, f64)>,
}

impl LossHistory {
    pub fn initial_val(&self) -> Option<f64> {
        self.val.first().map(|v| v.1)
    }

    pub fn final_val(&self) -> Option<f64> {
        self.val.last().map(|v| v.1)
    }

    pub(crate) fn wants_val(&self, step: usize, cfg: &TrainConfig) -> bool {
        step % cfg.val_every == 0 || step == cfg.steps
    }
}

pub(crate) fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss })
    }
}

/// Per-column mean and standard deviation of `[rows, d]` data, rounded to
/// f32. The deviation is floored so constant columns stay finite.
pub(crate) fn column_stats(x: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = (x.rows(), x.last_dim());
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n.max(1) as f64).sqrt().max(1e-3)).collect();
    let mut mean = Tensor::new(&[d], mean).expect("shape");
    let mut std = Tensor::new(&[d], std).expect("shape");
    mean.round_to_f32();
    std.round_to_f32();
    (mean, std)
}

/// Applies stored `(x − mean) / std` normalisation to `[rows, d]` features.
pub(crate) fn normalize(params: &Params, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let mean = params.get(&format!("{prefix}.norm.mean"))?;
    let std = params.get(&format!("{prefix}.norm.std"))?;
    let d = mean.numel();
    if x.last_dim() != d {
        return Err(Error::dim(format!(
            "feature width {} does not match the model's {d}",
            x.last_dim()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean.data()).zip(std.data()) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_two_rows() {
        let x = Tensor::new(&[2, 2], vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let (m, s) = column_stats(&x);
        assert_eq!(m.data(), &[2.0, 5.0]);
        assert_eq!(s.data(), &[1.0, 1e-3f32 as f64]);
    }

    #[test]
    fn divergence_names_step() {
        assert!(matches!(
            check_loss(7, f64::NAN),
            Err(Error::Divergence { step: 7, .. })
        ));
        check_loss(0, 1.0).unwrap();
    }
}
