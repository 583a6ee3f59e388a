//! Optimizer, learning-rate schedule, and the multi-exit training regimes:
//! two-stage (backbone+final exit, then per-exit distillation), joint,
//! alternating, and single-exit fine-tuning.
//!
//! Determinism contract: identical (config, seed, data) produce
//! byte-identical checkpoints and metrics. All randomness flows through
//! seeds derived from the run seed with fixed stream tags; nothing reads
//! the clock or the environment.

mod regimes;

pub use regimes::{
    ablation_ladder, run_experiment, train_run, ExperimentConfig, ExperimentResult, SeedResult,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamSet, Scope};

/// AdamW with decoupled weight decay. The decay is applied multiplicatively
/// to the parameter (never folded into the gradient), then the Adam term is
/// subtracted:
///
///   m <- b1 m + (1-b1) g;     v <- b2 v + (1-b2) g^2
///   p <- p * (1 - lr * wd) - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    /// One update over every parameter with a gradient. Parameters whose
    /// entry is None are untouched, including their moment buffers.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Validation(format!(
                "optimizer got {} gradient slots for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (idx, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !g.iter().all(|v| v.is_finite()) {
                let name = params.iter().nth(idx).map(|(_, p)| p.name.clone());
                return Err(Error::Divergence(format!(
                    "non-finite gradient for {:?}",
                    name.unwrap_or_default()
                )));
            }
            let p = params.get_mut(crate::model::pid_for_index(idx));
            if g.len() != p.data.len() {
                return Err(Error::Shape(format!(
                    "gradient length {} != parameter {} length {}",
                    g.len(),
                    p.name,
                    p.data.len()
                )));
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] = p.data[i] * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to the peak over the first `warmup_steps`, then linear
/// decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_frac: f64) -> Result<LinearSchedule> {
        if total_steps == 0 {
            return Err(Error::Validation("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&warmup_frac) {
            return Err(Error::Validation(format!(
                "warmup fraction {warmup_frac} not in [0, 1)"
            )));
        }
        Ok(LinearSchedule {
            peak,
            warmup_steps: (total_steps as f64 * warmup_frac).round() as usize,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let rem = (self.total_steps - step) as f64;
        let span = (self.total_steps - self.warmup_steps) as f64;
        self.peak * rem / span
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Jt,
    #[serde(rename = "2st")]
    TwoStage,
    Alt,
    SingleExit,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::Jt => "jt",
            Regime::TwoStage => "2st",
            Regime::Alt => "alt",
            Regime::SingleExit => "single_exit",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ce,
    CeScl,
    AclEmbed,
    AclCl,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Objective::Ce => "ce",
            Objective::CeScl => "ce_scl",
            Objective::AclEmbed => "acl_embed",
            Objective::AclCl => "acl_cl",
        };
        write!(f, "{s}")
    }
}

/// Training-run configuration. Defaults: lambda 0.02, tau 0.5, angle
/// threshold 90 degrees, AdamW weight decay 0.01 with 10% linear warmup,
/// 15 epochs per stage, distillation at temperature 2.0 and weight 1.0.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub objective: Objective,
    /// Stage-1 objective override. By default `acl_cl` trains stage 1 with
    /// `acl_embed` and every other objective applies to both stages.
    #[serde(default)]
    pub stage1_objective: Option<Objective>,
    #[serde(default)]
    pub use_acl_grad: bool,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_gamma_thres")]
    pub gamma_thres: f64,
    #[serde(default)]
    pub kd: bool,
    #[serde(default = "default_kd_temperature")]
    pub kd_temperature: f64,
    #[serde(default = "default_kd_weight")]
    pub kd_weight: f64,
    #[serde(default = "default_epochs")]
    pub epochs_stage1: usize,
    #[serde(default = "default_epochs")]
    pub epochs_stage2: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    0.02
}

fn default_tau() -> f64 {
    0.5
}

fn default_gamma_thres() -> f64 {
    90.0
}

fn default_kd_temperature() -> f64 {
    2.0
}

fn default_kd_weight() -> f64 {
    1.0
}

fn default_epochs() -> usize {
    15
}

fn default_batch_size() -> usize {
    16
}

fn default_peak_lr() -> f64 {
    1e-3
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_warmup_frac() -> f64 {
    0.1
}

impl RegimeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Validation(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.tau <= 0.0 {
            return Err(Error::Validation(format!("tau {} must be positive", self.tau)));
        }
        if !(0.0..=180.0).contains(&self.gamma_thres) {
            return Err(Error::Validation(format!(
                "gamma_thres {} outside [0, 180]",
                self.gamma_thres
            )));
        }
        if self.kd_temperature <= 0.0 || self.kd_weight < 0.0 {
            return Err(Error::Validation("invalid distillation constants".into()));
        }
        if self.batch_size == 0 || self.epochs_stage1 == 0 {
            return Err(Error::Validation("batch_size and epochs must be positive".into()));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Validation("peak_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Validation("warmup_frac must be in [0, 1)".into()));
        }
        match self.regime {
            Regime::Jt | Regime::Alt => {
                if self.objective != Objective::Ce {
                    return Err(Error::Validation(format!(
                        "{} training supports only the ce objective",
                        self.regime
                    )));
                }
                if self.kd {
                    return Err(Error::Validation(
                        "distillation is only valid for two-stage training".into(),
                    ));
                }
            }
            Regime::SingleExit => {
                if self.objective == Objective::AclCl {
                    return Err(Error::Validation(
                        "acl_cl requires intermediate-exit training (2st stage 2)".into(),
                    ));
                }
                if self.kd {
                    return Err(Error::Validation(
                        "distillation is only valid for two-stage training".into(),
                    ));
                }
            }
            Regime::TwoStage => {
                if self.epochs_stage2 == 0 {
                    return Err(Error::Validation("epochs_stage2 must be positive".into()));
                }
            }
        }
        if let Some(s1) = self.stage1_objective {
            if s1 == Objective::AclCl {
                return Err(Error::Validation(
                    "acl_cl cannot be a stage-1 objective".into(),
                ));
            }
        }
        Ok(())
    }

    /// Objective used for stage 1 / single-exit / alternating odd epochs.
    pub fn stage1_objective(&self) -> Objective {
        self.stage1_objective.unwrap_or(match self.objective {
            Objective::AclCl => Objective::AclEmbed,
            o => o,
        })
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}-seed{}", self.regime, self.objective, self.seed)
    }
}

/// Scope of parameters trained in stage 1 (and by the alternating regime's
/// odd epochs): the backbone plus the final exit.
pub fn stage1_scope(n_layers: usize) -> Scope {
    Scope::BackboneAndExit(n_layers)
}
