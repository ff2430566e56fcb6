//! Decoupled-weight-decay adaptive optimizer and learning-rate rules:
//! sqrt batch-size scaling, the fine-tune division, LayerDecay multipliers,
//! and the per-model-size drop-rate table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Learning-rate schedule over training steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    CosineWarmup,
}

/// Optimizer settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Geometric per-depth LR decay in `(0, 1]`; None disables LayerDecay.
    pub layer_decay: Option<f64>,
    pub schedule: Schedule,
    pub warmup_epochs: usize,
    pub min_lr: f64,
}

impl OptimConfig {
    /// Defaults with the from-scratch LR rule for the given batch size:
    /// weight decay 0.02, betas (0.9, 0.999), eps 1e-8, cosine schedule with
    /// 5 warmup epochs.
    pub fn for_batch_size(batch_size: usize) -> Self {
        OptimConfig {
            base_lr: train_lr(batch_size),
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            layer_decay: None,
            schedule: Schedule::CosineWarmup,
            warmup_epochs: 5,
            min_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(ld) = self.layer_decay {
            if !(ld > 0.0 && ld <= 1.0) {
                return Err(Error::invalid("optim", format!("layer_decay {ld} not in (0, 1]")));
            }
        }
        if self.base_lr <= 0.0 {
            return Err(Error::invalid("optim", "base_lr must be positive"));
        }
        Ok(())
    }
}

/// From-scratch / pre-training base LR: `1e-3 * sqrt(batch / 2048)`.
pub fn train_lr(batch_size: usize) -> f64 {
    1e-3 * (batch_size as f64 / 2048.0).sqrt()
}

/// Fine-tuning base LR: a tenth of the training rule, doubled when
/// LayerDecay is active to compensate the overall reduction of updates:
/// `1e-4 * sqrt(batch / 2048) * C_LD` with `C_LD = 2` under LayerDecay.
pub fn finetune_lr(batch_size: usize, use_layer_decay: bool) -> f64 {
    let c_ld = if use_layer_decay { 2.0 } else { 1.0 };
    1e-4 * (batch_size as f64 / 2048.0).sqrt() * c_ld
}

/// LayerDecay multipliers for `depth` blocks plus the head: entry `l` (block
/// `l`) gets `ld^(depth - 1 - l)`, the final block and the head get 1, and
/// the stem shares the deepest multiplier (entry 0).
///
/// Returned length is `depth + 1`: blocks `0..depth`, then the head.
pub fn layer_decay_factors(depth: usize, ld: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(depth + 1);
    for l in 0..depth {
        out.push(ld.powi((depth - 1 - l) as i32));
    }
    out.push(1.0);
    out
}

/// ViT model sizes with published hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelName {
    VitS,
    VitM,
    VitB,
    VitL,
    VitH,
}

impl std::str::FromStr for ModelName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ViT-S" | "vit-s" => Ok(ModelName::VitS),
            "ViT-M" | "vit-m" => Ok(ModelName::VitM),
            "ViT-B" | "vit-b" => Ok(ModelName::VitB),
            "ViT-L" | "vit-l" => Ok(ModelName::VitL),
            "ViT-H" | "vit-h" => Ok(ModelName::VitH),
            other => Err(Error::invalid("model_name", format!("unknown model `{other}`"))),
        }
    }
}

/// Training regime the drop rate is tabulated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainRegime {
    /// Training from scratch on the 1k-class set.
    Train1k,
    /// Pre-training on the 21k-class set.
    Pretrain21k,
}

/// Stochastic-depth rate per model size and regime, with the optional +0.05
/// adjustment used when more regularization is needed (long pre-training
/// schedules or large resolutions).
pub fn tau_for_model(name: ModelName, regime: PretrainRegime, extra_regularization: bool) -> f64 {
    let base = match (name, regime) {
        (ModelName::VitS, PretrainRegime::Train1k) => 0.05,
        (ModelName::VitM, PretrainRegime::Train1k) => 0.1,
        (ModelName::VitB, PretrainRegime::Train1k) => 0.2,
        (ModelName::VitL, PretrainRegime::Train1k) => 0.45,
        (ModelName::VitH, PretrainRegime::Train1k) => 0.6,
        (ModelName::VitS, PretrainRegime::Pretrain21k) => 0.05,
        (ModelName::VitM, PretrainRegime::Pretrain21k) => 0.05,
        (ModelName::VitB, PretrainRegime::Pretrain21k) => 0.1,
        (ModelName::VitL, PretrainRegime::Pretrain21k) => 0.3,
        (ModelName::VitH, PretrainRegime::Pretrain21k) => 0.5,
    };
    if extra_regularization {
        base + 0.05
    } else {
        base
    }
}

/// LayerDecay value per model size (fine-tuning table).
pub fn layer_decay_for_model(name: ModelName) -> f64 {
    match name {
        ModelName::VitS => 0.7,
        ModelName::VitM => 0.75,
        ModelName::VitB => 0.75,
        ModelName::VitL => 0.8,
        ModelName::VitH => 0.85,
    }
}

/// Scheduled LR for a global step. Linear warmup to `base_lr`, then either
/// constant or cosine decay to `min_lr`.
pub fn schedule_lr(cfg: &OptimConfig, step: usize, steps_per_epoch: usize, total_epochs: usize) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    if step < warmup {
        return cfg.base_lr * (step + 1) as f64 / warmup as f64;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.base_lr,
        Schedule::CosineWarmup => {
            let total = total_epochs * steps_per_epoch;
            if total <= warmup {
                return cfg.base_lr;
            }
            let progress = (step - warmup) as f64 / (total - warmup) as f64;
            let progress = progress.min(1.0);
            cfg.min_lr
                + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Adaptive-moment state for one parameter tensor.
#[derive(Clone, Debug)]
struct Moments<E> {
    m: Tensor<E>,
    v: Tensor<E>,
}

/// AdamW: decoupled weight decay plus bias-corrected adaptive moments.
#[derive(Clone, Debug)]
pub struct AdamW<E> {
    cfg: OptimConfig,
    state: Vec<Moments<E>>,
    t: u64,
}

impl<E: Element> AdamW<E> {
    pub fn new(cfg: OptimConfig, param_shapes: &[Vec<usize>]) -> Self {
        let state = param_shapes
            .iter()
            .map(|s| Moments { m: Tensor::zeros(s), v: Tensor::zeros(s) })
            .collect();
        AdamW { cfg, state, t: 0 }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// Number of parameter tensors this optimizer tracks.
    pub fn num_slots(&self) -> usize {
        self.state.len()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `lr_t` is the scheduled global LR; `multipliers` holds
    /// the per-parameter LayerDecay factor (1 everywhere when disabled).
    ///
    /// The step is rejected (no state mutated) if any gradient is
    /// non-finite.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<E>],
        grads: &[Tensor<E>],
        lr_t: f64,
        multipliers: &[f64],
    ) -> Result<()> {
        if params.len() != self.state.len()
            || grads.len() != self.state.len()
            || multipliers.len() != self.state.len()
        {
            return Err(Error::invalid(
                "adamw",
                format!(
                    "expected {} tensors, got {} params / {} grads / {} multipliers",
                    self.state.len(),
                    params.len(),
                    grads.len(),
                    multipliers.len()
                ),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.state[i].m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: g.shape().to_vec(),
                    rhs: self.state[i].m.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                let coord = g.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
                return Err(Error::NonFinite {
                    op: "adamw",
                    location: format!("gradient tensor {i}, coordinate {coord}"),
                });
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (i, param) in params.iter_mut().enumerate() {
            let lr = lr_t * multipliers[i];
            let wd = self.cfg.weight_decay;
            let eps = self.cfg.eps;
            let st = &mut self.state[i];
            let pd = param.data_mut();
            let gd = grads[i].data();
            let md = st.m.data_mut();
            let vd = st.v.data_mut();
            for j in 0..pd.len() {
                let g = gd[j].to_f64();
                let mut p = pd[j].to_f64();
                // Decoupled decay first, then the adaptive step.
                p *= 1.0 - lr * wd;
                let m = b1 * md[j].to_f64() + (1.0 - b1) * g;
                let v = b2 * vd[j].to_f64() + (1.0 - b2) * g * g;
                md[j] = E::from_f64(m);
                vd[j] = E::from_f64(v);
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                p -= lr * m_hat / (v_hat.sqrt() + eps);
                pd[j] = E::from_f64(p);
            }
        }
        Ok(())
    }
}
