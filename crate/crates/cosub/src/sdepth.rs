//! Stochastic depth: pattern sampling, the naive masking oracle, the
//! efficient permute-select kernel, and drop-rate quantization analysis.
//!
//! The efficient kernel drops a fixed number of samples per layer: it
//! permutes the batch, keeps the first `B_keep = round(B * (1 - tau))` rows,
//! computes the residual block only on that sub-batch, scales by
//! `1 / (1 - tau_eff)`, and scatter-adds the result onto the full batch.
//! The naive oracle computes the block on every row and masks the result,
//! which is what the efficient path is checked against.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::EngineRng;
use crate::tensor::{Element, Tensor};

/// Per-layer drop-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdMode {
    /// Same rate for every layer.
    Uniform,
    /// Rate grows linearly with depth: `tau_l = tau * (l + 1) / L`.
    Progressive,
}

/// Which stochastic-depth implementation executes the gated blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdImpl {
    /// Compute every row, zero the dropped ones (oracle).
    Naive,
    /// Permute-select: compute only the kept sub-batch.
    Efficient,
}

/// Stochastic-depth settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SdConfig {
    /// Target drop probability, `0 <= tau < 1`.
    pub tau: f64,
    pub mode: SdMode,
    pub implementation: SdImpl,
}

impl SdConfig {
    pub fn uniform(tau: f64) -> Self {
        SdConfig { tau, mode: SdMode::Uniform, implementation: SdImpl::Efficient }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::invalid("sd_config", format!("tau {} not in [0, 1)", self.tau)));
        }
        Ok(())
    }
}

/// One layer's kept rows plus the rates they realize.
#[derive(Clone, Debug)]
pub struct LayerPattern {
    /// Batch rows (duplicate-free, each `< batch`) the block is applied to,
    /// in permutation order.
    pub kept: Vec<usize>,
    /// The rate that was asked for.
    pub requested_rate: f64,
    /// The rate actually realized after rounding `B_keep` to an integer;
    /// this is what the `1 / (1 - tau)` training scale uses.
    pub effective_rate: f64,
}

impl LayerPattern {
    /// Training-time scale `1 / (1 - tau_eff)` for the kept residuals.
    /// When nothing is kept the scale is irrelevant (there is no residual to
    /// scale); 1 is returned to keep the arithmetic finite.
    pub fn train_scale(&self) -> f64 {
        if self.kept.is_empty() {
            1.0
        } else {
            1.0 / (1.0 - self.effective_rate)
        }
    }
}

/// Per-sample, per-layer keep/drop gates: the identity of a submodel.
#[derive(Clone, Debug)]
pub struct DropPattern {
    pub batch: usize,
    pub layers: Vec<LayerPattern>,
}

impl DropPattern {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Pattern that keeps every row at every layer (rate 0).
    pub fn all_kept(batch: usize, layers: usize) -> Self {
        DropPattern {
            batch,
            layers: (0..layers)
                .map(|_| LayerPattern {
                    kept: (0..batch).collect(),
                    requested_rate: 0.0,
                    effective_rate: 0.0,
                })
                .collect(),
        }
    }

    /// Check the structural invariants (duplicate-free, in-range rows).
    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            let mut seen = vec![false; self.batch];
            for &r in &layer.kept {
                if r >= self.batch {
                    return Err(Error::IndexOutOfRange {
                        op: "drop_pattern",
                        index: r,
                        size: self.batch,
                    });
                }
                if seen[r] {
                    return Err(Error::invalid(
                        "drop_pattern",
                        format!("layer {l}: duplicate row {r}"),
                    ));
                }
                seen[r] = true;
            }
        }
        Ok(())
    }

    /// Boolean keep-mask for one layer.
    pub fn mask(&self, layer: usize) -> Vec<bool> {
        let mut m = vec![false; self.batch];
        for &r in &self.layers[layer].kept {
            m[r] = true;
        }
        m
    }
}

/// `B_keep = round(B * (1 - tau))`, rounding half away from zero.
pub fn keep_count(batch: usize, tau: f64) -> usize {
    (batch as f64 * (1.0 - tau)).round() as usize
}

/// Drop rate actually realized once `B_keep` is an integer:
/// `1 - round(B * (1 - tau)) / B`.
pub fn effective_rate(batch: usize, tau: f64) -> f64 {
    1.0 - keep_count(batch, tau) as f64 / batch as f64
}

/// Requested rate for layer `l` of `layers` under the given schedule.
pub fn layer_rate(tau: f64, l: usize, layers: usize, mode: SdMode) -> f64 {
    match mode {
        SdMode::Uniform => tau,
        SdMode::Progressive => tau * (l + 1) as f64 / layers as f64,
    }
}

/// Sample a drop pattern: per layer, a fresh uniform permutation of the batch
/// with the first `B_keep` rows kept.
pub fn sample_pattern(
    batch: usize,
    layers: usize,
    config: &SdConfig,
    rng: &mut EngineRng,
) -> DropPattern {
    debug_assert!(batch >= 1);
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let rate = layer_rate(config.tau, l, layers, config.mode);
        let kc = keep_count(batch, rate);
        let mut perm = rng.permutation(batch);
        perm.truncate(kc);
        out.push(LayerPattern {
            kept: perm,
            requested_rate: rate,
            effective_rate: effective_rate(batch, rate),
        });
    }
    DropPattern { batch, layers: out }
}

/// Bernoulli keep-mask (probability `1 - tau` per row) for the naive oracle's
/// original-formulation mode.
pub fn sample_bernoulli_mask(batch: usize, tau: f64, rng: &mut EngineRng) -> Vec<bool> {
    (0..batch).map(|_| !rng.coin(tau)).collect()
}

/// Naive stochastic depth: `y = x + scale * mask * block(x)` — the block
/// runs on all rows and dropped rows are zeroed afterwards.
pub fn apply_naive<E, F>(
    tape: &mut Tape<E>,
    x: Var,
    block: F,
    kept_mask: &[bool],
    scale: f64,
) -> Result<Var>
where
    E: Element,
    F: FnOnce(&mut Tape<E>, Var) -> Result<Var>,
{
    let shape = tape.shape(x).to_vec();
    if shape.is_empty() || kept_mask.len() != shape[0] {
        return Err(Error::invalid(
            "apply_naive",
            format!("mask length {} != batch {:?}", kept_mask.len(), shape.first()),
        ));
    }
    let r = block(tape, x)?;
    let mut mask_shape = vec![1usize; shape.len()];
    mask_shape[0] = shape[0];
    let mask_data: Vec<E> = kept_mask.iter().map(|&k| if k { E::ONE } else { E::ZERO }).collect();
    let mask = tape.constant(Tensor::new(mask_shape, mask_data)?);
    let mask_b = tape.broadcast_to(mask, &shape)?;
    let masked = tape.mul(r, mask_b)?;
    let scaled = tape.scale(masked, E::from_f64(scale));
    tape.add(x, scaled)
}

/// Efficient stochastic depth: gather the kept rows, run the block on the
/// sub-batch only, scale by `1 / (1 - tau_effective)`, scatter-add back.
/// Activations for dropped rows are never materialized.
pub fn apply_efficient<E, F>(
    tape: &mut Tape<E>,
    x: Var,
    block: F,
    kept: &[usize],
    tau_effective: f64,
) -> Result<Var>
where
    E: Element,
    F: FnOnce(&mut Tape<E>, Var) -> Result<Var>,
{
    if kept.is_empty() {
        // Block skipped for every sample.
        return Ok(x);
    }
    let sub = tape.index_select(x, kept)?;
    let r = block(tape, sub)?;
    let scaled = tape.scale(r, E::from_f64(1.0 / (1.0 - tau_effective)));
    tape.index_add(x, scaled, kept)
}

/// How the effective rate is derived from the requested rate in
/// [`quantization_table_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizationRule {
    /// Normative kernel rule: keep `round(B * (1 - tau))` rows.
    RoundKeep,
    /// Variant that drops `floor(tau * B)` rows instead.
    FloorDrop,
}

/// One row of the requested-vs-effective drop-rate staircase.
#[derive(Clone, Copy, Debug)]
pub struct QuantizationRow {
    pub requested_tau: f64,
    pub effective_tau: f64,
}

/// Requested tau grid `{0.00, 0.01, ..., 0.99}` mapped to the effective rate
/// under the normative rounding rule.
pub fn quantization_table(batch: usize) -> Result<Vec<QuantizationRow>> {
    quantization_table_with(batch, QuantizationRule::RoundKeep)
}

pub fn quantization_table_with(
    batch: usize,
    rule: QuantizationRule,
) -> Result<Vec<QuantizationRow>> {
    if batch < 1 {
        return Err(Error::invalid("quantization_table", "batch must be >= 1"));
    }
    Ok((0..100)
        .map(|i| {
            let tau = i as f64 / 100.0;
            let effective = match rule {
                QuantizationRule::RoundKeep => effective_rate(batch, tau),
                QuantizationRule::FloorDrop => (tau * batch as f64).floor() / batch as f64,
            };
            QuantizationRow { requested_tau: tau, effective_tau: effective }
        })
        .collect())
}

/// CSV emission for the staircase: `requested_tau,effective_tau,B`.
pub fn quantization_csv(batch: usize, rule: QuantizationRule) -> Result<String> {
    let rows = quantization_table_with(batch, rule)?;
    let mut out = String::from("requested_tau,effective_tau,B\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.requested_tau, row.effective_tau, batch));
    }
    Ok(out)
}
