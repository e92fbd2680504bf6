//! The adapter zoo.
//!
//! Every adapter attaches to a frozen base model and trains a small set of
//! parameters. Four families are implemented:
//!
//! - [`ScaleShift`]: per-channel `γ ⊙ y + β` on a layer output.
//! - [`LoraPair`]: a parallel low-rank branch `up(φ(down(x)))` added to a
//!   linear layer's output.
//! - [`PromptBlock`]: learnable tokens concatenated to the input sequence.
//! - [`SanAdapter`]: scale-and-shift modeling plus explicit propagation of
//!   the (recalibrated) scaling factor into the next layer's weight
//!   columns.
//!
//! All adapters are the identity map at initialization, so attaching one
//! never changes the model's function until training moves it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ModelState};
use crate::tensor::{Tape, Tensor, Var};

/// Per-channel scale and shift on a `d`-channel layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleShift {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl ScaleShift {
    /// Identity initialization: `γ = 1`, `β = 0`.
    pub fn identity(dim: usize) -> Self {
        ScaleShift {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }
}

/// Low-rank adapter branch: `x ↦ up(φ(down(x)))`, added to the base
/// layer's output. `up` starts at zero so the branch vanishes at init.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `[rank × d_in]`
    pub down: Tensor,
    /// `[d_out × rank]`
    pub up: Tensor,
    pub nonlinear: bool,
}

impl LoraPair {
    pub fn init(
        d_in: usize,
        d_out: usize,
        rank: usize,
        nonlinear: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("low-rank adapter requires rank >= 1".into()));
        }
        if rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "rank {rank} exceeds layer dims {d_in}x{d_out}"
            )));
        }
        Ok(LoraPair {
            down: Tensor::gaussian(&[rank, d_in], 0.02, rng),
            up: Tensor::zeros(&[d_out, rank]),
            nonlinear,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }
}

/// Learnable prompt tokens appended to the input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBlock {
    /// `[n × d]`; `n = 0` means no prompts.
    pub tokens: Option<Tensor>,
}

impl PromptBlock {
    pub fn init(n: usize, d: usize, rng: &mut impl rand::Rng) -> Self {
        PromptBlock {
            tokens: (n > 0).then(|| Tensor::gaussian(&[n, d], 0.02, rng)),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.as_ref().map_or(0, |t| t.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scaling adapter with forward propagation.
///
/// `modeling` applies `γ ⊙ y + β` at the attach point; `propagate` scales
/// the columns of every downstream consumer weight by the recalibrated
/// factor `γ′ = A ⊙ γ + b`. Both flags on is the full method; each alone
/// is one ablation arm. Identity at init regardless of flags.
#[derive(Debug, Clone, PartialEq)]
pub struct SanAdapter {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Diagonal recalibration scale, init 1.
    pub recal_scale: Tensor,
    /// Recalibration shift, init 0.
    pub recal_shift: Tensor,
    pub modeling: bool,
    pub propagate: bool,
}

impl SanAdapter {
    pub fn identity(dim: usize, modeling: bool, propagate: bool) -> Self {
        SanAdapter {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
            recal_scale: Tensor::ones(&[dim]),
            recal_shift: Tensor::zeros(&[dim]),
            modeling,
            propagate,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    /// Plain-value recalibration `γ′ = A ⊙ γ + b`.
    pub fn recalibrated(&self) -> Result<Tensor> {
        recalibrate_values(&self.gamma, &self.recal_scale, &self.recal_shift)
    }
}

/// `γ′ = A ⊙ γ + b` on plain tensors.
pub fn recalibrate_values(gamma: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    gamma.mul(scale)?.add(shift)
}

/// Method selector plus hyperparameters, as named by configs and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodKind {
    LinearProbe,
    FullFinetune,
    Bitfit,
    Lora {
        rank: usize,
        #[serde(default)]
        nonlinear: bool,
    },
    Vpt {
        prompts: usize,
    },
    Ssf,
    San {
        #[serde(default = "default_true")]
        modeling: bool,
        #[serde(default = "default_true")]
        propagate: bool,
        #[serde(default)]
        lambda: f64,
    },
}

fn default_true() -> bool {
    true
}

impl MethodKind {
    pub fn san(modeling: bool, propagate: bool) -> Self {
        MethodKind::San {
            modeling,
            propagate,
            lambda: 0.0,
        }
    }

    pub fn name(&self) -> String {
        match self {
            MethodKind::LinearProbe => "linear_probe".into(),
            MethodKind::FullFinetune => "full_finetune".into(),
            MethodKind::Bitfit => "bitfit".into(),
            MethodKind::Lora { rank, .. } => format!("lora(rank={rank})"),
            MethodKind::Vpt { prompts } => format!("vpt(n={prompts})"),
            MethodKind::Ssf => "ssf".into(),
            MethodKind::San {
                modeling,
                propagate,
                ..
            } => match (modeling, propagate) {
                (true, true) => "san".into(),
                (true, false) => "san(modeling-only)".into(),
                (false, true) => "san(propagation-only)".into(),
                (false, false) => "san(inert)".into(),
            },
        }
    }

    /// Short tag used in checkpoint manifests.
    pub fn tag(&self) -> &'static str {
        match self {
            MethodKind::LinearProbe => "linear_probe",
            MethodKind::FullFinetune => "full_finetune",
            MethodKind::Bitfit => "bitfit",
            MethodKind::Lora { .. } => "lora",
            MethodKind::Vpt { .. } => "vpt",
            MethodKind::Ssf => "ssf",
            MethodKind::San { .. } => "san",
        }
    }

    pub fn regularizer_lambda(&self) -> f64 {
        match self {
            MethodKind::San { lambda, .. } => *lambda,
            _ => 0.0,
        }
    }
}

/// Trainable adapter state for one model, keyed by attach point or layer.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterState {
    /// No added parameters (linear probing, bias tuning, full fine-tune).
    None,
    Ssf(BTreeMap<String, ScaleShift>),
    San(BTreeMap<String, SanAdapter>),
    /// Keyed by the wrapped linear layer's weight name.
    Lora(BTreeMap<String, LoraPair>),
    Vpt(PromptBlock),
}

impl AdapterState {
    /// Build identity-initialized adapters for `method` on `spec`.
    pub fn init(spec: &ModelSpec, method: &MethodKind, seed: u64) -> Result<AdapterState> {
        let mut rng = crate::train::seeded_rng(seed, "adapter-init");
        match method {
            MethodKind::LinearProbe | MethodKind::FullFinetune | MethodKind::Bitfit => {
                Ok(AdapterState::None)
            }
            MethodKind::Ssf => {
                let map = spec
                    .attach_points()
                    .into_iter()
                    .map(|p| (p.id, ScaleShift::identity(p.dim)))
                    .collect();
                Ok(AdapterState::Ssf(map))
            }
            MethodKind::San {
                modeling,
                propagate,
                ..
            } => {
                let map = spec
                    .attach_points()
                    .into_iter()
                    .map(|p| (p.id, SanAdapter::identity(p.dim, *modeling, *propagate)))
                    .collect();
                Ok(AdapterState::San(map))
            }
            MethodKind::Lora { rank, nonlinear } => {
                let mut map = BTreeMap::new();
                for site in spec.lora_sites() {
                    let pair =
                        LoraPair::init(site.in_dim, site.out_dim, *rank, *nonlinear, &mut rng)?;
                    map.insert(site.weight_name, pair);
                }
                Ok(AdapterState::Lora(map))
            }
            MethodKind::Vpt { prompts } => {
                let d = spec.token_dim().ok_or_else(|| {
                    Error::Config("prompt tuning requires a token-sequence model".into())
                })?;
                Ok(AdapterState::Vpt(PromptBlock::init(*prompts, d, &mut rng)))
            }
        }
    }

    /// Flat named view of every trainable adapter tensor, in deterministic
    /// order. Names are prefixed `adapter.`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match self {
            AdapterState::None => {}
            AdapterState::Ssf(map) => {
                for (id, a) in map {
                    out.push((format!("adapter.{id}.gamma"), &a.gamma));
                    out.push((format!("adapter.{id}.beta"), &a.beta));
                }
            }
            AdapterState::San(map) => {
                for (id, a) in map {
                    out.push((format!("adapter.{id}.gamma"), &a.gamma));
                    out.push((format!("adapter.{id}.beta"), &a.beta));
                    out.push((format!("adapter.{id}.recal_scale"), &a.recal_scale));
                    out.push((format!("adapter.{id}.recal_shift"), &a.recal_shift));
                }
            }
            AdapterState::Lora(map) => {
                for (name, pair) in map {
                    out.push((format!("adapter.{name}.lora_down"), &pair.down));
                    out.push((format!("adapter.{name}.lora_up"), &pair.up));
                }
            }
            AdapterState::Vpt(block) => {
                if let Some(t) = &block.tokens {
                    out.push(("adapter.prompts".into(), t));
                }
            }
        }
        out
    }

    /// Mutable counterpart of [`AdapterState::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match self {
            AdapterState::None => {}
            AdapterState::Ssf(map) => {
                for (id, a) in map.iter_mut() {
                    out.push((format!("adapter.{id}.gamma"), &mut a.gamma));
                    out.push((format!("adapter.{id}.beta"), &mut a.beta));
                }
            }
            AdapterState::San(map) => {
                for (id, a) in map.iter_mut() {
                    out.push((format!("adapter.{id}.gamma"), &mut a.gamma));
                    out.push((format!("adapter.{id}.beta"), &mut a.beta));
                    out.push((format!("adapter.{id}.recal_scale"), &mut a.recal_scale));
                    out.push((format!("adapter.{id}.recal_shift"), &mut a.recal_shift));
                }
            }
            AdapterState::Lora(map) => {
                for (name, pair) in map.iter_mut() {
                    out.push((format!("adapter.{name}.lora_down"), &mut pair.down));
                    out.push((format!("adapter.{name}.lora_up"), &mut pair.up));
                }
            }
            AdapterState::Vpt(block) => {
                if let Some(t) = &mut block.tokens {
                    out.push(("adapter.prompts".into(), t));
                }
            }
        }
        out
    }

    /// Current scaling factors (γ per attach point), for deviation
    /// statistics and the regularization term.
    pub fn gammas(&self) -> Vec<(String, &Tensor)> {
        match self {
            AdapterState::Ssf(map) => map.iter().map(|(id, a)| (id.clone(), &a.gamma)).collect(),
            AdapterState::San(map) => map.iter().map(|(id, a)| (id.clone(), &a.gamma)).collect(),
            _ => Vec::new(),
        }
    }
}

// ── Tape-level adapter application ──────────────────────────────────────

/// `γ ⊙ y + β` with gradients flowing to `γ` and `β` only when they are
/// registered as trainable.
pub fn ssf_apply(tape: &mut Tape, gamma: Var, beta: Var, y: Var) -> Result<Var> {
    let d = tape.value(y).last_dim();
    if tape.value(gamma).shape() != [d] || tape.value(beta).shape() != [d] {
        return Err(Error::Dimension {
            op: "ssf_apply",
            lhs: tape.value(y).shape().to_vec(),
            rhs: tape.value(gamma).shape().to_vec(),
        });
    }
    let scaled = tape.mul(y, gamma)?;
    tape.add(scaled, beta)
}

/// Adds the low-rank branch to a base layer output:
/// `base_out + [up · φ(down · xᵀ)]ᵀ`, evaluated as `φ(x · downᵀ) · upᵀ`.
pub fn lora_apply(
    tape: &mut Tape,
    down: Var,
    up: Var,
    nonlinear: bool,
    x: Var,
    base_out: Var,
) -> Result<Var> {
    let down_t = tape.transpose(down)?;
    let mut h = tape.matmul(x, down_t)?;
    if nonlinear {
        h = tape.relu(h)?;
    }
    let up_t = tape.transpose(up)?;
    let branch = tape.matmul(h, up_t)?;
    tape.add(base_out, branch)
}

/// Appends prompt tokens to the sequence: `[x; p]`.
pub fn vpt_concat(tape: &mut Tape, prompts: Var, x: Var) -> Result<Var> {
    let (_, d) = tape.value(x).dims2()?;
    let (_, dp) = tape.value(prompts).dims2()?;
    if d != dp {
        return Err(Error::Dimension {
            op: "vpt_concat",
            lhs: tape.value(x).shape().to_vec(),
            rhs: tape.value(prompts).shape().to_vec(),
        });
    }
    tape.concat_rows(x, prompts)
}

/// Recalibration on the tape: `γ′ = A ⊙ γ + b`.
pub fn recalibrate(tape: &mut Tape, gamma: Var, scale: Var, shift: Var) -> Result<Var> {
    let scaled = tape.mul(gamma, scale)?;
    tape.add(scaled, shift)
}

/// Runs the full model forward with SAN adapters and returns the logits.
///
/// Modeling scales each attach point's output by `γ` (plus `β`);
/// propagation makes every downstream consumer weight compute with its
/// columns scaled by `γ′ = A ⊙ γ + b`. Base weights are never mutated —
/// effective weights are materialized on the tape per forward pass.
pub fn san_forward(
    model: &ModelState,
    adapters: &BTreeMap<String, SanAdapter>,
    x: &Tensor,
) -> Result<Tensor> {
    let expected: Vec<String> = model
        .spec
        .attach_points()
        .into_iter()
        .map(|p| p.id)
        .collect();
    if adapters.len() != expected.len() || expected.iter().any(|id| !adapters.contains_key(id)) {
        return Err(Error::Config(format!(
            "adapter set does not match the model's {} attach points",
            expected.len()
        )));
    }
    let state = AdapterState::San(adapters.clone());
    let mut tape = Tape::new();
    let out = crate::model::forward_batch(
        &mut tape,
        model,
        &state,
        x,
        &std::collections::BTreeSet::new(),
    )?;
    Ok(tape.value(out.logits).clone())
}

#[cfg(test)]
mod tests;
