//! Attribute-routed hybrid LoRA.
//!
//! Each wrapped linear `l` gets four specific experts, one global expert,
//! and a router. The router maps the pooled vision feature and the quality
//! vector to four selection logits; the top expert (lowest index on ties)
//! runs with weight `p*`, the global expert with `1 − p*`:
//!
//! `f' = l(f) + p*·E_sel(f) + (1 − p*)·E_glob(f)`, `E(f) = (α/r)·B·A·f`.
//!
//! The discrete choice carries no gradient; `p*` does. `B` starts at zero,
//! so a fresh wrap leaves the base output bit-identical.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows_masked, Matrix, Var};
use crate::error::{Error, Result};
use crate::lm::argmax;
use crate::nn::{add_linear, linear};
use crate::params::{init, ParamGroup, ParamStore, Session};

pub const QUALITY_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub experts: usize,
    /// Site suffixes to wrap in every LM block (`attn.q`, `mlp.up`, ...),
    /// plus `head` for the output layer.
    pub target_layers: Vec<String>,
    /// Width of the vision and quality selection representations.
    pub router_dim: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            dropout: 0.05,
            experts: 4,
            target_layers: ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            router_dim: 8,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.experts == 0 || self.router_dim == 0 {
            return Err(Error::Config(
                "lora rank, experts, and router_dim must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "lora dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Routing decision of one wrapped layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRouting {
    pub probabilities: Vec<f64>,
    pub selected_index: usize,
    pub p_star: f64,
}

/// Softmax and top-1 selection with lowest-index tie-break.
pub fn routing_from_logits(logits: &[f64]) -> ExpertRouting {
    let m = Matrix::from_shape_vec((1, logits.len()), logits.to_vec()).expect("logit row");
    let probabilities = softmax_rows_masked(&m, None).row(0).to_vec();
    let selected_index = argmax(logits.iter().copied());
    ExpertRouting {
        p_star: probabilities[selected_index],
        probabilities,
        selected_index,
    }
}

/// Ordered list of wrapped base layers; position `i` owns `lora.layer<i>`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoraLayout {
    pub layers: Vec<String>,
}

impl LoraLayout {
    pub fn index_of(&self, base: &str) -> Option<usize> {
        self.layers.iter().position(|l| l == base)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

fn layer_prefix(i: usize) -> String {
    format!("lora.layer{i}")
}

/// Adds experts and a router around the linear `base` (with `.w`, `.b`).
/// `vision_dim` is the width of the pooled vision feature.
pub fn wrap_linear(
    store: &mut ParamStore,
    layout: &mut LoraLayout,
    base: &str,
    cfg: &LoraConfig,
    vision_dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    if layout.index_of(base).is_some() {
        return Err(Error::Config(format!("`{base}` is already wrapped")));
    }
    let (d_in, d_out) = store.value(&format!("{base}.w"))?.dim();
    let i = layout.len();
    let p = layer_prefix(i);
    if store.contains(&format!("{p}.global.a")) {
        return Err(Error::Config(format!("adapter slot {p} is already taken")));
    }
    let std = 1.0 / (d_in as f64).sqrt();
    let experts = (0..cfg.experts)
        .map(|k| format!("{p}.expert{k}"))
        .chain([format!("{p}.global")]);
    for e in experts {
        store.insert(
            format!("{e}.a"),
            ParamGroup::LoraExpert,
            init::normal(rng, cfg.rank, d_in, std),
        )?;
        store.insert(
            format!("{e}.b"),
            ParamGroup::LoraExpert,
            init::zeros(d_out, cfg.rank),
        )?;
    }
    let r = ParamGroup::Router;
    add_linear(
        store,
        &format!("{p}.router.v"),
        vision_dim,
        cfg.router_dim,
        r,
        rng,
    )?;
    add_linear(
        store,
        &format!("{p}.router.q"),
        QUALITY_DIM,
        cfg.router_dim,
        r,
        rng,
    )?;
    add_linear(
        store,
        &format!("{p}.router.s"),
        2 * cfg.router_dim,
        cfg.experts,
        r,
        rng,
    )?;
    layout.layers.push(base.to_owned());
    Ok(())
}

/// Removes every adapter, leaving base parameters untouched.
pub fn unwrap_all(store: &mut ParamStore, layout: &mut LoraLayout) -> usize {
    layout.layers.clear();
    store.remove_prefix("lora.")
}

/// Router logits of layer `i` as a `1 × experts` row.
pub fn router_logits<'t>(s: &Session<'t>, i: usize, f_v: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
    let p = layer_prefix(i);
    let v_s = linear(s, &format!("{p}.router.v"), f_v)?;
    let q_s = linear(s, &format!("{p}.router.q"), q)?;
    linear(
        s,
        &format!("{p}.router.s"),
        s.tape().concat_cols(&[v_s, q_s]),
    )
}

/// Routing of layer `i` with a differentiable `p*`.
#[derive(Clone, Copy)]
pub struct Routed<'t> {
    pub selected_index: usize,
    pub p_star: Var<'t>,
}

pub fn route<'t>(
    s: &Session<'t>,
    i: usize,
    f_v: Var<'t>,
    q: Var<'t>,
) -> Result<(Routed<'t>, ExpertRouting)> {
    let logits = router_logits(s, i, f_v, q)?;
    let values: Vec<f64> = logits.value().row(0).to_vec();
    let routing = routing_from_logits(&values);
    let p_star = logits.softmax_rows().at(0, routing.selected_index);
    Ok((
        Routed {
            selected_index: routing.selected_index,
            p_star,
        },
        routing,
    ))
}

/// `(α/r)·B·A·f` for rows `f`.
pub fn expert<'t>(s: &Session<'t>, prefix: &str, f: Var<'t>, scaling: f64) -> Result<Var<'t>> {
    let a = s.param(&format!("{prefix}.a"))?;
    let b = s.param(&format!("{prefix}.b"))?;
    Ok(f.matmul_t(a).matmul_t(b).scale(scaling))
}

/// Hybrid output of wrapped layer `i` whose base is `base`.
pub fn apply_hybrid<'t>(
    s: &Session<'t>,
    cfg: &LoraConfig,
    i: usize,
    base: &str,
    f: Var<'t>,
    routed: Routed<'t>,
) -> Result<Var<'t>> {
    let p = layer_prefix(i);
    let out = linear(s, base, f)?;
    let dropped = s.dropout(f, cfg.dropout);
    let sel = expert(
        s,
        &format!("{p}.expert{}", routed.selected_index),
        dropped,
        cfg.scaling(),
    )?;
    let glob = expert(s, &format!("{p}.global"), dropped, cfg.scaling())?;
    Ok(out + sel.scale_by(routed.p_star) + glob.scale_by(routed.p_star.rsub_scalar(1.0)))
}
