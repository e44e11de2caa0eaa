//! Hybrid-expert scoring: one shared expert, and per domain a specific
//! expert, a gate and a tower.

use unimatch_tape::{Tape, Var};

use crate::error::{Error, Result};
use crate::model::{mlp, ModelConfig};
use crate::params::Binder;

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// One logit per pair, `[pairs, 1]`.
    pub logits: Var,
    /// Shared-expert output per pair.
    pub shared: Var,
    /// Each pair's own-domain specific-expert output, in pair order.
    pub specific: Var,
    /// Pair indices per domain.
    pub domain_rows: Vec<Vec<usize>>,
    /// Gate weights `[1, 2]` for every domain present in the batch.
    pub gates: Vec<Option<Var>>,
}

pub fn shared_expert(b: &mut Binder<'_>, cfg: &ModelConfig, repr: Var) -> Result<Var> {
    mlp(b, "bb.shared", cfg.expert_layers.len(), repr, true)
}

pub fn specific_expert(b: &mut Binder<'_>, cfg: &ModelConfig, repr: Var, domain: usize) -> Result<Var> {
    mlp(b, &format!("bb.specific{domain}"), cfg.expert_layers.len(), repr, true)
}

/// `sigmoid(E_did[k] · gate_k)`: weights for the specific and shared parts.
pub fn gate(b: &mut Binder<'_>, domain: usize) -> Result<Var> {
    let did = b.gather("emb.domain", &[domain])?;
    let w = b.param(&format!("bb.gate{domain}"))?;
    let logits = b.tape.matmul(did, w)?;
    Ok(b.tape.sigmoid(logits)?)
}

/// `[w0·E_d, (w0·E_d) ⊙ (w1·E_s), w1·E_s]`.
pub fn fuse(tape: &mut Tape, specific: Var, shared: Var, weights: Var) -> Result<Var> {
    if tape.shape(specific) != tape.shape(shared) {
        return Err(Error::Contract(format!(
            "fusion needs equal shapes, got {:?} and {:?}",
            tape.shape(specific),
            tape.shape(shared)
        )));
    }
    if tape.shape(weights) != [1, 2] {
        return Err(Error::Contract(format!("gate weights must be [1, 2], got {:?}", tape.shape(weights))));
    }
    let w0 = tape.slice_cols(weights, 0, 1)?;
    let w1 = tape.slice_cols(weights, 1, 1)?;
    let d = tape.mul(specific, w0)?;
    let s = tape.mul(shared, w1)?;
    let had = tape.mul(d, s)?;
    Ok(tape.concat_cols(&[d, had, s])?)
}

pub fn tower(b: &mut Binder<'_>, cfg: &ModelConfig, fused: Var, domain: usize) -> Result<Var> {
    mlp(b, &format!("bb.tower{domain}"), cfg.tower_hidden.len() + 1, fused, false)
}

/// Scores every pair with its own domain's specific expert, gate and tower.
pub fn forward(b: &mut Binder<'_>, cfg: &ModelConfig, repr: Var, domains: &[usize]) -> Result<BackboneOutput> {
    let pairs = b.tape.shape(repr)[0];
    if domains.len() != pairs {
        return Err(Error::Contract(format!("{} domain ids for {pairs} pairs", domains.len())));
    }
    let mut domain_rows = vec![Vec::new(); cfg.domains];
    for (i, &k) in domains.iter().enumerate() {
        if k >= cfg.domains {
            return Err(Error::Contract(format!("domain id {k} outside 0..{}", cfg.domains)));
        }
        domain_rows[k].push(i);
    }
    let shared = shared_expert(b, cfg, repr)?;
    let mut logit_blocks = Vec::new();
    let mut specific_blocks = Vec::new();
    let mut order = Vec::with_capacity(pairs);
    let mut gates = vec![None; cfg.domains];
    for (k, rows) in domain_rows.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let rk = b.tape.select_rows(repr, rows)?;
        let ed = specific_expert(b, cfg, rk, k)?;
        let es = b.tape.select_rows(shared, rows)?;
        let w = gate(b, k)?;
        let fused = fuse(&mut b.tape, ed, es, w)?;
        logit_blocks.push(tower(b, cfg, fused, k)?);
        specific_blocks.push(ed);
        order.extend_from_slice(rows);
        gates[k] = Some(w);
    }
    let mut inverse = vec![0; pairs];
    for (pos, &row) in order.iter().enumerate() {
        inverse[row] = pos;
    }
    let stacked = b.tape.concat_rows(&logit_blocks)?;
    let logits = b.tape.select_rows(stacked, &inverse)?;
    let stacked = b.tape.concat_rows(&specific_blocks)?;
    let specific = b.tape.select_rows(stacked, &inverse)?;
    Ok(BackboneOutput {
        logits,
        shared,
        specific,
        domain_rows,
        gates,
    })
}
