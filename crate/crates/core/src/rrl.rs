//! Auxiliary representation losses.
//!
//! The shared classifier sits behind gradient reversal and spectral
//! normalization, so one backward pass makes it descend its cross-entropy
//! while the shared expert ascends it. The Wasserstein critics sit behind a
//! reversal placed after the projections: critics descend the critic loss,
//! projections and the shared expert receive the negated gradient.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use unimatch_tape::{gradient_penalty, input_gradient, SpectralState, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{dense, mlp, normalized, ModelConfig};
use crate::params::Binder;

/// Mean cross-entropy of row-wise softmax(logits) against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let [n, k] = tape.shape(logits);
    if labels.len() != n || n == 0 {
        return Err(Error::Contract(format!("{} labels for {n} rows", labels.len())));
    }
    let mut onehot = Tensor::zeros(n, k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!("label {y} outside 0..{k}")));
        }
        onehot.set(i, y, 1.0);
    }
    let onehot = tape.constant(onehot)?;
    let ls = tape.log_softmax(logits)?;
    let picked = tape.mul(ls, onehot)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

/// Domain logits of the shared classifier on already-reversed input.
pub fn shared_classifier(
    b: &mut Binder<'_>,
    spectral: &mut BTreeMap<String, SpectralState>,
    x: Var,
) -> Result<Var> {
    let w0 = normalized(b, spectral, "rrl.cls_s.l0.w")?;
    let b0 = b.param("rrl.cls_s.l0.b")?;
    let h = b.tape.linear(x, w0, b0)?;
    let h = b.tape.relu(h)?;
    let w1 = normalized(b, spectral, "rrl.cls_s.l1.w")?;
    let b1 = b.param("rrl.cls_s.l1.b")?;
    Ok(b.tape.linear(h, w1, b1)?)
}

/// Cross-entropy of the shared classifier on reversed shared features.
pub fn dal_shared(
    b: &mut Binder<'_>,
    spectral: &mut BTreeMap<String, SpectralState>,
    shared: Var,
    labels: &[usize],
    reversal: f64,
) -> Result<Var> {
    let x = b.tape.grad_reverse(shared, reversal)?;
    let logits = shared_classifier(b, spectral, x)?;
    cross_entropy(&mut b.tape, logits, labels)
}

/// Cross-entropy of the specific classifier; no reversal.
pub fn dal_specific(b: &mut Binder<'_>, specific: Var, labels: &[usize]) -> Result<Var> {
    let logits = mlp(b, "rrl.cls_d", 2, specific, false)?;
    cross_entropy(&mut b.tape, logits, labels)
}

/// Per-sample score weights for perspective `t`: `1/n_t` for own-domain
/// samples, `1/(n - n_t)` otherwise, with both counts clamped to at least 1.
pub fn perspective_weights(labels: &[usize], t: usize) -> Vec<f64> {
    let n = labels.len();
    let own = labels.iter().filter(|&&y| y == t).count();
    let own_w = 1.0 / own.max(1) as f64;
    let other_w = 1.0 / (n - own).max(1) as f64;
    labels.iter().map(|&y| if y == t { own_w } else { other_w }).collect()
}

/// Weighted scores `s^t` for raw critic scores.
pub fn weighted_scores(scores: &[f64], labels: &[usize], t: usize) -> Vec<f64> {
    scores
        .iter()
        .zip(perspective_weights(labels, t))
        .map(|(s, w)| s * w)
        .collect()
}

/// Critic under `prefix`, one scalar per row.
pub fn critic(b: &mut Binder<'_>, prefix: &str, layers: usize, x: Var) -> Result<Var> {
    mlp(b, prefix, layers, x, false)
}

/// Gradient penalty of a critic on interpolates `ξ a + (1 - ξ) c`, one ξ per row.
///
/// Interpolates are constants, so the penalty reaches only the critic.
pub fn critic_penalty(
    b: &mut Binder<'_>,
    prefix: &str,
    layers: usize,
    a: &Tensor,
    c: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut mixed = a.clone();
    for r in 0..a.rows() {
        let xi: f64 = rng.gen();
        for (m, cv) in mixed.row_slice_mut(r).iter_mut().zip(c.row_slice(r)) {
            *m = xi * *m + (1.0 - xi) * cv;
        }
    }
    let x = b.tape.constant(mixed)?;
    let p = prefix.to_string();
    // The closure cannot borrow the binder, so bind the critic parameters first.
    let mut weights = Vec::with_capacity(layers);
    for i in 0..layers {
        let w = b.param(&format!("{p}.l{i}.w"))?;
        let bias = b.param(&format!("{p}.l{i}.b"))?;
        weights.push((w, bias));
    }
    let g = input_gradient(&mut b.tape, x, |tape, x| {
        let mut h = x;
        for (i, &(w, bias)) in weights.iter().enumerate() {
            h = tape.linear(h, w, bias)?;
            if i + 1 < weights.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    })?;
    Ok(gradient_penalty(&mut b.tape, g)?)
}

#[derive(Clone, Debug)]
pub struct WassersteinTerms {
    pub loss: Var,
    /// Score difference `Σ s^{t+1} - Σ s^t` per critic.
    pub score_gaps: Vec<f64>,
    pub penalties: Vec<f64>,
    /// Set when the batch was too small to compare distributions.
    pub skipped: bool,
}

/// Chain alignment of consecutive projected views of the shared features.
pub fn mvwdl_loss(
    b: &mut Binder<'_>,
    cfg: &ModelConfig,
    shared: Var,
    labels: &[usize],
    reversal: f64,
    gp_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<WassersteinTerms> {
    let n = b.tape.shape(shared)[0];
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= cfg.domains) {
        return Err(Error::Contract(format!("domain id {y} outside 0..{}", cfg.domains)));
    }
    if n < 2 || cfg.domains < 2 {
        let zero = b.tape.constant(Tensor::scalar(0.0))?;
        return Ok(WassersteinTerms {
            loss: zero,
            score_gaps: Vec::new(),
            penalties: Vec::new(),
            skipped: true,
        });
    }
    let layers = cfg.critic_hidden.len() + 1;
    let mut views = Vec::with_capacity(cfg.domains);
    for t in 0..cfg.domains {
        views.push(dense(b, &format!("rrl.proj{t}"), shared)?);
    }
    let mut terms = Vec::new();
    let mut score_gaps = Vec::new();
    let mut penalties = Vec::new();
    for t in 0..cfg.domains - 1 {
        let prefix = format!("rrl.critic{t}");
        let side = |b: &mut Binder<'_>, view: Var, perspective: usize| -> Result<Var> {
            let x = b.tape.grad_reverse(view, reversal)?;
            let s = critic(b, &prefix, layers, x)?;
            let w = b.tape.constant(Tensor::column(perspective_weights(labels, perspective)))?;
            let ws = b.tape.mul(s, w)?;
            Ok(b.tape.sum(ws)?)
        };
        let here = side(b, views[t], t)?;
        let next = side(b, views[t + 1], t + 1)?;
        let gap = b.tape.sub(next, here)?;
        score_gaps.push(b.tape.value(gap).data()[0]);
        let a = b.tape.value(views[t]).clone();
        let c = b.tape.value(views[t + 1]).clone();
        let gp = critic_penalty(b, &prefix, layers, &a, &c, rng)?;
        penalties.push(b.tape.value(gp).data()[0]);
        let gp = b.tape.scale(gp, gp_weight)?;
        terms.push(b.tape.add(gap, gp)?);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = b.tape.add(loss, t)?;
    }
    Ok(WassersteinTerms {
        loss,
        score_gaps,
        penalties,
        skipped: false,
    })
}

/// `Σ_k ‖(E_s^k)ᵀ E_d^k / n_k − I‖_F²` over the domains present.
pub fn ocl(tape: &mut Tape, shared: Var, specific: Var, domain_rows: &[Vec<usize>]) -> Result<Var> {
    if tape.shape(shared) != tape.shape(specific) {
        return Err(Error::Contract(format!(
            "orthogonality needs equal shapes, got {:?} and {:?}",
            tape.shape(shared),
            tape.shape(specific)
        )));
    }
    let d = tape.shape(shared)[1];
    let eye = tape.constant(Tensor::identity(d))?;
    let mut total = tape.constant(Tensor::scalar(0.0))?;
    for rows in domain_rows.iter().filter(|r| !r.is_empty()) {
        let es = tape.select_rows(shared, rows)?;
        let ed = tape.select_rows(specific, rows)?;
        let est = tape.transpose(es)?;
        let gram = tape.matmul(est, ed)?;
        let gram = tape.scale(gram, 1.0 / rows.len() as f64)?;
        let diff = tape.sub(gram, eye)?;
        let sq = tape.square(diff)?;
        let s = tape.sum(sq)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}
