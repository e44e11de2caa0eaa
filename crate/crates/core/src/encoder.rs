//! Feature hashing and the representation bundle for (user, candidate) pairs.
//!
//! The bundle is the concatenation of four `embed_dim`-wide blocks: the
//! ad-network output over unified entity features, the pooled user-sequence
//! transformer output, target attention over the behavior sequence, and the
//! candidate's id embedding.

use unimatch_tape::{Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{bucket, dense, mlp, ModelConfig};
use crate::params::Binder;
use crate::synthdata::{Catalog, EntityClass, Features, FieldValue, UserContext, MISSING};

const MASKED: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

/// Embedding-table rows and dense values for one candidate entity.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedEntity {
    pub id: u32,
    pub id_row: usize,
    pub cat_rows: Vec<usize>,
    pub numeric: Vec<f64>,
    pub class_row: usize,
}

/// Embedding-table rows for one user context.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedUser {
    pub user_id: u32,
    /// User id followed by each profile field, all in the user table.
    pub profile_rows: Vec<usize>,
    /// Most recent behaviors, oldest first; never empty.
    pub seq_rows: Vec<usize>,
    /// Set when the behavior sequence was empty and the reserved row stands in.
    pub empty: bool,
}

pub fn entity_row(cfg: &ModelConfig, id: u32) -> usize {
    bucket(&format!("e{id}"), cfg.entity_buckets)
}

pub fn encode_entity(cfg: &ModelConfig, id: u32, class: Option<EntityClass>, features: &Features) -> EncodedEntity {
    let cat_rows = cfg
        .entity_categorical
        .iter()
        .map(|name| match features.get(name) {
            Some(FieldValue::Cat(v)) if v != MISSING => bucket(&format!("{name}={v}"), cfg.feature_buckets),
            _ => cfg.feature_buckets,
        })
        .collect();
    let numeric = cfg
        .entity_numeric
        .iter()
        .map(|name| match features.get(name) {
            Some(FieldValue::Num(v)) => *v,
            _ => 0.0,
        })
        .collect();
    EncodedEntity {
        id,
        id_row: entity_row(cfg, id),
        cat_rows,
        numeric,
        class_row: class.map_or(EntityClass::ALL.len(), EntityClass::index),
    }
}

pub fn encode_catalog(cfg: &ModelConfig, catalog: &Catalog) -> Vec<EncodedEntity> {
    catalog
        .entities
        .iter()
        .map(|e| encode_entity(cfg, e.id, Some(e.class), &e.features))
        .collect()
}

pub fn encode_user(cfg: &ModelConfig, ctx: &UserContext) -> EncodedUser {
    let mut profile_rows = vec![bucket(&format!("uid={}", ctx.user_id), cfg.user_buckets)];
    for field in &cfg.user_fields {
        profile_rows.push(match ctx.profile.get(field) {
            Some(v) if v != MISSING => bucket(&format!("{field}={v}"), cfg.user_buckets),
            _ => cfg.user_buckets,
        });
    }
    let start = ctx.sequence.len().saturating_sub(cfg.max_seq_len);
    let mut seq_rows: Vec<usize> = ctx.sequence[start..].iter().map(|s| entity_row(cfg, s.id)).collect();
    let empty = seq_rows.is_empty();
    if empty {
        seq_rows.push(cfg.entity_buckets);
    }
    EncodedUser {
        user_id: ctx.user_id,
        profile_rows,
        seq_rows,
        empty,
    }
}

/// Sinusoidal position codes, `[positions, dim]`.
pub fn positional_encoding(positions: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(positions, dim);
    for p in 0..positions {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = p as f64 / rate;
            t.set(p, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// The representation bundle for a batch of pairs laid out user-major.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub uee: Var,
    pub tran: Var,
    pub att: Var,
    pub aid: Var,
    /// `[uee, tran, att, aid]`, one row per pair.
    pub repr: Var,
    /// Self-attention weights per head, `[users * max_seq_len, max_seq_len]`.
    pub self_attention: Vec<Var>,
    /// Target-attention weights, `[pairs, max_seq_len]`.
    pub target_weights: Var,
    pub empty_sequences: usize,
}

/// Perceptron over the unified entity features plus the class indicator.
pub fn ad_network(b: &mut Binder<'_>, cfg: &ModelConfig, cands: &[&EncodedEntity]) -> Result<Var> {
    let mut blocks = Vec::new();
    for f in 0..cfg.entity_categorical.len() {
        let rows: Vec<usize> = cands.iter().map(|c| c.cat_rows[f]).collect();
        blocks.push(b.gather("emb.feature", &rows)?);
    }
    let class_rows: Vec<usize> = cands.iter().map(|c| c.class_row).collect();
    blocks.push(b.gather("emb.class", &class_rows)?);
    let n = cfg.entity_numeric.len();
    let mut numeric = Vec::with_capacity(cands.len() * n);
    for c in cands {
        if c.numeric.len() != n {
            return Err(Error::Contract(format!("entity {} has {} numeric values, expected {n}", c.id, c.numeric.len())));
        }
        numeric.extend_from_slice(&c.numeric);
    }
    if n > 0 {
        blocks.push(b.tape.constant(Tensor::new(cands.len(), n, numeric)?)?);
    }
    let x = b.tape.concat_cols(&blocks)?;
    mlp(b, "enc.ad", cfg.ad_hidden.len() + 1, x, false)
}

fn layer_norm(b: &mut Binder<'_>, prefix: &str, x: Var) -> Result<Var> {
    let t = &mut b.tape;
    let d = t.shape(x)[1] as f64;
    let sum = t.sum_cols(x)?;
    let mu = t.scale(sum, 1.0 / d)?;
    let xc = t.sub(x, mu)?;
    let sq = t.square(xc)?;
    let ss = t.sum_cols(sq)?;
    let var = t.scale(ss, 1.0 / d)?;
    let var = t.add_scalar(var, LN_EPS)?;
    let sd = t.sqrt(var)?;
    let inv = t.recip(sd)?;
    let y = t.mul(xc, inv)?;
    let gamma = b.param(&format!("{prefix}.gamma"))?;
    let beta = b.param(&format!("{prefix}.beta"))?;
    let y = b.tape.mul(y, gamma)?;
    Ok(b.tape.add(y, beta)?)
}

/// Padded sequence rows and the additive key mask, `[users * len, len]`.
fn sequence_layout(cfg: &ModelConfig, users: &[&EncodedUser]) -> (Vec<usize>, Vec<usize>) {
    let len = cfg.max_seq_len;
    let mut rows = Vec::with_capacity(users.len() * len);
    let mut lengths = Vec::with_capacity(users.len());
    for u in users {
        let n = u.seq_rows.len().min(len);
        rows.extend_from_slice(&u.seq_rows[..n]);
        rows.extend(std::iter::repeat(cfg.entity_buckets).take(len - n));
        lengths.push(n);
    }
    (rows, lengths)
}

fn key_mask(queries_per_user: usize, lengths: &[usize], len: usize) -> Result<Tensor> {
    let mut m = Tensor::zeros(lengths.len() * queries_per_user, len);
    for (u, &n) in lengths.iter().enumerate() {
        for q in 0..queries_per_user {
            for j in n..len {
                m.set(u * queries_per_user + q, j, MASKED);
            }
        }
    }
    Ok(m)
}

/// One post-norm transformer block over `E_seq + E_u`, mean-pooled over real positions.
///
/// Returns the pooled `[users, d]` output, the per-head attention weights and
/// the padded sequence embeddings for reuse by target attention.
pub fn user_transform(b: &mut Binder<'_>, cfg: &ModelConfig, users: &[&EncodedUser]) -> Result<(Var, Vec<Var>, Var, Vec<usize>)> {
    let nb = users.len();
    let len = cfg.max_seq_len;
    let d = cfg.embed_dim;
    let per_user = 1 + cfg.user_fields.len();

    let profile_rows: Vec<usize> = users
        .iter()
        .flat_map(|u| {
            debug_assert_eq!(u.profile_rows.len(), per_user);
            u.profile_rows.iter().copied()
        })
        .collect();
    let profile = b.gather("emb.user", &profile_rows)?;
    let mut pool_profile = Tensor::zeros(nb, nb * per_user);
    for u in 0..nb {
        for j in 0..per_user {
            pool_profile.set(u, u * per_user + j, 1.0 / per_user as f64);
        }
    }
    let pool_profile = b.tape.constant(pool_profile)?;
    let user_vec = b.tape.matmul(pool_profile, profile)?;

    let (seq_rows, lengths) = sequence_layout(cfg, users);
    let seq = b.gather("emb.entity", &seq_rows)?;
    let spread: Vec<usize> = (0..nb * len).map(|r| r / len).collect();
    let user_tokens = b.tape.select_rows(user_vec, &spread)?;
    let mut x = b.tape.add(seq, user_tokens)?;
    if cfg.positional_encoding {
        let pe = positional_encoding(len, d);
        let mut tiled = Tensor::zeros(nb * len, d);
        for r in 0..nb * len {
            tiled.row_slice_mut(r).copy_from_slice(pe.row_slice(r % len));
        }
        let pe = b.tape.constant(tiled)?;
        x = b.tape.add(x, pe)?;
    }

    let q = dense(b, "enc.attn.wq", x)?;
    let k = dense(b, "enc.attn.wk", x)?;
    let v = dense(b, "enc.attn.wv", x)?;
    let dh = d / cfg.heads;
    let mask = b.tape.constant(key_mask(len, &lengths, len)?)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = b.tape.slice_cols(q, h * dh, dh)?;
        let kh = b.tape.slice_cols(k, h * dh, dh)?;
        let vh = b.tape.slice_cols(v, h * dh, dh)?;
        let s = b.tape.group_matmul(qh, kh, nb, true)?;
        let s = b.tape.scale(s, 1.0 / (dh as f64).sqrt())?;
        let s = b.tape.add(s, mask)?;
        let w = b.tape.softmax(s)?;
        heads.push(b.tape.group_matmul(w, vh, nb, false)?);
        weights.push(w);
    }
    let attn = b.tape.concat_cols(&heads)?;
    let attn = dense(b, "enc.attn.wo", attn)?;
    let res = b.tape.add(x, attn)?;
    let x1 = layer_norm(b, "enc.ln1", res)?;
    let f = dense(b, "enc.ffn.l0", x1)?;
    let f = b.tape.relu(f)?;
    let f = dense(b, "enc.ffn.l1", f)?;
    let res = b.tape.add(x1, f)?;
    let x2 = layer_norm(b, "enc.ln2", res)?;

    let mut pool = Tensor::zeros(nb, nb * len);
    for (u, &n) in lengths.iter().enumerate() {
        for j in 0..n {
            pool.set(u, u * len + j, 1.0 / n as f64);
        }
    }
    let pool = b.tape.constant(pool)?;
    let pooled = b.tape.matmul(pool, x2)?;
    Ok((pooled, weights, seq, lengths))
}

/// Scaled dot-product attention of each candidate over its user's sequence.
///
/// Users whose sequence was empty get a zero vector.
pub fn target_attention(
    b: &mut Binder<'_>,
    cfg: &ModelConfig,
    seq: Var,
    lengths: &[usize],
    empty: &[bool],
    aid: Var,
    per_user: usize,
) -> Result<(Var, Var)> {
    let nb = lengths.len();
    let len = cfg.max_seq_len;
    let mask = b.tape.constant(key_mask(per_user, lengths, len)?)?;
    let s = b.tape.group_matmul(aid, seq, nb, true)?;
    let s = b.tape.scale(s, 1.0 / (cfg.embed_dim as f64).sqrt())?;
    let s = b.tape.add(s, mask)?;
    let w = b.tape.softmax(s)?;
    let out = b.tape.group_matmul(w, seq, nb, false)?;
    if empty.iter().any(|&e| e) {
        let keep = Tensor::column(
            (0..nb * per_user)
                .map(|p| if empty[p / per_user] { 0.0 } else { 1.0 })
                .collect(),
        );
        let keep = b.tape.constant(keep)?;
        return Ok((b.tape.mul(out, keep)?, w));
    }
    Ok((out, w))
}

/// Builds the bundle for `users.len() * per_user` pairs; candidate `p` belongs
/// to user `p / per_user`.
pub fn encode(
    b: &mut Binder<'_>,
    cfg: &ModelConfig,
    users: &[&EncodedUser],
    cands: &[&EncodedEntity],
    per_user: usize,
) -> Result<Bundle> {
    if users.is_empty() || per_user == 0 || cands.len() != users.len() * per_user {
        return Err(Error::Contract(format!(
            "{} candidates for {} users x {per_user}",
            cands.len(),
            users.len()
        )));
    }
    let uee = ad_network(b, cfg, cands)?;
    let (tran_user, self_attention, seq, lengths) = user_transform(b, cfg, users)?;
    let owner: Vec<usize> = (0..cands.len()).map(|p| p / per_user).collect();
    let tran = b.tape.select_rows(tran_user, &owner)?;
    let aid_rows: Vec<usize> = cands.iter().map(|c| c.id_row).collect();
    let aid = b.gather("emb.entity", &aid_rows)?;
    let empty: Vec<bool> = users.iter().map(|u| u.empty).collect();
    let (att, target_weights) = target_attention(b, cfg, seq, &lengths, &empty, aid, per_user)?;
    let repr = b.tape.concat_cols(&[uee, tran, att, aid])?;
    Ok(Bundle {
        uee,
        tran,
        att,
        aid,
        repr,
        self_attention,
        target_weights,
        empty_sequences: empty.iter().filter(|&&e| e).count(),
    })
}
