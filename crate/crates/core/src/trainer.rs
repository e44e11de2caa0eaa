//! Sampled-softmax training with the auxiliary losses and uncertainty weighting.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unimatch_tape::{Tape, Tensor, Var};

use crate::backbone;
use crate::encoder::{encode, encode_catalog, encode_user, EncodedEntity, EncodedUser};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, AUX_LOSSES};
use crate::params::{Binder, GradMap, Optimizer, OptimizerConfig, ParamGrad};
use crate::rrl;
use crate::synthdata::{Catalog, Record};

/// Index of each auxiliary loss in the uncertainty vector and metrics.
pub const AUX_NAMES: [&str; AUX_LOSSES] = ["s", "d", "wd", "ortho"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub dal: bool,
    pub mvwdl: bool,
    pub ocl: bool,
    pub uwl: bool,
}

impl Toggles {
    pub const BACKBONE: Toggles = Toggles {
        dal: false,
        mvwdl: false,
        ocl: false,
        uwl: false,
    };
    pub const FULL: Toggles = Toggles {
        dal: true,
        mvwdl: true,
        ocl: true,
        uwl: true,
    };

    /// Which auxiliary losses are active, in [`AUX_NAMES`] order.
    pub fn active(&self) -> [bool; AUX_LOSSES] {
        [self.dal, self.dal, self.mvwdl, self.ocl]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidates {
    /// Target plus `negatives` uniform draws.
    #[default]
    Sampled,
    /// Target plus every other catalog entity.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub negatives: usize,
    pub candidates: Candidates,
    pub seed: u64,
    pub toggles: Toggles,
    /// Weight of every active auxiliary loss when uncertainty weighting is off.
    pub fixed_aux_weight: f64,
    pub reversal: f64,
    pub gp_weight: f64,
    /// Bounds applied to the log-variances after every step.
    pub log_var_bounds: (f64, f64),
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 8,
            max_steps: None,
            negatives: 7,
            candidates: Candidates::Sampled,
            seed: 1,
            toggles: Toggles::FULL,
            fixed_aux_weight: 0.01,
            reversal: 0.1,
            gp_weight: 1.0,
            log_var_bounds: (2.0, 6.0),
            optimizer: OptimizerConfig::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives == 0 && self.candidates == Candidates::Sampled {
            return Err(Error::Config("at least one negative per positive is required".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        if self.log_var_bounds.0 > self.log_var_bounds.1 {
            return Err(Error::Config("log_var_bounds are inverted".into()));
        }
        Ok(())
    }
}

/// `-Σ_rows log softmax(logits - log Q)[target]` with the target in column 0.
pub fn sampled_softmax_loss(tape: &mut Tape, logits: Var, log_q: f64) -> Result<Var> {
    let corrected = tape.add_scalar(logits, -log_q)?;
    let ls = tape.log_softmax(corrected)?;
    let target = tape.slice_cols(ls, 0, 1)?;
    let total = tape.sum(target)?;
    Ok(tape.neg(total)?)
}

/// Per-draw log-probability correction for uniform sampling: `log(S / |A|)`.
pub fn uniform_log_q(negatives: usize, catalog: usize) -> f64 {
    (negatives as f64 / catalog as f64).ln()
}

/// Draws `count` entity ids uniformly, redrawing any that equal the target.
pub fn sample_negatives(rng: &mut ChaCha8Rng, catalog: usize, target: usize, count: usize) -> Result<Vec<usize>> {
    if catalog < 2 {
        return Err(Error::Config("negative sampling needs at least two entities".into()));
    }
    Ok((0..count)
        .map(|_| loop {
            let n = rng.gen_range(0..catalog);
            if n != target {
                break n;
            }
        })
        .collect())
}

/// `ce + Σ_i (½ e^{-s_i} L_i + ½ s_i)` over active losses, or `ce + w Σ L_i`
/// without uncertainty weighting. Returns the total and the effective weights.
pub fn uwl_total(
    tape: &mut Tape,
    ce: Var,
    aux: &[Option<Var>; AUX_LOSSES],
    log_var: Option<Var>,
    fixed_weight: f64,
) -> Result<(Var, [f64; AUX_LOSSES])> {
    let mut total = ce;
    let mut weights = [0.0; AUX_LOSSES];
    for (i, loss) in aux.iter().enumerate() {
        let Some(loss) = *loss else { continue };
        let term = match log_var {
            Some(s) => {
                let si = tape.slice_cols(s, i, 1)?;
                weights[i] = 0.5 * (-tape.value(si).data()[0]).exp();
                let neg = tape.neg(si)?;
                let precision = tape.exp(neg)?;
                let weighted = tape.mul(precision, loss)?;
                let weighted = tape.scale(weighted, 0.5)?;
                let reg = tape.scale(si, 0.5)?;
                tape.add(weighted, reg)?
            }
            None => {
                weights[i] = fixed_weight;
                tape.scale(loss, fixed_weight)?
            }
        };
        total = tape.add(total, term)?;
    }
    Ok((total, weights))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub l_ce: f64,
    pub l_s: f64,
    pub l_d: f64,
    pub l_wd: f64,
    pub l_ortho: f64,
    pub w_s: f64,
    pub w_d: f64,
    pub w_wd: f64,
    pub w_ortho: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,l_ce,l_s,l_d,l_wd,l_ortho,w_s,w_d,w_wd,w_ortho";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.l_ce,
            self.l_s,
            self.l_d,
            self.l_wd,
            self.l_ortho,
            self.w_s,
            self.w_d,
            self.w_wd,
            self.w_ortho
        )
    }
}

pub fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(w, "{}", m.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Training examples with features hashed once up front.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub users: Vec<EncodedUser>,
    pub targets: Vec<usize>,
    pub domains: Vec<usize>,
    pub entities: Vec<EncodedEntity>,
}

impl TrainSet {
    pub fn new(cfg: &ModelConfig, catalog: &Catalog, records: &[Record]) -> Result<Self> {
        for r in records {
            if catalog.get(r.target).is_none() {
                return Err(Error::Contract(format!("record targets unknown entity {}", r.target)));
            }
            if r.domain >= cfg.domains {
                return Err(Error::Contract(format!("record domain {} outside 0..{}", r.domain, cfg.domains)));
            }
        }
        Ok(Self {
            users: records.iter().map(|r| encode_user(cfg, &r.context())).collect(),
            targets: records.iter().map(|r| r.target as usize).collect(),
            domains: records.iter().map(|r| r.domain).collect(),
            entities: encode_catalog(cfg, catalog),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Loss values and gradients of one batch, before any update.
pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub grads: GradMap,
    pub loss: f64,
}

/// Forward and backward for one batch. Spectral states advance by one power
/// iteration when the adversarial classifier is active.
pub fn compute_step(
    model: &mut Model,
    data: &TrainSet,
    batch: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let Model {
        config: mcfg,
        params,
        spectral,
    } = model;
    let catalog = data.entities.len();
    let mut cand_ids = Vec::new();
    let per_user = match cfg.candidates {
        Candidates::Sampled => cfg.negatives + 1,
        Candidates::Full => catalog,
    };
    for &i in batch {
        let t = data.targets[i];
        cand_ids.push(t);
        match cfg.candidates {
            Candidates::Sampled => cand_ids.extend(sample_negatives(rng, catalog, t, cfg.negatives)?),
            Candidates::Full => cand_ids.extend((0..catalog).filter(|&e| e != t)),
        }
    }
    let log_q = match cfg.candidates {
        Candidates::Sampled => uniform_log_q(cfg.negatives, catalog),
        Candidates::Full => 0.0,
    };
    let users: Vec<&EncodedUser> = batch.iter().map(|&i| &data.users[i]).collect();
    let cands: Vec<&EncodedEntity> = cand_ids.iter().map(|&e| &data.entities[e]).collect();
    let labels: Vec<usize> = batch.iter().map(|&i| data.domains[i]).collect();
    let pair_domains: Vec<usize> = labels.iter().flat_map(|&k| std::iter::repeat(k).take(per_user)).collect();

    let mut b = Binder::new(params, true);
    let bundle = encode(&mut b, mcfg, &users, &cands, per_user)?;
    let out = backbone::forward(&mut b, mcfg, bundle.repr, &pair_domains)?;
    let logits = b.tape.reshape(out.logits, batch.len(), per_user)?;
    let ce = sampled_softmax_loss(&mut b.tape, logits, log_q)?;

    let positives: Vec<usize> = (0..batch.len()).map(|i| i * per_user).collect();
    let toggles = cfg.toggles;
    let mut aux: [Option<Var>; AUX_LOSSES] = [None; AUX_LOSSES];
    if toggles.dal || toggles.mvwdl || toggles.ocl {
        let shared = b.tape.select_rows(out.shared, &positives)?;
        let specific = b.tape.select_rows(out.specific, &positives)?;
        if toggles.dal {
            aux[0] = Some(rrl::dal_shared(&mut b, spectral, shared, &labels, cfg.reversal)?);
            aux[1] = Some(rrl::dal_specific(&mut b, specific, &labels)?);
        }
        if toggles.mvwdl {
            let w = rrl::mvwdl_loss(&mut b, mcfg, shared, &labels, cfg.reversal, cfg.gp_weight, rng)?;
            if !w.skipped {
                aux[2] = Some(w.loss);
            }
        }
        if toggles.ocl {
            let mut rows = vec![Vec::new(); mcfg.domains];
            for (i, &k) in labels.iter().enumerate() {
                rows[k].push(i);
            }
            aux[3] = Some(rrl::ocl(&mut b.tape, shared, specific, &rows)?);
        }
    }
    let log_var = if toggles.uwl && aux.iter().any(Option::is_some) {
        Some(b.param("uwl.log_var")?)
    } else {
        None
    };
    let (total, weights) = uwl_total(&mut b.tape, ce, &aux, log_var, cfg.fixed_aux_weight)?;
    let value = |t: &Tape, v: Option<Var>| v.map_or(0.0, |v| t.value(v).data()[0]);
    let metrics = StepMetrics {
        step: 0,
        epoch: 0,
        l_ce: b.tape.value(ce).data()[0],
        l_s: value(&b.tape, aux[0]),
        l_d: value(&b.tape, aux[1]),
        l_wd: value(&b.tape, aux[2]),
        l_ortho: value(&b.tape, aux[3]),
        w_s: weights[0],
        w_d: weights[1],
        w_wd: weights[2],
        w_ortho: weights[3],
    };
    let loss = b.tape.value(total).data()[0];
    let g = b.tape.backward(total)?;
    let grads = b.collect(&g)?;
    Ok(StepOutcome { metrics, grads, loss })
}

fn grads_finite(grads: &GradMap) -> bool {
    grads.grads.values().all(|g| match g {
        ParamGrad::Dense(t) => t.is_finite(),
        ParamGrad::Rows(rows) => rows.values().all(|r| r.iter().all(|v| v.is_finite())),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
    /// Step at which a non-finite value stopped training; the model is the
    /// last finite state.
    pub diverged_at: Option<usize>,
}

/// Runs plain mini-batch training over `records`.
pub fn train(model: Model, catalog: &Catalog, records: &[Record], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Config("no training records".into()));
    }
    let data = TrainSet::new(&model.config, catalog, records)?;
    train_on(model, &data, cfg)
}

pub fn train_on(mut model: Model, data: &TrainSet, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                return Ok(TrainOutput {
                    model,
                    metrics,
                    diverged_at: None,
                });
            }
            let snapshot = model.spectral.clone();
            let outcome = match compute_step(&mut model, data, batch, cfg, &mut rng) {
                Ok(o) if o.loss.is_finite() && grads_finite(&o.grads) => o,
                Ok(_) => return Ok(diverged(model, snapshot, metrics, step)),
                Err(e) if e.is_non_finite() => return Ok(diverged(model, snapshot, metrics, step)),
                Err(e) => return Err(e),
            };
            optimizer.apply(&mut model.params, &outcome.grads, cfg.learning_rate)?;
            if cfg.toggles.uwl {
                let (lo, hi) = cfg.log_var_bounds;
                let s = model.params.get_mut("uwl.log_var")?;
                for v in s.data_mut() {
                    *v = v.clamp(lo, hi);
                }
            }
            let mut m = outcome.metrics;
            m.step = step;
            m.epoch = epoch;
            if step % 100 == 0 {
                log::info!("step {step} epoch {epoch} l_ce {:.4} total {:.4}", m.l_ce, outcome.loss);
            }
            metrics.push(m);
            step += 1;
        }
    }
    Ok(TrainOutput {
        model,
        metrics,
        diverged_at: None,
    })
}

fn diverged(
    mut model: Model,
    spectral: std::collections::BTreeMap<String, unimatch_tape::SpectralState>,
    metrics: Vec<StepMetrics>,
    step: usize,
) -> TrainOutput {
    log::error!("non-finite loss at step {step}; keeping the last finite parameters");
    model.spectral = spectral;
    TrainOutput {
        model,
        metrics,
        diverged_at: Some(step),
    }
}

/// Exact cross-entropy `-Σ_rows log softmax(logits)[target]` for reference.
pub fn full_softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row_slice(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    total
}
