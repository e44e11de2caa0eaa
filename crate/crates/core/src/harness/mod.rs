//! Recall evaluation, the ablation matrix, domain-separation probes,
//! representation dumps and the serving endpoint.

pub mod serve;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unimatch_tape::{Tape, Tensor};

use crate::backbone;
use crate::encoder::{encode, encode_user, EncodedEntity, EncodedUser};
use crate::error::{Error, Result};
use crate::model::{dense, Model, ModelConfig};
use crate::params::Binder;
use crate::retrieval::{brute_force_topk, build_index, retrieve_encoded, HnswConfig, HnswIndex, Scorer};
use crate::synthdata::{Record, SplitData, UserContext};
use crate::trainer::{train, TrainConfig, Toggles};

/// Hits and ground-truth size for one user; the ratio is formed only when reported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallCount {
    pub hits: usize,
    pub total: usize,
}

impl RecallCount {
    pub fn value(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

/// `|truth ∩ found| / |truth|`; `None` for an empty ground truth.
pub fn recall(truth: &BTreeSet<u32>, found: &[u32]) -> Option<RecallCount> {
    if truth.is_empty() {
        return None;
    }
    let found: BTreeSet<u32> = found.iter().copied().collect();
    Some(RecallCount {
        hits: truth.intersection(&found).count(),
        total: truth.len(),
    })
}

/// A test user in one domain: the context at their first test interaction
/// and every entity they engaged with in that domain during the test period.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalUser {
    pub context: UserContext,
    pub truth: BTreeSet<u32>,
}

/// Test positives grouped per domain, users ordered by id.
pub fn ground_truth(test: &[Record], domains: usize) -> Vec<Vec<EvalUser>> {
    let mut per: Vec<BTreeMap<u32, (u64, UserContext, BTreeSet<u32>)>> = vec![BTreeMap::new(); domains];
    for r in test.iter().filter(|r| r.domain < domains && r.label == 1) {
        let e = per[r.domain]
            .entry(r.user_id)
            .or_insert_with(|| (r.ts, r.context(), BTreeSet::new()));
        if r.ts < e.0 {
            e.0 = r.ts;
            e.1 = r.context();
        }
        e.2.insert(r.target);
    }
    per.into_iter()
        .map(|m| {
            m.into_values()
                .map(|(_, context, truth)| EvalUser { context, truth })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ns: Vec<usize>,
    /// Evaluated users per domain, taken in id order.
    pub users_per_domain: usize,
    /// Also evaluate graph retrieval with this beam width (raised to max N).
    pub beam: Option<usize>,
    pub index: HnswConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ns: (1..=40).map(|i| i * 50).collect(),
            users_per_domain: 2000,
            beam: None,
            index: HnswConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ns.contains(&0) || self.users_per_domain == 0 {
            return Err(Error::Config("ns must be non-empty and positive; users_per_domain > 0".into()));
        }
        Ok(())
    }

    fn max_n(&self) -> usize {
        *self.ns.iter().max().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: usize,
    pub users: usize,
    /// Users without test positives in this domain.
    pub skipped: usize,
    /// Mean per-user recall at each N.
    pub recall_all: Vec<f64>,
    pub recall_retrieval: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ns: Vec<usize>,
    pub domains: Vec<DomainReport>,
    /// Unweighted mean over domains at each N.
    pub average_all: Vec<f64>,
    pub average_retrieval: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn recall_all_at(&self, n: usize) -> Option<f64> {
        self.ns.iter().position(|&x| x == n).map(|i| self.average_all[i])
    }

    pub fn recall_retrieval_at(&self, n: usize) -> Option<f64> {
        let i = self.ns.iter().position(|&x| x == n)?;
        self.average_retrieval.as_ref().map(|r| r[i])
    }

    /// One row per N: per-domain and average recall.
    pub fn write_sweep_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let k = self.domains.len();
        let mut header = vec!["n".to_string()];
        for kind in ["all", "retrieval"] {
            for d in 0..k {
                header.push(format!("recall_{kind}_d{d}"));
            }
            header.push(format!("recall_{kind}_avg"));
        }
        writeln!(w, "{}", header.join(","))?;
        for (i, n) in self.ns.iter().enumerate() {
            let mut row = vec![n.to_string()];
            for d in &self.domains {
                row.push(format!("{:.6}", d.recall_all[i]));
            }
            row.push(format!("{:.6}", self.average_all[i]));
            for d in &self.domains {
                row.push(d.recall_retrieval.as_ref().map_or(String::new(), |r| format!("{:.6}", r[i])));
            }
            row.push(self.average_retrieval.as_ref().map_or(String::new(), |r| format!("{:.6}", r[i])));
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(candidate − baseline) / baseline` in percent.
pub fn relative_change(candidate: f64, baseline: f64) -> f64 {
    (candidate - baseline) / baseline * 100.0
}

/// Short stable hash of any serializable configuration.
pub fn fingerprint<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).unwrap_or_default();
    format!("{:016x}", fnv64(json.as_bytes()))
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Brute-force (and optionally graph) recall per domain.
pub fn evaluate(model: &Model, data: &SplitData, cfg: &EvalConfig, index: Option<&HnswIndex>) -> Result<EvalReport> {
    cfg.validate()?;
    let scorer = Scorer::new(model, &data.catalog);
    let built;
    let index = match (cfg.beam, index) {
        (Some(_), Some(i)) => Some(i),
        (Some(_), None) => {
            built = build_index(&scorer, cfg.index)?;
            Some(&built)
        }
        (None, _) => None,
    };
    let truth = ground_truth(&data.test, model.config.domains);
    let max_n = cfg.max_n();
    let test_users: BTreeSet<u32> = data.test.iter().map(|r| r.user_id).collect();
    let mut domains = Vec::new();
    for (k, users) in truth.iter().enumerate() {
        let users: Vec<&EvalUser> = users.iter().take(cfg.users_per_domain).collect();
        let rows: Vec<(Vec<RecallCount>, Option<Vec<RecallCount>>)> = users
            .par_iter()
            .map(|u| -> Result<_> {
                let enc = scorer.encode_user(&u.context);
                let top: Vec<u32> = brute_force_topk(&scorer, &enc, k, max_n)?.into_iter().map(|r| r.0).collect();
                let all = cfg
                    .ns
                    .iter()
                    .map(|&n| recall(&u.truth, &top[..n.min(top.len())]).expect("non-empty truth"))
                    .collect();
                let ret = match (index, cfg.beam) {
                    (Some(index), Some(beam)) => {
                        let r = retrieve_encoded(index, &scorer, &enc, k, max_n, beam.max(max_n))?;
                        Some(
                            cfg.ns
                                .iter()
                                .map(|&n| recall(&u.truth, &r.ids[..n.min(r.ids.len())]).expect("non-empty truth"))
                                .collect(),
                        )
                    }
                    _ => None,
                };
                Ok((all, ret))
            })
            .collect::<Result<_>>()?;
        let mut recall_all = Vec::with_capacity(cfg.ns.len());
        let mut recall_ret = Vec::with_capacity(cfg.ns.len());
        for i in 0..cfg.ns.len() {
            let a: Vec<f64> = rows.iter().map(|r| r.0[i].value()).collect();
            recall_all.push(if a.is_empty() { 0.0 } else { mean(&a) });
            let r: Vec<f64> = rows.iter().filter_map(|r| r.1.as_ref().map(|v| v[i].value())).collect();
            recall_ret.push(if r.is_empty() { 0.0 } else { mean(&r) });
        }
        if rows.is_empty() {
            log::warn!("domain {k} has no test users to evaluate");
        }
        domains.push(DomainReport {
            domain: k,
            users: rows.len(),
            skipped: test_users.len() - truth[k].len(),
            recall_all,
            recall_retrieval: index.map(|_| recall_ret),
        });
    }
    let average = |get: &dyn Fn(&DomainReport) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = domains.iter().filter_map(get).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    let average_all = (0..cfg.ns.len())
        .map(|i| average(&|d| Some(d.recall_all[i])).unwrap_or(0.0))
        .collect();
    let average_retrieval = index.map(|_| {
        (0..cfg.ns.len())
            .map(|i| average(&|d| d.recall_retrieval.as_ref().map(|r| r[i])).unwrap_or(0.0))
            .collect()
    });
    Ok(EvalReport {
        ns: cfg.ns.clone(),
        domains,
        average_all,
        average_retrieval,
        seeds: vec![model.config.init_seed],
        fingerprint: fingerprint(&(&model.config, cfg)),
    })
}

/// The five configurations compared by the ablation, in report order.
pub fn ablation_rows() -> Vec<(&'static str, Toggles)> {
    let t = |dal, mvwdl, uwl| Toggles {
        dal,
        mvwdl,
        ocl: dal || mvwdl,
        uwl,
    };
    vec![
        ("backbone", Toggles::BACKBONE),
        ("dal", t(true, false, false)),
        ("dal_uwl", t(true, false, true)),
        ("mvwdl", t(false, true, false)),
        ("full", Toggles::FULL),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub row: String,
    pub seed: u64,
    /// Absent when training diverged or failed.
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub n: usize,
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    fn run(&self, row: &str, seed: u64) -> Option<&EvalReport> {
        self.runs
            .iter()
            .find(|r| r.row == row && r.seed == seed)
            .and_then(|r| r.report.as_ref())
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.seed).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Average recall at `n` of `row` per seed.
    pub fn averages(&self, row: &str) -> Vec<Option<f64>> {
        self.seeds()
            .into_iter()
            .map(|s| self.run(row, s).and_then(|r| r.recall_all_at(self.n)))
            .collect()
    }

    /// Per-seed differences `row − baseline` over seeds where both ran.
    pub fn paired_differences(&self, row: &str, baseline: &str) -> Vec<f64> {
        self.averages(row)
            .into_iter()
            .zip(self.averages(baseline))
            .filter_map(|(a, b)| Some(a? - b?))
            .collect()
    }

    /// Mean and noise floor (two standard errors) of the paired differences.
    pub fn paired_summary(&self, row: &str, baseline: &str) -> Option<(f64, f64)> {
        let d = self.paired_differences(row, baseline);
        if d.is_empty() {
            return None;
        }
        let m = mean(&d);
        let floor = if d.len() < 2 {
            0.0
        } else {
            let var = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (d.len() - 1) as f64;
            2.0 * (var / d.len() as f64).sqrt()
        };
        Some((m, floor))
    }

    /// Per row and seed: domain recalls, average, relative change vs backbone.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let k = self
            .runs
            .iter()
            .find_map(|r| r.report.as_ref().map(|r| r.domains.len()))
            .unwrap_or(0);
        let mut header = vec!["row".to_string(), "seed".into()];
        header.extend((0..k).map(|d| format!("recall_all_d{d}")));
        header.extend(["recall_all_avg".into(), "rel_change_pct".into(), "status".into()]);
        writeln!(w, "{}", header.join(","))?;
        for run in &self.runs {
            let mut row = vec![run.row.clone(), run.seed.to_string()];
            match &run.report {
                Some(rep) => {
                    let i = rep.ns.iter().position(|&x| x == self.n).unwrap_or(0);
                    row.extend(rep.domains.iter().map(|d| format!("{:.6}", d.recall_all[i])));
                    let avg = rep.average_all[i];
                    row.push(format!("{avg:.6}"));
                    let base = self.run("backbone", run.seed).and_then(|b| b.recall_all_at(self.n));
                    row.push(base.map_or(String::new(), |b| format!("{:.3}", relative_change(avg, b))));
                    row.push("ok".into());
                }
                None => {
                    row.extend((0..k + 2).map(|_| String::new()));
                    row.push("failed".into());
                }
            }
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains and evaluates each ablation row for each seed. A seed offsets the
/// model initialization and the training order; the data stay fixed.
pub fn ablate(
    data: &SplitData,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    seeds: &[u64],
    mut on_model: impl FnMut(&str, u64, &Model),
) -> Result<AblationReport> {
    let n = *eval_cfg.ns.first().ok_or_else(|| Error::Config("ns must not be empty".into()))?;
    let mut runs = Vec::new();
    for &seed in seeds {
        for (row, toggles) in ablation_rows() {
            let mcfg = ModelConfig {
                init_seed: model_cfg.init_seed.wrapping_add(seed),
                ..model_cfg.clone()
            };
            let tcfg = TrainConfig {
                seed: train_cfg.seed.wrapping_add(seed),
                toggles,
                ..train_cfg.clone()
            };
            let outcome = Model::new(mcfg).and_then(|m| train(m, &data.catalog, &data.train, &tcfg));
            let run = match outcome {
                Ok(out) if out.diverged_at.is_none() => {
                    on_model(row, seed, &out.model);
                    match evaluate(&out.model, data, eval_cfg, None) {
                        Ok(mut report) => {
                            report.seeds = vec![seed];
                            AblationRun {
                                row: row.into(),
                                seed,
                                report: Some(report),
                                error: None,
                            }
                        }
                        Err(e) => AblationRun {
                            row: row.into(),
                            seed,
                            report: None,
                            error: Some(e.to_string()),
                        },
                    }
                }
                Ok(out) => AblationRun {
                    row: row.into(),
                    seed,
                    report: None,
                    error: Some(format!("diverged at step {}", out.diverged_at.unwrap_or(0))),
                },
                Err(e) => AblationRun {
                    row: row.into(),
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                },
            };
            if let Some(e) = &run.error {
                log::error!("ablation row {row} seed {seed} failed: {e}");
            }
            runs.push(run);
        }
    }
    Ok(AblationReport { n, runs })
}

/// Shared and specific expert outputs and the per-perspective projections
/// for `(user, positive target, domain)` triples.
#[derive(Clone, Debug, PartialEq)]
pub struct Representations {
    pub shared: Tensor,
    pub specific: Tensor,
    pub projections: Vec<Tensor>,
    pub domains: Vec<usize>,
}

pub fn representations(model: &Model, data: &SplitData, records: &[Record]) -> Result<Representations> {
    let cfg = &model.config;
    let scorer = Scorer::new(model, &data.catalog);
    let mut shared = Vec::new();
    let mut specific = Vec::new();
    let mut projections = vec![Vec::new(); cfg.domains];
    for chunk in records.chunks(256) {
        let users: Vec<EncodedUser> = chunk.iter().map(|r| encode_user(cfg, &r.context())).collect();
        let user_refs: Vec<&EncodedUser> = users.iter().collect();
        let cands: Vec<&EncodedEntity> = chunk
            .iter()
            .map(|r| {
                scorer
                    .entities
                    .get(r.target as usize)
                    .ok_or_else(|| Error::Contract(format!("unknown entity {}", r.target)))
            })
            .collect::<Result<_>>()?;
        let domains: Vec<usize> = chunk.iter().map(|r| r.domain).collect();
        let mut b = Binder::new(&model.params, false);
        let bundle = encode(&mut b, cfg, &user_refs, &cands, 1)?;
        let out = backbone::forward(&mut b, cfg, bundle.repr, &domains)?;
        shared.extend_from_slice(b.tape.value(out.shared).data());
        specific.extend_from_slice(b.tape.value(out.specific).data());
        for (t, p) in projections.iter_mut().enumerate() {
            let v = dense(&mut b, &format!("rrl.proj{t}"), out.shared)?;
            p.extend_from_slice(b.tape.value(v).data());
        }
    }
    let n = records.len();
    let d = cfg.expert_dim();
    Ok(Representations {
        shared: Tensor::new(n, d, shared)?,
        specific: Tensor::new(n, d, specific)?,
        projections: projections
            .into_iter()
            .map(|p| Tensor::new(n, cfg.projection_dim, p))
            .collect::<std::result::Result<_, _>>()?,
        domains: records.iter().map(|r| r.domain).collect(),
    })
}

/// CSV with one row per sample for the shared features and one per sample
/// and perspective: `view,row,domain,v0..`.
pub fn dump_representations(model: &Model, data: &SplitData, records: &[Record], path: &Path) -> Result<usize> {
    let reps = representations(model, data, records)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let width = reps.shared.cols().max(model.config.projection_dim);
    let cols: Vec<String> = (0..width).map(|i| format!("v{i}")).collect();
    writeln!(w, "view,row,domain,{}", cols.join(","))?;
    let mut lines = 0;
    let mut emit = |view: &str, t: &Tensor, w: &mut dyn Write| -> Result<()> {
        for r in 0..t.rows() {
            let vals: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{view},{r},{},{}", reps.domains[r], vals.join(","))?;
            lines += 1;
        }
        Ok(())
    };
    emit("shared", &reps.shared, &mut w)?;
    for (t, p) in reps.projections.iter().enumerate() {
        emit(&format!("proj{t}"), p, &mut w)?;
    }
    w.flush()?;
    Ok(lines)
}

/// Held-out accuracy of a fresh softmax-regression probe predicting the
/// domain from `features`. Classes are balanced by subsampling to the rarest
/// domain before a 70/30 split.
pub fn probe_accuracy(features: &Tensor, labels: &[usize], classes: usize, seed: u64) -> Result<f64> {
    if labels.len() != features.rows() || classes < 2 {
        return Err(Error::Contract("probe needs one label per row and two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let per = by_class.iter().map(Vec::len).min().unwrap_or(0);
    if per < 4 {
        return Err(Error::Contract(format!("probe needs at least 4 rows per class, got {per}")));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for rows in by_class.iter_mut() {
        rows.shuffle(&mut rng);
        let cut = per * 7 / 10;
        train.extend_from_slice(&rows[..cut]);
        test.extend_from_slice(&rows[cut..per]);
    }
    let d = features.cols();
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in &train {
        for (j, v) in features.row_slice(i).iter().enumerate() {
            mu[j] += v / train.len() as f64;
        }
    }
    for &i in &train {
        for (j, v) in features.row_slice(i).iter().enumerate() {
            sd[j] += (v - mu[j]).powi(2) / train.len() as f64;
        }
    }
    let standardize = |rows: &[usize]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            for (j, v) in features.row_slice(i).iter().enumerate() {
                data.push((v - mu[j]) / (sd[j].sqrt() + 1e-8));
            }
        }
        Ok(Tensor::new(rows.len(), d, data)?)
    };
    let xtr = standardize(&train)?;
    let xte = standardize(&test)?;
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();

    let mut w = Tensor::zeros(d, classes);
    let mut bias = Tensor::zeros(1, classes);
    let lr = 0.5;
    let l2 = 1e-3;
    for _ in 0..300 {
        let mut t = Tape::new();
        let x = t.constant(xtr.clone())?;
        let wv = t.leaf(w.clone(), true)?;
        let bv = t.leaf(bias.clone(), true)?;
        let logits = t.linear(x, wv, bv)?;
        let ce = crate::rrl::cross_entropy(&mut t, logits, &ytr)?;
        let sq = t.square(wv)?;
        let reg = t.sum(sq)?;
        let reg = t.scale(reg, l2)?;
        let loss = t.add(ce, reg)?;
        let g = t.backward(loss)?;
        let gw = g.get(wv).expect("leaf gradient");
        let gb = g.get(bv).expect("leaf gradient");
        for (a, b) in w.data_mut().iter_mut().zip(gw.data()) {
            *a -= lr * b;
        }
        for (a, b) in bias.data_mut().iter_mut().zip(gb.data()) {
            *a -= lr * b;
        }
    }
    let mut correct = 0;
    for (r, &y) in yte.iter().enumerate() {
        let row = xte.row_slice(r);
        let pred = (0..classes)
            .map(|c| bias.data()[c] + row.iter().enumerate().map(|(j, v)| v * w.get(j, c)).sum::<f64>())
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .expect("classes >= 2");
        correct += (pred == y) as usize;
    }
    Ok(correct as f64 / yte.len() as f64)
}
