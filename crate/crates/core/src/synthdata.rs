//! Synthetic multi-entity, multi-domain interaction logs.
//!
//! Users and entities carry planted latent vectors. A shared latent drives
//! preferences in every domain; each domain adds its own bilinear term built
//! from per-domain linear maps of the same latents. Observable features are
//! noisy functions of the latents so a model can recover the structure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved categorical value used by the fill rule.
pub const MISSING: &str = "⟨MISSING⟩";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityClass {
    A,
    B,
    C,
    D,
}

impl EntityClass {
    pub const ALL: [EntityClass; 4] = [EntityClass::A, EntityClass::B, EntityClass::C, EntityClass::D];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EntityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for EntityClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(EntityClass::A),
            "B" => Ok(EntityClass::B),
            "C" => Ok(EntityClass::C),
            "D" => Ok(EntityClass::D),
            other => Err(Error::Schema(format!("unknown entity class {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Num(f64),
    Cat(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    /// Classes that natively carry the field; empty means every class.
    pub classes: Vec<EntityClass>,
    pub default: FieldValue,
}

impl FieldSpec {
    fn new(name: &str, kind: FieldKind, classes: &[EntityClass]) -> Self {
        let default = match kind {
            FieldKind::Numeric => FieldValue::Num(0.0),
            FieldKind::Categorical => FieldValue::Cat(MISSING.to_string()),
        };
        Self {
            name: name.to_string(),
            kind,
            classes: classes.to_vec(),
            default,
        }
    }

    pub fn is_shared(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn native_to(&self, class: EntityClass) -> bool {
        self.classes.is_empty() || self.classes.contains(&class)
    }
}

/// Unified entity feature schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub fields: Vec<FieldSpec>,
}

impl Default for Schema {
    fn default() -> Self {
        use EntityClass::*;
        use FieldKind::*;
        Self {
            fields: vec![
                FieldSpec::new("category", Categorical, &[]),
                FieldSpec::new("price_level", Numeric, &[]),
                FieldSpec::new("popularity", Numeric, &[]),
                FieldSpec::new("quality", Numeric, &[]),
                FieldSpec::new("freshness", Numeric, &[]),
                FieldSpec::new("brand", Categorical, &[A]),
                FieldSpec::new("shop_level", Numeric, &[B]),
                FieldSpec::new("video_duration", Numeric, &[C]),
                FieldSpec::new("host", Categorical, &[D]),
            ],
        }
    }
}

impl Schema {
    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn names(&self, kind: FieldKind) -> Vec<String> {
        self.fields
            .iter()
            .filter(|f| f.kind == kind)
            .map(|f| f.name.clone())
            .collect()
    }
}

pub type Features = BTreeMap<String, FieldValue>;

/// An entity as emitted by its own class-specific source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawEntity {
    pub class: String,
    pub features: Features,
}

/// Fills every schema field the entity lacks with its declared default.
///
/// Present fields pass through untouched, so the operation is idempotent.
pub fn unify(raw: &RawEntity, schema: &Schema) -> Result<(EntityClass, Features)> {
    let class: EntityClass = raw.class.parse()?;
    for (name, value) in &raw.features {
        let spec = schema
            .field(name)
            .ok_or_else(|| Error::Schema(format!("field {name:?} is not in the schema")))?;
        let ok = matches!(
            (spec.kind, value),
            (FieldKind::Numeric, FieldValue::Num(_)) | (FieldKind::Categorical, FieldValue::Cat(_))
        );
        if !ok {
            return Err(Error::Schema(format!("field {name:?} has the wrong kind")));
        }
    }
    let mut out = Features::new();
    for spec in &schema.fields {
        let value = raw.features.get(&spec.name).cloned().unwrap_or_else(|| spec.default.clone());
        out.insert(spec.name.clone(), value);
    }
    Ok((class, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: u32,
    pub class: EntityClass,
    pub features: Features,
    pub latent: Vec<f64>,
    /// Per-domain latent, one row per domain.
    pub domain_latent: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub schema: Schema,
    pub entities: Vec<Entity>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Entities are stored densely, so an id is also its position.
    pub fn get(&self, id: u32) -> Option<&Entity> {
        self.entities.get(id as usize).filter(|e| e.id == id)
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for e in &self.entities {
            counts[e.class.index()] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeqItem {
    pub id: u32,
    pub class: EntityClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserContext {
    pub user_id: u32,
    pub profile: BTreeMap<String, String>,
    pub sequence: Vec<SeqItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub context: UserContext,
    pub latent: Vec<f64>,
    pub domain_latent: Vec<Vec<f64>>,
    /// Relative activity per domain.
    pub activity: Vec<f64>,
}

/// One logged positive interaction in the unified schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub user_id: u32,
    pub profile: BTreeMap<String, String>,
    pub sequence: Vec<SeqItem>,
    pub target: u32,
    pub target_class: EntityClass,
    pub entity: Features,
    pub domain: usize,
    pub label: u8,
    pub ts: u64,
}

impl Record {
    pub fn context(&self) -> UserContext {
        UserContext {
            user_id: self.user_id,
            profile: self.profile.clone(),
            sequence: self.sequence.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub domains: usize,
    /// Entity counts for classes A, B, C, D.
    pub class_counts: [usize; 4],
    pub users: usize,
    pub min_seq_len: usize,
    pub seq_len: usize,
    pub records_per_domain: Vec<usize>,
    pub latent_dim: usize,
    /// Weight of the domain-invariant preference term.
    pub invariant_weight: f64,
    /// Weight of each domain's specific preference term.
    pub specific_weight: Vec<f64>,
    /// Standard deviation of the logit noise.
    pub noise: f64,
    /// Constant added to every click logit; lowers the base click rate.
    pub logit_offset: f64,
    /// Standard deviation of the noise on observable numeric features.
    pub feature_noise: f64,
    /// Spread of per-user domain activity (log scale).
    pub activity_spread: f64,
    pub shards: usize,
    pub split_ratio: f64,
    pub split_mode: SplitMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            domains: 4,
            class_counts: [5000, 80, 8, 70],
            users: 2000,
            min_seq_len: 3,
            seq_len: 10,
            records_per_domain: vec![2400, 2240, 2920, 5260],
            latent_dim: 6,
            invariant_weight: 3.0,
            specific_weight: vec![2.0, 1.5, 1.5, 1.5],
            noise: 0.3,
            logit_offset: -8.0,
            feature_noise: 0.2,
            activity_spread: 1.0,
            shards: 8,
            split_ratio: 0.8,
            split_mode: SplitMode::Time,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.domains == 0 {
            return fail("at least one domain is required".into());
        }
        if let Some(i) = self.class_counts.iter().position(|&c| c == 0) {
            return fail(format!("entity class {} has zero entities", EntityClass::ALL[i]));
        }
        if self.records_per_domain.len() != self.domains || self.specific_weight.len() != self.domains {
            return fail(format!(
                "records_per_domain and specific_weight need {} entries",
                self.domains
            ));
        }
        if self.records_per_domain.iter().any(|&r| r == 0) {
            return fail("records per domain must be positive".into());
        }
        if self.invariant_weight < 0.0 || self.specific_weight.iter().any(|&b| b < 0.0) || self.noise < 0.0 {
            return fail("signal weights and noise must be non-negative".into());
        }
        if self.users == 0 || self.latent_dim == 0 || self.shards == 0 {
            return fail("users, latent_dim and shards must be positive".into());
        }
        if self.min_seq_len > self.seq_len {
            return fail("min_seq_len exceeds seq_len".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return fail("split_ratio must lie in (0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: Catalog,
    pub users: Vec<User>,
    pub records: Vec<Record>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const WORLD_STREAM: u64 = 1;
const ALLOC_STREAM: u64 = 2;
const SHARD_STREAM_BASE: u64 = 1 << 32;

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn apply(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, x)).collect()
}

fn argmax_dot(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let v = dot(c, x);
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

fn bucketize(v: f64, buckets: usize) -> usize {
    // Standard-normal-ish input spread evenly over [-2, 2].
    let t = ((v + 2.0) / 4.0 * buckets as f64).floor();
    t.clamp(0.0, buckets as f64 - 1.0) as usize
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hidden generative structure shared by all shards.
struct World {
    entity_latent: Vec<Vec<f64>>,
    entity_domain: Vec<Vec<Vec<f64>>>,
    user_latent: Vec<Vec<f64>>,
    user_domain: Vec<Vec<Vec<f64>>>,
}

impl World {
    fn click_prob(&self, cfg: &GeneratorConfig, user: usize, entity: usize, domain: usize, eps: f64) -> f64 {
        let inv = dot(&self.user_latent[user], &self.entity_latent[entity]);
        let spec = dot(&self.user_domain[user][domain], &self.entity_domain[entity][domain]);
        sigmoid(cfg.invariant_weight * inv + cfg.specific_weight[domain] * spec + eps + cfg.logit_offset)
    }

    /// Draws uniform impressions until one is accepted as a click.
    fn draw_click(&self, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, user: usize, domain: usize) -> usize {
        let n = self.entity_latent.len();
        loop {
            let entity = rng.gen_range(0..n);
            let eps = if cfg.noise > 0.0 {
                cfg.noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            if rng.gen::<f64>() < self.click_prob(cfg, user, entity, domain, eps) {
                return entity;
            }
        }
    }
}

/// Class-specific raw entity from latents; only the class's native fields are set.
fn raw_entity(
    class: EntityClass,
    latent: &[f64],
    schema: &Schema,
    probes: &BTreeMap<String, Vec<f64>>,
    centroids: &BTreeMap<String, Vec<Vec<f64>>>,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> RawEntity {
    let mut features = Features::new();
    for spec in schema.fields.iter().filter(|f| f.native_to(class)) {
        let value = match spec.kind {
            FieldKind::Numeric => {
                let p = &probes[&spec.name];
                let x = dot(p, latent) + noise * rng.sample::<f64, _>(StandardNormal);
                FieldValue::Num(x)
            }
            FieldKind::Categorical => {
                let j = argmax_dot(&centroids[&spec.name], latent);
                FieldValue::Cat(format!("{}_{j}", spec.name))
            }
        };
        features.insert(spec.name.clone(), value);
    }
    RawEntity {
        class: class.to_string(),
        features,
    }
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = gaussian_vec(rng, n, 1.0);
    let norm = dot(&v, &v).sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn category_cardinality(name: &str) -> usize {
    match name {
        "brand" => 32,
        "host" => 8,
        _ => 16,
    }
}

/// Builds the catalog, users and positive records.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    generate_with(cfg, true)
}

/// Same as [`generate`], optionally running shards serially.
pub fn generate_with(cfg: &GeneratorConfig, parallel: bool) -> Result<Dataset> {
    cfg.validate()?;
    let r = cfg.latent_dim;
    let k = cfg.domains;
    let coord_std = (r as f64).powf(-0.25);
    let mut rng = stream(cfg.seed, WORLD_STREAM);

    let schema = Schema::default();
    let map_std = (r as f64).sqrt().recip();
    let entity_maps: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|_| (0..r).map(|_| gaussian_vec(&mut rng, r, map_std)).collect())
        .collect();
    let user_maps: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|_| (0..r).map(|_| gaussian_vec(&mut rng, r, map_std)).collect())
        .collect();
    let mut probes = BTreeMap::new();
    let mut centroids = BTreeMap::new();
    for spec in &schema.fields {
        match spec.kind {
            FieldKind::Numeric => {
                let p: Vec<f64> = unit_vec(&mut rng, r).into_iter().map(|x| x / coord_std).collect();
                probes.insert(spec.name.clone(), p);
            }
            FieldKind::Categorical => {
                let c = (0..category_cardinality(&spec.name)).map(|_| unit_vec(&mut rng, r)).collect();
                centroids.insert(spec.name.clone(), c);
            }
        }
    }

    let mut entities = Vec::new();
    let mut world = World {
        entity_latent: Vec::new(),
        entity_domain: Vec::new(),
        user_latent: Vec::new(),
        user_domain: Vec::new(),
    };
    for class in EntityClass::ALL {
        for _ in 0..cfg.class_counts[class.index()] {
            let latent = gaussian_vec(&mut rng, r, coord_std);
            let domain_latent: Vec<Vec<f64>> = entity_maps.iter().map(|m| apply(m, &latent)).collect();
            let raw = raw_entity(class, &latent, &schema, &probes, &centroids, cfg.feature_noise, &mut rng);
            let (_, features) = unify(&raw, &schema)?;
            entities.push(Entity {
                id: entities.len() as u32,
                class,
                features,
                latent: latent.clone(),
                domain_latent: domain_latent.clone(),
            });
            world.entity_latent.push(latent);
            world.entity_domain.push(domain_latent);
        }
    }

    let segment_centroids: Vec<Vec<f64>> = (0..16).map(|_| unit_vec(&mut rng, r)).collect();
    let age_probe: Vec<f64> = unit_vec(&mut rng, r).into_iter().map(|x| x / coord_std).collect();
    let tier_probe: Vec<f64> = unit_vec(&mut rng, r).into_iter().map(|x| x / coord_std).collect();
    let mut users = Vec::with_capacity(cfg.users);
    for id in 0..cfg.users {
        let latent = gaussian_vec(&mut rng, r, coord_std);
        let domain_latent: Vec<Vec<f64>> = user_maps.iter().map(|m| apply(m, &latent)).collect();
        let activity: Vec<f64> = (0..k)
            .map(|_| (cfg.activity_spread * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        let age = bucketize(dot(&age_probe, &latent) + cfg.feature_noise * rng.sample::<f64, _>(StandardNormal), 6);
        let tier = bucketize(dot(&tier_probe, &latent) + cfg.feature_noise * rng.sample::<f64, _>(StandardNormal), 4);
        let profile = BTreeMap::from([
            ("age".to_string(), format!("age_{age}")),
            ("city_tier".to_string(), format!("tier_{tier}")),
            ("segment".to_string(), format!("seg_{}", argmax_dot(&segment_centroids, &latent))),
        ]);
        world.user_latent.push(latent.clone());
        world.user_domain.push(domain_latent.clone());
        users.push(User {
            context: UserContext {
                user_id: id as u32,
                profile,
                sequence: Vec::new(),
            },
            latent,
            domain_latent,
            activity,
        });
    }

    // Allocate (timestamp, user, domain) slots; contents are filled per shard.
    let mut alloc = stream(cfg.seed, ALLOC_STREAM);
    let mut slots: Vec<(usize, usize)> = Vec::new();
    for (domain, &count) in cfg.records_per_domain.iter().enumerate() {
        let weights: Vec<f64> = users.iter().map(|u| u.activity[domain]).collect();
        let dist = rand::distributions::WeightedIndex::new(&weights)
            .map_err(|e| Error::Config(format!("user activity weights: {e}")))?;
        for _ in 0..count {
            slots.push((dist.sample(&mut alloc), domain));
        }
    }
    slots.shuffle(&mut alloc);
    let mut per_user: Vec<Vec<(u64, usize)>> = vec![Vec::new(); cfg.users];
    for (ts, &(user, domain)) in slots.iter().enumerate() {
        per_user[user].push((ts as u64, domain));
    }

    let shard_job = |shard: usize| -> Vec<(usize, Vec<SeqItem>, Vec<(u64, usize, usize)>)> {
        let mut rng = stream(cfg.seed, SHARD_STREAM_BASE + shard as u64);
        let mut out = Vec::new();
        for user in (shard..cfg.users).step_by(cfg.shards) {
            let len = rng.gen_range(cfg.min_seq_len..=cfg.seq_len);
            let mut sequence = Vec::with_capacity(len);
            for _ in 0..len {
                let domain = sample_weighted(&mut rng, &users[user].activity);
                let e = world.draw_click(cfg, &mut rng, user, domain);
                sequence.push(SeqItem {
                    id: e as u32,
                    class: entities[e].class,
                });
            }
            let clicks = per_user[user]
                .iter()
                .map(|&(ts, domain)| (ts, domain, world.draw_click(cfg, &mut rng, user, domain)))
                .collect();
            out.push((user, sequence, clicks));
        }
        out
    };
    let shard_results: Vec<_> = if parallel {
        (0..cfg.shards).into_par_iter().map(shard_job).collect()
    } else {
        (0..cfg.shards).map(shard_job).collect()
    };

    let mut records = Vec::with_capacity(slots.len());
    for (user, sequence, clicks) in shard_results.into_iter().flatten() {
        users[user].context.sequence = sequence;
        for (ts, domain, e) in clicks {
            let entity = &entities[e];
            records.push(Record {
                user_id: user as u32,
                profile: users[user].context.profile.clone(),
                sequence: users[user].context.sequence.clone(),
                target: entity.id,
                target_class: entity.class,
                entity: entity.features.clone(),
                domain,
                label: 1,
                ts,
            });
        }
    }
    records.sort_by_key(|r| r.ts);

    Ok(Dataset {
        catalog: Catalog { schema, entities },
        users,
        records,
    })
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if t < w {
            return i;
        }
        t -= w;
    }
    weights.len() - 1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Earliest records train, latest records test.
    #[default]
    Time,
    /// Whole users go to one side.
    UserDisjoint,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub train_per_domain: Vec<usize>,
    pub test_per_domain: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Splits records into train and test; `seed` only matters for user-disjoint splits.
pub fn split(
    records: &[Record],
    ratio: f64,
    mode: SplitMode,
    domains: usize,
    seed: u64,
) -> Result<(Vec<Record>, Vec<Record>, SplitReport)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let (train, test): (Vec<Record>, Vec<Record>) = match mode {
        SplitMode::Time => {
            let mut sorted = records.to_vec();
            sorted.sort_by_key(|r| r.ts);
            let cut = (ratio * sorted.len() as f64).round() as usize;
            let test = sorted.split_off(cut);
            (sorted, test)
        }
        SplitMode::UserDisjoint => {
            let mut ids: Vec<u32> = records.iter().map(|r| r.user_id).collect::<BTreeSet<_>>().into_iter().collect();
            ids.shuffle(&mut stream(seed, 3));
            let cut = (ratio * ids.len() as f64).round() as usize;
            let train_users: BTreeSet<u32> = ids[..cut].iter().copied().collect();
            records.iter().cloned().partition(|r| train_users.contains(&r.user_id))
        }
    };
    let count = |rs: &[Record]| {
        let mut c = vec![0usize; domains];
        for r in rs {
            if r.domain < domains {
                c[r.domain] += 1;
            }
        }
        c
    };
    let mut report = SplitReport {
        train_per_domain: count(&train),
        test_per_domain: count(&test),
        warnings: Vec::new(),
    };
    for d in 0..domains {
        if report.train_per_domain[d] == 0 || report.test_per_domain[d] == 0 {
            let msg = format!(
                "domain {d} is empty on one side of the split (train {}, test {})",
                report.train_per_domain[d], report.test_per_domain[d]
            );
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
    }
    Ok((train, test, report))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Split dataset as laid out on disk by `gen-data`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub catalog: Catalog,
    pub users: Vec<User>,
    pub train: Vec<Record>,
    pub test: Vec<Record>,
    pub domains: usize,
}

impl SplitData {
    pub fn from_dataset(data: Dataset, cfg: &GeneratorConfig) -> Result<(Self, SplitReport)> {
        let (train, test, report) = split(&data.records, cfg.split_ratio, cfg.split_mode, cfg.domains, cfg.seed)?;
        Ok((
            Self {
                catalog: data.catalog,
                users: data.users,
                train,
                test,
                domains: cfg.domains,
            },
            report,
        ))
    }

    pub fn save(&self, dir: &Path, cfg: &GeneratorConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("generator.json"), serde_json::to_string_pretty(cfg)?)?;
        std::fs::write(dir.join("catalog.json"), serde_json::to_string(&self.catalog)?)?;
        write_jsonl(&dir.join("users.jsonl"), &self.users)?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: GeneratorConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("generator.json"))?)?;
        let catalog: Catalog = serde_json::from_str(&std::fs::read_to_string(dir.join("catalog.json"))?)?;
        Ok(Self {
            catalog,
            users: read_jsonl(&dir.join("users.jsonl"))?,
            train: read_jsonl(&dir.join("train.jsonl"))?,
            test: read_jsonl(&dir.join("test.jsonl"))?,
            domains: cfg.domains,
        })
    }
}
