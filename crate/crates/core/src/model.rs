//! Model configuration, parameter initialization and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unimatch_tape::{spectral_normalize, SpectralState, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{read_tensor_file, write_tensor_file, Binder, ParamStore};
use crate::synthdata::{FieldKind, Schema};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Number of auxiliary losses weighted by the uncertainty term.
pub const AUX_LOSSES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub domains: usize,
    pub embed_dim: usize,
    pub user_buckets: usize,
    pub entity_buckets: usize,
    pub feature_buckets: usize,
    pub max_seq_len: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub positional_encoding: bool,
    pub ad_hidden: Vec<usize>,
    pub expert_layers: Vec<usize>,
    pub tower_hidden: Vec<usize>,
    pub classifier_hidden: usize,
    pub projection_dim: usize,
    pub critic_hidden: Vec<usize>,
    pub user_fields: Vec<String>,
    pub entity_categorical: Vec<String>,
    pub entity_numeric: Vec<String>,
    pub init_seed: u64,
    /// Power iterations run once at initialization for spectral states.
    pub sn_warmup: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let schema = Schema::default();
        Self {
            domains: 4,
            embed_dim: 16,
            user_buckets: 8192,
            entity_buckets: 32768,
            feature_buckets: 1024,
            max_seq_len: 10,
            heads: 2,
            ffn_dim: 32,
            positional_encoding: true,
            ad_hidden: vec![64],
            expert_layers: vec![256, 128, 64],
            tower_hidden: vec![128, 64],
            classifier_hidden: 64,
            projection_dim: 64,
            critic_hidden: vec![128, 64],
            user_fields: vec!["age".into(), "city_tier".into(), "segment".into()],
            entity_categorical: schema.names(FieldKind::Categorical),
            entity_numeric: schema.names(FieldKind::Numeric),
            init_seed: 0,
            sn_warmup: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.domains == 0 || self.embed_dim == 0 || self.max_seq_len == 0 {
            return fail("domains, embed_dim and max_seq_len must be positive");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail("embed_dim must be a multiple of heads");
        }
        if self.expert_layers.is_empty() {
            return fail("expert_layers must not be empty");
        }
        if self.user_buckets == 0 || self.entity_buckets == 0 || self.feature_buckets == 0 {
            return fail("bucket counts must be positive");
        }
        Ok(())
    }

    /// Width of the concatenated representation bundle.
    pub fn repr_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// Width of expert outputs.
    pub fn expert_dim(&self) -> usize {
        *self.expert_layers.last().expect("validated")
    }

    pub fn ad_input_dim(&self) -> usize {
        (self.entity_categorical.len() + 1) * self.embed_dim + self.entity_numeric.len()
    }

    pub fn expert_dims(&self) -> Vec<usize> {
        std::iter::once(self.repr_dim()).chain(self.expert_layers.iter().copied()).collect()
    }

    pub fn tower_dims(&self) -> Vec<usize> {
        std::iter::once(3 * self.expert_dim())
            .chain(self.tower_hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect()
    }

    pub fn critic_dims(&self) -> Vec<usize> {
        std::iter::once(self.projection_dim)
            .chain(self.critic_hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect()
    }

    pub fn classifier_dims(&self) -> Vec<usize> {
        vec![self.expert_dim(), self.classifier_hidden, self.domains]
    }
}

/// Parameters of the shared classifier that are spectrally normalized.
pub const SN_WEIGHTS: [&str; 2] = ["rrl.cls_s.l0.w", "rrl.cls_s.l1.w"];

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub spectral: BTreeMap<String, SpectralState>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.embed_dim;
        let k = config.domains;
        let mut p = ParamStore::new();
        let emb_std = 0.1;
        p.init_normal(&mut rng, "emb.user", config.user_buckets + 1, d, emb_std);
        p.init_normal(&mut rng, "emb.entity", config.entity_buckets + 1, d, emb_std);
        p.init_normal(&mut rng, "emb.feature", config.feature_buckets + 1, d, emb_std);
        p.init_normal(&mut rng, "emb.class", 5, d, emb_std);
        p.init_normal(&mut rng, "emb.domain", k, d, emb_std);

        for name in ["wq", "wk", "wv", "wo"] {
            p.init_dense(&mut rng, &format!("enc.attn.{name}"), d, d);
        }
        for ln in ["enc.ln1", "enc.ln2"] {
            p.insert(format!("{ln}.gamma"), Tensor::ones(1, d));
            p.insert(format!("{ln}.beta"), Tensor::zeros(1, d));
        }
        p.init_dense(&mut rng, "enc.ffn.l0", d, config.ffn_dim);
        p.init_dense(&mut rng, "enc.ffn.l1", config.ffn_dim, d);
        let ad_dims: Vec<usize> = std::iter::once(config.ad_input_dim())
            .chain(config.ad_hidden.iter().copied())
            .chain(std::iter::once(d))
            .collect();
        p.init_mlp(&mut rng, "enc.ad", &ad_dims);

        p.init_mlp(&mut rng, "bb.shared", &config.expert_dims());
        for i in 0..k {
            p.init_mlp(&mut rng, &format!("bb.specific{i}"), &config.expert_dims());
            p.init_normal(&mut rng, &format!("bb.gate{i}"), d, 2, 0.1);
            p.init_mlp(&mut rng, &format!("bb.tower{i}"), &config.tower_dims());
        }

        p.init_mlp(&mut rng, "rrl.cls_s", &config.classifier_dims());
        p.init_mlp(&mut rng, "rrl.cls_d", &config.classifier_dims());
        for t in 0..k {
            p.init_dense(&mut rng, &format!("rrl.proj{t}"), config.expert_dim(), config.projection_dim);
        }
        for t in 0..k.saturating_sub(1) {
            p.init_mlp(&mut rng, &format!("rrl.critic{t}"), &config.critic_dims());
        }
        p.insert("uwl.log_var", Tensor::zeros(1, AUX_LOSSES));

        let mut spectral = BTreeMap::new();
        for (i, name) in SN_WEIGHTS.iter().enumerate() {
            let w = p.get(name)?;
            let mut state = SpectralState::new(w.rows(), w.cols(), config.init_seed ^ (0x5EED + i as u64));
            state.power_iterate(w, config.sn_warmup.max(1))?;
            spectral.insert(name.to_string(), state);
        }
        Ok(Self {
            config,
            params: p,
            spectral,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.params.tensors().clone();
        for (name, s) in &self.spectral {
            tensors.insert(format!("sn:{name}:u"), Tensor::row(s.u.clone()));
            tensors.insert(format!("sn:{name}:v"), Tensor::row(s.v.clone()));
        }
        let header = serde_json::to_string(&self.config)?;
        write_tensor_file(path, CHECKPOINT_VERSION, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut tensors) = read_tensor_file(path, CHECKPOINT_VERSION)?;
        let config: ModelConfig = serde_json::from_str(&header)?;
        config.validate()?;
        let mut spectral = BTreeMap::new();
        for name in SN_WEIGHTS {
            let u = tensors.remove(&format!("sn:{name}:u"));
            let v = tensors.remove(&format!("sn:{name}:v"));
            match (u, v) {
                (Some(u), Some(v)) => {
                    spectral.insert(
                        name.to_string(),
                        SpectralState {
                            u: u.into_data(),
                            v: v.into_data(),
                            n_iters: 1,
                        },
                    );
                }
                _ => return Err(Error::Format(format!("checkpoint lacks spectral state for {name}"))),
            }
        }
        Ok(Self {
            config,
            params: ParamStore::from_tensors(tensors),
            spectral,
        })
    }
}

/// Spectrally normalized view of a shared-classifier weight.
pub fn normalized(b: &mut Binder<'_>, spectral: &mut BTreeMap<String, SpectralState>, name: &str) -> Result<Var> {
    let w = b.param(name)?;
    let state = spectral
        .get_mut(name)
        .ok_or_else(|| Error::Contract(format!("no spectral state for {name:?}")))?;
    Ok(spectral_normalize(&mut b.tape, w, state)?.weight)
}

/// `x W + b` for the parameters under `prefix`.
pub fn dense(b: &mut Binder<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = b.param(&format!("{prefix}.w"))?;
    let bias = b.param(&format!("{prefix}.b"))?;
    Ok(b.tape.linear(x, w, bias)?)
}

/// Stacked dense layers with ReLU between them; `relu_last` also activates the output.
pub fn mlp(b: &mut Binder<'_>, prefix: &str, layers: usize, x: Var, relu_last: bool) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = dense(b, &format!("{prefix}.l{i}"), h)?;
        if i + 1 < layers || relu_last {
            h = b.tape.relu(h)?;
        }
    }
    Ok(h)
}

/// FNV-1a over the key bytes, reduced to `buckets`.
pub fn bucket(key: &str, buckets: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in key.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % buckets as u64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            entity_buckets: 64,
            user_buckets: 32,
            feature_buckets: 16,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(m, back);
        let path2 = dir.path().join("m2.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn layout_follows_config() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.repr_dim(), 64);
        assert_eq!(cfg.expert_dims(), vec![64, 256, 128, 64]);
        assert_eq!(cfg.tower_dims(), vec![192, 128, 64, 1]);
        assert_eq!(cfg.critic_dims(), vec![64, 128, 64, 1]);
    }

    #[test]
    fn bucket_is_stable_and_bounded() {
        assert_eq!(bucket("e42", 1), 0);
        assert_eq!(bucket("abc", 1000), bucket("abc", 1000));
        assert!(bucket("xyz", 7) < 7);
    }
}
