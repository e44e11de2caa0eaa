//! Named parameter storage, tape binding, optimizers and the tensor file format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use unimatch_tape::{Gradients, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Glorot-uniform weight `[fan_in, fan_out]` and a zero bias row.
    pub fn init_dense(&mut self, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(format!("{prefix}.w"), Tensor::new(fan_in, fan_out, w).expect("sized"));
        self.insert(format!("{prefix}.b"), Tensor::zeros(1, fan_out));
    }

    pub fn init_mlp(&mut self, rng: &mut ChaCha8Rng, prefix: &str, dims: &[usize]) {
        for (i, pair) in dims.windows(2).enumerate() {
            self.init_dense(rng, &format!("{prefix}.l{i}"), pair[0], pair[1]);
        }
    }

    pub fn init_normal(&mut self, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize, std: f64) {
        let v = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.insert(name, Tensor::new(rows, cols, v).expect("sized"));
    }
}

/// A parameter bound on a tape, either whole or as a gathered subset of rows.
#[derive(Clone, Debug)]
struct Binding {
    name: String,
    var: Var,
    rows: Option<Vec<usize>>,
}

/// Lends parameters to one tape. With `trainable` off every leaf is a constant.
pub struct Binder<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    trainable: bool,
    whole: BTreeMap<String, Var>,
    bindings: Vec<Binding>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            whole: BTreeMap::new(),
            bindings: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.whole.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.tape.leaf(t, self.trainable)?;
        self.whole.insert(name.to_string(), v);
        self.bindings.push(Binding {
            name: name.to_string(),
            var: v,
            rows: None,
        });
        Ok(v)
    }

    /// Rows `indices` of a table. Only the distinct rows become a leaf, so the
    /// gradient stays sparse.
    pub fn gather(&mut self, name: &str, indices: &[usize]) -> Result<Var> {
        let table = self.store.get(name)?;
        let mut unique: Vec<usize> = indices.to_vec();
        unique.sort_unstable();
        unique.dedup();
        if let Some(&bad) = unique.iter().find(|&&r| r >= table.rows()) {
            return Err(Error::Contract(format!(
                "row {bad} out of range for {name:?} with {} rows",
                table.rows()
            )));
        }
        let sub = table.select_rows(&unique);
        let leaf = self.tape.leaf(sub, self.trainable)?;
        self.bindings.push(Binding {
            name: name.to_string(),
            var: leaf,
            rows: Some(unique.clone()),
        });
        let positions: Vec<usize> = indices
            .iter()
            .map(|i| unique.binary_search(i).expect("present"))
            .collect();
        Ok(self.tape.select_rows(leaf, &positions)?)
    }

    /// Parameter names bound so far.
    pub fn bound_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.bindings.iter().map(|b| b.name.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    /// Collects dense per-parameter gradients from a backward pass.
    pub fn collect(&self, grads: &Gradients) -> Result<GradMap> {
        let mut out = GradMap::default();
        for b in &self.bindings {
            let Some(g) = grads.get(b.var) else { continue };
            match &b.rows {
                None => out.add_dense(&b.name, g)?,
                Some(rows) => out.add_rows(&b.name, rows, g),
            }
        }
        Ok(out)
    }
}

/// Gradient of one parameter: dense, or a set of table rows.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Dense(Tensor),
    Rows(BTreeMap<usize, Vec<f64>>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap {
    pub grads: BTreeMap<String, ParamGrad>,
}

impl GradMap {
    fn add_dense(&mut self, name: &str, g: &Tensor) -> Result<()> {
        match self.grads.get_mut(name) {
            Some(ParamGrad::Dense(t)) => t.axpy(1.0, g)?,
            Some(ParamGrad::Rows(_)) => {
                return Err(Error::Contract(format!("{name:?} bound both whole and gathered")))
            }
            None => {
                self.grads.insert(name.to_string(), ParamGrad::Dense(g.clone()));
            }
        }
        Ok(())
    }

    fn add_rows(&mut self, name: &str, rows: &[usize], g: &Tensor) {
        let entry = self
            .grads
            .entry(name.to_string())
            .or_insert_with(|| ParamGrad::Rows(BTreeMap::new()));
        if let ParamGrad::Rows(map) = entry {
            for (i, &r) in rows.iter().enumerate() {
                let slot = map.entry(r).or_insert_with(|| vec![0.0; g.cols()]);
                for (s, v) in slot.iter_mut().zip(g.row_slice(i)) {
                    *s += v;
                }
            }
        }
    }

    /// Dense view of one gradient for a parameter of the given shape.
    pub fn dense(&self, name: &str, shape: [usize; 2]) -> Tensor {
        let mut t = Tensor::zeros(shape[0], shape[1]);
        match self.grads.get(name) {
            Some(ParamGrad::Dense(g)) => t = g.clone(),
            Some(ParamGrad::Rows(map)) => {
                for (&r, row) in map {
                    t.row_slice_mut(r).copy_from_slice(row);
                }
            }
            None => {}
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd
    }
}

/// Applies gradient steps; Adam keeps moment estimates per parameter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
        self.step += 1;
        for (name, g) in &grads.grads {
            let p = store.get_mut(name)?;
            match self.config {
                OptimizerConfig::Sgd => match g {
                    ParamGrad::Dense(t) => p.axpy(-lr, t)?,
                    ParamGrad::Rows(map) => {
                        for (&r, row) in map {
                            for (pv, gv) in p.row_slice_mut(r).iter_mut().zip(row) {
                                *pv -= lr * gv;
                            }
                        }
                    }
                },
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let shape = p.shape();
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (Tensor::zeros(shape[0], shape[1]), Tensor::zeros(shape[0], shape[1])));
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    let mut update = |idx: usize, gv: f64| {
                        let mi = beta1 * m.data()[idx] + (1.0 - beta1) * gv;
                        let vi = beta2 * v.data()[idx] + (1.0 - beta2) * gv * gv;
                        m.data_mut()[idx] = mi;
                        v.data_mut()[idx] = vi;
                        p.data_mut()[idx] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                    };
                    match g {
                        ParamGrad::Dense(t) => {
                            for (i, &gv) in t.data().iter().enumerate() {
                                update(i, gv);
                            }
                        }
                        ParamGrad::Rows(map) => {
                            for (&r, row) in map {
                                for (c, &gv) in row.iter().enumerate() {
                                    update(r * shape[1] + c, gv);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"UMTENSOR";

/// Writes a JSON header plus named tensors as little-endian `f64`.
///
/// Layout: magic, `u32` version, `u32` header length, header bytes, `u32`
/// tensor count, then per tensor `u32` name length, name, `u64` rows,
/// `u64` cols and the values.
pub fn write_tensor_file(path: &Path, version: u32, header: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path, version: u32) -> Result<(String, BTreeMap<String, Tensor>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{} is not a tensor file", path.display())));
    }
    let found = read_u32(&mut r)?;
    if found != version {
        return Err(Error::Format(format!("unsupported version {found}, expected {version}")));
    }
    let header = read_string(&mut r)?;
    let count = read_u32(&mut r)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = vec![0.0; rows * cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.insert(name, Tensor::new(rows, cols, data)?);
    }
    Ok((header, tensors))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 26 {
        return Err(Error::Format(format!("string length {n} is implausible")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gathered_rows_get_sparse_gradients() {
        let mut store = ParamStore::new();
        store.insert("t", Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let mut b = Binder::new(&store, true);
        let x = b.gather("t", &[2, 0, 2]).unwrap();
        let loss = b.tape.sum(x).unwrap();
        let g = b.tape.backward(loss).unwrap();
        let grads = b.collect(&g).unwrap();
        assert_eq!(
            grads.dense("t", [3, 1]),
            Tensor::from_rows(&[vec![1.0], vec![0.0], vec![2.0]]).unwrap()
        );
        let mut opt = Optimizer::new(OptimizerConfig::Sgd);
        opt.apply(&mut store, &grads, 0.5).unwrap();
        assert_eq!(store.get("t").unwrap().data(), &[0.5, 2.0, 2.0]);
    }

    #[test]
    fn frozen_binder_yields_no_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(2, 2));
        let mut b = Binder::new(&store, false);
        let w = b.param("w").unwrap();
        assert!(!b.tape.requires_grad(w));
    }

    #[test]
    fn tensor_file_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.init_normal(&mut rng, "a", 3, 4, 1.0);
        store.insert("b", Tensor::row(vec![f64::MIN_POSITIVE, -0.0, 1e308]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_tensor_file(&path, 1, "{\"k\":1}", store.tensors()).unwrap();
        let (header, back) = read_tensor_file(&path, 1).unwrap();
        assert_eq!(header, "{\"k\":1}");
        for (name, t) in store.iter() {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(&back[name]));
        }
        assert!(read_tensor_file(&path, 2).is_err());
    }
}
