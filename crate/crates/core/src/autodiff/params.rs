//! Named parameter storage with Adam state and checkpointing. Entries keep
//! insertion order so optimizer sweeps and serialization are deterministic.
//! Checkpoints are a JSON table plus one tensor file per slot; round-trips
//! are bit-exact, and Adam moments are saved so resumed training continues
//! the exact trajectory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{read_tensor, write_tensor, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar = f32> {
    entries: Vec<ParamEntry<S>>,
    index: BTreeMap<String, usize>,
    pub step_count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let dims = value.dims().to_vec();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(&dims),
            m: Tensor::zeros(&dims),
            v: Tensor::zeros(&dims),
        });
    }

    fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn value(&self, name: &str) -> &Tensor<S> {
        &self.entries[self.idx(name)].value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor<S> {
        let i = self.idx(name);
        &mut self.entries[i].value
    }

    pub fn grad(&self, name: &str) -> &Tensor<S> {
        &self.entries[self.idx(name)].grad
    }

    pub fn add_grad(&mut self, name: &str, g: &Tensor<S>) {
        let i = self.idx(name);
        let e = &mut self.entries[i];
        assert_eq!(e.value.dims(), g.dims(), "gradient shape for {name}");
        for (d, &x) in e.grad.data_mut().iter_mut().zip(g.data()) {
            *d += x;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(S::ZERO);
        }
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn grad_sup_norm(&self, name: &str) -> f64 {
        self.grad(name)
            .data()
            .iter()
            .map(|g| g.to_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn grads_all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.grad.all_finite())
    }

    /// One Adam update from the accumulated gradients. Bias correction uses
    /// the store-level step counter, which this call increments.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let one_m_b1 = S::from_f64(1.0 - cfg.beta1);
        let one_m_b2 = S::from_f64(1.0 - cfg.beta2);
        let corr1 = S::from_f64(1.0 / (1.0 - cfg.beta1.powi(t as i32)));
        let corr2 = S::from_f64(1.0 / (1.0 - cfg.beta2.powi(t as i32)));
        let lr = S::from_f64(cfg.lr);
        let eps = S::from_f64(cfg.eps);
        for e in &mut self.entries {
            let (vd, gd, md, vvd) = (
                e.value.data_mut(),
                e.grad.data(),
                e.m.data_mut(),
                e.v.data_mut(),
            );
            for i in 0..vd.len() {
                let g = gd[i];
                md[i] = b1 * md[i] + one_m_b1 * g;
                vvd[i] = b2 * vvd[i] + one_m_b2 * g * g;
                let mhat = md[i] * corr1;
                let vhat = vvd[i] * corr2;
                vd[i] = vd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn convert<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(&e.name, e.value.convert::<T>());
            let i = out.idx(&e.name);
            out.entries[i].m = e.m.convert::<T>();
            out.entries[i].v = e.v.convert::<T>();
        }
        out.step_count = self.step_count;
        out
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step_count: usize,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    dims: Vec<usize>,
}

pub const CHECKPOINT_META: &str = "checkpoint.json";

impl<S: Scalar> ParamStore<S> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CheckpointMeta {
            step_count: self.step_count,
            params: self
                .entries
                .iter()
                .map(|e| ParamMeta {
                    name: e.name.clone(),
                    dims: e.value.dims().to_vec(),
                })
                .collect(),
        };
        let meta_path = dir.join(CHECKPOINT_META);
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json {
            path: meta_path.display().to_string(),
            source: e,
        })?;
        fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
        for e in &self.entries {
            write_tensor(dir.join(format!("{}.value.lt3d", e.name)), &e.value)?;
            write_tensor(dir.join(format!("{}.m.lt3d", e.name)), &e.m)?;
            write_tensor(dir.join(format!("{}.v.lt3d", e.name)), &e.v)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<ParamStore<S>> {
        let dir = dir.as_ref();
        let meta_path = dir.join(CHECKPOINT_META);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: meta_path.display().to_string(),
            source: e,
        })?;
        let mut store = ParamStore::new();
        for p in &meta.params {
            let value: Tensor<S> = read_tensor(dir.join(format!("{}.value.lt3d", p.name)))?;
            if value.dims() != p.dims.as_slice() {
                return Err(Error::Checkpoint {
                    path: dir.display().to_string(),
                    reason: format!(
                        "{} has dims {:?}, meta says {:?}",
                        p.name,
                        value.dims(),
                        p.dims
                    ),
                });
            }
            store.insert(&p.name, value);
            let i = store.idx(&p.name);
            store.entries[i].m = read_tensor(dir.join(format!("{}.m.lt3d", p.name)))?;
            store.entries[i].v = read_tensor(dir.join(format!("{}.v.lt3d", p.name)))?;
            if store.entries[i].m.dims() != p.dims.as_slice()
                || store.entries[i].v.dims() != p.dims.as_slice()
            {
                return Err(Error::Checkpoint {
                    path: dir.display().to_string(),
                    reason: format!("{} moment dims mismatch", p.name),
                });
            }
        }
        store.step_count = meta.step_count;
        Ok(store)
    }
}

/// He-style normal init for a linear layer: weight [fan_in, out], bias zero.
pub fn init_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    w_name: &str,
    b_name: &str,
    fan_in: usize,
    out: usize,
    rng: &mut crate::tensorio::Rng,
) {
    let std = (2.0 / fan_in as f64).sqrt();
    let data: Vec<S> = (0..fan_in * out)
        .map(|_| S::from_f64(rng.normal() * std))
        .collect();
    store.insert(w_name, Tensor::from_vec(&[fan_in, out], data));
    store.insert(b_name, Tensor::zeros(&[out]));
}

/// Zero init: used where the residual path must vanish at step zero.
pub fn init_linear_zero<S: Scalar>(
    store: &mut ParamStore<S>,
    w_name: &str,
    b_name: &str,
    fan_in: usize,
    out: usize,
) {
    store.insert(w_name, Tensor::zeros(&[fan_in, out]));
    store.insert(b_name, Tensor::zeros(&[out]));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::Rng;

    #[test]
    fn adam_single_step_hand_oracle() {
        // p = 1, g = 0.5, lr = 0.1: m = 0.05, v = 2.5e-4, mhat = 0.5,
        // vhat = 0.25, p' = 1 - 0.1 * 0.5 / (0.5 + 1e-8)
        let mut store = ParamStore::<f64>::new();
        store.insert("p", Tensor::scalar(1.0));
        store.add_grad("p", &Tensor::scalar(0.5));
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        store.adam_step(&cfg);
        let expect = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((store.value("p").data()[0] - expect).abs() < 1e-12);
        assert_eq!(store.step_count, 1);
        assert!((store.entries()[0].m.data()[0] - 0.05).abs() < 1e-15);
        assert!((store.entries()[0].v.data()[0] - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let mut rng = Rng::new(17, 0);
        let mut store = ParamStore::<f32>::new();
        init_linear(&mut store, "layer.w", "layer.b", 8, 4, &mut rng);
        init_linear_zero(&mut store, "res.w", "res.b", 4, 4);
        // run a couple of noisy steps so moments are nonzero
        for _ in 0..3 {
            store.zero_grads();
            for name in store.names() {
                let dims = store.value(&name).dims().to_vec();
                let n: usize = dims.iter().product();
                let g: Vec<f32> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect();
                store.add_grad(&name, &Tensor::from_vec(&dims, g));
            }
            store.adam_step(&AdamConfig::default());
        }
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        let loaded = ParamStore::<f32>::load(dir.path()).unwrap();
        assert_eq!(loaded.step_count, store.step_count);
        assert_eq!(loaded.names(), store.names());
        for (a, b) in store.entries().iter().zip(loaded.entries()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.m.data().iter().zip(b.m.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.v.data().iter().zip(b.v.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn resumed_store_continues_identically() {
        let mut rng = Rng::new(23, 0);
        let mut store = ParamStore::<f32>::new();
        init_linear(&mut store, "w", "b", 4, 3, &mut rng);
        let fixed_grad: Vec<(String, Tensor<f32>)> = store
            .names()
            .into_iter()
            .map(|n| {
                let dims = store.value(&n).dims().to_vec();
                let count: usize = dims.iter().product();
                let g: Vec<f32> = (0..count).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect();
                (n, Tensor::from_vec(&dims, g))
            })
            .collect();
        let step = |s: &mut ParamStore<f32>| {
            s.zero_grads();
            for (n, g) in &fixed_grad {
                s.add_grad(n, g);
            }
            s.adam_step(&AdamConfig::default());
        };
        step(&mut store);
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        step(&mut store);

        let mut resumed = ParamStore::<f32>::load(dir.path()).unwrap();
        step(&mut resumed);
        for (a, b) in store.entries().iter().zip(resumed.entries()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{} diverged after resume", a.name);
            }
        }
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_insert_faults() {
        let mut store = ParamStore::<f32>::new();
        store.insert("x", Tensor::scalar(1.0));
        store.insert("x", Tensor::scalar(2.0));
    }

    #[test]
    fn zero_init_layer_is_all_zero() {
        let mut store = ParamStore::<f32>::new();
        init_linear_zero(&mut store, "w", "b", 5, 7);
        assert!(store.value("w").data().iter().all(|&x| x == 0.0));
        assert!(store.value("b").data().iter().all(|&x| x == 0.0));
    }
}
