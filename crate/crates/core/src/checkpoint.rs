//! Named parameter stores and optimizer states in one container file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{sha256, Container};
use crate::error::{Error, Result};
use crate::optim::{Adam, Sgd};
use crate::params::{Entry, EntryKind, ParamStore};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    /// Free-form description: kind, network specs, epoch, config, RNG state.
    pub meta: serde_json::Value,
    pub stores: Vec<(String, ParamStore)>,
    pub sgd: Vec<(String, Sgd)>,
    pub adam: Vec<(String, Adam)>,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    name: String,
    entries: Vec<(String, EntryKind)>,
}

#[derive(Serialize, Deserialize)]
struct SgdHeader {
    name: String,
    momentum: f64,
    weight_decay: f64,
    steps: u64,
    buffers: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    name: String,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    buffers: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    stores: Vec<StoreHeader>,
    sgd: Vec<SgdHeader>,
    adam: Vec<AdamHeader>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, ..Self::default() }
    }

    pub fn store(&self, name: &str) -> Result<&ParamStore> {
        self.stores
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Format(format!("checkpoint has no store `{name}`")))
    }

    pub fn has_store(&self, name: &str) -> bool {
        self.stores.iter().any(|(n, _)| n == name)
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = Header {
            meta: self.meta.clone(),
            stores: self
                .stores
                .iter()
                .map(|(name, s)| StoreHeader {
                    name: name.clone(),
                    entries: s.entries().iter().map(|e| (e.name.clone(), e.kind)).collect(),
                })
                .collect(),
            sgd: self
                .sgd
                .iter()
                .map(|(name, o)| SgdHeader {
                    name: name.clone(),
                    momentum: o.momentum,
                    weight_decay: o.weight_decay,
                    steps: o.steps,
                    buffers: o.velocity.len(),
                })
                .collect(),
            adam: self
                .adam
                .iter()
                .map(|(name, o)| AdamHeader {
                    name: name.clone(),
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    steps: o.steps,
                    buffers: o.m.len(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut c = Container::new(sha256(json.as_bytes()), json);
        for (name, s) in &self.stores {
            for e in s.entries() {
                c.push_f64(format!("store/{name}/{}", e.name), e.value.clone());
            }
        }
        for (name, o) in &self.sgd {
            for (i, v) in o.velocity.iter().enumerate() {
                c.push_f64(format!("sgd/{name}/velocity/{i}"), v.clone());
            }
        }
        for (name, o) in &self.adam {
            for (i, (m, v)) in o.m.iter().zip(&o.v).enumerate() {
                c.push_f64(format!("adam/{name}/m/{i}"), m.clone());
                c.push_f64(format!("adam/{name}/v/{i}"), v.clone());
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let header: Header =
            serde_json::from_str(&c.metadata).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut out = Checkpoint::new(header.meta);
        for sh in header.stores {
            let entries = sh
                .entries
                .into_iter()
                .map(|(entry, kind)| {
                    let value = c.f64(&format!("store/{}/{entry}", sh.name))?.clone();
                    Ok(Entry { name: entry, value, kind })
                })
                .collect::<Result<Vec<_>>>()?;
            out.stores.push((sh.name, ParamStore::from_entries(entries)));
        }
        for h in header.sgd {
            let velocity = (0..h.buffers)
                .map(|i| c.f64(&format!("sgd/{}/velocity/{i}", h.name)).cloned())
                .collect::<Result<Vec<_>>>()?;
            let opt = Sgd { momentum: h.momentum, weight_decay: h.weight_decay, velocity, steps: h.steps };
            out.sgd.push((h.name, opt));
        }
        for h in header.adam {
            let m = (0..h.buffers)
                .map(|i| c.f64(&format!("adam/{}/m/{i}", h.name)).cloned())
                .collect::<Result<Vec<_>>>()?;
            let v = (0..h.buffers)
                .map(|i| c.f64(&format!("adam/{}/v/{i}", h.name)).cloned())
                .collect::<Result<Vec<_>>>()?;
            let opt = Adam { beta1: h.beta1, beta2: h.beta2, eps: h.eps, m, v, steps: h.steps };
            out.adam.push((h.name, opt));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// SHA-256 (hex) of the serialised checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(sha256(&self.to_bytes()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut store = ParamStore::new();
        store.add_param("w", Tensor::new(vec![2, 2], vec![0.1, -0.2, 1e-300, 7.0]).unwrap());
        store.add_buffer("running_mean", Tensor::full(&[2], 0.5));
        let mut sgd = Sgd::new(&store, 0.9, 5e-4);
        sgd.step(&mut store, &[Some(Tensor::full(&[2, 2], 0.3)), None], 0.1).unwrap();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Some(Tensor::full(&[2, 2], -0.3)), None], 0.01).unwrap();
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "test", "epoch": 3, "x": 0.1}));
        ck.stores.push(("net".into(), store));
        ck.sgd.push(("net".into(), sgd));
        ck.adam.push(("net".into(), adam));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.store("other").is_err());
    }
}
