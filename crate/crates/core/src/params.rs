//! Named parameter and buffer storage for one model component.

use sha2::{Digest, Sha256};

use crate::graph::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// Learnable weight.
    Param,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    pub kind: EntryKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

/// Tape handles for the parameters of one store in one forward pass.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound onto the tape")
    }

    /// Leaves of the learnable entries, in entry order.
    pub fn params(&self) -> Vec<Var> {
        self.vars.iter().flatten().copied().collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<Entry>) -> Self {
        Self { entries }
    }

    fn push(&mut self, name: String, value: Tensor, kind: EntryKind) -> ParamId {
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate entry {name}");
        self.entries.push(Entry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, EntryKind::Param)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, EntryKind::Buffer)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn num_params(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == EntryKind::Param).map(|e| e.value.len()).sum()
    }

    /// Values of the learnable entries, in entry order.
    pub fn param_values(&self) -> Vec<Tensor> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Param).map(|e| e.value.clone()).collect()
    }

    /// Overwrites the learnable entries in entry order.
    pub fn set_param_values(&mut self, values: &[Tensor]) {
        let params = self.entries.iter_mut().filter(|e| e.kind == EntryKind::Param);
        for (e, v) in params.zip(values) {
            debug_assert_eq!(e.value.shape(), v.shape());
            e.value = v.clone();
        }
    }

    /// Places every learnable entry on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| (e.kind == EntryKind::Param).then(|| tape.leaf(e.value.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// Gradients aligned with `entries()`; `None` for buffers and for
    /// parameters that did not take part in the loss.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Option<Tensor>> {
        bound.vars.iter().map(|v| v.and_then(|v| grads.get(v).cloned())).collect()
    }

    /// SHA-256 over names, shapes and exact bit patterns of learnable
    /// entries only.
    pub fn param_digest(&self) -> String {
        self.digest_filtered(|e| e.kind == EntryKind::Param)
    }

    /// SHA-256 over every entry, buffers included.
    pub fn digest(&self) -> String {
        self.digest_filtered(|_| true)
    }

    fn digest_filtered(&self, keep: impl Fn(&Entry) -> bool) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| keep(e)) {
            h.update((e.name.len() as u64).to_le_bytes());
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Per-entry digests, keyed by name, for diffing which entries changed.
    pub fn entry_digests(&self) -> Vec<(String, String)> {
        self.entries
            .iter()
            .map(|e| {
                let mut h = Sha256::new();
                for v in e.value.data() {
                    h.update(v.to_le_bytes());
                }
                (e.name.clone(), hex::encode(h.finalize()))
            })
            .collect()
    }
}
