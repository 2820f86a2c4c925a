//! Pointwise-convolution teacher and student networks.
//!
//! A block is `conv1x1 -> BN -> relu -> conv1x1 -> BN`, plus a skip that is
//! the identity when widths match and zero-padded otherwise, then relu and
//! a 2x2 average pool. A hook sees every block output after pooling and
//! may replace it before the next block consumes it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::layers::{kaiming_uniform, BatchNormLayer, LayerMode};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub role: Role,
    pub block_channels: Vec<usize>,
    /// `(C, H, W)` of one input image.
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    /// Width of an optional hidden FC layer in the classifier head.
    pub head_hidden: Option<usize>,
}

impl NetworkSpec {
    pub fn teacher() -> Self {
        Self {
            role: Role::Teacher,
            block_channels: vec![8, 16, 32, 64],
            input: (3, 32, 32),
            num_classes: 7,
            head_hidden: Some(4096),
        }
    }

    pub fn student() -> Self {
        Self {
            role: Role::Student,
            block_channels: vec![4, 8, 16, 32],
            input: (3, 32, 32),
            num_classes: 7,
            head_hidden: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        let n = self.block_channels.len();
        if n == 0 || self.block_channels.contains(&0) || c == 0 || self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!("degenerate network spec {self:?}")));
        }
        if !h.is_power_of_two() || !w.is_power_of_two() || h >> n == 0 || w >> n == 0 {
            return Err(Error::InvalidArgument(format!("input {h}x{w} cannot be halved {n} times into powers of two")));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::InvalidArgument("head hidden width must be positive".into()));
        }
        Ok(())
    }

    /// `(C_i, H_i, W_i)` of every block output.
    pub fn block_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (_, h, w) = self.input;
        self.block_channels.iter().enumerate().map(|(i, &c)| (c, h >> (i + 1), w >> (i + 1))).collect()
    }

    pub fn last_channels(&self) -> usize {
        *self.block_channels.last().expect("validated")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub c_in: usize,
    pub c_out: usize,
    pub conv1: ParamId,
    pub bn1: BatchNormLayer,
    pub conv2: ParamId,
    pub bn2: BatchNormLayer,
}

impl Block {
    pub fn register(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            c_in,
            c_out,
            conv1: store.add_param(format!("{prefix}.conv1"), kaiming_uniform(rng, c_out, c_in)),
            bn1: BatchNormLayer::register(store, &format!("{prefix}.bn1"), c_out),
            conv2: store.add_param(format!("{prefix}.conv2"), kaiming_uniform(rng, c_out, c_out)),
            bn2: BatchNormLayer::register(store, &format!("{prefix}.bn2"), c_out),
        }
    }

    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        c_in * c_out + c_out * c_out + 2 * BatchNormLayer::num_params(c_out)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        bound: &Bound,
        x: Var,
        mode: LayerMode,
    ) -> Result<Var> {
        let h = tape.conv1x1(x, bound.var(self.conv1))?;
        let h = self.bn1.forward(tape, store, bound, h, mode)?;
        let h = tape.relu(h);
        let h = tape.conv1x1(h, bound.var(self.conv2))?;
        let h = self.bn2.forward(tape, store, bound, h, mode)?;
        let skip = if self.c_in == self.c_out { x } else { tape.pad_channels(x, self.c_out)? };
        let y = tape.add(h, skip)?;
        let y = tape.relu(y);
        let (_, _, hh, ww) = tape.value(y).dims4("block")?;
        tape.avg_pool_to(y, (hh / 2, ww / 2))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub hidden: Option<(ParamId, ParamId)>,
    pub w: ParamId,
    pub b: ParamId,
}

/// A network and the store holding its weights and running statistics.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub store: ParamStore,
    pub blocks: Vec<Block>,
    pub head: Head,
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// What the hook returned for each block.
    pub block_outputs: Vec<Var>,
}

/// Called after every block with `(block index, tape, pooled output)`;
/// returns the feature passed on to the next block.
pub type Hook<'a> = dyn FnMut(usize, &mut Tape, Var) -> Result<Var> + 'a;

impl Network {
    pub fn new(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut c_in = spec.input.0;
        let mut blocks = Vec::new();
        for (i, &c) in spec.block_channels.iter().enumerate() {
            blocks.push(Block::register(&mut store, &format!("block{i}"), c_in, c, rng));
            c_in = c;
        }
        let hidden = spec.head_hidden.map(|hdim| {
            let w = store.add_param("head.hidden.w", kaiming_uniform(rng, hdim, c_in));
            let b = store.add_param("head.hidden.b", Tensor::zeros(&[hdim]));
            c_in = hdim;
            (w, b)
        });
        let bound = 1.0 / (c_in as f64).sqrt();
        let w =
            store.add_param("head.w", Tensor::from_fn(&[spec.num_classes, c_in], |_| rng.random_range(-bound..bound)));
        let b = store.add_param("head.b", Tensor::zeros(&[spec.num_classes]));
        Ok(Self { spec, store, blocks, head: Head { hidden, w, b } })
    }

    pub fn param_count(spec: &NetworkSpec) -> usize {
        let mut c_in = spec.input.0;
        let mut total = 0;
        for &c in &spec.block_channels {
            total += Block::param_count(c_in, c);
            c_in = c;
        }
        if let Some(h) = spec.head_hidden {
            total += c_in * h + h;
            c_in = h;
        }
        total + c_in * spec.num_classes + spec.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Full forward pass; `hook` may replace each block's output.
    pub fn forward_with(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mode: LayerMode,
        hook: &mut Hook<'_>,
    ) -> Result<ForwardOutput> {
        let (b, c, h, w) = tape.value(x).dims4("network")?;
        if (c, h, w) != self.spec.input {
            return Err(Error::shape(
                "network",
                format!("input [{c}, {h}, {w}] for a network expecting {:?}", self.spec.input),
            ));
        }
        let mut feature = x;
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            feature = block.forward(tape, &mut self.store, bound, feature, mode)?;
            feature = hook(i, tape, feature)?;
            block_outputs.push(feature);
        }
        let pooled = tape.avg_pool_to(feature, (1, 1))?;
        let mut z = tape.reshape(pooled, &[b, self.spec.last_channels()])?;
        if let Some((hw, hb)) = self.head.hidden {
            z = tape.linear(z, bound.var(hw), Some(bound.var(hb)))?;
            z = tape.relu(z);
        }
        let logits = tape.linear(z, bound.var(self.head.w), Some(bound.var(self.head.b)))?;
        Ok(ForwardOutput { logits, block_outputs })
    }

    pub fn forward(&mut self, tape: &mut Tape, bound: &Bound, x: Var, mode: LayerMode) -> Result<ForwardOutput> {
        self.forward_with(tape, bound, x, mode, &mut |_, _, f| Ok(f))
    }

    /// Eval-mode logits for a batch of images, without gradients.
    pub fn predict_logits(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bound, x, LayerMode::EVAL)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Row-wise argmax of `[B, K]` logits; the lowest index wins ties.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2("argmax")?;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

/// Fraction of predictions equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy over {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_count_matches_tally() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for (ci, co) in [(3, 8), (8, 8), (16, 32)] {
            let mut store = ParamStore::new();
            Block::register(&mut store, "b", ci, co, &mut r);
            let tally = ci * co + co * co + 2 * co + 2 * co;
            assert_eq!(store.num_params(), tally);
            assert_eq!(Block::param_count(ci, co), tally);
        }
    }

    #[test]
    fn zero_convs_eval_pass_skip_through() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = Block::register(&mut store, "b", 2, 2, &mut r);
        *store.get_mut(block.conv1) = Tensor::zeros(&[2, 2]);
        *store.get_mut(block.conv2) = Tensor::zeros(&[2, 2]);
        let input = Tensor::from_fn(&[1, 2, 4, 4], |_| r.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = block.forward(&mut tape, &mut store, &bound, x, LayerMode::EVAL).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 2, 2, 2]);
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            acc += input.data()[c * 16 + (2 * i + di) * 4 + 2 * j + dj].max(0.0);
                        }
                    }
                    assert!((out.data()[c * 4 + i * 2 + j] - acc / 4.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn spec_shapes_and_counts() {
        let t = NetworkSpec::teacher();
        assert_eq!(t.block_shapes(), vec![(8, 16, 16), (16, 8, 8), (32, 4, 4), (64, 2, 2)]);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for spec in [NetworkSpec::teacher(), NetworkSpec::student()] {
            let net = Network::new(spec.clone(), &mut r).unwrap();
            assert_eq!(net.num_params(), Network::param_count(&spec));
        }
        let mut bad = NetworkSpec::student();
        bad.input = (3, 8, 8);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_shapes() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::new(NetworkSpec::student(), &mut r).unwrap();
        let mut tape = Tape::new();
        let bound = net.store.bind(&mut tape, true);
        let x = tape.constant(Tensor::from_fn(&[2, 3, 32, 32], |_| r.random_range(0.0..1.0)));
        let out = net.forward(&mut tape, &bound, x, LayerMode::TRAIN).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[2, 7]);
        let shapes: Vec<_> = out.block_outputs.iter().map(|v| tape.value(*v).shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 4, 16, 16], vec![2, 8, 8, 8], vec![2, 16, 4, 4], vec![2, 32, 2, 2]]);
    }

    #[test]
    fn argmax_ties_and_accuracy() {
        let l = Tensor::new(vec![3, 3], vec![1.0, 1.0, 1.0, 0.0, 2.0, 2.0, 5.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&l).unwrap(), vec![0, 1, 0]);
        let preds = [0, 1, 2, 3, 4, 5, 6, 0, 1, 2];
        let labels = [0, 1, 2, 0, 0, 5, 6, 1, 1, 3];
        // hand count: positions 0,1,2,5,6,8 agree
        assert_eq!(accuracy(&preds, &labels).unwrap(), 0.6);
        assert!(accuracy(&[], &[]).is_err());
    }
}
