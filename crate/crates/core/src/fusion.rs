//! Phase fusion across blocks, channel attention and student-to-teacher
//! feature mapping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::graph::Var;
use crate::layers::kaiming_uniform;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const ACTIVATION_REDUCTION: usize = 4;
pub const MAPPING_REDUCTION: usize = 4;

/// Pools every `[B, C_i, H_i, W_i]` stack to the last (smallest) spatial
/// size and concatenates along channels in block order.
pub fn fuse(tape: &mut Tape, phases: &[Var]) -> Result<Var> {
    let last = *phases.last().ok_or_else(|| Error::shape("fuse", "no phase stacks"))?;
    let (_, _, h, w) = tape.value(last).dims4("fuse")?;
    let mut pooled = Vec::with_capacity(phases.len());
    for &p in phases {
        let (_, _, ph, pw) = tape.value(p).dims4("fuse")?;
        pooled.push(if (ph, pw) == (h, w) { p } else { tape.avg_pool_to(p, (h, w))? });
    }
    if pooled.len() == 1 {
        return Ok(pooled[0]);
    }
    tape.concat_channels(&pooled)
}

/// Channel ranges `[start, end)` of each block inside a fused stack.
pub fn block_offsets(channels: &[usize]) -> Vec<(usize, usize)> {
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let r = (start, start + c);
            start += c;
            r
        })
        .collect()
}

/// Spatial mean of each channel: `[B, M, H, W] -> [B, M]`.
pub fn squeeze(tape: &mut Tape, fused: Var) -> Result<Var> {
    let (b, m, _, _) = tape.value(fused).dims4("squeeze")?;
    let pooled = tape.avg_pool_to(fused, (1, 1))?;
    tape.reshape(pooled, &[b, m])
}

/// Scales channel `m` by `s[m]` (or `s[b, m]`) over every spatial position.
pub fn activate(tape: &mut Tape, fused: Var, s: Var) -> Result<Var> {
    tape.scale_channels(fused, s)
}

/// Bias-free squeeze-excitation head: `S = sigmoid(W2 relu(W1 z))`.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub channels: usize,
    pub w1: ParamId,
    pub w2: ParamId,
}

impl Attention {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) || channels < reduction {
            return Err(Error::shape(
                "attention",
                format!("reduction {reduction} does not divide {channels} channels"),
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            w1: store.add_param(format!("{prefix}.w1"), kaiming_uniform(rng, hidden, channels)),
            w2: store.add_param(format!("{prefix}.w2"), kaiming_uniform(rng, channels, hidden)),
        })
    }

    pub fn param_count(channels: usize, reduction: usize) -> usize {
        2 * channels * (channels / reduction)
    }

    /// `z: [B, M] -> S: [B, M]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let h = tape.linear(z, bound.var(self.w1), None)?;
        let h = tape.relu(h);
        let s = tape.linear(h, bound.var(self.w2), None)?;
        Ok(tape.sigmoid(s))
    }
}

/// Projects student channels to the teacher's channel count:
/// `relu(W2 relu(W1 x))` as pointwise convolutions.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMapping {
    pub in_channels: usize,
    pub out_channels: usize,
    pub w1: ParamId,
    pub w2: ParamId,
}

impl FeatureMapping {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || !in_channels.is_multiple_of(reduction) || in_channels < reduction {
            return Err(Error::shape(
                "map_features",
                format!("reduction {reduction} does not divide {in_channels} channels"),
            ));
        }
        let hidden = in_channels / reduction;
        Ok(Self {
            in_channels,
            out_channels,
            w1: store.add_param(format!("{prefix}.w1"), kaiming_uniform(rng, hidden, in_channels)),
            w2: store.add_param(format!("{prefix}.w2"), kaiming_uniform(rng, out_channels, hidden)),
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.conv1x1(x, bound.var(self.w1))?;
        let h = tape.relu(h);
        let h = tape.conv1x1(h, bound.var(self.w2))?;
        Ok(tape.relu(h))
    }
}

/// Pools whichever side has the larger spatial size down to the other.
pub fn align_spatial(tape: &mut Tape, student: Var, teacher: Var) -> Result<(Var, Var)> {
    let (_, _, sh, sw) = tape.value(student).dims4("map_features")?;
    let (_, _, th, tw) = tape.value(teacher).dims4("map_features")?;
    let student = if sh > th || sw > tw { tape.avg_pool_to(student, (th.min(sh), tw.min(sw)))? } else { student };
    let teacher = if th > sh || tw > sw { tape.avg_pool_to(teacher, (th.min(sh), tw.min(sw)))? } else { teacher };
    Ok((student, teacher))
}

/// How the fused phase stacks are weighted before the transfer loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Weighting {
    /// Attention computed from the teacher's fused phases.
    #[default]
    #[serde(rename = "fusion-activation")]
    FusionActivation,
    /// Unweighted.
    #[serde(rename = "none")]
    None,
    /// One learnable weight per block.
    #[serde(rename = "block")]
    Block,
    /// One learnable weight per channel.
    #[serde(rename = "channel")]
    Channel,
    /// Product of block and channel weights.
    #[serde(rename = "block+channel")]
    BlockChannel,
}

impl Weighting {
    pub const ALL: [Weighting; 5] =
        [Weighting::FusionActivation, Weighting::None, Weighting::Block, Weighting::Channel, Weighting::BlockChannel];

    pub fn name(self) -> &'static str {
        match self {
            Weighting::FusionActivation => "fusion-activation",
            Weighting::None => "none",
            Weighting::Block => "block",
            Weighting::Channel => "channel",
            Weighting::BlockChannel => "block+channel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown weighting `{s}`")))
    }
}

/// Learnable parameters that produce the channel weights `S`.
#[derive(Clone, Debug)]
pub struct WeightingHead {
    pub kind: Weighting,
    pub block_channels: Vec<usize>,
    pub attention: Option<Attention>,
    pub block_logits: Option<ParamId>,
    pub channel_logits: Option<ParamId>,
}

impl WeightingHead {
    pub fn register(
        store: &mut ParamStore,
        kind: Weighting,
        block_channels: &[usize],
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let m: usize = block_channels.iter().sum();
        let n = block_channels.len();
        let attention = match kind {
            Weighting::FusionActivation => Some(Attention::register(store, "activation", m, reduction, rng)?),
            _ => None,
        };
        let block_logits = matches!(kind, Weighting::Block | Weighting::BlockChannel)
            .then(|| store.add_param("weighting.block_logits", Tensor::zeros(&[n])));
        let channel_logits = matches!(kind, Weighting::Channel | Weighting::BlockChannel)
            .then(|| store.add_param("weighting.channel_logits", Tensor::zeros(&[m])));
        Ok(Self { kind, block_channels: block_channels.to_vec(), attention, block_logits, channel_logits })
    }

    pub fn channels(&self) -> usize {
        self.block_channels.iter().sum()
    }

    /// Channel weights for a teacher fused stack `[B, M, H, W]`: `[B, M]`
    /// for attention, `[M]` for the static variants, `None` when unweighted.
    pub fn weights(&self, tape: &mut Tape, bound: &Bound, teacher_fused: Var) -> Result<Option<Var>> {
        let m = tape.value(teacher_fused).dims4("weighting")?.1;
        if m != self.channels() {
            return Err(Error::shape("weighting", format!("head for {} channels got {m}", self.channels())));
        }
        if let Some(att) = &self.attention {
            let z = squeeze(tape, teacher_fused)?;
            return Ok(Some(att.forward(tape, bound, z)?));
        }
        let block = match self.block_logits {
            Some(id) => {
                let s = tape.sigmoid(bound.var(id));
                let index =
                    self.block_channels.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c)).collect();
                Some(tape.gather(s, index)?)
            }
            None => None,
        };
        let channel = self.channel_logits.map(|id| tape.sigmoid(bound.var(id)));
        Ok(match (block, channel) {
            (Some(b), Some(c)) => Some(tape.mul(b, c)?),
            (b, c) => b.or(c),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn fuse_single_block_is_identity() {
        let mut r = rng();
        let mut tape = Tape::new();
        let x = random(&mut r, &[2, 3, 4, 4]);
        let v = tape.constant(x.clone());
        let f = fuse(&mut tape, &[v]).unwrap();
        assert_eq!(tape.value(f), &x);
    }

    #[test]
    fn fuse_channel_sum_and_constants() {
        let mut tape = Tape::new();
        let sizes = [16usize, 8, 4, 2];
        let channels = [8usize, 16, 32, 64];
        let stacks: Vec<_> = channels
            .iter()
            .zip(sizes)
            .enumerate()
            .map(|(i, (&c, s))| tape.constant(Tensor::full(&[1, c, s, s], i as f64 + 0.5)))
            .collect();
        let f = fuse(&mut tape, &stacks).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 120, 2, 2]);
        for (i, (s, e)) in block_offsets(&channels).into_iter().enumerate() {
            assert!(tape.value(f).data()[s * 4..e * 4].iter().all(|v| *v == i as f64 + 0.5));
        }
    }

    #[test]
    fn fuse_rejects_increasing_sizes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(fuse(&mut tape, &[a, b]).is_err());
    }

    #[test]
    fn squeeze_values() {
        let mut r = rng();
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        let v = tape.constant(x);
        let z = squeeze(&mut tape, v).unwrap();
        assert_eq!(tape.value(z).data(), &[2.5, 7.0]);

        let x = random(&mut r, &[3, 5, 4, 4]);
        let v = tape.constant(x.clone());
        let z = squeeze(&mut tape, v).unwrap();
        for p in 0..15 {
            let flat = x.data()[p * 16..(p + 1) * 16].iter().sum::<f64>() / 16.0;
            assert!((tape.value(z).data()[p] - flat).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_half_at_zero() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let att = Attention::register(&mut store, "a", 8, 4, &mut r).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let z = tape.constant(Tensor::zeros(&[2, 8]));
        let s = att.forward(&mut tape, &bound, z).unwrap();
        assert!(tape.value(s).data().iter().all(|v| *v == 0.5));

        *store.get_mut(att.w2) = Tensor::zeros(&[8, 2]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let z = tape.constant(random(&mut r, &[2, 8]));
        let s = att.forward(&mut tape, &bound, z).unwrap();
        assert!(tape.value(s).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let att = Attention::register(&mut store, "a", 8, 4, &mut r).unwrap();
        let zt = random(&mut r, &[1, 8]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let z = tape.constant(zt.clone());
        let s = att.forward(&mut tape, &bound, z).unwrap();
        let (w1, w2) = (store.get(att.w1).data(), store.get(att.w2).data());
        let h: Vec<f64> = (0..2).map(|j| (0..8).map(|k| w1[j * 8 + k] * zt.data()[k]).sum::<f64>().max(0.0)).collect();
        for m in 0..8 {
            let pre: f64 = (0..2).map(|j| w2[m * 2 + j] * h[j]).sum();
            assert!((tape.value(s).data()[m] - 1.0 / (1.0 + (-pre).exp())).abs() < 1e-12);
        }
        assert!(Attention::register(&mut store, "b", 6, 4, &mut r).is_err());
    }

    #[test]
    fn activate_scales_channels() {
        let mut r = rng();
        let mut tape = Tape::new();
        let x = random(&mut r, &[2, 3, 2, 2]);
        let xv = tape.constant(x.clone());
        let ones = tape.constant(Tensor::full(&[3], 1.0));
        let y = activate(&mut tape, xv, ones).unwrap();
        assert_eq!(tape.value(y), &x);
        let halves = tape.constant(Tensor::full(&[3], 0.5));
        let y = activate(&mut tape, xv, halves).unwrap();
        assert!(tape.value(y).max_abs_diff(&x.map(|v| v / 2.0)) == 0.0);
        let s = random(&mut r, &[2, 3]);
        let sv = tape.constant(s.clone());
        let y = activate(&mut tape, xv, sv).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    let k = (n * 3 + c) * 4 + i;
                    assert!((tape.value(y).data()[k] - x.data()[k] * s.data()[n * 3 + c]).abs() < 1e-12);
                }
            }
        }
        let bad = tape.constant(Tensor::zeros(&[4]));
        assert!(activate(&mut tape, xv, bad).is_err());
    }

    #[test]
    fn mapping_shapes_and_zero() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let map = FeatureMapping::register(&mut store, "map", 8, 16, 4, &mut r).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 8, 8, 8]));
        let y = map.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 16, 8, 8]);
        assert_eq!(tape.value(y).max_abs(), 0.0);
    }

    #[test]
    fn align_pools_larger_side() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::full(&[1, 2, 4, 4], 1.0));
        let t = tape.constant(Tensor::full(&[1, 3, 2, 2], 1.0));
        let (a, b) = align_spatial(&mut tape, s, t).unwrap();
        assert_eq!(tape.value(a).shape(), &[1, 2, 2, 2]);
        assert_eq!(b, t);
        let (a, b) = align_spatial(&mut tape, t, s).unwrap();
        assert_eq!(a, t);
        assert_eq!(tape.value(b).shape(), &[1, 2, 2, 2]);
    }

    #[test]
    fn static_weightings() {
        let mut r = rng();
        let channels = [2usize, 3];
        for (kind, expected) in [
            (Weighting::Block, Some(0.5)),
            (Weighting::Channel, Some(0.5)),
            (Weighting::BlockChannel, Some(0.25)),
            (Weighting::None, None),
        ] {
            let mut store = ParamStore::new();
            let head = WeightingHead::register(&mut store, kind, &channels, 4, &mut r).unwrap();
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, true);
            let fused = tape.constant(Tensor::zeros(&[1, 5, 2, 2]));
            let s = head.weights(&mut tape, &bound, fused).unwrap();
            match expected {
                Some(e) => assert!(tape.value(s.unwrap()).data().iter().all(|v| *v == e)),
                None => assert!(s.is_none()),
            }
        }
        assert_eq!(Weighting::parse("block+channel").unwrap(), Weighting::BlockChannel);
        assert!(Weighting::parse("spatial").is_err());
    }
}
