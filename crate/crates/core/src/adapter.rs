//! Fourier adapters attached after each frozen teacher block.
//!
//! An adapter runs a pointwise bottleneck over the block output, takes the
//! amplitude spectrum of the result, blends it with the amplitude of the
//! original feature using a learnable weight `lambda`, and recombines the
//! blend with the *original* phase before transforming back. The phase
//! stack of the original feature is exposed for feature transfer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::layers::{kaiming_uniform, BatchNormLayer, LayerMode};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Bottleneck reduction of the adapter convolutions.
pub const ADAPTER_REDUCTION: usize = 4;
/// Initial mixing logits; `lambda = softmax(logits)[0] ~= 0.018`.
pub const INITIAL_MIX_LOGITS: [f64; 2] = [-2.0, 2.0];

#[derive(Clone, Debug)]
pub struct Adapter {
    pub channels: usize,
    pub reduction: usize,
    pub mix_temperature: f64,
    pub w1: ParamId,
    pub bn1: BatchNormLayer,
    pub w2: ParamId,
    pub bn2: BatchNormLayer,
    pub mix_logits: ParamId,
}

/// Graph handles produced by [`Adapter::forward`].
#[derive(Clone, Copy, Debug)]
pub struct AdapterOutput {
    /// Recovered spatial feature, same shape as the input.
    pub f_ift: Var,
    /// Phase stack of the original feature, `[B, C, H, W]` in `(-pi, pi]`.
    pub phase: Var,
    pub amplitude_refurbished: Var,
    pub lambda: Var,
}

impl Adapter {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        mix_temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) || channels < reduction {
            return Err(Error::shape("adapter", format!("reduction {reduction} does not divide {channels} channels")));
        }
        if !(mix_temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "adapter mix temperature must be positive, got {mix_temperature}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            mix_temperature,
            w1: store.add_param(format!("{prefix}.w1"), kaiming_uniform(rng, hidden, channels)),
            bn1: BatchNormLayer::register(store, &format!("{prefix}.bn1"), hidden),
            w2: store.add_param(format!("{prefix}.w2"), kaiming_uniform(rng, channels, hidden)),
            bn2: BatchNormLayer::register(store, &format!("{prefix}.bn2"), channels),
            mix_logits: store
                .add_param(format!("{prefix}.mix_logits"), Tensor::new(vec![2], INITIAL_MIX_LOGITS.to_vec())?),
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    /// Learnable scalars in one adapter with `channels` channels.
    pub fn param_count(channels: usize, reduction: usize) -> usize {
        let hidden = channels / reduction;
        2 * hidden * channels + BatchNormLayer::num_params(hidden) + BatchNormLayer::num_params(channels) + 2
    }

    /// `BN(W2 relu(BN(W1 f)))`.
    pub fn adapt(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        bound: &Bound,
        f: Var,
        mode: LayerMode,
    ) -> Result<Var> {
        let c = tape.value(f).dims4("adapter")?.1;
        if c != self.channels {
            return Err(Error::shape("adapter", format!("adapter for {} channels got {c}", self.channels)));
        }
        let h = tape.conv1x1(f, bound.var(self.w1))?;
        let h = self.bn1.forward(tape, store, bound, h, mode)?;
        let h = tape.relu(h);
        let h = tape.conv1x1(h, bound.var(self.w2))?;
        self.bn2.forward(tape, store, bound, h, mode)
    }

    /// `lambda = softmax(mix_logits / t)[0]`.
    pub fn mixing_weight(&self, tape: &mut Tape, bound: &Bound) -> Result<Var> {
        let w = tape.softmax(bound.var(self.mix_logits), self.mix_temperature)?;
        tape.select(w, 0)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        bound: &Bound,
        f: Var,
        mode: LayerMode,
    ) -> Result<AdapterOutput> {
        let f_ad = self.adapt(tape, store, bound, f, mode)?;
        let spectrum = tape.dft2(f)?;
        let amplitude = tape.amplitude(spectrum)?;
        let phase = tape.phase(spectrum)?;
        // The adapted phase is never used: only its amplitude is blended in.
        let spectrum_ad = tape.dft2(f_ad)?;
        let amplitude_ad = tape.amplitude(spectrum_ad)?;
        let lambda = self.mixing_weight(tape, bound)?;
        let amplitude_refurbished = tape.mix(amplitude_ad, amplitude, lambda)?;
        let coupled = tape.couple(amplitude_refurbished, phase)?;
        let f_ift = tape.idft2(coupled)?;
        Ok(AdapterOutput { f_ift, phase, amplitude_refurbished, lambda })
    }
}

/// `lambda * amplitude_adapted + (1 - lambda) * amplitude`, elementwise.
pub fn refurbish(amplitude: &Tensor, amplitude_adapted: &Tensor, lambda: f64) -> Result<Tensor> {
    if amplitude.shape() != amplitude_adapted.shape() {
        return Err(Error::shape("refurbish", format!("{:?} vs {:?}", amplitude.shape(), amplitude_adapted.shape())));
    }
    let (a, b) = (amplitude.data(), amplitude_adapted.data());
    Ok(Tensor::from_fn(amplitude.shape(), |i| lambda * b[i] + (1.0 - lambda) * a[i]))
}

/// One adapter per teacher block, all parameters in one store.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub store: ParamStore,
    pub adapters: Vec<Adapter>,
}

impl AdapterSet {
    /// Attaches an adapter after every block of a network whose blocks emit
    /// `block_channels`.
    pub fn attach(
        block_channels: &[usize],
        reduction: usize,
        mix_temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let adapters = block_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Adapter::register(&mut store, &format!("adapter{i}"), c, reduction, mix_temperature, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { store, adapters })
    }

    /// Sets every adapter's mixing logits, e.g. to pin `lambda` near 0.
    pub fn set_mix_logits(&mut self, logits: [f64; 2]) {
        for a in &self.adapters {
            self.store.get_mut(a.mix_logits).data_mut().copy_from_slice(&logits);
        }
    }

    /// Current `lambda` of each adapter.
    pub fn lambdas(&self) -> Vec<f64> {
        self.adapters
            .iter()
            .map(|a| {
                let l = self.store.get(a.mix_logits).data();
                let w = crate::graph::softmax_t(l, a.mix_temperature).expect("positive temperature");
                w[0]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::BnMode;
    use crate::spectral;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn mixing_weight_values() {
        let mut r = rng();
        let mut set = AdapterSet::attach(&[4], 4, 1.0, &mut r).unwrap();
        for (logits, expected) in [([0.3, 0.3], 0.5), ([1.0, 0.0], std::f64::consts::E / (std::f64::consts::E + 1.0))] {
            set.set_mix_logits(logits);
            assert!((set.lambdas()[0] - expected).abs() < 1e-12);
        }
        set.set_mix_logits([20.0, -20.0]);
        assert!(set.lambdas()[0] > 1.0 - 1e-8);
        set.set_mix_logits(INITIAL_MIX_LOGITS);
        assert!((set.lambdas()[0] - 1.0 / (1.0 + 4f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn refurbish_endpoints_and_mean() {
        let a = Tensor::full(&[2, 2], 2.0);
        let b = Tensor::full(&[2, 2], 4.0);
        assert_eq!(refurbish(&a, &b, 0.0).unwrap(), a);
        assert_eq!(refurbish(&a, &b, 1.0).unwrap(), b);
        assert!(refurbish(&a, &b, 0.5).unwrap().data().iter().all(|v| (*v - 3.0).abs() < 1e-15));
        assert!(refurbish(&a, &Tensor::zeros(&[4]), 0.5).is_err());
    }

    #[test]
    fn attach_widths_and_counts() {
        let mut r = rng();
        let set = AdapterSet::attach(&[8, 16, 32, 64], 4, 1.0, &mut r).unwrap();
        let widths: Vec<_> = set.adapters.iter().map(Adapter::hidden).collect();
        assert_eq!(widths, vec![2, 4, 8, 16]);
        // Independent per-layer tally: two convs, two BN affine pairs, two logits.
        let tally: usize =
            [8usize, 16, 32, 64].iter().map(|&c| (c / 4) * c + c * (c / 4) + 2 * (c / 4) + 2 * c + 2).sum();
        assert_eq!(set.num_params(), tally);
        assert_eq!(tally, 3028);
        assert!(AdapterSet::attach(&[6], 4, 1.0, &mut r).is_err());
    }

    #[test]
    fn zero_input_eval_gives_zero() {
        let mut r = rng();
        let mut set = AdapterSet::attach(&[4], 4, 1.0, &mut r).unwrap();
        let adapter = set.adapters[0].clone();
        let mut tape = Tape::new();
        let bound = set.store.bind(&mut tape, false);
        let f = tape.constant(Tensor::zeros(&[2, 4, 4, 4]));
        let out = adapter.adapt(&mut tape, &mut set.store, &bound, f, LayerMode::EVAL).unwrap();
        assert_eq!(tape.value(out).max_abs(), 0.0);
    }

    #[test]
    fn zero_second_conv_emits_bn_shift() {
        let mut r = rng();
        let mut set = AdapterSet::attach(&[4], 4, 1.0, &mut r).unwrap();
        let adapter = set.adapters[0].clone();
        *set.store.get_mut(adapter.w2) = Tensor::zeros(&[4, 1]);
        let shift = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        *set.store.get_mut(adapter.bn2.beta) = shift.clone();
        let mut tape = Tape::new();
        let bound = set.store.bind(&mut tape, false);
        let f = tape.constant(random_input(&mut r, &[3, 4, 2, 2]));
        let out = adapter.adapt(&mut tape, &mut set.store, &bound, f, LayerMode::TRAIN).unwrap();
        let v = tape.value(out);
        for n in 0..3 {
            for c in 0..4 {
                for i in 0..4 {
                    assert!((v.data()[(n * 4 + c) * 4 + i] - shift.data()[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adapt_matches_manual_composition() {
        let mut r = rng();
        let mut set = AdapterSet::attach(&[8], 4, 1.0, &mut r).unwrap();
        let adapter = set.adapters[0].clone();
        let input = random_input(&mut r, &[2, 8, 4, 4]);
        let mut store_copy = set.store.clone();

        let mut tape = Tape::new();
        let bound = set.store.bind(&mut tape, false);
        let f = tape.constant(input.clone());
        let out = adapter.adapt(&mut tape, &mut set.store, &bound, f, LayerMode::TRAIN).unwrap();

        let mut t2 = Tape::new();
        let x = t2.constant(input);
        let w1 = t2.constant(store_copy.get(adapter.w1).clone());
        let w2 = t2.constant(store_copy.get(adapter.w2).clone());
        let g1 = t2.constant(store_copy.get(adapter.bn1.gamma).clone());
        let b1 = t2.constant(store_copy.get(adapter.bn1.beta).clone());
        let g2 = t2.constant(store_copy.get(adapter.bn2.gamma).clone());
        let b2 = t2.constant(store_copy.get(adapter.bn2.beta).clone());
        let h = t2.conv1x1(x, w1).unwrap();
        let rm1 = store_copy.get(adapter.bn1.running_mean).data().to_vec();
        let rv1 = store_copy.get(adapter.bn1.running_var).data().to_vec();
        let (h, _) = t2.batch_norm(h, g1, b1, BnMode::Train, &rm1, &rv1).unwrap();
        let h = t2.relu(h);
        let h = t2.conv1x1(h, w2).unwrap();
        let rm2 = store_copy.get_mut(adapter.bn2.running_mean).data().to_vec();
        let rv2 = store_copy.get(adapter.bn2.running_var).data().to_vec();
        let (h, _) = t2.batch_norm(h, g2, b2, BnMode::Train, &rm2, &rv2).unwrap();
        assert!(tape.value(out).max_abs_diff(t2.value(h)) < 1e-12);
    }

    fn run_forward(set: &mut AdapterSet, input: &Tensor) -> (Tensor, Tensor, Tensor) {
        let adapter = set.adapters[0].clone();
        let mut tape = Tape::new();
        let bound = set.store.bind(&mut tape, false);
        let f = tape.constant(input.clone());
        let out = adapter.forward(&mut tape, &mut set.store, &bound, f, LayerMode::TRAIN).unwrap();
        (tape.value(out.f_ift).clone(), tape.value(out.phase).clone(), tape.value(out.amplitude_refurbished).clone())
    }

    #[test]
    fn near_zero_lambda_is_identity() {
        let mut r = rng();
        let mut set = AdapterSet::attach(&[4], 4, 1.0, &mut r).unwrap();
        set.set_mix_logits([-20.0, 20.0]);
        let input = random_input(&mut r, &[2, 4, 8, 8]);
        let (f_ift, _, _) = run_forward(&mut set, &input);
        assert!(f_ift.max_abs_diff(&input) < 1e-6);
    }

    #[test]
    fn tiny_lambda_stays_within_bound() {
        let mut r = rng();
        let mut set = AdapterSet::attach(&[8], 4, 1.0, &mut r).unwrap();
        // softmax([l, 0])[0] = 1e-6  <=>  l = ln(1e-6 / (1 - 1e-6))
        let l = (1e-6f64 / (1.0 - 1e-6)).ln();
        set.set_mix_logits([l, 0.0]);
        assert!((set.lambdas()[0] - 1e-6).abs() < 1e-15);
        let input = random_input(&mut r, &[3, 8, 4, 4]);
        let (f_ift, _, _) = run_forward(&mut set, &input);
        assert!(f_ift.max_abs_diff(&input) <= 1e-4 * input.max_abs());
    }

    #[test]
    fn zero_adapter_scales_feature_by_one_minus_lambda() {
        let mut r = rng();
        let mut set = AdapterSet::attach(&[4], 4, 1.0, &mut r).unwrap();
        let a = set.adapters[0].clone();
        *set.store.get_mut(a.w1) = Tensor::zeros(&[1, 4]);
        *set.store.get_mut(a.w2) = Tensor::zeros(&[4, 1]);
        set.set_mix_logits([0.4, -0.1]);
        let lambda = set.lambdas()[0];
        let input = random_input(&mut r, &[2, 4, 4, 4]);
        let (f_ift, _, _) = run_forward(&mut set, &input);
        let expected = input.map(|v| (1.0 - lambda) * v);
        assert!(f_ift.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn phase_is_the_original_phase() {
        let mut r = rng();
        let mut set = AdapterSet::attach(&[4], 4, 1.0, &mut r).unwrap();
        set.set_mix_logits([0.5, 0.0]);
        let input = random_input(&mut r, &[2, 4, 4, 4]);
        let (_, phase, amp_ref) = run_forward(&mut set, &input);
        for n in 0..2 {
            let item = input.batch_item(n).reshape(&[4, 4, 4]).unwrap();
            let expected = spectral::decouple_featuremap(&item).unwrap().phase;
            assert_eq!(&phase.data()[n * 64..(n + 1) * 64], expected.data());
        }
        assert!(amp_ref.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut r = rng();
        let mut set = AdapterSet::attach(&[8], 4, 1.0, &mut r).unwrap();
        let adapter = set.adapters[0].clone();
        let mut tape = Tape::new();
        let bound = set.store.bind(&mut tape, false);
        let f = tape.constant(Tensor::zeros(&[2, 4, 2, 2]));
        assert!(adapter.forward(&mut tape, &mut set.store, &bound, f, LayerMode::TRAIN).is_err());
    }
}
