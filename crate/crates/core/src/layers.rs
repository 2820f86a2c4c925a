//! Parameterised building blocks shared by networks, adapters and the
//! feature-transfer heads.

use rand::Rng;

use crate::error::Result;
use crate::graph::{BnMode, Tape, Var, BN_MOMENTUM};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// How normalisation layers behave in one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerMode {
    pub bn: BnMode,
    /// Fold train-mode batch statistics into the running estimates.
    pub update_running: bool,
}

impl LayerMode {
    pub const TRAIN: LayerMode = LayerMode { bn: BnMode::Train, update_running: true };
    /// Batch statistics without touching running estimates.
    pub const TRAIN_FROZEN_STATS: LayerMode = LayerMode { bn: BnMode::Train, update_running: false };
    pub const EVAL: LayerMode = LayerMode { bn: BnMode::Eval, update_running: false };
}

/// Kaiming-uniform init for a `[fan_out, fan_in]` weight: `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_out, fan_in], |_| rng.random_range(-bound..bound))
}

/// Batch norm with affine parameters and running statistics.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormLayer {
    /// Registers scale 1, shift 0, running mean 0 and running variance 1.
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add_param(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn num_params(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        bound: &Bound,
        x: Var,
        mode: LayerMode,
    ) -> Result<Var> {
        let (y, stats) = tape.batch_norm(
            x,
            bound.var(self.gamma),
            bound.var(self.beta),
            mode.bn,
            store.get(self.running_mean).data(),
            store.get(self.running_var).data(),
        )?;
        if let (Some(stats), true) = (stats, mode.update_running) {
            let m = BN_MOMENTUM;
            for (r, s) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * s;
            }
            for (r, s) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var_unbiased) {
                *r = (1.0 - m) * *r + m * s;
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize) -> (ParamStore, BatchNormLayer) {
        let mut store = ParamStore::new();
        let bn = BatchNormLayer::register(&mut store, "bn", c);
        (store, bn)
    }

    #[test]
    fn constant_input_normalises_to_zero() {
        let (mut store, bn) = setup(2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(&[3, 2, 2, 2], 4.2));
        let y = bn.forward(&mut tape, &mut store, &bound, x, LayerMode::TRAIN).unwrap();
        assert!(tape.value(y).max_abs() < 1e-12);
    }

    #[test]
    fn standardised_input_gets_affine_map() {
        // Two examples, one channel, values {-1, 1} -> batch mean 0, var 1.
        let (mut store, bn) = setup(1);
        *store.get_mut(bn.gamma) = Tensor::full(&[1], 2.0);
        *store.get_mut(bn.beta) = Tensor::full(&[1], 3.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let input = Tensor::new(vec![2, 1, 1, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let x = tape.constant(input.clone());
        let y = bn.forward(&mut tape, &mut store, &bound, x, LayerMode::TRAIN).unwrap();
        let scale = 2.0 / (1.0 + crate::graph::BN_EPS).sqrt();
        for (o, i) in tape.value(y).data().iter().zip(input.data()) {
            assert!((o - (scale * i + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_with_identity_stats_is_identity() {
        let (mut store, bn) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Tensor::from_fn(&[1, 3, 2, 2], |_| rng.random_range(-2.0..2.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = bn.forward(&mut tape, &mut store, &bound, x, LayerMode::EVAL).unwrap();
        let expected = input.map(|v| v / (1.0 + crate::graph::BN_EPS).sqrt());
        assert!(tape.value(y).max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn train_mode_rejects_single_example() {
        let (mut store, bn) = setup(1);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(bn.forward(&mut tape, &mut store, &bound, x, LayerMode::TRAIN).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let (mut store, bn) = setup(1);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut tape, &mut store, &bound, x, LayerMode::TRAIN).unwrap();
        assert!((store.get(bn.running_mean).item() - 0.2).abs() < 1e-15);
        // unbiased variance of {1, 3} is 2
        assert!((store.get(bn.running_var).item() - (0.9 + 0.2)).abs() < 1e-15);

        bn.forward(&mut tape, &mut store, &bound, x, LayerMode::TRAIN_FROZEN_STATS).unwrap();
        assert!((store.get(bn.running_mean).item() - 0.2).abs() < 1e-15);
    }
}
