use std::f64::consts::PI;

use phasekd::data::{apply_domain, generate_base, DomainSpec};
use phasekd::graph::{softmax_t, BnMode, KlDirection, Tape};
use phasekd::spectral::{couple, decouple, dft2, idft2, phase_of};
use phasekd::Tensor;
use proptest::prelude::*;

fn plane() -> impl Strategy<Value = Tensor> {
    (1usize..=9, 1usize..=9).prop_flat_map(|(h, w)| {
        prop::collection::vec(-5.0f64..5.0, h * w).prop_map(move |d| Tensor::new(vec![h, w], d).unwrap())
    })
}

fn two_planes() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=8, 1usize..=8).prop_flat_map(|(h, w)| {
        let v = prop::collection::vec(-5.0f64..5.0, h * w);
        (v.clone(), v)
            .prop_map(move |(a, b)| (Tensor::new(vec![h, w], a).unwrap(), Tensor::new(vec![h, w], b).unwrap()))
    })
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn round_trip(x in plane()) {
        let back = idft2(&dft2(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn linearity((x, y) in two_planes(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let combo = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let (fx, fy, fc) = (dft2(&x).unwrap(), dft2(&y).unwrap(), dft2(&combo).unwrap());
        for i in 0..x.len() {
            prop_assert!((fc.real.data()[i] - (a * fx.real.data()[i] + b * fy.real.data()[i])).abs() < 1e-10);
            prop_assert!((fc.imag.data()[i] - (a * fx.imag.data()[i] + b * fy.imag.data()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn parseval(x in plane()) {
        let f = dft2(&x).unwrap();
        let n = x.len() as f64;
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spectral: f64 = f.real.data().iter().zip(f.imag.data()).map(|(r, i)| r * r + i * i).sum();
        prop_assert!((energy - n * spectral).abs() < 1e-9 * (1.0 + energy));
    }

    #[test]
    fn polar_identity(x in plane()) {
        let f = dft2(&x).unwrap();
        let p = decouple(&f);
        prop_assert!(p.amplitude.data().iter().all(|a| *a >= 0.0));
        prop_assert!(p.phase.data().iter().all(|t| *t > -PI && *t <= PI));
        let back = couple(&p.amplitude, &p.phase).unwrap();
        prop_assert!(back.real.max_abs_diff(&f.real) < 1e-12);
        prop_assert!(back.imag.max_abs_diff(&f.imag) < 1e-12);
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-30.0f64..30.0, 2..10),
        shift in -100.0f64..100.0,
        tau in 0.1f64..10.0,
    ) {
        let p = softmax_t(&logits, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let q = softmax_t(&shifted, tau).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_inputs(
        rows in 1usize..4,
        a in prop::collection::vec(-6.0f64..6.0, 20),
        b in prop::collection::vec(-6.0f64..6.0, 20),
        tau in 0.5f64..8.0,
    ) {
        let k = 5;
        let ta = Tensor::new(vec![rows, k], a[..rows * k].to_vec()).unwrap();
        let tb = Tensor::new(vec![rows, k], b[..rows * k].to_vec()).unwrap();
        for dir in [KlDirection::TargetFirst, KlDirection::LearnerFirst] {
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(ta.clone()), tape.constant(tb.clone()));
            let kl = tape.kl_div(x, y, tau, dir).unwrap();
            prop_assert!(tape.value(kl).item() >= -1e-12);
            let same = tape.kl_div(x, x, tau, dir).unwrap();
            prop_assert!(tape.value(same).item().abs() < 1e-12);
        }
    }

    #[test]
    fn train_batch_norm_standardises_each_channel(
        data in prop::collection::vec(-4.0f64..4.0, 3 * 2 * 2 * 2),
        gamma in prop::collection::vec(0.5f64..2.0, 2),
        beta in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let x = Tensor::new(vec![3, 2, 2, 2], data).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::new(vec![2], gamma.clone()).unwrap());
        let bt = tape.constant(Tensor::new(vec![2], beta.clone()).unwrap());
        let (y, stats) = tape.batch_norm(xv, g, bt, BnMode::Train, &[0.0; 2], &[1.0; 2]).unwrap();
        prop_assert!(stats.is_some());
        let y = tape.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| (0..4).map(move |i| (b, i))).map(|(b, i)| y.data()[b * 8 + c * 4 + i]).collect();
            let raw: Vec<f64> = (0..3).flat_map(|b| (0..4).map(move |i| (b, i))).map(|(b, i)| x.data()[b * 8 + c * 4 + i]).collect();
            let m = vals.iter().sum::<f64>() / 12.0;
            let v = vals.iter().map(|z| (z - m).powi(2)).sum::<f64>() / 12.0;
            let rm = raw.iter().sum::<f64>() / 12.0;
            let rv = raw.iter().map(|z| (z - rm).powi(2)).sum::<f64>() / 12.0;
            prop_assert!((m - beta[c]).abs() < 1e-9);
            // The variance epsilon shrinks the output scale slightly.
            let expected = gamma[c] * gamma[c] * rv / (rv + 1e-5);
            prop_assert!((v - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_free_domain_shift_keeps_phase(class in 0usize..7, seed in any::<u64>(), profile in prop::collection::vec(0.3f64..1.5, 1..5)) {
        // Contrast and offset keep the filtered image clear of the clamp.
        let spec = DomainSpec { amplitude_profile: profile, noise_sigma: 0.0, brightness_offset: 0.25, contrast_gain: 0.5, ..DomainSpec::identity("shifted") };
        let base = generate_base(class, seed).unwrap();
        let out = apply_domain(&base, &spec, 0).unwrap();
        let plane = 32 * 32;
        for ch in 0..3 {
            let a = dft2(&Tensor::new(vec![32, 32], base.data()[ch * plane..(ch + 1) * plane].to_vec()).unwrap()).unwrap();
            let b = dft2(&Tensor::new(vec![32, 32], out.data()[ch * plane..(ch + 1) * plane].to_vec()).unwrap()).unwrap();
            for i in 0..plane {
                let (ar, ai, br, bi) = (a.real.data()[i], a.imag.data()[i], b.real.data()[i], b.imag.data()[i]);
                if ar.hypot(ai) > 1e-8 && br.hypot(bi) > 1e-8 {
                    prop_assert!(angle_diff(phase_of(ar, ai), phase_of(br, bi)) < 1e-6);
                }
            }
        }
    }
}
