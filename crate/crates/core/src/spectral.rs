//! 2D discrete Fourier transform and the amplitude/phase split.
//!
//! The forward transform carries the `1/(HW)` factor and the inverse carries
//! none, so `idft2(dft2(f)) == f`. Power-of-two sides use an iterative
//! radix-2 FFT; other sides fall back to a separable direct sum.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest imaginary component tolerated when inverting to a real signal.
pub const IMAG_RESIDUAL_TOLERANCE: f64 = 1e-8;

/// A complex `[H, W]` spectrum stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub real: Tensor,
    pub imag: Tensor,
}

/// Polar form of a spectrum: amplitude `>= 0` and phase in `(-pi, pi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmplitudePhase {
    pub amplitude: Tensor,
    pub phase: Tensor,
}

/// Per-channel amplitude and phase stacks of a `[C, H, W]` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpectrum {
    pub amplitude: Tensor,
    pub phase: Tensor,
}

impl ComplexSpectrum {
    pub fn new(real: Tensor, imag: Tensor) -> Result<Self> {
        if real.shape() != imag.shape() || real.rank() != 2 {
            return Err(Error::shape("spectrum", format!("real {:?} vs imag {:?}", real.shape(), imag.shape())));
        }
        Ok(Self { real, imag })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.real.shape()[0], self.real.shape()[1])
    }
}

/// Amplitude of one coefficient.
#[inline]
pub fn amplitude_of(re: f64, im: f64) -> f64 {
    re.hypot(im)
}

/// Four-quadrant phase of one coefficient, canonicalised to `(-pi, pi]`.
///
/// Zero coefficients have phase 0, and a signed zero imaginary part on the
/// negative real axis maps to `pi`.
#[inline]
pub fn phase_of(re: f64, im: f64) -> f64 {
    if im == 0.0 {
        return if re < 0.0 { PI } else { 0.0 };
    }
    im.atan2(re)
}

/// `exp(sign * 2*pi*i*k/n)` for `k in 0..n`, exact at the quarter turns.
///
/// Exact values at `k = 0` and `k = n/2` keep self-conjugate bins of real
/// signals exactly real, which pins their phase to `0` or `pi`.
pub(crate) fn twiddles(n: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let mut cos = Vec::with_capacity(n);
    let mut sin = Vec::with_capacity(n);
    for k in 0..n {
        let (c, s) = if 4 * k % n == 0 {
            match 4 * k / n {
                0 => (1.0, 0.0),
                1 => (0.0, 1.0),
                2 => (-1.0, 0.0),
                _ => (0.0, -1.0),
            }
        } else {
            let angle = 2.0 * PI * k as f64 / n as f64;
            (angle.cos(), angle.sin())
        };
        cos.push(c);
        sin.push(sign * s);
    }
    (cos, sin)
}

/// Unnormalised 1D transform plan for one length and direction.
struct Plan1d {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    bitrev: Option<Vec<usize>>,
    stage_cos: Vec<f64>,
    stage_sin: Vec<f64>,
}

impl Plan1d {
    fn new(n: usize, sign: f64) -> Self {
        let (cos, sin) = twiddles(n, sign);
        let bitrev = n.is_power_of_two().then(|| {
            let bits = n.trailing_zeros();
            (0..n).map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) }).collect()
        });
        let (mut stage_cos, mut stage_sin) = (Vec::new(), Vec::new());
        if bitrev.is_some() {
            let mut half = 1;
            while half < n {
                let step = n / (2 * half);
                stage_cos.extend((0..half).map(|j| cos[j * step]));
                stage_sin.extend((0..half).map(|j| sin[j * step]));
                half *= 2;
            }
        }
        Self { n, cos, sin, bitrev, stage_cos, stage_sin }
    }

    /// Transforms `re`/`im` in place. `scratch` must hold `2n` values.
    fn run(&self, re: &mut [f64], im: &mut [f64], scratch: &mut [f64]) {
        match &self.bitrev {
            Some(rev) => self.radix2(re, im, rev),
            None => self.direct(re, im, scratch),
        }
    }

    fn radix2(&self, re: &mut [f64], im: &mut [f64], rev: &[usize]) {
        let n = self.n;
        for (i, &j) in rev.iter().enumerate() {
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        // Twiddles of every stage, laid out contiguously.
        let (mut tw_re, mut tw_im) = (&self.stage_cos[..], &self.stage_sin[..]);
        let mut half = 1;
        while half < n {
            let (wr, rest_r) = tw_re.split_at(half);
            let (wi, rest_i) = tw_im.split_at(half);
            (tw_re, tw_im) = (rest_r, rest_i);
            for (r, i) in re.chunks_exact_mut(2 * half).zip(im.chunks_exact_mut(2 * half)) {
                let (ra, rb) = r.split_at_mut(half);
                let (ia, ib) = i.split_at_mut(half);
                for j in 0..half {
                    let tr = wr[j] * rb[j] - wi[j] * ib[j];
                    let ti = wr[j] * ib[j] + wi[j] * rb[j];
                    rb[j] = ra[j] - tr;
                    ib[j] = ia[j] - ti;
                    ra[j] += tr;
                    ia[j] += ti;
                }
            }
            half *= 2;
        }
    }

    fn direct(&self, re: &mut [f64], im: &mut [f64], scratch: &mut [f64]) {
        let n = self.n;
        let (out_re, out_im) = scratch[..2 * n].split_at_mut(n);
        for k in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for j in 0..n {
                let t = (k * j) % n;
                let (wr, wi) = (self.cos[t], self.sin[t]);
                sr += wr * re[j] - wi * im[j];
                si += wr * im[j] + wi * re[j];
            }
            out_re[k] = sr;
            out_im[k] = si;
        }
        re.copy_from_slice(out_re);
        im.copy_from_slice(out_im);
    }
}

/// Reusable row/column plans for repeated `[H, W]` transforms.
pub(crate) struct Plan2d {
    h: usize,
    w: usize,
    rows: Plan1d,
    cols: Plan1d,
    col_re: Vec<f64>,
    col_im: Vec<f64>,
    scratch: Vec<f64>,
}

impl Plan2d {
    /// `inverse = false` uses `exp(-i...)`, `true` uses `exp(+i...)`.
    /// Neither direction normalises.
    pub(crate) fn new(h: usize, w: usize, inverse: bool) -> Self {
        let sign = if inverse { 1.0 } else { -1.0 };
        Self {
            h,
            w,
            rows: Plan1d::new(w, sign),
            cols: Plan1d::new(h, sign),
            col_re: vec![0.0; h],
            col_im: vec![0.0; h],
            scratch: vec![0.0; 2 * h.max(w)],
        }
    }

    pub(crate) fn run(&mut self, re: &mut [f64], im: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        debug_assert_eq!(re.len(), h * w);
        for r in 0..h {
            let span = r * w..(r + 1) * w;
            self.rows.run(&mut re[span.clone()], &mut im[span], &mut self.scratch);
        }
        for c in 0..w {
            for r in 0..h {
                self.col_re[r] = re[r * w + c];
                self.col_im[r] = im[r * w + c];
            }
            self.cols.run(&mut self.col_re, &mut self.col_im, &mut self.scratch);
            for r in 0..h {
                re[r * w + c] = self.col_re[r];
                im[r * w + c] = self.col_im[r];
            }
        }
    }
}

fn plane_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2(op)
}

/// Forward transform with `1/(HW)` normalisation.
pub fn dft2(f: &Tensor) -> Result<ComplexSpectrum> {
    let (h, w) = plane_dims(f, "dft2")?;
    let mut re = f.data().to_vec();
    let mut im = vec![0.0; h * w];
    Plan2d::new(h, w, false).run(&mut re, &mut im);
    let norm = 1.0 / (h * w) as f64;
    re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= norm);
    ComplexSpectrum::new(Tensor::new(vec![h, w], re)?, Tensor::new(vec![h, w], im)?)
}

/// Inverse transform (no normalisation) back to a real plane.
///
/// Fails if the result has an imaginary component above
/// [`IMAG_RESIDUAL_TOLERANCE`], which means the spectrum was not
/// conjugate-symmetric.
pub fn idft2(spectrum: &ComplexSpectrum) -> Result<Tensor> {
    let (h, w) = spectrum.dims();
    let mut re = spectrum.real.data().to_vec();
    let mut im = spectrum.imag.data().to_vec();
    Plan2d::new(h, w, true).run(&mut re, &mut im);
    let residual = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if residual > IMAG_RESIDUAL_TOLERANCE {
        return Err(Error::ImaginaryResidual { residual, tolerance: IMAG_RESIDUAL_TOLERANCE });
    }
    Tensor::new(vec![h, w], re)
}

pub fn decouple(spectrum: &ComplexSpectrum) -> AmplitudePhase {
    let re = spectrum.real.data();
    let im = spectrum.imag.data();
    let shape = spectrum.real.shape();
    AmplitudePhase {
        amplitude: Tensor::from_fn(shape, |i| amplitude_of(re[i], im[i])),
        phase: Tensor::from_fn(shape, |i| phase_of(re[i], im[i])),
    }
}

pub fn couple(amplitude: &Tensor, phase: &Tensor) -> Result<ComplexSpectrum> {
    if amplitude.shape() != phase.shape() {
        return Err(Error::shape("couple", format!("amplitude {:?} vs phase {:?}", amplitude.shape(), phase.shape())));
    }
    if let Some(a) = amplitude.data().iter().find(|a| !(**a >= 0.0)) {
        return Err(Error::InvalidArgument(format!("couple: amplitude must be non-negative, found {a}")));
    }
    let (a, p) = (amplitude.data(), phase.data());
    ComplexSpectrum::new(
        Tensor::from_fn(amplitude.shape(), |i| a[i] * p[i].cos()),
        Tensor::from_fn(amplitude.shape(), |i| a[i] * p[i].sin()),
    )
}

/// Applies `dft2` then `decouple` to every channel of a `[C, H, W]` map.
pub fn decouple_featuremap(f: &Tensor) -> Result<FeatureSpectrum> {
    let (c, h, w) = match *f.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("decouple_featuremap", format!("expected [C,H,W], got {:?}", f.shape()))),
    };
    let plane = h * w;
    let norm = 1.0 / plane as f64;
    let mut plan = Plan2d::new(h, w, false);
    let mut amplitude = Vec::with_capacity(c * plane);
    let mut phase = Vec::with_capacity(c * plane);
    let mut re = vec![0.0; plane];
    let mut im = vec![0.0; plane];
    for ch in 0..c {
        re.copy_from_slice(&f.data()[ch * plane..(ch + 1) * plane]);
        im.fill(0.0);
        plan.run(&mut re, &mut im);
        for (r, i) in re.iter().zip(&im) {
            let (r, i) = (r * norm, i * norm);
            amplitude.push(amplitude_of(r, i));
            phase.push(phase_of(r, i));
        }
    }
    Ok(FeatureSpectrum { amplitude: Tensor::new(vec![c, h, w], amplitude)?, phase: Tensor::new(vec![c, h, w], phase)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w], |_| rng.random_range(-1.0..1.0))
    }

    /// O(H^2 W^2) double sum straight from the definition.
    fn naive_dft2(f: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = f.dims2("naive").unwrap();
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                for y in 0..h {
                    for x in 0..w {
                        let theta = 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        re[u * w + v] += f.data()[y * w + x] * theta.cos();
                        im[u * w + v] -= f.data()[y * w + x] * theta.sin();
                    }
                }
                re[u * w + v] /= (h * w) as f64;
                im[u * w + v] /= (h * w) as f64;
            }
        }
        (re, im)
    }

    fn naive_idft2(re: &[f64], im: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                for u in 0..h {
                    for v in 0..w {
                        let theta = 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        out[y * w + x] += re[u * w + v] * theta.cos() - im[u * w + v] * theta.sin();
                    }
                }
            }
        }
        out
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn zero_input_gives_zero_spectrum() {
        let s = dft2(&Tensor::zeros(&[4, 8])).unwrap();
        assert_eq!(s.real.max_abs(), 0.0);
        assert_eq!(s.imag.max_abs(), 0.0);
    }

    #[test]
    fn constant_input_is_dc_only() {
        for (h, w) in [(4, 4), (3, 5), (8, 2), (1, 1)] {
            let s = dft2(&Tensor::full(&[h, w], 0.7)).unwrap();
            assert!((s.real.data()[0] - 0.7).abs() < 1e-12);
            for i in 1..h * w {
                assert!(s.real.data()[i].abs() < 1e-12 && s.imag.data()[i].abs() < 1e-12);
            }
            assert!(s.imag.data()[0].abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_sum_on_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_plane(&mut rng, 4, 4);
        let s = dft2(&f).unwrap();
        let (re, im) = naive_dft2(&f);
        assert!(max_diff(s.real.data(), &re) < 1e-10);
        assert!(max_diff(s.imag.data(), &im) < 1e-10);
    }

    #[test]
    fn fast_and_direct_paths_agree() {
        // 6x6 runs the direct path, the embedded 8x8 the fast path; compare
        // each against the naive oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (h, w) in [(6, 6), (8, 8), (5, 8), (8, 3)] {
            let f = random_plane(&mut rng, h, w);
            let s = dft2(&f).unwrap();
            let (re, im) = naive_dft2(&f);
            assert!(max_diff(s.real.data(), &re) < 1e-10, "{h}x{w}");
            assert!(max_diff(s.imag.data(), &im) < 1e-10, "{h}x{w}");
        }
    }

    #[test]
    fn self_conjugate_bins_are_exactly_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_plane(&mut rng, 8, 16);
        let s = dft2(&f).unwrap();
        for (u, v) in [(0, 0), (4, 0), (0, 8), (4, 8)] {
            assert_eq!(s.imag.data()[u * 16 + v].abs(), 0.0);
        }
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let mut re = Tensor::zeros(&[4, 4]);
        re.data_mut()[0] = 2.5;
        let out = idft2(&ComplexSpectrum::new(re, Tensor::zeros(&[4, 4])).unwrap()).unwrap();
        assert!(out.data().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn inverse_matches_naive_on_symmetric_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w) = (4, 4);
        // Build a conjugate-symmetric spectrum directly.
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let (cu, cv) = ((h - u) % h, (w - v) % w);
                let (i, j) = (u * w + v, cu * w + cv);
                if i < j {
                    let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    re[i] = a;
                    im[i] = b;
                    re[j] = a;
                    im[j] = -b;
                } else if i == j {
                    re[i] = rng.random_range(-1.0..1.0);
                }
            }
        }
        let s = ComplexSpectrum::new(
            Tensor::new(vec![h, w], re.clone()).unwrap(),
            Tensor::new(vec![h, w], im.clone()).unwrap(),
        )
        .unwrap();
        let out = idft2(&s).unwrap();
        assert!(max_diff(out.data(), &naive_idft2(&re, &im, h, w)) < 1e-10);
    }

    #[test]
    fn asymmetric_spectrum_is_rejected() {
        let mut im = Tensor::zeros(&[4, 4]);
        im.data_mut()[1] = 0.5;
        let err = idft2(&ComplexSpectrum::new(Tensor::zeros(&[4, 4]), im).unwrap());
        assert!(matches!(err, Err(Error::ImaginaryResidual { .. })));
    }

    #[test]
    fn round_trip_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_plane(&mut rng, 8, 8);
        let back = idft2(&dft2(&f).unwrap()).unwrap();
        assert!(back.max_abs_diff(&f) < 1e-9);
    }

    #[test]
    fn decouple_hand_values() {
        let one = |v: f64| Tensor::full(&[1, 1], v);
        let ap = decouple(&ComplexSpectrum::new(one(3.0), one(4.0)).unwrap());
        assert!((ap.amplitude.item() - 5.0).abs() < 1e-15);
        assert!((ap.phase.item() - 0.927_295_218_001_612_2).abs() < 1e-12);

        let ap = decouple(&ComplexSpectrum::new(one(2.0), one(0.0)).unwrap());
        assert_eq!((ap.amplitude.item(), ap.phase.item()), (2.0, 0.0));

        let ap = decouple(&ComplexSpectrum::new(one(0.0), one(1.5)).unwrap());
        assert!((ap.amplitude.item() - 1.5).abs() < 1e-15);
        assert!((ap.phase.item() - PI / 2.0).abs() < 1e-15);

        let ap = decouple(&ComplexSpectrum::new(one(0.0), one(0.0)).unwrap());
        assert_eq!((ap.amplitude.item(), ap.phase.item()), (0.0, 0.0));

        let ap = decouple(&ComplexSpectrum::new(one(-1.0), one(-0.0)).unwrap());
        assert_eq!(ap.phase.item(), PI);
    }

    #[test]
    fn couple_hand_values() {
        let s = couple(&Tensor::full(&[1, 1], 5.0), &Tensor::full(&[1, 1], 4f64.atan2(3.0))).unwrap();
        assert!((s.real.item() - 3.0).abs() < 1e-12);
        assert!((s.imag.item() - 4.0).abs() < 1e-12);

        let s = couple(&Tensor::zeros(&[2, 2]), &Tensor::full(&[2, 2], 1.3)).unwrap();
        assert_eq!(s.real.max_abs() + s.imag.max_abs(), 0.0);
    }

    #[test]
    fn couple_rejects_negative_amplitude() {
        let a = Tensor::new(vec![1, 2], vec![1.0, -0.1]).unwrap();
        assert!(couple(&a, &Tensor::zeros(&[1, 2])).is_err());
        assert!(couple(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn featuremap_matches_per_channel_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Tensor::from_fn(&[2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let fs = decouple_featuremap(&f).unwrap();
        for c in 0..2 {
            let plane = Tensor::new(vec![4, 4], f.data()[c * 16..(c + 1) * 16].to_vec()).unwrap();
            let ap = decouple(&dft2(&plane).unwrap());
            assert!(max_diff(&fs.amplitude.data()[c * 16..(c + 1) * 16], ap.amplitude.data()) < 1e-15);
            assert!(max_diff(&fs.phase.data()[c * 16..(c + 1) * 16], ap.phase.data()) < 1e-15);
        }
    }

    #[test]
    fn featuremap_zero_and_constant_channels() {
        let fs = decouple_featuremap(&Tensor::zeros(&[3, 4, 4])).unwrap();
        assert_eq!(fs.amplitude.max_abs() + fs.phase.max_abs(), 0.0);

        let f = Tensor::from_fn(&[2, 4, 4], |i| if i < 16 { 1.5 } else { 0.25 });
        let fs = decouple_featuremap(&f).unwrap();
        assert!((fs.amplitude.data()[0] - 1.5).abs() < 1e-12);
        assert!((fs.amplitude.data()[16] - 0.25).abs() < 1e-12);
        let rest: f64 = (1..16).chain(17..32).map(|i| fs.amplitude.data()[i]).sum();
        assert!(rest < 1e-12);
    }
}
