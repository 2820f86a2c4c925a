//! Procedural source/target image domains.
//!
//! Every class is a texture with its own spatial scale: stripes at four
//! periods, rings, a coarse cross and a sparse dot lattice. Position,
//! orientation, contrast and colour vary per instance. A domain rescales
//! the amplitude spectrum band by band (phases untouched), then applies a
//! global contrast, a brightness offset and pixel noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{sha256, Container};
use crate::error::{Error, Result};
use crate::spectral::{dft2, idft2};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 7;
pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["stripes2", "stripes4", "stripes8", "stripes16", "rings", "cross", "dots"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Amplitude gains over equal-width radial frequency bands, lowest band
    /// (which contains DC) first.
    pub amplitude_profile: Vec<f64>,
    pub brightness_offset: f64,
    pub contrast_gain: f64,
    pub noise_sigma: f64,
    /// Maximum circular shift in pixels applied after the photometric
    /// transform; 0 disables it.
    #[serde(default)]
    pub geometric_jitter: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.into(),
            amplitude_profile: vec![1.0],
            brightness_offset: 0.0,
            contrast_gain: 1.0,
            noise_sigma: 0.0,
            geometric_jitter: 0,
            seed: 0,
        }
    }

    pub fn reference_source() -> Self {
        Self {
            name: "source".into(),
            amplitude_profile: vec![1.0, 1.0, 1.0, 1.0],
            brightness_offset: 0.0,
            contrast_gain: 1.0,
            noise_sigma: 0.02,
            geometric_jitter: 0,
            seed: 101,
        }
    }

    pub fn reference_target() -> Self {
        Self {
            name: "target".into(),
            amplitude_profile: vec![1.0, 1.3, 0.8, 0.5],
            brightness_offset: 0.2,
            contrast_gain: 0.3,
            noise_sigma: 0.3,
            geometric_jitter: 0,
            seed: 202,
        }
    }

    /// The reference target with mild geometric jitter.
    pub fn hard_target() -> Self {
        Self { name: "target-hard".into(), geometric_jitter: 2, ..Self::reference_target() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("domain `{}`: {m}", self.name)));
        if !(self.contrast_gain > 0.0) || !self.contrast_gain.is_finite() {
            return bad(format!("contrast_gain must be > 0, got {}", self.contrast_gain));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.amplitude_profile.is_empty() || self.amplitude_profile.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return bad("amplitude_profile needs at least one positive gain".into());
        }
        if !self.brightness_offset.is_finite() {
            return bad("brightness_offset must be finite".into());
        }
        if self.geometric_jitter >= SIDE / 2 {
            return bad(format!("geometric_jitter {} too large", self.geometric_jitter));
        }
        Ok(())
    }

    /// Gain applied to frequency bin `(u, v)` of an `h x w` spectrum.
    pub fn gain(&self, u: usize, v: usize, h: usize, w: usize) -> f64 {
        let fu = u.min(h - u) as f64 / h as f64;
        let fv = v.min(w - v) as f64 / w as f64;
        let r = (fu * fu + fv * fv).sqrt() / std::f64::consts::FRAC_1_SQRT_2;
        let n = self.amplitude_profile.len();
        self.amplitude_profile[((r * n as f64) as usize).min(n - 1)]
    }
}

/// splitmix64 finaliser used to derive independent per-example seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9E37_79B9_7F4A_7C15u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

fn square_wave(t: f64, period: f64) -> f64 {
    if (t / period).rem_euclid(1.0) < 0.5 {
        1.0
    } else {
        -1.0
    }
}

/// Class pattern in `[-1, 1]` at pixel `(y, x)`.
fn pattern(class: usize, rng: &mut ChaCha8Rng) -> Box<dyn Fn(f64, f64) -> f64> {
    let transpose = rng.random_bool(0.5);
    let orient = move |y: f64, x: f64| if transpose { (x, y) } else { (y, x) };
    match class {
        0..=3 => {
            let period = [2.0, 4.0, 8.0, 16.0][class];
            // Half-period shifts stay aligned with the 2x2 pooling grid; an
            // odd shift would make period 4 look like period 2 after pooling.
            let shift = if rng.random_bool(0.5) { period / 2.0 } else { 0.0 };
            Box::new(move |y, x| square_wave(orient(y, x).1 + shift, period))
        }
        4 => {
            let (cy, cx) = (rng.random_range(10.0..22.0), rng.random_range(10.0..22.0));
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            Box::new(move |y, x| {
                let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                (std::f64::consts::TAU * r / 6.0 + phase).cos()
            })
        }
        5 => {
            let (cy, cx) = (rng.random_range(10.0..22.0), rng.random_range(10.0..22.0));
            let half = rng.random_range(2.5..5.0);
            Box::new(move |y, x| if (y - cy).abs() < half || (x - cx).abs() < half { 1.0 } else { -1.0 })
        }
        _ => {
            let (sy, sx) = (rng.random_range(0..8) as f64, rng.random_range(0..8) as f64);
            Box::new(move |y, x| {
                let on = (y + sy).rem_euclid(8.0) < 2.0 && (x + sx).rem_euclid(8.0) < 2.0;
                if on {
                    1.0
                } else {
                    -0.4
                }
            })
        }
    }
}

/// Renders one source-free base image of class `class`. Values lie in
/// `[0.15, 0.85]`.
pub fn generate_base(class: usize, seed: u64) -> Result<Tensor> {
    if class >= NUM_CLASSES {
        return Err(Error::InvalidArgument(format!("class {class} outside [0, {NUM_CLASSES})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = pattern(class, &mut rng);
    let strength = rng.random_range(0.6..1.0);
    let colour: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let plane = SIDE * SIDE;
    let mut data = vec![0.0; CHANNELS * plane];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let v = p(y as f64, x as f64);
            for (c, g) in colour.iter().enumerate() {
                let px = 0.5 + 0.33 * strength * g * v + noise.sample(&mut rng);
                data[c * plane + y * SIDE + x] = px.clamp(0.15, 0.85);
            }
        }
    }
    Tensor::new(vec![CHANNELS, SIDE, SIDE], data)
}

/// Applies a domain to a `[C, H, W]` image. With zero noise and no jitter
/// the output is a deterministic function of the input.
pub fn apply_domain(image: &Tensor, spec: &DomainSpec, noise_seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("apply_domain", format!("expected [C, H, W], got {:?}", image.shape()))),
    };
    let plane = h * w;
    let mut out = Vec::with_capacity(image.len());
    for ch in 0..c {
        let x = Tensor::new(vec![h, w], image.data()[ch * plane..(ch + 1) * plane].to_vec())?;
        let mut spectrum = dft2(&x)?;
        // A positive real gain rescales the amplitude and keeps the phase.
        for u in 0..h {
            for v in 0..w {
                let g = spec.gain(u, v, h, w);
                spectrum.real.data_mut()[u * w + v] *= g;
                spectrum.imag.data_mut()[u * w + v] *= g;
            }
        }
        out.extend(idft2(&spectrum)?.into_data());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, noise_seed]));
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("validated sigma"));
    for v in &mut out {
        let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
        *v = (spec.contrast_gain * *v + spec.brightness_offset + n).clamp(0.0, 1.0);
    }
    if spec.geometric_jitter > 0 {
        let j = spec.geometric_jitter as i64;
        let (dy, dx) = (rng.random_range(-j..=j), rng.random_range(-j..=j));
        let src = out.clone();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
                    let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
                    out[ch * plane + y * w + x] = src[ch * plane + sy * w + sx];
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Images and labels of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Split> {
        Ok(Split {
            images: self.images.gather_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: DomainSpec,
    pub n_per_class: usize,
    pub n_train_per_class: usize,
    pub seed: u64,
}

/// One domain: train examples first, then test examples, both class
/// interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub meta: DatasetMeta,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl SyntheticDataset {
    pub fn train_len(&self) -> usize {
        self.meta.n_train_per_class * NUM_CLASSES
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn range(&self, start: usize, end: usize) -> Result<Split> {
        let idx: Vec<usize> = (start..end).collect();
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("empty split of domain `{}`", self.meta.spec.name)));
        }
        Ok(Split { images: self.images.gather_batch(&idx), labels: self.labels[start..end].to_vec() })
    }

    pub fn train(&self) -> Result<Split> {
        self.range(0, self.train_len())
    }

    pub fn test(&self) -> Result<Split> {
        self.range(self.train_len(), self.len())
    }

    pub fn split(&self, name: &str) -> Result<Split> {
        match name {
            "train" => self.train(),
            "test" => self.test(),
            "all" => self.range(0, self.len()),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}` (train|test|all)"))),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut c = Container::new(sha256(meta.as_bytes()), meta);
        c.push_f64("images", self.images.clone());
        c.push_u32("labels", vec![self.labels.len()], self.labels.iter().map(|&l| l as u32).collect());
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: DatasetMeta =
            serde_json::from_str(&c.metadata).map_err(|e| Error::Format(format!("dataset metadata: {e}")))?;
        let images = c.f64("images")?.clone();
        let labels: Vec<usize> = c.u32("labels")?.iter().map(|&l| l as usize).collect();
        let n = labels.len();
        if images.shape() != [n, CHANNELS, SIDE, SIDE] || n != meta.n_per_class * NUM_CLASSES {
            return Err(Error::Format(format!("dataset blocks disagree: images {:?}, {n} labels", images.shape())));
        }
        if labels.iter().any(|&l| l >= NUM_CLASSES) {
            return Err(Error::Format("label out of range".into()));
        }
        Ok(Self { meta, images, labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// SHA-256 (hex) of the serialised container.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(sha256(&self.to_container()?.to_bytes())))
    }
}

fn generate_domain(n_per_class: usize, spec: &DomainSpec, domain_index: u64, seed: u64) -> Result<SyntheticDataset> {
    let n_train = n_per_class * 4 / 5;
    let mut order = Vec::with_capacity(n_per_class * NUM_CLASSES);
    for i in 0..n_train {
        for k in 0..NUM_CLASSES {
            order.push((k, i));
        }
    }
    for i in n_train..n_per_class {
        for k in 0..NUM_CLASSES {
            order.push((k, i));
        }
    }
    let mut data = Vec::with_capacity(order.len() * CHANNELS * SIDE * SIDE);
    let mut labels = Vec::with_capacity(order.len());
    for (k, i) in order {
        let base_seed = derive_seed(&[seed, domain_index, k as u64, i as u64]);
        let base = generate_base(k, base_seed)?;
        data.extend(apply_domain(&base, spec, base_seed)?.into_data());
        labels.push(k);
    }
    let images = Tensor::new(vec![labels.len(), CHANNELS, SIDE, SIDE], data)?;
    Ok(SyntheticDataset {
        meta: DatasetMeta { spec: spec.clone(), n_per_class, n_train_per_class: n_train, seed },
        images,
        labels,
    })
}

/// Source and target domains with shared class semantics and disjoint
/// instances; 80/20 train/test split per class.
pub fn generate_dataset(
    n_per_class: usize,
    source: &DomainSpec,
    target: &DomainSpec,
    seed: u64,
) -> Result<(SyntheticDataset, SyntheticDataset)> {
    if n_per_class < 2 {
        return Err(Error::InvalidArgument(format!("n_per_class must be >= 2, got {n_per_class}")));
    }
    source.validate()?;
    target.validate()?;
    if source == target {
        return Err(Error::InvalidArgument("source and target domain specs are identical".into()));
    }
    Ok((generate_domain(n_per_class, source, 0, seed)?, generate_domain(n_per_class, target, 1, seed)?))
}

pub const REFERENCE_N_PER_CLASS: usize = 250;
pub const REFERENCE_SEED: u64 = 2024;

pub fn reference_dataset() -> Result<(SyntheticDataset, SyntheticDataset)> {
    generate_dataset(
        REFERENCE_N_PER_CLASS,
        &DomainSpec::reference_source(),
        &DomainSpec::reference_target(),
        REFERENCE_SEED,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_is_deterministic_and_in_range() {
        for k in 0..NUM_CLASSES {
            let a = generate_base(k, 17).unwrap();
            assert_eq!(a, generate_base(k, 17).unwrap());
            assert!(a.data().iter().all(|v| (0.15..=0.85).contains(v)));
        }
        assert!(generate_base(NUM_CLASSES, 0).is_err());
    }

    #[test]
    fn identity_and_offset_domains() {
        let img = generate_base(4, 3).unwrap();
        let same = apply_domain(&img, &DomainSpec::identity("id"), 0).unwrap();
        assert!(same.max_abs_diff(&img) < 1e-9);
        let shifted =
            apply_domain(&img, &DomainSpec { brightness_offset: 0.2, ..DomainSpec::identity("o") }, 0).unwrap();
        assert!(shifted.max_abs_diff(&img.map(|v| (v + 0.2).min(1.0))) < 1e-9);
    }

    #[test]
    fn gains_are_symmetric() {
        let spec = DomainSpec::reference_target();
        for u in 0..8 {
            for v in 0..8 {
                assert_eq!(spec.gain(u, v, 8, 8), spec.gain((8 - u) % 8, (8 - v) % 8, 8, 8));
            }
        }
        assert_eq!(spec.gain(0, 0, 8, 8), 1.0);
    }

    #[test]
    fn small_dataset_balance_and_split() {
        let (s, t) = generate_dataset(5, &DomainSpec::reference_source(), &DomainSpec::reference_target(), 1).unwrap();
        for d in [&s, &t] {
            for k in 0..NUM_CLASSES {
                assert_eq!(d.labels.iter().filter(|&&l| l == k).count(), 5);
            }
            assert_eq!(d.train().unwrap().len(), 28);
            assert_eq!(d.test().unwrap().len(), 7);
            assert!(d.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(s.images, t.images);
        assert!(generate_dataset(1, &DomainSpec::reference_source(), &DomainSpec::reference_target(), 1).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = DomainSpec::reference_target();
        s.contrast_gain = 0.0;
        assert!(s.validate().is_err());
        let mut s = DomainSpec::reference_target();
        s.noise_sigma = -0.1;
        assert!(s.validate().is_err());
    }
}
