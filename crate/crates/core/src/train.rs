//! Interactive teacher/student training.
//!
//! Each step runs the student, then the adapted teacher, updates the
//! adapters with Adam on the teacher objective, runs the teacher again with
//! the updated adapters, and finally updates the student (and its feature
//! mapping) with momentum SGD on the student objective. The weighting head
//! that produces the channel weights takes an Adam step on the same
//! student objective.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterSet, ADAPTER_REDUCTION, INITIAL_MIX_LOGITS};
use crate::checkpoint::Checkpoint;
use crate::data::{derive_seed, Split};
use crate::error::{Error, Result};
use crate::fusion::{self, FeatureMapping, Weighting, WeightingHead, ACTIVATION_REDUCTION, MAPPING_REDUCTION};
use crate::graph::{KlDirection, Tape, Var};
use crate::layers::LayerMode;
use crate::losses::{self, LossBreakdown, Terms};
use crate::networks::{accuracy, argmax_rows, Network};
use crate::optim::{Adam, Sgd};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Ablation variants of the full method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Variant {
    #[default]
    Full,
    NoKtS,
    NoDiktS,
    NoBoth,
    Weighting(Weighting),
    FixedTeacher,
    LearnableTeacherFull,
    NoCeT,
    NoKtT,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::NoKtS,
        Variant::NoDiktS,
        Variant::NoBoth,
        Variant::Weighting(Weighting::None),
        Variant::Weighting(Weighting::Block),
        Variant::Weighting(Weighting::Channel),
        Variant::Weighting(Weighting::BlockChannel),
        Variant::FixedTeacher,
        Variant::LearnableTeacherFull,
        Variant::NoCeT,
        Variant::NoKtT,
        Variant::Full,
    ];

    pub fn name(self) -> String {
        match self {
            Variant::Full => "full_4ds".into(),
            Variant::NoKtS => "no_kt_S".into(),
            Variant::NoDiktS => "no_dikt_S".into(),
            Variant::NoBoth => "no_both".into(),
            Variant::Weighting(w) => format!("weighting:{}", w.name()),
            Variant::FixedTeacher => "fixed_teacher".into(),
            Variant::LearnableTeacherFull => "learnable_teacher_full".into(),
            Variant::NoCeT => "no_ce_T".into(),
            Variant::NoKtT => "no_kt_T".into(),
        }
    }

    pub fn weighting(self) -> Weighting {
        match self {
            Variant::Weighting(w) => w,
            _ => Weighting::FusionActivation,
        }
    }

    pub fn student_terms(self) -> Terms {
        match self {
            Variant::NoKtS => Terms { ce: true, kt: false, dikt: true },
            Variant::NoDiktS => Terms { ce: true, kt: true, dikt: false },
            Variant::NoBoth => Terms { ce: true, kt: false, dikt: false },
            _ => Terms::ALL,
        }
    }

    pub fn teacher_terms(self) -> Terms {
        match self {
            Variant::NoCeT => Terms { ce: false, kt: true, dikt: false },
            Variant::NoKtT => Terms { ce: true, kt: false, dikt: false },
            _ => Terms { ce: true, kt: true, dikt: false },
        }
    }

    pub fn uses_adapters(self) -> bool {
        !matches!(self, Variant::FixedTeacher | Variant::LearnableTeacherFull)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(w) = s.strip_prefix("weighting:") {
            return Weighting::parse(w).map(|w| {
                if w == Weighting::FusionActivation {
                    Variant::Full
                } else {
                    Variant::Weighting(w)
                }
            });
        }
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::InvalidArgument(format!("unknown variant `{s}`; expected one of {}", known.join(", ")))
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub student_lr: f64,
    pub adapter_lr: f64,
    /// Epochs at which both learning rates are divided by
    /// `lr_decay_factor`; scaled from the epoch budget when absent.
    pub lr_decay_epochs: Option<Vec<usize>>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mix_temperature: f64,
    pub kl_direction: KlDirection,
    /// Feed the student update with the teacher pass that preceded the
    /// adapter update instead of a fresh one.
    pub reuse_teacher_forward: bool,
    pub variant: Variant,
    /// Holds every adapter's mixing logits fixed at these values.
    pub pinned_mix_logits: Option<[f64; 2]>,
    /// Skip all teacher work when the student objective ignores the
    /// teacher.
    pub skip_unused_teacher: bool,
    /// Normalise the frozen teacher with batch statistics rather than its
    /// source-domain running estimates.
    pub teacher_batch_stats: bool,
    /// Record wall-clock seconds in the metrics log (breaks byte-level
    /// reproducibility of the log).
    pub log_wall_clock: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 0.1,
            tau: losses::DEFAULT_TAU,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            student_lr: 0.05,
            adapter_lr: 0.01,
            lr_decay_epochs: None,
            lr_decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            mix_temperature: 1.0,
            kl_direction: KlDirection::TargetFirst,
            reuse_teacher_forward: false,
            variant: Variant::Full,
            pinned_mix_logits: None,
            skip_unused_teacher: true,
            teacher_batch_stats: true,
            log_wall_clock: false,
        }
    }
}

/// Teacher pretraining diverges at the student's rate.
pub const PRETRAIN_LR: f64 = 0.01;

impl TrainingConfig {
    /// Defaults for source-domain teacher pretraining.
    pub fn pretrain() -> Self {
        Self { student_lr: PRETRAIN_LR, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("tau", self.tau),
            ("student_lr", self.student_lr),
            ("adapter_lr", self.adapter_lr),
            ("mix_temperature", self.mix_temperature),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite value > 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay_factor >= 1.0) || !self.lr_decay_factor.is_finite() {
            return bad(format!("lr_decay_factor must be >= 1, got {}", self.lr_decay_factor));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2 for batch norm, got {}", self.batch_size));
        }
        if let Some(d) = &self.lr_decay_epochs {
            if d.windows(2).any(|w| w[0] >= w[1]) || d.iter().any(|&e| e == 0 || e >= self.epochs.max(1)) {
                return bad(format!("lr_decay_epochs {d:?} must be strictly increasing within (0, {})", self.epochs));
            }
        }
        Ok(())
    }

    /// Decay boundaries: configured, or `floor(E/3)`, `floor(7E/12)`,
    /// `floor(5E/6)` with empty or repeated boundaries dropped.
    pub fn decay_epochs(&self) -> Vec<usize> {
        if let Some(d) = &self.lr_decay_epochs {
            return d.clone();
        }
        let e = self.epochs;
        let mut out: Vec<usize> = [e / 3, 7 * e / 12, 5 * e / 6].into_iter().filter(|&d| d > 0).collect();
        out.dedup();
        out
    }

    /// Multiplier applied to both base learning rates during `epoch`
    /// (zero-based).
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs().iter().filter(|&&d| d <= epoch).count();
        self.lr_decay_factor.powi(-(n as i32))
    }

    /// SHA-256 (hex) of the canonical TOML form.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(crate::container::sha256(self.to_toml()?.as_bytes())))
    }

    fn teacher_needed(&self) -> bool {
        let t = self.variant.student_terms();
        !self.skip_unused_teacher || (t.kt && self.beta > 0.0) || (t.dikt && self.gamma > 0.0)
    }

    fn dikt_active(&self) -> bool {
        self.variant.student_terms().dikt && self.gamma > 0.0
    }
}

/// Per-epoch metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub student_lr: f64,
    pub adapter_lr: f64,
    pub teacher: Option<LossBreakdown>,
    pub student: LossBreakdown,
    pub student_accuracy: f64,
    pub teacher_accuracy: Option<f64>,
    pub lambdas: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seconds: Option<f64>,
}

pub const METRICS_SCHEMA: &str = "phasekd.metrics.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub schema: String,
    pub fields: Vec<String>,
    pub variant: String,
    pub config_digest: String,
}

impl MetricsHeader {
    pub fn new(config: &TrainingConfig) -> Result<Self> {
        Ok(Self {
            schema: METRICS_SCHEMA.into(),
            fields: [
                "epoch",
                "step",
                "student_lr",
                "adapter_lr",
                "teacher",
                "student",
                "student_accuracy",
                "teacher_accuracy",
                "lambdas",
                "seconds",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            variant: config.variant.name(),
            config_digest: config.digest()?,
        })
    }
}

/// Serialises a header plus records as JSON lines.
pub fn metrics_jsonl(header: &MetricsHeader, records: &[MetricsRecord]) -> Result<String> {
    let mut out = serde_json::to_string(header).map_err(|e| Error::Format(e.to_string()))?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Which half of a step just finished, for observers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepPhase {
    Teacher,
    Student,
}

/// Losses of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub teacher: Option<LossBreakdown>,
    pub student: LossBreakdown,
}

/// Aborts on a non-finite loss, naming the first node that went bad.
fn check_finite(tape: &Tape, loss: Var, what: &str) -> Result<()> {
    if tape.value(loss).all_finite() {
        return Ok(());
    }
    match tape.first_non_finite() {
        Some((node, op)) => Err(Error::NonFinite {
            tensor: format!("{what} node {node}"),
            detail: format!("first non-finite value produced by `{op}`"),
        }),
        None => Err(Error::NonFinite { tensor: what.into(), detail: "loss is not finite".into() }),
    }
}

fn phase_hook(phases: &mut Vec<Var>) -> impl FnMut(usize, &mut Tape, Var) -> Result<Var> + '_ {
    move |_, tape, f| {
        let spectrum = tape.dft2(f)?;
        phases.push(tape.phase(spectrum)?);
        Ok(f)
    }
}

/// Teacher, adapters, student and transfer heads with their optimizers.
#[derive(Clone, Debug)]
pub struct Session {
    pub config: TrainingConfig,
    pub teacher: Network,
    pub adapters: Option<AdapterSet>,
    pub student: Network,
    pub transfer: ParamStore,
    pub weighting: WeightingHead,
    pub mapping_store: ParamStore,
    pub mapping: Option<FeatureMapping>,
    pub student_opt: Sgd,
    pub mapping_opt: Sgd,
    pub transfer_opt: Adam,
    pub adapter_opt: Option<Adam>,
    pub teacher_opt: Option<Adam>,
    pub shuffle_rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: u64,
}

struct TeacherPass {
    logits: Tensor,
    phases: Vec<Tensor>,
}

impl Session {
    /// `teacher` is the pretrained source network; it is never modified
    /// unless the variant trains the whole teacher.
    pub fn new(config: TrainingConfig, teacher: Network, student_spec: crate::networks::NetworkSpec) -> Result<Self> {
        config.validate()?;
        if teacher.spec.input != student_spec.input || teacher.spec.num_classes != student_spec.num_classes {
            return Err(Error::InvalidArgument("teacher and student disagree on input or class count".into()));
        }
        let seed = config.seed;
        let student = Network::new(student_spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1])))?;
        let shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 2]));
        let adapters = if config.variant.uses_adapters() {
            let mut set = AdapterSet::attach(
                &teacher.spec.block_channels,
                ADAPTER_REDUCTION,
                config.mix_temperature,
                &mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 3])),
            )?;
            set.set_mix_logits(config.pinned_mix_logits.unwrap_or(INITIAL_MIX_LOGITS));
            Some(set)
        } else {
            None
        };
        let mut transfer = ParamStore::new();
        let weighting = WeightingHead::register(
            &mut transfer,
            config.variant.weighting(),
            &teacher.spec.block_channels,
            ACTIVATION_REDUCTION,
            &mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 4])),
        )?;
        let m_t: usize = teacher.spec.block_channels.iter().sum();
        let m_s: usize = student.spec.block_channels.iter().sum();
        let mut mapping_store = ParamStore::new();
        let mapping = (m_s != m_t)
            .then(|| {
                FeatureMapping::register(
                    &mut mapping_store,
                    "mapping",
                    m_s,
                    m_t,
                    MAPPING_REDUCTION,
                    &mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 5])),
                )
            })
            .transpose()?;
        let student_opt = Sgd::new(&student.store, config.momentum, config.weight_decay);
        let mapping_opt = Sgd::new(&mapping_store, config.momentum, config.weight_decay);
        let transfer_opt = Adam::new(&transfer);
        let adapter_opt = adapters.as_ref().map(|a| Adam::new(&a.store));
        let teacher_opt = (config.variant == Variant::LearnableTeacherFull).then(|| Adam::new(&teacher.store));
        Ok(Self {
            config,
            teacher,
            adapters,
            student,
            transfer,
            weighting,
            mapping_store,
            mapping,
            student_opt,
            mapping_opt,
            transfer_opt,
            adapter_opt,
            teacher_opt,
            shuffle_rng,
            epoch: 0,
            step: 0,
        })
    }

    /// Every parameter store with a stable name.
    pub fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut out = vec![("teacher", &self.teacher.store)];
        if let Some(a) = &self.adapters {
            out.push(("adapters", &a.store));
        }
        out.push(("transfer", &self.transfer));
        out.push(("student", &self.student.store));
        out.push(("mapping", &self.mapping_store));
        out
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.adapters.as_ref().map(AdapterSet::lambdas).unwrap_or_default()
    }

    fn teacher_mode(&self) -> LayerMode {
        if self.teacher_opt.is_some() {
            LayerMode::TRAIN
        } else {
            self.teacher_inference_mode()
        }
    }

    /// Mode of the teacher (and its adapters) when only read from.
    pub fn teacher_inference_mode(&self) -> LayerMode {
        if self.config.teacher_batch_stats {
            LayerMode::TRAIN_FROZEN_STATS
        } else {
            LayerMode::EVAL
        }
    }

    /// Teacher forward on `tape`. Returns logits and phase stacks; with
    /// adapters the phases are those of the adapter inputs.
    fn teacher_forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        trainable: bool,
        teacher_mode: LayerMode,
        adapter_mode: LayerMode,
    ) -> Result<(Var, Vec<Var>, Bound, Option<Bound>)> {
        let teacher_bound = self.teacher.store.bind(tape, trainable && self.teacher_opt.is_some());
        let mut phases = Vec::new();
        let out = match &mut self.adapters {
            Some(set) => {
                let adapter_bound = set.store.bind(tape, trainable);
                let adapters = set.adapters.clone();
                let store = &mut set.store;
                let mut hook = |i: usize, tape: &mut Tape, f: Var| -> Result<Var> {
                    let o = adapters[i].forward(tape, store, &adapter_bound, f, adapter_mode)?;
                    phases.push(o.phase);
                    Ok(o.f_ift)
                };
                let out = self.teacher.forward_with(tape, &teacher_bound, x, teacher_mode, &mut hook)?;
                return Ok((out.logits, phases, teacher_bound, Some(adapter_bound)));
            }
            None => self.teacher.forward_with(tape, &teacher_bound, x, teacher_mode, &mut phase_hook(&mut phases))?,
        };
        Ok((out.logits, phases, teacher_bound, None))
    }

    /// Teacher (with adapters when present) logits, no state updates.
    pub fn teacher_logits(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let m = self.teacher_inference_mode();
        let (logits, ..) = self.teacher_forward(&mut tape, x, false, m, m)?;
        Ok(tape.value(logits).clone())
    }

    pub fn train_step(&mut self, batch: &Split, lr_scale: f64) -> Result<StepLosses> {
        self.train_step_observed(batch, lr_scale, &mut |_, _| {})
    }

    /// One interactive step; `observe` runs after the teacher update and
    /// after the student update.
    pub fn train_step_observed(
        &mut self,
        batch: &Split,
        lr_scale: f64,
        observe: &mut dyn FnMut(StepPhase, &Session),
    ) -> Result<StepLosses> {
        let cfg = self.config.clone();
        let student_lr = cfg.student_lr * lr_scale;
        let adapter_lr = cfg.adapter_lr * lr_scale;
        let labels = &batch.labels;

        // Student forward; phases are only needed for the transfer loss.
        let mut st = Tape::new();
        let s_bound = self.student.store.bind(&mut st, true);
        let x = st.constant(batch.images.clone());
        let mut s_phases = Vec::new();
        let s_out = if cfg.dikt_active() {
            self.student.forward_with(&mut st, &s_bound, x, LayerMode::TRAIN, &mut phase_hook(&mut s_phases))?
        } else {
            self.student.forward(&mut st, &s_bound, x, LayerMode::TRAIN)?
        };
        let s_logits_value = st.value(s_out.logits).clone();

        let mut teacher_losses = None;
        let teacher_pass = if cfg.teacher_needed() {
            let mut tt = Tape::new();
            let tx = tt.constant(batch.images.clone());
            let teacher_mode = self.teacher_mode();
            let (t_logits, t_phases, t_bound, a_bound) =
                self.teacher_forward(&mut tt, tx, true, teacher_mode, LayerMode::TRAIN)?;
            let first = TeacherPass {
                logits: tt.value(t_logits).clone(),
                phases: t_phases.iter().map(|p| tt.value(*p).clone()).collect(),
            };
            if self.adapter_opt.is_some() || self.teacher_opt.is_some() {
                let s_const = tt.constant(s_logits_value.clone());
                let obj = losses::teacher_total(
                    &mut tt,
                    t_logits,
                    s_const,
                    labels,
                    cfg.beta,
                    cfg.tau,
                    cfg.kl_direction,
                    cfg.variant.teacher_terms(),
                )?;
                check_finite(&tt, obj.total, "teacher")?;
                teacher_losses = Some(obj.breakdown(&tt));
                let grads = tt.backward(obj.total)?;
                if let (Some(set), Some(opt), Some(ab)) = (&mut self.adapters, &mut self.adapter_opt, &a_bound) {
                    let mut g = set.store.collect_grads(ab, &grads);
                    if let Some(logits) = cfg.pinned_mix_logits {
                        for a in &set.adapters {
                            g[a.mix_logits.index()] = None;
                        }
                        opt.step(&mut set.store, &g, adapter_lr)?;
                        set.set_mix_logits(logits);
                    } else {
                        opt.step(&mut set.store, &g, adapter_lr)?;
                    }
                }
                if let Some(opt) = &mut self.teacher_opt {
                    let g = self.teacher.store.collect_grads(&t_bound, &grads);
                    opt.step(&mut self.teacher.store, &g, adapter_lr)?;
                }
            }
            observe(StepPhase::Teacher, self);
            if cfg.reuse_teacher_forward || (self.adapter_opt.is_none() && self.teacher_opt.is_none()) {
                Some(first)
            } else {
                let mut tt = Tape::new();
                let tx = tt.constant(batch.images.clone());
                let mode = if self.teacher_opt.is_some() {
                    LayerMode::TRAIN_FROZEN_STATS
                } else {
                    self.teacher_inference_mode()
                };
                let (t_logits, t_phases, ..) =
                    self.teacher_forward(&mut tt, tx, false, mode, LayerMode::TRAIN_FROZEN_STATS)?;
                Some(TeacherPass {
                    logits: tt.value(t_logits).clone(),
                    phases: t_phases.iter().map(|p| tt.value(*p).clone()).collect(),
                })
            }
        } else {
            None
        };

        // Student objective.
        let t_logits = match &teacher_pass {
            Some(p) => st.constant(p.logits.clone()),
            None => st.constant(Tensor::zeros(&[labels.len(), self.student.spec.num_classes])),
        };
        let tr_bound = self.transfer.bind(&mut st, true);
        let m_bound = self.mapping_store.bind(&mut st, true);
        let transfer = match (&teacher_pass, cfg.dikt_active()) {
            (Some(p), true) => {
                let t_consts: Vec<Var> = p.phases.iter().map(|t| st.constant(t.clone())).collect();
                let t_fused = fusion::fuse(&mut st, &t_consts)?;
                let s_fused = fusion::fuse(&mut st, &s_phases)?;
                let (s_fused, t_fused) = fusion::align_spatial(&mut st, s_fused, t_fused)?;
                let s_fused = match &self.mapping {
                    Some(m) => m.forward(&mut st, &m_bound, s_fused)?,
                    None => s_fused,
                };
                match self.weighting.weights(&mut st, &tr_bound, t_fused)? {
                    Some(s) => Some((fusion::activate(&mut st, s_fused, s)?, fusion::activate(&mut st, t_fused, s)?)),
                    None => Some((s_fused, t_fused)),
                }
            }
            _ => None,
        };
        let obj = losses::student_total(
            &mut st,
            s_out.logits,
            t_logits,
            transfer,
            labels,
            cfg.beta,
            cfg.gamma,
            cfg.tau,
            cfg.kl_direction,
            cfg.variant.student_terms(),
        )?;
        check_finite(&st, obj.total, "student")?;
        let student_losses = obj.breakdown(&st);
        let grads = st.backward(obj.total)?;
        let g = self.student.store.collect_grads(&s_bound, &grads);
        self.student_opt.step(&mut self.student.store, &g, student_lr)?;
        if transfer.is_some() {
            let g = self.mapping_store.collect_grads(&m_bound, &grads);
            self.mapping_opt.step(&mut self.mapping_store, &g, student_lr)?;
            let g = self.transfer.collect_grads(&tr_bound, &grads);
            self.transfer_opt.step(&mut self.transfer, &g, adapter_lr)?;
        }
        self.step += 1;
        observe(StepPhase::Student, self);
        Ok(StepLosses { teacher: teacher_losses, student: student_losses })
    }

    /// Shuffled mini-batch index lists for one epoch; a trailing batch of
    /// one example is merged into its predecessor.
    pub fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle_rng);
        epoch_chunks(&order, self.config.batch_size)
    }

    pub fn student_accuracy(&mut self, split: &Split) -> Result<f64> {
        evaluate(&mut self.student, split)
    }

    pub fn teacher_accuracy(&mut self, split: &Split) -> Result<f64> {
        let mut preds = Vec::with_capacity(split.len());
        for chunk in (0..split.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
            let logits = self.teacher_logits(&split.images.gather_batch(chunk))?;
            preds.extend(argmax_rows(&logits)?);
        }
        accuracy(&preds, &split.labels)
    }

    /// Runs `epochs` epochs from the current state.
    pub fn run(&mut self, train: &Split, test: &Split, checkpoint_dir: Option<&Path>) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        let decays = self.config.decay_epochs();
        while self.epoch < self.config.epochs {
            let start = Instant::now();
            let scale = self.config.lr_scale(self.epoch);
            let mut t_sum: Option<LossBreakdown> = None;
            let mut s_sum = LossBreakdown::default();
            let batches = self.epoch_batches(train.len());
            for idx in &batches {
                let batch = train.batch(idx)?;
                let l = self.train_step(&batch, scale)?;
                accumulate(&mut s_sum, &l.student);
                if let Some(t) = l.teacher {
                    accumulate(t_sum.get_or_insert_with(LossBreakdown::default), &t);
                }
            }
            let n = batches.len() as f64;
            let student_accuracy = self.student_accuracy(test)?;
            let teacher_accuracy = if self.config.teacher_needed() { Some(self.teacher_accuracy(test)?) } else { None };
            self.epoch += 1;
            records.push(MetricsRecord {
                epoch: self.epoch,
                step: self.step,
                student_lr: self.config.student_lr * scale,
                adapter_lr: self.config.adapter_lr * scale,
                teacher: t_sum.map(|t| average(t, n)),
                student: average(s_sum, n),
                student_accuracy,
                teacher_accuracy,
                lambdas: self.lambdas(),
                seconds: self.config.log_wall_clock.then(|| start.elapsed().as_secs_f64()),
            });
            if let Some(dir) = checkpoint_dir {
                if decays.contains(&self.epoch) || self.epoch == self.config.epochs {
                    self.checkpoint()?.save(&dir.join(format!("epoch{:03}.ckpt", self.epoch)))?;
                }
            }
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "kind": "session",
            "epoch": self.epoch,
            "step": self.step,
            "config": self.config,
            "teacher_spec": self.teacher.spec,
            "student_spec": self.student.spec,
            "shuffle_rng": {
                "seed": hex::encode(self.shuffle_rng.get_seed()),
                "stream": self.shuffle_rng.get_stream().to_string(),
                "word_pos": self.shuffle_rng.get_word_pos().to_string(),
            },
        });
        let mut ck = Checkpoint::new(meta);
        for (name, store) in self.stores() {
            ck.stores.push((name.to_string(), store.clone()));
        }
        ck.sgd.push(("student".into(), self.student_opt.clone()));
        ck.sgd.push(("mapping".into(), self.mapping_opt.clone()));
        ck.adam.push(("transfer".into(), self.transfer_opt.clone()));
        if let Some(o) = &self.adapter_opt {
            ck.adam.push(("adapters".into(), o.clone()));
        }
        if let Some(o) = &self.teacher_opt {
            ck.adam.push(("teacher".into(), o.clone()));
        }
        Ok(ck)
    }
}

fn epoch_chunks(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn accumulate(acc: &mut LossBreakdown, x: &LossBreakdown) {
    acc.ce += x.ce;
    acc.kt += x.kt;
    acc.dikt += x.dikt;
    acc.total += x.total;
    acc.beta = x.beta;
    acc.gamma = x.gamma;
    acc.tau = x.tau;
}

fn average(mut b: LossBreakdown, n: f64) -> LossBreakdown {
    b.ce /= n;
    b.kt /= n;
    b.dikt /= n;
    b.total /= n;
    b
}

const EVAL_CHUNK: usize = 256;

/// Eval-mode accuracy of `net` on `split`; ties go to the lowest class.
pub fn evaluate(net: &mut Network, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty split".into()));
    }
    let mut preds = Vec::with_capacity(split.len());
    for chunk in (0..split.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
        let logits = net.predict_logits(&split.images.gather_batch(chunk))?;
        preds.extend(argmax_rows(&logits)?);
    }
    accuracy(&preds, &split.labels)
}

/// Plain cross-entropy training of one network with momentum SGD and the
/// step schedule. Returns per-epoch `(mean loss, test accuracy)`.
pub fn train_supervised(
    net: &mut Network,
    train: &Split,
    test: &Split,
    config: &TrainingConfig,
) -> Result<Vec<(f64, f64)>> {
    config.validate()?;
    let mut opt = Sgd::new(&net.store, config.momentum, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 2]));
    let mut out = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.student_lr * config.lr_scale(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let batches = epoch_chunks(&order, config.batch_size);
        let mut loss_sum = 0.0;
        for idx in &batches {
            let batch = train.batch(idx)?;
            let mut tape = Tape::new();
            let bound = net.store.bind(&mut tape, true);
            let x = tape.constant(batch.images.clone());
            let out = net.forward(&mut tape, &bound, x, LayerMode::TRAIN)?;
            let loss = losses::ce_loss(&mut tape, out.logits, &batch.labels)?;
            check_finite(&tape, loss, "supervised")?;
            loss_sum += tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let g = net.store.collect_grads(&bound, &grads);
            opt.step(&mut net.store, &g, lr)?;
        }
        out.push((loss_sum / batches.len() as f64, evaluate(net, test)?));
    }
    Ok(out)
}

/// Source-domain pretraining of a fresh teacher.
pub fn pretrain_teacher(
    spec: crate::networks::NetworkSpec,
    train: &Split,
    test: &Split,
    config: &TrainingConfig,
) -> Result<(Network, Vec<(f64, f64)>)> {
    let mut net = Network::new(spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 0])))?;
    let log = train_supervised(&mut net, train, test, config)?;
    Ok((net, log))
}

/// Checkpoint holding a single network.
pub fn network_checkpoint(net: &Network, kind: &str, extra: serde_json::Value) -> Checkpoint {
    let mut ck = Checkpoint::new(serde_json::json!({ "kind": kind, "spec": net.spec, "extra": extra }));
    ck.stores.push(("network".into(), net.store.clone()));
    ck
}

/// Rebuilds a network from a checkpoint made by [`network_checkpoint`] or
/// [`Session::checkpoint`] (`store` names which network to take).
pub fn network_from_checkpoint(ck: &Checkpoint, store: &str) -> Result<Network> {
    let spec_key = match store {
        "network" => "spec",
        "teacher" => "teacher_spec",
        "student" => "student_spec",
        other => return Err(Error::InvalidArgument(format!("unknown network store `{other}`"))),
    };
    let spec: crate::networks::NetworkSpec = serde_json::from_value(ck.meta[spec_key].clone())
        .map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
    let mut net = Network::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let saved = ck.store(store)?;
    if saved.len() != net.store.len() {
        return Err(Error::Format(format!(
            "store `{store}` has {} entries, network needs {}",
            saved.len(),
            net.store.len()
        )));
    }
    for (dst, src) in net.store.entries_mut().iter_mut().zip(saved.entries()) {
        if dst.name != src.name || dst.value.shape() != src.value.shape() || dst.kind != src.kind {
            return Err(Error::Format(format!(
                "checkpoint entry `{}` does not match network entry `{}`",
                src.name, dst.name
            )));
        }
        dst.value = src.value.clone();
    }
    Ok(net)
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub session: Session,
    pub records: Vec<MetricsRecord>,
    pub initial_student_accuracy: f64,
}

/// Full interactive training on the target train split, evaluated on the
/// target test split after every epoch.
pub fn train(
    config: &TrainingConfig,
    teacher: &Network,
    student_spec: crate::networks::NetworkSpec,
    train_split: &Split,
    test_split: &Split,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut session = Session::new(config.clone(), teacher.clone(), student_spec)?;
    let initial_student_accuracy = session.student_accuracy(test_split)?;
    let records = session.run(train_split, test_split, checkpoint_dir)?;
    Ok(TrainOutcome { session, records, initial_student_accuracy })
}

/// [`train`] with `config.variant` replaced.
pub fn run_ablation(
    variant: Variant,
    config: &TrainingConfig,
    teacher: &Network,
    student_spec: crate::networks::NetworkSpec,
    train_split: &Split,
    test_split: &Split,
) -> Result<TrainOutcome> {
    let cfg = TrainingConfig { variant, ..config.clone() };
    train(&cfg, teacher, student_spec, train_split, test_split, None)
}
