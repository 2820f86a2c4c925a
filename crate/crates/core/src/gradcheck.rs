//! Finite-difference verification of every backward rule.
//!
//! Each check builds a small random instance, reduces it to a scalar with a
//! fixed random projection, and compares the tape's gradients against
//! central differences. Coordinates where the two one-sided differences
//! disagree sit on a kink (relu, the phase branch cut) and are skipped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::fusion::{self, FeatureMapping, Weighting, WeightingHead};
use crate::graph::{BnMode, Fault, KlDirection, Tape, Var};
use crate::layers::LayerMode;
use crate::losses::{self, Terms};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_CASES: usize = 50;
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const ERROR_FLOOR: f64 = 1e-2;
/// One-sided slopes further apart than this (relative) mark a kink.
const KINK_THRESHOLD: f64 = 1e-2;
/// At most this many coordinates per leaf are probed in one case.
const MAX_COORDS: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub cases: usize,
    pub step: f64,
    pub tolerance: f64,
    pub fault: Option<Fault>,
    /// Restricts the run to checks whose name contains one of these.
    pub only: Vec<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: DEFAULT_CASES,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
            only: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub name: String,
    pub cases: usize,
    pub coordinates: usize,
    pub skipped: usize,
    pub worst_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
    pub warnings: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&OpReport> {
        self.ops.iter().filter(|o| !o.passed).collect()
    }

    pub fn worst(&self) -> f64 {
        self.ops.iter().map(|o| o.worst_relative_error).fold(0.0, f64::max)
    }
}

/// A differentiable instance: rebuilds the graph from leaf values and
/// returns the scalar loss plus the leaf handles, in input order.
type Build = Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)>>;

struct Instance {
    inputs: Vec<Tensor>,
    build: Build,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn leaves(tape: &mut Tape, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect()
}

/// `sum(out * r)` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn projected(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    normal(rng, shape)
}

/// Elementwise op on one input, projected.
fn unary(rng: &mut ChaCha8Rng, x: Tensor, out_shape: Vec<usize>, f: fn(&mut Tape, Var) -> Result<Var>) -> Instance {
    let r = projected(rng, &out_shape);
    Instance {
        inputs: vec![x],
        build: Box::new(move |tape, inp| {
            let v = leaves(tape, inp);
            let y = f(tape, v[0])?;
            Ok((project(tape, y, &r)?, v))
        }),
    }
}

fn small_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let b = rng.random_range(2..=3);
    let c = rng.random_range(1..=3);
    let side = [2, 4][rng.random_range(0..2)];
    (b, c, side, side)
}

fn spectral_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    let planes = rng.random_range(1..=2);
    let h = [2, 3, 4][rng.random_range(0..3)];
    let w = [2, 4, 5][rng.random_range(0..3)];
    (planes, h, w)
}

/// Phase of a random spectrum kept away from the origin and the branch cut.
fn safe_complex(rng: &mut ChaCha8Rng, planes: usize, h: usize, w: usize) -> Tensor {
    let n = planes * h * w;
    let mut data = vec![0.0; 2 * n];
    for p in 0..planes {
        for i in 0..h * w {
            let r = rng.random_range(0.5..2.0);
            let a = rng.random_range(-3.0..3.0);
            data[p * 2 * h * w + i] = r * f64::cos(a);
            data[p * 2 * h * w + h * w + i] = r * f64::sin(a);
        }
    }
    Tensor::new(vec![planes, 2, h, w], data).expect("sized")
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn op_instance(name: &str, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let inst = match name {
        "conv1x1" => {
            let (b, c, h, w) = small_dims(rng);
            let cout = rng.random_range(1..=3);
            let r = projected(rng, &[b, cout, h, w]);
            Instance {
                inputs: vec![normal(rng, &[b, c, h, w]), normal(rng, &[cout, c])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = tape.conv1x1(v[0], v[1])?;
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let (b, c, h, w) = small_dims(rng);
            let mode = if name.ends_with("train") { BnMode::Train } else { BnMode::Eval };
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            let r = projected(rng, &[b, c, h, w]);
            Instance {
                inputs: vec![normal(rng, &[b, c, h, w]), uniform(rng, &[c], 0.5, 1.5), normal(rng, &[c])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let (y, _) = tape.batch_norm(v[0], v[1], v[2], mode, &mean, &var)?;
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "relu" => {
            let (b, c, h, w) = small_dims(rng);
            let x = normal(rng, &[b, c, h, w]);
            unary(rng, x, vec![b, c, h, w], |t, x| Ok(t.relu(x)))
        }
        "sigmoid" => {
            let n = rng.random_range(1..=8);
            let x = uniform(rng, &[n], -4.0, 4.0);
            unary(rng, x, vec![n], |t, x| Ok(t.sigmoid(x)))
        }
        "avg_pool" => {
            let (b, c, _, _) = small_dims(rng);
            let r = projected(rng, &[b, c, 2, 2]);
            Instance {
                inputs: vec![normal(rng, &[b, c, 4, 8])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = tape.avg_pool_to(v[0], (2, 2))?;
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "linear" => {
            let (n, k, l) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
            let with_bias = rng.random_bool(0.5);
            let r = projected(rng, &[n, l]);
            let mut inputs = vec![normal(rng, &[n, k]), normal(rng, &[l, k])];
            if with_bias {
                inputs.push(normal(rng, &[l]));
            }
            Instance {
                inputs,
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = tape.linear(v[0], v[1], v.get(2).copied())?;
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "add" | "sub" | "mul" | "mix" => {
            let n = rng.random_range(1..=6);
            let r = projected(rng, &[n]);
            let mut inputs = vec![normal(rng, &[n]), normal(rng, &[n])];
            if name == "mix" {
                inputs.push(uniform(rng, &[1], 0.0, 1.0));
            }
            let op = name.to_string();
            Instance {
                inputs,
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = match op.as_str() {
                        "add" => tape.add(v[0], v[1])?,
                        "sub" => tape.sub(v[0], v[1])?,
                        "mul" => tape.mul(v[0], v[1])?,
                        _ => tape.mix(v[0], v[1], v[2])?,
                    };
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "scale" => {
            let n = rng.random_range(1..=6);
            let c = rng.random_range(-2.0..2.0);
            let r = projected(rng, &[n]);
            Instance {
                inputs: vec![normal(rng, &[n])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = tape.scale(v[0], c);
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "softmax" => {
            let (n, k) = (rng.random_range(1..=3), rng.random_range(2..=5));
            let tau = rng.random_range(0.5..4.0);
            let r = projected(rng, &[n, k]);
            Instance {
                inputs: vec![normal(rng, &[n, k])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = tape.softmax(v[0], tau)?;
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "select" | "gather" => {
            let n = rng.random_range(2..=6);
            let index: Vec<usize> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(0..n)).collect();
            let r = projected(rng, &[index.len()]);
            let gather = name == "gather";
            Instance {
                inputs: vec![normal(rng, &[n])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    if gather {
                        let y = tape.gather(v[0], index.clone())?;
                        Ok((project(tape, y, &r)?, v))
                    } else {
                        let y = tape.select(v[0], index[0])?;
                        Ok((tape.scale(y, r.data()[0]), v))
                    }
                }),
            }
        }
        "sum" | "mean" => {
            let n = rng.random_range(1..=6);
            let mean = name == "mean";
            Instance {
                inputs: vec![normal(rng, &[n])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let sq = tape.mul(v[0], v[0])?;
                    Ok((if mean { tape.mean(sq) } else { tape.sum(sq) }, v))
                }),
            }
        }
        "cross_entropy" => {
            let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
            let y = labels(rng, n, k);
            Instance {
                inputs: vec![normal(rng, &[n, k])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    Ok((tape.cross_entropy(v[0], &y)?, v))
                }),
            }
        }
        "kl_div_target_first" | "kl_div_learner_first" => {
            let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
            let dir = if name.ends_with("target_first") { KlDirection::TargetFirst } else { KlDirection::LearnerFirst };
            let target = normal(rng, &[n, k]);
            let tau = rng.random_range(1.0..5.0);
            Instance {
                inputs: vec![normal(rng, &[n, k])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let t = tape.constant(target.clone());
                    Ok((tape.kl_div(t, v[0], tau, dir)?, v))
                }),
            }
        }
        "mse" => {
            let n = rng.random_range(1..=6);
            Instance {
                inputs: vec![normal(rng, &[n]), normal(rng, &[n])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    Ok((tape.mse(v[0], v[1])?, v))
                }),
            }
        }
        "dft2" => {
            let (p, h, w) = spectral_dims(rng);
            let r = projected(rng, &[p, 2, h, w]);
            Instance {
                inputs: vec![normal(rng, &[p, h, w])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = tape.dft2(v[0])?;
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "idft2" => {
            // Perturbations must keep the spectrum conjugate-symmetric, so the
            // spectrum is parameterised through a real plane and a gain.
            let (p, h, w) = spectral_dims(rng);
            let r = projected(rng, &[p, h, w]);
            let gain = uniform(rng, &[1], 0.5, 2.0);
            Instance {
                inputs: vec![normal(rng, &[p, h, w]), gain],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let f = tape.dft2(v[0])?;
                    let n = tape.value(f).len();
                    let g = tape.gather(v[1], vec![0; n])?;
                    let shape = tape.value(f).shape().to_vec();
                    let g = tape.reshape(g, &shape)?;
                    let f = tape.mul(f, g)?;
                    let y = tape.idft2(f)?;
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "amplitude" | "phase" => {
            let (p, h, w) = spectral_dims(rng);
            let r = projected(rng, &[p, h, w]);
            let phase = name == "phase";
            Instance {
                inputs: vec![safe_complex(rng, p, h, w)],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = if phase { tape.phase(v[0])? } else { tape.amplitude(v[0])? };
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "couple" => {
            let (p, h, w) = spectral_dims(rng);
            let r = projected(rng, &[p, 2, h, w]);
            Instance {
                inputs: vec![uniform(rng, &[p, h, w], 0.2, 2.0), uniform(rng, &[p, h, w], -3.0, 3.0)],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = tape.couple(v[0], v[1])?;
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "concat" => {
            let (b, _, h, w) = small_dims(rng);
            let (c1, c2) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let r = projected(rng, &[b, c1 + c2, h, w]);
            Instance {
                inputs: vec![normal(rng, &[b, c1, h, w]), normal(rng, &[b, c2, h, w])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = tape.concat_channels(&v)?;
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "scale_channels" | "scale_channels_shared" => {
            let (b, c, h, w) = small_dims(rng);
            let s_shape = if name.ends_with("shared") { vec![c] } else { vec![b, c] };
            let r = projected(rng, &[b, c, h, w]);
            Instance {
                inputs: vec![normal(rng, &[b, c, h, w]), normal(rng, &s_shape)],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = tape.scale_channels(v[0], v[1])?;
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "pad_channels" => {
            let (b, c, h, w) = small_dims(rng);
            let cout = c + rng.random_range(0..=2);
            let r = projected(rng, &[b, cout, h, w]);
            Instance {
                inputs: vec![normal(rng, &[b, c, h, w])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = tape.pad_channels(v[0], cout)?;
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "reshape" => {
            let (b, c, h, w) = small_dims(rng);
            let r = projected(rng, &[b, c * h * w]);
            Instance {
                inputs: vec![normal(rng, &[b, c, h, w])],
                build: Box::new(move |tape, inp| {
                    let v = leaves(tape, inp);
                    let y = tape.reshape(v[0], &[b, c * h * w])?;
                    Ok((project(tape, y, &r)?, v))
                }),
            }
        }
        "chain:adapter" => adapter_chain(rng)?,
        "chain:fusion_activation" => fusion_chain(rng)?,
        "chain:teacher_total" => teacher_total_chain(rng),
        "chain:student_total" => student_total_chain(rng),
        other => return Err(Error::InvalidArgument(format!("no gradient check named `{other}`"))),
    };
    Ok(inst)
}

/// Block output through decouple, adaptation, refurbishment, couple and
/// the inverse transform, with every adapter parameter as a leaf.
fn adapter_chain(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let channels = [4, 8][rng.random_range(0..2)];
    let side = [2, 4][rng.random_range(0..2)];
    let b = 2;
    let mut store = ParamStore::new();
    let adapter = Adapter::register(&mut store, "adapter", channels, 4, rng.random_range(0.5..2.0), rng)?;
    let logits = normal(rng, &[2]);
    store.get_mut(adapter.mix_logits).data_mut().copy_from_slice(logits.data());
    let mut inputs = vec![normal(rng, &[b, channels, side, side])];
    inputs.extend(store.param_values().into_iter().map(|t| t.map(|v| v + 0.1)));
    let r = projected(rng, &[b, channels, side, side]);
    Ok(Instance {
        inputs,
        build: Box::new(move |tape, inp| {
            let mut store = store.clone();
            store.set_param_values(&inp[1..]);
            let f = tape.leaf(inp[0].clone(), true);
            let bound = store.bind(tape, true);
            let out = adapter.forward(tape, &mut store, &bound, f, LayerMode::TRAIN_FROZEN_STATS)?;
            let mut vars = vec![f];
            vars.extend(bound.params());
            Ok((project(tape, out.f_ift, &r)?, vars))
        }),
    })
}

/// Phase stacks fused, squeezed, weighted by the attention head, activated
/// on both sides, mapped to the teacher width and compared by MSE.
fn fusion_chain(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let b = 2;
    let teacher_channels = vec![4, 4, 8];
    let student_channels = [4, 4, 4];
    let sides = [4, 2, 2];
    let mut store = ParamStore::new();
    let head = WeightingHead::register(&mut store, Weighting::FusionActivation, &teacher_channels, 4, rng)?;
    let mapping = FeatureMapping::register(&mut store, "mapping", 12, 16, 4, rng)?;
    let mut inputs = Vec::new();
    for (&c, &s) in teacher_channels.iter().zip(&sides) {
        inputs.push(uniform(rng, &[b, c, s, s], -3.0, 3.0));
    }
    for (&c, &s) in student_channels.iter().zip(&sides) {
        inputs.push(uniform(rng, &[b, c, s, s], -3.0, 3.0));
    }
    let n_stacks = inputs.len();
    inputs.extend(store.param_values());
    Ok(Instance {
        inputs,
        build: Box::new(move |tape, inp| {
            let mut store = store.clone();
            store.set_param_values(&inp[n_stacks..]);
            let stacks = leaves(tape, &inp[..n_stacks]);
            let bound = store.bind(tape, true);
            let t = fusion::fuse(tape, &stacks[..3])?;
            let s = fusion::fuse(tape, &stacks[3..])?;
            let (s, t) = fusion::align_spatial(tape, s, t)?;
            let s = mapping.forward(tape, &bound, s)?;
            let w = head.weights(tape, &bound, t)?.expect("attention head");
            let s_act = fusion::activate(tape, s, w)?;
            let t_act = fusion::activate(tape, t, w)?;
            let loss = tape.mse(s_act, t_act)?;
            let mut vars = stacks;
            vars.extend(bound.params());
            Ok((loss, vars))
        }),
    })
}

fn random_terms(rng: &mut ChaCha8Rng) -> Terms {
    Terms { ce: rng.random_bool(0.8), kt: rng.random_bool(0.8), dikt: rng.random_bool(0.8) }
}

fn teacher_total_chain(rng: &mut ChaCha8Rng) -> Instance {
    let (n, k) = (rng.random_range(2..=4), rng.random_range(2..=5));
    let y = labels(rng, n, k);
    let student = normal(rng, &[n, k]);
    let beta = rng.random_range(0.0..2.0);
    let tau = rng.random_range(1.0..5.0);
    let dir = if rng.random_bool(0.5) { KlDirection::TargetFirst } else { KlDirection::LearnerFirst };
    let mut terms = random_terms(rng);
    terms.ce |= !terms.kt;
    Instance {
        inputs: vec![normal(rng, &[n, k])],
        build: Box::new(move |tape, inp| {
            let v = leaves(tape, inp);
            let s = tape.constant(student.clone());
            let obj = losses::teacher_total(tape, v[0], s, &y, beta, tau, dir, terms)?;
            Ok((obj.total, v))
        }),
    }
}

fn student_total_chain(rng: &mut ChaCha8Rng) -> Instance {
    let (n, k) = (rng.random_range(2..=4), rng.random_range(2..=5));
    let y = labels(rng, n, k);
    let teacher = normal(rng, &[n, k]);
    let teacher_stack = normal(rng, &[n, 3, 2, 2]);
    let beta = rng.random_range(0.0..2.0);
    let gamma = rng.random_range(0.0..2.0);
    let tau = rng.random_range(1.0..5.0);
    let dir = if rng.random_bool(0.5) { KlDirection::TargetFirst } else { KlDirection::LearnerFirst };
    let mut terms = random_terms(rng);
    terms.ce |= !terms.kt && !terms.dikt;
    Instance {
        inputs: vec![normal(rng, &[n, k]), normal(rng, &[n, 3, 2, 2])],
        build: Box::new(move |tape, inp| {
            let v = leaves(tape, inp);
            let t = tape.constant(teacher.clone());
            let ts = tape.constant(teacher_stack.clone());
            let obj = losses::student_total(tape, v[0], t, Some((v[1], ts)), &y, beta, gamma, tau, dir, terms)?;
            Ok((obj.total, v))
        }),
    }
}

/// Every check, single operations first, then the composite chains.
pub const CHECKS: &[&str] = &[
    "conv1x1",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "sigmoid",
    "avg_pool",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "mix",
    "softmax",
    "select",
    "gather",
    "sum",
    "mean",
    "cross_entropy",
    "kl_div_target_first",
    "kl_div_learner_first",
    "mse",
    "dft2",
    "idft2",
    "amplitude",
    "phase",
    "couple",
    "concat",
    "scale_channels",
    "scale_channels_shared",
    "pad_channels",
    "reshape",
    "chain:adapter",
    "chain:fusion_activation",
    "chain:teacher_total",
    "chain:student_total",
];

fn new_tape(fault: Option<Fault>) -> Tape {
    match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    }
}

fn eval_loss(inst: &Instance, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = (inst.build)(&mut tape, inputs)?;
    Ok(tape.value(loss).item())
}

struct CaseResult {
    coordinates: usize,
    skipped: usize,
    worst: f64,
}

fn check_instance(inst: &Instance, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    let mut tape = new_tape(cfg.fault);
    let (loss, vars) = (inst.build)(&mut tape, &inst.inputs)?;
    let grads = tape.backward(loss)?;
    let h = cfg.step;
    let f0 = tape.value(loss).item();
    let mut out = CaseResult { coordinates: 0, skipped: 0, worst: 0.0 };
    for (i, (input, var)) in inst.inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(*var, input.shape());
        let mut coords: Vec<usize> = (0..input.len()).collect();
        if coords.len() > MAX_COORDS {
            coords = rand::seq::index::sample(rng, input.len(), MAX_COORDS).into_vec();
        }
        for j in coords {
            let mut probe = inst.inputs.clone();
            let base = input.data()[j];
            probe[i].data_mut()[j] = base + h;
            let fp = eval_loss(inst, &probe)?;
            probe[i].data_mut()[j] = base - h;
            let fm = eval_loss(inst, &probe)?;
            let (up, down) = ((fp - f0) / h, (f0 - fm) / h);
            let numeric = (fp - fm) / (2.0 * h);
            if (up - down).abs() > KINK_THRESHOLD * up.abs().max(down.abs()).max(1.0) {
                out.skipped += 1;
                continue;
            }
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ERROR_FLOOR);
            out.coordinates += 1;
            out.worst = out.worst.max(err);
        }
    }
    Ok(out)
}

/// Runs every selected check for `cfg.cases` random instances.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.step > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(Error::InvalidArgument("step and tolerance must be positive".into()));
    }
    let mut report = GradcheckReport { ops: Vec::new(), warnings: Vec::new() };
    if cfg.cases == 0 {
        report.warnings.push("0 cases requested; nothing was checked".into());
    }
    for (k, &name) in CHECKS.iter().enumerate() {
        if !cfg.only.is_empty() && !cfg.only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let mut op = OpReport {
            name: name.to_string(),
            cases: cfg.cases,
            coordinates: 0,
            skipped: 0,
            worst_relative_error: 0.0,
            passed: true,
        };
        for case in 0..cfg.cases {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, k as u64, case as u64]));
            let inst = op_instance(name, &mut rng)?;
            let r = check_instance(&inst, cfg, &mut rng)?;
            op.coordinates += r.coordinates;
            op.skipped += r.skipped;
            op.worst_relative_error = op.worst_relative_error.max(r.worst);
        }
        op.passed = op.worst_relative_error < cfg.tolerance;
        if cfg.cases > 0 && op.coordinates == 0 {
            op.passed = false;
            report.warnings.push(format!("{name}: every probed coordinate sat on a kink"));
        }
        report.ops.push(op);
    }
    if report.ops.is_empty() {
        return Err(Error::InvalidArgument(format!("no gradient check matches {:?}", cfg.only)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_few_cases() {
        let report = run(&GradcheckConfig { cases: 3, ..Default::default() }).unwrap();
        for op in &report.ops {
            assert!(op.passed, "{op:?}");
            assert!(op.coordinates > 0, "{op:?}");
        }
    }

    #[test]
    fn couple_sign_flip_is_caught() {
        let cfg = GradcheckConfig {
            cases: 2,
            fault: Some(Fault::CoupleSignFlip),
            only: vec!["couple".into()],
            ..Default::default()
        };
        let report = run(&cfg).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures()[0].name, "couple");
    }

    #[test]
    fn zero_cases_is_a_vacuous_pass_with_warning() {
        let report = run(&GradcheckConfig { cases: 0, ..Default::default() }).unwrap();
        assert!(report.passed());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn unknown_filter_is_rejected() {
        assert!(run(&GradcheckConfig { only: vec!["nope".into()], ..Default::default() }).is_err());
    }
}
