//! Ablation and sensitivity tables built from repeated training runs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::networks::{Network, NetworkSpec};
use crate::train::{run_ablation, train, TrainingConfig, Variant};

/// The five values of the default β/γ grid.
pub const DEFAULT_SWEEP_VALUES: [f64; 5] = [0.001, 0.01, 0.1, 1.0, 10.0];

/// Variants run by `ablate --variants all`, reference first.
pub fn all_variants() -> Vec<Variant> {
    let mut v = vec![Variant::Full];
    v.extend(Variant::ALL.iter().copied().filter(|&x| x != Variant::Full));
    v
}

pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    if list.trim() == "all" {
        return Ok(all_variants());
    }
    let out =
        list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<Vec<Variant>>>()?;
    if out.is_empty() {
        return Err(Error::InvalidArgument("empty variant list".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// `mean - mean(full_4ds)`; absent when full_4ds was not run.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        let name = variant.name();
        self.rows.iter().find(|r| r.variant == name)
    }

    pub fn mean(&self, variant: Variant) -> Option<f64> {
        self.row(variant).map(|r| r.mean)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<width$}  {:>8}  {:>8}  per-seed\n", "variant", "acc(%)", "delta");
        for r in &self.rows {
            let delta = r.delta.map_or("-".to_string(), |d| format!("{:+.2}", 100.0 * d));
            let per: Vec<String> = r.accuracies.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
            let _ = writeln!(s, "{:<width$}  {:>8.2}  {:>8}  {}", r.variant, 100.0 * r.mean, delta, per.join(" "));
        }
        s
    }

    pub fn to_jsonl(&self) -> Result<String> {
        jsonl(&self.rows)
    }
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Runs `jobs` closures at a time on scoped threads, preserving order.
fn parallel<T: Send>(tasks: Vec<Box<dyn FnOnce() -> Result<T> + Send + '_>>, jobs: usize) -> Result<Vec<T>> {
    let jobs = jobs.max(1);
    let mut out = Vec::with_capacity(tasks.len());
    let mut tasks = tasks.into_iter().peekable();
    while tasks.peek().is_some() {
        let wave: Vec<_> = tasks.by_ref().take(jobs).collect();
        let results = std::thread::scope(|s| {
            let handles: Vec<_> = wave.into_iter().map(|t| s.spawn(t)).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect::<Vec<_>>()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Final target-test accuracy of every `(variant, seed)` pair.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    base: &TrainingConfig,
    variants: &[Variant],
    seeds: &[u64],
    teacher: &Network,
    student_spec: &NetworkSpec,
    train_split: &Split,
    test_split: &Split,
    jobs: usize,
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one variant and one seed".into()));
    }
    let mut tasks: Vec<Box<dyn FnOnce() -> Result<f64> + Send + '_>> = Vec::new();
    for &v in variants {
        for &seed in seeds {
            let cfg = TrainingConfig { seed, ..base.clone() };
            let spec = student_spec.clone();
            tasks.push(Box::new(move || {
                let out = run_ablation(v, &cfg, teacher, spec, train_split, test_split)?;
                Ok(final_accuracy(&out.records, out.initial_student_accuracy))
            }));
        }
    }
    let accs = parallel(tasks, jobs)?;
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .zip(accs.chunks(seeds.len()))
        .map(|(v, a)| AblationRow {
            variant: v.name(),
            seeds: seeds.to_vec(),
            accuracies: a.to_vec(),
            mean: mean(a),
            delta: None,
        })
        .collect();
    if let Some(full) = rows.iter().find(|r| r.variant == Variant::Full.name()).map(|r| r.mean) {
        for r in &mut rows {
            r.delta = Some(r.mean - full);
        }
    }
    Ok(AblationTable { rows })
}

fn final_accuracy(records: &[crate::train::MetricsRecord], initial: f64) -> f64 {
    records.last().map_or(initial, |r| r.student_accuracy)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Beta,
    Gamma,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::Gamma => "gamma",
        }
    }

    pub fn apply(self, cfg: &TrainingConfig, value: f64) -> TrainingConfig {
        match self {
            SweepParam::Beta => TrainingConfig { beta: value, ..cfg.clone() },
            SweepParam::Gamma => TrainingConfig { gamma: value, ..cfg.clone() },
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepParam::Beta),
            "gamma" => Ok(SweepParam::Gamma),
            _ => Err(Error::InvalidArgument(format!("unknown sweep parameter `{s}` (beta|gamma)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Max minus min accuracy over all rows.
    pub fn spread(&self) -> f64 {
        let (lo, hi) = self
            .rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.accuracy), hi.max(r.accuracy)));
        if self.rows.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<6}  {:>10}  {:>8}\n", "param", "value", "acc(%)");
        for r in &self.rows {
            let _ = writeln!(s, "{:<6}  {:>10}  {:>8.2}", r.param.name(), r.value, 100.0 * r.accuracy);
        }
        s
    }

    pub fn to_jsonl(&self) -> Result<String> {
        jsonl(&self.rows)
    }
}

/// Trains once per value, rows sorted by value.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    base: &TrainingConfig,
    param: SweepParam,
    values: &[f64],
    teacher: &Network,
    student_spec: &NetworkSpec,
    train_split: &Split,
    test_split: &Split,
    jobs: usize,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidArgument(format!("sweep values must be positive, got {v}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let tasks: Vec<Box<dyn FnOnce() -> Result<f64> + Send + '_>> = sorted
        .iter()
        .map(|&v| {
            let cfg = param.apply(base, v);
            let spec = student_spec.clone();
            Box::new(move || {
                let out = train(&cfg, teacher, spec, train_split, test_split, None)?;
                Ok(final_accuracy(&out.records, out.initial_student_accuracy))
            }) as Box<dyn FnOnce() -> Result<f64> + Send + '_>
        })
        .collect();
    let accs = parallel(tasks, jobs)?;
    let rows = sorted.into_iter().zip(accs).map(|(value, accuracy)| SweepRow { param, value, accuracy }).collect();
    Ok(SweepTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_lists() {
        let all = parse_variants("all").unwrap();
        assert_eq!(all.len(), 12);
        assert_eq!(all[0], Variant::Full);
        assert_eq!(parse_variants("no_both, full_4ds").unwrap(), vec![Variant::NoBoth, Variant::Full]);
        assert!(parse_variants("full_4ds,bogus").is_err());
        assert!(parse_variants(",").is_err());
    }

    #[test]
    fn sweep_spread_and_text() {
        let t = SweepTable {
            rows: vec![
                SweepRow { param: SweepParam::Beta, value: 0.01, accuracy: 0.80 },
                SweepRow { param: SweepParam::Beta, value: 0.1, accuracy: 0.86 },
            ],
        };
        assert!((t.spread() - 0.06).abs() < 1e-12);
        assert_eq!(t.to_text().lines().count(), 3);
        assert_eq!(t.to_jsonl().unwrap().lines().count(), 2);
        assert!("delta".parse::<SweepParam>().is_err());
    }

    #[test]
    fn parallel_keeps_order() {
        let tasks: Vec<Box<dyn FnOnce() -> Result<usize> + Send>> =
            (0..5usize).map(|i| Box::new(move || Ok(i * i)) as Box<dyn FnOnce() -> Result<usize> + Send>).collect();
        assert_eq!(parallel(tasks, 2).unwrap(), vec![0, 1, 4, 9, 16]);
    }
}
