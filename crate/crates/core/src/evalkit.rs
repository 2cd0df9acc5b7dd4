//! Forward-prediction evaluation: weight error, return error and return scatter.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::formats::write_atomic;
use crate::policy::{evaluate_return, GaussianPolicy, ObsNormStats, ReturnEval, WeightVector};
use crate::svdcodec::SvdBasis;
use crate::tipl::TiplModel;
use crate::trajectory::WeightTrajectory;

pub const CSV_HEADER: &str = "step,trial,snapshot,wpe,repw,j_true,j_pred";

/// Mean squared elementwise difference.
pub fn wpe_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            op: "wpe",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn wpe(true_w: &WeightVector, pred_w: &WeightVector) -> Result<f64> {
    wpe_values(&true_w.values, &pred_w.values)
}

pub fn repw(j_true: f64, j_pred: f64) -> f64 {
    (j_true - j_pred).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForwardEvalConfig {
    pub prefix_len: usize,
    /// Forward prediction steps.
    pub k: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Minimum spacing between prefix starts.
    pub min_stride: usize,
    pub max_prefixes: usize,
    /// Skip return evaluation even when the trajectory names an environment.
    pub skip_returns: bool,
}

impl Default for ForwardEvalConfig {
    fn default() -> Self {
        Self {
            prefix_len: 20,
            k: 10,
            episodes: 20,
            seed: 0,
            min_stride: 10,
            max_prefixes: 20,
            skip_returns: false,
        }
    }
}

impl ForwardEvalConfig {
    /// Prefix start indices for a trajectory of `len` snapshots, spread over
    /// the whole trajectory.
    pub fn prefix_starts(&self, len: usize) -> Vec<usize> {
        let needed = self.prefix_len + self.k;
        if len < needed || self.max_prefixes == 0 {
            return Vec::new();
        }
        let valid = len - needed + 1;
        let stride = self.min_stride.max(valid.div_ceil(self.max_prefixes)).max(1);
        (0..valid).step_by(stride).take(self.max_prefixes).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.prefix_len == 0 || self.k == 0 || self.episodes == 0 {
            return Err(Error::Config("prefix_len, k and episodes must be at least 1".into()));
        }
        Ok(())
    }
}

/// One (trajectory, prefix, forward step) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub trial: u64,
    /// Index of the true snapshot being predicted.
    pub snapshot: usize,
    pub wpe: f64,
    pub repw: Option<f64>,
    pub j_true: Option<f64>,
    pub j_pred: Option<f64>,
    /// WPE of the codec roundtrip of the true snapshot.
    pub baseline_wpe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ForwardEvalConfig,
    pub rows: Vec<EvalRow>,
}

/// Source of next-token predictions; implemented by the transformer and by
/// test doubles.
pub trait Forecaster {
    fn forecast(&self, basis: &SvdBasis<f64>, prefix: &[WeightVector], k: usize) -> Result<Vec<WeightVector>>;
}

impl Forecaster for TiplModel {
    fn forecast(&self, basis: &SvdBasis<f64>, prefix: &[WeightVector], k: usize) -> Result<Vec<WeightVector>> {
        self.rollout(basis, prefix, k)
    }
}

struct ReturnProbe {
    env: EnvId,
    obs_norm: Option<ObsNormStats>,
    eval: ReturnEval,
}

impl ReturnProbe {
    fn evaluate(&self, w: &WeightVector) -> Result<f64> {
        let actor = GaussianPolicy::new(w, self.obs_norm.clone())?;
        let env = self.env;
        evaluate_return(&actor, &move || env.make(), self.eval)
    }
}

/// Rolls `k` predictions from every selected prefix of `traj` and scores them
/// against the true continuation. True and predicted weights share
/// evaluation seeds.
pub fn forward_eval(
    model: &dyn Forecaster,
    basis: &SvdBasis<f64>,
    traj: &WeightTrajectory,
    config: &ForwardEvalConfig,
) -> Result<Vec<EvalRow>> {
    config.validate()?;
    if traj.len() < config.prefix_len + config.k {
        return Err(Error::Config(format!(
            "trajectory of {} snapshots is shorter than prefix {} + {} steps",
            traj.len(),
            config.prefix_len,
            config.k
        )));
    }
    let probe = match (config.skip_returns, traj.meta.env.parse::<EnvId>()) {
        (false, Ok(env)) => Some(ReturnProbe {
            env,
            obs_norm: traj.meta.obs_norm.clone(),
            eval: ReturnEval {
                episodes: config.episodes,
                seed: config.seed,
                deterministic: true,
            },
        }),
        _ => None,
    };
    let mut true_returns: HashMap<usize, f64> = HashMap::new();
    let mut rows = Vec::new();
    for start in config.prefix_starts(traj.len()) {
        let prefix: Vec<WeightVector> = (start..start + config.prefix_len).map(|i| traj.snapshot(i)).collect();
        let preds = model.forecast(basis, &prefix, config.k)?;
        for (j, pred) in preds.iter().enumerate() {
            let idx = start + config.prefix_len + j;
            let truth = traj.snapshot(idx);
            let roundtrip = basis.decode(&basis.encode(&truth)?)?;
            let (j_true, j_pred) = match &probe {
                Some(p) => {
                    let jt = match true_returns.get(&idx) {
                        Some(&v) => v,
                        None => {
                            let v = p.evaluate(&truth)?;
                            true_returns.insert(idx, v);
                            v
                        }
                    };
                    (Some(jt), Some(p.evaluate(pred)?))
                }
                None => (None, None),
            };
            rows.push(EvalRow {
                step: j + 1,
                trial: traj.meta.seed,
                snapshot: idx,
                wpe: wpe(&truth, pred)?,
                repw: j_true.zip(j_pred).map(|(a, b)| repw(a, b)),
                j_true,
                j_pred,
                baseline_wpe: wpe(&truth, &roundtrip)?,
            });
        }
    }
    Ok(rows)
}

/// Sample Pearson correlation; `None` for fewer than two points or a
/// zero-variance column.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&ranks(x), &ranks(y))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub j_true: f64,
    pub j_pred: f64,
    pub trial: u64,
    pub snapshot: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterTable {
    pub points: Vec<ScatterPoint>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

pub fn scatter_table(rows: &[EvalRow]) -> ScatterTable {
    let points: Vec<ScatterPoint> = rows
        .iter()
        .filter_map(|r| {
            Some(ScatterPoint {
                j_true: r.j_true?,
                j_pred: r.j_pred?,
                trial: r.trial,
                snapshot: r.snapshot,
                step: r.step,
            })
        })
        .collect();
    let x: Vec<f64> = points.iter().map(|p| p.j_true).collect();
    let y: Vec<f64> = points.iter().map(|p| p.j_pred).collect();
    ScatterTable {
        pearson: pearson(&x, &y),
        spearman: spearman(&x, &y),
        points,
    }
}

/// Machine-readable summary of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub median_wpe_per_step: Vec<Option<f64>>,
    pub median_repw_per_step: Vec<Option<f64>>,
    pub median_baseline_wpe_per_step: Vec<Option<f64>>,
    pub scatter_points: usize,
    pub rows: usize,
    pub config: ForwardEvalConfig,
}

impl EvalReport {
    fn per_step(&self, f: impl Fn(&EvalRow) -> Option<f64>) -> Vec<Option<f64>> {
        (1..=self.config.k)
            .map(|s| {
                let v: Vec<f64> = self.rows.iter().filter(|r| r.step == s).filter_map(&f).collect();
                median(&v)
            })
            .collect()
    }

    pub fn summary(&self) -> ReportSummary {
        let scatter = scatter_table(&self.rows);
        ReportSummary {
            pearson: scatter.pearson,
            spearman: scatter.spearman,
            median_wpe_per_step: self.per_step(|r| Some(r.wpe)),
            median_repw_per_step: self.per_step(|r| r.repw),
            median_baseline_wpe_per_step: self.per_step(|r| Some(r.baseline_wpe)),
            scatter_points: scatter.points.len(),
            rows: self.rows.len(),
            config: self.config,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8e}")).unwrap_or_default()
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.8e},{},{},{}",
            r.step,
            r.trial,
            r.snapshot,
            r.wpe,
            fmt_opt(r.repw),
            fmt_opt(r.j_true),
            fmt_opt(r.j_pred)
        );
    }
    out
}

/// Writes the per-row CSV to `csv_path` and the summary JSON to `json_path`.
pub fn write_report(report: &EvalReport, csv_path: &Path, json_path: &Path) -> Result<()> {
    write_atomic(csv_path, report_csv(report).as_bytes())?;
    let json = serde_json::to_vec_pretty(&report.summary())?;
    write_atomic(json_path, &json)
}

/// Parsed CSV row; the baseline column is not part of the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub step: usize,
    pub trial: u64,
    pub snapshot: usize,
    pub wpe: f64,
    pub repw: Option<f64>,
    pub j_true: Option<f64>,
    pub j_pred: Option<f64>,
}

pub fn read_report_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(malformed("missing or wrong CSV header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(malformed(format!("line {}: expected 7 fields", i + 2)));
            }
            let bad = |e: String| malformed(format!("line {}: {e}", i + 2));
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|e: std::num::ParseFloatError| bad(e.to_string()))
                }
            };
            Ok(CsvRow {
                step: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                trial: f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                snapshot: f[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                wpe: f[3].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                repw: opt(f[4])?,
                j_true: opt(f[5])?,
                j_pred: opt(f[6])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Layout;
    use crate::oracle::{gen_trajectory, make_system, oracle_trajectory};
    use crate::ppo::{run_trial, PpoHyper, TrialConfig};
    use crate::svdcodec::fit_basis;

    #[test]
    fn wpe_cases() {
        let lay = Layout::contiguous([("w", vec![2])]);
        let a = WeightVector::new(vec![1.0, 1.0], lay.clone()).unwrap();
        let b = WeightVector::new(vec![0.0, 0.0], lay.clone()).unwrap();
        assert_eq!(wpe(&a, &b).unwrap(), 1.0);
        assert_eq!(wpe(&a, &a).unwrap(), 0.0);
        assert_eq!(wpe(&a, &b).unwrap(), wpe(&b, &a).unwrap());
        assert!(wpe_values(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn repw_cases() {
        assert_eq!(repw(500.0, 450.0), 50.0);
        assert_eq!(repw(450.0, 500.0), 50.0);
        assert_eq!(repw(3.5, 3.5), 0.0);
    }

    #[test]
    fn correlations() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
        assert_eq!(pearson(&[1.0], &[1.0]), None);
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]).unwrap() - 1.0).abs() < 1e-15);
        // Independent value: Pearson on (1,2,3,4,5) vs (2,1,4,3,5) is 0.8.
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn prefix_selection() {
        let c = ForwardEvalConfig::default();
        assert_eq!(c.prefix_starts(29), Vec::<usize>::new());
        assert_eq!(c.prefix_starts(30), vec![0]);
        assert_eq!(c.prefix_starts(60), vec![0, 10, 20, 30]);
        let many = c.prefix_starts(731);
        assert_eq!(many.len(), 20);
        assert_eq!(many[1], 36);
        assert!(*many.last().unwrap() <= 731 - 30);
    }

    /// Forecaster that returns the true continuation.
    struct Oracle<'a>(&'a WeightTrajectory);

    impl Forecaster for Oracle<'_> {
        fn forecast(&self, basis: &SvdBasis<f64>, prefix: &[WeightVector], k: usize) -> Result<Vec<WeightVector>> {
            let first = (0..self.0.len())
                .find(|&i| self.0.snapshot(i) == prefix[0])
                .unwrap();
            (0..k)
                .map(|j| {
                    let t = self.0.snapshot(first + prefix.len() + j);
                    basis.decode(&basis.encode(&t)?)
                })
                .collect()
        }
    }

    fn quadratic_traj() -> (WeightTrajectory, SvdBasis<f64>) {
        let sys = make_system(10, 3, 0.1, 1.0, 1.0, 1e-3).unwrap();
        let states = gen_trajectory(&sys, &[1.0; 10], 60, 4).unwrap();
        let t = oracle_trajectory(&states, 7).unwrap();
        let basis = fit_basis(&t.snapshots, 4, t.meta.layout.clone()).unwrap();
        (t, basis)
    }

    #[test]
    fn perfect_predictor_leaves_only_codec_residual() {
        let (t, basis) = quadratic_traj();
        let cfg = ForwardEvalConfig::default();
        let rows = forward_eval(&Oracle(&t), &basis, &t, &cfg).unwrap();
        assert_eq!(rows.len(), cfg.prefix_starts(t.len()).len() * cfg.k);
        for r in &rows {
            assert_eq!(r.wpe, r.baseline_wpe);
            assert!(r.repw.is_none());
            assert_eq!(r.trial, 7);
        }
        // Cross-check the residual with the codec projection.
        let r = &rows[3];
        let truth = t.snapshot(r.snapshot);
        let back = basis.decode(&basis.encode(&truth).unwrap()).unwrap();
        assert_eq!(r.wpe, wpe_values(&truth.values, &back.values).unwrap());
    }

    #[test]
    fn paired_seeds_give_zero_repw_for_identical_weights() {
        let cfg = TrialConfig {
            total_steps: 256,
            hyper: PpoHyper {
                rollout_steps: 128,
                minibatches: 4,
                epochs: 10,
                ..PpoHyper::default()
            },
            ..TrialConfig::default()
        };
        let t = run_trial(&cfg, 1).unwrap();
        let basis = fit_basis(&t.snapshots, t.len().min(t.dim()), t.meta.layout.clone()).unwrap();
        let ecfg = ForwardEvalConfig {
            prefix_len: 4,
            k: 3,
            episodes: 2,
            ..ForwardEvalConfig::default()
        };
        // Identity forecaster: returns the true snapshots themselves.
        struct Exact<'a>(&'a WeightTrajectory);
        impl Forecaster for Exact<'_> {
            fn forecast(&self, _: &SvdBasis<f64>, prefix: &[WeightVector], k: usize) -> Result<Vec<WeightVector>> {
                let first = (0..self.0.len()).find(|&i| self.0.snapshot(i) == prefix[0]).unwrap();
                Ok((0..k).map(|j| self.0.snapshot(first + prefix.len() + j)).collect())
            }
        }
        let rows = forward_eval(&Exact(&t), &basis, &t, &ecfg).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.repw == Some(0.0) && r.wpe == 0.0));
        let again = forward_eval(&Exact(&t), &basis, &t, &ecfg).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn short_trajectory_is_rejected() {
        let (t, basis) = quadratic_traj();
        let cfg = ForwardEvalConfig {
            prefix_len: 55,
            ..ForwardEvalConfig::default()
        };
        assert!(forward_eval(&Oracle(&t), &basis, &t, &cfg).is_err());
    }

    fn sample_report() -> EvalReport {
        let rows = (0..6)
            .map(|i| EvalRow {
                step: i % 3 + 1,
                trial: 2,
                snapshot: 40 + i,
                wpe: 1.0 / (i + 3) as f64,
                repw: (i != 4).then_some(i as f64 * 1.5),
                j_true: (i != 4).then_some(100.0 + i as f64),
                j_pred: (i != 4).then_some(100.0 + 2.0 * i as f64 + 1.0 / 3.0),
                baseline_wpe: 1e-9,
            })
            .collect();
        EvalReport {
            config: ForwardEvalConfig {
                k: 3,
                ..ForwardEvalConfig::default()
            },
            rows,
        }
    }

    #[test]
    fn csv_roundtrip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, json) = (dir.path().join("r.csv"), dir.path().join("r.json"));
        let report = sample_report();
        write_report(&report, &csv, &json).unwrap();
        let back = read_report_csv(&csv).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in back.iter().zip(&report.rows) {
            assert_eq!((a.step, a.trial, a.snapshot), (b.step, b.trial, b.snapshot));
            assert!((a.wpe - b.wpe).abs() <= 1e-8 * b.wpe.abs());
            match (a.j_pred, b.j_pred) {
                (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-8 * y.abs()),
                (None, None) => {}
                _ => panic!("missing value mismatch"),
            }
        }
        let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
        for key in ["pearson", "spearman", "median_wpe_per_step", "median_repw_per_step"] {
            assert!(summary.get(key).is_some(), "{key}");
        }
        assert_eq!(summary["median_wpe_per_step"].as_array().unwrap().len(), 3);

        let empty = EvalReport {
            config: ForwardEvalConfig::default(),
            rows: Vec::new(),
        };
        write_report(&empty, &csv, &json).unwrap();
        assert_eq!(std::fs::read_to_string(&csv).unwrap(), format!("{CSV_HEADER}\n"));
        let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
        assert!(summary["pearson"].is_null());
    }

    #[test]
    fn scatter_of_identical_returns_is_diagonal() {
        let mut report = sample_report();
        for r in report.rows.iter_mut() {
            r.j_pred = r.j_true;
        }
        let s = scatter_table(&report.rows);
        assert_eq!(s.points.len(), 5);
        assert!(s.points.iter().all(|p| p.j_true == p.j_pred));
        assert!((s.pearson.unwrap() - 1.0).abs() < 1e-12);
    }
}
