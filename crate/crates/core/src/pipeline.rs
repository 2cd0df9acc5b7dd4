//! Stage driver: collect, encode, train, evaluate and report, with manifests
//! that make each stage a no-op when its inputs are unchanged.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::evalkit::{forward_eval, write_report, EvalReport, ForwardEvalConfig};
use crate::formats::{
    file_hash, load_basis, load_checkpoint, load_trajectory, save_basis, save_checkpoint, save_trajectory,
    write_atomic,
};
use crate::oracle::{gen_trajectory, low_rank_start, make_system, oracle_trajectory};
use crate::ppo::{run_trial, PpoHyper, TrialConfig};
use crate::policy::ReturnEval;
use crate::svdcodec::fit_basis;
use crate::tipl::{init_model, train, TiplConfig};
use crate::trajectory::WeightTrajectory;
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Collect,
    CollectOracle,
    Encode,
    Train,
    Evaluate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::CollectOracle => "collect-oracle",
            Stage::Encode => "encode",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

/// Synthetic quadratic-descent corpus settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub n: usize,
    pub trajectories: usize,
    pub steps: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub alpha: f64,
    pub sigma_noise: f64,
    pub system_seed: u64,
    /// Start each trajectory in the span of this many slow eigendirections
    /// around the minimizer; `None` draws a standard normal start.
    pub start_rank: Option<usize>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n: 64,
            trajectories: 40,
            steps: 200,
            lambda_min: 0.1,
            lambda_max: 1.0,
            alpha: 1.0,
            sigma_noise: 0.0,
            system_seed: 0,
            start_rank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub env: EnvId,
    pub trials: usize,
    pub total_steps: usize,
    pub snapshot_every: usize,
    pub base_seed: u64,
    pub hidden: Vec<usize>,
    pub ppo: PpoHyper,
    pub oracle: OracleConfig,
    /// Fraction of trials (by index, taken from the end) held out from
    /// codec fitting and training.
    pub held_out_fraction: f64,
    /// Codec rank.
    pub d: usize,
    pub tipl: TiplConfig,
    pub train_seed: u64,
    pub eval: ForwardEvalConfig,
    pub work_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            env: EnvId::Cartpole,
            trials: 10,
            total_steps: 150_000,
            snapshot_every: 1,
            base_seed: 0,
            hidden: vec![8, 8],
            ppo: PpoHyper::default(),
            oracle: OracleConfig::default(),
            held_out_fraction: 0.2,
            d: 16,
            tipl: TiplConfig::default(),
            train_seed: 0,
            eval: ForwardEvalConfig::default(),
            work_dir: PathBuf::from("runs/default"),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.d == 0 || self.snapshot_every == 0 {
            return Err(Error::Config("trials, d and snapshot_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(Error::Config("held_out_fraction must lie in [0, 1)".into()));
        }
        self.ppo.validate()?;
        self.tipl_config().validate()?;
        Ok(())
    }

    pub fn trial_config(&self) -> TrialConfig {
        TrialConfig {
            env: self.env,
            hidden: self.hidden.clone(),
            total_steps: self.total_steps,
            snapshot_every: self.snapshot_every,
            hyper: self.ppo.clone(),
            eval_every: 1,
            eval: ReturnEval::default(),
            eval_snapshots: false,
        }
    }

    /// Transformer settings with the token width tied to the codec rank.
    pub fn tipl_config(&self) -> TiplConfig {
        TiplConfig {
            d_token: self.d,
            ..self.tipl.clone()
        }
    }

    pub fn trajectory_dir(&self) -> PathBuf {
        self.work_dir.join("trajectories")
    }
    pub fn basis_path(&self) -> PathBuf {
        self.work_dir.join("basis.wsvd")
    }
    pub fn checkpoint_path(&self) -> PathBuf {
        self.work_dir.join("model.tipl")
    }
    pub fn eval_path(&self) -> PathBuf {
        self.work_dir.join("eval.json")
    }
    pub fn csv_path(&self) -> PathBuf {
        self.work_dir.join("report.csv")
    }
    pub fn summary_path(&self) -> PathBuf {
        self.work_dir.join("summary.json")
    }
    pub fn manifest_path(&self, stage: &str) -> PathBuf {
        self.work_dir.join("manifests").join(format!("{stage}.json"))
    }

    /// Number of trials held out, at least one whenever there are two or more.
    pub fn held_out_count(&self, n: usize) -> usize {
        if n < 2 {
            return 0;
        }
        ((n as f64 * self.held_out_fraction).round() as usize).clamp(1, n - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: file_hash(path)?,
        })
    }
}

/// Record of a completed stage: what went in, what came out, and the
/// settings and seeds needed to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// True when an up-to-date manifest made the stage a no-op.
    pub skipped: bool,
    pub outputs: Vec<PathBuf>,
}

fn json_hash(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

fn read_manifest(path: &Path) -> Result<StageManifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn up_to_date(path: &Path, config_hash: &str, inputs: &[FileRecord]) -> bool {
    let Ok(m) = read_manifest(path) else {
        return false;
    };
    m.config_hash == config_hash
        && m.inputs == inputs
        && m.outputs
            .iter()
            .all(|o| FileRecord::of(&o.path).is_ok_and(|now| now == *o))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct StageRun<'a> {
    config: &'a PipelineConfig,
    name: &'static str,
    settings: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<FileRecord>,
}

impl StageRun<'_> {
    fn hash(&self) -> String {
        json_hash(&self.settings)
    }

    fn manifest_path(&self) -> PathBuf {
        self.config.manifest_path(self.name)
    }

    fn is_current(&self) -> bool {
        up_to_date(&self.manifest_path(), &self.hash(), &self.inputs)
    }

    fn finish(self, outputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
        let manifest = StageManifest {
            stage: self.name.to_string(),
            config_hash: self.hash(),
            config: self.settings,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| FileRecord::of(p)).collect::<Result<_>>()?,
        };
        let path = self.config.manifest_path(self.name);
        ensure_dir(path.parent().expect("manifest has a parent"))?;
        write_atomic(&path, &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(outputs.to_vec())
    }
}

fn trajectory_path(config: &PipelineConfig, seed: u64) -> PathBuf {
    config.trajectory_dir().join(format!("trial_{seed:06}.wtrj"))
}

fn collect(config: &PipelineConfig) -> Result<(bool, Vec<PathBuf>)> {
    let seeds: Vec<u64> = (0..config.trials as u64).map(|i| config.base_seed + i).collect();
    let trial = config.trial_config();
    let run = StageRun {
        config,
        name: "collect",
        settings: serde_json::json!({"stage": "collect", "trial": trial, "seeds": seeds}),
        seeds: seeds.clone(),
        inputs: Vec::new(),
    };
    if run.is_current() {
        return Ok((true, Vec::new()));
    }
    trial.validate()?;
    ensure_dir(&config.trajectory_dir())?;
    let paths = seeds
        .par_iter()
        .map(|&seed| {
            let traj = run_trial(&trial, seed)?;
            let path = trajectory_path(config, seed);
            save_trajectory(&traj, &path)?;
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((false, run.finish(&paths)?))
}

fn collect_oracle(config: &PipelineConfig) -> Result<(bool, Vec<PathBuf>)> {
    let o = &config.oracle;
    let seeds: Vec<u64> = (0..o.trajectories as u64).map(|i| config.base_seed + i).collect();
    let run = StageRun {
        config,
        name: "collect",
        settings: serde_json::json!({"stage": "collect-oracle", "oracle": o, "seeds": seeds}),
        seeds: seeds.clone(),
        inputs: Vec::new(),
    };
    if run.is_current() {
        return Ok((true, Vec::new()));
    }
    let sys = make_system(o.n, o.system_seed, o.lambda_min, o.lambda_max, o.alpha, o.sigma_noise)?;
    ensure_dir(&config.trajectory_dir())?;
    let paths = seeds
        .par_iter()
        .map(|&seed| {
            let phi0 = match o.start_rank {
                Some(rank) => low_rank_start(&sys, rank, 1.0, seed)?,
                None => {
                    use rand::SeedableRng;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                    (0..o.n).map(|_| crate::numcore::standard_normal::<f64, _>(&mut rng)).collect()
                }
            };
            let states = gen_trajectory(&sys, &phi0, o.steps, seed)?;
            let path = trajectory_path(config, seed);
            save_trajectory(&oracle_trajectory(&states, seed)?, &path)?;
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((false, run.finish(&paths)?))
}

/// Trajectory files from the collect manifest, split into (training, held-out).
pub fn split_trajectories(config: &PipelineConfig) -> Result<(Vec<FileRecord>, Vec<FileRecord>)> {
    let manifest = read_manifest(&config.manifest_path("collect"))?;
    let mut files = manifest.outputs;
    if files.is_empty() {
        return Err(Error::Config("collect manifest lists no trajectories".into()));
    }
    let held = config.held_out_count(files.len());
    let held_out = files.split_off(files.len() - held);
    Ok((files, held_out))
}

fn load_all(records: &[FileRecord]) -> Result<Vec<WeightTrajectory>> {
    records.iter().map(|r| load_trajectory(&r.path)).collect()
}

fn encode(config: &PipelineConfig) -> Result<(bool, Vec<PathBuf>)> {
    let (training, _) = split_trajectories(config)?;
    let run = StageRun {
        config,
        name: "encode",
        settings: serde_json::json!({"stage": "encode", "d": config.d}),
        seeds: Vec::new(),
        inputs: training.clone(),
    };
    if run.is_current() {
        return Ok((true, Vec::new()));
    }
    let trajs = load_all(&training)?;
    let layout = trajs[0].meta.layout.clone();
    let mut rows = Vec::new();
    for t in &trajs {
        t.meta.layout.ensure_matches(&layout)?;
        rows.extend((0..t.len()).map(|i| t.snapshots.row(i).to_vec()));
    }
    let basis = fit_basis(&Matrix::from_rows(&rows)?, config.d, layout)?;
    let path = config.basis_path();
    ensure_dir(&config.work_dir)?;
    save_basis(&basis, &path)?;
    Ok((false, run.finish(&[path])?))
}

fn train_stage(config: &PipelineConfig) -> Result<(bool, Vec<PathBuf>)> {
    let (training, _) = split_trajectories(config)?;
    let mut inputs = training.clone();
    inputs.push(FileRecord::of(&config.basis_path())?);
    let tipl = config.tipl_config();
    let run = StageRun {
        config,
        name: "train",
        settings: serde_json::json!({"stage": "train", "tipl": tipl, "seed": config.train_seed}),
        seeds: vec![config.train_seed],
        inputs,
    };
    if run.is_current() {
        return Ok((true, Vec::new()));
    }
    let basis = load_basis(&config.basis_path())?;
    let data = load_all(&training)?
        .iter()
        .map(|t| {
            let codes = basis.encode_rows(&t.snapshots)?;
            let rows: Vec<Vec<f64>> = (0..codes.rows()).map(|r| basis.standardize(codes.row(r))).collect();
            Matrix::from_rows(&rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = init_model(&tipl, config.train_seed)?;
    let report = train(&mut model, &data, config.train_seed)?;
    let info = serde_json::json!({
        "basis_corpus_hash": basis.corpus_hash,
        "loss_history": report.loss_history,
        "steps": report.steps,
    });
    let path = config.checkpoint_path();
    save_checkpoint(&model, &info, &path)?;
    Ok((false, run.finish(&[path])?))
}

fn evaluate(config: &PipelineConfig) -> Result<(bool, Vec<PathBuf>)> {
    let (_, held_out) = split_trajectories(config)?;
    if held_out.is_empty() {
        return Err(Error::Config("evaluation needs at least one held-out trial".into()));
    }
    let mut inputs = held_out.clone();
    inputs.push(FileRecord::of(&config.basis_path())?);
    inputs.push(FileRecord::of(&config.checkpoint_path())?);
    let run = StageRun {
        config,
        name: "evaluate",
        settings: serde_json::json!({"stage": "evaluate", "eval": config.eval}),
        seeds: vec![config.eval.seed],
        inputs,
    };
    if run.is_current() {
        return Ok((true, Vec::new()));
    }
    let basis = load_basis(&config.basis_path())?;
    let (model, _) = load_checkpoint(&config.checkpoint_path())?;
    let mut rows = Vec::new();
    for t in load_all(&held_out)? {
        rows.extend(forward_eval(&model, &basis, &t, &config.eval)?);
    }
    let report = EvalReport {
        config: config.eval,
        rows,
    };
    let path = config.eval_path();
    write_atomic(&path, &serde_json::to_vec(&report)?)?;
    Ok((false, run.finish(&[path])?))
}

pub fn load_eval_report(path: &Path) -> Result<EvalReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn report(config: &PipelineConfig) -> Result<(bool, Vec<PathBuf>)> {
    let run = StageRun {
        config,
        name: "report",
        settings: serde_json::json!({"stage": "report"}),
        seeds: Vec::new(),
        inputs: vec![FileRecord::of(&config.eval_path())?],
    };
    if run.is_current() {
        return Ok((true, Vec::new()));
    }
    let report = load_eval_report(&config.eval_path())?;
    let (csv, json) = (config.csv_path(), config.summary_path());
    write_report(&report, &csv, &json)?;
    Ok((false, run.finish(&[csv, json])?))
}

/// Runs one stage, skipping it when its manifest matches the current inputs.
pub fn run_stage(config: &PipelineConfig, stage: Stage) -> Result<StageOutcome> {
    config.validate()?;
    let (skipped, outputs) = match stage {
        Stage::Collect => collect(config)?,
        Stage::CollectOracle => collect_oracle(config)?,
        Stage::Encode => encode(config)?,
        Stage::Train => train_stage(config)?,
        Stage::Evaluate => evaluate(config)?,
        Stage::Report => report(config)?,
    };
    Ok(StageOutcome {
        stage,
        skipped,
        outputs,
    })
}

/// Process exit status for an error: 2 configuration, 4 IO or file format,
/// 3 any other stage failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. }
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Truncated { .. }
        | Error::Malformed { .. }
        | Error::Json(_) => 4,
        _ => 3,
    }
}
