//! Run configuration: one TOML file per run, full override via flags, and a
//! content hash embedded in every artifact for provenance.
//!
//! The hash covers the effective configuration after all overrides, minus
//! the fields that cannot change output bytes (`out_dir`, `workers`, and the
//! `checkpoint` input path). Two runs that agree on the hash and the seeds
//! produce byte-identical non-timing outputs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gridvolt::agents::{AgentError, TrainerConfig};
use gridvolt::diffmath::DiffError;
use gridvolt::env::{EnvError, RewardConfig};
use gridvolt::evalharness::EvalError;
use gridvolt::powerflow::gridfile::load_grid;
use gridvolt::powerflow::{GridModel, PfError};
use gridvolt::scenario::{
    generate_scenario, load_trajectory, scenario_to_string, ExogenousTrajectory, ScenarioConfig,
    ScenarioError,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA: &str = "gridvolt-manifest v1";
/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "GRIDVOLT_OUT_ROOT";

/// Exit code 2: bad configuration or input files. Exit code 3: the numbers
/// went wrong (divergence, non-finite losses, failed numerical checks).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

pub fn input(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

pub fn numerical(msg: impl Into<String>) -> CliError {
    CliError::Numerical(msg.into())
}

/// Prefix an error with what was being attempted.
pub trait Ctx<T> {
    fn ctx(self, what: impl fmt::Display) -> Result<T, CliError>;
}

impl<T, E: Into<CliError>> Ctx<T> for Result<T, E> {
    fn ctx(self, what: impl fmt::Display) -> Result<T, CliError> {
        self.map_err(|e| match e.into() {
            CliError::Input(m) => CliError::Input(format!("{what}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{what}: {m}")),
        })
    }
}

impl From<PfError> for CliError {
    fn from(e: PfError) -> Self {
        match e {
            PfError::Divergence { .. } => numerical(e.to_string()),
            other => input(other.to_string()),
        }
    }
}

impl From<DiffError> for CliError {
    fn from(e: DiffError) -> Self {
        numerical(e.to_string())
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        input(e.to_string())
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::RolloutDivergence { .. } => numerical(e.to_string()),
            EnvError::Pf(pf) => pf.into(),
            EnvError::Diff(d) => d.into(),
            other => input(other.to_string()),
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::NonFinite { .. } | AgentError::EpochAborted { .. } => {
                numerical(e.to_string())
            }
            AgentError::Env(env) => env.into(),
            AgentError::Scenario(sc) => sc.into(),
            AgentError::Diff(d) => d.into(),
            other => input(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Env(env) => env.into(),
            EvalError::Agent(agent) => agent.into(),
            other => input(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        input(e.to_string())
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        input(e.to_string())
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum, Default,
)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    /// Rollout-based actor update through the differentiable simulator.
    #[default]
    PiTd3,
    /// Twin-delayed baseline: same trainer with the rollout switched off.
    Td3,
    /// Charge-as-fast-as-possible heuristic.
    Cafap,
    /// All chargers idle.
    None,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::PiTd3 => "pi-td3",
            AgentKind::Td3 => "td3",
            AgentKind::Cafap => "cafap",
            AgentKind::None => "none",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, AgentKind::PiTd3 | AgentKind::Td3)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The one structured config file per run. Every field has a default, so an
/// empty file (or none at all) is a valid desk-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Grid file path or `builtin:<name>`; empty means `scenario.grid_id`.
    pub grid: String,
    pub agent: AgentKind,
    /// Output directory; empty resolves via GRIDVOLT_OUT_ROOT.
    pub out_dir: String,
    /// Training seeds; evaluation and generation have their own seed bases.
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Worker threads; 0 means machine parallelism.
    pub workers: usize,
    /// Checkpoint to evaluate; learned agents require one.
    pub checkpoint: String,
    /// Explicit scenario files; when empty, scenarios are generated from
    /// `[scenario]` with seeds `scenario_seed0..` (train) and
    /// `scenario_seed0 + n_train..` (eval).
    pub train_files: Vec<String>,
    pub eval_files: Vec<String>,
    pub n_train: usize,
    pub n_eval: usize,
    pub scenario_seed0: u64,
    pub scenario: ScenarioConfig,
    pub trainer: TrainerConfig,
    pub reward: RewardConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: String::new(),
            agent: AgentKind::PiTd3,
            out_dir: String::new(),
            seeds: vec![0],
            epochs: 10,
            workers: 0,
            checkpoint: String::new(),
            train_files: Vec::new(),
            eval_files: Vec::new(),
            n_train: 8,
            n_eval: 4,
            scenario_seed0: 1000,
            scenario: ScenarioConfig::default(),
            trainer: TrainerConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).ctx(p.display())?;
                toml::from_str(&text).ctx(p.display())
            }
        }
    }
}

/// Canonical serialization used for hashing: the provenance-neutral fields
/// are blanked so relocating outputs or resizing the pool keeps the hash.
pub fn canonical_toml(cfg: &RunConfig) -> Result<String, CliError> {
    let mut c = cfg.clone();
    c.out_dir = String::new();
    c.workers = 0;
    c.checkpoint = String::new();
    toml::to_string(&c).map_err(|e| input(format!("config serialization: {e}")))
}

pub fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// A validated configuration with its grid loaded, hash computed, and
/// output directory resolved.
pub struct Effective {
    pub cfg: RunConfig,
    pub grid: Arc<GridModel>,
    pub hash: String,
    pub toml: String,
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl Effective {
    /// Normalize, validate, and freeze a config. `subdir` names the default
    /// output directory under the root when the config gives none.
    pub fn finalize(mut cfg: RunConfig, subdir: &str) -> Result<Self, CliError> {
        // One grid id, recorded in both places: the run-level field wins.
        if cfg.grid.is_empty() {
            cfg.grid = cfg.scenario.grid_id.clone();
        } else {
            cfg.scenario.grid_id = cfg.grid.clone();
        }
        let grid = Arc::new(load_grid(&cfg.grid).ctx(format!("grid {:?}", cfg.grid))?);
        // The scenario bus count is uniquely determined by the grid.
        cfg.scenario.n_bus = grid.n_bus;
        cfg.scenario.validate().ctx("[scenario]")?;
        cfg.trainer.validate().ctx("[trainer]")?;
        cfg.reward.validate().ctx("[reward]")?;
        if cfg.reward.dt_hours != cfg.scenario.dt_hours {
            return Err(input(format!(
                "reward.dt_hours = {} disagrees with scenario.dt_hours = {}; set them equal",
                cfg.reward.dt_hours, cfg.scenario.dt_hours
            )));
        }
        if cfg.seeds.is_empty() {
            return Err(input("seeds must list at least one seed"));
        }
        let toml = canonical_toml(&cfg)?;
        let hash = sha256_hex(&toml);
        let out_dir = resolve_out_dir(&cfg.out_dir, subdir);
        let workers = resolve_workers(cfg.workers);
        Ok(Self {
            cfg,
            grid,
            hash,
            toml,
            out_dir,
            workers,
        })
    }

    /// Training scenarios: explicit files, or generated from the scenario
    /// config with seeds `scenario_seed0..scenario_seed0 + n_train`.
    pub fn train_set(&self) -> Result<Vec<Arc<ExogenousTrajectory>>, CliError> {
        if self.cfg.train_files.is_empty() {
            generated_set(&self.cfg.scenario, self.cfg.scenario_seed0, self.cfg.n_train)
        } else {
            load_set(&self.cfg.train_files)
        }
    }

    /// Held-out scenarios: explicit files, or the seed block directly after
    /// the training block, so generated train and eval sets never overlap.
    pub fn eval_set(&self) -> Result<Vec<Arc<ExogenousTrajectory>>, CliError> {
        if self.cfg.eval_files.is_empty() {
            let seed0 = self.cfg.scenario_seed0 + self.cfg.n_train as u64;
            generated_set(&self.cfg.scenario, seed0, self.cfg.n_eval)
        } else {
            load_set(&self.cfg.eval_files)
        }
    }
}

fn resolve_out_dir(configured: &str, subdir: &str) -> PathBuf {
    if !configured.is_empty() {
        return PathBuf::from(configured);
    }
    let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "gridvolt-out".into());
    Path::new(&root).join(subdir)
}

fn resolve_workers(configured: usize) -> usize {
    if configured > 0 {
        return configured;
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn load_set(paths: &[String]) -> Result<Vec<Arc<ExogenousTrajectory>>, CliError> {
    paths
        .iter()
        .map(|p| {
            load_trajectory(Path::new(p))
                .map(Arc::new)
                .ctx(format!("scenario {p:?}"))
        })
        .collect()
}

pub fn generated_set(
    sc: &ScenarioConfig,
    seed0: u64,
    n: usize,
) -> Result<Vec<Arc<ExogenousTrajectory>>, CliError> {
    (0..n as u64)
        .map(|i| {
            generate_scenario(sc, seed0 + i)
                .map(Arc::new)
                .ctx(format!("generating scenario seed {}", seed0 + i))
        })
        .collect()
}

/// Scenario file body with the config hash stamped into a leading comment.
pub fn stamped_scenario(traj: &ExogenousTrajectory, hash: &str) -> String {
    format!("# config {hash}\n{}", scenario_to_string(traj))
}

/// Run `n_jobs` closures over a fixed-size pool with striped job order and
/// an index-ordered merge; results never depend on scheduling.
pub fn run_pool<T, F>(n_jobs: usize, workers: usize, job: F) -> Vec<Result<T, CliError>>
where
    T: Send,
    F: Fn(usize) -> Result<T, CliError> + Sync,
{
    let w = workers.clamp(1, n_jobs.max(1));
    if n_jobs == 0 {
        return Vec::new();
    }
    if w == 1 {
        return (0..n_jobs).map(job).collect();
    }
    let mut slots: Vec<Option<Result<T, CliError>>> = (0..n_jobs).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for wi in 0..w {
            let job = &job;
            handles.push(scope.spawn(move || {
                let mut local = Vec::new();
                let mut j = wi;
                while j < n_jobs {
                    local.push((j, job(j)));
                    j += w;
                }
                local
            }));
        }
        for h in handles {
            for (j, r) in h.join().expect("pool worker panicked") {
                slots[j] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every job slot is filled"))
        .collect()
}

/// Collapse pool results in job order, surfacing the lowest-index error.
pub fn collect_pool<T>(results: Vec<Result<T, CliError>>) -> Result<Vec<T>, CliError> {
    results.into_iter().collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema: &'static str,
    command: &'static str,
    config_hash: &'a str,
    config_toml: &'a str,
    seeds: &'a [u64],
    /// Sweep coordinates for multi-point commands, e.g. `k=5` or
    /// `load_multiplier=0.5`; empty for single-point runs.
    sweep: Vec<String>,
    files: Vec<String>,
}

/// Write `manifest.json` next to the artifacts it indexes. File entries are
/// names relative to `dir`, sorted, so reruns are byte-identical.
pub fn write_manifest(
    dir: &Path,
    command: &'static str,
    hash: &str,
    config_toml: &str,
    seeds: &[u64],
    sweep: Vec<String>,
    files: &[PathBuf],
) -> Result<PathBuf, CliError> {
    let mut names: Vec<String> = files
        .iter()
        .map(|p| {
            p.strip_prefix(dir)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    names.sort();
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA,
        command,
        config_hash: hash,
        config_toml,
        seeds,
        sweep,
        files: names,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_an_empty_config() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.agent, AgentKind::PiTd3);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        assert!(toml::from_str::<RunConfig>("banana = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[trainer]\nbanana = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[scenario]\nbanana = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[reward]\nbanana = 1\n").is_err());
    }

    #[test]
    fn hash_ignores_out_dir_workers_and_checkpoint() {
        let base = RunConfig::default();
        let mut moved = base.clone();
        moved.out_dir = "elsewhere".into();
        moved.workers = 7;
        moved.checkpoint = "ck.json".into();
        let h0 = sha256_hex(&canonical_toml(&base).unwrap());
        let h1 = sha256_hex(&canonical_toml(&moved).unwrap());
        assert_eq!(h0, h1);

        let mut changed = base.clone();
        changed.scenario.load_multiplier = 1.5;
        let h2 = sha256_hex(&canonical_toml(&changed).unwrap());
        assert_ne!(h0, h2, "semantic changes must change the hash");
    }

    #[test]
    fn finalize_normalizes_grid_and_bus_count() {
        let mut cfg = RunConfig::default();
        cfg.grid = "builtin:case2".into();
        cfg.scenario.n_chargers = 1;
        let eff = Effective::finalize(cfg, "x").unwrap();
        assert_eq!(eff.cfg.scenario.grid_id, "builtin:case2");
        assert_eq!(eff.cfg.scenario.n_bus, 1);
        assert_eq!(eff.hash.len(), 64);
    }

    #[test]
    fn finalize_rejects_dt_mismatch_and_empty_seeds() {
        let mut cfg = RunConfig::default();
        cfg.reward.dt_hours = 0.5;
        let err = Effective::finalize(cfg, "x").err().unwrap();
        assert_eq!(err.exit_code(), 2);

        let mut cfg = RunConfig::default();
        cfg.seeds.clear();
        assert!(Effective::finalize(cfg, "x").is_err());
    }

    #[test]
    fn generated_sets_are_disjoint_and_deterministic() {
        let eff = Effective::finalize(RunConfig::default(), "x").unwrap();
        let train = eff.train_set().unwrap();
        let eval = eff.eval_set().unwrap();
        assert_eq!(train.len(), eff.cfg.n_train);
        assert_eq!(eval.len(), eff.cfg.n_eval);
        let train_seeds: Vec<u64> = train.iter().map(|t| t.seed).collect();
        let eval_seeds: Vec<u64> = eval.iter().map(|t| t.seed).collect();
        assert!(train_seeds.iter().all(|s| !eval_seeds.contains(s)));
        let again = eff.train_set().unwrap();
        assert_eq!(train, again);
    }

    #[test]
    fn pool_results_are_order_stable_for_any_worker_count() {
        let square = |j: usize| -> Result<usize, CliError> { Ok(j * j) };
        let one = collect_pool(run_pool(9, 1, square)).unwrap();
        for workers in [2, 3, 8, 64] {
            assert_eq!(collect_pool(run_pool(9, workers, square)).unwrap(), one);
        }
        let flaky = |j: usize| -> Result<usize, CliError> {
            if j >= 4 {
                Err(input(format!("job {j}")))
            } else {
                Ok(j)
            }
        };
        let err = collect_pool(run_pool(9, 3, flaky)).unwrap_err();
        assert_eq!(err.to_string(), "job 4", "lowest-index error wins");
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let pf = CliError::from(PfError::Divergence { iteration: 3 });
        assert_eq!(pf.exit_code(), 3);
        let agent = CliError::from(AgentError::NonFinite {
            what: "critic loss".into(),
        });
        assert_eq!(agent.exit_code(), 3);
        let cfg = CliError::from(AgentError::InvalidConfig("bad".into()));
        assert_eq!(cfg.exit_code(), 2);
    }
}
