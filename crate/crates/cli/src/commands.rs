//! The experiment commands. Each one writes its outputs and a copy of the
//! resolved config under `output_dir`, and returns a short summary for the
//! terminal.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use decil_core::analysis::{
    composite_jacobians, error_bound_audit, jacobian_norm_audit, linearization_check, quadratic_loss_check,
    sensitivity_ratio, vector_field_export, ErrorBoundReport, JacobianNormAudit, JacobianReport, LinearizationReport,
    QuadraticLossReport, SensitivityRecord,
};
use decil_core::data::{generate_dataset, TrajectoryDataset};
use decil_core::env::{EnvId, Environment, SinusoidEnv};
use decil_core::models::{BaselineVariant, DenoisingPolicy, DynamicsModel, ModelFile, ModelKind};
use decil_core::net::NetParams;
use decil_core::rollout::{
    evaluate, mean_std, DecilPolicy, EvalTable, ExpertPolicy, Policy, SummaryRow, EPISODE_CSV_HEADER,
};
use decil_core::seed::derive_seed;
use decil_core::train::{train_baseline, train_denoiser, train_dynamics, untrained_denoiser, LossHistory, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const EVALUATE_CSV: &str = "evaluate.csv";
pub const EVALUATE_SUMMARY: &str = "evaluate_summary.json";
pub const FIG2_CSV: &str = "fig2.csv";
pub const FIG2_JSON: &str = "fig2.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_EPISODES_CSV: &str = "ablation_episodes.csv";
pub const AUDIT_JSON: &str = "audit.json";

pub const LOSS_CSV_HEADER: &str = "epoch,total,state,action";
pub const FIG2_CSV_HEADER: &str = "row,sigma_train,seed,mean_rho,std_rho,n_states,excluded,status";
pub const ABLATION_CSV_HEADER: &str = "seed,policy,noise_sigma,n_episodes,mean_reward,std_reward,success_rate,status";

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports always serialize");
    s.push('\n');
    s
}

/// Creates the output directory and writes the config echo.
fn prepare_output(cfg: &ExperimentConfig) -> CliResult<()> {
    write_file(&cfg.output_dir.join(CONFIG_ECHO), &(cfg.to_json_pretty() + "\n"))
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> CliResult<TrajectoryDataset> {
    let path = cfg.dataset_path();
    require_file(&path, "dataset")?;
    let data = TrajectoryDataset::load(&path)?;
    if data.env_id != cfg.env_id {
        return Err(CliError::Usage(format!(
            "dataset {} was generated for {}, config asks for {}",
            path.display(),
            data.env_id,
            cfg.env_id
        )));
    }
    Ok(data)
}

fn load_model(cfg: &ExperimentConfig, kind: ModelKind) -> CliResult<ModelFile> {
    let path = cfg.model_path(kind);
    require_file(&path, &format!("{} model", kind.as_str()))?;
    let file = ModelFile::load(&path)?;
    if file.model_kind != kind {
        return Err(CliError::Usage(format!(
            "{} holds a {} model, expected {}",
            path.display(),
            file.model_kind.as_str(),
            kind.as_str()
        )));
    }
    Ok(file)
}

fn model_file(
    kind: ModelKind,
    env_id: EnvId,
    data: &TrajectoryDataset,
    cfg: &TrainConfig,
    net: NetParams,
) -> ModelFile {
    ModelFile {
        model_kind: kind,
        env_id,
        stats: data.stats.clone(),
        cfg: cfg.clone(),
        net,
    }
}

pub fn loss_csv(history: &LossHistory) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for (e, l) in history.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", e + 1, l.total, l.state, l.action);
    }
    out
}

/// Training config of one sweep cell: the experiment's settings with the
/// cell's seed (and optionally its noise level).
fn cell_config(cfg: &ExperimentConfig, seed: u64, sigma: Option<f64>) -> TrainConfig {
    let mut train = cfg.train.clone();
    train.seed = seed;
    if let Some(s) = sigma {
        train.sigma = s;
    }
    train
}

/// Numerical failures mark a sweep cell as failed; anything else aborts.
fn cell_outcome<T>(result: decil_core::Result<T>) -> CliResult<Result<T, String>> {
    match result {
        Ok(v) => Ok(Ok(v)),
        Err(e @ (decil_core::Error::Divergence { .. } | decil_core::Error::Numeric(_))) => Ok(Err(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

/// Expert dataset for a config and seed.
pub fn dataset_for(cfg: &ExperimentConfig, seed: u64) -> CliResult<TrajectoryDataset> {
    let env = cfg.env_id.make();
    Ok(generate_dataset(env.as_ref(), cfg.n_traj, seed)?)
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> CliResult<String> {
    prepare_output(cfg)?;
    let data = dataset_for(cfg, cfg.primary_seed())?;
    let path = cfg.output_dir.join(DATASET_FILE);
    write_file(&path, &data.to_json()?)?;
    Ok(format!(
        "wrote {}\nenv {} seed {}: {} trajectories, {} transitions\nstate mean {:?} std {:?}\naction mean {:?} std {:?}",
        path.display(),
        data.env_id,
        data.seed,
        data.trajectories.len(),
        data.len(),
        data.stats.state_mean,
        data.stats.state_std,
        data.stats.action_mean,
        data.stats.action_std,
    ))
}

pub fn cmd_train(cfg: &ExperimentConfig, kind: ModelKind) -> CliResult<String> {
    let data = load_dataset(cfg)?;
    prepare_output(cfg)?;
    let train = &cfg.train;
    let (net, history) = match kind {
        ModelKind::Dynamics => {
            let (m, h) = train_dynamics(&data, train)?;
            (m.net, h)
        }
        ModelKind::Denoiser => {
            let (m, h) = train_denoiser(&data, train)?;
            (m.net, h)
        }
        other => {
            let variant = other.baseline_variant().expect("remaining kinds are baselines");
            let (m, h) = train_baseline(&data, train, variant)?;
            (m.net, h)
        }
    };
    let path = cfg.model_path(kind);
    write_file(&path, &model_file(kind, data.env_id, &data, train, net).to_json()?)?;
    let loss_path = path.with_file_name(format!("{}_loss.csv", kind.as_str()));
    write_file(&loss_path, &loss_csv(&history))?;
    let last = history.last().map(|l| l.total).unwrap_or(f64::NAN);
    Ok(format!(
        "wrote {} and {}\n{} epochs, final loss {last}",
        path.display(),
        loss_path.display(),
        history.len()
    ))
}

enum LoadedPolicy {
    Decil(DecilPolicy),
    Baseline(decil_core::models::BaselinePolicy),
    Expert,
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> CliResult<String> {
    let env = cfg.env_id.make();
    let mut loaded = Vec::with_capacity(cfg.policies.len());
    for name in &cfg.policies {
        let policy = match name.as_str() {
            "decil" => LoadedPolicy::Decil(DecilPolicy::new(
                load_model(cfg, ModelKind::Dynamics)?.into_dynamics()?,
                load_model(cfg, ModelKind::Denoiser)?.into_denoiser()?,
            )?),
            "expert" => LoadedPolicy::Expert,
            other => {
                let kind: ModelKind = other
                    .parse()
                    .map_err(|e: decil_core::Error| CliError::Usage(e.to_string()))?;
                LoadedPolicy::Baseline(load_model(cfg, kind)?.into_baseline()?)
            }
        };
        loaded.push((name.as_str(), policy));
    }
    prepare_output(cfg)?;
    let expert = ExpertPolicy { env: env.as_ref() };
    let policies: Vec<(&str, &dyn Policy)> = loaded
        .iter()
        .map(|(name, p)| {
            let p: &dyn Policy = match p {
                LoadedPolicy::Decil(d) => d,
                LoadedPolicy::Baseline(b) => b,
                LoadedPolicy::Expert => &expert,
            };
            (*name, p)
        })
        .collect();
    let table = evaluate(
        &policies,
        env.as_ref(),
        &cfg.noise_levels,
        cfg.n_episodes,
        cfg.primary_seed(),
    )?;
    write_file(&cfg.output_dir.join(EVALUATE_CSV), &table.to_csv())?;
    write_file(&cfg.output_dir.join(EVALUATE_SUMMARY), &to_json(&table.summary))?;
    Ok(summary_lines(&table.summary))
}

fn summary_lines(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(
            out,
            "{:<9} noise {:<6} reward {:>10.4} ± {:<9.4} success {:.2}",
            r.policy, r.noise_sigma, r.mean_reward, r.std_reward, r.success_rate
        );
    }
    out.trim_end().to_string()
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig2Cell {
    pub sigma_train: f64,
    pub seed: u64,
    pub record: Option<SensitivityRecord>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig2Aggregate {
    pub sigma_train: f64,
    /// Mean of the per-seed mean ratios over successful seeds.
    pub mean_rho: Option<f64>,
    pub std_rho: Option<f64>,
    pub n_ok: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig2Report {
    pub env_id: EnvId,
    pub sigma_s: f64,
    pub n_mc: usize,
    pub cells: Vec<Fig2Cell>,
    pub aggregates: Vec<Fig2Aggregate>,
}

impl Fig2Report {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(FIG2_CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            match (&c.record, &c.failure) {
                (Some(r), _) => {
                    let (_, std) = mean_std(&r.per_state_rho);
                    let _ = writeln!(
                        out,
                        "seed,{},{},{},{},{},{},ok",
                        c.sigma_train,
                        c.seed,
                        r.mean_rho,
                        std,
                        r.per_state_rho.len(),
                        r.excluded
                    );
                }
                _ => {
                    let _ = writeln!(out, "seed,{},{},,,,,failed", c.sigma_train, c.seed);
                }
            }
        }
        for a in &self.aggregates {
            let status = if a.n_ok > 0 { "ok" } else { "failed" };
            let _ = writeln!(
                out,
                "aggregate,{},,{},{},,,{status}",
                a.sigma_train,
                opt(a.mean_rho),
                opt(a.std_rho)
            );
        }
        out
    }
}

/// Sensitivity-ratio sweep over training noise levels. Per seed, one
/// dataset and one dynamics model are shared by every noise level; the
/// ratios are measured on the training states with `train.sigma_s` and
/// `n_mc` draws, using common random numbers across noise levels.
pub fn run_fig2(cfg: &ExperimentConfig) -> CliResult<Fig2Report> {
    let per_seed: Vec<(u64, TrajectoryDataset, Result<DynamicsModel, String>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> CliResult<_> {
            let data = dataset_for(cfg, seed)?;
            let f = cell_outcome(train_dynamics(&data, &cell_config(cfg, seed, None)).map(|(f, _)| f))?;
            Ok((seed, data, f))
        })
        .collect::<CliResult<_>>()?;

    let cells: Vec<(f64, usize)> = cfg
        .sigma_sweep
        .iter()
        .flat_map(|&s| (0..per_seed.len()).map(move |i| (s, i)))
        .collect();
    let cells: Vec<Fig2Cell> = cells
        .par_iter()
        .map(|&(sigma, i)| -> CliResult<Fig2Cell> {
            let (seed, data, f) = &per_seed[i];
            let outcome = match f {
                Err(e) => Err(format!("dynamics model: {e}")),
                Ok(f) => cell_outcome(
                    train_denoiser(data, &cell_config(cfg, *seed, Some(sigma)))
                        .and_then(|(d, _)| sensitivity_ratio(f, &d, data, sigma, cfg.train.sigma_s, cfg.n_mc, *seed)),
                )?,
            };
            let (record, failure) = match outcome {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e)),
            };
            Ok(Fig2Cell {
                sigma_train: sigma,
                seed: *seed,
                record,
                failure,
            })
        })
        .collect::<CliResult<_>>()?;

    let aggregates = cfg
        .sigma_sweep
        .iter()
        .map(|&sigma| {
            let rhos: Vec<f64> = cells
                .iter()
                .filter(|c| c.sigma_train == sigma)
                .filter_map(|c| c.record.as_ref().map(|r| r.mean_rho))
                .collect();
            let (mean, std) = if rhos.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&rhos);
                (Some(m), Some(s))
            };
            Fig2Aggregate {
                sigma_train: sigma,
                mean_rho: mean,
                std_rho: std,
                n_ok: rhos.len(),
            }
        })
        .collect();
    Ok(Fig2Report {
        env_id: cfg.env_id,
        sigma_s: cfg.train.sigma_s,
        n_mc: cfg.n_mc,
        cells,
        aggregates,
    })
}

pub fn cmd_fig2(cfg: &ExperimentConfig) -> CliResult<String> {
    prepare_output(cfg)?;
    let report = run_fig2(cfg)?;
    write_file(&cfg.output_dir.join(FIG2_CSV), &report.to_csv())?;
    write_file(&cfg.output_dir.join(FIG2_JSON), &to_json(&report))?;
    let mut out = String::new();
    for a in &report.aggregates {
        let _ = writeln!(
            out,
            "sigma {:<6} mean rho {} ({} seeds)",
            a.sigma_train,
            a.mean_rho.map(|v| format!("{v:.4}")).unwrap_or_else(|| "failed".into()),
            a.n_ok
        );
    }
    Ok(out.trim_end().to_string())
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationSeed {
    pub seed: u64,
    pub table: Option<EvalTable>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub env_id: EnvId,
    pub seeds: Vec<AblationSeed>,
    /// Per policy and noise level, pooled over every episode of every
    /// successful seed.
    pub pooled: Vec<SummaryRow>,
}

pub const ABLATION_POLICIES: [&str; 2] = ["decil", "joint"];

impl AblationReport {
    pub fn pooled_for(&self, policy: &str, noise_sigma: f64) -> Option<&SummaryRow> {
        self.pooled
            .iter()
            .find(|r| r.policy == policy && r.noise_sigma == noise_sigma)
    }

    pub fn to_csv(&self, noise_levels: &[f64]) -> String {
        let mut out = String::from(ABLATION_CSV_HEADER);
        out.push('\n');
        let row = |out: &mut String, seed: &str, r: &SummaryRow| {
            let _ = writeln!(
                out,
                "{seed},{},{},{},{},{},{},ok",
                r.policy, r.noise_sigma, r.n_episodes, r.mean_reward, r.std_reward, r.success_rate
            );
        };
        for s in &self.seeds {
            match &s.table {
                Some(t) => t.summary.iter().for_each(|r| row(&mut out, &s.seed.to_string(), r)),
                None => {
                    for p in ABLATION_POLICIES {
                        for n in noise_levels {
                            let _ = writeln!(out, "{},{p},{n},,,,,failed", s.seed);
                        }
                    }
                }
            }
        }
        for r in &self.pooled {
            row(&mut out, "all", r);
        }
        out
    }

    pub fn episodes_csv(&self) -> String {
        let mut out = format!("training_seed,{EPISODE_CSV_HEADER}\n");
        for s in &self.seeds {
            if let Some(t) = &s.table {
                for line in t.to_csv().lines().skip(1) {
                    let _ = writeln!(out, "{},{line}", s.seed);
                }
            }
        }
        out
    }
}

/// DeCIL against the joint baseline with paired seeds: for every seed both
/// are trained on the same dataset and evaluated on the same episodes.
pub fn run_ablation(cfg: &ExperimentConfig) -> CliResult<AblationReport> {
    let env = cfg.env_id.make();
    let seeds: Vec<AblationSeed> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> CliResult<AblationSeed> {
            let data = dataset_for(cfg, seed)?;
            let train = cell_config(cfg, seed, None);
            let outcome = cell_outcome((|| {
                let (f, _) = train_dynamics(&data, &train)?;
                let (d, _) = train_denoiser(&data, &train)?;
                let (joint, _) = train_baseline(&data, &train, BaselineVariant::Joint)?;
                let decil = DecilPolicy::new(f, d)?;
                let policies: Vec<(&str, &dyn Policy)> =
                    vec![(ABLATION_POLICIES[0], &decil), (ABLATION_POLICIES[1], &joint)];
                evaluate(&policies, env.as_ref(), &cfg.noise_levels, cfg.n_episodes, seed)
            })())?;
            let (table, failure) = match outcome {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e)),
            };
            Ok(AblationSeed { seed, table, failure })
        })
        .collect::<CliResult<_>>()?;

    let mut pooled = Vec::new();
    for policy in ABLATION_POLICIES {
        for &noise in &cfg.noise_levels {
            let episodes: Vec<_> = seeds
                .iter()
                .filter_map(|s| s.table.as_ref())
                .flat_map(|t| t.episodes.iter())
                .filter(|e| e.policy == policy && e.noise_sigma == noise)
                .collect();
            if episodes.is_empty() {
                continue;
            }
            let rewards: Vec<f64> = episodes.iter().map(|e| e.total_reward).collect();
            let (mean_reward, std_reward) = mean_std(&rewards);
            pooled.push(SummaryRow {
                policy: policy.to_string(),
                noise_sigma: noise,
                n_episodes: episodes.len(),
                mean_reward,
                std_reward,
                success_rate: episodes.iter().filter(|e| e.success).count() as f64 / episodes.len() as f64,
            });
        }
    }
    Ok(AblationReport {
        env_id: cfg.env_id,
        seeds,
        pooled,
    })
}

pub fn cmd_ablation(cfg: &ExperimentConfig) -> CliResult<String> {
    prepare_output(cfg)?;
    let report = run_ablation(cfg)?;
    write_file(&cfg.output_dir.join(ABLATION_CSV), &report.to_csv(&cfg.noise_levels))?;
    write_file(&cfg.output_dir.join(ABLATION_EPISODES_CSV), &report.episodes_csv())?;
    Ok(summary_lines(&report.pooled))
}

#[derive(Debug, Clone, Serialize)]
pub struct JacobianSection {
    pub n_probes: usize,
    pub n_chain_rule_pass: usize,
    /// Largest `residual / (1e-4 (1 + ||J_h||_F))` over the probes.
    pub max_residual_ratio: f64,
    pub reports: Vec<JacobianReport>,
    pub linearization: LinearizationReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct QuadraticScaling {
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub ratio: f64,
    /// `(sigma_high / sigma_low)^2`.
    pub expected: f64,
    /// Allowed `|ratio - expected|`: the two estimates' Monte Carlo
    /// tolerances combined.
    pub tolerance: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct QuadraticSection {
    /// The state-head Jacobian `J_gy` of the trained policy at the first
    /// probe, used as the linear denoiser's `J`.
    pub jacobian: Vec<Vec<f64>>,
    pub checks: Vec<QuadraticLossReport>,
    pub scaling: Vec<QuadraticScaling>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum FieldSection {
    Exported {
        csv: String,
        rows: usize,
        initial_state: Vec<f64>,
        final_state_f: Vec<f64>,
        final_state_fd: Vec<f64>,
        /// Euclidean distance to the sinusoid curve, when the environment
        /// has one.
        initial_manifold_distance: Option<f64>,
        final_manifold_distance_f: Option<f64>,
        final_manifold_distance_fd: Option<f64>,
    },
    Skipped {
        skipped: String,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedAudit {
    pub seed: u64,
    pub jacobians: JacobianSection,
    pub jacobian_norm: JacobianNormAudit,
    pub quadratic_loss: QuadraticSection,
    pub error_bound: ErrorBoundReport,
    pub vector_field: FieldSection,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub env_id: EnvId,
    pub seeds: Vec<SeedAudit>,
}

pub fn field_csv_name(seed: u64) -> String {
    format!("vector_field_seed{seed}.csv")
}

struct AuditModels {
    seed: u64,
    data: TrajectoryDataset,
    f: DynamicsModel,
    d: DenoisingPolicy,
    d_untrained: DenoisingPolicy,
}

fn audit_models(cfg: &ExperimentConfig) -> CliResult<Vec<AuditModels>> {
    if cfg.models.dynamics.is_some() || cfg.models.denoiser.is_some() {
        let data = load_dataset(cfg)?;
        let f = load_model(cfg, ModelKind::Dynamics)?;
        let d = load_model(cfg, ModelKind::Denoiser)?;
        let d_untrained = untrained_denoiser(&data, &d.cfg)?;
        return Ok(vec![AuditModels {
            seed: d.cfg.seed,
            data,
            f: f.into_dynamics()?,
            d: d.into_denoiser()?,
            d_untrained,
        }]);
    }
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let data = dataset_for(cfg, seed)?;
            let train = cell_config(cfg, seed, None);
            let (f, _) = train_dynamics(&data, &train)?;
            let (d, _) = train_denoiser(&data, &train)?;
            let d_untrained = untrained_denoiser(&data, &train)?;
            Ok(AuditModels {
                seed,
                data,
                f,
                d,
                d_untrained,
            })
        })
        .collect()
}

fn audit_seed(
    cfg: &ExperimentConfig,
    env: &dyn Environment,
    m: &AuditModels,
) -> CliResult<(SeedAudit, Option<String>)> {
    let a = &cfg.audit;
    let probes = m
        .data
        .sample_states(a.chain_probes, derive_seed(m.seed, "audit/chain-probes"));
    let reports = probes
        .iter()
        .map(|x| composite_jacobians(&m.f, &m.d, x, a.fd_eps))
        .collect::<decil_core::Result<Vec<_>>>()?;
    if reports.is_empty() {
        return Err(CliError::Usage("audit.chain_probes must be at least 1".into()));
    }
    let linearization = linearization_check(
        &m.f,
        &m.d,
        &probes[0],
        &a.linearization_radii,
        a.fd_eps,
        derive_seed(m.seed, "audit/linearization"),
    )?;
    let jacobians = JacobianSection {
        n_probes: reports.len(),
        n_chain_rule_pass: reports.iter().filter(|r| r.chain_rule_holds()).count(),
        max_residual_ratio: reports
            .iter()
            .map(|r| r.chain_rule_residual / r.residual_tolerance())
            .fold(0.0, f64::max),
        reports,
        linearization,
    };

    let jacobian_norm = jacobian_norm_audit(&m.d_untrained, &m.d, &m.data, a.norm_probes, a.fd_eps)?;

    let j = jacobians.reports[0].j_gy.clone();
    let checks = a
        .quadratic_sigmas
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            quadratic_loss_check(
                &j,
                s,
                a.quadratic_n_mc,
                derive_seed(m.seed, &format!("audit/quadratic/{i}")),
            )
        })
        .collect::<decil_core::Result<Vec<_>>>()?;
    let scaling = checks
        .windows(2)
        .map(|w| {
            let expected = (w[1].sigma / w[0].sigma).powi(2);
            let ratio = w[1].estimate / w[0].estimate;
            let tolerance = expected * (w[0].tolerance + w[1].tolerance);
            QuadraticScaling {
                sigma_low: w[0].sigma,
                sigma_high: w[1].sigma,
                ratio,
                expected,
                tolerance,
                holds: (ratio - expected).abs() < tolerance,
            }
        })
        .collect();
    let quadratic_loss = QuadraticSection {
        jacobian: (0..j.nrows()).map(|r| j.row(r).iter().copied().collect()).collect(),
        checks,
        scaling,
    };

    let error_bound = error_bound_audit(env, &m.f, &m.d, &m.data, a.fd_eps)?;

    let (vector_field, csv) = if env.state_dim() == 2 {
        let initial = a
            .field_initial_state
            .clone()
            .unwrap_or_else(|| vec![1.0, 1f64.sin() + 0.5]);
        let field = vector_field_export(&m.f, &m.d, a.field_grid, env.dt(), &initial, a.field_steps)?;
        let csv = field.to_csv();
        let on_curve = env.id() == EnvId::Sinusoid;
        let distance = |x: &[f64]| on_curve.then(|| SinusoidEnv::manifold_distance(x));
        let section = FieldSection::Exported {
            csv: field_csv_name(m.seed),
            rows: csv.lines().count() - 1,
            initial_manifold_distance: distance(&initial),
            final_manifold_distance_f: distance(field.final_state_f()),
            final_manifold_distance_fd: distance(field.final_state_fd()),
            initial_state: initial,
            final_state_f: field.final_state_f().to_vec(),
            final_state_fd: field.final_state_fd().to_vec(),
        };
        (section, Some(csv))
    } else {
        let section = FieldSection::Skipped {
            skipped: format!(
                "vector fields need a 2-D state, this environment has {}",
                env.state_dim()
            ),
        };
        (section, None)
    };

    Ok((
        SeedAudit {
            seed: m.seed,
            jacobians,
            jacobian_norm,
            quadratic_loss,
            error_bound,
            vector_field,
        },
        csv,
    ))
}

/// Runs every theory check per seed. Returns the report and the vector-field
/// CSVs keyed by file name.
pub fn run_audit(cfg: &ExperimentConfig) -> CliResult<(AuditReport, Vec<(String, String)>)> {
    let env = cfg.env_id.make();
    let models = audit_models(cfg)?;
    let results = models
        .par_iter()
        .map(|m| audit_seed(cfg, env.as_ref(), m))
        .collect::<CliResult<Vec<_>>>()?;
    let mut seeds = Vec::with_capacity(results.len());
    let mut csvs = Vec::new();
    for (audit, csv) in results {
        if let Some(csv) = csv {
            csvs.push((field_csv_name(audit.seed), csv));
        }
        seeds.push(audit);
    }
    Ok((
        AuditReport {
            env_id: cfg.env_id,
            seeds,
        },
        csvs,
    ))
}

pub fn cmd_audit(cfg: &ExperimentConfig) -> CliResult<String> {
    prepare_output(cfg)?;
    let (report, csvs) = run_audit(cfg)?;
    write_file(&cfg.output_dir.join(AUDIT_JSON), &to_json(&report))?;
    for (name, csv) in &csvs {
        write_file(&cfg.output_dir.join(name), csv)?;
    }
    let mut out = String::new();
    for s in &report.seeds {
        let _ = writeln!(
            out,
            "seed {}: chain rule {}/{}, J_gy reduced at {:.2} of probes, bound holds on {:.4}, L_a {:.6}",
            s.seed,
            s.jacobians.n_chain_rule_pass,
            s.jacobians.n_probes,
            s.jacobian_norm.fraction_reduced,
            s.error_bound.fraction_satisfied,
            s.error_bound.lipschitz_action
        );
    }
    Ok(out.trim_end().to_string())
}

/// Files written by a command under the output directory, for
/// callers comparing reruns.
pub fn primary_outputs(command: &str, cfg: &ExperimentConfig) -> Vec<PathBuf> {
    let dir = &cfg.output_dir;
    let mut files = vec![dir.join(CONFIG_ECHO)];
    match command {
        "gen-data" => files.push(dir.join(DATASET_FILE)),
        "evaluate" => files.extend([dir.join(EVALUATE_CSV), dir.join(EVALUATE_SUMMARY)]),
        "fig2" => files.extend([dir.join(FIG2_CSV), dir.join(FIG2_JSON)]),
        "ablation" => files.extend([dir.join(ABLATION_CSV), dir.join(ABLATION_EPISODES_CSV)]),
        "audit" => {
            files.push(dir.join(AUDIT_JSON));
            if cfg.env_id == EnvId::Sinusoid {
                files.extend(cfg.seeds.iter().map(|&s| dir.join(field_csv_name(s))));
            }
        }
        _ => {}
    }
    files
}
