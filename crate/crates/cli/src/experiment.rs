//! Multi-seed experiment runs and their artifact files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use darc_core::darc::{
    argmax, run_archery, run_darc, run_importance_weighting, run_rl_on_source, run_rl_on_target, sign_test_p_value,
    ArcheryConfig, ArcheryCurves, CorrectionMode, DarcConfig, DarcError, TrainStats,
};
use darc_core::mdp::{DomainPair, StochasticPolicy};
use darc_core::rng::{stream, Stream};
use darc_core::theory::{check_mi_identity, check_theorem, run_suite, TheoryReport};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, ExperimentKind};
use crate::plot::{render_svg, PlotSpec};

/// Environment variable naming the directory that run outputs go under.
pub const OUTPUT_ROOT_VAR: &str = "DARC_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Runtime(String),
}

/// What a run produced.
#[derive(Debug, Default)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub seed_failures: Vec<(u64, String)>,
    /// Failed exact checks (theory runs only).
    pub check_failures: usize,
    pub summary: String,
}

impl RunOutcome {
    /// 0 success, 2 a seed failed, 3 a check failed.
    pub fn exit_code(&self) -> i32 {
        if !self.seed_failures.is_empty() {
            2
        } else if self.check_failures > 0 {
            3
        } else {
            0
        }
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), RunError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|source| RunError::Io { path: path.clone(), source })?;
        self.files.push(path);
        Ok(())
    }

    fn plot(&mut self, enabled: bool, csv: &str, spec: &str, name: &str) -> Result<(), RunError> {
        if !enabled {
            return Ok(());
        }
        let spec: PlotSpec = spec.parse().map_err(|e: crate::plot::PlotError| RunError::Runtime(e.to_string()))?;
        match render_svg(csv, &spec) {
            Ok(svg) => self.write(name, &svg),
            // nothing finite to draw is not a run failure
            Err(crate::plot::PlotError::Empty) => Ok(()),
            Err(e) => Err(RunError::Runtime(e.to_string())),
        }
    }
}

/// Output root from the environment, defaulting to the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("."), PathBuf::from)
}

/// Row-wise mean of CSV tables that share a header; rows past the shortest
/// table are dropped.
pub fn mean_csv(tables: &[String]) -> Result<String, RunError> {
    let parse = |t: &String| -> Result<(Vec<String>, Vec<Vec<f64>>), RunError> {
        let mut r = csv::Reader::from_reader(t.as_bytes());
        let header = r.headers().map_err(|e| RunError::Runtime(e.to_string()))?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| {
                let rec = rec.map_err(|e| RunError::Runtime(e.to_string()))?;
                Ok(rec.iter().map(|v| v.trim().parse().unwrap_or(f64::NAN)).collect())
            })
            .collect::<Result<_, RunError>>()?;
        Ok((header, rows))
    };
    let parsed: Vec<_> = tables.iter().map(parse).collect::<Result<_, _>>()?;
    let Some((header, _)) = parsed.first() else {
        return Ok(String::new());
    };
    if parsed.iter().any(|(h, _)| h != header) {
        return Err(RunError::Runtime("tables to average have different headers".into()));
    }
    let n = parsed.iter().map(|(_, rows)| rows.len()).min().unwrap_or(0);
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..n {
        let row: Vec<String> = (0..header.len())
            .map(|j| (parsed.iter().map(|(_, rows)| rows[i][j]).sum::<f64>() / parsed.len() as f64).to_string())
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// `iter` plus one `target_success` column per seed and their mean.
fn success_by_seed(seeds: &[u64], runs: &[TrainStats]) -> String {
    let mut out = String::from("iter");
    for s in seeds {
        write!(out, ",seed_{s}").unwrap();
    }
    out.push_str(",mean\n");
    let n = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    for i in 0..n {
        write!(out, "{}", runs[0].records[i].iter).unwrap();
        let mut sum = 0.0;
        for r in runs {
            let v = r.records[i].target_success;
            sum += v;
            write!(out, ",{v}").unwrap();
        }
        writeln!(out, ",{}", sum / runs.len() as f64).unwrap();
    }
    out
}

type Trainer = fn(&DomainPair, &DarcConfig) -> Result<(StochasticPolicy, TrainStats), DarcError>;

fn trainer(kind: ExperimentKind) -> Trainer {
    match kind {
        ExperimentKind::RlSource => run_rl_on_source,
        ExperimentKind::RlTarget => run_rl_on_target,
        ExperimentKind::Importance => run_importance_weighting,
        _ => run_darc,
    }
}

/// Runs every seed with one trainer; failed seeds keep their partial stats.
fn train_seeds(
    cfg: &ExperimentConfig,
    pair: &DomainPair,
    train: Trainer,
    correction: Option<CorrectionMode>,
    prefix: &str,
    out: &mut RunOutcome,
) -> Result<Vec<TrainStats>, RunError> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut dc = cfg.darc_config(seed);
        if let Some(c) = correction {
            dc.correction = c;
        }
        let stats = match train(pair, &dc) {
            Ok((_, stats)) => stats,
            Err(DarcError::Aborted { source, stats }) => {
                out.seed_failures.push((seed, source.to_string()));
                *stats
            }
            Err(e) => {
                out.seed_failures.push((seed, e.to_string()));
                continue;
            }
        };
        out.write(&format!("{prefix}seed_{seed}.csv"), &stats.to_csv())?;
        runs.push(stats);
    }
    Ok(runs)
}

fn finals_summary(label: &str, seeds: &[u64], runs: &[TrainStats], out: &mut String) -> f64 {
    for (seed, r) in seeds.iter().zip(runs) {
        let last = r.last().copied().unwrap_or_default();
        writeln!(
            out,
            "{label}seed {seed}: final target_success {:.4} target_return {:.4} target_rollouts {}",
            last.target_success, last.target_return, r.target_rollouts
        )
        .unwrap();
    }
    let mean = runs.iter().map(TrainStats::final_success).sum::<f64>() / runs.len().max(1) as f64;
    writeln!(out, "{label}mean final target_success {mean:.4}").unwrap();
    mean
}

fn run_training(cfg: &ExperimentConfig, out: &mut RunOutcome) -> Result<(), RunError> {
    let pair = cfg.grid.build(&cfg.spec).map_err(|e| RunError::Config(ConfigError::Invalid(e.to_string())))?;
    let correction = (cfg.kind == ExperimentKind::MatlStyle).then_some(CorrectionMode::ActionUnconditioned);
    let runs = train_seeds(cfg, &pair, trainer(cfg.kind), correction, "", out)?;
    let mut summary = format!("kind {}\n", cfg.kind.name());
    if runs.len() == cfg.seeds.len() {
        let aggregate = mean_csv(&runs.iter().map(TrainStats::to_csv).collect::<Vec<_>>())?;
        out.write("aggregate.csv", &aggregate)?;
        let by_seed = success_by_seed(&cfg.seeds, &runs);
        out.write("success_by_seed.csv", &by_seed)?;
        let mut spec = String::from("iter:");
        spec.push_str(&cfg.seeds.iter().map(|s| format!("seed_{s}")).chain(["mean".to_string()]).collect::<Vec<_>>().join(","));
        spec.push_str(":target success");
        out.plot(cfg.plot, &by_seed, &spec, "target_success.svg")?;
        if matches!(cfg.kind, ExperimentKind::Darc | ExperimentKind::MatlStyle | ExperimentKind::Importance) {
            out.plot(cfg.plot, &aggregate, "iter:mean_delta_r:mean on-policy correction", "mean_delta_r.svg")?;
        }
        finals_summary("", &cfg.seeds, &runs, &mut summary);
    }
    for (seed, e) in &out.seed_failures {
        writeln!(summary, "seed {seed} FAILED: {e}").unwrap();
    }
    out.summary = summary;
    let s = out.summary.clone();
    out.write("summary.txt", &s)
}

fn run_ablation(cfg: &ExperimentConfig, out: &mut RunOutcome) -> Result<(), RunError> {
    let pair = cfg.grid.build(&cfg.spec).map_err(|e| RunError::Config(ConfigError::Invalid(e.to_string())))?;
    let full = train_seeds(cfg, &pair, run_darc, Some(CorrectionMode::Full), "full_", out)?;
    let single = train_seeds(cfg, &pair, run_darc, Some(CorrectionMode::SasOnly), "sas_only_", out)?;
    let mut summary = String::from("kind ablation_single_classifier\n");
    if full.len() == cfg.seeds.len() && single.len() == cfg.seeds.len() {
        out.write("full_aggregate.csv", &mean_csv(&full.iter().map(TrainStats::to_csv).collect::<Vec<_>>())?)?;
        out.write("sas_only_aggregate.csv", &mean_csv(&single.iter().map(TrainStats::to_csv).collect::<Vec<_>>())?)?;
        finals_summary("full ", &cfg.seeds, &full, &mut summary);
        finals_summary("sas_only ", &cfg.seeds, &single, &mut summary);
        let wins = full.iter().zip(&single).filter(|(f, s)| f.final_success() > s.final_success()).count();
        let ties = full.iter().zip(&single).filter(|(f, s)| f.final_success() == s.final_success()).count();
        let trials = full.len() - ties;
        writeln!(summary, "full beats sas_only in {wins} of {trials} untied seeds, sign test p = {:.4}", sign_test_p_value(wins, trials)).unwrap();
    }
    for (seed, e) in &out.seed_failures {
        writeln!(summary, "seed {seed} FAILED: {e}").unwrap();
    }
    out.summary = summary;
    let s = out.summary.clone();
    out.write("summary.txt", &s)
}

fn run_archery_sweep(cfg: &ExperimentConfig, out: &mut RunOutcome) -> Result<(), RunError> {
    let mut curves: Vec<ArcheryCurves> = Vec::new();
    let mut summary = String::from("kind archery_sweep\n");
    for &seed in &cfg.seeds {
        match run_archery(&ArcheryConfig { seed, ..cfg.archery.clone() }) {
            Ok(c) => {
                out.write(&format!("archery_seed_{seed}.csv"), &c.to_csv())?;
                writeln!(
                    summary,
                    "seed {seed}: argmax target {:.3} source {:.3} source_modified {:.3} final losses sas {:.4} sa {:.4}",
                    c.argmax_target(),
                    c.argmax_source(),
                    c.argmax_modified(),
                    c.final_loss.0,
                    c.final_loss.1
                )
                .unwrap();
                curves.push(c);
            }
            Err(e) => out.seed_failures.push((seed, e.to_string())),
        }
    }
    if !curves.is_empty() {
        let aggregate = mean_csv(&curves.iter().map(ArcheryCurves::to_csv).collect::<Vec<_>>())?;
        out.write("aggregate.csv", &aggregate)?;
        let mean = |f: fn(&ArcheryCurves) -> &Vec<f64>| -> Vec<f64> {
            (0..curves[0].theta.len()).map(|i| curves.iter().map(|c| f(c)[i]).sum::<f64>() / curves.len() as f64).collect()
        };
        let theta = &curves[0].theta;
        writeln!(
            summary,
            "mean curves: argmax target {:.3} source {:.3} source_modified {:.3}",
            argmax(theta, &mean(|c| &c.target)),
            argmax(theta, &mean(|c| &c.source)),
            argmax(theta, &mean(|c| &c.source_modified))
        )
        .unwrap();
        out.plot(cfg.plot, &aggregate, "theta:target,source,source_modified:log E[exp reward] vs angle", "archery.svg")?;
    }
    for (seed, e) in &out.seed_failures {
        writeln!(summary, "seed {seed} FAILED: {e}").unwrap();
    }
    out.summary = summary;
    let s = out.summary.clone();
    out.write("summary.txt", &s)
}

fn run_theory(cfg: &ExperimentConfig, out: &mut RunOutcome) -> Result<(), RunError> {
    let mut report = TheoryReport::default();
    for &seed in &cfg.seeds {
        let mut rng = stream(seed, Stream::Theory);
        let r = run_suite(cfg.theory.instances, cfg.theory.limits, &mut rng).map_err(|e| RunError::Runtime(e.to_string()))?;
        report.extend(r);
    }
    let pair = cfg.grid.build(&cfg.spec).map_err(|e| RunError::Config(ConfigError::Invalid(e.to_string())))?;
    let name = if cfg.spec.flip_cell.is_some() { "flip-gridworld" } else { "wall-gridworld" };
    report.entries.extend(check_theorem(&pair, name).map_err(|e| RunError::Runtime(e.to_string()))?);
    let uniform = StochasticPolicy::uniform(pair.horizon(), pair.num_states(), pair.num_actions());
    report.push(check_mi_identity(&pair, &uniform, name).map_err(|e| RunError::Runtime(e.to_string()))?);
    out.check_failures = report.failures();
    out.write("theory_report.csv", &report.to_csv())?;
    let summary = report.summary();
    out.write("theory_summary.txt", &summary)?;
    out.summary = summary.lines().filter(|l| !l.starts_with("PASS")).collect::<Vec<_>>().join("\n") + "\n";
    Ok(())
}

/// Runs every seed of `cfg` and writes its artifacts under `root/cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let dir = root.join(&cfg.output);
    fs::create_dir_all(&dir).map_err(|source| RunError::Io { path: dir.clone(), source })?;
    let mut out = RunOutcome { dir, ..RunOutcome::default() };
    match cfg.kind {
        ExperimentKind::AblationSingleClassifier => run_ablation(cfg, &mut out)?,
        ExperimentKind::ArcherySweep => run_archery_sweep(cfg, &mut out)?,
        ExperimentKind::TheorySuite => run_theory(cfg, &mut out)?,
        _ => run_training(cfg, &mut out)?,
    }
    Ok(out)
}
