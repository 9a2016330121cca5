//! The subcommands as library functions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use owr_core::checkpoint::Checkpoint;
use owr_core::datasets::{make_schedule, Dataset};
use owr_core::evaluation::{average_reports, MetricsReport};
use owr_core::protocol::{EpisodeSchedule, Method, OwrModel, RejectionRule, TrainLogRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::experiment::{evaluate_model, run_episode, EpisodeSpec, MetricsRecord};

/// One (order seed, run) pair after training.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub order_seed: u64,
    pub run: usize,
    pub schedule: EpisodeSchedule,
    pub records: Vec<MetricsRecord>,
    pub log: Vec<TrainLogRecord>,
    pub model: OwrModel,
    /// Model after every step, kept only when checkpoints are requested.
    pub checkpoints: Vec<OwrModel>,
}

impl ExperimentResult {
    pub fn dir_name(&self) -> String {
        format!("order{}_run{}", self.order_seed, self.run)
    }
}

/// Seeds of run `r`: training and initialization seeds are offset by the
/// run index so repeated runs of one order differ.
pub fn run_seeds(config: &ExperimentConfig, run: usize) -> (u64, u64) {
    (
        config.training.seed.wrapping_add(run as u64),
        config.extractor.init_seed.wrapping_add(run as u64),
    )
}

/// Trains and evaluates every (order seed, run) pair; results come back in
/// config order whatever the number of workers.
pub fn execute(
    config: &ExperimentConfig,
    dataset: &Dataset,
    workers: usize,
    keep_checkpoints: bool,
) -> Result<Vec<ExperimentResult>, CliError> {
    config.validate()?;
    let mut jobs = Vec::new();
    for &order_seed in &config.schedule.order_seeds {
        let s = &config.schedule;
        let schedule = make_schedule(&dataset.catalog, s.n_known, s.initial, s.step, order_seed)
            .map_err(CliError::config)?;
        for run in 0..s.runs {
            jobs.push((order_seed, run, schedule.clone()));
        }
    }
    let rules = config.rules();
    let work = |(order_seed, run, schedule): &(u64, usize, EpisodeSchedule)| {
        let (train_seed, init_seed) = run_seeds(config, *run);
        let mut train = config.training.clone();
        train.seed = train_seed;
        let spec = EpisodeSpec {
            dataset,
            schedule,
            extractor: config.extractor.resolve(dataset.input_dim(), init_seed),
            train,
            method: config.method.clone(),
            rules: rules.clone(),
            order_seed: *order_seed,
            run: *run,
        };
        let mut checkpoints = Vec::new();
        let outcome = run_episode(&spec, |_, model| {
            if keep_checkpoints {
                checkpoints.push(model.clone());
            }
            Ok(())
        })?;
        Ok(ExperimentResult {
            order_seed: *order_seed,
            run: *run,
            schedule: schedule.clone(),
            records: outcome.records,
            log: outcome.log,
            model: outcome.model,
            checkpoints,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(work)
            .collect::<Result<Vec<_>, owr_core::OwrError>>()
    })
    .map_err(CliError::from)
}

/// A metrics line: either one step or the mean over steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum MetricsLine {
    Step(MetricsRecord),
    /// A step averaged over every experiment of the run.
    Mean(MeanRecord),
    Summary(SummaryRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRecord {
    pub rule: String,
    pub experiments: usize,
    #[serde(flatten)]
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    /// `None` in the cross-experiment file.
    pub order_seed: Option<u64>,
    pub run: Option<usize>,
    pub rule: String,
    #[serde(flatten)]
    pub metrics: owr_core::evaluation::MetricsSummary,
}

fn by_rule(records: &[MetricsRecord]) -> BTreeMap<String, Vec<MetricsReport>> {
    let mut map: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
    for r in records {
        map.entry(r.rule.clone()).or_default().push(r.report);
    }
    map
}

/// Per-step mean over experiments, keyed by rule.
pub fn mean_over_experiments(results: &[ExperimentResult]) -> BTreeMap<String, Vec<MetricsReport>> {
    let mut grouped: BTreeMap<(String, usize), Vec<MetricsReport>> = BTreeMap::new();
    for r in results.iter().flat_map(|e| &e.records) {
        grouped
            .entry((r.rule.clone(), r.report.step))
            .or_default()
            .push(r.report);
    }
    let mut out: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
    for ((rule, step), reports) in grouped {
        let m = average_reports(&reports).expect("non-empty group");
        out.entry(rule).or_default().push(MetricsReport {
            step,
            cw_no_rej: m.cw_no_rej,
            cw_rej: m.cw_rej,
            open_set_acc: m.open_set_acc,
            owr: m.owr,
            owr_h: m.owr_h,
            known_rejection_rate: m.known_rejection_rate,
        });
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn metrics_table(reports: &BTreeMap<String, Vec<MetricsReport>>) -> String {
    let mut s = format!(
        "{:<28} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "rule", "step", "cw", "cw_rej", "open_set", "owr", "owr_h", "known_rej"
    );
    for (rule, list) in reports {
        let summary = average_reports(list).expect("non-empty");
        for r in list {
            let _ = writeln!(
                s,
                "{:<28} {:>5} {:>9.4} {:>9.4} {:>9} {:>9} {:>9} {:>9}",
                rule,
                r.step,
                r.cw_no_rej,
                r.cw_rej,
                fmt_opt(r.open_set_acc),
                fmt_opt(r.owr),
                fmt_opt(r.owr_h),
                fmt_opt(r.known_rejection_rate)
            );
        }
        let _ = writeln!(
            s,
            "{:<28} {:>5} {:>9.4} {:>9.4} {:>9} {:>9} {:>9} {:>9}",
            rule,
            "mean",
            summary.cw_no_rej,
            summary.cw_rej,
            fmt_opt(summary.open_set_acc),
            fmt_opt(summary.owr),
            fmt_opt(summary.owr_h),
            fmt_opt(summary.known_rejection_rate)
        );
    }
    s
}

pub fn plot_table(reports: &BTreeMap<String, Vec<MetricsReport>>) -> String {
    let mut s = String::from(
        "rule\tstep\tcw_no_rej\tcw_rej\topen_set_acc\towr\towr_h\tknown_rejection_rate\n",
    );
    let na = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
    for (rule, list) in reports {
        for r in list {
            let _ = writeln!(
                s,
                "{rule}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.step,
                r.cw_no_rej,
                r.cw_rej,
                na(r.open_set_acc),
                na(r.owr),
                na(r.owr_h),
                na(r.known_rejection_rate)
            );
        }
    }
    s
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(&item).expect("serializable"));
        s.push('\n');
    }
    s
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| CliError::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(format!("renaming to {}", path.display()), e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

fn experiment_lines(result: &ExperimentResult) -> Vec<MetricsLine> {
    let mut lines: Vec<MetricsLine> = result
        .records
        .iter()
        .cloned()
        .map(MetricsLine::Step)
        .collect();
    for (rule, reports) in by_rule(&result.records) {
        lines.push(MetricsLine::Summary(SummaryRecord {
            order_seed: Some(result.order_seed),
            run: Some(result.run),
            rule,
            metrics: average_reports(&reports).expect("non-empty"),
        }));
    }
    lines
}

/// Files written by `run`, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub experiment_dirs: Vec<PathBuf>,
}

pub fn write_run(
    config: &ExperimentConfig,
    results: &[ExperimentResult],
    out_dir: &Path,
) -> Result<RunArtifacts, CliError> {
    create_dir(out_dir)?;
    let config_json = serde_json::to_value(config).expect("config serializes");
    let mut experiment_dirs = Vec::new();
    for result in results {
        let dir = out_dir.join(result.dir_name());
        create_dir(&dir)?;
        let (train_seed, init_seed) = run_seeds(config, result.run);
        let mut resolved = config.clone();
        resolved.schedule.order_seeds = vec![result.order_seed];
        resolved.schedule.runs = 1;
        resolved.training.seed = train_seed;
        resolved.extractor.init_seed = init_seed;
        write_atomic(&dir.join("config.toml"), &resolved.to_toml())?;
        write_atomic(
            &dir.join("schedule.json"),
            &serde_json::to_string_pretty(&result.schedule).expect("serializable"),
        )?;
        write_atomic(&dir.join("metrics.jsonl"), &jsonl(experiment_lines(result)))?;
        let per_rule = by_rule(&result.records);
        write_atomic(&dir.join("metrics.txt"), &metrics_table(&per_rule))?;
        write_atomic(&dir.join("plot.tsv"), &plot_table(&per_rule))?;
        write_atomic(&dir.join("train_log.jsonl"), &jsonl(&result.log))?;
        for (t, model) in result.checkpoints.iter().enumerate() {
            let ck = Checkpoint::new(
                t,
                result.schedule.clone(),
                config_json.clone(),
                model.clone(),
            );
            let path = dir.join(format!("checkpoint_step{t}.json"));
            let text = serde_json::to_string(&ck).expect("serializable");
            write_atomic(&path, &text)?;
        }
        experiment_dirs.push(dir);
    }

    let mean = mean_over_experiments(results);
    let mut lines: Vec<MetricsLine> = Vec::new();
    for (rule, reports) in &mean {
        for r in reports {
            lines.push(MetricsLine::Mean(MeanRecord {
                rule: rule.clone(),
                experiments: results.len(),
                report: *r,
            }));
        }
        lines.push(MetricsLine::Summary(SummaryRecord {
            order_seed: None,
            run: None,
            rule: rule.clone(),
            metrics: average_reports(reports).expect("non-empty"),
        }));
    }
    write_atomic(&out_dir.join("summary.jsonl"), &jsonl(lines))?;
    write_atomic(&out_dir.join("summary.txt"), &metrics_table(&mean))?;
    write_atomic(&out_dir.join("plot.tsv"), &plot_table(&mean))?;
    write_atomic(&out_dir.join("config.toml"), &config.to_toml())?;
    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        experiment_dirs,
    })
}

/// `run`: train every (order seed, run) pair and write all artifacts.
pub fn cmd_run(
    config: &ExperimentConfig,
    out_dir: &Path,
    workers: usize,
) -> Result<RunArtifacts, CliError> {
    let dataset = config.dataset.load(Path::new("."))?;
    let results = execute(config, &dataset, workers, config.output.checkpoints)?;
    write_run(config, &results, out_dir)
}

/// `eval`: metrics of a stored checkpoint, without training.
pub fn cmd_eval(
    checkpoint: &Path,
    schedule_override: Option<&Path>,
    rules: &[RejectionRule],
    threshold_override: Option<f64>,
) -> Result<Vec<(RejectionRule, MetricsReport)>, CliError> {
    let ck = Checkpoint::load(checkpoint).map_err(|e| match e {
        owr_core::OwrError::VersionMismatch { .. } | owr_core::OwrError::Json(_) => {
            CliError::Config(format!("{}: {e}", checkpoint.display()))
        }
        other => CliError::Runtime(other),
    })?;
    let config: ExperimentConfig = serde_json::from_value(ck.config.clone())
        .map_err(|e| CliError::Config(format!("checkpoint config: {e}")))?;
    let schedule = match schedule_override {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let s: EpisodeSchedule = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            s.validate().map_err(CliError::config)?;
            s
        }
        None => ck.schedule.clone(),
    };
    let dataset = config.dataset.load(Path::new("."))?;
    let rules = if rules.is_empty() {
        vec![ck.model.default_rule()]
    } else {
        rules.to_vec()
    };
    rules
        .into_iter()
        .map(|rule| {
            evaluate_model(
                &ck.model,
                &dataset,
                &schedule,
                ck.step,
                rule,
                threshold_override,
            )
            .map(|r| (rule, r))
            .map_err(CliError::from)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Losses,
    Rejection,
}

/// One row of the loss ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub variant: String,
    /// Mean over experiments at each step.
    pub owr: Vec<Option<f64>>,
    pub owr_mean: Option<f64>,
    pub owr_h_mean: Option<f64>,
}

/// One row of the rejection ablation, at the last step, averaged over
/// experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    pub rule: String,
    pub known_rejection_rate: Option<f64>,
    pub unknown_rejection_rate: Option<f64>,
    pub diff: Option<f64>,
    /// Digest of the final extractor parameters of each experiment.
    pub extractor_digests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case")]
pub enum AblationTable {
    Losses { rows: Vec<LossRow> },
    Rejection { rows: Vec<RejectionRow> },
}

pub const LOSS_VARIANTS: [(&str, f64, f64); 3] =
    [("gc", 1.0, 0.0), ("lc", 0.0, 1.0), ("gc+lc", 1.0, 1.0)];

pub const REJECTION_ROWS: [RejectionRule; 4] = [
    RejectionRule::ClassSpecific,
    RejectionRule::SingleStage,
    RejectionRule::GlobalThreshold,
    RejectionRule::DeepnnoHeuristic,
];

pub fn extractor_digest(model: &OwrModel) -> String {
    let bytes = serde_json::to_vec(&model.extractor).expect("serializable");
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn ablate(
    config: &ExperimentConfig,
    dataset: &Dataset,
    axis: AblationAxis,
    workers: usize,
) -> Result<AblationTable, CliError> {
    match axis {
        AblationAxis::Losses => {
            let mut rows = Vec::new();
            for (name, global, lambda) in LOSS_VARIANTS {
                let mut c = config.clone();
                c.training.weights.global = global;
                c.training.weights.lambda = lambda;
                c.evaluation.rules = vec![crate::config::default_rule(&c.method)];
                let results = execute(&c, dataset, workers, false)?;
                let mean = mean_over_experiments(&results);
                let reports = mean.values().next().expect("one rule");
                rows.push(LossRow {
                    variant: name.to_string(),
                    owr: reports.iter().map(|r| r.owr).collect(),
                    owr_mean: mean_opt(reports.iter().map(|r| r.owr)),
                    owr_h_mean: mean_opt(reports.iter().map(|r| r.owr_h)),
                });
            }
            Ok(AblationTable::Losses { rows })
        }
        AblationAxis::Rejection => {
            let mut c = config.clone();
            c.method.kind = Method::Ours;
            c.evaluation.rules = REJECTION_ROWS.to_vec();
            let results = execute(&c, dataset, workers, false)?;
            let digests: Vec<String> = results.iter().map(|r| extractor_digest(&r.model)).collect();
            let rows = REJECTION_ROWS
                .iter()
                .map(|rule| {
                    let finals: Vec<&MetricsReport> = results
                        .iter()
                        .filter_map(|e| {
                            e.records
                                .iter()
                                .filter(|r| r.rule == rule.name())
                                .map(|r| &r.report)
                                .next_back()
                        })
                        .collect();
                    let known = mean_opt(finals.iter().map(|r| r.known_rejection_rate));
                    let unknown = mean_opt(finals.iter().map(|r| r.open_set_acc));
                    RejectionRow {
                        rule: rule.name().to_string(),
                        known_rejection_rate: known,
                        unknown_rejection_rate: unknown,
                        diff: unknown.zip(known).map(|(u, k)| u - k),
                        extractor_digests: digests.clone(),
                    }
                })
                .collect();
            Ok(AblationTable::Rejection { rows })
        }
    }
}

pub fn ablation_text(table: &AblationTable) -> String {
    let mut s = String::new();
    match table {
        AblationTable::Losses { rows } => {
            let steps = rows.first().map_or(0, |r| r.owr.len());
            let _ = write!(s, "{:<8}", "losses");
            for t in 0..steps {
                let _ = write!(s, " {:>9}", format!("owr@{t}"));
            }
            let _ = writeln!(s, " {:>9} {:>9}", "owr", "owr_h");
            for r in rows {
                let _ = write!(s, "{:<8}", r.variant);
                for v in &r.owr {
                    let _ = write!(s, " {:>9}", fmt_opt(*v));
                }
                let _ = writeln!(
                    s,
                    " {:>9} {:>9}",
                    fmt_opt(r.owr_mean),
                    fmt_opt(r.owr_h_mean)
                );
            }
        }
        AblationTable::Rejection { rows } => {
            let _ = writeln!(
                s,
                "{:<28} {:>9} {:>9} {:>9}",
                "rule", "known", "unknown", "diff"
            );
            for r in rows {
                let _ = writeln!(
                    s,
                    "{:<28} {:>9} {:>9} {:>9}",
                    r.rule,
                    fmt_opt(r.known_rejection_rate),
                    fmt_opt(r.unknown_rejection_rate),
                    fmt_opt(r.diff)
                );
            }
        }
    }
    s
}

pub fn cmd_ablate(
    config: &ExperimentConfig,
    axis: AblationAxis,
    out_dir: &Path,
    workers: usize,
) -> Result<AblationTable, CliError> {
    let dataset = config.dataset.load(Path::new("."))?;
    let table = ablate(config, &dataset, axis, workers)?;
    create_dir(out_dir)?;
    let name = match axis {
        AblationAxis::Losses => "ablation_losses",
        AblationAxis::Rejection => "ablation_rejection",
    };
    write_atomic(&out_dir.join(format!("{name}.txt")), &ablation_text(&table))?;
    write_atomic(
        &out_dir.join(format!("{name}.json")),
        &serde_json::to_string_pretty(&table).expect("serializable"),
    )?;
    write_atomic(&out_dir.join("config.toml"), &config.to_toml())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: Method,
    pub rule: String,
    pub cw_no_rej: Vec<f64>,
    pub owr: Vec<Option<f64>>,
    pub owr_h: Vec<Option<f64>>,
}

/// `compare`: the same experiment for every method, each with its own rule.
pub fn cmd_compare(
    config: &ExperimentConfig,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<CompareRow>, CliError> {
    let dataset = config.dataset.load(Path::new("."))?;
    let mut rows = Vec::new();
    for method in [Method::Ours, Method::Nno, Method::Deepnno] {
        let mut c = config.clone();
        c.method.kind = method;
        c.evaluation.rules = vec![crate::config::default_rule(&c.method)];
        let results = execute(&c, &dataset, workers, false)?;
        let (rule, reports) = mean_over_experiments(&results)
            .into_iter()
            .next()
            .expect("one rule");
        rows.push(CompareRow {
            method,
            rule,
            cw_no_rej: reports.iter().map(|r| r.cw_no_rej).collect(),
            owr: reports.iter().map(|r| r.owr).collect(),
            owr_h: reports.iter().map(|r| r.owr_h).collect(),
        });
    }
    create_dir(out_dir)?;
    let mut text = format!(
        "{:<9} {:>5} {:>9} {:>9} {:>9}\n",
        "method", "step", "cw", "owr", "owr_h"
    );
    for r in &rows {
        for t in 0..r.cw_no_rej.len() {
            let _ = writeln!(
                text,
                "{:<9} {:>5} {:>9.4} {:>9} {:>9}",
                format!("{:?}", r.method).to_lowercase(),
                t,
                r.cw_no_rej[t],
                fmt_opt(r.owr[t]),
                fmt_opt(r.owr_h[t])
            );
        }
    }
    write_atomic(&out_dir.join("compare.txt"), &text)?;
    write_atomic(&out_dir.join("compare.jsonl"), &jsonl(&rows))?;
    Ok(rows)
}
