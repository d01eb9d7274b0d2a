//! End-to-end scenario runner: builds data, runs the federation (or replays
//! a prediction trace) and writes the output artifacts.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adapters::payload_bytes;
use crate::config::{validate, ExperimentConfig, PartitionScheme, Scenario};
use crate::dataset::LabeledDataset;
use crate::error::{FedError, Result};
use crate::federation::{run_federation, write_history_csv, FederationOutcome, FederationSetup};
use crate::greenledger::{EnergyLedger, GreenReport};
use crate::metrics::{
    binary_metrics, confusion_matrix, multiclass_metrics, regroup, BinaryMetrics, EvalMetrics,
    GroupingMap, MulticlassMetrics, PredictionTrace,
};
use crate::model::ModelSpec;
use crate::partition::{
    assign_with_proportions, domain_dirichlet_partition, iid_partition, stratified_split,
    synth_dataset, ClientAssignment,
};
use crate::personalization::{write_client_csv, ClientMetrics};
use crate::rng::{stream, Stream};

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const GREEN_TXT: &str = "green.txt";
pub const PARTITION_CSV: &str = "partition.csv";
pub const CLIENTS_CSV: &str = "clients.csv";
pub const CONFUSION_RAW_CSV: &str = "confusion_raw.csv";
pub const CONFUSION_GROUPED_CSV: &str = "confusion_grouped.csv";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub threads: Option<usize>,
}

/// Training and validation data shared by every federated scenario.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: LabeledDataset<f64>,
    pub validation: LabeledDataset<f64>,
    pub assignment: ClientAssignment,
    pub client_validation: Vec<LabeledDataset<f64>>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let seed = cfg.require_seed()?;
    let data: LabeledDataset<f64> = synth_dataset(
        &cfg.dataset.synth_params(),
        &mut stream(seed, Stream::Data, &[]),
    )?;
    let split = stratified_split(
        &data,
        cfg.dataset.train_fraction,
        &mut stream(seed, Stream::Split, &[]),
    )?;
    let (train, validation) = (split.0, split.1);
    let n_clients = cfg.partition.n_clients;
    let mut part_rng = stream(seed, Stream::Partition, &[]);
    let mut val_rng = stream(seed, Stream::ValidationPartition, &[]);
    let (assignment, val_assignment) = match cfg.partition.scheme {
        PartitionScheme::Dirichlet => {
            let map = cfg.partition.resolved_domain_map(cfg.dataset.domains);
            let a = domain_dirichlet_partition(
                &train,
                n_clients,
                &map,
                cfg.partition.alpha,
                &mut part_rng,
            )?;
            let props = a
                .proportions
                .clone()
                .expect("dirichlet assignments keep proportions");
            let v = assign_with_proportions(&validation, n_clients, &map, &props, &mut val_rng)?;
            (a, v)
        }
        PartitionScheme::Iid => (
            iid_partition(&train, n_clients, &mut part_rng)?,
            iid_partition(&validation, n_clients, &mut val_rng)?,
        ),
    };
    let client_validation = val_assignment.datasets(&validation);
    Ok(PreparedData {
        train,
        validation,
        assignment,
        client_validation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FederatedSummary {
    pub scenario: Scenario,
    pub seed: u64,
    pub rounds: usize,
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub num_params: usize,
    pub final_metrics: EvalMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub client_mean: Option<EvalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload_bytes_per_client: Option<u64>,
    pub total_bytes: u64,
    pub green: GreenReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplaySection {
    pub vocabulary: Vec<String>,
    pub n_rows: usize,
    pub multiclass: MulticlassMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binary: Option<BinaryMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplaySummary {
    pub scenario: Scenario,
    pub seed: u64,
    pub trace: PathBuf,
    pub raw: ReplaySection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grouped: Option<ReplaySection>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum RunSummary {
    Federated(Box<FederatedSummary>),
    Replay(Box<ReplaySummary>),
}

/// Everything a federated run produces, before it is written to disk.
#[derive(Debug)]
pub struct FederatedRun {
    pub data: PreparedData,
    pub outcome: FederationOutcome<f64>,
    pub ledger: EnergyLedger,
    pub summary: FederatedSummary,
}

pub fn run_federated(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<FederatedRun> {
    let scenario = cfg
        .scenario
        .ok_or_else(|| FedError::config("scenario is mandatory"))?;
    let strategy = scenario
        .strategy()
        .ok_or_else(|| FedError::config(format!("{scenario} is not a federated scenario")))?;
    let seed = cfg.require_seed()?;
    let data = prepare_data(cfg)?;
    let spec: ModelSpec = cfg.model_spec();
    let round_cfg = cfg.round_config();
    let hyper = cfg.hyperparams(opts.threads);
    let setup = FederationSetup {
        spec: &spec,
        train: &data.train,
        assignment: &data.assignment,
        validation: &data.validation,
        client_validation: Some(&data.client_validation),
    };
    let mut ledger = EnergyLedger::new(cfg.energy.emission_factor)?;
    let outcome = run_federation(&round_cfg, &setup, strategy, &hyper, &mut ledger)?;
    let usage_hours = ledger.total_duration_s() / 3600.0;
    let green = ledger.report(cfg.energy.embodied.as_ref(), usage_hours)?;
    let final_metrics = outcome
        .history
        .last()
        .map(|r| r.metrics)
        .ok_or_else(|| FedError::EmptyInput("no rounds were run".into()))?;
    let payload = if scenario == Scenario::LoraFl {
        let layout = spec.layout();
        let per_target = cfg
            .lora
            .targets
            .iter()
            .filter_map(|t| layout.iter().find(|(n, _)| n == t))
            .map(|(_, shape)| payload_bytes(cfg.lora.rank, shape[1], shape[0], cfg.lora.bits))
            .collect::<Result<Vec<u64>>>()?;
        Some(per_target.iter().sum())
    } else {
        None
    };
    let summary = FederatedSummary {
        scenario,
        seed,
        rounds: round_cfg.rounds,
        n_clients: round_cfg.n_clients,
        clients_per_round: round_cfg.clients_per_round(),
        n_train: data.train.len(),
        n_validation: data.validation.len(),
        num_params: spec.num_params(),
        final_metrics,
        client_mean: outcome.client_mean,
        payload_bytes_per_client: payload,
        total_bytes: ledger.total_bytes(),
        green,
    };
    Ok(FederatedRun {
        data,
        outcome,
        ledger,
        summary,
    })
}

fn read_trace(path: &Path, positive_label: Option<&str>) -> Result<PredictionTrace> {
    let trace = PredictionTrace::read_csv(File::open(path)?, None)?;
    let Some(pos) = positive_label else {
        return Ok(trace);
    };
    let vocab = trace.vocabulary().to_vec();
    if !vocab.iter().any(|v| v == pos) {
        return Err(FedError::Vocabulary(format!(
            "positive label `{pos}` does not occur in the trace"
        )));
    }
    if vocab.len() != 2 || vocab[1] == pos {
        return Ok(trace);
    }
    let swapped = vec![vocab[1].clone(), vocab[0].clone()];
    PredictionTrace::read_csv(File::open(path)?, Some(swapped))
}

fn replay_section(trace: &PredictionTrace, threshold: f64) -> Result<ReplaySection> {
    let scored = trace.rows().iter().all(|r| r.score.is_some());
    let binary = if trace.vocabulary().len() == 2 && scored && !trace.is_empty() {
        Some(binary_metrics(trace, threshold)?)
    } else {
        None
    };
    Ok(ReplaySection {
        vocabulary: trace.vocabulary().to_vec(),
        n_rows: trace.len(),
        multiclass: multiclass_metrics(trace)?,
        binary,
    })
}

pub fn run_replay(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ReplaySummary> {
    let seed = cfg.require_seed()?;
    let r = &cfg.replay;
    let path = r
        .trace
        .clone()
        .ok_or_else(|| FedError::config("replay.trace is required"))?;
    let trace = read_trace(&path, r.positive_label.as_deref())?;
    let map = match (&r.grouping, r.bundled_grouping) {
        (Some(p), _) => Some(GroupingMap::from_json(&fs::read_to_string(p)?)?),
        (None, true) => Some(GroupingMap::ucf_crime()),
        (None, false) => None,
    };

    let raw = replay_section(&trace, r.threshold)?;
    let exclude: Vec<&str> = r.confusion_exclude.iter().map(String::as_str).collect();
    let raw_exclude: Vec<&str> = exclude
        .iter()
        .copied()
        .filter(|c| trace.vocabulary().iter().any(|v| v == c))
        .collect();
    confusion_matrix(&trace, &raw_exclude, false)?.write_csv(BufWriter::new(File::create(
        out_dir.join(CONFUSION_RAW_CSV),
    )?))?;

    let grouped = match &map {
        Some(map) => {
            let g = regroup(&trace, map)?;
            let g_exclude: Vec<&str> = exclude
                .iter()
                .copied()
                .filter(|c| g.vocabulary().iter().any(|v| v == c))
                .collect();
            confusion_matrix(&g, &g_exclude, false)?.write_csv(BufWriter::new(File::create(
                out_dir.join(CONFUSION_GROUPED_CSV),
            )?))?;
            Some(replay_section(&g, r.threshold)?)
        }
        None => None,
    };
    Ok(ReplaySummary {
        scenario: Scenario::TraceReplay,
        seed,
        trace: path,
        raw,
        grouped,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Validates `cfg`, runs its scenario and writes all artifacts into
/// `out_dir`. Identical configs produce byte-identical artifacts.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let diags = validate(cfg);
    if !diags.is_empty() {
        let msg: Vec<String> = diags.iter().map(ToString::to_string).collect();
        return Err(FedError::config(msg.join("; ")));
    }
    fs::create_dir_all(out_dir)?;
    if cfg.scenario == Some(Scenario::TraceReplay) {
        let summary = run_replay(cfg, out_dir)?;
        write_json(&out_dir.join(SUMMARY_JSON), &summary)?;
        return Ok(RunSummary::Replay(Box::new(summary)));
    }

    let run = run_federated(cfg, opts)?;
    write_history_csv(
        &run.outcome.history,
        BufWriter::new(File::create(out_dir.join(ROUNDS_CSV))?),
    )?;
    run.data.assignment.write_csv(
        &run.data.train,
        BufWriter::new(File::create(out_dir.join(PARTITION_CSV))?),
    )?;
    fs::write(out_dir.join(GREEN_TXT), run.summary.green.table())?;
    if run.summary.scenario == Scenario::PflDecoupled {
        let rows: &[ClientMetrics] = run.outcome.client_metrics.as_deref().unwrap_or(&[]);
        write_client_csv(
            rows,
            BufWriter::new(File::create(out_dir.join(CLIENTS_CSV))?),
        )?;
    }
    write_json(&out_dir.join(SUMMARY_JSON), &run.summary)?;
    Ok(RunSummary::Federated(Box::new(run.summary)))
}
