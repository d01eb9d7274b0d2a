//! Versioned JSON experiment configuration and its validation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{PayloadConfig, DEFAULT_ALPHA, DEFAULT_INIT_STD, DEFAULT_RANK};
use crate::error::{FedError, Result};
use crate::federation::{CostModel, Hyperparams, LoraSettings, RoundConfig, Strategy};
use crate::greenledger::{EmbodiedProfile, DEFAULT_EMISSION_FACTOR};
use crate::model::{ModelKind, ModelSpec, TrainConfig};
use crate::partition::{DomainMap, SynthParams};

pub const SCHEMA_VERSION: u32 = 1;

/// The bundled default configuration (LoRA federation on the synthetic
/// two-domain corpus, 10 clients, 20 rounds, 5 clients per round).
pub const DEFAULT_CONFIG_JSON: &str = include_str!("../configs/default.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "fedavg-full")]
    FedavgFull,
    #[serde(rename = "pfl-decoupled")]
    PflDecoupled,
    #[serde(rename = "lora-fl")]
    LoraFl,
    #[serde(rename = "trace-replay")]
    TraceReplay,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::FedavgFull,
        Scenario::PflDecoupled,
        Scenario::LoraFl,
        Scenario::TraceReplay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::FedavgFull => "fedavg-full",
            Scenario::PflDecoupled => "pfl-decoupled",
            Scenario::LoraFl => "lora-fl",
            Scenario::TraceReplay => "trace-replay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|sc| sc.name() == s)
    }

    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Scenario::FedavgFull => Some(Strategy::Full),
            Scenario::PflDecoupled => Some(Strategy::Decoupled),
            Scenario::LoraFl => Some(Strategy::Lora),
            Scenario::TraceReplay => None,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub domains: usize,
    pub class_sep: f64,
    pub domain_shift: f64,
    pub noise_std: f64,
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 4000,
            d: 16,
            classes: 2,
            domains: 2,
            class_sep: 4.0,
            domain_shift: 2.0,
            noise_std: 1.0,
            train_fraction: 0.8,
        }
    }
}

impl DatasetConfig {
    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            n: self.n,
            d: self.d,
            classes: self.classes,
            domains: self.domains,
            class_sep: self.class_sep,
            domain_shift: self.domain_shift,
            noise_std: self.noise_std,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionScheme {
    Dirichlet,
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    pub n_clients: usize,
    pub alpha: f64,
    /// Defaults to contiguous client blocks per domain.
    pub domain_map: Option<DomainMap>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            scheme: PartitionScheme::Dirichlet,
            n_clients: 10,
            alpha: 1.0,
            domain_map: None,
        }
    }
}

impl PartitionConfig {
    pub fn resolved_domain_map(&self, domains: usize) -> DomainMap {
        self.domain_map
            .clone()
            .unwrap_or_else(|| DomainMap::contiguous(self.n_clients, domains))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub participation_fraction: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            participation_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dims: Vec<usize>,
    /// Defaults to the final linear layer for MLPs.
    pub head_segments: Option<Vec<String>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp,
            hidden_dims: vec![32],
            head_segments: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub bits: u32,
    pub clip_norm: f64,
    /// Gaussian noise multiplier (std = sigma * clip_norm).
    pub sigma: f64,
    pub targets: Vec<String>,
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            bits: 4,
            clip_norm: 1.0,
            sigma: 0.0,
            targets: vec!["hidden0.weight".to_string()],
            init_std: DEFAULT_INIT_STD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub watts: f64,
    pub seconds_per_sample: f64,
    pub emission_factor: f64,
    pub dense_bits: u32,
    pub embodied: Option<EmbodiedProfile>,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        let cost = CostModel::default();
        Self {
            watts: cost.watts,
            seconds_per_sample: cost.seconds_per_sample,
            emission_factor: DEFAULT_EMISSION_FACTOR,
            dense_bits: cost.dense_bits,
            embodied: Some(EmbodiedProfile::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub trace: Option<PathBuf>,
    pub grouping: Option<PathBuf>,
    /// Use the bundled UCF-Crime grouping map when `grouping` is unset.
    pub bundled_grouping: bool,
    pub threshold: f64,
    pub positive_label: Option<String>,
    /// Classes removed from the truth axis of the confusion matrices.
    pub confusion_exclude: Vec<String>,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            trace: None,
            grouping: None,
            bundled_grouping: false,
            threshold: 0.5,
            positive_label: None,
            confusion_exclude: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenario: Option<Scenario>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub energy: EnergyConfig,
    #[serde(default)]
    pub replay: ReplayConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario: Some(Scenario::LoraFl),
            seed: Some(42),
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            federation: FederationConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            lora: LoraConfig::default(),
            energy: EnergyConfig::default(),
            replay: ReplayConfig::default(),
            output_dir: None,
        }
    }
}

/// One problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub field: String,
    pub value: String,
    pub constraint: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}: {}", self.field, self.value, self.constraint)
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Parses a config file; relative replay paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn bundled_default() -> Self {
        Self::from_json(DEFAULT_CONFIG_JSON).expect("bundled default config parses")
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.replay.trace, &mut self.replay.grouping]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = match self.model.kind {
            ModelKind::Logistic => ModelSpec::logistic(self.dataset.d, self.dataset.classes),
            ModelKind::Mlp => ModelSpec::mlp(
                self.dataset.d,
                self.model.hidden_dims.clone(),
                self.dataset.classes,
            ),
        };
        if let Some(head) = &self.model.head_segments {
            spec.head_segments = head.clone();
        }
        spec
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            rounds: self.federation.rounds,
            n_clients: self.partition.n_clients,
            participation_fraction: self.federation.participation_fraction,
            seed: self.seed.unwrap_or_default(),
        }
    }

    pub fn hyperparams(&self, threads: Option<usize>) -> Hyperparams {
        Hyperparams {
            train: TrainConfig {
                epochs: self.training.epochs,
                lr: self.training.lr,
                batch_size: self.training.batch_size,
            },
            lora: LoraSettings {
                targets: self.lora.targets.clone(),
                rank: self.lora.rank,
                alpha: self.lora.alpha,
                init_std: self.lora.init_std,
                payload: PayloadConfig {
                    bits: self.lora.bits,
                    clip_norm: self.lora.clip_norm,
                    noise_multiplier: self.lora.sigma,
                },
            },
            cost: CostModel {
                watts: self.energy.watts,
                seconds_per_sample: self.energy.seconds_per_sample,
                dense_bits: self.energy.dense_bits,
            },
            threads,
        }
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| FedError::config("seed is mandatory"))
    }
}

struct Checker {
    out: Vec<Diagnostic>,
}

impl Checker {
    fn check(&mut self, ok: bool, field: &str, value: impl fmt::Display, constraint: &str) {
        if !ok {
            self.out.push(Diagnostic {
                field: field.to_string(),
                value: value.to_string(),
                constraint: constraint.to_string(),
            });
        }
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

fn non_negative(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

/// Every violated precondition of [`crate::experiment::run`]; empty when the
/// configuration is runnable.
pub fn validate(cfg: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut c = Checker { out: Vec::new() };
    c.check(
        cfg.schema_version == SCHEMA_VERSION,
        "schema_version",
        cfg.schema_version,
        &format!("must be {SCHEMA_VERSION}"),
    );
    c.check(cfg.seed.is_some(), "seed", "null", "is mandatory");
    let Some(scenario) = cfg.scenario else {
        c.check(
            false,
            "scenario",
            "null",
            "must be one of fedavg-full, pfl-decoupled, lora-fl, trace-replay",
        );
        return c.out;
    };

    if scenario == Scenario::TraceReplay {
        let r = &cfg.replay;
        c.check(
            r.trace.is_some(),
            "replay.trace",
            "null",
            "is required for trace-replay",
        );
        c.check(
            r.threshold.is_finite() && (0.0..=1.0).contains(&r.threshold),
            "replay.threshold",
            r.threshold,
            "must lie in [0, 1]",
        );
        c.check(
            !(r.grouping.is_some() && r.bundled_grouping),
            "replay.bundled_grouping",
            r.bundled_grouping,
            "cannot be combined with replay.grouping",
        );
        return c.out;
    }

    let d = &cfg.dataset;
    c.check(d.n >= 1, "dataset.n", d.n, "must be >= 1");
    c.check(d.d >= 1, "dataset.d", d.d, "must be >= 1");
    c.check(d.classes >= 2, "dataset.classes", d.classes, "must be >= 2");
    c.check(d.domains >= 1, "dataset.domains", d.domains, "must be >= 1");
    c.check(
        d.class_sep.is_finite(),
        "dataset.class_sep",
        d.class_sep,
        "must be finite",
    );
    c.check(
        d.domain_shift.is_finite(),
        "dataset.domain_shift",
        d.domain_shift,
        "must be finite",
    );
    c.check(
        non_negative(d.noise_std),
        "dataset.noise_std",
        d.noise_std,
        "must be >= 0",
    );
    c.check(
        d.train_fraction > 0.0 && d.train_fraction < 1.0,
        "dataset.train_fraction",
        d.train_fraction,
        "must lie in (0, 1)",
    );

    let p = &cfg.partition;
    c.check(
        p.n_clients >= 1,
        "partition.n_clients",
        p.n_clients,
        "must be >= 1",
    );
    c.check(
        d.n * 4 / 5 >= p.n_clients,
        "partition.n_clients",
        p.n_clients,
        "must not exceed the number of training examples",
    );
    if p.scheme == PartitionScheme::Dirichlet {
        c.check(positive(p.alpha), "partition.alpha", p.alpha, "must be > 0");
        if p.n_clients >= 1 && d.domains >= 1 {
            if let Err(e) = p
                .resolved_domain_map(d.domains)
                .validate(p.n_clients, d.domains)
            {
                c.check(
                    false,
                    "partition.domain_map",
                    format!("{:?}", p.domain_map),
                    &e.to_string(),
                );
            }
        }
    }

    let f = &cfg.federation;
    c.check(f.rounds >= 1, "federation.rounds", f.rounds, "must be >= 1");
    c.check(
        f.participation_fraction > 0.0 && f.participation_fraction <= 1.0,
        "federation.participation_fraction",
        f.participation_fraction,
        "must lie in (0, 1]",
    );

    let t = &cfg.training;
    c.check(t.epochs >= 1, "training.epochs", t.epochs, "must be >= 1");
    c.check(positive(t.lr), "training.lr", t.lr, "must be > 0");
    c.check(
        t.batch_size >= 1,
        "training.batch_size",
        t.batch_size,
        "must be >= 1",
    );

    let spec = cfg.model_spec();
    let spec_ok = d.d >= 1 && d.classes >= 2;
    if spec_ok {
        if let Err(e) = spec.validate() {
            c.check(
                false,
                "model",
                format!("{:?}", cfg.model.kind),
                &e.to_string(),
            );
        }
    }
    if scenario == Scenario::PflDecoupled {
        c.check(
            !spec.head_segments.is_empty(),
            "model.head_segments",
            "[]",
            "pfl-decoupled needs a non-empty head",
        );
    }

    if scenario == Scenario::LoraFl {
        let l = &cfg.lora;
        c.check(l.rank >= 1, "lora.rank", l.rank, "must be >= 1");
        c.check(l.alpha.is_finite(), "lora.alpha", l.alpha, "must be finite");
        c.check(
            matches!(l.bits, 4 | 8 | 16 | 32),
            "lora.bits",
            l.bits,
            "must be 4, 8, 16 or 32",
        );
        c.check(
            positive(l.clip_norm),
            "lora.clip_norm",
            l.clip_norm,
            "must be > 0",
        );
        c.check(non_negative(l.sigma), "lora.sigma", l.sigma, "must be >= 0");
        c.check(
            non_negative(l.init_std),
            "lora.init_std",
            l.init_std,
            "must be >= 0",
        );
        c.check(
            !l.targets.is_empty(),
            "lora.targets",
            "[]",
            "must name at least one matrix",
        );
        if spec_ok {
            let layout = spec.layout();
            for target in &l.targets {
                let is_matrix = layout.iter().any(|(n, s)| n == target && s.len() == 2);
                c.check(
                    is_matrix,
                    "lora.targets",
                    target,
                    "must name a 2-D model segment",
                );
            }
        }
    }

    let e = &cfg.energy;
    c.check(
        non_negative(e.watts),
        "energy.watts",
        e.watts,
        "must be >= 0",
    );
    c.check(
        non_negative(e.seconds_per_sample),
        "energy.seconds_per_sample",
        e.seconds_per_sample,
        "must be >= 0",
    );
    c.check(
        non_negative(e.emission_factor),
        "energy.emission_factor",
        e.emission_factor,
        "must be >= 0",
    );
    c.check(
        matches!(e.dense_bits, 4 | 8 | 16 | 32 | 64),
        "energy.dense_bits",
        e.dense_bits,
        "must be 4, 8, 16, 32 or 64",
    );
    if let Some(emb) = &e.embodied {
        c.check(
            positive(emb.lifetime_hours),
            "energy.embodied.lifetime_hours",
            emb.lifetime_hours,
            "must be > 0",
        );
        c.check(
            non_negative(emb.manufacturing_gco2e),
            "energy.embodied.manufacturing_gco2e",
            emb.manufacturing_gco2e,
            "must be >= 0",
        );
    }
    c.out
}
