//! FedAvg orchestration: partial client sampling, weighted aggregation and
//! per-round evaluation, for full-model, decoupled-head and LoRA strategies.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    apply_payloads, build_payloads, lora_aggregate, lora_local_train, merge_adapters, payload_norm,
    LoraAdapter, PayloadConfig, DEFAULT_ALPHA, DEFAULT_INIT_STD, DEFAULT_RANK,
};
use crate::dataset::LabeledDataset;
use crate::error::{FedError, Result};
use crate::greenledger::EnergyLedger;
use crate::metrics::{evaluate_probs, EvalMetrics};
use crate::model::{local_train, predict_proba, ModelSpec, ParamVector, TrainConfig};
use crate::partition::{csv_writer, ClientAssignment};
use crate::personalization::{
    decoupled_aggregate, merge_params, personalized_evaluate, split_params, ClientMetrics,
    DecoupleMask,
};
use crate::rng::{client_stream, stream, Stream};
use crate::scalar::Scalar;

/// A value contributed by one client with its sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct Weighted<U> {
    pub client_id: usize,
    pub value: U,
    pub n_samples: u64,
}

impl<U> Weighted<U> {
    pub fn new(client_id: usize, value: U, n_samples: u64) -> Self {
        Self {
            client_id,
            value,
            n_samples,
        }
    }
}

pub type ClientUpdate<T> = Weighted<ParamVector<T>>;

/// `sum_k (n_k / N) x_k` over equally sized slices, accumulated in ascending
/// client-id order regardless of input order.
pub fn weighted_mean<U, T, F>(items: &[Weighted<U>], view: F) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&U) -> &[T],
{
    if items.is_empty() {
        return Err(FedError::EmptyInput("nothing to aggregate".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| items[i].client_id);
    let len = view(&items[0].value).len();
    if items.iter().any(|w| view(&w.value).len() != len) {
        return Err(FedError::shape("aggregated vectors differ in length"));
    }
    let total: u64 = items.iter().map(|w| w.n_samples).sum();
    if total == 0 {
        return Err(FedError::DegenerateWeights);
    }
    let total = T::of(total as f64);
    let mut out = vec![T::zero(); len];
    for i in order {
        let coef = T::of(items[i].n_samples as f64) / total;
        for (o, &x) in out.iter_mut().zip(view(&items[i].value)) {
            *o += coef * x;
        }
    }
    Ok(out)
}

/// Sample-count weighted average of client parameter vectors.
pub fn fedavg_aggregate<T: Scalar>(updates: &[ClientUpdate<T>]) -> Result<ParamVector<T>> {
    let first = &updates
        .first()
        .ok_or_else(|| FedError::EmptyInput("no client updates".into()))?
        .value;
    if updates.iter().any(|u| !u.value.same_layout(first)) {
        return Err(FedError::shape("client updates have different layouts"));
    }
    let values = weighted_mean(updates, |p| p.values())?;
    ParamVector::from_values(&first.layout(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub rounds: usize,
    pub n_clients: usize,
    pub participation_fraction: f64,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            n_clients: 10,
            participation_fraction: 0.5,
            seed: 0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(FedError::config("rounds must be >= 1"));
        }
        if self.n_clients == 0 {
            return Err(FedError::config("n_clients must be >= 1"));
        }
        let f = self.participation_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(FedError::config(format!(
                "participation_fraction must lie in (0, 1], got {f}"
            )));
        }
        Ok(())
    }

    /// `ceil(n_clients * participation_fraction)`, ignoring floating-point
    /// noise below 1e-9 (so 10 x 0.3 is 3, not 4).
    pub fn clients_per_round(&self) -> usize {
        let x = self.n_clients as f64 * self.participation_fraction;
        let k = if (x - x.round()).abs() < 1e-9 {
            x.round()
        } else {
            x.ceil()
        };
        (k as usize).clamp(1, self.n_clients)
    }
}

/// Distinct client ids chosen uniformly without replacement, ascending.
/// Depends only on `(seed, round)`.
pub fn sample_clients(round: usize, config: &RoundConfig) -> Result<Vec<usize>> {
    config.validate()?;
    let mut rng = stream(config.seed, Stream::Sampling, &[round as u64]);
    let mut ids =
        rand::seq::index::sample(&mut rng, config.n_clients, config.clients_per_round()).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Full,
    Decoupled,
    Lora,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraSettings {
    pub targets: Vec<String>,
    pub rank: usize,
    pub alpha: f64,
    pub init_std: f64,
    pub payload: PayloadConfig,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            targets: vec!["hidden0.weight".to_string()],
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            init_std: DEFAULT_INIT_STD,
            payload: PayloadConfig::default(),
        }
    }
}

/// Simulated client cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub watts: f64,
    pub seconds_per_sample: f64,
    /// Bits per value when a dense parameter vector is uploaded.
    pub dense_bits: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            watts: 150.0,
            seconds_per_sample: 0.05,
            dense_bits: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Hyperparams {
    pub train: TrainConfig,
    pub lora: LoraSettings,
    pub cost: CostModel,
    /// Worker threads for client training; `None` uses rayon's default.
    pub threads: Option<usize>,
}

/// Everything a run reads besides its configuration.
#[derive(Debug, Clone, Copy)]
pub struct FederationSetup<'a, T> {
    pub spec: &'a ModelSpec,
    pub train: &'a LabeledDataset<T>,
    pub assignment: &'a ClientAssignment,
    /// Global validation split.
    pub validation: &'a LabeledDataset<T>,
    /// Optional per-client validation sets, indexed by client id.
    pub client_validation: Option<&'a [LabeledDataset<T>]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub metrics: EvalMetrics,
    pub bytes: u64,
    pub energy_wh: f64,
    pub duration_s: f64,
    /// Largest L2 norm of a dequantized adapter payload (LoRA runs only).
    pub max_update_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FinalState<T> {
    Full(ParamVector<T>),
    Decoupled {
        backbone: ParamVector<T>,
        heads: Vec<ParamVector<T>>,
    },
    Lora {
        base: ParamVector<T>,
        adapters: Vec<LoraAdapter<T>>,
    },
}

impl<T: Scalar> FinalState<T> {
    /// Parameters of the shared global model. For decoupled runs the head of
    /// `client` is used.
    pub fn params_for(&self, spec: &ModelSpec, client: usize) -> Result<ParamVector<T>> {
        match self {
            FinalState::Full(p) => Ok(p.clone()),
            FinalState::Decoupled { backbone, heads } => {
                let head = heads
                    .get(client)
                    .ok_or_else(|| FedError::config(format!("no head for client {client}")))?;
                merge_params(backbone, head, &spec.layout())
            }
            FinalState::Lora { base, adapters } => merge_adapters(base, adapters),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationOutcome<T> {
    pub history: Vec<RoundRecord>,
    pub final_state: FinalState<T>,
    /// Per-client metrics of the final state, when per-client validation
    /// sets were supplied. Full and LoRA runs use the shared model everywhere.
    pub client_metrics: Option<Vec<ClientMetrics>>,
    pub client_mean: Option<EvalMetrics>,
}

pub fn evaluate_model<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    data: &LabeledDataset<T>,
) -> Result<EvalMetrics> {
    let probs = predict_proba(spec, params, data)?;
    let labels: Vec<usize> = data.examples().iter().map(|e| e.label).collect();
    evaluate_probs(&labels, &probs)
}

/// One client's contribution to a round.
struct ClientResult<T> {
    client_id: usize,
    n_samples: u64,
    upload: Upload<T>,
    ledger: EnergyLedger,
    bytes: u64,
}

enum Upload<T> {
    Params(ParamVector<T>),
    Adapters {
        adapters: Vec<LoraAdapter<T>>,
        norm: f64,
    },
}

struct RunState<T> {
    global: ParamVector<T>,
    heads: Vec<ParamVector<T>>,
    adapters: Vec<LoraAdapter<T>>,
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| FedError::config(format!("thread pool: {e}")))
}

/// Runs `config.rounds` rounds of sample → local train → (clip, quantize) →
/// aggregate → evaluate, charging `ledger` for every selected client.
pub fn run_federation<T: Scalar>(
    config: &RoundConfig,
    setup: &FederationSetup<'_, T>,
    strategy: Strategy,
    hyper: &Hyperparams,
    ledger: &mut EnergyLedger,
) -> Result<FederationOutcome<T>> {
    config.validate()?;
    hyper.train.validate()?;
    let spec = setup.spec;
    spec.validate()?;
    if setup.assignment.n_clients() != config.n_clients {
        return Err(FedError::config(format!(
            "assignment has {} clients, round config {}",
            setup.assignment.n_clients(),
            config.n_clients
        )));
    }
    if let Some(cv) = setup.client_validation {
        if cv.len() != config.n_clients {
            return Err(FedError::config(
                "one validation set per client is required",
            ));
        }
    }
    let client_data = setup.assignment.datasets(setup.train);
    let mask = DecoupleMask::from_spec(spec);
    let layout = spec.layout();

    let mut init_rng = stream(config.seed, Stream::Init, &[]);
    let initial: ParamVector<T> = spec.init(&mut init_rng)?;
    let mut state = RunState {
        heads: Vec::new(),
        adapters: Vec::new(),
        global: initial,
    };
    match strategy {
        Strategy::Full => {}
        Strategy::Decoupled => {
            if spec.head_segments.is_empty() {
                return Err(FedError::config("decoupled strategy needs head segments"));
            }
            let (_, head) = split_params(&state.global, &mask)?;
            state.heads = vec![head; config.n_clients];
        }
        Strategy::Lora => {
            let lora = &hyper.lora;
            if lora.targets.is_empty() {
                return Err(FedError::config(
                    "lora strategy needs at least one adapter target",
                ));
            }
            let mut rng = stream(config.seed, Stream::AdapterInit, &[]);
            state.adapters = lora
                .targets
                .iter()
                .map(|t| {
                    LoraAdapter::init_for(
                        &state.global,
                        t,
                        lora.rank,
                        lora.alpha,
                        lora.init_std,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?;
        }
    }
    let backbone_len: usize = state
        .global
        .segments()
        .iter()
        .filter(|s| !mask.head.contains(&s.name))
        .map(|s| s.len())
        .sum();

    let workers = pool(hyper.threads)?;
    let mut history = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let selected = sample_clients(round, config)?;
        let state_ref = &state;
        let results: Vec<ClientResult<T>> = workers.install(|| {
            selected
                .par_iter()
                .map(|&k| {
                    client_round(
                        k,
                        round,
                        config,
                        spec,
                        &client_data[k],
                        state_ref,
                        strategy,
                        hyper,
                        &layout,
                        backbone_len,
                        ledger.emission_factor(),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut round_wh = 0.0;
        let mut round_s = 0.0;
        let mut round_bytes = 0;
        let mut max_norm: Option<f64> = None;
        for r in &results {
            ledger.absorb(&r.ledger);
            round_wh += r.ledger.total_wh();
            round_s += r.ledger.total_duration_s();
            round_bytes += r.bytes;
        }

        let metrics = match strategy {
            Strategy::Full => {
                let updates: Vec<ClientUpdate<T>> = results
                    .into_iter()
                    .map(|r| match r.upload {
                        Upload::Params(p) => Ok(Weighted::new(r.client_id, p, r.n_samples)),
                        Upload::Adapters { .. } => {
                            Err(FedError::config("unexpected adapter upload"))
                        }
                    })
                    .collect::<Result<_>>()?;
                state.global = fedavg_aggregate(&updates)?;
                evaluate_model(spec, &state.global, setup.validation)?
            }
            Strategy::Decoupled => {
                let updates: Vec<ClientUpdate<T>> = results
                    .into_iter()
                    .map(|r| match r.upload {
                        Upload::Params(p) => Ok(Weighted::new(r.client_id, p, r.n_samples)),
                        Upload::Adapters { .. } => {
                            Err(FedError::config("unexpected adapter upload"))
                        }
                    })
                    .collect::<Result<_>>()?;
                let (backbone, heads) = decoupled_aggregate(&updates, &mask)?;
                for h in heads {
                    state.heads[h.client_id] = h.value;
                }
                state.global = merge_params(&backbone, &state.heads[0], &layout)?;
                match setup.client_validation {
                    Some(cv) => personalized_evaluate(spec, &backbone, &state.heads, cv)?.mean,
                    None => evaluate_model(spec, &state.global, setup.validation)?,
                }
            }
            Strategy::Lora => {
                let mut per_client = Vec::with_capacity(results.len());
                for r in results {
                    match r.upload {
                        Upload::Adapters { adapters, norm } => {
                            max_norm = Some(max_norm.map_or(norm, |m: f64| m.max(norm)));
                            per_client.push((r.client_id, adapters, r.n_samples));
                        }
                        Upload::Params(_) => {
                            return Err(FedError::config("unexpected dense upload"))
                        }
                    }
                }
                state.adapters = (0..state.adapters.len())
                    .map(|j| {
                        let items: Vec<Weighted<LoraAdapter<T>>> = per_client
                            .iter()
                            .map(|(k, ads, n)| Weighted::new(*k, ads[j].clone(), *n))
                            .collect();
                        lora_aggregate(&items)
                    })
                    .collect::<Result<_>>()?;
                let merged = merge_adapters(&state.global, &state.adapters)?;
                evaluate_model(spec, &merged, setup.validation)?
            }
        };

        history.push(RoundRecord {
            round,
            selected,
            metrics,
            bytes: round_bytes,
            energy_wh: round_wh,
            duration_s: round_s,
            max_update_norm: max_norm,
        });
    }

    let final_state = match strategy {
        Strategy::Full => FinalState::Full(state.global),
        Strategy::Decoupled => {
            let (backbone, _) = split_params(&state.global, &mask)?;
            FinalState::Decoupled {
                backbone,
                heads: state.heads,
            }
        }
        Strategy::Lora => FinalState::Lora {
            base: state.global,
            adapters: state.adapters,
        },
    };

    let (client_metrics, client_mean) = match setup.client_validation {
        Some(cv) => {
            let report = match &final_state {
                FinalState::Decoupled { backbone, heads } => {
                    personalized_evaluate(spec, backbone, heads, cv)?
                }
                other => {
                    let shared = other.params_for(spec, 0)?;
                    let (backbone, head) = split_params(&shared, &mask)?;
                    let heads = vec![head; config.n_clients];
                    personalized_evaluate(spec, &backbone, &heads, cv)?
                }
            };
            (Some(report.per_client), Some(report.mean))
        }
        None => (None, None),
    };

    Ok(FederationOutcome {
        history,
        final_state,
        client_metrics,
        client_mean,
    })
}

#[allow(clippy::too_many_arguments)]
fn client_round<T: Scalar>(
    k: usize,
    round: usize,
    config: &RoundConfig,
    spec: &ModelSpec,
    data: &LabeledDataset<T>,
    state: &RunState<T>,
    strategy: Strategy,
    hyper: &Hyperparams,
    layout: &[(String, Vec<usize>)],
    backbone_len: usize,
    emission_factor: f64,
) -> Result<ClientResult<T>> {
    let mut rng = client_stream(config.seed, Stream::ClientTrain, k, round);
    let dense_bytes = |n: usize| (n as u64 * hyper.cost.dense_bits as u64).div_ceil(8);
    let (upload, bytes) = match strategy {
        Strategy::Full => {
            let p = local_train(spec, &state.global, data, &hyper.train, &mut rng)?;
            (Upload::Params(p), dense_bytes(state.global.len()))
        }
        Strategy::Decoupled => {
            let mask = DecoupleMask::from_spec(spec);
            let (backbone, _) = split_params(&state.global, &mask)?;
            let start = merge_params(&backbone, &state.heads[k], layout)?;
            let p = local_train(spec, &start, data, &hyper.train, &mut rng)?;
            (Upload::Params(p), dense_bytes(backbone_len))
        }
        Strategy::Lora => {
            let local = lora_local_train(
                spec,
                &state.global,
                &state.adapters,
                data,
                &hyper.train,
                &mut rng,
            )?;
            let mut noise_rng = client_stream(config.seed, Stream::DpNoise, k, round);
            let payloads =
                build_payloads(&local, &state.adapters, &hyper.lora.payload, &mut noise_rng)?;
            let bytes = payloads.iter().map(|p| p.accounted_bytes()).sum();
            let norm = payload_norm(&payloads).as_f64();
            let adapters = apply_payloads(&state.adapters, &payloads)?;
            (Upload::Adapters { adapters, norm }, bytes)
        }
    };
    let mut ledger = EnergyLedger::new(emission_factor)?;
    let seconds = hyper.cost.seconds_per_sample * (data.len() * hyper.train.epochs) as f64;
    ledger.charge("local_train", Some(k), hyper.cost.watts, seconds, 0)?;
    ledger.charge("upload", Some(k), 0.0, 0.0, bytes)?;
    Ok(ClientResult {
        client_id: k,
        n_samples: data.len() as u64,
        upload,
        ledger,
        bytes,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Round history CSV:
/// `round,client_ids,accuracy,f1,roc_auc,log_loss,bytes,energy_wh`, client ids
/// separated by `;`.
pub fn write_history_csv<W: Write>(records: &[RoundRecord], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record([
        "round",
        "client_ids",
        "accuracy",
        "f1",
        "roc_auc",
        "log_loss",
        "bytes",
        "energy_wh",
    ])?;
    for r in records {
        let ids: Vec<String> = r.selected.iter().map(usize::to_string).collect();
        w.write_record([
            r.round.to_string(),
            ids.join(";"),
            r.metrics.accuracy.to_string(),
            r.metrics.f1.to_string(),
            opt(r.metrics.roc_auc),
            r.metrics.log_loss.to_string(),
            r.bytes.to_string(),
            r.energy_wh.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(values: Vec<f64>) -> ParamVector<f64> {
        ParamVector::from_values(&[("w".to_string(), vec![values.len()])], values).unwrap()
    }

    #[test]
    fn single_client_is_identity() {
        let p = pv(vec![0.1, -3.3, 7.25]);
        let out = fedavg_aggregate(&[Weighted::new(4, p.clone(), 17)]).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn equal_weights_mean() {
        let out = fedavg_aggregate(&[
            Weighted::new(0, pv(vec![1.0, 3.0]), 10),
            Weighted::new(1, pv(vec![3.0, 5.0]), 10),
        ])
        .unwrap();
        assert_eq!(out.values(), &[2.0, 4.0]);
    }

    #[test]
    fn sample_weighted_mean() {
        let out = fedavg_aggregate(&[
            Weighted::new(0, pv(vec![1.0, 3.0]), 1),
            Weighted::new(1, pv(vec![3.0, 5.0]), 3),
        ])
        .unwrap();
        assert_eq!(out.values(), &[2.5, 4.5]);
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(
            fedavg_aggregate(&[
                Weighted::new(0, pv(vec![1.0]), 0),
                Weighted::new(1, pv(vec![2.0]), 0)
            ]),
            Err(FedError::DegenerateWeights)
        ));
        assert!(matches!(
            fedavg_aggregate(&[
                Weighted::new(0, pv(vec![1.0]), 1),
                Weighted::new(1, pv(vec![2.0, 1.0]), 1)
            ]),
            Err(FedError::Shape(_))
        ));
        assert!(fedavg_aggregate::<f64>(&[]).is_err());
    }

    #[test]
    fn per_round_count() {
        let mut c = RoundConfig::default();
        assert_eq!(c.clients_per_round(), 5);
        c.participation_fraction = 0.3;
        assert_eq!(c.clients_per_round(), 3);
        c.participation_fraction = 0.31;
        assert_eq!(c.clients_per_round(), 4);
        c.participation_fraction = 1.0;
        assert_eq!(sample_clients(3, &c).unwrap(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn sampling_is_deterministic_and_distinct() {
        let c = RoundConfig {
            seed: 9,
            ..RoundConfig::default()
        };
        let a = sample_clients(4, &c).unwrap();
        assert_eq!(a, sample_clients(4, &c).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn invalid_round_config() {
        let mut c = RoundConfig {
            rounds: 0,
            ..RoundConfig::default()
        };
        assert!(c.validate().is_err());
        c.rounds = 1;
        c.participation_fraction = 0.0;
        assert!(c.validate().is_err());
        c.participation_fraction = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn history_csv_format() {
        let rec = RoundRecord {
            round: 1,
            selected: vec![0, 3],
            metrics: EvalMetrics {
                accuracy: 0.5,
                f1: 0.25,
                roc_auc: None,
                log_loss: 0.75,
            },
            bytes: 400,
            energy_wh: 1.5,
            duration_s: 2.0,
            max_update_norm: None,
        };
        let mut out = Vec::new();
        write_history_csv(&[rec], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "round,client_ids,accuracy,f1,roc_auc,log_loss,bytes,energy_wh\n1,0;3,0.5,0.25,,0.75,400,1.5\n"
        );
    }
}
