//! Parameter-decoupled personalization: the backbone is averaged across
//! clients, each client keeps its own classification head.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{FedError, Result};
use crate::federation::{evaluate_model, fedavg_aggregate, ClientUpdate, Weighted};
use crate::metrics::EvalMetrics;
use crate::model::{ModelSpec, ParamVector};
use crate::partition::csv_writer;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoupleMask {
    pub backbone: Vec<String>,
    pub head: Vec<String>,
}

impl DecoupleMask {
    /// Head from `spec.head_segments`, everything else backbone.
    pub fn from_spec(spec: &ModelSpec) -> Self {
        let backbone = spec
            .layout()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !spec.head_segments.contains(n))
            .collect();
        Self {
            backbone,
            head: spec.head_segments.clone(),
        }
    }

    /// Checks that the two sets are disjoint and cover exactly the segments of
    /// `params`.
    pub fn validate<T: Scalar>(&self, params: &ParamVector<T>) -> Result<()> {
        for name in &self.backbone {
            if self.head.contains(name) {
                return Err(FedError::Mask(format!(
                    "`{name}` is both backbone and head"
                )));
            }
        }
        for seg in params.segments() {
            if !self.backbone.contains(&seg.name) && !self.head.contains(&seg.name) {
                return Err(FedError::Mask(format!(
                    "segment `{}` is not covered",
                    seg.name
                )));
            }
        }
        let known = |n: &String| params.segment(n).is_some();
        if let Some(n) = self.backbone.iter().chain(&self.head).find(|n| !known(n)) {
            return Err(FedError::Mask(format!("mask names unknown segment `{n}`")));
        }
        Ok(())
    }
}

fn select<T: Scalar>(params: &ParamVector<T>, names: &[String]) -> Result<ParamVector<T>> {
    let mut layout = Vec::new();
    let mut values = Vec::new();
    for seg in params.segments().iter().filter(|s| names.contains(&s.name)) {
        layout.push((seg.name.clone(), seg.shape.clone()));
        values.extend_from_slice(&params.values()[seg.range()]);
    }
    ParamVector::from_values(&layout, values)
}

/// `(backbone, head)`, each keeping the original segment order.
pub fn split_params<T: Scalar>(
    params: &ParamVector<T>,
    mask: &DecoupleMask,
) -> Result<(ParamVector<T>, ParamVector<T>)> {
    mask.validate(params)?;
    Ok((select(params, &mask.backbone)?, select(params, &mask.head)?))
}

/// Inverse of [`split_params`]: interleaves the segments of both parts back
/// into `layout` order.
pub fn merge_params<T: Scalar>(
    backbone: &ParamVector<T>,
    head: &ParamVector<T>,
    layout: &[(String, Vec<usize>)],
) -> Result<ParamVector<T>> {
    let mut values = Vec::new();
    for (name, shape) in layout {
        let part = backbone
            .segment(name)
            .map(|s| (backbone, s))
            .or_else(|| head.segment(name).map(|s| (head, s)))
            .ok_or_else(|| FedError::Mask(format!("segment `{name}` missing from both parts")))?;
        if &part.1.shape != shape {
            return Err(FedError::shape(format!(
                "segment `{name}` has the wrong shape"
            )));
        }
        values.extend_from_slice(&part.0.values()[part.1.range()]);
    }
    ParamVector::from_values(layout, values)
}

/// Aggregated backbone plus every client's untouched head.
pub type DecoupledRound<T> = (ParamVector<T>, Vec<Weighted<ParamVector<T>>>);

/// FedAvg over the backbone segments; every client's head is returned as
/// it came in.
pub fn decoupled_aggregate<T: Scalar>(
    client_params: &[ClientUpdate<T>],
    mask: &DecoupleMask,
) -> Result<DecoupledRound<T>> {
    let first = &client_params
        .first()
        .ok_or_else(|| FedError::EmptyInput("no client updates".into()))?
        .value;
    if client_params.iter().any(|u| !u.value.same_layout(first)) {
        return Err(FedError::shape("client updates have different layouts"));
    }
    let mut backbones = Vec::with_capacity(client_params.len());
    let mut heads = Vec::with_capacity(client_params.len());
    for u in client_params {
        let (b, h) = split_params(&u.value, mask)?;
        backbones.push(Weighted::new(u.client_id, b, u.n_samples));
        heads.push(Weighted::new(u.client_id, h, u.n_samples));
    }
    let backbone = if mask.backbone.is_empty() {
        backbones.swap_remove(0).value
    } else {
        fedavg_aggregate(&backbones)?
    };
    Ok((backbone, heads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub n_val: usize,
    /// `None` for clients without validation data.
    pub metrics: Option<EvalMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizedReport {
    pub per_client: Vec<ClientMetrics>,
    /// Validation-size weighted mean. AUC averages only clients where it is
    /// defined.
    pub mean: EvalMetrics,
}

/// Evaluates client `k` with the shared backbone and `heads[k]` on
/// `validation[k]`.
pub fn personalized_evaluate<T: Scalar>(
    spec: &ModelSpec,
    backbone: &ParamVector<T>,
    heads: &[ParamVector<T>],
    validation: &[LabeledDataset<T>],
) -> Result<PersonalizedReport> {
    if heads.len() < validation.len() {
        return Err(FedError::config(format!(
            "{} heads for {} clients",
            heads.len(),
            validation.len()
        )));
    }
    let layout = spec.layout();
    let mut per_client = Vec::with_capacity(validation.len());
    for (k, (val, head)) in validation.iter().zip(heads).enumerate() {
        let metrics = if val.is_empty() {
            None
        } else {
            let params = merge_params(backbone, head, &layout)?;
            Some(evaluate_model(spec, &params, val)?)
        };
        per_client.push(ClientMetrics {
            client_id: k,
            n_val: val.len(),
            metrics,
        });
    }
    let mean = weighted_mean_metrics(&per_client)?;
    Ok(PersonalizedReport { per_client, mean })
}

fn weighted_mean_metrics(per_client: &[ClientMetrics]) -> Result<EvalMetrics> {
    let (mut n, mut acc, mut f1, mut ll) = (0.0, 0.0, 0.0, 0.0);
    let (mut n_auc, mut auc) = (0.0, 0.0);
    for c in per_client {
        let Some(m) = &c.metrics else { continue };
        let w = c.n_val as f64;
        n += w;
        acc += w * m.accuracy;
        f1 += w * m.f1;
        ll += w * m.log_loss;
        if let Some(a) = m.roc_auc {
            n_auc += w;
            auc += w * a;
        }
    }
    if n == 0.0 {
        return Err(FedError::EmptyInput("no client has validation data".into()));
    }
    Ok(EvalMetrics {
        accuracy: acc / n,
        f1: f1 / n,
        roc_auc: (n_auc > 0.0).then(|| auc / n_auc),
        log_loss: ll / n,
    })
}

/// Per-client CSV: `client_id,n_val,accuracy,f1,roc_auc,log_loss`.
pub fn write_client_csv<W: Write>(rows: &[ClientMetrics], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record([
        "client_id",
        "n_val",
        "accuracy",
        "f1",
        "roc_auc",
        "log_loss",
    ])?;
    for r in rows {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let m = r.metrics.as_ref();
        w.write_record([
            r.client_id.to_string(),
            r.n_val.to_string(),
            fmt(m.map(|m| m.accuracy)),
            fmt(m.map(|m| m.f1)),
            fmt(m.and_then(|m| m.roc_auc)),
            fmt(m.map(|m| m.log_loss)),
        ])?;
    }
    w.flush()?;
    Ok(())
}
