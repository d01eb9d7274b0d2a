//! Classification metrics, confusion matrices and hierarchical class grouping.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::partition::csv_writer;
use crate::scalar::Scalar;

/// Probabilities are clipped to `[EPS, 1 - EPS]` before taking logs.
pub const LOG_LOSS_EPS: f64 = 1e-15;
/// Predicted label assigned to rows whose prediction fell in an excluded class.
pub const EXCLUDED_TOKEN: &str = "(excluded)";
/// Confusion-matrix column collecting predictions into excluded classes.
pub const OTHER_COLUMN: &str = "(other)";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub example_id: String,
    pub truth: usize,
    pub predicted: usize,
    pub score: Option<f64>,
}

/// Recorded per-example predictions over a declared class vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    vocabulary: Vec<String>,
    index: HashMap<String, usize>,
    rows: Vec<TraceRow>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    example_id: String,
    true_label: String,
    predicted_label: String,
    score: Option<f64>,
}

impl PredictionTrace {
    pub fn new(vocabulary: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, name) in vocabulary.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(FedError::Vocabulary(format!("duplicate class `{name}`")));
            }
        }
        Ok(Self {
            vocabulary,
            index,
            rows: Vec::new(),
        })
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| FedError::Vocabulary(format!("unknown class `{name}`")))
    }

    pub fn push(
        &mut self,
        example_id: impl Into<String>,
        truth: &str,
        predicted: &str,
        score: Option<f64>,
    ) -> Result<()> {
        let truth = self.class_index(truth)?;
        let predicted = self.class_index(predicted)?;
        if let Some(s) = score {
            if !(0.0..=1.0).contains(&s) {
                return Err(FedError::Numeric(format!("score {s} outside [0, 1]")));
            }
        }
        self.rows.push(TraceRow {
            example_id: example_id.into(),
            truth,
            predicted,
            score,
        });
        Ok(())
    }

    /// Reads `example_id,true_label,predicted_label,score`. Without an explicit
    /// vocabulary, the sorted set of labels seen in the file is used.
    pub fn read_csv<R: Read>(input: R, vocabulary: Option<Vec<String>>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(input);
        let rows: Vec<CsvRow> = reader
            .deserialize()
            .collect::<std::result::Result<_, _>>()?;
        let vocabulary = vocabulary.unwrap_or_else(|| {
            rows.iter()
                .flat_map(|r| [r.true_label.clone(), r.predicted_label.clone()])
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        });
        let mut trace = Self::new(vocabulary)?;
        for r in rows {
            trace.push(r.example_id, &r.true_label, &r.predicted_label, r.score)?;
        }
        Ok(trace)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["example_id", "true_label", "predicted_label", "score"])?;
        for r in &self.rows {
            w.write_record([
                r.example_id.clone(),
                self.vocabulary[r.truth].clone(),
                self.vocabulary[r.predicted].clone(),
                r.score.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fraction of rows whose predicted label equals the true label.
    pub fn accuracy(&self) -> Result<f64> {
        if self.rows.is_empty() {
            return Err(FedError::EmptyInput("accuracy of an empty trace".into()));
        }
        let hits = self.rows.iter().filter(|r| r.truth == r.predicted).count();
        Ok(hits as f64 / self.rows.len() as f64)
    }
}

/// Mann-Whitney ROC AUC: the fraction of positive/negative pairs ranked
/// correctly, ties credited one half. Computed from mid-ranks in
/// `O(n log n)`.
pub fn roc_auc<T: Scalar>(positive: &[bool], scores: &[T]) -> Result<T> {
    if positive.len() != scores.len() {
        return Err(FedError::shape("labels and scores differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(FedError::Numeric("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(FedError::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    let mut rank_sum_pos = T::zero();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = T::of_usize(i + j + 2) / T::of(2.0);
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let np = T::of_usize(n_pos);
    let u = rank_sum_pos - np * (np + T::one()) / T::of(2.0);
    Ok(u / (np * T::of_usize(n_neg)))
}

/// Mean binary cross-entropy; the probability given to the true class is
/// clipped below at [`LOG_LOSS_EPS`].
pub fn binary_log_loss<T: Scalar>(positive: &[bool], probs: &[T]) -> Result<T> {
    if positive.len() != probs.len() {
        return Err(FedError::shape("labels and probabilities differ in length"));
    }
    if probs.is_empty() {
        return Err(FedError::EmptyInput("log loss of no rows".into()));
    }
    let eps = T::of(LOG_LOSS_EPS);
    let total: T = positive
        .iter()
        .zip(probs)
        .map(|(&y, &p)| {
            let q = if y { p } else { T::one() - p };
            -q.max(eps).ln()
        })
        .sum();
    Ok(total / T::of_usize(probs.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    /// F1 of the positive class.
    pub f1: f64,
    /// `None` when the trace holds a single class.
    pub roc_auc: Option<f64>,
    pub log_loss: f64,
}

fn binary_from_parts(positive: &[bool], scores: &[f64], threshold: f64) -> Result<BinaryMetrics> {
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&y, &s) in positive.iter().zip(scores) {
        match (y, s >= threshold) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let n = positive.len() as f64;
    let f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    let roc_auc = match roc_auc(positive, scores) {
        Ok(v) => Some(v),
        Err(FedError::UndefinedAuc) => None,
        Err(e) => return Err(e),
    };
    Ok(BinaryMetrics {
        accuracy: (tp + tn) as f64 / n,
        f1,
        roc_auc,
        log_loss: binary_log_loss(positive, scores)?,
    })
}

/// Accuracy and positive-class F1 at `threshold` (score >= threshold is
/// positive), ROC AUC, and log loss. The positive class is vocabulary entry 1.
pub fn binary_metrics(trace: &PredictionTrace, threshold: f64) -> Result<BinaryMetrics> {
    if trace.vocabulary.len() != 2 {
        return Err(FedError::Vocabulary(format!(
            "binary metrics need a 2-class vocabulary, got {}",
            trace.vocabulary.len()
        )));
    }
    if trace.is_empty() {
        return Err(FedError::EmptyInput(
            "binary metrics of an empty trace".into(),
        ));
    }
    let positive: Vec<bool> = trace.rows.iter().map(|r| r.truth == 1).collect();
    let scores = trace
        .rows
        .iter()
        .map(|r| {
            r.score
                .ok_or_else(|| FedError::Numeric(format!("row `{}` has no score", r.example_id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    binary_from_parts(&positive, &scores, threshold)
}

/// Like [`binary_metrics`], but reports a single-class trace as
/// [`FedError::UndefinedAuc`].
pub fn binary_metrics_strict(trace: &PredictionTrace, threshold: f64) -> Result<BinaryMetrics> {
    let m = binary_metrics(trace, threshold)?;
    if m.roc_auc.is_none() {
        return Err(FedError::UndefinedAuc);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: String,
    pub support: usize,
    pub predicted: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// The class never occurs in the truth column; recall reported as 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassMetrics {
    pub accuracy: f64,
    /// Unweighted mean F1 over classes occurring in truth or predictions.
    pub macro_f1: f64,
    pub per_class: Vec<ClassStats>,
    pub warnings: Vec<String>,
}

fn stats_from_counts(tp: usize, support: usize, predicted: usize) -> (f64, f64, f64) {
    let precision = if predicted == 0 {
        0.0
    } else {
        tp as f64 / predicted as f64
    };
    let recall = if support == 0 {
        0.0
    } else {
        tp as f64 / support as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

pub fn multiclass_metrics(trace: &PredictionTrace) -> Result<MulticlassMetrics> {
    let accuracy = trace.accuracy()?;
    let k = trace.vocabulary.len();
    let mut tp = vec![0usize; k];
    let mut support = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    for r in &trace.rows {
        support[r.truth] += 1;
        predicted[r.predicted] += 1;
        if r.truth == r.predicted {
            tp[r.truth] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    let mut f1_sum = 0.0;
    let mut f1_count = 0usize;
    for c in 0..k {
        let (precision, recall, f1) = stats_from_counts(tp[c], support[c], predicted[c]);
        let recall_undefined = support[c] == 0;
        if recall_undefined && predicted[c] > 0 {
            warnings.push(format!(
                "class `{}` is predicted but never true; recall set to 0",
                trace.vocabulary[c]
            ));
        }
        if support[c] > 0 || predicted[c] > 0 {
            f1_sum += f1;
            f1_count += 1;
        }
        per_class.push(ClassStats {
            class: trace.vocabulary[c].clone(),
            support: support[c],
            predicted: predicted[c],
            precision,
            recall,
            f1,
            recall_undefined,
        });
    }
    Ok(MulticlassMetrics {
        accuracy,
        macro_f1: f1_sum / f1_count as f64,
        per_class,
        warnings,
    })
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn get(&self, truth: &str, predicted: &str) -> Option<f64> {
        let r = self.rows.iter().position(|c| c == truth)?;
        let c = self.columns.iter().position(|c| c == predicted)?;
        Some(self.values[r][c])
    }

    /// CSV with a `true\predicted` corner cell.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Confusion counts with `exclude`d classes removed from the truth axis.
/// Predictions into excluded classes land in an extra [`OTHER_COLUMN`]
/// (present whenever `exclude` is non-empty). With `normalize`, each
/// non-empty row sums to one.
pub fn confusion_matrix(
    trace: &PredictionTrace,
    exclude: &[&str],
    normalize: bool,
) -> Result<ConfusionMatrix> {
    let excluded: BTreeSet<usize> = exclude
        .iter()
        .map(|name| trace.class_index(name))
        .collect::<Result<_>>()?;
    let kept: Vec<usize> = (0..trace.vocabulary.len())
        .filter(|c| !excluded.contains(c))
        .collect();
    if kept.is_empty() {
        return Ok(ConfusionMatrix {
            rows: Vec::new(),
            columns: Vec::new(),
            values: Vec::new(),
        });
    }
    let mut position = vec![None; trace.vocabulary.len()];
    for (i, &c) in kept.iter().enumerate() {
        position[c] = Some(i);
    }
    let other = (!excluded.is_empty()).then_some(kept.len());
    let width = kept.len() + usize::from(other.is_some());
    let mut values = vec![vec![0.0; width]; kept.len()];
    for r in &trace.rows {
        let Some(row) = position[r.truth] else {
            continue;
        };
        let col = position[r.predicted]
            .or(other)
            .expect("excluded prediction implies other column");
        values[row][col] += 1.0;
    }
    if normalize {
        for row in &mut values {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
    }
    let rows: Vec<String> = kept.iter().map(|&c| trace.vocabulary[c].clone()).collect();
    let mut columns = rows.clone();
    if other.is_some() {
        columns.push(OTHER_COLUMN.to_string());
    }
    Ok(ConfusionMatrix {
        rows,
        columns,
        values,
    })
}

/// Group name → member classes, retained singletons and excluded classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupingMap {
    pub groups: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub retained: Vec<String>,
    #[serde(default)]
    pub excluded: Vec<String>,
}

const UCF_CRIME_GROUPING: &str = include_str!("../configs/ucf_crime_grouping.json");

impl GroupingMap {
    /// UCF-Crime grouping: Destruction, Property Crime and Violence groups;
    /// RoadAccidents and Normal Video kept; Abuse, Arrest, Shooting dropped.
    pub fn ucf_crime() -> Self {
        serde_json::from_str(UCF_CRIME_GROUPING).expect("bundled grouping map parses")
    }

    /// Every class a singleton, nothing excluded.
    pub fn identity(vocabulary: &[String]) -> Self {
        Self {
            groups: BTreeMap::new(),
            retained: vocabulary.to_vec(),
            excluded: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    /// Checks that groups, singletons and exclusions are pairwise disjoint
    /// and that no output label is reused.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let members = self
            .groups
            .values()
            .flatten()
            .chain(&self.retained)
            .chain(&self.excluded);
        for class in members {
            if !seen.insert(class.as_str()) {
                return Err(FedError::Vocabulary(format!(
                    "class `{class}` appears more than once in the grouping map"
                )));
            }
        }
        let mut outputs = BTreeSet::new();
        for name in self.groups.keys().chain(&self.retained) {
            if !outputs.insert(name.as_str()) || name == EXCLUDED_TOKEN {
                return Err(FedError::Vocabulary(format!(
                    "output label `{name}` is ambiguous"
                )));
            }
        }
        Ok(())
    }

    /// All original classes the map mentions.
    pub fn classes(&self) -> Vec<String> {
        self.groups
            .values()
            .flatten()
            .chain(&self.retained)
            .chain(&self.excluded)
            .cloned()
            .collect()
    }

    /// Grouped vocabulary: group names, retained classes, then the reserved
    /// excluded token.
    pub fn grouped_vocabulary(&self) -> Vec<String> {
        self.groups
            .keys()
            .chain(&self.retained)
            .cloned()
            .chain(std::iter::once(EXCLUDED_TOKEN.to_string()))
            .collect()
    }

    fn target<'a>(&'a self, class: &'a str) -> Option<Target<'a>> {
        if self.excluded.iter().any(|c| c == class) {
            return Some(Target::Excluded);
        }
        if self.retained.iter().any(|c| c == class) {
            return Some(Target::Label(class));
        }
        self.groups
            .iter()
            .find(|(_, members)| members.iter().any(|m| m == class))
            .map(|(g, _)| Target::Label(g.as_str()))
    }
}

enum Target<'a> {
    Label(&'a str),
    Excluded,
}

/// Maps a trace onto the grouped vocabulary. Rows with an excluded true class
/// are dropped; predictions into excluded classes become [`EXCLUDED_TOKEN`]
/// and count as errors.
pub fn regroup(trace: &PredictionTrace, map: &GroupingMap) -> Result<PredictionTrace> {
    map.validate()?;
    let mut targets = Vec::with_capacity(trace.vocabulary.len());
    for class in &trace.vocabulary {
        targets.push(map.target(class).ok_or_else(|| {
            FedError::Vocabulary(format!(
                "class `{class}` is not covered by the grouping map"
            ))
        })?);
    }
    let mut out = PredictionTrace::new(map.grouped_vocabulary())?;
    for r in &trace.rows {
        let truth = match targets[r.truth] {
            Target::Excluded => continue,
            Target::Label(l) => l,
        };
        let predicted = match targets[r.predicted] {
            Target::Excluded => EXCLUDED_TOKEN,
            Target::Label(l) => l,
        };
        out.push(r.example_id.clone(), truth, predicted, r.score)?;
    }
    Ok(out)
}

/// Metrics reported for a model evaluated on a labeled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Positive-class F1 for two classes, macro F1 otherwise.
    pub f1: f64,
    /// Binary AUC, or macro one-vs-rest AUC over classes with both
    /// positives and negatives. `None` when undefined.
    pub roc_auc: Option<f64>,
    pub log_loss: f64,
}

/// Metrics of class-probability rows against true labels. Binary problems
/// use the class-1 probability as score at threshold 0.5.
pub fn evaluate_probs<T: Scalar>(labels: &[usize], probs: &[Vec<T>]) -> Result<EvalMetrics> {
    if labels.len() != probs.len() {
        return Err(FedError::shape(
            "labels and probability rows differ in length",
        ));
    }
    if labels.is_empty() {
        return Err(FedError::EmptyInput("evaluation on an empty set".into()));
    }
    let k = probs[0].len();
    if probs.iter().any(|p| p.len() != k) || labels.iter().any(|&l| l >= k) {
        return Err(FedError::shape("inconsistent class count"));
    }
    if k == 2 {
        let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let scores: Vec<f64> = probs.iter().map(|p| p[1].as_f64()).collect();
        let m = binary_from_parts(&positive, &scores, 0.5)?;
        return Ok(EvalMetrics {
            accuracy: m.accuracy,
            f1: m.f1,
            roc_auc: m.roc_auc,
            log_loss: m.log_loss,
        });
    }
    let mut tp = vec![0usize; k];
    let mut support = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let eps = LOG_LOSS_EPS;
    let mut nll = 0.0;
    for (&y, p) in labels.iter().zip(probs) {
        let argmax = p
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > p[best] { i } else { best });
        support[y] += 1;
        predicted[argmax] += 1;
        if argmax == y {
            tp[y] += 1;
        }
        nll -= p[y].as_f64().max(eps).ln();
    }
    let n = labels.len() as f64;
    let present: Vec<usize> = (0..k)
        .filter(|&c| support[c] > 0 || predicted[c] > 0)
        .collect();
    let f1 = present
        .iter()
        .map(|&c| stats_from_counts(tp[c], support[c], predicted[c]).2)
        .sum::<f64>()
        / present.len() as f64;
    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;
    for c in 0..k {
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let scores: Vec<f64> = probs.iter().map(|p| p[c].as_f64()).collect();
        if let Ok(a) = roc_auc(&positive, &scores) {
            auc_sum += a;
            auc_count += 1;
        }
    }
    Ok(EvalMetrics {
        accuracy: tp.iter().sum::<usize>() as f64 / n,
        f1,
        roc_auc: (auc_count > 0).then(|| auc_sum / auc_count as f64),
        log_loss: nll / n,
    })
}
