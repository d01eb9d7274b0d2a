//! Train/validation splitting and non-IID client assignment.
//!
//! Clients are first restricted to one source domain, then label skew is
//! induced within each domain: for every class, client proportions are drawn
//! from a symmetric Dirichlet over that domain's clients and the class's
//! examples are dealt out accordingly (floors first, remainder round-robin).

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, LabeledExample};
use crate::error::{FedError, Result};
use crate::scalar::Scalar;

/// Index lists produced by [`stratified_split_indices`], ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

pub fn stratified_split_indices<T: Scalar, R: Rng + ?Sized>(
    data: &LabeledDataset<T>,
    train_fraction: f64,
    rng: &mut R,
) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(FedError::config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class = vec![Vec::new(); data.num_classes()];
    for (i, ex) in data.examples().iter().enumerate() {
        by_class[ex.label].push(i);
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            return Err(FedError::Stratification(format!(
                "class {class} has no examples"
            )));
        }
        idx.shuffle(rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        validation.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    Ok(SplitIndices { train, validation })
}

/// Per-class stratified split into `(train, validation)`.
pub fn stratified_split<T: Scalar, R: Rng + ?Sized>(
    data: &LabeledDataset<T>,
    train_fraction: f64,
    rng: &mut R,
) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    let split = stratified_split_indices(data, train_fraction, rng)?;
    Ok((data.subset(&split.train), data.subset(&split.validation)))
}

/// `domain_map[d]` lists the clients that may hold examples of domain `d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainMap(pub Vec<Vec<usize>>);

impl DomainMap {
    /// Clients split into `num_domains` contiguous blocks of near-equal size.
    pub fn contiguous(n_clients: usize, num_domains: usize) -> Self {
        let mut map = vec![Vec::new(); num_domains];
        for c in 0..n_clients {
            map[c * num_domains / n_clients.max(1)].push(c);
        }
        DomainMap(map)
    }

    pub fn validate(&self, n_clients: usize, num_domains: usize) -> Result<Vec<usize>> {
        if self.0.len() != num_domains {
            return Err(FedError::config(format!(
                "domain_map has {} entries for {num_domains} domains",
                self.0.len()
            )));
        }
        let mut owner = vec![None; n_clients];
        for (d, clients) in self.0.iter().enumerate() {
            for &c in clients {
                if c >= n_clients {
                    return Err(FedError::config(format!(
                        "domain_map[{d}] names client {c} but there are {n_clients} clients"
                    )));
                }
                if let Some(prev) = owner[c] {
                    return Err(FedError::config(format!(
                        "client {c} is mapped to domains {prev} and {d}"
                    )));
                }
                owner[c] = Some(d);
            }
        }
        owner
            .into_iter()
            .enumerate()
            .map(|(c, d)| d.ok_or_else(|| FedError::config(format!("client {c} has no domain"))))
            .collect()
    }
}

/// Dirichlet draws, `proportions[domain][class][k]` for the `k`-th client of
/// that domain's entry in the [`DomainMap`].
pub type LabelProportions = Vec<Vec<Vec<f64>>>;

/// Client id → example indices, plus per-client metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientAssignment {
    pub clients: Vec<Vec<usize>>,
    pub domains: Vec<usize>,
    pub label_histograms: Vec<Vec<usize>>,
    pub proportions: Option<LabelProportions>,
}

impl ClientAssignment {
    fn build<T: Scalar>(
        data: &LabeledDataset<T>,
        mut clients: Vec<Vec<usize>>,
        domains: Vec<usize>,
        proportions: Option<LabelProportions>,
    ) -> Self {
        for list in &mut clients {
            list.sort_unstable();
        }
        let label_histograms = clients
            .iter()
            .map(|idx| {
                let mut h = vec![0; data.num_classes()];
                for &i in idx {
                    h[data.examples()[i].label] += 1;
                }
                h
            })
            .collect();
        Self {
            clients,
            domains,
            label_histograms,
            proportions,
        }
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// Per-client datasets.
    pub fn datasets<T: Scalar>(&self, data: &LabeledDataset<T>) -> Vec<LabeledDataset<T>> {
        self.clients.iter().map(|idx| data.subset(idx)).collect()
    }

    /// CSV with header `client_id,example_index,label,domain`.
    pub fn write_csv<T: Scalar, W: Write>(&self, data: &LabeledDataset<T>, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["client_id", "example_index", "label", "domain"])?;
        for (client, idx) in self.clients.iter().enumerate() {
            for &i in idx {
                let ex = &data.examples()[i];
                w.write_record([
                    client.to_string(),
                    i.to_string(),
                    ex.label.to_string(),
                    ex.domain.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

/// Symmetric Dirichlet sample via normalized Gamma(alpha, 1) draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedError::config(format!(
            "Dirichlet alpha must be > 0, got {alpha}"
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| FedError::config(e.to_string()))?;
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|v| *v /= total);
    } else if k > 0 {
        // every draw underflowed (tiny alpha): all mass on one client
        let winner = rng.random_range(0..k);
        draws
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = if i == winner { 1.0 } else { 0.0 });
    }
    Ok(draws)
}

/// Deals `pool` (already shuffled) out to `k` buckets by `proportions`.
fn deal(pool: &[usize], proportions: &[f64], cursor: &mut usize, buckets: &mut [Vec<usize>]) {
    let k = buckets.len();
    let n = pool.len();
    let mut counts: Vec<usize> = proportions
        .iter()
        .map(|p| ((p * n as f64).floor() as usize).min(n))
        .collect();
    // floors of proportions summing to 1 never exceed n
    let assigned: usize = counts.iter().sum();
    for _ in assigned..n {
        counts[*cursor % k] += 1;
        *cursor += 1;
    }
    let mut start = 0;
    for (bucket, c) in buckets.iter_mut().zip(counts) {
        bucket.extend_from_slice(&pool[start..start + c]);
        start += c;
    }
}

/// Moves one example from the largest bucket into each empty one.
fn fill_empty(buckets: &mut [Vec<usize>]) {
    let total: usize = buckets.iter().map(Vec::len).sum();
    if total < buckets.len() {
        return;
    }
    while let Some(empty) = buckets.iter().position(Vec::is_empty) {
        let largest = buckets
            .iter()
            .enumerate()
            .max_by_key(|(i, b)| (b.len(), usize::MAX - i))
            .map(|(i, _)| i)
            .expect("non-empty bucket list");
        let moved = buckets[largest].pop().expect("largest bucket is non-empty");
        buckets[empty].push(moved);
    }
}

fn allocate<T: Scalar, R: Rng + ?Sized>(
    data: &LabeledDataset<T>,
    n_clients: usize,
    domain_map: &DomainMap,
    proportions: &LabelProportions,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let cells = data.cell_indices();
    let mut clients = vec![Vec::new(); n_clients];
    for (d, members) in domain_map.0.iter().enumerate() {
        let mut buckets = vec![Vec::new(); members.len()];
        let mut cursor = 0;
        for (c, cell) in cells[d].iter().enumerate() {
            let mut pool = cell.clone();
            pool.shuffle(rng);
            deal(&pool, &proportions[d][c], &mut cursor, &mut buckets);
        }
        fill_empty(&mut buckets);
        for (&client, bucket) in members.iter().zip(buckets) {
            clients[client] = bucket;
        }
    }
    clients
}

fn check_domain_coverage<T: Scalar>(
    data: &LabeledDataset<T>,
    domain_map: &DomainMap,
) -> Result<()> {
    let cells = data.cell_indices();
    for (d, members) in domain_map.0.iter().enumerate() {
        let populated: usize = cells[d].iter().map(Vec::len).sum();
        if populated > 0 && members.is_empty() {
            return Err(FedError::config(format!(
                "domain {d} has {populated} examples but no clients"
            )));
        }
    }
    Ok(())
}

/// Domain-restricted Dirichlet label-skew partition of `train`.
pub fn domain_dirichlet_partition<T: Scalar, R: Rng + ?Sized>(
    train: &LabeledDataset<T>,
    n_clients: usize,
    domain_map: &DomainMap,
    alpha: f64,
    rng: &mut R,
) -> Result<ClientAssignment> {
    if n_clients == 0 {
        return Err(FedError::config("n_clients must be >= 1"));
    }
    let domains = domain_map.validate(n_clients, train.num_domains())?;
    check_domain_coverage(train, domain_map)?;
    let mut proportions = Vec::with_capacity(train.num_domains());
    for members in &domain_map.0 {
        let per_class = (0..train.num_classes())
            .map(|_| sample_dirichlet(alpha, members.len(), rng))
            .collect::<Result<Vec<_>>>()?;
        proportions.push(per_class);
    }
    let clients = allocate(train, n_clients, domain_map, &proportions, rng);
    if let Some(c) = clients.iter().position(Vec::is_empty) {
        return Err(FedError::config(format!(
            "client {c} received no examples: its domain has fewer examples than clients"
        )));
    }
    Ok(ClientAssignment::build(
        train,
        clients,
        domains,
        Some(proportions),
    ))
}

/// Deals `data` to clients with previously drawn proportions, e.g. to give
/// each client a validation set with the same label skew as its training set.
/// Clients may end up empty when a domain has fewer examples than clients.
pub fn assign_with_proportions<T: Scalar, R: Rng + ?Sized>(
    data: &LabeledDataset<T>,
    n_clients: usize,
    domain_map: &DomainMap,
    proportions: &LabelProportions,
    rng: &mut R,
) -> Result<ClientAssignment> {
    let domains = domain_map.validate(n_clients, data.num_domains())?;
    check_domain_coverage(data, domain_map)?;
    if proportions.len() != data.num_domains()
        || proportions.iter().any(|p| p.len() != data.num_classes())
    {
        return Err(FedError::shape(
            "proportions do not match dataset domains/classes",
        ));
    }
    let clients = allocate(data, n_clients, domain_map, proportions, rng);
    Ok(ClientAssignment::build(
        data,
        clients,
        domains,
        Some(proportions.clone()),
    ))
}

/// Uniform random split into `n_clients` near-equal shards.
pub fn iid_partition<T: Scalar, R: Rng + ?Sized>(
    train: &LabeledDataset<T>,
    n_clients: usize,
    rng: &mut R,
) -> Result<ClientAssignment> {
    if n_clients == 0 || train.len() < n_clients {
        return Err(FedError::config(format!(
            "cannot split {} examples over {n_clients} clients",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut clients = vec![Vec::new(); n_clients];
    for (pos, i) in order.into_iter().enumerate() {
        clients[pos % n_clients].push(i);
    }
    Ok(ClientAssignment::build(
        train,
        clients,
        vec![0; n_clients],
        None,
    ))
}

/// Parameters of the synthetic Gaussian corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub domains: usize,
    /// Distance between the two class means in the binary case.
    pub class_sep: f64,
    /// Norm of each domain's mean offset.
    pub domain_shift: f64,
    pub noise_std: f64,
}

/// `k` unit directions in `d` dimensions, centered so they sum to zero
/// (two directions are exactly antipodal). A single direction is the zero
/// vector.
fn centered_directions<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mean: Vec<f64> = (0..d)
        .map(|j| dirs.iter().map(|v| v[j]).sum::<f64>() / k as f64)
        .collect();
    for v in &mut dirs {
        for (x, m) in v.iter_mut().zip(&mean) {
            *x -= m;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
    }
    dirs
}

/// Class-conditional Gaussian features with a per-domain mean offset.
///
/// Example `i` has class `i % C` and domain `(i / C) % D`, so classes and
/// domains are balanced whenever `C * D` divides `n`.
pub fn synth_dataset<T: Scalar, R: Rng + ?Sized>(
    p: &SynthParams,
    rng: &mut R,
) -> Result<LabeledDataset<T>> {
    if p.n == 0 || p.d == 0 || p.classes == 0 || p.domains == 0 {
        return Err(FedError::config(
            "synth_dataset needs n, d, classes, domains >= 1",
        ));
    }
    if !(p.noise_std >= 0.0 && p.class_sep.is_finite() && p.domain_shift.is_finite()) {
        return Err(FedError::config(
            "synth_dataset needs finite separations and noise_std >= 0",
        ));
    }
    let class_dirs = centered_directions(p.classes, p.d, rng);
    let domain_dirs = centered_directions(p.domains, p.d, rng);
    let examples = (0..p.n)
        .map(|i| {
            let label = i % p.classes;
            let domain = (i / p.classes) % p.domains;
            let features = (0..p.d)
                .map(|j| {
                    let noise: f64 = rng.sample(StandardNormal);
                    T::of(
                        0.5 * p.class_sep * class_dirs[label][j]
                            + p.domain_shift * domain_dirs[domain][j]
                            + p.noise_std * noise,
                    )
                })
                .collect();
            LabeledExample {
                features,
                label,
                domain,
            }
        })
        .collect();
    LabeledDataset::new(examples, p.classes, p.domains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn params(n: usize) -> SynthParams {
        SynthParams {
            n,
            d: 4,
            classes: 2,
            domains: 2,
            class_sep: 3.0,
            domain_shift: 1.0,
            noise_std: 1.0,
        }
    }

    #[test]
    fn split_counts_4000() {
        let mut rng = stream(1, Stream::Data, &[]);
        let data: LabeledDataset<f64> = synth_dataset(&params(4000), &mut rng).unwrap();
        let (train, val) = stratified_split(&data, 0.8, &mut rng).unwrap();
        assert_eq!(train.len(), 3200);
        assert_eq!(val.len(), 800);
        assert_eq!(train.class_counts(), vec![1600, 1600]);
        assert_eq!(val.class_counts(), vec![400, 400]);
    }

    #[test]
    fn split_counts_10() {
        let mut rng = stream(1, Stream::Data, &[]);
        let data: LabeledDataset<f64> = synth_dataset(&params(10), &mut rng).unwrap();
        let split = stratified_split_indices(&data, 0.8, &mut rng).unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.validation.len(), 2);
        let val = data.subset(&split.validation);
        assert_eq!(val.class_counts(), vec![1, 1]);
    }

    #[test]
    fn split_rejects_missing_class() {
        let ex = LabeledExample {
            features: vec![0.0f64],
            label: 0,
            domain: 0,
        };
        let data = LabeledDataset::new(vec![ex], 2, 1).unwrap();
        let mut rng = stream(1, Stream::Split, &[]);
        assert!(matches!(
            stratified_split(&data, 0.5, &mut rng),
            Err(FedError::Stratification(_))
        ));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let mut rng = stream(1, Stream::Data, &[]);
        let data: LabeledDataset<f64> = synth_dataset(&params(10), &mut rng).unwrap();
        assert!(stratified_split(&data, 1.0, &mut rng).is_err());
        assert!(stratified_split(&data, 0.0, &mut rng).is_err());
    }

    #[test]
    fn synth_cells_are_balanced() {
        let mut rng = stream(3, Stream::Data, &[]);
        let data: LabeledDataset<f64> = synth_dataset(&params(4000), &mut rng).unwrap();
        for cell in data.cell_indices().iter().flatten() {
            assert_eq!(cell.len(), 1000);
        }
    }

    #[test]
    fn deal_respects_counts() {
        let pool: Vec<usize> = (0..10).collect();
        let mut buckets = vec![Vec::new(); 3];
        let mut cursor = 0;
        deal(&pool, &[0.5, 0.25, 0.25], &mut cursor, &mut buckets);
        // floors 5, 2, 2 and one remainder to bucket 0
        assert_eq!(buckets[0].len(), 6);
        assert_eq!(buckets[1].len(), 2);
        assert_eq!(buckets[2].len(), 2);
        assert_eq!(cursor, 1);
    }

    #[test]
    fn fill_empty_moves_from_largest() {
        let mut buckets = vec![vec![1, 2, 3], vec![], vec![4]];
        fill_empty(&mut buckets);
        assert_eq!(buckets, vec![vec![1, 2], vec![3], vec![4]]);
    }

    #[test]
    fn empty_client_set_for_populated_domain_is_rejected() {
        let mut rng = stream(3, Stream::Data, &[]);
        let data: LabeledDataset<f64> = synth_dataset(&params(40), &mut rng).unwrap();
        let map = DomainMap(vec![vec![0, 1], vec![]]);
        let err = domain_dirichlet_partition(&data, 2, &map, 1.0, &mut rng).unwrap_err();
        assert!(matches!(err, FedError::Config(_)));
    }

    #[test]
    fn contiguous_map() {
        assert_eq!(
            DomainMap::contiguous(10, 2).0,
            vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]
        );
    }
}
