use fedsim::dataset::LabeledDataset;
use fedsim::partition::{
    domain_dirichlet_partition, iid_partition, sample_dirichlet, stratified_split_indices,
    synth_dataset, DomainMap, SynthParams,
};
use fedsim::rng::SimRng;
use proptest::prelude::*;
use rand::SeedableRng;

fn synth(n: usize, classes: usize, domains: usize, seed: u64) -> LabeledDataset<f64> {
    let p = SynthParams {
        n,
        d: 3,
        classes,
        domains,
        class_sep: 2.0,
        domain_shift: 1.0,
        noise_std: 1.0,
    };
    synth_dataset(&p, &mut SimRng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dirichlet_partition_is_exhaustive_disjoint_and_pure(
        n in 40usize..400,
        classes in 2usize..5,
        domains in 1usize..4,
        extra in 0usize..6,
        alpha in 0.05f64..50.0,
        seed in any::<u64>(),
    ) {
        let n_clients = domains + extra;
        let data = synth(n, classes, domains, seed);
        let map = DomainMap::contiguous(n_clients, domains);
        let a = domain_dirichlet_partition(&data, n_clients, &map, alpha, &mut SimRng::seed_from_u64(seed ^ 1));
        let a = match a {
            Ok(a) => a,
            // only possible when a domain holds fewer examples than clients
            Err(e) => { prop_assert!(e.to_string().contains("no examples")); return Ok(()); }
        };
        let mut all: Vec<usize> = a.clients.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
        for (k, idx) in a.clients.iter().enumerate() {
            prop_assert!(!idx.is_empty());
            for &i in idx {
                prop_assert!(map.0[data.examples()[i].domain].contains(&k));
            }
        }
        let again = domain_dirichlet_partition(&data, n_clients, &map, alpha, &mut SimRng::seed_from_u64(seed ^ 1)).unwrap();
        prop_assert_eq!(a.clients, again.clients);
    }

    #[test]
    fn stratified_counts_within_one(
        n in 10usize..500,
        classes in 1usize..6,
        fraction in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        prop_assume!(n >= classes);
        let data = synth(n, classes, 1, seed);
        let split = stratified_split_indices(&data, fraction, &mut SimRng::seed_from_u64(seed)).unwrap();
        let totals = data.class_counts();
        let mut train = vec![0usize; classes];
        for &i in &split.train {
            train[data.examples()[i].label] += 1;
        }
        for c in 0..classes {
            prop_assert!((train[c] as f64 - fraction * totals[c] as f64).abs() <= 1.0);
        }
        let mut all = split.train.clone();
        all.extend(&split.validation);
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn iid_is_exhaustive_and_balanced(n in 10usize..300, k in 1usize..10, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let data = synth(n, 2, 1, seed);
        let a = iid_partition(&data, k, &mut SimRng::seed_from_u64(seed)).unwrap();
        let sizes = a.client_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
    }
}

#[test]
fn large_alpha_gives_near_uniform_label_split() {
    let data = synth(4000, 2, 2, 3);
    let map = DomainMap::contiguous(10, 2);
    let a =
        domain_dirichlet_partition(&data, 10, &map, 1e6, &mut SimRng::seed_from_u64(4)).unwrap();
    // each domain/class cell holds 1000 examples spread over 5 clients
    for hist in &a.label_histograms {
        for &count in hist {
            assert!((count as i64 - 200).abs() <= 3, "{hist:?}");
        }
    }
}

#[test]
fn dirichlet_one_one_has_mean_one_half() {
    let mut rng = SimRng::seed_from_u64(5);
    let trials = 20_000;
    let mean = (0..trials)
        .map(|_| sample_dirichlet(1.0, 2, &mut rng).unwrap()[0])
        .sum::<f64>()
        / trials as f64;
    // Beta(1, 1) has std 1/sqrt(12); 5 standard errors
    assert!((mean - 0.5).abs() < 5.0 * (1.0 / 12f64).sqrt() / (trials as f64).sqrt());
}

#[test]
fn small_alpha_concentrates_labels() {
    let data = synth(4000, 2, 1, 6);
    let map = DomainMap::contiguous(10, 1);
    let a =
        domain_dirichlet_partition(&data, 10, &map, 0.05, &mut SimRng::seed_from_u64(7)).unwrap();
    let skewed = a
        .label_histograms
        .iter()
        .filter(|h| {
            let total: usize = h.iter().sum();
            *h.iter().max().unwrap() as f64 >= 0.9 * total as f64
        })
        .count();
    assert!(skewed >= 5, "{:?}", a.label_histograms);
}

#[test]
fn overlapping_domain_map_is_rejected() {
    let data = synth(100, 2, 2, 8);
    let map = DomainMap(vec![vec![0, 1], vec![1, 2]]);
    assert!(
        domain_dirichlet_partition(&data, 3, &map, 1.0, &mut SimRng::seed_from_u64(0)).is_err()
    );
}
