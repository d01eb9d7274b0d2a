use fedsim::dataset::LabeledDataset;
use fedsim::federation::{
    fedavg_aggregate, run_federation, ClientUpdate, FederationSetup, FinalState, Hyperparams,
    RoundConfig, Strategy, Weighted,
};
use fedsim::greenledger::EnergyLedger;
use fedsim::model::{ModelSpec, ParamVector};
use fedsim::partition::{iid_partition, synth_dataset, ClientAssignment, SynthParams};
use fedsim::personalization::{decoupled_aggregate, merge_params, split_params, DecoupleMask};
use fedsim::rng::SimRng;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn random_params(spec: &ModelSpec, seed: u64) -> ParamVector<f64> {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut p = spec.zeros::<f64>().unwrap();
    for v in p.values_mut() {
        *v = rng.random_range(-3.0..3.0);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_then_merge_is_identity(
        d in 1usize..5,
        hidden in prop::collection::vec(1usize..5, 1..3),
        classes in 2usize..4,
        head_mask in 0usize..16,
        seed in any::<u64>(),
    ) {
        let spec = ModelSpec::mlp(d, hidden, classes);
        let params = random_params(&spec, seed);
        let names: Vec<String> = params.segments().iter().map(|s| s.name.clone()).collect();
        let (head, backbone): (Vec<_>, Vec<_>) = names
            .iter()
            .enumerate()
            .partition(|(i, _)| head_mask >> (i % 4) & 1 == 1);
        let mask = DecoupleMask {
            backbone: backbone.into_iter().map(|(_, n)| n.clone()).collect(),
            head: head.into_iter().map(|(_, n)| n.clone()).collect(),
        };
        let (b, h) = split_params(&params, &mask).unwrap();
        prop_assert_eq!(b.len() + h.len(), params.len());
        prop_assert_eq!(merge_params(&b, &h, &params.layout()).unwrap(), params);
    }

    #[test]
    fn all_backbone_mask_reduces_to_fedavg(
        sizes in prop::collection::vec(1u64..500, 1..6),
        seed in any::<u64>(),
    ) {
        let spec = ModelSpec::mlp(3, vec![4], 2);
        let updates: Vec<ClientUpdate<f64>> = sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| Weighted::new(k, random_params(&spec, seed.wrapping_add(k as u64)), n))
            .collect();
        let mask = DecoupleMask {
            backbone: spec.layout().into_iter().map(|(n, _)| n).collect(),
            head: Vec::new(),
        };
        let (backbone, heads) = decoupled_aggregate(&updates, &mask).unwrap();
        prop_assert_eq!(backbone, fedavg_aggregate(&updates).unwrap());
        prop_assert!(heads.iter().all(|h| h.value.is_empty()));
    }
}

fn data(n: usize, seed: u64) -> LabeledDataset<f64> {
    let p = SynthParams {
        n,
        d: 4,
        classes: 2,
        domains: 1,
        class_sep: 2.0,
        domain_shift: 0.0,
        noise_std: 1.0,
    };
    synth_dataset(&p, &mut SimRng::seed_from_u64(seed)).unwrap()
}

fn first_round_heads(
    train: &LabeledDataset<f64>,
    assignment: &ClientAssignment,
) -> Vec<ParamVector<f64>> {
    let spec = ModelSpec::mlp(4, vec![6], 2);
    let cfg = RoundConfig {
        rounds: 1,
        n_clients: assignment.n_clients(),
        participation_fraction: 1.0,
        seed: 13,
    };
    let setup = FederationSetup {
        spec: &spec,
        train,
        assignment,
        validation: train,
        client_validation: None,
    };
    let mut ledger = EnergyLedger::new(56.0).unwrap();
    let out = run_federation(
        &cfg,
        &setup,
        Strategy::Decoupled,
        &Hyperparams::default(),
        &mut ledger,
    )
    .unwrap();
    match out.final_state {
        FinalState::Decoupled { heads, .. } => heads,
        _ => panic!("decoupled strategy keeps per-client heads"),
    }
}

#[test]
fn heads_depend_only_on_own_data() {
    let train = data(200, 1);
    let assignment = iid_partition(&train, 4, &mut SimRng::seed_from_u64(2)).unwrap();
    let heads = first_round_heads(&train, &assignment);

    // perturb every example held by client 3
    let mut examples = train.examples().to_vec();
    for &i in &assignment.clients[3] {
        examples[i].features.iter_mut().for_each(|x| *x = -*x + 0.5);
        examples[i].label = 1 - examples[i].label;
    }
    let perturbed = LabeledDataset::new(examples, 2, 1).unwrap();
    let heads_after = first_round_heads(&perturbed, &assignment);
    for k in 0..3 {
        assert_eq!(heads[k], heads_after[k], "client {k}");
    }
    assert_ne!(heads[3], heads_after[3]);
}
