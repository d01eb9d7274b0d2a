use fedsim::greenledger::{embodied_amortized, to_co2e, EmbodiedProfile, EnergyLedger};
use proptest::prelude::*;

proptest! {
    #[test]
    fn co2e_is_linear(a in 0.0f64..1e6, b in 0.0f64..1e6, factor in 0.0f64..1000.0) {
        let lhs = to_co2e(a + b, factor).unwrap();
        let rhs = to_co2e(a, factor).unwrap() + to_co2e(b, factor).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn embodied_never_exceeds_manufacturing(
        m in 0.0f64..1e7,
        life in 1.0f64..1e6,
        hours in 0.0f64..1e8,
    ) {
        let p = EmbodiedProfile { manufacturing_gco2e: m, lifetime_hours: life };
        prop_assert!(embodied_amortized(&p, hours).unwrap() <= m);
    }

    #[test]
    fn charging_never_decreases_totals(
        charges in prop::collection::vec((0usize..3, 0.0f64..500.0, 0.0f64..1e4, 0u64..1_000_000), 1..40)
    ) {
        let phases = ["local_train", "upload", "eval"];
        let mut ledger = EnergyLedger::new(56.0).unwrap();
        for (ph, w, s, b) in charges {
            let (wh, dur, bytes) = (ledger.total_wh(), ledger.total_duration_s(), ledger.total_bytes());
            ledger.charge(phases[ph], None, w, s, b).unwrap();
            prop_assert!(ledger.total_wh() >= wh);
            prop_assert!(ledger.total_duration_s() >= dur);
            prop_assert!(ledger.total_bytes() >= bytes);
        }
        let report = ledger.report(None, 0.0).unwrap();
        let phase_sum: f64 = report.phases.values().map(|p| p.energy_wh).sum();
        prop_assert_eq!(report.total_wh, phase_sum);
        let bytes: u64 = report.phases.values().map(|p| p.bytes).sum();
        prop_assert_eq!(report.total_bytes, bytes);
    }
}

#[test]
fn table_reports_one_decimal() {
    let mut ledger = EnergyLedger::new(56.0).unwrap();
    ledger
        .charge("local_train", Some(0), 432.8, 4741.0, 0)
        .unwrap();
    let table = ledger.report(None, 0.0).unwrap().table();
    assert!(table.contains("570.0"), "{table}");
    assert!(table.contains("31.9"), "{table}");
}
