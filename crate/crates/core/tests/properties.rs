use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use impest_core::measurements::{add_noise, read_csv, select_steps, voltage_drops, write_csv, Kind, NoiseModel};
use impest_core::network::reduce;
use impest_core::powerflow::{self, PfOptions};
use impest_core::synth::{
    holdout, load_profiles, perturb_lengths, random_chain, scenario, twenty_bus, ProfileOptions, ScenarioOptions,
};
use impest_core::validation::{cumulative_error, pf_validate, Quantiles};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn reduction_keeps_voltages_and_is_idempotent(seed in any::<u64>(), backbone in 1usize..8, users in 1usize..8, extra in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_chain(&mut rng, backbone, users, extra);
        let r = reduce(&f).unwrap();
        prop_assert_eq!(&reduce(&r).unwrap(), &r);
        prop_assert!(r.buses.len() <= f.buses.len());
        prop_assert_eq!(f.buses.len() - r.buses.len(), f.branches.len() - r.branches.len());

        let inj = load_profiles(&f, 2, &ProfileOptions::default(), seed);
        let a = powerflow::solve(&f, &inj, &PfOptions::default()).unwrap();
        let b = powerflow::solve(&r, &inj, &PfOptions::default()).unwrap();
        for (bi, bus) in r.buses.iter().enumerate() {
            let fi = f.buses.iter().position(|x| x.id == bus.id).unwrap();
            for (sa, sb) in a.steps.iter().zip(&b.steps) {
                for (va, vb) in sa.bus_voltage[fi].iter().zip(&sb.bus_voltage[bi]) {
                    prop_assert!((va - vb).norm() / f.base_voltage_v <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn cumulative_error_survives_reduction(seed in any::<u64>(), rel in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_chain(&mut rng, 5, 6, 10);
        let est = perturb_lengths(&truth, rel, &mut rng);
        let full = cumulative_error(&truth, &est).unwrap();
        let reduced = cumulative_error(&reduce(&truth).unwrap(), &reduce(&est).unwrap()).unwrap();
        prop_assert_eq!(full.len(), reduced.len());
        for (a, b) in full.iter().zip(&reduced) {
            prop_assert_eq!(&a.user, &b.user);
            prop_assert_eq!(a.phase, b.phase);
            prop_assert!((a.r - b.r).abs() <= 1e-9 * (1.0 + a.r.abs()));
            prop_assert!((a.x - b.x).abs() <= 1e-9 * (1.0 + a.x.abs()));
        }
    }

    #[test]
    fn pf_validation_is_symmetric(seed in any::<u64>(), rel in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_chain(&mut rng, 4, 5, 0);
        let b = perturb_lengths(&a, rel, &mut rng);
        let inj = load_profiles(&a, 3, &ProfileOptions::default(), seed);
        let steps = [4, 9, 13];
        let ab = pf_validate(&a, &b, &inj, &steps, &PfOptions::default()).unwrap();
        let ba = pf_validate(&b, &a, &inj, &steps, &PfOptions::default()).unwrap();
        prop_assert_eq!(&ab.diffs, &ba.diffs);
        prop_assert!(ab.flagged.is_empty());
        let same = pf_validate(&a, &a, &inj, &steps, &PfOptions::default()).unwrap();
        prop_assert!(same.diffs.iter().all(|d| d.abs_pu == 0.0));
        prop_assert!(ab.diffs.iter().all(|d| steps.contains(&d.timestep)));
    }

    #[test]
    fn csv_round_trip_is_exact(seed in any::<u64>()) {
        let sc = scenario(&twenty_bus(), &ScenarioOptions { steps: 3, aggregate: false, ..ScenarioOptions::default() }, seed).unwrap();
        let mut buf = Vec::new();
        write_csv(&sc.noisy, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(&back.samples, &sc.noisy.samples);
    }

    #[test]
    fn noise_is_seeded_and_per_sample(seed in any::<u64>(), class in 0.001f64..0.02) {
        let sc = scenario(&twenty_bus(), &ScenarioOptions { steps: 4, aggregate: false, noisy: false, ..ScenarioOptions::default() }, 5).unwrap();
        let model = NoiseModel { accuracy_class: class, seed, ..NoiseModel::default() };
        let a = add_noise(&sc.clean, &model);
        prop_assert_eq!(&a, &add_noise(&sc.clean, &model));
        let other = add_noise(&sc.clean, &NoiseModel { seed: seed.wrapping_add(1), ..model.clone() });
        prop_assert_ne!(&a.samples, &other.samples);
        // a voltage sample's noise does not depend on the rest of the set
        let keep: BTreeSet<usize> = [1, 3].into();
        let sub = add_noise(&sc.clean.filter_steps(&keep), &model);
        let full = a.filter_steps(&keep);
        for (x, y) in sub.samples.iter().zip(&full.samples).filter(|(x, _)| x.kind == Kind::Vm) {
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn quantiles_are_ordered(values in prop::collection::vec(-1e6f64..1e6, 1..200)) {
        let q = Quantiles::of(&values).unwrap();
        prop_assert_eq!(q.count, values.len());
        prop_assert!(q.min <= q.p25 && q.p25 <= q.median && q.median <= q.p75 && q.p75 <= q.p95 && q.p95 <= q.max);
    }
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn holdout_partitions_kept(mut kept in prop::collection::btree_set(0usize..1000, 0..80).prop_map(|s| s.into_iter().collect::<Vec<_>>()), n in 0usize..20) {
        kept.sort_unstable();
        let (train, val) = holdout(&kept, n);
        prop_assert_eq!(val.len(), n.min(kept.len()));
        prop_assert_eq!(train.len() + val.len(), kept.len());
        let all: BTreeSet<usize> = train.iter().chain(&val).copied().collect();
        prop_assert_eq!(all.into_iter().collect::<Vec<_>>(), kept);
    }
}

#[test]
fn selection_keeps_the_largest_drops() {
    let f = twenty_bus();
    let sc = scenario(&f, &ScenarioOptions { steps: 30, aggregate: false, ..ScenarioOptions::default() }, 3).unwrap();
    let sel = select_steps(&sc.noisy, &f, 8).unwrap();
    let drops = voltage_drops(&sc.noisy, &f);
    let kept_min = sel.kept.iter().map(|t| drops[t].unwrap()).fold(f64::INFINITY, f64::min);
    for (t, d) in &drops {
        if !sel.kept.contains(t) {
            assert!(d.unwrap() <= kept_min, "step {t}");
        }
    }
    assert_eq!(sel.set.timesteps(), sel.kept);
    assert!(select_steps(&sc.noisy, &f, 31).is_err());
}
