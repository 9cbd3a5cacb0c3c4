use std::collections::HashSet;

use llpco::bagging::*;
use proptest::prelude::*;

fn labelled() -> impl Strategy<Value = (usize, Vec<usize>)> {
    (2usize..5, 10usize..200).prop_flat_map(|(k, n)| (Just(k), prop::collection::vec(0..k, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn epoch_bags_are_disjoint_and_exact((k, labels) in labelled(), bag in 1usize..20, seed in any::<u64>()) {
        let spe = labels.len() / 2;
        let bag = 1 + bag % spe;
        let bags = make_epoch_bags(labels.len(), Some(&labels), &ProportionPrior::exact_per_bag(), k, bag, spe, seed).unwrap();
        let mut seen = HashSet::new();
        for b in &bags {
            prop_assert_eq!(b.indices.len(), bag);
            for &i in &b.indices {
                prop_assert!(seen.insert(i), "index {i} repeated");
            }
            let exact = label_proportions(&b.indices, &labels, k).unwrap();
            prop_assert_eq!(b.w(), exact.as_slice());
        }
        let again = make_epoch_bags(labels.len(), Some(&labels), &ProportionPrior::exact_per_bag(), k, bag, spe, seed).unwrap();
        prop_assert_eq!(bags, again);
    }

    #[test]
    fn global_bags_carry_the_shared_prior((k, labels) in labelled(), bag in 1usize..20, seed in any::<u64>()) {
        let prior = ProportionPrior::equipartition(k).unwrap();
        let bag = 1 + bag % labels.len();
        let bags = make_epoch_bags(labels.len(), None, &prior, k, bag, labels.len(), seed).unwrap();
        prop_assert!(bags.iter().all(|b| b.w() == prior.w.as_deref().unwrap()));
    }

    #[test]
    fn census_prior_is_a_distribution(
        shares in prop::collection::vec(0.0f64..80.0, 1..6),
        extra in prop::collection::vec(0.0f64..30.0, 0..4),
    ) {
        let mut raw: Vec<(String, f64)> = shares.iter().enumerate().map(|(i, &p)| (format!("c{i}"), p)).collect();
        raw.extend(extra.iter().enumerate().map(|(i, &p)| (format!("x{i}"), p)));
        let mut targets: Vec<String> = (0..shares.len()).map(|i| format!("c{i}")).collect();
        targets.push("others".into());
        let w = census_prior(&raw, &targets).unwrap();
        prop_assert_eq!(w.len(), targets.len());
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}
