use std::collections::BTreeMap;

use flr_core::data::{
    build_examples, chronological_split, five_core_filter, generate_synthetic, Catalog, DatasetBundle, ItemRecord,
    PrepConfig, RawInteraction, SyntheticConfig, Tokenizer,
};
use proptest::prelude::*;

fn interactions() -> impl Strategy<Value = Vec<RawInteraction>> {
    prop::collection::vec((0u32..12, 0u32..15, 0i64..1_000), 0..220).prop_map(|rows| {
        rows.into_iter()
            .map(|(user, item, ts)| RawInteraction {
                user,
                item,
                ts,
                title: String::new(),
            })
            .collect()
    })
}

fn counts(rows: &[RawInteraction], key: impl Fn(&RawInteraction) -> u32) -> BTreeMap<u32, usize> {
    let mut m = BTreeMap::new();
    for r in rows {
        *m.entry(key(r)).or_insert(0) += 1;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn five_core_is_a_fixpoint(rows in interactions()) {
        match five_core_filter(&rows) {
            Ok(kept) => {
                prop_assert!(counts(&kept, |r| r.user).values().all(|&c| c >= 5));
                prop_assert!(counts(&kept, |r| r.item).values().all(|&c| c >= 5));
                prop_assert_eq!(five_core_filter(&kept).unwrap(), kept.clone());
                // Filtering only removes rows, in order.
                let mut it = rows.iter();
                prop_assert!(kept.iter().all(|k| it.any(|r| r == k)));
            }
            Err(e) => prop_assert!(e.to_string().contains("sparse")),
        }
    }

    #[test]
    fn split_boundaries_are_chronological(n_users in 5usize..30, n_items in 5usize..15, len in 3usize..10, seed in any::<u64>()) {
        let mut rng = flr_core::numerics::Rng::new(seed);
        let items: Vec<ItemRecord> = (0..n_items as u32)
            .map(|i| ItemRecord { item_id: i, title: format!("item {i}"), tokens: vec![], attributes: None })
            .collect();
        let mut catalog = Catalog::new(items).unwrap();
        catalog.tokenize_titles(&Tokenizer::build(catalog.items().iter().map(|i| i.title.as_str()).collect::<Vec<_>>(), None));
        let mut rows = Vec::new();
        for u in 0..n_users as u32 {
            let mut ts = rng.below(50) as i64;
            for _ in 0..len {
                ts += 1 + rng.below(20) as i64;
                rows.push(RawInteraction { user: u, item: rng.below(n_items) as u32, ts, title: String::new() });
            }
        }
        let examples = build_examples(&rows, &catalog, 5).unwrap();
        let n = examples.len();
        let splits = chronological_split(examples, [8, 1, 1]).unwrap();
        prop_assert_eq!(splits.train.len() + splits.valid.len() + splits.test.len(), n);
        prop_assert_eq!(splits.train.len(), n * 8 / 10);
        let max = |s: &[flr_core::data::Example]| s.iter().map(|e| e.ts).max();
        let min = |s: &[flr_core::data::Example]| s.iter().map(|e| e.ts).min();
        if let (Some(a), Some(b)) = (max(&splits.train), min(&splits.valid)) { prop_assert!(a <= b); }
        if let (Some(a), Some(b)) = (max(&splits.valid), min(&splits.test)) { prop_assert!(a <= b); }
        if let (Some(a), Some(b)) = (max(&splits.train), min(&splits.test)) { prop_assert!(a <= b); }
    }

    #[test]
    fn tokenizer_round_trips_normalized_text(words in prop::collection::vec("[a-z]{1,6}[0-9]{0,2}", 1..8), cap in prop::option::of(8usize..40)) {
        let title = words.join(" ");
        let tok = Tokenizer::build([title.as_str()], cap);
        let ids = tok.tokenize(&title);
        prop_assert_eq!(ids.len(), words.len());
        if cap.is_none() {
            prop_assert_eq!(tok.detokenize(&ids), title);
        }
    }
}

#[test]
fn synthetic_titles_are_distinct_and_round_trip() {
    for seed in 0..3 {
        let corpus = generate_synthetic(&SyntheticConfig { seed, ..Default::default() }).unwrap();
        let bundle = DatasetBundle::prepare(&corpus.interactions, &corpus.catalog, &PrepConfig::default()).unwrap();
        bundle.validate().unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for item in bundle.catalog.items() {
            assert!(seen.insert(item.tokens.clone()), "duplicate title {}", item.title);
            assert_eq!(bundle.tokenizer.detokenize(&item.tokens), item.title);
        }
    }
}

#[test]
fn bundle_round_trips_through_disk() {
    let corpus = generate_synthetic(&SyntheticConfig {
        n_items: 40,
        n_users: 60,
        ..Default::default()
    })
    .unwrap();
    let bundle = DatasetBundle::prepare(&corpus.interactions, &corpus.catalog, &PrepConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    let back = DatasetBundle::load(dir.path()).unwrap();
    assert_eq!(back.hash(), bundle.hash());
    assert_eq!(back.splits.test, bundle.splits.test);
}
