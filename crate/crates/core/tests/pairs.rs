use mcnn_core::corpus::{
    apply_displacement, augment, balance_positives, compute_mean_image, gen_pairs, BalanceConfig, CorpusEntry, PairRef,
    Split,
};
use mcnn_core::knn::{Extractor, KnnIndex};
use mcnn_core::synth::SynthSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize, seed: u64) -> Vec<CorpusEntry> {
    let spec = SynthSpec { seed, ..SynthSpec::default() }.with_counts(n, 0, 0);
    spec.generate().unwrap().entries
}

fn pairs_for(entries: &[CorpusEntry], k: usize, balance: BalanceConfig, seed: u64) -> mcnn_core::corpus::PairSet {
    let refs: Vec<&CorpusEntry> = entries.iter().collect();
    let mean = compute_mean_image(entries.iter().map(|e| &e.image)).unwrap();
    let index = KnnIndex::build(refs.clone(), Extractor::default(), None).unwrap();
    gen_pairs(entries.to_vec(), &refs, &index, Extractor::default(), k, &mean, balance, seed).unwrap()
}

#[test]
fn every_pair_satisfies_target_invariants() {
    let entries = corpus(12, 3);
    let set = pairs_for(&entries, 3, BalanceConfig { enabled: false, ..BalanceConfig::default() }, 1);
    let mean = compute_mean_image(entries.iter().map(|e| &e.image)).unwrap();
    assert_eq!(set.len(), 12 * 3 * 8);
    for i in 0..set.len() {
        let p = set.get(i);
        let source = entries.iter().find(|e| e.id == p.region.source).unwrap();
        assert_ne!(source.id, p.query.id, "a query is never its own neighbor");
        let in_query = p.query.has_label(p.region.label);
        let in_source = source.has_label(p.region.label);
        assert_eq!(p.target.confidence, if in_query { 1.0 } else { 0.0 });
        assert_eq!(p.displacement_valid, in_query && in_source);
        assert_eq!(p.region.present, in_source);
        if !in_source {
            assert_eq!(p.region.image, mean);
        }
        if p.displacement_valid {
            let b = apply_displacement(p.region.region_box, p.target.displacements);
            let want = p.query.label_box(p.region.label).unwrap();
            for (got, want) in b.to_array().iter().zip(want.to_array()) {
                assert!((got - want).abs() < 1e-12);
            }
        } else {
            assert_eq!(p.target.displacements, [0.0; 4]);
        }
    }
}

#[test]
fn full_presence_corpus_is_all_positive_and_balance_is_a_no_op() {
    let mut spec = SynthSpec::default().with_counts(8, 0, 0);
    for t in &mut spec.labels {
        t.presence = 1.0;
    }
    let entries = spec.generate().unwrap().entries;
    let plain = pairs_for(&entries, 2, BalanceConfig { enabled: false, ..BalanceConfig::default() }, 5);
    let balanced = pairs_for(&entries, 2, BalanceConfig::default(), 5);
    assert!(plain.pairs.iter().all(|p| p.target.confidence == 1.0));
    assert_eq!(plain.len(), balanced.len());
}

#[test]
fn balancing_caps_positive_ratio() {
    let entries = corpus(30, 11);
    let set = pairs_for(&entries, 4, BalanceConfig { enabled: true, max_ratio: 2.0 }, 2);
    let counts: Vec<usize> = set.positive_counts(8).into_iter().filter(|&c| c > 0).collect();
    let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
    assert!(hi <= 2 * lo, "positive counts {counts:?}");
}

#[test]
fn balance_keeps_negatives_and_caps_from_rarest() {
    let mk = |label: u8, c: f64| PairRef {
        query: 0,
        region: 0,
        label,
        target: mcnn_core::model::MatchOutput::new(c, [0.0; 4]),
        displacement_valid: false,
    };
    let mut pairs: Vec<PairRef> = (0..9).map(|_| mk(1, 1.0)).collect();
    pairs.push(mk(2, 1.0));
    pairs.extend((0..5).map(|_| mk(1, 0.0)));
    let out = balance_positives(pairs, 2, 2.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let pos1 = out.iter().filter(|p| p.label == 1 && p.target.confidence == 1.0).count();
    let neg = out.iter().filter(|p| p.target.confidence == 0.0).count();
    assert_eq!((pos1, neg), (2, 5));
}

#[test]
fn pair_order_is_seeded() {
    let entries = corpus(10, 4);
    let order = |seed| {
        let s = pairs_for(&entries, 2, BalanceConfig::default(), seed);
        s.pairs.iter().map(|p| (p.query, p.region, p.label)).collect::<Vec<_>>()
    };
    assert_eq!(order(7), order(7));
    assert_ne!(order(7), order(8));
}

#[test]
fn augmented_queries_pair_with_their_own_geometry() {
    let entries = corpus(6, 9);
    let refs: Vec<&CorpusEntry> = entries.iter().collect();
    let mean = compute_mean_image(entries.iter().map(|e| &e.image)).unwrap();
    let index = KnnIndex::build(refs.clone(), Extractor::default(), None).unwrap();
    let queries: Vec<CorpusEntry> = entries.iter().flat_map(augment).collect();
    assert_eq!(queries.len(), 24);
    let set = gen_pairs(queries, &refs, &index, Extractor::default(), 2, &mean, BalanceConfig::default(), 0).unwrap();
    for i in 0..set.len() {
        let p = set.get(i);
        if p.displacement_valid {
            let b = apply_displacement(p.region.region_box, p.target.displacements);
            let want = p.query.label_box(p.region.label).unwrap();
            assert!(b.to_array().iter().zip(want.to_array()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        assert_eq!(p.query.split, Split::Train);
    }
}
