//! Property-based invariants for the streaming estimators.

use nalgebra::DVector;
use proptest::collection::vec;
use proptest::prelude::*;

use rct_stream::bootstrap::RlsReplicate;
use rct_stream::oracle::{batch_cluster_sandwich, RetainedDataset};
use rct_stream::rls::rls_init;
use rct_stream::robust::{ClusterContribution, SandwichAccumulator};
use rct_stream::rng::{SplitMix64, WeightGenerator, WeightMode};
use rct_stream::{Record, RecursiveMean};

fn finite_outcome() -> impl Strategy<Value = f64> {
    // bounded so sums stay well-conditioned
    -1e6..1e6f64
}

proptest! {
    /// Streaming mean equals the batch mean of the same values.
    #[test]
    fn streaming_mean_matches_batch(values in vec(finite_outcome(), 1..200)) {
        let mut m = RecursiveMean::new();
        for &v in &values {
            m.update(v).unwrap();
        }
        let batch = values.iter().sum::<f64>() / values.len() as f64;
        let scale = batch.abs().max(1.0);
        prop_assert!((m.mean - batch).abs() <= 1e-12 * scale);
    }

    /// Folding in pre-aggregated batches gives the same mean as record-level
    /// updates, for every way of splitting the stream.
    #[test]
    fn batch_update_matches_sequential(
        values in vec(finite_outcome(), 2..150),
        cut_seed in any::<u64>(),
    ) {
        let mut sequential = RecursiveMean::new();
        for &v in &values {
            sequential.update(v).unwrap();
        }

        let mut rng = SplitMix64::new(cut_seed);
        let mut batched = RecursiveMean::new();
        let mut i = 0usize;
        while i < values.len() {
            let len = 1 + rng.next_below((values.len() - i) as u64) as usize;
            let chunk = &values[i..i + len];
            batched
                .batch_update(chunk.iter().sum(), chunk.len() as u64)
                .unwrap();
            i += len;
        }
        let scale = sequential.mean.abs().max(1.0);
        prop_assert!((batched.mean - sequential.mean).abs() <= 1e-12 * scale);
        prop_assert_eq!(batched.weight_sum, sequential.weight_sum);
    }

    /// A zero bootstrap weight must leave the replicate mean untouched,
    /// bit for bit.
    #[test]
    fn zero_weight_is_a_noop(
        values in vec(finite_outcome(), 1..50),
        skipped in finite_outcome(),
    ) {
        let mut m = RecursiveMean::new();
        for &v in &values {
            m.weighted_update(v, 1);
        }
        let before = (m.mean, m.weight_sum);
        m.weighted_update(skipped, 0);
        prop_assert_eq!((m.mean, m.weight_sum), before);
    }

    /// A weighted mean update with weight w equals w repeated unit updates
    /// of the same value, against a brute-force weighted average.
    #[test]
    fn weighted_mean_matches_bruteforce(
        pairs in vec((finite_outcome(), 0u64..5), 1..12),
    ) {
        prop_assume!(pairs.iter().any(|&(_, w)| w > 0));
        let mut m = RecursiveMean::new();
        for &(z, w) in &pairs {
            m.weighted_update(z, w);
        }
        let wsum: f64 = pairs.iter().map(|&(_, w)| w as f64).sum();
        let expected: f64 =
            pairs.iter().map(|&(z, w)| z * w as f64).sum::<f64>() / wsum;
        let scale = expected.abs().max(1.0);
        prop_assert!((m.mean - expected).abs() <= 1e-9 * scale);
    }

    /// Cluster-seeded weights depend only on (seed, cluster, replicate),
    /// never on arrival position.
    #[test]
    fn cluster_weights_ignore_position(
        seed in any::<u64>(),
        cluster in vec(any::<u8>(), 1..12),
        pos_a in any::<u64>(),
        pos_b in any::<u64>(),
    ) {
        let gen = WeightGenerator::new(seed, WeightMode::ClusterSeeded);
        let wa = gen.draw_weights(pos_a, Some(&cluster), 16).unwrap();
        let wb = gen.draw_weights(pos_b, Some(&cluster), 16).unwrap();
        prop_assert_eq!(wa, wb);
    }

    /// The sandwich estimate is invariant to the order clusters report in.
    #[test]
    fn sandwich_is_permutation_invariant(
        raw in vec(vec(-10.0..10.0f64, 2), 2..20),
        swap_seed in any::<u64>(),
    ) {
        let contributions: Vec<ClusterContribution> = raw
            .iter()
            .map(|u| ClusterContribution::new(u.clone()).unwrap())
            .collect();
        let bread = nalgebra::DMatrix::<f64>::identity(2, 2) * 0.5;

        let mut forward = SandwichAccumulator::new(2);
        forward.set_bread(bread.clone());
        for c in &contributions {
            forward.absorb(c).unwrap();
        }

        let mut order: Vec<usize> = (0..contributions.len()).collect();
        let mut rng = SplitMix64::new(swap_seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.next_below(i as u64 + 1) as usize);
        }
        let mut shuffled = SandwichAccumulator::new(2);
        shuffled.set_bread(bread);
        for &i in &order {
            shuffled.absorb(&contributions[i]).unwrap();
        }

        let a = forward.assemble().unwrap().sigma;
        let b = shuffled.assemble().unwrap().sigma;
        let delta = (&a - &b).abs().max();
        prop_assert!(delta <= 1e-12 * a.abs().max().max(1.0));
    }
}

fn synth_records(seed: u64, n: usize, clustered: bool) -> Vec<Record> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|i| {
            let d = (rng.next_f64() < 0.5) as u8;
            let x2 = rng.next_normal();
            let y = 0.3 + d as f64 + 0.5 * x2 + rng.next_normal();
            let cluster = clustered.then(|| format!("g{}", i % 7).into_bytes());
            Record::from_parts(y, d, &[x2], cluster).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Bootstrap replicates with all-ones weights follow the plain RLS path.
    #[test]
    fn unit_weight_replicate_tracks_rls(seed in any::<u64>()) {
        let records = synth_records(seed, 60, false);
        let state = rls_init(&records[..10]).unwrap();
        let mut rep = RlsReplicate {
            beta: state.beta.clone(),
            z_mat: state.z_inv.clone(),
        };
        let mut plain = state;
        for r in &records[10..] {
            plain.update(r).unwrap();
            rep.weighted_update(r, 1).unwrap();
        }
        let delta = (&rep.beta - &plain.beta).abs().max();
        prop_assert!(delta <= 1e-9, "beta drift {delta}");
    }

    /// Centralized sandwich oracle is invariant to shuffling whole clusters.
    #[test]
    fn cluster_sandwich_order_invariant(seed in any::<u64>()) {
        let records = synth_records(seed, 70, true);
        let data = RetainedDataset::new(records.clone()).unwrap();
        let fit = rct_stream::oracle::batch_ols(&data).unwrap();

        // rotate clusters: stable regroup in reversed cluster order
        let mut by_cluster: Vec<(Vec<u8>, Vec<Record>)> = Vec::new();
        for r in records {
            let id = r.cluster_id.clone().unwrap();
            match by_cluster.iter_mut().find(|(c, _)| *c == id) {
                Some((_, v)) => v.push(r),
                None => by_cluster.push((id, vec![r])),
            }
        }
        by_cluster.reverse();
        let reordered: Vec<Record> =
            by_cluster.into_iter().flat_map(|(_, v)| v).collect();
        let data2 = RetainedDataset::new(reordered).unwrap();

        let beta: DVector<f64> = fit.beta.clone();
        let s1 = batch_cluster_sandwich(&data, &beta).unwrap();
        let s2 = batch_cluster_sandwich(&data2, &beta).unwrap();
        let delta = (&s1 - &s2).abs().max();
        prop_assert!(delta <= 1e-12 * s1.abs().max().max(1e-12));
    }
}
