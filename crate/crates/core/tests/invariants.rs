use proptest::prelude::*;

use qflaw_core::curation::{cost_savings, perfect_flag, split, CostModel, SplitSpec};
use qflaw_core::datamodel::{aggregate, Channels, FlawLabelSet, ImageRecord, SourceTask, VoteCounts, WorkerAnnotation};
use qflaw_core::eval::{average_precision, prf_at_threshold};
use qflaw_core::stats::{interrelation, ContingencyTable};
use qflaw_core::vqa_reason::{ReasonConfig, ReasonModel, Vocab};
use qflaw_core::{AggregatedLabels, Flaw};

fn annotation(unrec: bool, flaw_bits: u8) -> WorkerAnnotation {
    let flaws: Vec<Flaw> = Flaw::ALL.into_iter().filter(|f| flaw_bits & (1 << f.index()) != 0).collect();
    WorkerAnnotation {
        worker_id: "w".into(),
        caption: "a photo".into(),
        unrecognizable: unrec,
        flaws: FlawLabelSet::from_flaws(&flaws),
    }
}

fn record(anns: Vec<WorkerAnnotation>) -> ImageRecord {
    ImageRecord {
        image_id: "img".into(),
        uri: "img.jpg".into(),
        source_task: SourceTask::Captioning,
        question: None,
        annotations: anns,
    }
}

fn voted(id: String, votes: u32) -> AggregatedLabels {
    AggregatedLabels {
        image_id: id,
        unrecognizable: votes >= 2,
        flaws: Channels([false; 8]),
        vote_counts: VoteCounts {
            unrecognizable: votes,
            flaws: Channels([0; 8]),
        },
    }
}

fn sign(x: f64) -> i8 {
    if x > 1e-12 {
        1
    } else if x < -1e-12 {
        -1
    } else {
        0
    }
}

proptest! {
    #[test]
    fn aggregation_is_permutation_invariant(
        votes in prop::collection::vec((any::<bool>(), any::<u8>()), 1..8),
        quorum in 1usize..4,
        rot in 0usize..8,
    ) {
        prop_assume!(votes.len() >= quorum);
        let anns: Vec<_> = votes.iter().map(|&(u, f)| annotation(u, f)).collect();
        let mut shuffled = anns.clone();
        let r = rot % shuffled.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        prop_assert_eq!(aggregate(&record(anns), quorum).unwrap(), aggregate(&record(shuffled), quorum).unwrap());
    }

    #[test]
    fn aggregation_is_monotone_in_votes(
        votes in prop::collection::vec((any::<bool>(), any::<u8>()), 1..8),
        idx in 0usize..8,
        quorum in 1usize..4,
    ) {
        prop_assume!(votes.len() >= quorum);
        let anns: Vec<_> = votes.iter().map(|&(u, f)| annotation(u, f)).collect();
        let mut more = anns.clone();
        let i = idx % more.len();
        more[i] = annotation(true, 0xff);
        let before = aggregate(&record(anns), quorum).unwrap();
        let after = aggregate(&record(more), quorum).unwrap();
        prop_assert!(!before.unrecognizable || after.unrecognizable);
        for f in Flaw::ALL {
            prop_assert!(!before.flaws[f] || after.flaws[f]);
        }
    }

    #[test]
    fn interrelation_sign_is_symmetric(n11 in 0u64..50, n10 in 0u64..50, n01 in 0u64..50, n00 in 0u64..50) {
        let t = ContingencyTable::new(n11, n10, n01, n00);
        if let (Ok(ab), Ok(ba)) = (interrelation(&t), interrelation(&t.transpose())) {
            prop_assert_eq!(sign(ab), sign(ba));
            let det = n11 as i128 * n00 as i128 - n10 as i128 * n01 as i128;
            prop_assert_eq!(sign(ab), sign(det as f64));
        }
    }

    #[test]
    fn ap_is_invariant_under_monotone_maps(data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..40)) {
        let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l));
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 2.0).collect();
        let a = average_precision(&scores, &labels).unwrap();
        let b = average_precision(&mapped, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn f1_lies_between_min_and_max(data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..40), thr in 0.0f64..1.0) {
        let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        let prf = prf_at_threshold(&scores, &labels, thr).unwrap();
        if let (Some(p), Some(r), Some(f)) = (prf.precision, prf.recall, prf.f1) {
            prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
        }
    }

    #[test]
    fn split_is_a_partition(n in 3usize..300, seed in any::<u64>(), pos_every in 2usize..9) {
        let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let strata: Vec<bool> = (0..n).map(|i| i % pos_every == 0).collect();
        let s = split(&ids, Some(&strata), &SplitSpec::recognizability(seed)).unwrap();
        let mut all: Vec<String> = s.splits.iter().flat_map(|(_, v)| v.clone()).collect();
        all.sort();
        let mut expected = ids.clone();
        expected.sort();
        prop_assert_eq!(all, expected);
        let n_pos = strata.iter().filter(|&&b| b).count() as f64;
        for ((_, members), r) in s.splits.iter().zip(&[0.525, 0.375, 0.10]) {
            prop_assert!((members.len() as f64 - r * n as f64).abs() <= 1.0);
            let pos = members.iter().filter(|id| strata[id[1..].parse::<usize>().unwrap()]).count() as f64;
            prop_assert!((pos - r * n_pos).abs() <= 1.0);
        }
    }

    #[test]
    fn perfect_flag_ignores_input_order(votes in prop::collection::vec(0u32..6, 1..40), n_frac in 0.0f64..1.0, rot in 0usize..40) {
        let labels: Vec<AggregatedLabels> = votes.iter().enumerate().map(|(i, &v)| voted(format!("id{i:03}"), v)).collect();
        let n = (n_frac * labels.len() as f64) as usize;
        let mut shuffled = labels.clone();
        shuffled.rotate_left(rot % labels.len());
        shuffled.reverse();
        let a = perfect_flag(&labels, n).unwrap();
        let b = perfect_flag(&shuffled, n).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.n, n);
        // nothing kept has more votes than anything dropped
        let kept: std::collections::BTreeSet<&String> = a.image_ids.iter().collect();
        let max_kept = labels.iter().filter(|l| kept.contains(&l.image_id)).map(|l| l.vote_counts.unrecognizable).max();
        let min_dropped = labels.iter().filter(|l| !kept.contains(&l.image_id)).map(|l| l.vote_counts.unrecognizable).min();
        if let (Some(k), Some(d)) = (max_kept, min_dropped) {
            prop_assert!(k <= d);
        }
    }

    #[test]
    fn cost_is_linear(a in 0u64..100_000, b in 0u64..100_000) {
        let m = CostModel::default();
        let sum = cost_savings(a + b, &m).unwrap();
        let (ca, cb) = (cost_savings(a, &m).unwrap(), cost_savings(b, &m).unwrap());
        prop_assert!((sum.dollars - ca.dollars - cb.dollars).abs() < 1e-6);
        prop_assert!((sum.hours - ca.hours - cb.hours).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_weights_form_a_simplex(
        k in 1usize..12,
        seed in any::<u64>(),
        regions in prop::collection::vec(-50.0f64..50.0, 12 * 6),
    ) {
        let config = ReasonConfig {
            embed_dim: 4,
            hidden_dim: 6,
            attention_dim: 5,
            fusion_dim: 5,
            classifier_hidden: 4,
            region_channels: 6,
            ..ReasonConfig::default()
        };
        let vocab = Vocab::build(["what is this", "read the label"], 1);
        let model = ReasonModel::new(config, vocab, seed);
        let q = model.encode_question("what is on the label");
        let regions: Vec<Vec<f64>> = regions.chunks(6).take(k).map(|c| c.to_vec()).collect();
        let (vhat, w) = model.attend(&q, &regions).unwrap();
        prop_assert_eq!(w.len(), k);
        prop_assert!(w.iter().all(|&x| x >= 0.0 && x.is_finite()));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(vhat.len(), 6);
    }
}
