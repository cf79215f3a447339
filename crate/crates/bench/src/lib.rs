//! Seeded fixtures shared by the benchmarks.

use qflaw_core::datamodel::{aggregate, AggregatedLabels, FlawLabelSet, ImageRecord, SourceTask, WorkerAnnotation};
use qflaw_core::stats::ContingencyTable;
use qflaw_core::Flaw;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contingency tables with every margin nonzero.
pub fn tables(n: usize, seed: u64) -> Vec<ContingencyTable> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            ContingencyTable::new(
                r.gen_range(1..2000),
                r.gen_range(1..2000),
                r.gen_range(1..2000),
                r.gen_range(1..2000),
            )
        })
        .collect()
}

/// Scores on a coarse grid (many ties) with roughly balanced labels.
pub fn scored(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    let scores = (0..n).map(|_| r.gen_range(0..100) as f64 / 100.0).collect();
    let labels = (0..n).map(|_| r.gen_bool(0.4)).collect();
    (scores, labels)
}

/// Five-worker records with random votes, aggregated at quorum 2.
pub fn labels(n: usize, seed: u64) -> Vec<AggregatedLabels> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let annotations = (0..5)
                .map(|w| {
                    let unrecognizable = r.gen_bool(0.2);
                    let mut flaws: Vec<Flaw> = Flaw::ALL[..7].iter().copied().filter(|_| r.gen_bool(0.15)).collect();
                    if flaws.is_empty() {
                        flaws.push(Flaw::NoFlaw);
                    }
                    WorkerAnnotation {
                        worker_id: format!("w{w}"),
                        caption: if unrecognizable {
                            qflaw_core::datamodel::UNRECOGNIZABLE_CAPTION.into()
                        } else {
                            "A photo.".into()
                        },
                        unrecognizable,
                        flaws: FlawLabelSet::from_flaws(&flaws),
                    }
                })
                .collect();
            let rec = ImageRecord {
                image_id: format!("img{i:06}"),
                uri: format!("img{i:06}.jpg"),
                source_task: SourceTask::Captioning,
                question: None,
                annotations,
            };
            aggregate(&rec, 2).expect("five annotations")
        })
        .collect()
}
