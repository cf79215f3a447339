//! Dataset splitting, recognizability-based training-set selection with its
//! comparison baselines, and the annotation cost calculator.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::AggregatedLabels;
use crate::error::{Error, Result};
use crate::features::FeatureTensor;
use crate::recognizability::{predict, Checkpoint, RecognizabilityHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: Vec<f64>,
    pub names: Vec<String>,
    pub seed: u64,
    /// Split each label stratum separately so every split keeps the label
    /// proportions.
    #[serde(default)]
    pub stratify: bool,
}

impl SplitSpec {
    pub fn new(names: &[&str], ratios: &[f64], seed: u64, stratify: bool) -> Self {
        SplitSpec {
            ratios: ratios.to_vec(),
            names: names.iter().map(|s| s.to_string()).collect(),
            seed,
            stratify,
        }
    }

    /// train / val / test at 52.5% / 37.5% / 10%, stratified.
    pub fn recognizability(seed: u64) -> Self {
        Self::new(&["train", "val", "test"], &[0.525, 0.375, 0.10], seed, true)
    }

    /// train / val / test at 70% / 20% / 10%.
    pub fn vqa(seed: u64) -> Self {
        Self::new(&["train", "val", "test"], &[0.70, 0.20, 0.10], seed, false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.ratios.len() != self.names.len() {
            return Err(Error::Spec(format!(
                "{} ratios for {} split names",
                self.ratios.len(),
                self.names.len()
            )));
        }
        if self.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Spec("split ratios must be finite and non-negative".into()));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Spec(format!("split ratios sum to {sum}, not 1")));
        }
        if self.names.iter().collect::<BTreeSet<_>>().len() != self.names.len() {
            return Err(Error::Spec("split names must be distinct".into()));
        }
        Ok(())
    }
}

/// Named splits in the order the names were given; ids keep their input order within a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub splits: Vec<(String, Vec<String>)>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&[String]> {
        self.splits.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.splits.iter().map(|(_, v)| v.len()).collect()
    }
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier split.
pub fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Seeded split. With `strata`, each stratum is divided on its own: every
/// split gets ⌊ratio·m⌋ or ⌈ratio·m⌉ items of a stratum of size m, and the
/// leftover items are routed so split totals still match the global
/// largest-remainder sizes.
pub fn split<K: Ord + Clone>(ids: &[String], strata: Option<&[K]>, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if ids.len() < spec.ratios.len() && spec.ratios.len() > 1 {
        return Err(Error::Spec(format!(
            "{} items cannot fill {} splits",
            ids.len(),
            spec.ratios.len()
        )));
    }
    let k = spec.ratios.len();
    let mut groups: BTreeMap<Option<K>, Vec<usize>> = BTreeMap::new();
    match strata {
        Some(s) if spec.stratify => {
            if s.len() != ids.len() {
                return Err(Error::Dimension {
                    expected: format!("{} stratum labels", ids.len()),
                    got: s.len().to_string(),
                });
            }
            for (i, key) in s.iter().enumerate() {
                groups.entry(Some(key.clone())).or_default().push(i);
            }
        }
        _ => {
            groups.insert(None, (0..ids.len()).collect());
        }
    }
    let targets = apportion(ids.len(), &spec.ratios);
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let mut per_group: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| spec.ratios.iter().map(|r| (r * g.len() as f64 + 1e-9).floor() as usize).collect())
        .collect();
    let mut demand: Vec<usize> = (0..k)
        .map(|i| targets[i].saturating_sub(per_group.iter().map(|c| c[i]).sum()))
        .collect();
    let mut extras: Vec<(usize, usize)> = groups
        .iter()
        .zip(&per_group)
        .enumerate()
        .map(|(g, (items, c))| (g, items.len() - c.iter().sum::<usize>()))
        .collect();
    extras.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (g, e) in extras {
        // each leftover goes to a distinct split, largest outstanding demand first
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            demand[b]
                .cmp(&demand[a])
                .then_with(|| {
                    let m = groups[g].len() as f64;
                    let fa = spec.ratios[a] * m - per_group[g][a] as f64;
                    let fb = spec.ratios[b] * m - per_group[g][b] as f64;
                    fb.total_cmp(&fa)
                })
                .then(a.cmp(&b))
        });
        for &i in order.iter().take(e) {
            per_group[g][i] += 1;
            demand[i] = demand[i].saturating_sub(1);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut assignment = vec![0usize; ids.len()];
    for (g, items) in groups.iter().enumerate() {
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut rng);
        let mut pos = 0;
        for (split_idx, &count) in per_group[g].iter().enumerate() {
            for &item in &shuffled[pos..pos + count] {
                assignment[item] = split_idx;
            }
            pos += count;
        }
    }
    let mut out: Vec<(String, Vec<String>)> = spec.names.iter().map(|n| (n.clone(), Vec::new())).collect();
    for (i, id) in ids.iter().enumerate() {
        out[assignment[i]].1.push(id.clone());
    }
    Ok(Splits { splits: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Dollars paid per annotation.
    pub per_image_rate: f64,
    /// Mean seconds spent per annotation.
    pub per_image_seconds: f64,
    /// Annotations collected per image.
    pub redundancy: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            per_image_rate: 0.132,
            per_image_seconds: 47.0,
            redundancy: 5,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.per_image_rate > 0.0 && self.per_image_seconds > 0.0 && self.redundancy > 0)
            || !self.per_image_rate.is_finite()
            || !self.per_image_seconds.is_finite()
        {
            return Err(Error::Config("cost model values must be positive".into()));
        }
        Ok(())
    }
}

/// Unrecognizable-image count behind the wasted-annotation figures, back
/// derived as ≈14.8% of 39,181 captioned images.
pub const RECONSTRUCTED_UNRECOGNIZABLE_COUNT: u64 = 5802;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSavings {
    pub n_unrecognizable: u64,
    pub dollars: f64,
    pub hours: f64,
    pub cost_model: CostModel,
    /// Set when the count is the reconstructed figure rather than a measured one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CostSavings {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} unrecognizable images x {} annotations: ${:.2} and {:.1} hours of annotation",
            self.n_unrecognizable, self.cost_model.redundancy, self.dollars, self.hours
        );
        if let Some(note) = &self.note {
            s.push_str(&format!(" ({note})"));
        }
        s
    }
}

/// Money and time spent annotating `n_unrecognizable` images.
pub fn cost_savings(n_unrecognizable: u64, cost: &CostModel) -> Result<CostSavings> {
    cost.validate()?;
    let annotations = n_unrecognizable as f64 * cost.redundancy as f64;
    Ok(CostSavings {
        n_unrecognizable,
        dollars: annotations * cost.per_image_rate,
        hours: annotations * cost.per_image_seconds / 3600.0,
        cost_model: *cost,
        note: (n_unrecognizable == RECONSTRUCTED_UNRECOGNIZABLE_COUNT)
            .then(|| "count reconstructed as 14.8% of 39,181 images".to_string()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Full,
    PerfectFlag,
    PredictedFlag,
    RandomSample,
}

impl SelectionMode {
    pub const ALL: [SelectionMode; 4] = [
        SelectionMode::Full,
        SelectionMode::PerfectFlag,
        SelectionMode::PredictedFlag,
        SelectionMode::RandomSample,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::Full => "full",
            SelectionMode::PerfectFlag => "perfect_flag",
            SelectionMode::PredictedFlag => "predicted_flag",
            SelectionMode::RandomSample => "random_sample",
        }
    }

    /// Accepts the snake_case names and the table labels
    /// ("full training set", "perfect flag", ...).
    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.trim().to_lowercase().replace([' ', '-'], "_");
        match norm.as_str() {
            "full" | "full_training_set" | "full_set" => Some(SelectionMode::Full),
            "perfect_flag" => Some(SelectionMode::PerfectFlag),
            "predicted_flag" => Some(SelectionMode::PredictedFlag),
            "random_sample" | "random_flag" => Some(SelectionMode::RandomSample),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub selection_mode: SelectionMode,
    #[serde(rename = "N")]
    pub n: usize,
    pub image_ids: Vec<String>,
    pub provenance: Provenance,
}

impl TrainingManifest {
    fn new(selection_mode: SelectionMode, image_ids: Vec<String>, provenance: Provenance) -> Self {
        TrainingManifest {
            selection_mode,
            n: image_ids.len(),
            image_ids,
            provenance,
        }
    }
}

pub fn full_manifest(ids: &[String]) -> TrainingManifest {
    TrainingManifest::new(SelectionMode::Full, ids.to_vec(), Provenance::default())
}

/// Keeps images whose unrecognizability probability is below `threshold`.
pub fn filter_by_scores(scored: &[(String, f64)], threshold: f64, provenance: Provenance) -> TrainingManifest {
    let kept: Vec<String> = scored.iter().filter(|(_, p)| *p < threshold).map(|(id, _)| id.clone()).collect();
    if kept.is_empty() && !scored.is_empty() {
        log::warn!("every image was predicted unrecognizable; the manifest is empty");
    }
    TrainingManifest::new(
        SelectionMode::PredictedFlag,
        kept,
        Provenance {
            threshold: Some(threshold),
            ..provenance
        },
    )
}

/// Runs the recognizability model over every image and keeps the ones it
/// predicts recognizable.
pub fn filter_predicted(
    ck: &Checkpoint<RecognizabilityHead>,
    images: &[(String, FeatureTensor)],
    threshold: f64,
    checkpoint_label: &str,
) -> Result<TrainingManifest> {
    let scored = images
        .iter()
        .map(|(id, t)| Ok((id.clone(), predict(ck, t, threshold)?.probability)))
        .collect::<Result<Vec<_>>>()?;
    Ok(filter_by_scores(
        &scored,
        threshold,
        Provenance {
            checkpoint: Some(checkpoint_label.to_string()),
            ..Default::default()
        },
    ))
}

/// Drops images in order of descending unrecognizable votes (ties by
/// ascending image id) until `n` remain. Output ids are sorted.
pub fn perfect_flag(labels: &[AggregatedLabels], n: usize) -> Result<TrainingManifest> {
    if n > labels.len() {
        return Err(Error::Spec(format!("N = {n} exceeds the {} available images", labels.len())));
    }
    let mut ranked: Vec<&AggregatedLabels> = labels.iter().collect();
    ranked.sort_by(|a, b| {
        b.vote_counts
            .unrecognizable
            .cmp(&a.vote_counts.unrecognizable)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    let mut kept: Vec<String> = ranked[labels.len() - n..].iter().map(|l| l.image_id.clone()).collect();
    kept.sort();
    Ok(TrainingManifest::new(SelectionMode::PerfectFlag, kept, Provenance::default()))
}

/// Uniform sample of `n` ids without replacement, kept in input order.
pub fn random_sample(ids: &[String], n: usize, seed: u64) -> Result<TrainingManifest> {
    if n > ids.len() {
        return Err(Error::Spec(format!("N = {n} exceeds the {} available images", ids.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, ids.len(), n).into_vec();
    picked.sort_unstable();
    Ok(TrainingManifest::new(
        SelectionMode::RandomSample,
        picked.into_iter().map(|i| ids[i].clone()).collect(),
        Provenance {
            seed: Some(seed),
            ..Default::default()
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<String>,
    pub selection_mode: SelectionMode,
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub metrics: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<12} {:<16} {:>7}", "algorithm", "selection", "N"));
        for m in &self.metrics {
            out.push_str(&format!(" {m:>8}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:<16} {:>7}",
                r.algorithm.as_deref().unwrap_or("-"),
                r.selection_mode.as_str(),
                r.n.map_or("-".to_string(), |n| n.to_string())
            ));
            for v in &r.values {
                out.push_str(&format!(" {v:>8.1}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Joins externally produced downstream results (CSV with a
/// `selection_mode` column, an optional `algorithm` column and one column
/// per metric) to the manifests. Every manifest mode needs a row for every
/// algorithm.
pub fn compare_manifests(manifests: &[TrainingManifest], results_csv: &str) -> Result<ComparisonReport> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(results_csv.as_bytes());
    let headers = rdr.headers()?.clone();
    let mode_col = headers
        .iter()
        .position(|h| h == "selection_mode")
        .ok_or_else(|| Error::Schema("results file lacks a selection_mode column".into()))?;
    let algo_col = headers.iter().position(|h| h == "algorithm");
    let metric_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != mode_col && Some(i) != algo_col).collect();
    let metrics: Vec<String> = metric_cols.iter().map(|&i| headers[i].to_string()).collect();
    let mut table: BTreeMap<(Option<String>, SelectionMode), Vec<f64>> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mode = SelectionMode::parse(&rec[mode_col])
            .ok_or_else(|| Error::Schema(format!("row {}: unknown selection mode `{}`", line + 2, &rec[mode_col])))?;
        let algo = algo_col.map(|c| rec[c].to_string());
        let values = metric_cols
            .iter()
            .map(|&c| {
                rec[c]
                    .parse::<f64>()
                    .map_err(|_| Error::Schema(format!("row {}: `{}` is not a number", line + 2, &rec[c])))
            })
            .collect::<Result<Vec<f64>>>()?;
        table.insert((algo, mode), values);
    }
    let algorithms: BTreeSet<Option<String>> = table.keys().map(|(a, _)| a.clone()).collect();
    let algorithms: Vec<Option<String>> = if algorithms.is_empty() { vec![None] } else { algorithms.into_iter().collect() };
    let mut modes: Vec<SelectionMode> = manifests.iter().map(|m| m.selection_mode).collect();
    modes.sort();
    modes.dedup();
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for algo in &algorithms {
        for &mode in &modes {
            match table.get(&(algo.clone(), mode)) {
                Some(values) => rows.push(ComparisonRow {
                    algorithm: algo.clone(),
                    selection_mode: mode,
                    n: manifests.iter().find(|m| m.selection_mode == mode).map(|m| m.n),
                    values: values.clone(),
                }),
                None => missing.push(match algo {
                    Some(a) => format!("{a}/{}", mode.as_str()),
                    None => mode.as_str().to_string(),
                }),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Join {
            what: "downstream results for selection modes".into(),
            missing,
        });
    }
    Ok(ComparisonReport { metrics, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Channels, VoteCounts};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:05}")).collect()
    }

    fn voted(id: &str, votes: u32) -> AggregatedLabels {
        AggregatedLabels {
            image_id: id.to_string(),
            unrecognizable: votes >= 2,
            flaws: Channels([false; 8]),
            vote_counts: VoteCounts {
                unrecognizable: votes,
                flaws: Channels([0; 8]),
            },
        }
    }

    #[test]
    fn split_sizes_and_strata() {
        let items = ids(1000);
        let strata: Vec<bool> = (0..1000).map(|i| i % 27 < 4).collect();
        let spec = SplitSpec::recognizability(3);
        let s = split(&items, Some(&strata), &spec).unwrap();
        assert_eq!(s.sizes(), vec![525, 375, 100]);
        let n_pos = strata.iter().filter(|&&b| b).count() as f64;
        for ((_, members), r) in s.splits.iter().zip(&spec.ratios) {
            let pos = members.iter().filter(|id| strata[id[3..].parse::<usize>().unwrap()]).count() as f64;
            assert!((pos - r * n_pos).abs() < 1.0);
        }
        assert_eq!(s, split(&items, Some(&strata), &spec).unwrap());

        let one = split::<bool>(&items[..7], None, &SplitSpec::new(&["all"], &[1.0], 0, false)).unwrap();
        assert_eq!(one.get("all").unwrap(), &items[..7]);

        let bad = SplitSpec::new(&["a", "b"], &[0.5, 0.6], 0, false);
        assert!(matches!(split::<bool>(&items, None, &bad), Err(Error::Spec(_))));
        assert!(matches!(
            split::<bool>(&items[..2], None, &SplitSpec::vqa(0)),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(1000, &[0.7, 0.2, 0.1]), vec![700, 200, 100]);
        assert_eq!(apportion(10, &[0.525, 0.375, 0.1]), vec![5, 4, 1]);
        assert_eq!(apportion(3, &[0.5, 0.5]), vec![2, 1]);
    }

    #[test]
    fn cost_examples() {
        let d = CostModel::default();
        let zero = cost_savings(0, &d).unwrap();
        assert_eq!((zero.dollars, zero.hours), (0.0, 0.0));
        let c = cost_savings(RECONSTRUCTED_UNRECOGNIZABLE_COUNT, &d).unwrap();
        assert!((c.dollars - 3829.32).abs() < 1e-9);
        // 5802 * 5 * 47 = 1_363_470 seconds
        assert!((c.hours - 1_363_470.0 / 3600.0).abs() < 1e-9);
        assert!(c.to_text().contains("$3829.32") && c.to_text().contains("378.7 hours"));
        let c2 = cost_savings(2 * RECONSTRUCTED_UNRECOGNIZABLE_COUNT, &d).unwrap();
        assert!((c2.dollars - 2.0 * c.dollars).abs() < 1e-9);
        assert!(cost_savings(1, &CostModel { redundancy: 0, ..d }).is_err());
    }

    #[test]
    fn perfect_flag_examples() {
        let all_zero: Vec<_> = ["a", "b", "c"].iter().map(|i| voted(i, 0)).collect();
        assert_eq!(perfect_flag(&all_zero, 3).unwrap().image_ids, vec!["a", "b", "c"]);

        let l = vec![voted("a", 5), voted("b", 3), voted("c", 0), voted("d", 0)];
        assert_eq!(perfect_flag(&l, 2).unwrap().image_ids, vec!["c", "d"]);

        let l = vec![voted("a", 5), voted("b", 5), voted("c", 2)];
        let m = perfect_flag(&l, 2).unwrap();
        assert_eq!(m.image_ids, vec!["b", "c"]);
        assert_eq!(m.n, 2);
        assert!(matches!(perfect_flag(&l, 4), Err(Error::Spec(_))));
    }

    #[test]
    fn random_sample_examples() {
        let items = ids(50);
        assert_eq!(random_sample(&items, 50, 1).unwrap().image_ids, items);
        assert!(random_sample(&items, 0, 1).unwrap().image_ids.is_empty());
        assert_eq!(random_sample(&items, 20, 9).unwrap(), random_sample(&items, 20, 9).unwrap());
        assert!(random_sample(&items, 51, 1).is_err());
    }

    #[test]
    fn score_filter_examples() {
        let scored: Vec<(String, f64)> = vec![("a".into(), 0.1), ("b".into(), 0.6), ("c".into(), 0.5)];
        let m = filter_by_scores(&scored, 0.5, Provenance::default());
        assert_eq!(m.image_ids, vec!["a"]);
        assert_eq!(m.n, scored.len() - 2);
        assert_eq!(filter_by_scores(&scored, 1.1, Provenance::default()).n, 3);
        assert_eq!(filter_by_scores(&scored, 0.0, Provenance::default()).n, 0);
        let json = serde_json::to_value(&m).unwrap();
        assert_eq!(json["N"], 1);
        assert_eq!(json["selection_mode"], "predicted_flag");
    }

    const TABLE: &str = "\
algorithm,selection_mode,B@1,B@2,B@3,B@4,METEOR,ROUGE-L,CIDEr-D,SPICE
AoANet,full training set,63.3,44.3,29.9,19.7,18.0,44.4,43.6,11.2
AoANet,perfect flag,63.3,43.8,29.5,19.9,18.1,44.2,43.6,11.5
AoANet,predicted flag,63.2,44.0,29.5,19.8,18.1,44.2,42.9,11.5
AoANet,random sample,62.5,43.3,28.8,18.9,18.0,44.1,41.9,11.4
";

    fn manifests() -> Vec<TrainingManifest> {
        let items = ids(10);
        vec![
            full_manifest(&items),
            TrainingManifest::new(SelectionMode::PerfectFlag, items[..8].to_vec(), Provenance::default()),
            TrainingManifest::new(SelectionMode::PredictedFlag, items[..8].to_vec(), Provenance::default()),
            random_sample(&items, 8, 0).unwrap(),
        ]
    }

    #[test]
    fn comparison_table() {
        let r = compare_manifests(&manifests(), TABLE).unwrap();
        assert_eq!(r.metrics.len(), 8);
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.rows[0].values[6], 43.6);
        assert_eq!(r.rows[2].selection_mode, SelectionMode::PredictedFlag);
        assert_eq!(r.rows[2].values, vec![63.2, 44.0, 29.5, 19.8, 18.1, 44.2, 42.9, 11.5]);
        assert!(r.to_text().contains("43.6"));

        let partial: String = TABLE.lines().filter(|l| !l.contains("random")).map(|l| format!("{l}\n")).collect();
        match compare_manifests(&manifests(), &partial) {
            Err(Error::Join { missing, .. }) => assert_eq!(missing, vec!["AoANet/random_sample"]),
            other => panic!("{other:?}"),
        }
    }
}
