//! Prevalence, conditional frequencies, answerability cross-statistics and
//! the interrelation index between pairs of binary labels.
//!
//! All probabilities are raw empirical frequencies over the supplied labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{AggregatedLabels, Channels, Flaw, VisualQuestion};
use crate::error::{Error, Result};

/// An image-level binary label: unrecognizability or one flaw channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "UNREC")]
    Unrecognizable,
    #[serde(untagged)]
    Flaw(Flaw),
}

impl Label {
    pub fn of(self, labels: &AggregatedLabels) -> bool {
        match self {
            Label::Unrecognizable => labels.unrecognizable,
            Label::Flaw(f) => labels.flaw(f),
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Label::Unrecognizable => "UNREC",
            Label::Flaw(f) => f.code(),
        }
    }
}

impl From<Flaw> for Label {
    fn from(f: Flaw) -> Self {
        Label::Flaw(f)
    }
}

/// 2×2 counts of two binary events A and B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// A ∧ B
    pub n11: u64,
    /// A ∧ ¬B
    pub n10: u64,
    /// ¬A ∧ B
    pub n01: u64,
    /// ¬A ∧ ¬B
    pub n00: u64,
}

impl ContingencyTable {
    pub fn new(n11: u64, n10: u64, n01: u64, n00: u64) -> Self {
        ContingencyTable { n11, n10, n01, n00 }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut t = ContingencyTable::default();
        for (a, b) in pairs {
            match (a, b) {
                (true, true) => t.n11 += 1,
                (true, false) => t.n10 += 1,
                (false, true) => t.n01 += 1,
                (false, false) => t.n00 += 1,
            }
        }
        t
    }

    pub fn from_labels(labels: &[AggregatedLabels], a: Label, b: Label) -> Self {
        Self::from_pairs(labels.iter().map(|l| (a.of(l), b.of(l))))
    }

    pub fn total(&self) -> u64 {
        self.n11 + self.n10 + self.n01 + self.n00
    }

    pub fn transpose(&self) -> Self {
        ContingencyTable::new(self.n11, self.n01, self.n10, self.n00)
    }

    pub fn p_a(&self) -> f64 {
        (self.n11 + self.n10) as f64 / self.total() as f64
    }

    pub fn p_b(&self) -> f64 {
        (self.n11 + self.n01) as f64 / self.total() as f64
    }

    /// P(B | A); NaN when A never occurs.
    pub fn p_b_given_a(&self) -> f64 {
        self.n11 as f64 / (self.n11 + self.n10) as f64
    }

    /// P(B | ¬A); NaN when ¬A never occurs.
    pub fn p_b_given_not_a(&self) -> f64 {
        self.n01 as f64 / (self.n01 + self.n00) as f64
    }
}

/// Interrelation index I(A, B) = P(B|A)/P(B) − P(B|¬A)/P(B).
///
/// Positive values mean A and B promote each other, negative values mean
/// they suppress each other, zero means the table is independent.
pub fn interrelation(table: &ContingencyTable) -> Result<f64> {
    if table.total() == 0 {
        return Err(Error::UndefinedIndex {
            marginal: "N",
            value: 0.0,
        });
    }
    let p_a = table.p_a();
    if p_a == 0.0 || p_a == 1.0 {
        return Err(Error::UndefinedIndex { marginal: "P(A)", value: p_a });
    }
    let p_b = table.p_b();
    if p_b == 0.0 {
        return Err(Error::UndefinedIndex { marginal: "P(B)", value: p_b });
    }
    Ok(table.p_b_given_a() / p_b - table.p_b_given_not_a() / p_b)
}

pub fn prevalence(labels: &[AggregatedLabels], channel: Label) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::UndefinedStatistic(format!("prevalence of {} over an empty label set", channel.code())));
    }
    let hits = labels.iter().filter(|l| channel.of(l)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// P(target | given) from paired boolean observations.
pub fn conditional_pairs(pairs: impl IntoIterator<Item = (bool, bool)>, what: &str) -> Result<f64> {
    let (mut both, mut given) = (0u64, 0u64);
    for (t, g) in pairs {
        if g {
            given += 1;
            both += t as u64;
        }
    }
    if given == 0 {
        return Err(Error::UndefinedStatistic(format!("{what}: conditioning event never occurs")));
    }
    Ok(both as f64 / given as f64)
}

pub fn conditional(labels: &[AggregatedLabels], target: Label, given: Label) -> Result<f64> {
    conditional_pairs(
        labels.iter().map(|l| (target.of(l), given.of(l))),
        &format!("P({} | {})", target.code(), given.code()),
    )
}

/// 8×8 interrelation indices between flaw channels. Entry `[i][j]` is
/// I(flaw i, flaw j); the diagonal and degenerate pairs are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterrelationMatrix {
    pub channels: Vec<Flaw>,
    pub entries: Vec<Vec<Option<f64>>>,
}

impl InterrelationMatrix {
    pub fn get(&self, a: Flaw, b: Flaw) -> Option<f64> {
        self.entries[a.index()][b.index()]
    }

    /// CSV export, values multiplied by `scale`; undefined entries are empty.
    pub fn to_csv(&self, scale: f64) -> String {
        let mut out = String::from("flaw");
        for f in &self.channels {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
        for (f, row) in self.channels.iter().zip(&self.entries) {
            out.push_str(f.code());
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{}", v * scale);
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn interrelation_matrix(labels: &[AggregatedLabels]) -> InterrelationMatrix {
    let entries = Flaw::ALL
        .iter()
        .map(|&a| {
            Flaw::ALL
                .iter()
                .map(|&b| {
                    if a == b {
                        None
                    } else {
                        interrelation(&ContingencyTable::from_labels(labels, a.into(), b.into())).ok()
                    }
                })
                .collect()
        })
        .collect();
    InterrelationMatrix {
        channels: Flaw::ALL.to_vec(),
        entries,
    }
}

/// Cross-statistics between answerability (A) and image quality labels.
/// Undefined conditionals are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerabilityStats {
    pub n_questions: usize,
    /// P(Ā)
    pub p_unanswerable: f64,
    /// P(Ā | Q) for each quality label Q
    pub p_unanswerable_given: BTreeMap<String, Option<f64>>,
    /// P(Ā | R̄)
    pub p_unanswerable_given_unrecognizable: Option<f64>,
    /// P(R̄)
    pub p_unrecognizable: f64,
    /// P(R̄ | Ā)
    pub p_unrecognizable_given_unanswerable: Option<f64>,
    /// P(Q | A) for each quality label Q
    pub p_quality_given_answerable: BTreeMap<String, Option<f64>>,
    /// P(Q | Ā) for each quality label Q
    pub p_quality_given_unanswerable: BTreeMap<String, Option<f64>>,
}

fn quality_labels() -> impl Iterator<Item = Label> {
    std::iter::once(Label::Unrecognizable).chain(Flaw::ALL.into_iter().map(Label::Flaw))
}

pub fn answerability_stats(questions: &[VisualQuestion], labels: &[AggregatedLabels]) -> Result<AnswerabilityStats> {
    if questions.is_empty() {
        return Err(Error::UndefinedStatistic("answerability statistics over zero questions".into()));
    }
    let by_id: BTreeMap<&str, &AggregatedLabels> = labels.iter().map(|l| (l.image_id.as_str(), l)).collect();
    let mut missing: Vec<String> = questions
        .iter()
        .filter(|q| !by_id.contains_key(q.image_id.as_str()))
        .map(|q| q.image_id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::Join {
            what: "aggregated labels".into(),
            missing,
        });
    }
    let joined: Vec<(bool, &AggregatedLabels)> =
        questions.iter().map(|q| (!q.answerable, by_id[q.image_id.as_str()])).collect();
    let n = joined.len() as f64;
    let unans_count = joined.iter().filter(|(u, _)| *u).count();

    let mut p_unans_given = BTreeMap::new();
    let mut p_q_given_ans = BTreeMap::new();
    let mut p_q_given_unans = BTreeMap::new();
    for q in quality_labels() {
        let key = q.code().to_string();
        p_unans_given.insert(
            key.clone(),
            conditional_pairs(joined.iter().map(|(u, l)| (*u, q.of(l))), "").ok(),
        );
        p_q_given_ans.insert(
            key.clone(),
            conditional_pairs(joined.iter().map(|(u, l)| (q.of(l), !*u)), "").ok(),
        );
        p_q_given_unans.insert(key, conditional_pairs(joined.iter().map(|(u, l)| (q.of(l), *u)), "").ok());
    }
    let unrec = Label::Unrecognizable;
    Ok(AnswerabilityStats {
        n_questions: joined.len(),
        p_unanswerable: unans_count as f64 / n,
        p_unanswerable_given_unrecognizable: p_unans_given[unrec.code()],
        p_unanswerable_given: p_unans_given,
        p_unrecognizable: joined.iter().filter(|(_, l)| l.unrecognizable).count() as f64 / n,
        p_unrecognizable_given_unanswerable: p_q_given_unans[unrec.code()],
        p_quality_given_answerable: p_q_given_ans,
        p_quality_given_unanswerable: p_q_given_unans,
    })
}

/// Unrecognizable share of the three-way targets after answerable questions
/// have their unrecognizability forced to false: P(Ā) · P(R̄ | Ā).
pub fn post_assignment_unrecognizable_mass(p_unanswerable: f64, p_unrec_given_unans: f64) -> f64 {
    p_unanswerable * p_unrec_given_unans
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub n_images: usize,
    pub p_unrecognizable: f64,
    pub prevalence: Channels<f64>,
    /// P(unrecognizable | flaw)
    pub p_unrec_given_flaw: Channels<Option<f64>>,
    /// P(flaw | unrecognizable)
    pub p_flaw_given_unrec: Channels<Option<f64>>,
    pub interrelation: InterrelationMatrix,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answerability: Option<AnswerabilityStats>,
}

pub fn stats_report(labels: &[AggregatedLabels], questions: Option<&[VisualQuestion]>) -> Result<StatsReport> {
    let p_unrec = prevalence(labels, Label::Unrecognizable)?;
    let mut prev = Channels([0.0; 8]);
    let mut unrec_given = Channels([None; 8]);
    let mut flaw_given = Channels([None; 8]);
    for f in Flaw::ALL {
        prev[f] = prevalence(labels, f.into())?;
        unrec_given[f] = conditional(labels, Label::Unrecognizable, f.into()).ok();
        flaw_given[f] = conditional(labels, f.into(), Label::Unrecognizable).ok();
    }
    let answerability = questions.map(|q| answerability_stats(q, labels)).transpose()?;
    Ok(StatsReport {
        n_images: labels.len(),
        p_unrecognizable: p_unrec,
        prevalence: prev,
        p_unrec_given_flaw: unrec_given,
        p_flaw_given_unrec: flaw_given,
        interrelation: interrelation_matrix(labels),
        answerability,
    })
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |v| format!("{v:.3}"))
}

impl StatsReport {
    /// Plain-text summary; probabilities rounded to 3 decimals, interrelation
    /// indices multiplied by 100.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images: {}", self.n_images);
        let _ = writeln!(s, "P(UNREC): {:.3}", self.p_unrecognizable);
        let _ = writeln!(s, "\nflaw  prevalence  P(UNREC|flaw)  P(flaw|UNREC)");
        for f in Flaw::ALL {
            let _ = writeln!(
                s,
                "{:<5} {:>10}  {:>13}  {:>13}",
                f.code(),
                fmt3(Some(self.prevalence[f])),
                fmt3(self.p_unrec_given_flaw[f]),
                fmt3(self.p_flaw_given_unrec[f])
            );
        }
        let _ = writeln!(s, "\ninterrelation index x100 (row A, column B)");
        s.push_str("     ");
        for f in Flaw::ALL {
            let _ = write!(s, "{:>7}", f.code());
        }
        s.push('\n');
        for a in Flaw::ALL {
            let _ = write!(s, "{:<5}", a.code());
            for b in Flaw::ALL {
                match self.interrelation.get(a, b) {
                    Some(v) => {
                        let _ = write!(s, "{:>7.0}", v * 100.0);
                    }
                    None => {
                        let _ = write!(s, "{:>7}", "-");
                    }
                }
            }
            s.push('\n');
        }
        if let Some(a) = &self.answerability {
            let _ = writeln!(s, "\nquestions: {}", a.n_questions);
            let _ = writeln!(s, "P(unans): {:.3}", a.p_unanswerable);
            let _ = writeln!(s, "P(unans|UNREC): {}", fmt3(a.p_unanswerable_given_unrecognizable));
            let _ = writeln!(s, "P(UNREC): {:.3}", a.p_unrecognizable);
            let _ = writeln!(s, "P(UNREC|unans): {}", fmt3(a.p_unrecognizable_given_unanswerable));
            for (k, v) in &a.p_unanswerable_given {
                let _ = writeln!(s, "P(unans|{k}): {}", fmt3(*v));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::VoteCounts;

    fn labels_from(rows: &[(bool, &[Flaw])]) -> Vec<AggregatedLabels> {
        rows.iter()
            .enumerate()
            .map(|(i, (unrec, flaws))| {
                let mut ch = Channels([false; 8]);
                for &f in *flaws {
                    ch[f] = true;
                }
                AggregatedLabels {
                    image_id: format!("i{i}"),
                    unrecognizable: *unrec,
                    flaws: ch,
                    vote_counts: VoteCounts::default(),
                }
            })
            .collect()
    }

    #[test]
    fn interrelation_examples() {
        assert_eq!(interrelation(&ContingencyTable::new(25, 25, 25, 25)).unwrap(), 0.0);
        let v = interrelation(&ContingencyTable::new(40, 10, 10, 40)).unwrap();
        assert!((v - 1.2).abs() < 1e-12, "{v}");
        // B identical to A with P = 0.5
        let v = interrelation(&ContingencyTable::new(50, 0, 0, 50)).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn interrelation_degenerate_marginals() {
        assert!(matches!(
            interrelation(&ContingencyTable::new(3, 2, 0, 0)),
            Err(Error::UndefinedIndex { marginal: "P(A)", .. })
        ));
        assert!(matches!(
            interrelation(&ContingencyTable::new(0, 0, 4, 1)),
            Err(Error::UndefinedIndex { marginal: "P(A)", .. })
        ));
        assert!(matches!(
            interrelation(&ContingencyTable::new(0, 5, 0, 5)),
            Err(Error::UndefinedIndex { marginal: "P(B)", .. })
        ));
        assert!(interrelation(&ContingencyTable::default()).is_err());
    }

    #[test]
    fn prevalence_and_conditional() {
        let rows: Vec<(bool, &[Flaw])> = vec![
            (true, &[Flaw::Blur]),
            (true, &[Flaw::Blur]),
            (false, &[Flaw::Blur]),
            (false, &[Flaw::Blur]),
            (false, &[Flaw::Blur]),
            (false, &[Flaw::Blur]),
            (false, &[Flaw::Blur]),
            (false, &[Flaw::Blur]),
        ];
        let l = labels_from(&rows);
        assert_eq!(prevalence(&l, Flaw::Blur.into()).unwrap(), 1.0);
        assert_eq!(prevalence(&l, Label::Unrecognizable).unwrap(), 0.25);
        assert_eq!(conditional(&l, Label::Unrecognizable, Flaw::Blur.into()).unwrap(), 0.25);
        assert_eq!(conditional(&l, Flaw::Blur.into(), Flaw::Blur.into()).unwrap(), 1.0);
        assert!(matches!(
            conditional(&l, Flaw::Blur.into(), Flaw::Dark.into()),
            Err(Error::UndefinedStatistic(_))
        ));
        assert!(prevalence(&[], Label::Unrecognizable).is_err());
    }

    #[test]
    fn three_of_eight() {
        let rows: Vec<(bool, &[Flaw])> = (0..8)
            .map(|i| (false, if i < 3 { &[Flaw::Dark][..] } else { &[Flaw::NoFlaw][..] }))
            .collect();
        assert_eq!(prevalence(&labels_from(&rows), Flaw::Dark.into()).unwrap(), 0.375);
    }

    #[test]
    fn matrix_matches_pairwise_tables() {
        let rows: Vec<(bool, &[Flaw])> = vec![
            (false, &[Flaw::Blur, Flaw::Framing]),
            (true, &[Flaw::Blur]),
            (false, &[Flaw::Framing, Flaw::Rotation]),
            (false, &[Flaw::NoFlaw]),
            (false, &[Flaw::NoFlaw, Flaw::Dark]),
            (true, &[Flaw::Dark, Flaw::Bright, Flaw::Blur]),
        ];
        let l = labels_from(&rows);
        let m = interrelation_matrix(&l);
        for a in Flaw::ALL {
            assert_eq!(m.get(a, a), None);
            for b in Flaw::ALL {
                if a == b {
                    continue;
                }
                let direct = interrelation(&ContingencyTable::from_labels(&l, a.into(), b.into())).ok();
                assert_eq!(m.get(a, b).map(f64::to_bits), direct.map(f64::to_bits));
            }
        }
        // OBS and OTH never occur
        assert_eq!(m.get(Flaw::Blur, Flaw::Obstruction), None);
        assert_eq!(m.get(Flaw::Other, Flaw::Blur), None);
        let csv = m.to_csv(100.0);
        assert!(csv.starts_with("flaw,BLR,BRT"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn answerability_block() {
        let l = labels_from(&[(true, &[Flaw::Blur]), (false, &[Flaw::NoFlaw]), (true, &[Flaw::Dark])]);
        let qs = vec![
            VisualQuestion::new("i0", "what is this?", false, true),
            VisualQuestion::new("i1", "what color?", true, false),
            VisualQuestion::new("i2", "what is it?", true, true),
        ];
        let a = answerability_stats(&qs, &l).unwrap();
        assert!((a.p_unanswerable - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.p_unrecognizable_given_unanswerable, Some(1.0));
        assert_eq!(a.p_unanswerable_given_unrecognizable, Some(0.5));
        assert_eq!(a.p_unanswerable_given["NON"], Some(0.0));
        assert_eq!(a.p_unanswerable_given["OBS"], None);

        let all_ans: Vec<_> = qs.iter().map(|q| VisualQuestion::new(&q.image_id, &q.question, true, false)).collect();
        let a = answerability_stats(&all_ans, &l).unwrap();
        assert_eq!(a.p_unanswerable, 0.0);
        assert_eq!(a.p_unrecognizable_given_unanswerable, None);

        let stray = vec![VisualQuestion::new("nope", "q", true, false)];
        match answerability_stats(&stray, &l) {
            Err(Error::Join { missing, .. }) => assert_eq!(missing, vec!["nope".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manual_assignment_mass() {
        let m = post_assignment_unrecognizable_mass(0.287, 0.302);
        assert!((m - 0.086674).abs() < 1e-12);
    }

    #[test]
    fn label_serialization() {
        assert_eq!(serde_json::to_string(&Label::Unrecognizable).unwrap(), "\"UNREC\"");
        assert_eq!(serde_json::to_string(&Label::Flaw(Flaw::Dark)).unwrap(), "\"DRK\"");
    }
}
