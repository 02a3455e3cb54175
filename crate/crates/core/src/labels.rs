//! Pseudo-label prediction over a memory-bank snapshot.
//!
//! Four predictors share one output type, [`MultiLabel`]:
//!
//! * MPLP: threshold the anchor's rank list at similarity `t`, then walk the
//!   surviving candidates in rank order and keep each one whose own top-`k`
//!   neighbours contain the anchor (`k` is the anchor's candidate count). The
//!   walk stops at the first candidate that fails this cycle check.
//! * similarity score (SS): the thresholded candidates with no cycle check.
//! * KNN: a fixed number of nearest rows.
//! * single label: every sample is its own and only class.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{parse_usize, read_to_string, write_atomic};
use crate::memory::{MemoryBank, RankList};

/// Default neighbour count for the KNN baseline.
pub const DEFAULT_KNN_K: usize = 8;

/// Thresholded prefix of a rank list.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub anchor: usize,
    pub candidates: Vec<usize>,
    pub threshold: f64,
}

impl CandidateSet {
    /// Number of candidates (`k_i`).
    pub fn k(&self) -> usize {
        self.candidates.len()
    }
}

/// A multi-class label stored as its positive classes.
///
/// The signed view is `+1` on `positives` and `-1` on every other class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiLabel {
    anchor: usize,
    positives: Vec<usize>,
    n: usize,
}

impl MultiLabel {
    /// Validates and sorts `positives`; the anchor must be among them.
    pub fn new(anchor: usize, mut positives: Vec<usize>, n: usize) -> Result<Self> {
        positives.sort_unstable();
        positives.dedup();
        if let Some(&bad) = positives.iter().find(|&&j| j >= n) {
            return Err(Error::Bounds { index: bad, len: n });
        }
        if positives.binary_search(&anchor).is_err() {
            return Err(Error::Precondition(format!(
                "anchor {anchor} missing from its own positive set"
            )));
        }
        Ok(Self {
            anchor,
            positives,
            n,
        })
    }

    /// The initial label: the sample is its own only class.
    pub fn singleton(anchor: usize, n: usize) -> Result<Self> {
        Self::new(anchor, vec![anchor], n)
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    /// Positive classes in ascending order.
    pub fn positives(&self) -> &[usize] {
        &self.positives
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.positives.binary_search(&j).is_ok()
    }

    pub fn signed(&self, j: usize) -> f64 {
        if self.contains(j) {
            1.0
        } else {
            -1.0
        }
    }

    fn with_anchor(anchor: usize, mut positives: Vec<usize>, n: usize) -> Self {
        if !positives.contains(&anchor) {
            positives.push(anchor);
        }
        positives.sort_unstable();
        positives.dedup();
        Self {
            anchor,
            positives,
            n,
        }
    }
}

/// Keeps the longest prefix of `r` whose scores are `>= t`.
pub fn filter_by_threshold(r: &RankList, t: f64) -> Result<CandidateSet> {
    if !(t > -1.0 && t < 1.0) {
        return Err(Error::config(format!("similarity threshold must lie in (-1, 1), got {t}")));
    }
    if r.order.len() != r.scores.len() || r.scores.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Precondition("rank list is not in descending order".into()));
    }
    let k = r.scores.iter().take_while(|&&s| s >= t).count();
    Ok(CandidateSet {
        anchor: r.anchor,
        candidates: r.order[..k].to_vec(),
        threshold: t,
    })
}

/// Cycle-consistent label prediction for anchor `i`.
pub fn mplp_predict(bank: &MemoryBank, i: usize, t: f64) -> Result<MultiLabel> {
    let cands = filter_by_threshold(&bank.rank_list(i)?, t)?;
    let k = cands.k();
    let mut accepted = Vec::with_capacity(k);
    for &j in &cands.candidates {
        if bank.rank_of(j, i)? < k {
            accepted.push(j);
        } else {
            break;
        }
    }
    Ok(MultiLabel::with_anchor(i, accepted, bank.len()))
}

/// Threshold-only label prediction for anchor `i`.
pub fn similarity_score_predict(bank: &MemoryBank, i: usize, t: f64) -> Result<MultiLabel> {
    let cands = filter_by_threshold(&bank.rank_list(i)?, t)?;
    Ok(MultiLabel::with_anchor(i, cands.candidates, bank.len()))
}

/// The anchor plus its `k - 1` nearest other rows.
pub fn knn_predict(bank: &MemoryBank, i: usize, k: usize) -> Result<MultiLabel> {
    let n = bank.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("KNN k must lie in [1, {n}], got {k}")));
    }
    let r = bank.rank_list(i)?;
    let mut pos = vec![i];
    pos.extend(r.order.iter().copied().filter(|&j| j != i).take(k - 1));
    Ok(MultiLabel::with_anchor(i, pos, n))
}

/// Label predictor selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Predictor {
    Mplp { threshold: f64 },
    SimilarityScore { threshold: f64 },
    Knn { k: usize },
    SingleLabel,
}

impl Predictor {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Mplp { .. } => "mplp",
            Predictor::SimilarityScore { .. } => "ss",
            Predictor::Knn { .. } => "knn",
            Predictor::SingleLabel => "single",
        }
    }

    pub fn predict(&self, bank: &MemoryBank, i: usize) -> Result<MultiLabel> {
        match *self {
            Predictor::Mplp { threshold } => mplp_predict(bank, i, threshold),
            Predictor::SimilarityScore { threshold } => similarity_score_predict(bank, i, threshold),
            Predictor::Knn { k } => knn_predict(bank, i, k),
            Predictor::SingleLabel => MultiLabel::singleton(i, bank.len()),
        }
    }

    /// Labels for every row, computed in parallel and returned in index order.
    pub fn predict_all(&self, bank: &MemoryBank) -> Result<Vec<MultiLabel>> {
        (0..bank.len())
            .into_par_iter()
            .map(|i| self.predict(bank, i))
            .collect()
    }
}

/// Singleton labels for `n` samples.
pub fn singleton_labels(n: usize) -> Vec<MultiLabel> {
    (0..n)
        .map(|i| MultiLabel::with_anchor(i, vec![i], n))
        .collect()
}

/// Precision and recall of one predicted label against true identities.
pub fn label_quality(pred: &MultiLabel, identities: &[usize]) -> Result<(f64, f64)> {
    let i = pred.anchor();
    if identities.len() != pred.num_classes() {
        return Err(Error::config(format!(
            "identity list has {} entries, label covers {}",
            identities.len(),
            pred.num_classes()
        )));
    }
    let id = identities[i];
    let hits = pred.positives().iter().filter(|&&j| identities[j] == id).count();
    let size = identities.iter().filter(|&&x| x == id).count();
    Ok((hits as f64 / pred.len() as f64, hits as f64 / size as f64))
}

/// Dataset-level label quality: mean precision and recall over anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    pub precision: f64,
    pub recall: f64,
    pub mean_positives: f64,
}

impl LabelQuality {
    pub fn f1(&self) -> f64 {
        let s = self.precision + self.recall;
        if s == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / s
        }
    }
}

pub fn mean_label_quality(labels: &[MultiLabel], identities: &[usize]) -> Result<LabelQuality> {
    if labels.is_empty() {
        return Err(Error::Degenerate("no labels to score".into()));
    }
    let (mut p, mut r, mut m) = (0.0, 0.0, 0.0);
    for l in labels {
        let (lp, lr) = label_quality(l, identities)?;
        p += lp;
        r += lr;
        m += l.len() as f64;
    }
    let n = labels.len() as f64;
    Ok(LabelQuality {
        precision: p / n,
        recall: r / n,
        mean_positives: m / n,
    })
}

/// One `anchor: p1,p2,...` line per sample.
pub fn labels_to_csv(labels: &[MultiLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        let pos: Vec<String> = l.positives().iter().map(|p| p.to_string()).collect();
        let _ = writeln!(out, "{}: {}", l.anchor(), pos.join(","));
    }
    out
}

pub fn write_labels(path: &Path, labels: &[MultiLabel]) -> Result<()> {
    write_atomic(path, labels_to_csv(labels).as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<MultiLabel>> {
    parse_labels(&read_to_string(path)?, path)
}

/// Parses the label file; anchors must be exactly `0..n` in order.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<MultiLabel>> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut raw = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (a, rest) = line
            .split_once(':')
            .ok_or_else(|| perr(line_no, "missing ':' separator".into()))?;
        let anchor = parse_usize(a, path, line_no)?;
        if anchor != raw.len() {
            return Err(perr(line_no, format!("expected anchor {}, got {anchor}", raw.len())));
        }
        let pos = rest
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| parse_usize(t, path, line_no))
            .collect::<Result<Vec<_>>>()?;
        raw.push((line_no, pos));
    }
    let n = raw.len();
    raw.into_iter()
        .enumerate()
        .map(|(i, (line_no, pos))| {
            MultiLabel::new(i, pos, n).map_err(|e| perr(line_no, e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn rank(scores: Vec<f64>) -> RankList {
        RankList {
            anchor: 0,
            order: (0..scores.len()).collect(),
            scores,
        }
    }

    #[test]
    fn threshold_prefix() {
        let c = filter_by_threshold(&rank(vec![1.0, 0.8, 0.55, 0.2]), 0.6).unwrap();
        assert_eq!(c.candidates, vec![0, 1]);
        assert_eq!(c.k(), 2);
        let c = filter_by_threshold(&rank(vec![1.0, 0.5, 0.4]), 0.6).unwrap();
        assert_eq!(c.candidates, vec![0]);
        // >= t keeps an exact tie.
        let c = filter_by_threshold(&rank(vec![1.0, 0.6, 0.1]), 0.6).unwrap();
        assert_eq!(c.k(), 2);
    }

    #[test]
    fn threshold_rejects_malformed() {
        assert!(filter_by_threshold(&rank(vec![0.2, 0.9]), 0.5).is_err());
        assert!(filter_by_threshold(&rank(vec![1.0]), 1.0).is_err());
    }

    fn pair_bank() -> MemoryBank {
        // rows 1 and 3 identical, the rest orthogonal
        MemoryBank::from_rows(array![
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn mplp_identical_pair() {
        let bank = pair_bank();
        assert_eq!(mplp_predict(&bank, 1, 0.6).unwrap().positives(), &[1, 3]);
        assert_eq!(mplp_predict(&bank, 3, 0.6).unwrap().positives(), &[1, 3]);
        assert_eq!(mplp_predict(&bank, 0, 0.6).unwrap().positives(), &[0]);
        assert_eq!(similarity_score_predict(&bank, 1, 0.6).unwrap().positives(), &[1, 3]);
    }

    #[test]
    fn mplp_stops_at_first_rejection() {
        // Anchor 0 sees candidates [0, 1, 2] at t = 0.85. Row 1 is closer to
        // the pair {3, 4} than to the anchor, so 0 falls outside 1's top-3 and
        // the walk stops; 2 is dropped even though it passes the cycle check.
        let c = |deg: f64| {
            let r = deg.to_radians();
            [r.cos(), r.sin()]
        };
        let pts = [c(0.0), c(20.0), c(-25.0), c(38.0), c(39.0)];
        let rows = Array2::from_shape_fn((5, 2), |(i, k)| pts[i][k]);
        let bank = MemoryBank::from_rows(rows).unwrap();
        let cands = filter_by_threshold(&bank.rank_list(0).unwrap(), 0.85).unwrap();
        assert_eq!(cands.candidates, vec![0, 1, 2]);
        assert_eq!(bank.rank_of(1, 0).unwrap(), 3);
        assert_eq!(bank.rank_of(2, 0).unwrap(), 1);
        assert_eq!(mplp_predict(&bank, 0, 0.85).unwrap().positives(), &[0]);
        assert_eq!(similarity_score_predict(&bank, 0, 0.85).unwrap().positives(), &[0, 1, 2]);
    }

    #[test]
    fn knn_sizes() {
        let bank = pair_bank();
        assert_eq!(knn_predict(&bank, 2, 1).unwrap().positives(), &[2]);
        assert_eq!(knn_predict(&bank, 1, 2).unwrap().positives(), &[1, 3]);
        assert_eq!(knn_predict(&bank, 0, 5).unwrap().len(), 5);
        assert!(knn_predict(&bank, 0, 0).is_err());
        assert!(knn_predict(&bank, 0, 6).is_err());
    }

    #[test]
    fn quality_arithmetic() {
        let ids = [0, 0, 0, 0, 1, 1];
        let exact = MultiLabel::new(0, vec![0, 1, 2, 3], 6).unwrap();
        assert_eq!(label_quality(&exact, &ids).unwrap(), (1.0, 1.0));
        let single = MultiLabel::singleton(0, 6).unwrap();
        assert_eq!(label_quality(&single, &ids).unwrap(), (1.0, 0.25));
        // Two true positives (0, 2) and two impostors (4, 5).
        let noisy = MultiLabel::new(0, vec![0, 2, 4, 5], 6).unwrap();
        assert_eq!(label_quality(&noisy, &ids).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn multilabel_invariants() {
        assert!(MultiLabel::new(2, vec![0, 1], 3).is_err());
        assert!(MultiLabel::new(0, vec![0, 3], 3).is_err());
        let l = MultiLabel::new(1, vec![2, 1, 1], 3).unwrap();
        assert_eq!(l.positives(), &[1, 2]);
        assert_eq!(l.signed(0), -1.0);
        assert_eq!(l.signed(2), 1.0);
    }

    #[test]
    fn labels_file_roundtrip() {
        let labels = vec![
            MultiLabel::new(0, vec![0, 2], 3).unwrap(),
            MultiLabel::singleton(1, 3).unwrap(),
            MultiLabel::new(2, vec![0, 2], 3).unwrap(),
        ];
        let text = labels_to_csv(&labels);
        assert_eq!(text, "0: 0,2\n1: 1\n2: 0,2\n");
        assert_eq!(parse_labels(&text, Path::new("l.csv")).unwrap(), labels);
        let err = parse_labels("0: 0\n1: 0\n", Path::new("l.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
