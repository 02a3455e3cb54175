//! Retrieval metrics: CMC curve and mean average precision.
//!
//! Each query ranks the gallery by ascending Euclidean distance, ties going
//! to the lower gallery index. When both sides carry camera ids, gallery
//! entries sharing the query's identity and camera are removed first. AP is
//! the mean of precision@rank taken at every true-match rank.

use log::warn;
use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSplit {
    pub query: Array2<f64>,
    pub query_ids: Vec<usize>,
    pub query_cams: Option<Vec<usize>>,
    pub gallery: Array2<f64>,
    pub gallery_ids: Vec<usize>,
    pub gallery_cams: Option<Vec<usize>>,
}

impl RetrievalSplit {
    fn validate(&self) -> Result<()> {
        if self.query.nrows() != self.query_ids.len() || self.gallery.nrows() != self.gallery_ids.len() {
            return Err(Error::config("feature rows and identity lists differ in length"));
        }
        if self.query.ncols() != self.gallery.ncols() {
            return Err(Error::config("query and gallery feature dimensions differ"));
        }
        if self.query.nrows() == 0 || self.gallery.nrows() == 0 {
            return Err(Error::Degenerate("empty query or gallery set".into()));
        }
        if let Some(c) = &self.query_cams {
            if c.len() != self.query_ids.len() {
                return Err(Error::config("query camera list has the wrong length"));
            }
        }
        if let Some(c) = &self.gallery_cams {
            if c.len() != self.gallery_ids.len() {
                return Err(Error::config("gallery camera list has the wrong length"));
            }
        }
        Ok(())
    }

    /// Splits a labelled feature set: the first `per_identity` records of
    /// each identity (by index) become queries, the rest the gallery.
    pub fn from_dataset(features: &Array2<f64>, data: &Dataset, per_identity: usize) -> Result<Self> {
        let ids = data
            .identities()
            .ok_or_else(|| Error::config("evaluation needs an identity for every record"))?;
        if features.nrows() != ids.len() {
            return Err(Error::config("feature rows do not match dataset size"));
        }
        let cams = data.cameras();
        let mut seen = std::collections::HashMap::new();
        let (mut q, mut g) = (Vec::new(), Vec::new());
        for (i, &id) in ids.iter().enumerate() {
            let c = seen.entry(id).or_insert(0usize);
            if *c < per_identity {
                q.push(i);
            } else {
                g.push(i);
            }
            *c += 1;
        }
        let pick = |idx: &[usize]| features.select(ndarray::Axis(0), idx);
        let pick_ids = |idx: &[usize], v: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Ok(Self {
            query: pick(&q),
            query_ids: pick_ids(&q, &ids),
            query_cams: cams.as_ref().map(|c| pick_ids(&q, c)),
            gallery: pick(&g),
            gallery_ids: pick_ids(&g, &ids),
            gallery_cams: cams.as_ref().map(|c| pick_ids(&g, c)),
        })
    }

    /// Query and gallery taken from two separate datasets.
    pub fn from_pair(
        query: Array2<f64>,
        query_data: &Dataset,
        gallery: Array2<f64>,
        gallery_data: &Dataset,
    ) -> Result<Self> {
        let need = || Error::config("evaluation needs an identity for every record");
        Ok(Self {
            query,
            query_ids: query_data.identities().ok_or_else(need)?,
            query_cams: query_data.cameras(),
            gallery,
            gallery_ids: gallery_data.identities().ok_or_else(need)?,
            gallery_cams: gallery_data.cameras(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `cmc[k]` is the rank-(k+1) accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// AP of every query that had at least one valid match, in query order.
    pub per_query_ap: Vec<f64>,
    /// Queries dropped for lack of a valid gallery match.
    pub skipped_queries: Vec<usize>,
}

impl MetricsReport {
    /// Rank-`k` accuracy (1-based), saturating at the gallery size.
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[k.clamp(1, self.cmc.len()) - 1]
    }

    pub fn summary(&self) -> Summary {
        Summary {
            rank1: self.rank(1),
            rank5: self.rank(5),
            rank10: self.rank(10),
            map: self.map,
            valid_queries: self.per_query_ap.len(),
            skipped_queries: self.skipped_queries.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub valid_queries: usize,
    pub skipped_queries: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For one query: 1-based ranks of true matches in the filtered ranking and
/// the filtered list length.
fn match_ranks(split: &RetrievalSplit, q: usize) -> (Vec<usize>, usize) {
    let qf = split.query.row(q);
    let qid = split.query_ids[q];
    let qcam = split.query_cams.as_ref().map(|c| c[q]);
    let mut order: Vec<(usize, f64)> = split
        .gallery
        .rows()
        .into_iter()
        .enumerate()
        .filter(|&(g, _)| match (qcam, &split.gallery_cams) {
            (Some(qc), Some(gc)) => !(split.gallery_ids[g] == qid && gc[g] == qc),
            _ => true,
        })
        .map(|(g, gf)| (g, sq_dist(qf, gf)))
        .collect();
    order.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let ranks = order
        .iter()
        .enumerate()
        .filter(|(_, (g, _))| split.gallery_ids[*g] == qid)
        .map(|(r, _)| r + 1)
        .collect();
    (ranks, order.len())
}

pub fn evaluate(split: &RetrievalSplit) -> Result<MetricsReport> {
    split.validate()?;
    let per_query: Vec<(Vec<usize>, usize)> = (0..split.query.nrows())
        .into_par_iter()
        .map(|q| match_ranks(split, q))
        .collect();
    let gallery_len = split.gallery.nrows();
    let mut hits_at = vec![0usize; gallery_len];
    let mut per_query_ap = Vec::new();
    let mut skipped = Vec::new();
    for (q, (ranks, _)) in per_query.iter().enumerate() {
        let Some(&first) = ranks.first() else {
            skipped.push(q);
            continue;
        };
        hits_at[first - 1] += 1;
        let ap = ranks
            .iter()
            .enumerate()
            .map(|(k, &r)| (k + 1) as f64 / r as f64)
            .sum::<f64>()
            / ranks.len() as f64;
        per_query_ap.push(ap);
    }
    if !skipped.is_empty() {
        warn!("{} queries have no valid gallery match and were skipped", skipped.len());
    }
    let valid = per_query_ap.len();
    let mut cmc = Vec::with_capacity(gallery_len);
    let mut acc = 0usize;
    for h in hits_at {
        acc += h;
        cmc.push(if valid == 0 { 0.0 } else { acc as f64 / valid as f64 });
    }
    let map = if valid == 0 {
        0.0
    } else {
        per_query_ap.iter().sum::<f64>() / valid as f64
    };
    Ok(MetricsReport {
        cmc,
        map,
        per_query_ap,
        skipped_queries: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn self_retrieval_is_perfect() {
        let f = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let split = RetrievalSplit {
            query: f.clone(),
            query_ids: vec![0, 1, 2],
            query_cams: None,
            gallery: f,
            gallery_ids: vec![0, 1, 2],
            gallery_cams: None,
        };
        let r = evaluate(&split).unwrap();
        assert_eq!(r.rank(1), 1.0);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn single_query_second_rank() {
        let split = RetrievalSplit {
            query: array![[1.0, 0.0]],
            query_ids: vec![7],
            query_cams: None,
            gallery: array![[0.9, 0.1], [0.8, 0.3], [0.0, 1.0], [-1.0, 0.0]],
            gallery_ids: vec![1, 7, 2, 3],
            gallery_cams: None,
        };
        let r = evaluate(&split).unwrap();
        assert_eq!(r.per_query_ap, vec![0.5]);
        assert_eq!(r.rank(1), 0.0);
        assert_eq!(r.rank(2), 1.0);
        assert_eq!(r.cmc, vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn camera_exclusion_and_skips() {
        let split = RetrievalSplit {
            query: array![[1.0, 0.0], [0.0, 1.0]],
            query_ids: vec![0, 1],
            query_cams: Some(vec![0, 0]),
            gallery: array![[1.0, 0.0], [0.9, 0.2], [0.0, 1.0]],
            gallery_ids: vec![0, 0, 1],
            gallery_cams: Some(vec![0, 1, 0]),
        };
        let r = evaluate(&split).unwrap();
        // query 0 loses gallery 0 (same id, same cam); query 1 loses its only match
        assert_eq!(r.skipped_queries, vec![1]);
        assert_eq!(r.per_query_ap, vec![1.0]);
        assert_eq!(r.summary().skipped_queries, 1);
    }

    #[test]
    fn dataset_split_rule() {
        use crate::data::SampleRecord;
        let recs = (0..6)
            .map(|i| SampleRecord {
                index: i,
                observation: array![1.0, i as f64],
                identity: Some(i % 2),
                camera: None,
            })
            .collect();
        let ds = Dataset::new(recs).unwrap();
        let s = RetrievalSplit::from_dataset(&ds.observations(), &ds, 1).unwrap();
        assert_eq!(s.query_ids, vec![0, 1]);
        assert_eq!(s.gallery_ids, vec![0, 1, 0, 1]);
        assert_eq!(s.query.row(1)[1], 1.0);
    }
}
