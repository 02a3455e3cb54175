//! Brute-force references shared by the integration tests. Written against
//! plain `Vec`s so they share no code with the library under test.
#![allow(dead_code)]

use mmcl::eval::RetrievalSplit;
use mmcl::{MemoryBank, MultiLabel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows[0].len();
    Array2::from_shape_fn((rows.len(), d), |(i, k)| rows[i][k])
}

/// Unit rows drawn around a few centers so that thresholds in (0, 1) give
/// non-trivial candidate sets. Some rows are exact duplicates to exercise
/// tie-breaking.
pub fn clustered_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let centers: Vec<Vec<f64>> = (0..rng.random_range(1..=4)).map(|_| unit_vec(rng, d)).collect();
    let spread = rng.random_range(0.05..0.8);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        if !rows.is_empty() && rng.random_bool(0.05) {
            let j = rng.random_range(0..rows.len());
            rows.push(rows[j].clone());
            continue;
        }
        let c = &centers[rng.random_range(0..centers.len())];
        let mut v: Vec<f64> = c
            .iter()
            .map(|x| x + spread * gauss(rng) / (d as f64).sqrt())
            .collect();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        rows.push(v);
    }
    rows
}

pub fn bank_of(rows: &[Vec<f64>]) -> MemoryBank {
    MemoryBank::from_rows(to_array(rows)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// `j` comes before `k` in the rank list of a row with similarities `sim`.
fn before(sim: &[f64], j: usize, k: usize) -> bool {
    sim[j] > sim[k] || (sim[j] == sim[k] && j < k)
}

/// Rank list by repeated minimum extraction.
pub fn brute_rank_list(rows: &[Vec<f64>], i: usize) -> Vec<usize> {
    let sim: Vec<f64> = rows.iter().map(|r| dot(&rows[i], r)).collect();
    let mut left: Vec<usize> = (0..rows.len()).collect();
    let mut out = Vec::with_capacity(rows.len());
    while !left.is_empty() {
        let mut best = 0;
        for p in 1..left.len() {
            if before(&sim, left[p], left[best]) {
                best = p;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Threshold prefix, then the reciprocal walk that stops at the first
/// candidate whose own top-k list misses the anchor.
pub fn brute_mplp(rows: &[Vec<f64>], i: usize, t: f64) -> Vec<usize> {
    brute_mplp_with(rows, &brute_rank_lists(rows), i, t)
}

pub fn brute_rank_lists(rows: &[Vec<f64>]) -> Vec<Vec<usize>> {
    (0..rows.len()).map(|j| brute_rank_list(rows, j)).collect()
}

pub fn brute_mplp_with(rows: &[Vec<f64>], lists: &[Vec<usize>], i: usize, t: f64) -> Vec<usize> {
    let sim_i: Vec<f64> = lists[i].iter().map(|&j| dot(&rows[i], &rows[j])).collect();
    let mut k = 0;
    while k < sim_i.len() && sim_i[k] >= t {
        k += 1;
    }
    let mut pos = vec![i];
    for &j in &lists[i][..k] {
        if lists[j][..k].contains(&i) {
            if j != i {
                pos.push(j);
            }
        } else {
            break;
        }
    }
    pos.sort_unstable();
    pos
}

pub fn brute_ss(rows: &[Vec<f64>], i: usize, t: f64) -> Vec<usize> {
    let mut pos: Vec<usize> = brute_rank_list(rows, i)
        .into_iter()
        .take_while(|&j| dot(&rows[i], &rows[j]) >= t)
        .collect();
    if !pos.contains(&i) {
        pos.push(i);
    }
    pos.sort_unstable();
    pos
}

/// Sort every negative by (score desc, index asc) and keep the first
/// `max(1, floor((n - |P|)·r/100))`.
pub fn brute_mining(scores: &[f64], positives: &[usize], r: f64) -> Vec<usize> {
    let mut neg: Vec<usize> = (0..scores.len()).filter(|j| !positives.contains(j)).collect();
    neg.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let count = (((scores.len() - positives.len()) as f64 * r / 100.0).floor() as usize).max(1);
    neg.truncate(count);
    neg
}

pub struct NaiveMetrics {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub valid: usize,
}

/// CMC and mAP by direct enumeration of the distance-sorted gallery.
pub fn naive_metrics(split: &RetrievalSplit) -> NaiveMetrics {
    let ng = split.gallery.nrows();
    let mut first_hit = Vec::new();
    let mut aps = Vec::new();
    for q in 0..split.query.nrows() {
        let mut items: Vec<(f64, usize)> = Vec::new();
        for g in 0..ng {
            if let (Some(qc), Some(gc)) = (&split.query_cams, &split.gallery_cams) {
                if split.gallery_ids[g] == split.query_ids[q] && gc[g] == qc[q] {
                    continue;
                }
            }
            let mut d = 0.0;
            for k in 0..split.query.ncols() {
                let e = split.query[[q, k]] - split.gallery[[g, k]];
                d += e * e;
            }
            items.push((d, g));
        }
        items.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &(_, g)) in items.iter().enumerate() {
            if split.gallery_ids[g] == split.query_ids[q] {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                first.get_or_insert(pos);
            }
        }
        if let Some(f) = first {
            first_hit.push(f);
            aps.push(precision_sum / hits as f64);
        }
    }
    let valid = aps.len();
    let cmc = (0..ng)
        .map(|k| {
            if valid == 0 {
                0.0
            } else {
                first_hit.iter().filter(|&&f| f <= k).count() as f64 / valid as f64
            }
        })
        .collect();
    let map = if valid == 0 { 0.0 } else { aps.iter().sum::<f64>() / valid as f64 };
    NaiveMetrics { cmc, map, valid }
}

/// Random split over 2 to 10 identities; with `cams`, camera ids in `0..cams`.
pub fn random_split(rng: &mut ChaCha8Rng, gallery: usize, cams: Option<usize>) -> RetrievalSplit {
    let d = rng.random_range(2..=8);
    let ids = rng.random_range(2..=10);
    let centers: Vec<Vec<f64>> = (0..ids).map(|_| unit_vec(rng, d)).collect();
    let noise = rng.random_range(0.1..1.5);
    let mut draw = |count: usize| {
        let id: Vec<usize> = (0..count).map(|_| rng.random_range(0..ids)).collect();
        let rows: Vec<Vec<f64>> = id
            .iter()
            .map(|&c| {
                let v: Vec<f64> = centers[c]
                    .iter()
                    .map(|x| x + noise * gauss(rng))
                    .collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let cam = cams.map(|c| (0..count).map(|_| rng.random_range(0..c)).collect::<Vec<_>>());
        (to_array(&rows), id, cam)
    };
    let nq = 1 + gallery / 4;
    let (query, query_ids, query_cams) = draw(nq);
    let (mut g, gallery_ids, gallery_cams) = draw(gallery);
    // A few exact duplicates so the index tie-break matters.
    if gallery > 2 {
        let row = g.row(0).to_owned();
        g.row_mut(gallery - 1).assign(&row);
    }
    RetrievalSplit {
        query,
        query_ids,
        query_cams,
        gallery: g,
        gallery_ids,
        gallery_cams,
    }
}

/// Random labels with anchor `i` and up to `max_extra` extra positives.
pub fn random_label(rng: &mut ChaCha8Rng, i: usize, n: usize, max_extra: usize) -> MultiLabel {
    let extra = rng.random_range(0..=max_extra.min(n - 1));
    let mut pos = vec![i];
    while pos.len() < extra + 1 {
        let j = rng.random_range(0..n);
        if !pos.contains(&j) {
            pos.push(j);
        }
    }
    MultiLabel::new(i, pos, n).unwrap()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + h;
            let up = f(&x);
            x[k] = orig - h;
            let down = f(&x);
            x[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
