//! Datasets: synthetic identity clusters and imported feature matrices.
//!
//! A dataset is a list of [`SampleRecord`]s with dense indices. Identities
//! travel with the records only so that evaluation can score results;
//! training code receives [`Dataset::observations`] and nothing else.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, parse_f64, parse_usize, read_to_string, write_atomic};
use crate::memory::{dot, norm, ZERO_NORM};

/// Renormalizing an imported vector by more than this logs a warning.
pub const RENORM_WARN: f64 = 1e-3;

const MAX_CENTER_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleCounts {
    Fixed(usize),
    PerIdentity(Vec<usize>),
}

impl SampleCounts {
    fn resolve(&self, identities: usize) -> Result<Vec<usize>> {
        let counts = match self {
            SampleCounts::Fixed(k) => vec![*k; identities],
            SampleCounts::PerIdentity(v) => {
                if v.len() != identities {
                    return Err(Error::config(format!(
                        "{} per-identity sample counts for {identities} identities",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if counts.iter().any(|&c| c < 2) {
            return Err(Error::config("every identity needs at least 2 samples"));
        }
        Ok(counts)
    }
}

/// Recipe for a synthetic benchmark.
///
/// Identity centers are random unit vectors inside a fixed random subspace of
/// dimension `subspace_dim` (the whole input space when unset), resampled
/// until every pair has inner product at most `max_center_similarity`.
/// Each sample is its center plus isotropic Gaussian noise of standard
/// deviation `cluster_spread` per coordinate, scaled to unit length. Train
/// and test identities are disjoint draws from the same subspace.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub samples_per_identity: SampleCounts,
    pub input_dim: usize,
    pub subspace_dim: Option<usize>,
    pub cluster_spread: f64,
    pub max_center_similarity: f64,
    pub test_identities: usize,
    pub test_samples_per_identity: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            identities: 32,
            samples_per_identity: SampleCounts::Fixed(8),
            input_dim: 64,
            subspace_dim: Some(16),
            cluster_spread: 0.12,
            max_center_similarity: 0.5,
            test_identities: 32,
            test_samples_per_identity: 8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::config("at least 2 identities are required"));
        }
        self.samples_per_identity.resolve(self.identities)?;
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if let Some(k) = self.subspace_dim {
            if k == 0 || k > self.input_dim {
                return Err(Error::config(format!(
                    "subspace_dim must lie in [1, {}], got {k}",
                    self.input_dim
                )));
            }
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::config("cluster_spread must be a finite non-negative number"));
        }
        if !(self.max_center_similarity > -1.0 && self.max_center_similarity <= 1.0) {
            return Err(Error::config("max_center_similarity must lie in (-1, 1]"));
        }
        if self.test_identities > 0 && self.test_samples_per_identity < 2 {
            return Err(Error::config("test identities need at least 2 samples"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub observation: Array1<f64>,
    pub identity: Option<usize>,
    pub camera: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    records: Vec<SampleRecord>,
}

impl Dataset {
    /// Sorts by index and checks that indices are exactly `0..n`.
    pub fn new(mut records: Vec<SampleRecord>) -> Result<Self> {
        records.sort_by_key(|r| r.index);
        for (k, r) in records.iter().enumerate() {
            if r.index != k {
                return Err(Error::config(format!(
                    "record indices must be dense from 0; found {} at position {k}",
                    r.index
                )));
            }
        }
        if let Some(first) = records.first() {
            let d = first.observation.len();
            if records.iter().any(|r| r.observation.len() != d) {
                return Err(Error::config("records have differing dimensions"));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.observation.len())
    }

    /// Observation matrix with identities stripped, one row per index.
    pub fn observations(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), self.dim()));
        for (mut row, r) in out.rows_mut().into_iter().zip(&self.records) {
            row.assign(&r.observation);
        }
        out
    }

    /// All identities, or `None` if any record lacks one.
    pub fn identities(&self) -> Option<Vec<usize>> {
        self.records.iter().map(|r| r.identity).collect()
    }

    pub fn cameras(&self) -> Option<Vec<usize>> {
        self.records.iter().map(|r| r.camera).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,identity,camera");
        for k in 1..=self.dim() {
            let _ = write!(out, ",f_{k}");
        }
        out.push('\n');
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = write!(out, "{},{},{}", r.index, opt(r.identity), opt(r.camera));
            for &x in r.observation.iter() {
                out.push(',');
                out.push_str(&fmt_f64(x));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::to_string(&JsonRecord::from(r))
                .map_err(|e| Error::Numeric(e.to_string()))?;
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Output of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(v.view());
        if n > ZERO_NORM {
            return v / n;
        }
    }
}

/// Orthonormal basis (`k × dim`) of a random subspace.
fn random_basis(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> Array2<f64> {
    let mut basis = Array2::<f64>::zeros((k, dim));
    let mut filled = 0;
    while filled < k {
        let mut v = unit_gaussian(rng, dim);
        for b in basis.rows().into_iter().take(filled) {
            let c = dot(v.view(), b);
            v.scaled_add(-c, &b);
        }
        let n = norm(v.view());
        if n > 1e-8 {
            basis.row_mut(filled).assign(&(v / n));
            filled += 1;
        }
    }
    basis
}

/// Draws a synthetic train/test pair; identical specs and seeds give
/// identical data.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = spec.input_dim;
    let k = spec.subspace_dim.unwrap_or(dim);
    let basis = if k == dim { Array2::eye(dim) } else { random_basis(&mut rng, dim, k) };

    let total = spec.identities + spec.test_identities;
    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(total);
    while centers.len() < total {
        let mut placed = false;
        for _ in 0..MAX_CENTER_TRIES {
            let c = unit_gaussian(&mut rng, k).dot(&basis);
            if centers.iter().all(|o| dot(o.view(), c.view()) <= spec.max_center_similarity) {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::config(format!(
                "could not place {total} identity centers in {k} dimensions with pairwise \
                 similarity <= {} (stuck at {}); lower the identity count or raise the bound",
                spec.max_center_similarity,
                centers.len()
            )));
        }
    }

    let train_counts = spec.samples_per_identity.resolve(spec.identities)?;
    let test_counts = vec![spec.test_samples_per_identity; spec.test_identities];
    let mut draw = |ids: std::ops::Range<usize>, counts: &[usize]| -> Result<Dataset> {
        let mut records = Vec::new();
        for (id, &count) in ids.zip(counts) {
            for _ in 0..count {
                let mut x = centers[id].clone();
                for v in x.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += spec.cluster_spread * e;
                }
                let n = norm(x.view());
                if n <= ZERO_NORM {
                    return Err(Error::Numeric("sampled a zero observation".into()));
                }
                records.push(SampleRecord {
                    index: records.len(),
                    observation: x / n,
                    identity: Some(id),
                    camera: None,
                });
            }
        }
        Dataset::new(records)
    };
    let train = draw(0..spec.identities, &train_counts)?;
    let test = draw(spec.identities..total, &test_counts)?;
    Ok(SyntheticData { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    Csv,
    Jsonl,
}

impl FeatureFormat {
    /// `.jsonl`/`.ndjson` map to JSON lines, anything else to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => FeatureFormat::Jsonl,
            _ => FeatureFormat::Csv,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    index: usize,
    #[serde(default)]
    identity: Option<usize>,
    #[serde(default)]
    camera: Option<usize>,
    features: Vec<f64>,
}

impl From<&SampleRecord> for JsonRecord {
    fn from(r: &SampleRecord) -> Self {
        Self {
            index: r.index,
            identity: r.identity,
            camera: r.camera,
            features: r.observation.to_vec(),
        }
    }
}

pub fn import_features(path: &Path, format: FeatureFormat) -> Result<Dataset> {
    let text = read_to_string(path)?;
    match format {
        FeatureFormat::Csv => parse_csv(&text, path),
        FeatureFormat::Jsonl => parse_jsonl(&text, path),
    }
}

fn finish(path: &Path, raw: Vec<(usize, SampleRecord)>) -> Result<Dataset> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut seen: HashMap<usize, usize> = HashMap::new();
    let n = raw.len();
    let mut records = Vec::with_capacity(n);
    for (line, mut r) in raw {
        if let Some(prev) = seen.insert(r.index, line) {
            return Err(perr(line, format!("duplicate index {} (first on line {prev})", r.index)));
        }
        if r.index >= n {
            return Err(perr(line, format!("index {} outside 0..{n}", r.index)));
        }
        let nr = norm(r.observation.view());
        if nr <= ZERO_NORM {
            return Err(perr(line, "zero feature vector".into()));
        }
        if (nr - 1.0).abs() > RENORM_WARN {
            warn!(
                "{}:{line}: feature norm {nr:.6} renormalized to 1",
                path.display()
            );
        }
        r.observation /= nr;
        records.push(r);
    }
    Dataset::new(records)
}

fn parse_opt(tok: &str, path: &Path, line: usize) -> Result<Option<usize>> {
    let t = tok.trim();
    if t.is_empty() {
        Ok(None)
    } else {
        parse_usize(t, path, line).map(Some)
    }
}

fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 4 || cols[..3] != ["index", "identity", "camera"] {
        return Err(perr(1, "header must start with index,identity,camera,f_1".into()));
    }
    let d = cols.len() - 3;
    let mut raw = Vec::new();
    for (ln, line) in lines {
        let line_no = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != d + 3 {
            return Err(perr(
                line_no,
                format!("expected {} fields, got {}", d + 3, toks.len()),
            ));
        }
        let observation = toks[3..]
            .iter()
            .map(|t| parse_f64(t, path, line_no))
            .collect::<Result<Array1<f64>>>()?;
        raw.push((
            line_no,
            SampleRecord {
                index: parse_usize(toks[0], path, line_no)?,
                identity: parse_opt(toks[1], path, line_no)?,
                camera: parse_opt(toks[2], path, line_no)?,
                observation,
            },
        ));
    }
    finish(path, raw)
}

fn parse_jsonl(text: &str, path: &Path) -> Result<Dataset> {
    let mut raw = Vec::new();
    let mut dim = None;
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let rec: JsonRecord = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
        if *dim.get_or_insert(rec.features.len()) != rec.features.len() || rec.features.is_empty() {
            return Err(perr(format!("ragged feature vector of length {}", rec.features.len())));
        }
        if rec.features.iter().any(|x| !x.is_finite()) {
            return Err(perr("non-finite value".into()));
        }
        raw.push((
            line_no,
            SampleRecord {
                index: rec.index,
                observation: Array1::from(rec.features),
                identity: rec.identity,
                camera: rec.camera,
            },
        ));
    }
    finish(path, raw)
}
