//! The memory bank: one running, L2-normalized feature per training sample.
//!
//! Row `i` doubles as the weight vector of class `i` in the non-parametric
//! classifier, so `score_against` is the classification score of a feature
//! against every class at once. Rows start at zero and are blended with new
//! embeddings as training proceeds:
//!
//! ```text
//! M[i] <- normalize(alpha * f_i + (1 - alpha) * M[i])
//! ```

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, parse_f64, parse_usize, read_to_string, write_atomic};

/// Rows whose norm is at or below this are treated as empty.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on `|‖f‖ - 1|` for a vector to count as normalized.
pub const UNIT_TOL: f64 = 1e-6;

/// Plain sequential dot product.
///
/// Summation order depends only on the length, so `dot(a, b) == dot(b, a)`
/// bit for bit.
#[inline]
pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

/// An L2-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Array1<f64>);

impl FeatureVector {
    /// Wraps a vector that is already unit length.
    pub fn new(values: Array1<f64>) -> Result<Self> {
        check_finite(values.view())?;
        let n = norm(values.view());
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Numeric(format!(
                "feature vector is not normalized (norm {n})"
            )));
        }
        Ok(Self(values))
    }

    /// Scales `values` to unit length.
    pub fn normalize(mut values: Array1<f64>) -> Result<Self> {
        check_finite(values.view())?;
        let n = norm(values.view());
        if n <= ZERO_NORM {
            return Err(Error::Numeric("cannot normalize a zero vector".into()));
        }
        values /= n;
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

fn check_finite(v: ArrayView1<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite value in feature vector".into()))
    }
}

/// Descending-similarity ordering of every memory row relative to an anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RankList {
    pub anchor: usize,
    /// Sample indices, most similar first. Ties go to the smaller index.
    pub order: Vec<usize>,
    /// `scores[k]` is the similarity between the anchor and `order[k]`.
    pub scores: Vec<f64>,
}

impl RankList {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Orders `(index, score)` pairs by descending score, then ascending index.
/// Signed zeros compare equal.
pub(crate) fn rank_cmp(a: (usize, f64), b: (usize, f64)) -> Ordering {
    (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    rows: Array2<f64>,
    update_rate: f64,
    epoch: usize,
}

impl MemoryBank {
    /// An all-zero bank of `n` rows of dimension `d`.
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::config(format!(
                "memory bank needs n >= 1 and d >= 1 (got n={n}, d={d})"
            )));
        }
        Ok(Self {
            rows: Array2::zeros((n, d)),
            update_rate: 0.0,
            epoch: 0,
        })
    }

    /// Builds a bank from explicit rows, stored as given.
    pub fn from_rows(rows: Array2<f64>) -> Result<Self> {
        let (n, d) = rows.dim();
        if n == 0 || d == 0 {
            return Err(Error::config("memory bank rows must be non-empty"));
        }
        if !rows.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric("non-finite value in memory rows".into()));
        }
        Ok(Self {
            rows,
            update_rate: 0.0,
            epoch: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> Result<ArrayView1<'_, f64>> {
        self.check_index(i)?;
        Ok(self.rows.row(i))
    }

    pub fn row_norm(&self, i: usize) -> Result<f64> {
        Ok(norm(self.row(i)?))
    }

    /// True once every row has been written at least once.
    pub fn is_populated(&self) -> bool {
        self.rows.rows().into_iter().all(|r| norm(r) > ZERO_NORM)
    }

    pub fn update_rate(&self) -> f64 {
        self.update_rate
    }

    pub fn set_update_rate(&mut self, alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        self.update_rate = alpha;
        Ok(())
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i < self.len() {
            Ok(())
        } else {
            Err(Error::Bounds {
                index: i,
                len: self.len(),
            })
        }
    }

    fn check_feature(&self, f: &FeatureVector) -> Result<()> {
        if f.dim() != self.dim() {
            return Err(Error::config(format!(
                "feature dimension {} does not match memory dimension {}",
                f.dim(),
                self.dim()
            )));
        }
        check_finite(f.view())
    }

    /// Momentum update of row `i` followed by renormalization.
    ///
    /// With `alpha == 0` the row is left untouched bit for bit. A blend whose
    /// norm is at most [`ZERO_NORM`] is stored without normalization.
    pub fn update_row(&mut self, i: usize, f: &FeatureVector, alpha: f64) -> Result<()> {
        self.check_index(i)?;
        self.check_feature(f)?;
        check_alpha(alpha)?;
        if alpha == 0.0 {
            return Ok(());
        }
        let mut row = self.rows.row_mut(i);
        row.zip_mut_with(&f.view(), |m, &x| *m = alpha * x + (1.0 - alpha) * *m);
        let n = norm(row.view());
        if n > ZERO_NORM {
            row /= n;
        }
        Ok(())
    }

    /// Writes `f` into row `i` if the row is still empty. Returns whether it did.
    pub fn bootstrap_row(&mut self, i: usize, f: &FeatureVector) -> Result<bool> {
        self.check_index(i)?;
        self.check_feature(f)?;
        if norm(self.rows.row(i)) > ZERO_NORM {
            return Ok(false);
        }
        self.rows.row_mut(i).assign(&f.view());
        Ok(true)
    }

    /// Inner product of rows `i` and `j`.
    pub fn similarity(&self, i: usize, j: usize) -> Result<f64> {
        Ok(dot(self.row(i)?, self.row(j)?))
    }

    /// Full rank list for anchor `i`.
    pub fn rank_list(&self, i: usize) -> Result<RankList> {
        let anchor = self.row(i)?;
        if norm(anchor) <= ZERO_NORM {
            return Err(Error::Precondition(format!(
                "rank list requested for empty memory row {i}"
            )));
        }
        let mut pairs: Vec<(usize, f64)> = self
            .rows
            .rows()
            .into_iter()
            .enumerate()
            .map(|(j, r)| (j, dot(anchor, r)))
            .collect();
        pairs.sort_unstable_by(|&a, &b| rank_cmp(a, b));
        let (order, scores) = pairs.into_iter().unzip();
        Ok(RankList {
            anchor: i,
            order,
            scores,
        })
    }

    /// Zero-based position of `target` in the rank list of `anchor`, without
    /// sorting. Agrees with `rank_list(anchor)` by construction.
    pub fn rank_of(&self, anchor: usize, target: usize) -> Result<usize> {
        let a = self.row(anchor)?;
        let key = (target, dot(a, self.row(target)?));
        Ok(self
            .rows
            .rows()
            .into_iter()
            .enumerate()
            .filter(|&(j, r)| rank_cmp((j, dot(a, r)), key) == Ordering::Less)
            .count())
    }

    /// Classification scores of `f` against every memory row.
    pub fn score_against(&self, f: ArrayView1<f64>) -> Result<Array1<f64>> {
        if f.len() != self.dim() {
            return Err(Error::config(format!(
                "feature dimension {} does not match memory dimension {}",
                f.len(),
                self.dim()
            )));
        }
        Ok(self.rows.rows().into_iter().map(|r| dot(r, f)).collect())
    }

    /// Serializes the bank: a `n,d,epoch,alpha` line followed by one row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            self.len(),
            self.dim(),
            self.epoch,
            fmt_f64(self.update_rate)
        );
        for r in self.rows.rows() {
            let line: Vec<String> = r.iter().map(|&x| fmt_f64(x)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&read_to_string(path)?, path)
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() != 4 {
            return Err(perr(1, format!("expected n,d,epoch,alpha header, got {header:?}")));
        }
        let n = parse_usize(fields[0], path, 1)?;
        let d = parse_usize(fields[1], path, 1)?;
        let epoch = parse_usize(fields[2], path, 1)?;
        let alpha = parse_f64(fields[3], path, 1)?;
        let mut bank = Self::new(n, d).map_err(|e| perr(1, e.to_string()))?;
        check_alpha(alpha).map_err(|e| perr(1, e.to_string()))?;
        bank.update_rate = alpha;
        bank.epoch = epoch;
        let mut count = 0;
        for (ln, line) in lines {
            let line_no = ln + 1;
            if count == n {
                return Err(perr(line_no, format!("more than {n} rows")));
            }
            let toks: Vec<&str> = line.split(',').collect();
            if toks.len() != d {
                return Err(perr(line_no, format!("expected {d} values, got {}", toks.len())));
            }
            for (k, t) in toks.iter().enumerate() {
                bank.rows[[count, k]] = parse_f64(t, path, line_no)?;
            }
            count += 1;
        }
        if count != n {
            return Err(perr(text.lines().count(), format!("expected {n} rows, got {count}")));
        }
        Ok(bank)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::config(format!("update rate must lie in [0, 1], got {alpha}")))
    }
}
