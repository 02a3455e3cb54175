//! Memory-classifier losses and their analytic gradients.
//!
//! Every variant scores a feature `f` against all memory rows, `s = M f`, and
//! compares the scores with the signed label of the sample. Gradients are
//! taken with respect to the features only; the memory bank is a constant.
//! Batch values are means over the batch, and the reported gradient is the
//! gradient of that mean.
//!
//! | variant        | per-sample loss                                                   |
//! |----------------|-------------------------------------------------------------------|
//! | `Mcl`          | `Σ_j softplus(-y_j s_j)`                                           |
//! | `MclTau`       | `Σ_j softplus(-y_j s_j / τ)`                                       |
//! | `Mmcl`         | `δ/|P| Σ_{p∈P} (s_p - 1)² + 1/|N| Σ_{q∈N} (s_q + 1)²`              |
//! | `MemSoftmaxCe` | `-1/|P| Σ_{p∈P} log softmax(s / τ)_p`                              |
//!
//! `N` holds the hard negatives: the highest-scoring `r%` of the non-positive
//! classes, at least one.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::MultiLabel;
use crate::memory::{rank_cmp, MemoryBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Logistic multi-label loss on raw scores.
    Mcl,
    /// Logistic multi-label loss on temperature-scaled scores.
    MclTau,
    /// Squared-error regression to ±1 with hard negative mining.
    Mmcl,
    /// Softmax cross-entropy over memory classes.
    MemSoftmaxCe,
}

impl LossVariant {
    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Mcl => "mcl",
            LossVariant::MclTau => "mcl_tau",
            LossVariant::Mmcl => "mmcl",
            LossVariant::MemSoftmaxCe => "mem_softmax_ce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Temperature for `MclTau` and `MemSoftmaxCe`.
    pub tau: f64,
    /// Weight on the positive-class term of `Mmcl`.
    pub delta: f64,
    /// Percentage of negative classes kept by hard negative mining.
    pub hard_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Mmcl,
            tau: 0.1,
            delta: 5.0,
            hard_ratio: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.delta >= 1.0 && self.delta.is_finite()) {
            return Err(Error::config(format!("delta must be >= 1, got {}", self.delta)));
        }
        if !(self.hard_ratio > 0.0 && self.hard_ratio <= 100.0) {
            return Err(Error::config(format!(
                "hard_ratio must lie in (0, 100], got {}",
                self.hard_ratio
            )));
        }
        Ok(())
    }
}

/// Value, feature gradient and mined negatives of a batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// `∂value/∂features`, one row per batch sample.
    pub grad: Array2<f64>,
    /// Hard negatives per sample; empty for variants that do not mine.
    pub hard_negatives: Vec<Vec<usize>>,
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("tau must be positive, got {tau}")))
    }
}

/// Logistic loss of one class: `log(1 + exp(-y·score/τ))`.
pub fn mcl_class_loss(score: f64, y: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(softplus(-y * score / tau))
}

/// Derivative of [`mcl_class_loss`] with respect to the score.
pub fn mcl_class_grad(score: f64, y: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(-y / tau * sigmoid(-y * score / tau))
}

/// Squared-error loss of one class: `(score - y)²`.
pub fn mmcl_class_loss(score: f64, y: f64) -> f64 {
    (score - y) * (score - y)
}

/// Derivative of `weight · (score - y)²` with respect to the score.
pub fn mmcl_class_grad(score: f64, y: f64, weight: f64) -> f64 {
    2.0 * weight * (score - y)
}

/// `max(1, ⌊(n - |P|)·r/100⌋)`.
pub fn hard_negative_count(n: usize, num_positives: usize, ratio: f64) -> Result<usize> {
    if num_positives >= n {
        return Err(Error::Degenerate(format!(
            "no negative classes left ({num_positives} positives out of {n})"
        )));
    }
    if !(ratio > 0.0 && ratio <= 100.0) {
        return Err(Error::config(format!("hard_ratio must lie in (0, 100], got {ratio}")));
    }
    let m = n - num_positives;
    let k = ((m as f64 * ratio) / 100.0).floor() as usize;
    Ok(k.clamp(1, m))
}

/// The highest-scoring non-positive classes, best first.
pub fn mine_hard_negatives(
    scores: ArrayView1<f64>,
    positives: &MultiLabel,
    ratio: f64,
) -> Result<Vec<usize>> {
    let n = scores.len();
    if positives.num_classes() != n {
        return Err(Error::config(format!(
            "label covers {} classes, scores cover {n}",
            positives.num_classes()
        )));
    }
    let k = hard_negative_count(n, positives.len(), ratio)?;
    let mut neg: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| !positives.contains(*j))
        .map(|(j, &s)| (j, s))
        .collect();
    if k < neg.len() {
        neg.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(a, b));
        neg.truncate(k);
    }
    neg.sort_unstable_by(|&a, &b| rank_cmp(a, b));
    Ok(neg.into_iter().map(|(j, _)| j).collect())
}

fn check_batch(features: ArrayView2<f64>, labels: &[MultiLabel], bank: &MemoryBank) -> Result<()> {
    if features.nrows() != labels.len() {
        return Err(Error::config(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if features.nrows() == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    if features.ncols() != bank.dim() {
        return Err(Error::config(format!(
            "feature dimension {} does not match memory dimension {}",
            features.ncols(),
            bank.dim()
        )));
    }
    for l in labels {
        if l.num_classes() != bank.len() {
            return Err(Error::config(format!(
                "label covers {} classes, memory holds {}",
                l.num_classes(),
                bank.len()
            )));
        }
        if l.is_empty() {
            return Err(Error::Precondition("empty positive set".into()));
        }
    }
    Ok(())
}

/// Adds `Σ_j coef[j]·M[j]` to `out`, skipping zero coefficients.
fn accumulate_rows(out: &mut ndarray::ArrayViewMut1<f64>, bank: &MemoryBank, coef: &[(usize, f64)]) {
    let rows = bank.rows();
    for &(j, c) in coef {
        if c != 0.0 {
            out.scaled_add(c, &rows.row(j));
        }
    }
}

/// Multi-label squared-error loss with hard negative mining.
pub fn mmcl_loss(
    features: ArrayView2<f64>,
    labels: &[MultiLabel],
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<LossReport> {
    check_batch(features, labels, bank)?;
    let b = features.nrows();
    let inv_b = 1.0 / b as f64;
    let mut grad = Array2::zeros(features.raw_dim());
    let mut value = 0.0;
    let mut mined = Vec::with_capacity(b);
    for (i, (f, label)) in features.rows().into_iter().zip(labels).enumerate() {
        let scores = bank.score_against(f)?;
        let negatives = mine_hard_negatives(scores.view(), label, cfg.hard_ratio)?;
        let wp = cfg.delta / label.len() as f64;
        let wn = 1.0 / negatives.len() as f64;
        let mut coef = Vec::with_capacity(label.len() + negatives.len());
        let mut li = 0.0;
        for &p in label.positives() {
            li += wp * mmcl_class_loss(scores[p], 1.0);
            coef.push((p, inv_b * mmcl_class_grad(scores[p], 1.0, wp)));
        }
        for &q in &negatives {
            li += wn * mmcl_class_loss(scores[q], -1.0);
            coef.push((q, inv_b * mmcl_class_grad(scores[q], -1.0, wn)));
        }
        value += li;
        accumulate_rows(&mut grad.row_mut(i), bank, &coef);
        mined.push(negatives);
    }
    Ok(LossReport {
        value: value * inv_b,
        grad,
        hard_negatives: mined,
    })
}

/// Logistic multi-label loss over all classes with temperature `tau`.
pub fn mcl_tau_loss(
    features: ArrayView2<f64>,
    labels: &[MultiLabel],
    bank: &MemoryBank,
    tau: f64,
) -> Result<LossReport> {
    check_tau(tau)?;
    check_batch(features, labels, bank)?;
    let b = features.nrows();
    let inv_b = 1.0 / b as f64;
    let mut grad = Array2::zeros(features.raw_dim());
    let mut value = 0.0;
    for (i, (f, label)) in features.rows().into_iter().zip(labels).enumerate() {
        let scores = bank.score_against(f)?;
        let mut coef = Vec::with_capacity(scores.len());
        for (j, &s) in scores.iter().enumerate() {
            let y = label.signed(j);
            value += softplus(-y * s / tau);
            coef.push((j, inv_b * (-y / tau) * sigmoid(-y * s / tau)));
        }
        accumulate_rows(&mut grad.row_mut(i), bank, &coef);
    }
    Ok(LossReport {
        value: value * inv_b,
        grad,
        hard_negatives: vec![Vec::new(); b],
    })
}

/// Temperature-scaled softmax cross-entropy over memory classes, averaged
/// over the positive classes of each sample.
pub fn mem_softmax_ce_loss(
    features: ArrayView2<f64>,
    labels: &[MultiLabel],
    bank: &MemoryBank,
    tau: f64,
) -> Result<LossReport> {
    check_tau(tau)?;
    check_batch(features, labels, bank)?;
    let b = features.nrows();
    let inv_b = 1.0 / b as f64;
    let mut grad = Array2::zeros(features.raw_dim());
    let mut value = 0.0;
    for (i, (f, label)) in features.rows().into_iter().zip(labels).enumerate() {
        let logits: Array1<f64> = bank.score_against(f)? / tau;
        let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        let q = 1.0 / label.len() as f64;
        value += lse - q * label.positives().iter().map(|&p| logits[p]).sum::<f64>();
        let coef: Vec<(usize, f64)> = logits
            .iter()
            .enumerate()
            .map(|(j, &z)| {
                let target = if label.contains(j) { q } else { 0.0 };
                (j, inv_b / tau * ((z - lse).exp() - target))
            })
            .collect();
        accumulate_rows(&mut grad.row_mut(i), bank, &coef);
    }
    Ok(LossReport {
        value: value * inv_b,
        grad,
        hard_negatives: vec![Vec::new(); b],
    })
}

/// Dispatches on `cfg.variant`. `Mcl` always uses a unit temperature.
pub fn compute_loss(
    features: ArrayView2<f64>,
    labels: &[MultiLabel],
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    match cfg.variant {
        LossVariant::Mcl => mcl_tau_loss(features, labels, bank, 1.0),
        LossVariant::MclTau => mcl_tau_loss(features, labels, bank, cfg.tau),
        LossVariant::Mmcl => mmcl_loss(features, labels, bank, cfg),
        LossVariant::MemSoftmaxCe => mem_softmax_ce_loss(features, labels, bank, cfg.tau),
    }
}

/// One curve of the single-class gradient analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepCurve {
    MclTau { tau: f64 },
    Mmcl { delta: f64 },
}

impl SweepCurve {
    pub fn variant(&self) -> &'static str {
        match self {
            SweepCurve::MclTau { .. } => "MCL-tau",
            SweepCurve::Mmcl { .. } => "MMCL",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            SweepCurve::MclTau { tau } => tau,
            SweepCurve::Mmcl { delta } => delta,
        }
    }

    /// Gradient magnitude for a positive class (`y = +1`) with a unit
    /// classifier row, so `|∂ℓ/∂f| = |∂ℓ/∂s|`.
    pub fn magnitude(&self, score: f64) -> Result<f64> {
        Ok(match *self {
            SweepCurve::MclTau { tau } => mcl_class_grad(score, 1.0, tau)?.abs(),
            SweepCurve::Mmcl { delta } => mmcl_class_grad(score, 1.0, delta).abs(),
        })
    }

    pub fn default_set() -> Vec<SweepCurve> {
        vec![
            SweepCurve::MclTau { tau: 1.0 },
            SweepCurve::MclTau { tau: 0.1 },
            SweepCurve::Mmcl { delta: 1.0 },
            SweepCurve::Mmcl { delta: 5.0 },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub variant: &'static str,
    pub param: f64,
    pub score: f64,
    pub grad_magnitude: f64,
}

/// Evenly spaced scores from `lo` to `hi` inclusive.
pub fn score_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || hi < lo {
        return Err(Error::config(format!("bad score grid [{lo}, {hi}] step {step}")));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|k| lo + k as f64 * step).collect())
}

pub fn gradient_sweep(curves: &[SweepCurve], scores: &[f64]) -> Result<Vec<SweepRow>> {
    if curves.is_empty() || scores.is_empty() {
        return Err(Error::config("gradient sweep needs at least one curve and one score"));
    }
    let mut rows = Vec::with_capacity(curves.len() * scores.len());
    for c in curves {
        for &s in scores {
            rows.push(SweepRow {
                variant: c.variant(),
                param: c.param(),
                score: s,
                grad_magnitude: c.magnitude(s)?,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("variant,param,score,grad_magnitude\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.4},{:.17e}", r.variant, r.param, r.score, r.grad_magnitude);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn mcl_class_values() {
        assert!((mcl_class_loss(0.0, 1.0, 0.3).unwrap() - LN2).abs() < 1e-15);
        assert!((mcl_class_loss(1.0, 1.0, 1.0).unwrap() - 0.313_261_687_518_222_8).abs() < 1e-12);
        let v = mcl_class_loss(1.0, 1.0, 0.1).unwrap();
        assert!((v - (-10f64).exp().ln_1p()).abs() < 1e-18);
        assert!((v - 4.54e-5).abs() < 1e-7);
        assert!(mcl_class_loss(0.0, 1.0, 0.0).is_err());
        // Would overflow with a naive exp.
        assert!((mcl_class_loss(-1.0, 1.0, 1e-3).unwrap() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn mmcl_class_values() {
        assert_eq!(mmcl_class_loss(1.0, 1.0), 0.0);
        assert_eq!(mmcl_class_loss(0.0, -1.0), 1.0);
        assert_eq!(mmcl_class_loss(-0.5, 1.0), 2.25);
    }

    #[test]
    fn negative_count_rule() {
        assert_eq!(hard_negative_count(200, 4, 1.0).unwrap(), 1);
        assert_eq!(hard_negative_count(256, 8, 1.0).unwrap(), 2);
        assert_eq!(hard_negative_count(10, 2, 100.0).unwrap(), 8);
        assert_eq!(hard_negative_count(10, 9, 1.0).unwrap(), 1);
        assert!(matches!(hard_negative_count(5, 5, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn mining_all_negatives() {
        let scores = array![0.3, -0.2, 0.9, 0.1, 0.1];
        let label = MultiLabel::new(2, vec![2, 4], 5).unwrap();
        assert_eq!(mine_hard_negatives(scores.view(), &label, 100.0).unwrap(), vec![0, 3, 1]);
        assert_eq!(mine_hard_negatives(scores.view(), &label, 1.0).unwrap(), vec![0]);
    }

    fn bank2() -> MemoryBank {
        MemoryBank::from_rows(array![[1.0, 0.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn mmcl_global_optimum() {
        let bank = MemoryBank::from_rows(array![[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let labels = vec![MultiLabel::singleton(0, 2).unwrap()];
        let r = mmcl_loss(array![[1.0, 0.0]].view(), &labels, &bank, &LossConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.grad, array![[0.0, 0.0]]);
        assert_eq!(r.hard_negatives, vec![vec![1]]);
    }

    #[test]
    fn mmcl_positive_term_at_zero_score() {
        // Score 0 on the positive class; the mined negative sits exactly at -1
        // so only the positive term contributes.
        let bank = MemoryBank::from_rows(array![[1.0, 0.0], [0.0, -1.0]]).unwrap();
        let f = array![[0.0, 1.0]];
        let labels = vec![MultiLabel::singleton(0, 2).unwrap()];
        let r = mmcl_loss(f.view(), &labels, &bank, &LossConfig::default()).unwrap();
        assert!((r.value - 5.0).abs() < 1e-15);
        assert_eq!(r.grad, array![[-10.0, 0.0]]);
    }

    #[test]
    fn mcl_gradient_at_zero_score() {
        let labels = vec![MultiLabel::singleton(0, 2).unwrap()];
        let f = array![[0.0, 1.0]];
        // class 0: score 0, y=+1; class 1: score 1, y=-1
        let r = mcl_tau_loss(f.view(), &labels, &bank2(), 1.0).unwrap();
        let c0 = -0.5;
        let c1 = sigmoid(1.0);
        assert!((r.grad[[0, 0]] - c0).abs() < 1e-15);
        assert!((r.grad[[0, 1]] - c1).abs() < 1e-15);
        let g = mcl_class_grad(0.9, 1.0, 1.0).unwrap().abs();
        assert!((g - 0.289_050_497_374_996).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_examples() {
        let labels = vec![MultiLabel::singleton(0, 2).unwrap()];
        let f = array![[std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2]];
        let r = mem_softmax_ce_loss(f.view(), &labels, &bank2(), 0.5).unwrap();
        assert!((r.value - LN2).abs() < 1e-12);
        let r = mem_softmax_ce_loss(array![[1.0, 0.0]].view(), &labels, &bank2(), 0.01).unwrap();
        assert!(r.value < 1e-40);
        assert!(mem_softmax_ce_loss(f.view(), &labels, &bank2(), 0.0).is_err());
    }

    #[test]
    fn sweep_values() {
        let five = SweepCurve::Mmcl { delta: 5.0 };
        assert!((five.magnitude(0.9).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(five.magnitude(-1.0).unwrap(), 20.0);
        let sharp = SweepCurve::MclTau { tau: 0.1 };
        assert!((sharp.magnitude(0.5).unwrap() - 0.066_928_509_242_848_55).abs() < 1e-12);
        let grid = score_grid(-1.0, 1.0, 0.01).unwrap();
        assert_eq!(grid.len(), 201);
        assert!((grid[200] - 1.0).abs() < 1e-12);
        let rows = gradient_sweep(&SweepCurve::default_set(), &grid).unwrap();
        assert_eq!(rows.len(), 4 * 201);
        let csv = sweep_to_csv(&rows);
        assert!(csv.starts_with("variant,param,score,grad_magnitude\nMCL-tau,1,-1.0000,"));
        assert!(gradient_sweep(&[], &grid).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = |f: fn(&mut LossConfig)| {
            let mut c = LossConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.tau = 0.0));
        assert!(bad(|c| c.tau = 1.5));
        assert!(bad(|c| c.delta = 0.5));
        assert!(bad(|c| c.hard_ratio = 0.0));
        assert!(bad(|c| c.hard_ratio = 101.0));
    }
}
