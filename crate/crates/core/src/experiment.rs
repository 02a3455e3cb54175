//! End-to-end runs on synthetic data: training plus the measurements that
//! need ground truth (label quality, retrieval on held-out identities).

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{generate, Dataset, SyntheticData};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RetrievalSplit, Summary};
use crate::labels::{mean_label_quality, LabelQuality, Predictor};
use crate::model::EmbeddingModel;
use crate::train::Trainer;

/// Independent seeds for each consumer of randomness in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub data: u64,
    pub model: u64,
    pub trainer: u64,
}

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            data: rng.next_u64(),
            model: rng.next_u64(),
            trainer: rng.next_u64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub label_precision: f64,
    pub label_recall: f64,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub mean_positives: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub predictor: String,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub epochs: Vec<EpochRecord>,
    pub curve: Vec<CurveRow>,
    /// Retrieval with the freshly initialized model.
    pub untrained: Summary,
    pub trained: Summary,
    /// Quality of MPLP and KNN labels on the final memory bank.
    pub final_mplp: LabelQuality,
    pub final_knn: LabelQuality,
    /// Set when training stopped early because predicted labels swallowed
    /// every class of some sample; metrics then describe the model as it
    /// stood at that point.
    pub collapse: Option<Collapse>,
    pub trainer: Trainer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collapse {
    pub epoch: usize,
    pub msg: String,
}

pub fn build_model(cfg: &ExperimentConfig, input_dim: usize, seed: u64) -> Result<EmbeddingModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = (cfg.model.hidden > 0).then_some(cfg.model.hidden);
    EmbeddingModel::random(input_dim, hidden, cfg.model.output_dim, &mut rng)
}

pub fn retrieval(model: &EmbeddingModel, test: &Dataset, per_identity: usize) -> Result<Summary> {
    let feats = model.forward_batch(test.observations().view())?;
    let split = RetrievalSplit::from_dataset(&feats, test, per_identity)?;
    Ok(evaluate(&split)?.summary())
}

pub fn synthetic_data(cfg: &ExperimentConfig) -> Result<SyntheticData> {
    generate(&cfg.data, RunSeeds::derive(cfg.seed).data)
}

/// Generates the configured data and trains on it.
pub fn run_synthetic(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run(cfg, &synthetic_data(cfg)?)
}

/// Trains on `data.train` (identities withheld from the trainer) and
/// measures label quality and test retrieval after every epoch.
pub fn run(cfg: &ExperimentConfig, data: &SyntheticData) -> Result<RunOutcome> {
    cfg.validate()?;
    let seeds = RunSeeds::derive(cfg.seed);
    let truth = data
        .train
        .identities()
        .ok_or_else(|| Error::config("training data needs identities for label-quality reporting"))?;
    let per_id = cfg.eval.queries_per_identity;
    let model = build_model(cfg, data.train.dim(), seeds.model)?;
    let untrained = retrieval(&model, &data.test, per_id)?;
    let mut trainer = Trainer::new(data.train.observations(), model, cfg.trainer_config(), seeds.trainer)?;

    let mplp = Predictor::Mplp {
        threshold: cfg.labels.threshold,
    };
    let knn = Predictor::Knn {
        k: cfg.eval.curve_knn_k,
    };
    let mut curve = Vec::new();
    let mut push_curve = |epoch: usize, trainer: &Trainer| -> Result<(LabelQuality, LabelQuality)> {
        let qm = mean_label_quality(&trainer.labels_for_epoch(&mplp, epoch)?, &truth)?;
        let qk = mean_label_quality(&trainer.labels_for_epoch(&knn, epoch)?, &truth)?;
        for (name, q) in [("mplp", qm), ("knn", qk)] {
            curve.push(CurveRow {
                epoch,
                predictor: name.into(),
                precision: q.precision,
                recall: q.recall,
            });
        }
        Ok((qm, qk))
    };

    let mut epochs = Vec::with_capacity(cfg.schedule.epochs);
    let mut collapse = None;
    while !trainer.is_finished() {
        push_curve(trainer.epoch(), &trainer)?;
        let st = match trainer.run_epoch() {
            Ok(st) => st,
            Err(Error::Degenerate(msg)) => {
                log::warn!("labels collapsed in epoch {}: {msg}", trainer.epoch());
                collapse = Some(Collapse {
                    epoch: trainer.epoch(),
                    msg,
                });
                break;
            }
            Err(e) => return Err(e),
        };
        let q = mean_label_quality(trainer.labels(), &truth)?;
        let s = retrieval(trainer.model(), &data.test, per_id)?;
        epochs.push(EpochRecord {
            epoch: st.epoch,
            loss: st.loss,
            label_precision: q.precision,
            label_recall: q.recall,
            rank1: s.rank1,
            map: s.map,
            mean_positives: st.mean_positives,
        });
    }
    let end = if collapse.is_some() { trainer.epoch() } else { cfg.schedule.epochs };
    let (final_mplp, final_knn) = push_curve(end, &trainer)?;
    let trained = retrieval(trainer.model(), &data.test, per_id)?;
    Ok(RunOutcome {
        epochs,
        curve,
        untrained,
        trained,
        final_mplp,
        final_knn,
        collapse,
        trainer,
    })
}

pub fn metrics_csv(rows: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,label_precision,label_recall,rank1,mAP,mean_positives\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.10e},{:.10},{:.10},{:.10},{:.10},{:.6}",
            r.epoch, r.loss, r.label_precision, r.label_recall, r.rank1, r.map, r.mean_positives
        );
    }
    out
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("epoch,predictor,precision,recall\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.10},{:.10}", r.epoch, r.predictor, r.precision, r.recall);
    }
    out
}

/// Hyper-parameters that [`sweep`] can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// MPLP similarity threshold.
    T,
    Delta,
    /// Hard negative percentage.
    R,
    /// KNN size (switches the predictor to KNN).
    K,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::T => "t",
            SweepParam::Delta => "delta",
            SweepParam::R => "r",
            SweepParam::K => "K",
        }
    }

    pub fn apply(&self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::T => cfg.labels.threshold = value,
            SweepParam::Delta => cfg.loss.delta = value,
            SweepParam::R => cfg.loss.hard_ratio = value,
            SweepParam::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::config(format!("K must be a positive integer, got {value}")));
                }
                cfg.labels.predictor = crate::config::PredictorKind::Knn;
                cfg.labels.knn_k = value as usize;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" => Ok(SweepParam::T),
            "delta" => Ok(SweepParam::Delta),
            "r" => Ok(SweepParam::R),
            "K" | "k" => Ok(SweepParam::K),
            other => Err(Error::config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Epoch at which labels collapsed, if they did.
    pub collapsed_at: Option<usize>,
}

/// One full training run per (value, seed) cell. Cells run in parallel and
/// come back in grid-major order.
pub fn sweep(param: SweepParam, grid: &[f64], base: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<SweepCell>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs a non-empty grid and seed list"));
    }
    let cells: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(value, seed)| {
            let mut cfg = param.apply(base, value)?;
            cfg.seed = seed;
            let out = run_synthetic(&cfg)?;
            Ok(SweepCell {
                param: param.name().into(),
                value,
                seed,
                rank1: out.trained.rank1,
                map: out.trained.map,
                collapsed_at: out.collapse.map(|c| c.epoch),
            })
        })
        .collect()
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("param,value,seed,rank1,mAP,collapsed_at\n");
    for c in cells {
        let at = c.collapsed_at.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{:.10},{:.10},{at}", c.param, c.value, c.seed, c.rank1, c.map);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SampleCounts, SyntheticSpec};

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data = SyntheticSpec {
            identities: 4,
            samples_per_identity: SampleCounts::Fixed(4),
            input_dim: 8,
            subspace_dim: None,
            cluster_spread: 0.05,
            max_center_similarity: 0.5,
            test_identities: 3,
            test_samples_per_identity: 3,
        };
        cfg.model.hidden = 8;
        cfg.model.output_dim = 6;
        cfg.schedule.epochs = 6;
        cfg.schedule.warmup_epochs = 2;
        cfg.schedule.batch_size = 8;
        cfg.eval.queries_per_identity = 1;
        cfg.eval.curve_knn_k = 4;
        cfg
    }

    #[test]
    fn curve_is_singleton_during_warmup() {
        let out = run_synthetic(&tiny()).unwrap();
        assert_eq!(out.epochs.len(), 6);
        for row in out.curve.iter().filter(|r| r.epoch < 2) {
            assert_eq!(row.precision, 1.0);
            assert!((row.recall - 0.25).abs() < 1e-15);
        }
        for r in out.epochs.iter().take(2) {
            assert_eq!((r.label_precision, r.label_recall), (1.0, 0.25));
        }
        assert_eq!(out.curve.len(), 2 * 7);
        assert!(metrics_csv(&out.epochs).starts_with("epoch,loss,label_precision,label_recall,rank1,mAP,mean_positives\n0,"));
    }

    #[test]
    fn sweep_shape() {
        let cells = sweep(SweepParam::Delta, &[1.0, 5.0], &tiny(), &[1, 2]).unwrap();
        let keys: Vec<(f64, u64)> = cells.iter().map(|c| (c.value, c.seed)).collect();
        assert_eq!(keys, vec![(1.0, 1), (1.0, 2), (5.0, 1), (5.0, 2)]);
        assert!(sweep(SweepParam::T, &[], &tiny(), &[1]).is_err());
        assert!(SweepParam::K.apply(&tiny(), 2.5).is_err());
    }
}
