//! Dataset splitting, the training loop and accuracy metrics.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamscan::{half_scan_map, BeamScanMap, Dataset, LabelScale, Sample, Split, Stage};
use crate::channel::Link;
use crate::codebook::{Codebook, CodebookSpec, Frame};
use crate::error::{config, domain, shape, Error, Result};
use crate::geometry::{FieldRegion, PolarCoord};
use crate::nn::layers::position_loss;
use crate::nn::{adam_step, AdamState, CoarseNet, MapInput, ModelConfig, PositionDetector, Regressor};

/// Tags every sample train/val/test, separately within each SNR bucket.
///
/// Each bucket of `n` samples gets `floor(n * val)` validation and
/// `floor(n * test)` test samples after a seeded shuffle; the rest train.
pub fn split_dataset(ds: &mut Dataset, seed: u64) -> Result<()> {
    let mut snrs: Vec<f64> = ds.samples.iter().map(|s| s.map.snr_db).collect();
    snrs.sort_by(f64::total_cmp);
    snrs.dedup();
    for (k, snr) in snrs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..ds.samples.len()).filter(|&i| ds.samples[i].map.snr_db == *snr).collect();
        if idx.len() < 10 {
            return Err(config(format!("SNR bucket {snr} dB has {} samples, need at least 10", idx.len())));
        }
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64)));
        let n = idx.len() as f64;
        let n_val = (n * ds.spec.val_fraction).floor() as usize;
        let n_test = (n * ds.spec.test_fraction).floor() as usize;
        for (j, &i) in idx.iter().enumerate() {
            ds.samples[i].split = Some(if j < n_test {
                Split::Test
            } else if j < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            });
        }
    }
    Ok(())
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    /// The rate halves every this many epochs.
    pub lr_halving_period: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub stage: Stage,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { learning_rate: 0.001, lr_halving_period: 50, batch_size: 32, epochs: 100, seed: 0, stage: Stage::Fine }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(config(format!("train.lr must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(config("train.batch must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(config("train.epochs must be at least 1"));
        }
        if self.lr_halving_period == 0 {
            return Err(config("train.lr_halving must be at least 1"));
        }
        Ok(())
    }

    /// Rate used during (0-based) `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// Not written to the CSV, which stays reproducible.
    pub wall_time: Duration,
}

impl TrainRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,val_loss,val_accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.lr, e.train_loss, e.val_loss, e.val_accuracy));
        }
        out
    }
}

/// One network input with its regression target and scoring labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub target: [f64; 2],
    /// Best cell of the noiseless fine map.
    pub oracle: (usize, usize),
    pub truth: PolarCoord,
}

impl Example {
    pub fn input(&self) -> MapInput<'_> {
        MapInput { values: &self.values, valid: &self.valid }
    }
}

fn detector_view(map: &BeamScanMap, half: bool) -> BeamScanMap {
    if half {
        half_scan_map(map).normalized()
    } else if map.normalized {
        map.clone()
    } else {
        map.clone().normalized()
    }
}

/// Fine-map examples of one split, optionally restricted to one SNR and
/// optionally reduced to the half map.
pub fn fine_examples(ds: &Dataset, split: Split, snr_db: Option<f64>, half: bool) -> Vec<Example> {
    ds.split(split)
        .filter(|s| snr_db.is_none_or(|snr| s.map.snr_db == snr))
        .map(|s| {
            let view = detector_view(&s.map, half);
            Example { values: view.powers, valid: view.valid, target: s.label, oracle: s.oracle, truth: s.map.truth }
        })
        .collect()
}

/// Coarse 2x2 examples of one split.
pub fn coarse_examples(ds: &Dataset, split: Split, snr_db: Option<f64>) -> Result<Vec<Example>> {
    ds.split(split)
        .filter(|s| snr_db.is_none_or(|snr| s.map.snr_db == snr))
        .map(|s| {
            let c = s.coarse.ok_or_else(|| config("dataset has no coarse maps"))?;
            Ok(Example { values: c.to_vec(), valid: vec![true; 4], target: s.label, oracle: s.oracle, truth: s.map.truth })
        })
        .collect()
}

fn annotate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { layer, detail } => {
            Error::NonFinite { layer, detail: format!("{detail} (epoch {epoch}, batch {batch})") }
        }
        other => other,
    }
}

/// Eval-mode loss and predictions over `set`.
pub fn evaluate<R: Regressor + ?Sized>(net: &R, set: &[Example]) -> Result<(f64, Vec<[f64; 2]>)> {
    let mut preds = Vec::with_capacity(set.len());
    let mut total = 0.0;
    for chunk in set.chunks(64) {
        let inputs: Vec<MapInput<'_>> = chunk.iter().map(Example::input).collect();
        let targets: Vec<[f64; 2]> = chunk.iter().map(|e| e.target).collect();
        let p = net.predict(&inputs)?;
        total += position_loss(&p, &targets)? * chunk.len() as f64;
        preds.extend(p);
    }
    Ok((total / set.len() as f64, preds))
}

/// Mini-batch Adam over `train` with a per-epoch shuffle and the halving
/// schedule. `score` turns validation predictions into an accuracy.
pub fn fit<R: Regressor + ?Sized>(
    net: &mut R,
    train: &[Example],
    val: &[Example],
    tc: &TrainingConfig,
    score: &dyn Fn(&[[f64; 2]], &[Example]) -> f64,
) -> Result<TrainRecord> {
    tc.validate()?;
    if train.is_empty() {
        return Err(domain("training split is empty"));
    }
    let start = Instant::now();
    let mut adam = AdamState::new(net.weights(), tc.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut record = TrainRecord::default();
    for epoch in 0..tc.epochs {
        adam.lr = tc.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let inputs: Vec<MapInput<'_>> = chunk.iter().map(|&i| train[i].input()).collect();
            let targets: Vec<[f64; 2]> = chunk.iter().map(|&i| train[i].target).collect();
            let (loss, grads) = net.train_step_grads(&inputs, &targets).map_err(|e| annotate(e, epoch, b))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { layer: "loss".into(), detail: format!("{loss} (epoch {epoch}, batch {b})") });
            }
            adam_step(net.weights_mut(), &grads, &mut adam)?;
            total += loss * chunk.len() as f64;
        }
        let (val_loss, val_accuracy) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (loss, preds) = evaluate(net, val)?;
            (loss, score(&preds, val))
        };
        record.epochs.push(EpochRecord {
            epoch,
            lr: adam.lr,
            train_loss: total / train.len() as f64,
            val_loss,
            val_accuracy,
        });
    }
    record.wall_time = start.elapsed();
    Ok(record)
}

/// Fraction of predictions whose nearest cell is the example's oracle cell.
pub fn cell_agreement(preds: &[[f64; 2]], set: &[Example], labels: &LabelScale, grid: &Codebook) -> f64 {
    let hits = preds
        .iter()
        .zip(set)
        .filter(|(p, e)| position_to_cell(labels.denormalize(**p), grid) == e.oracle)
        .count();
    hits as f64 / set.len().max(1) as f64
}

/// Trains a position detector on the fine maps of `ds`.
pub fn train_detector(
    ds: &Dataset,
    model: &ModelConfig,
    tc: &TrainingConfig,
    snr_db: Option<f64>,
    half: bool,
) -> Result<(PositionDetector, TrainRecord)> {
    let train = fine_examples(ds, Split::Train, snr_db, half);
    let val = fine_examples(ds, Split::Val, snr_db, half);
    let mut net = PositionDetector::new(model.clone(), tc.seed)?;
    let grid = grid_of(&ds.codebook);
    let labels = ds.labels;
    let record = fit(&mut net, &train, &val, tc, &|p, set| cell_agreement(p, set, &labels, &grid))?;
    Ok((net, record))
}

/// Trains the stage-1 regressor on the coarse maps of `ds`.
pub fn train_coarse(
    ds: &Dataset,
    hidden: usize,
    tc: &TrainingConfig,
    snr_db: Option<f64>,
    rayleigh: f64,
) -> Result<(CoarseNet, TrainRecord)> {
    let train = coarse_examples(ds, Split::Train, snr_db)?;
    let val = coarse_examples(ds, Split::Val, snr_db)?;
    let mut net = CoarseNet::new(hidden, tc.seed)?;
    let labels = ds.labels;
    let record = fit(&mut net, &train, &val, tc, &|preds, set| {
        let hits = preds
            .iter()
            .zip(set)
            .filter(|(p, e)| region_of(labels.denormalize(**p).r, rayleigh) == region_of(e.truth.r, rayleigh))
            .count();
        hits as f64 / set.len().max(1) as f64
    })?;
    Ok((net, record))
}

/// An empty codebook carrying only the grid of `spec`.
pub fn grid_of(spec: &CodebookSpec) -> Codebook {
    Codebook { l: spec.l, s: spec.s, frame: Frame::Bs, d_ref: spec.d_ref, cells: Vec::new() }
}

/// Eval-mode position estimate for `map` in the BS frame.
pub fn predict_position(map: &BeamScanMap, net: &PositionDetector, labels: &LabelScale) -> Result<PolarCoord> {
    let cfg = &net.config;
    if map.l != cfg.input_h || map.s != cfg.input_w {
        return Err(shape(format!("{}x{} map for a {}x{} model", map.l, map.s, cfg.input_h, cfg.input_w)));
    }
    let pred = net.predict(&[MapInput { values: &map.powers, valid: &map.valid }])?;
    Ok(labels.denormalize(pred[0]))
}

fn nearest(values: impl Iterator<Item = f64>, x: f64) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        let d = (v - x).abs();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Nearest grid cell, independently along `sin(theta)` and `r`; ties go
/// to the lower index.
pub fn position_to_cell(p: PolarCoord, cb: &Codebook) -> (usize, usize) {
    let (l, s) = (cb.l as f64, cb.s as f64);
    let li = nearest((1..=cb.l).map(|i| (2.0 * i as f64 - l - 1.0) / l), p.theta.sin());
    let si = nearest((1..=cb.s).map(|j| cb.d_ref * j as f64 / s), p.r);
    (li, si)
}

fn region_of(r: f64, rayleigh: f64) -> FieldRegion {
    if r <= rayleigh / 10.0 {
        FieldRegion::Bfr
    } else {
        FieldRegion::Nbfr
    }
}

/// Stage-1 decision from a normalised 2x2 coarse map: BFR when the
/// predicted range is at most a tenth of the BS Rayleigh distance.
pub fn stage1_classify(coarse: &[f64; 4], net: &CoarseNet, labels: &LabelScale, rayleigh: f64) -> Result<FieldRegion> {
    let valid = [true; 4];
    let pred = net.predict(&[MapInput { values: coarse, valid: &valid }])?;
    Ok(region_of(labels.denormalize(pred[0]).r, rayleigh))
}

/// Anything that estimates a device position from a fine scan map.
pub trait Locator: Sync {
    fn locate(&self, map: &BeamScanMap) -> Result<PolarCoord>;
}

/// A trained detector, fed either full or half maps.
pub struct DetectorLocator<'a> {
    pub net: &'a PositionDetector,
    pub labels: LabelScale,
    pub half: bool,
}

impl Locator for DetectorLocator<'_> {
    fn locate(&self, map: &BeamScanMap) -> Result<PolarCoord> {
        predict_position(&detector_view(map, self.half), self.net, &self.labels)
    }
}

/// Reads the ground truth; the ceiling of any locator.
pub struct TruthLocator;

impl Locator for TruthLocator {
    fn locate(&self, map: &BeamScanMap) -> Result<PolarCoord> {
        Ok(map.truth)
    }
}

/// Stage-1 classifier with what it needs to decide.
pub struct Stage1<'a> {
    pub net: &'a CoarseNet,
    pub labels: LabelScale,
    pub rayleigh: f64,
}

/// Fraction of samples whose selected cell equals the noiseless oracle.
///
/// With a stage-1 classifier, a sample whose region decision picks the
/// wrong link counts as a miss.
pub fn beam_accuracy(samples: &[&Sample], locator: &dyn Locator, stage1: Option<&Stage1<'_>>, grid: &Codebook) -> Result<f64> {
    if samples.is_empty() {
        return Err(domain("cannot score an empty split"));
    }
    let hits = samples
        .par_iter()
        .map(|s| {
            if let Some(st) = stage1 {
                let coarse = s.coarse.ok_or_else(|| config("sample has no coarse map"))?;
                let region = stage1_classify(&coarse, st.net, &st.labels, st.rayleigh)?;
                if Link::for_region(region) != s.map.link {
                    return Ok(false);
                }
            }
            Ok(position_to_cell(locator.locate(&s.map)?, grid) == s.oracle)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / samples.len() as f64)
}
