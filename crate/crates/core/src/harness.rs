//! Presets, `key = value` configuration, artifact handling and the
//! experiments behind the CSV reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::beamscan::{
    aggregate_interference, beam_gain, focal_depth_3db, focus_beam, generate_dataset, interference_power, read_dataset,
    write_dataset, achievable_rate, Dataset, DatasetSpec, RadialSweep, Sample, Split, Stage,
};
use crate::channel::{gen_scene, path_loss, sigma_from_reference, GainModel, Link, SimConfig};
use crate::codebook::{build_fine_codebook, codebook_to_ris_frame, export_codebook, CodebookSpec};
use crate::error::{config, Error, Result};
use crate::geometry::{ApertureRule, FieldRegion, PolarCoord};
use crate::nn::{flops_estimate, load_weights, save_weights, CoarseNet, ModelConfig, PositionDetector, Regressor};
use crate::training::{
    beam_accuracy, grid_of, stage1_classify, train_coarse, train_detector, DetectorLocator, Stage1, TrainRecord,
    TrainingConfig, TruthLocator,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(config(format!("unknown scale `{other}` (expected desk or paper)"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Focal,
    Interference,
    Rate,
    Density,
    Accuracy,
    Halfmap,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Focal,
        Experiment::Interference,
        Experiment::Rate,
        Experiment::Density,
        Experiment::Accuracy,
        Experiment::Halfmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Focal => "focal",
            Experiment::Interference => "interference",
            Experiment::Rate => "rate",
            Experiment::Density => "density",
            Experiment::Accuracy => "accuracy",
            Experiment::Halfmap => "halfmap",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| config(format!("unknown experiment `{s}`")))
    }
}

const DESK: &[(&str, &str)] = &[
    ("codebook.L", "32"),
    ("codebook.S", "32"),
    ("codebook.beta", "1"),
    ("codebook.d_ref", "100"),
    ("data.coarse_per_snr", "100"),
    ("data.per_snr", "800"),
    ("data.snr", "-10, 0, 10, 20"),
    ("data.test", "0.2"),
    ("data.val", "0.1"),
    ("density.counts", "10, 20, 30, 40, 50"),
    ("density.trials", "100"),
    ("focal.factor", "4"),
    ("focal.n", "16, 64, 256"),
    ("focal.points", "4001"),
    ("focal.probe", "0.3"),
    ("interference.serving", "10@0"),
    ("interference.snr", "-10, 0, 10, 20"),
    ("interference.trials", "100"),
    ("interference.victims", "5@-30, 15@30, 25@22.5"),
    ("model.attn_blocks", "3"),
    ("model.conv_blocks", "2"),
    ("model.conv_channels", "16"),
    ("model.d_model", "32"),
    ("model.dense", "64"),
    ("model.ffn", "64"),
    ("model.heads", "4"),
    ("rate.snr", "-10, 0, 10, 20"),
    ("rate.trials", "100"),
    ("run.auto", "true"),
    ("run.seed", "1"),
    ("sim.M", "256"),
    ("sim.N", "64"),
    ("sim.bs_aperture", "linear"),
    ("sim.fc", "60e9"),
    ("sim.los_var", "1"),
    ("sim.nlos_var", "0.001"),
    ("sim.noise_ref_r", "10"),
    ("sim.paths", "4"),
    ("sim.pt", "1"),
    ("sim.r_max", "100"),
    ("sim.r_min", "3"),
    ("sim.ris_aperture", "linear"),
    ("sim.ris_r", "8"),
    ("sim.ris_theta_deg", "45"),
    ("sim.spacing", "0.5"),
    ("sim.theta_max_deg", "60"),
    ("train.batch", "32"),
    ("train.coarse_epochs", "60"),
    ("train.coarse_hidden", "16"),
    ("train.epochs", "60"),
    ("train.lr", "0.001"),
    ("train.lr_halving", "50"),
];

const PAPER: &[(&str, &str)] = &[
    ("codebook.L", "100"),
    ("codebook.S", "100"),
    ("data.per_snr", "1000"),
    ("data.snr", "-10, -5, 0, 5, 10, 15, 20"),
    ("focal.n", "64, 256, 1024"),
    ("interference.snr", "-10, -5, 0, 5, 10, 15, 20"),
    ("model.conv_blocks", "3"),
    ("model.conv_channels", "64"),
    ("model.d_model", "64"),
    ("model.dense", "128"),
    ("model.ffn", "128"),
    ("rate.snr", "-10, -5, 0, 5, 10, 15, 20"),
    ("sim.M", "1024"),
    ("sim.N", "256"),
    ("sim.noise_ref_r", "50"),
    ("sim.ris_r", "40"),
    ("train.coarse_epochs", "100"),
    ("train.epochs", "100"),
];

/// Fully resolved `key = value` settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn preset(scale: Scale) -> Self {
        let mut values: BTreeMap<String, String> =
            DESK.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if scale == Scale::Paper {
            for (k, v) in PAPER {
                values.insert(k.to_string(), v.to_string());
            }
        }
        Self { values }
    }

    /// Overrides one known key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(key.trim(), value).map_err(|e| config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` command-line override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| config(format!("unknown key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| config(format!("`{key}`: cannot parse `{raw}`")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.raw(key)?;
        raw.split(',')
            .map(|p| p.trim().parse().map_err(|_| config(format!("`{key}`: cannot parse `{}`", p.trim()))))
            .collect()
    }

    /// `r@degrees` pairs.
    pub fn positions(&self, key: &str) -> Result<Vec<PolarCoord>> {
        let raw = self.raw(key)?;
        raw.split(',')
            .map(|p| {
                let bad = || config(format!("`{key}`: expected r@degrees, got `{}`", p.trim()));
                let (r, deg) = p.trim().split_once('@').ok_or_else(bad)?;
                let r: f64 = r.trim().parse().map_err(|_| bad())?;
                let deg: f64 = deg.trim().parse().map_err(|_| bad())?;
                PolarCoord::new(r, deg.to_radians()).map_err(|_| bad())
            })
            .collect()
    }

    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Digest of every key.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Digest of the keys that shape datasets and trained weights.
    pub fn training_digest(&self) -> [u8; 32] {
        let text: String = self
            .values
            .iter()
            .filter(|(k, _)| ["sim.", "codebook.", "data.", "model.", "train.", "run.seed"].iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        Sha256::digest(text.as_bytes()).into()
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}

/// A deterministic sub-seed for one named purpose.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let h = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(tag.as_bytes()).finalize();
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocalSettings {
    /// Probe distance as a fraction of the BS Rayleigh distance.
    pub probe: f64,
    pub factor: f64,
    pub points: usize,
    pub bs_elements: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceSettings {
    pub trials: usize,
    pub snr_list: Vec<f64>,
    pub serving: PolarCoord,
    pub victims: Vec<PolarCoord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensitySettings {
    pub counts: Vec<usize>,
    pub trials: usize,
}

/// Everything one invocation needs, resolved from [`Settings`].
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scale: Scale,
    pub seed: u64,
    pub out: PathBuf,
    pub auto_generate: bool,
    pub sim: SimConfig,
    pub codebook: CodebookSpec,
    pub model: ModelConfig,
    pub train: TrainingConfig,
    pub coarse_train: TrainingConfig,
    pub coarse_hidden: usize,
    pub data: DatasetSpec,
    pub coarse_data: DatasetSpec,
    pub focal: FocalSettings,
    pub interference: InterferenceSettings,
    pub rate_snr: Vec<f64>,
    pub rate_trials: usize,
    pub density: DensitySettings,
    /// Distance at which a BS-focused line-of-sight beam defines the SNR.
    pub noise_ref_r: f64,
    pub settings: Settings,
}

impl RunConfig {
    pub fn from_settings(scale: Scale, settings: Settings, out: PathBuf) -> Result<Self> {
        let s = &settings;
        let seed: u64 = s.get("run.seed")?;
        let theta_max = s.get::<f64>("sim.theta_max_deg")?.to_radians();
        let sim = SimConfig {
            bs_elements: s.get("sim.N")?,
            ris_elements: s.get("sim.M")?,
            carrier_hz: s.get("sim.fc")?,
            tx_power: s.get("sim.pt")?,
            spacing_wavelengths: s.get("sim.spacing")?,
            ris_position: PolarCoord::new(s.get("sim.ris_r")?, s.get::<f64>("sim.ris_theta_deg")?.to_radians())
                .map_err(|e| config(format!("sim.ris_r / sim.ris_theta_deg: {e}")))?,
            paths: s.get("sim.paths")?,
            los_gain: GainModel::Rayleigh { variance: s.get("sim.los_var")? },
            nlos_variance: s.get("sim.nlos_var")?,
            bs_aperture_rule: s.get::<ApertureRule>("sim.bs_aperture")?,
            ris_aperture_rule: s.get::<ApertureRule>("sim.ris_aperture")?,
            r_range: (s.get("sim.r_min")?, s.get("sim.r_max")?),
            theta_range: (-theta_max, theta_max),
        };
        sim.validate()?;
        let codebook = CodebookSpec {
            l: s.get("codebook.L")?,
            s: s.get("codebook.S")?,
            beta_delta: s.get("codebook.beta")?,
            r_min: sim.r_range.0,
            r_max: sim.r_range.1,
            d_ref: s.get("codebook.d_ref")?,
        };
        codebook.validate()?;
        let model = ModelConfig {
            input_h: codebook.l,
            input_w: codebook.s,
            conv_channels: s.get("model.conv_channels")?,
            conv_blocks: s.get("model.conv_blocks")?,
            d_model: s.get("model.d_model")?,
            heads: s.get("model.heads")?,
            ffn_hidden: s.get("model.ffn")?,
            dense_hidden: s.get("model.dense")?,
            attn_blocks: s.get("model.attn_blocks")?,
        };
        model.validate()?;
        let train = TrainingConfig {
            learning_rate: s.get("train.lr")?,
            lr_halving_period: s.get("train.lr_halving")?,
            batch_size: s.get("train.batch")?,
            epochs: s.get("train.epochs")?,
            seed,
            stage: Stage::Fine,
        };
        train.validate()?;
        let coarse_train = TrainingConfig { epochs: s.get("train.coarse_epochs")?, stage: Stage::Coarse, ..train.clone() };
        coarse_train.validate()?;
        let snr_list: Vec<f64> = s.list("data.snr")?;
        let data = DatasetSpec {
            stage: Stage::Fine,
            snr_list: snr_list.clone(),
            per_snr: s.get("data.per_snr")?,
            base_seed: derive_seed(seed, "dataset/fine"),
            val_fraction: s.get("data.val")?,
            test_fraction: s.get("data.test")?,
        };
        if !(data.val_fraction >= 0.0 && data.test_fraction >= 0.0 && data.val_fraction + data.test_fraction < 1.0) {
            return Err(config("data.val and data.test must be non-negative and leave room for training"));
        }
        let coarse_data = DatasetSpec {
            stage: Stage::Coarse,
            per_snr: s.get("data.coarse_per_snr")?,
            base_seed: derive_seed(seed, "dataset/coarse"),
            ..data.clone()
        };
        let focal = FocalSettings {
            probe: s.get("focal.probe")?,
            factor: s.get("focal.factor")?,
            points: s.get("focal.points")?,
            bs_elements: s.list("focal.n")?,
        };
        let serving = s.positions("interference.serving")?;
        if serving.len() != 1 {
            return Err(config("`interference.serving` must hold exactly one position"));
        }
        let interference = InterferenceSettings {
            trials: s.get("interference.trials")?,
            snr_list: s.list("interference.snr")?,
            serving: serving[0],
            victims: s.positions("interference.victims")?,
        };
        let density = DensitySettings { counts: s.list("density.counts")?, trials: s.get("density.trials")? };
        let noise_ref_r: f64 = s.get("sim.noise_ref_r")?;
        if !(noise_ref_r > 0.0) {
            return Err(config("`sim.noise_ref_r` must be positive"));
        }
        Ok(Self {
            scale,
            seed,
            out,
            auto_generate: s.get("run.auto")?,
            sim,
            codebook,
            model,
            train,
            coarse_train,
            coarse_hidden: s.get("train.coarse_hidden")?,
            data,
            coarse_data,
            focal,
            interference,
            rate_snr: s.list("rate.snr")?,
            rate_trials: s.get("rate.trials")?,
            density,
            noise_ref_r,
            settings,
        })
    }

    /// Preset, then config file, then overrides, then `--seed`.
    pub fn resolve(
        scale: Scale,
        config_file: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
        out: PathBuf,
    ) -> Result<Self> {
        let mut settings = Settings::preset(scale);
        if let Some(path) = config_file {
            settings.apply_file(path)?;
        }
        for o in overrides {
            settings.apply_override(o)?;
        }
        if let Some(seed) = seed {
            settings.set("run.seed", &seed.to_string())?;
        }
        Self::from_settings(scale, settings, out)
    }

    pub fn digest(&self) -> String {
        self.settings.digest()
    }

    fn dataset_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(match stage {
            Stage::Fine => "dataset",
            Stage::Coarse => "dataset_coarse",
        })
    }

    fn model_path(&self, kind: ModelKind, snr: f64) -> PathBuf {
        self.out.join("models").join(format!("{}_snr{snr}.nfwt", kind.name()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Detector,
    HalfDetector,
    Coarse,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Detector => "detector",
            ModelKind::HalfDetector => "detector_half",
            ModelKind::Coarse => "coarse",
        }
    }
}

/// One experiment's rows plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub id: String,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    pub summary: Vec<String>,
    pub config_digest: String,
    pub seed: u64,
}

impl ExperimentReport {
    fn new(id: &str, columns: Vec<&'static str>, cfg: &RunConfig) -> Self {
        Self { id: id.into(), columns, rows: Vec::new(), summary: Vec::new(), config_digest: cfg.digest(), seed: cfg.seed }
    }

    fn provenance(&self) -> String {
        format!(
            "nearfocus {} report v1 config={} seed={} version={}",
            self.id,
            self.config_digest,
            self.seed,
            env!("CARGO_PKG_VERSION")
        )
    }

    pub fn csv(&self) -> String {
        let mut out = format!("# {}\n{}\n", self.provenance(), self.columns.join(","));
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn text(&self) -> String {
        let mut out = format!("{}\n\n", self.provenance());
        for line in &self.summary {
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    /// Writes `report_<id>.csv` and `report_<id>.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("report_{}.csv", self.id)), self.csv())?;
        std::fs::write(dir.join(format!("report_{}.txt", self.id)), self.text())?;
        Ok(())
    }

    /// Column `name` of every row parsed as numbers.
    pub fn column(&self, name: &str) -> Vec<f64> {
        let Some(i) = self.columns.iter().position(|c| *c == name) else { return Vec::new() };
        self.rows.iter().filter_map(|r| r[i].parse().ok()).collect()
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

// ---- artifacts -------------------------------------------------------------

/// Generates both datasets and writes them under the output directory.
pub fn gen_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let fine = generate_dataset(&cfg.sim, &cfg.codebook, &cfg.data)?;
    write_dataset(&fine, &cfg.dataset_dir(Stage::Fine))?;
    let coarse = generate_dataset(&cfg.sim, &cfg.codebook, &cfg.coarse_data)?;
    write_dataset(&coarse, &cfg.dataset_dir(Stage::Coarse))?;
    Ok((fine, coarse))
}

/// Loads the dataset of `stage`, generating it when allowed.
pub fn ensure_dataset(cfg: &RunConfig, stage: Stage) -> Result<Dataset> {
    let dir = cfg.dataset_dir(stage);
    let spec = match stage {
        Stage::Fine => &cfg.data,
        Stage::Coarse => &cfg.coarse_data,
    };
    match read_dataset(&dir) {
        Ok(ds) => {
            if ds.sim != cfg.sim || ds.codebook != cfg.codebook || &ds.spec != spec {
                return Err(Error::Format {
                    path: dir,
                    detail: "dataset was generated with a different configuration; remove it or use another --out".into(),
                });
            }
            Ok(ds)
        }
        Err(Error::MissingArtifact { .. }) if cfg.auto_generate => {
            let ds = generate_dataset(&cfg.sim, &cfg.codebook, spec)?;
            write_dataset(&ds, &dir)?;
            Ok(ds)
        }
        Err(e) => Err(e),
    }
}

fn train_seed(cfg: &RunConfig, kind: &str, snr: f64) -> u64 {
    derive_seed(cfg.seed, &format!("train/{kind}/{snr}"))
}

fn write_record(cfg: &RunConfig, kind: ModelKind, snr: f64, record: &TrainRecord) -> Result<()> {
    let dir = cfg.out.join("models");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("train_{}_snr{snr}.csv", kind.name())), record.to_csv())?;
    Ok(())
}

/// Trains and saves the detector of one SNR.
pub fn train_detector_at(cfg: &RunConfig, ds: &Dataset, snr: f64, half: bool) -> Result<(PositionDetector, TrainRecord)> {
    // full and half models share seeds so they differ only in their input
    let tc = TrainingConfig { seed: train_seed(cfg, "detector", snr), ..cfg.train.clone() };
    let (net, record) = train_detector(ds, &cfg.model, &tc, Some(snr), half)?;
    let kind = if half { ModelKind::HalfDetector } else { ModelKind::Detector };
    save_weights(&cfg.model_path(kind, snr), &net.weights, &cfg.settings.training_digest())?;
    write_record(cfg, kind, snr, &record)?;
    Ok((net, record))
}

/// Trains and saves the stage-1 network of one SNR.
pub fn train_coarse_at(cfg: &RunConfig, ds: &Dataset, snr: f64) -> Result<(CoarseNet, TrainRecord)> {
    let tc = TrainingConfig { seed: train_seed(cfg, "coarse", snr), ..cfg.coarse_train.clone() };
    let (net, record) = train_coarse(ds, cfg.coarse_hidden, &tc, Some(snr), cfg.sim.bs_rayleigh()?)?;
    save_weights(&cfg.model_path(ModelKind::Coarse, snr), &net.weights, &cfg.settings.training_digest())?;
    write_record(cfg, ModelKind::Coarse, snr, &record)?;
    Ok((net, record))
}

fn load_or<R: Regressor>(
    cfg: &RunConfig,
    kind: ModelKind,
    snr: f64,
    mut blank: R,
    train: impl FnOnce() -> Result<R>,
) -> Result<R> {
    let path = cfg.model_path(kind, snr);
    match load_weights(&path, blank.weights_mut(), &cfg.settings.training_digest()) {
        Ok(()) => Ok(blank),
        Err(Error::MissingArtifact { .. }) if cfg.auto_generate => train(),
        Err(Error::MissingArtifact { path, .. }) => {
            Err(Error::MissingArtifact { path, hint: "run `nearfocus train` first or set run.auto = true".into() })
        }
        Err(e) => Err(e),
    }
}

pub fn ensure_detector(cfg: &RunConfig, ds: &Dataset, snr: f64, half: bool) -> Result<PositionDetector> {
    let kind = if half { ModelKind::HalfDetector } else { ModelKind::Detector };
    let blank = PositionDetector::new(cfg.model.clone(), 0)?;
    load_or(cfg, kind, snr, blank, || Ok(train_detector_at(cfg, ds, snr, half)?.0))
}

pub fn ensure_coarse(cfg: &RunConfig, snr: f64) -> Result<CoarseNet> {
    let blank = CoarseNet::new(cfg.coarse_hidden, 0)?;
    load_or(cfg, ModelKind::Coarse, snr, blank, || {
        let ds = ensure_dataset(cfg, Stage::Coarse)?;
        Ok(train_coarse_at(cfg, &ds, snr)?.0)
    })
}

/// Trains every model the accuracy experiments use.
pub fn train_all(cfg: &RunConfig, half: bool) -> Result<Vec<(String, TrainRecord)>> {
    let fine = ensure_dataset(cfg, Stage::Fine)?;
    let coarse = ensure_dataset(cfg, Stage::Coarse)?;
    let mut records = Vec::new();
    for &snr in &cfg.data.snr_list {
        records.push((format!("coarse@{snr}"), train_coarse_at(cfg, &coarse, snr)?.1));
        records.push((format!("detector@{snr}"), train_detector_at(cfg, &fine, snr, false)?.1));
        if half {
            records.push((format!("detector_half@{snr}"), train_detector_at(cfg, &fine, snr, true)?.1));
        }
    }
    Ok(records)
}

/// Writes the BS-frame and RIS-frame fine codebooks.
pub fn export_codebooks(cfg: &RunConfig) -> Result<()> {
    let lambda = cfg.sim.wavelength();
    let bs = build_fine_codebook(&cfg.codebook, &cfg.sim.bs_geometry()?, lambda)?;
    export_codebook(&bs, Some(&cfg.codebook), lambda, &cfg.out, "codebook_bs")?;
    let ris = codebook_to_ris_frame(&bs, cfg.sim.ris_position, &cfg.sim.ris_geometry()?, lambda)?;
    export_codebook(&ris, Some(&cfg.codebook), lambda, &cfg.out, "codebook_ris")
}

/// Per-layer FLOPs of the configured detector.
pub fn flops_report(cfg: &RunConfig) -> ExperimentReport {
    let est = flops_estimate(&cfg.model);
    let mut rep = ExperimentReport::new("flops", vec!["layer", "kind", "detail", "repeat", "unit_flops", "flops"], cfg);
    for l in &est.layers {
        rep.rows.push(vec![
            l.layer.clone(),
            l.kind.into(),
            l.detail.clone(),
            l.repeat.to_string(),
            l.unit.to_string(),
            l.flops.to_string(),
        ]);
    }
    rep.summary.push(format!("total FLOPs per forward pass: {}", est.total));
    rep
}

// ---- experiments -----------------------------------------------------------

pub fn run_experiment(kind: Experiment, cfg: &RunConfig) -> Result<ExperimentReport> {
    match kind {
        Experiment::Focal => focal_experiment(cfg),
        Experiment::Interference => interference_experiment(cfg),
        Experiment::Rate => rate_experiment(cfg),
        Experiment::Density => density_experiment(cfg),
        Experiment::Accuracy => accuracy_experiment(cfg, "accuracy"),
        Experiment::Halfmap => halfmap_experiment(cfg),
    }
}

fn focal_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    let d = cfg.sim.bs_rayleigh()?;
    let probe = PolarCoord::new(cfg.focal.probe * d, 0.0)?;
    let sweep = RadialSweep::around(probe.r, cfg.focal.factor, cfg.focal.points);
    let mut rep = ExperimentReport::new(
        "focal",
        vec!["bs_elements", "link", "probe_r", "depth", "r_min", "r_max", "peak_r", "truncated"],
        cfg,
    );
    let jobs: Vec<(usize, Link)> =
        cfg.focal.bs_elements.iter().flat_map(|&n| [(n, Link::Direct), (n, Link::Cascaded)]).collect();
    let depths = jobs
        .par_iter()
        .map(|&(n, link)| {
            let sim = SimConfig { bs_elements: n, ..cfg.sim.clone() };
            focal_depth_3db(&sim, probe, link, &sweep)
        })
        .collect::<Result<Vec<_>>>()?;
    for ((n, link), fd) in jobs.iter().zip(&depths) {
        rep.rows.push(vec![
            n.to_string(),
            link.name().into(),
            num(probe.r),
            num(fd.depth),
            num(fd.r_min),
            num(fd.r_max),
            num(fd.peak_r),
            fd.truncated.to_string(),
        ]);
        rep.summary.push(format!(
            "N = {n:>5} {:<8} focal depth {:.3} m{}",
            link.name(),
            fd.depth,
            if fd.truncated { " (lower bound, sweep edge reached)" } else { "" }
        ));
    }
    rep.summary.insert(0, format!("probe at {:.3} m (BS Rayleigh distance {:.3} m)", probe.r, d));
    Ok(rep)
}

/// Noise power at `snr_db`: the mean power a BS-focused line-of-sight beam
/// delivers at the reference distance, `P_t N (lambda / 4 pi r)^2 E|g|^2`,
/// divided by the SNR.
pub fn reference_sigma(cfg: &RunConfig, snr_db: f64) -> Result<f64> {
    let k = path_loss(cfg.noise_ref_r, cfg.sim.wavelength())?;
    let gain = match cfg.sim.los_gain {
        GainModel::Rayleigh { variance } => variance,
        GainModel::Fixed { re, im } => re * re + im * im,
    };
    sigma_from_reference(snr_db, cfg.sim.tx_power * cfg.sim.bs_elements as f64 * k * k * gain)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn interference_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    let set = &cfg.interference;
    let mut devices = vec![set.serving];
    devices.extend(&set.victims);
    let mut rep = ExperimentReport::new(
        "interference",
        vec![
            "snr_db",
            "victim",
            "r",
            "theta",
            "bs_mean_w",
            "ris_mean_w",
            "bs_median_w",
            "ris_median_w",
            "bs_leak_w",
            "ris_leak_w",
        ],
        cfg,
    );
    for &snr in &set.snr_list {
        let sigma = reference_sigma(cfg, snr)?;
        // per trial: (bs powers, ris powers) at every victim
        let trials = (0..set.trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("interference/{t}")));
                let scene = gen_scene(&cfg.sim, &devices, cfg.sim.ris_position, &mut rng)?;
                let noise = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("interference-noise/{snr}/{t}")));
                let bs = interference_power(&scene, set.serving, Link::Direct, sigma, cfg.sim.tx_power, &mut noise.clone())?;
                let ris = interference_power(&scene, set.serving, Link::Cascaded, sigma, cfg.sim.tx_power, &mut noise.clone())?;
                let leak_bs = interference_power(&scene, set.serving, Link::Direct, 0.0, cfg.sim.tx_power, &mut rng)?;
                let leak_ris = interference_power(&scene, set.serving, Link::Cascaded, 0.0, cfg.sim.tx_power, &mut rng)?;
                Ok((bs, ris, leak_bs, leak_ris))
            })
            .collect::<Result<Vec<_>>>()?;
        for (v, victim) in set.victims.iter().enumerate() {
            let mut bs: Vec<f64> = trials.iter().map(|t| t.0[v]).collect();
            let mut ris: Vec<f64> = trials.iter().map(|t| t.1[v]).collect();
            let leak_bs = mean(&trials.iter().map(|t| t.2[v]).collect::<Vec<_>>());
            let leak_ris = mean(&trials.iter().map(|t| t.3[v]).collect::<Vec<_>>());
            let (bm, rm) = (mean(&bs), mean(&ris));
            bs.sort_by(f64::total_cmp);
            ris.sort_by(f64::total_cmp);
            rep.rows.push(vec![
                num(snr),
                (v + 1).to_string(),
                num(victim.r),
                num(victim.theta),
                num(bm),
                num(rm),
                num(quantile(&bs, 0.5)),
                num(quantile(&ris, 0.5)),
                num(leak_bs),
                num(leak_ris),
            ]);
            rep.summary.push(format!(
                "SNR {snr:>5} dB  victim {} ({:.1} m, {:.1} deg): BS-directed {:.3e} W, RIS-assisted {:.3e} W (beam leakage {:.3e} vs {:.3e} W)",
                v + 1,
                victim.r,
                victim.theta.to_degrees(),
                bm,
                rm,
                leak_bs,
                leak_ris
            ));
        }
    }
    Ok(rep)
}

fn rate_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    let devices = &cfg.interference.victims;
    let mut rep =
        ExperimentReport::new("rate", vec!["snr_db", "device", "r", "theta", "bs_rate", "ris_rate"], cfg);
    for &snr in &cfg.rate_snr {
        let sigma = reference_sigma(cfg, snr)?;
        let trials = (0..cfg.rate_trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("rate/{t}")));
                let scene = gen_scene(&cfg.sim, devices, cfg.sim.ris_position, &mut rng)?;
                let mut out = Vec::with_capacity(devices.len());
                for (i, d) in devices.iter().enumerate() {
                    let bs = focus_beam(&scene, *d, Link::Direct)?;
                    let ris = focus_beam(&scene, *d, Link::Cascaded)?;
                    let p_bs = beam_gain(&scene, &bs, i)?.norm_sqr() * cfg.sim.tx_power;
                    let p_ris = beam_gain(&scene, &ris, i)?.norm_sqr() * cfg.sim.tx_power;
                    out.push((achievable_rate(p_bs, sigma)?, achievable_rate(p_ris, sigma)?));
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, d) in devices.iter().enumerate() {
            let bs = mean(&trials.iter().map(|t| t[i].0).collect::<Vec<_>>());
            let ris = mean(&trials.iter().map(|t| t[i].1).collect::<Vec<_>>());
            rep.rows.push(vec![num(snr), (i + 1).to_string(), num(d.r), num(d.theta), num(bs), num(ris)]);
            rep.summary.push(format!(
                "SNR {snr:>5} dB  device {}: BS-directed {bs:.3} bit/s/Hz, RIS-assisted {ris:.3} bit/s/Hz",
                i + 1
            ));
        }
    }
    Ok(rep)
}

fn density_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    let set = &cfg.density;
    let mut rep = ExperimentReport::new(
        "density",
        vec!["devices", "link", "median_w", "q1_w", "q3_w", "mean_w", "max_w"],
        cfg,
    );
    for &count in &set.counts {
        let trials = (0..set.trials)
            .into_par_iter()
            .map(|t| {
                use rand::Rng;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("density/{count}/{t}")));
                let devices = (0..count)
                    .map(|_| {
                        let r = rng.random_range(cfg.sim.r_range.0..cfg.sim.r_range.1);
                        let theta = rng.random_range(cfg.sim.theta_range.0..cfg.sim.theta_range.1);
                        PolarCoord::new(r, theta)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let scene = gen_scene(&cfg.sim, &devices, cfg.sim.ris_position, &mut rng)?;
                // leakage only: every device is served, nobody adds noise
                let bs = aggregate_interference(&scene, Link::Direct, 0.0, cfg.sim.tx_power, &mut rng)?;
                let ris = aggregate_interference(&scene, Link::Cascaded, 0.0, cfg.sim.tx_power, &mut rng)?;
                Ok((bs, ris))
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, link) in [Link::Direct, Link::Cascaded].into_iter().enumerate() {
            let mut all: Vec<f64> =
                trials.iter().flat_map(|(b, r)| if k == 0 { b.clone() } else { r.clone() }).collect();
            let m = mean(&all);
            all.sort_by(f64::total_cmp);
            let med = quantile(&all, 0.5);
            rep.rows.push(vec![
                count.to_string(),
                link.name().into(),
                num(med),
                num(quantile(&all, 0.25)),
                num(quantile(&all, 0.75)),
                num(m),
                num(*all.last().expect("non-empty")),
            ]);
            rep.summary.push(format!("{count:>3} devices {:<8} median interference {med:.3e} W", link.name()));
        }
    }
    Ok(rep)
}

fn test_at(ds: &Dataset, snr: f64) -> Vec<&Sample> {
    ds.split(Split::Test).filter(|s| s.map.snr_db == snr).collect()
}

fn accuracy_experiment(cfg: &RunConfig, id: &str) -> Result<ExperimentReport> {
    let fine = ensure_dataset(cfg, Stage::Fine)?;
    let grid = grid_of(&cfg.codebook);
    let rayleigh = cfg.sim.bs_rayleigh()?;
    let mut rep = ExperimentReport::new(
        id,
        vec!["snr_db", "test_samples", "stage2_accuracy", "pipeline_accuracy", "stage1_accuracy", "truth_ceiling"],
        cfg,
    );
    for &snr in &cfg.data.snr_list {
        let test = test_at(&fine, snr);
        let coarse = ensure_coarse(cfg, snr)?;
        let det = ensure_detector(cfg, &fine, snr, false)?;
        let loc = DetectorLocator { net: &det, labels: fine.labels, half: false };
        let stage1 = Stage1 { net: &coarse, labels: fine.labels, rayleigh };
        let stage2 = beam_accuracy(&test, &loc, None, &grid)?;
        let pipeline = beam_accuracy(&test, &loc, Some(&stage1), &grid)?;
        let ceiling = beam_accuracy(&test, &TruthLocator, None, &grid)?;
        let mut region_hits = 0;
        for s in &test {
            let c = s.coarse.ok_or_else(|| config("sample has no coarse map"))?;
            let predicted = stage1_classify(&c, &coarse, &fine.labels, rayleigh)?;
            let truth = if s.map.truth.r <= rayleigh / 10.0 { FieldRegion::Bfr } else { FieldRegion::Nbfr };
            region_hits += usize::from(predicted == truth);
        }
        let stage1_acc = region_hits as f64 / test.len() as f64;
        rep.rows.push(vec![
            num(snr),
            test.len().to_string(),
            num(stage2),
            num(pipeline),
            num(stage1_acc),
            num(ceiling),
        ]);
        rep.summary.push(format!(
            "SNR {snr:>5} dB: stage-2 accuracy {stage2:.4}, two-stage {pipeline:.4}, stage-1 region {stage1_acc:.4}, ground-truth ceiling {ceiling:.4}"
        ));
    }
    Ok(rep)
}

fn halfmap_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    let fine = ensure_dataset(cfg, Stage::Fine)?;
    let grid = grid_of(&cfg.codebook);
    let mut rep =
        ExperimentReport::new("halfmap", vec!["snr_db", "test_samples", "full_accuracy", "half_accuracy"], cfg);
    for &snr in &cfg.data.snr_list {
        let test = test_at(&fine, snr);
        let full = ensure_detector(cfg, &fine, snr, false)?;
        let half = ensure_detector(cfg, &fine, snr, true)?;
        let fa = beam_accuracy(&test, &DetectorLocator { net: &full, labels: fine.labels, half: false }, None, &grid)?;
        let ha = beam_accuracy(&test, &DetectorLocator { net: &half, labels: fine.labels, half: true }, None, &grid)?;
        rep.rows.push(vec![num(snr), test.len().to_string(), num(fa), num(ha)]);
        rep.summary.push(format!("SNR {snr:>5} dB: full map {fa:.4}, half map {ha:.4}"));
    }
    Ok(rep)
}

/// Evaluates existing artifacts without training anything.
pub fn eval(cfg: &RunConfig) -> Result<ExperimentReport> {
    let cfg = RunConfig { auto_generate: false, ..cfg.clone() };
    accuracy_experiment(&cfg, "eval")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn presets_resolve() {
        let desk = RunConfig::from_settings(Scale::Desk, Settings::preset(Scale::Desk), "out".into()).unwrap();
        assert_eq!((desk.sim.bs_elements, desk.sim.ris_elements), (64, 256));
        assert_eq!((desk.codebook.l, desk.codebook.s), (32, 32));
        assert_eq!(desk.data.snr_list, vec![-10.0, 0.0, 10.0, 20.0]);
        assert_eq!((desk.data.per_snr, desk.train.epochs), (800, 60));
        let paper = RunConfig::from_settings(Scale::Paper, Settings::preset(Scale::Paper), "out".into()).unwrap();
        assert_eq!((paper.sim.bs_elements, paper.sim.ris_elements), (256, 1024));
        assert_eq!((paper.codebook.l, paper.codebook.s), (100, 100));
        assert_eq!(paper.data.snr_list, vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0]);
        assert_eq!((paper.data.per_snr, paper.coarse_data.per_snr), (1000, 100));
        assert_eq!(paper.model, ModelConfig::paper());
        assert!((paper.interference.victims[0].theta + PI / 6.0).abs() < 1e-12);
    }

    #[test]
    fn config_text_errors_name_the_key() {
        let mut s = Settings::preset(Scale::Desk);
        s.apply_text("# comment\nsim.N = 32  # trailing\n\ncodebook.L=8\n").unwrap();
        assert_eq!(s.raw("sim.N").unwrap(), "32");
        assert_eq!(s.raw("codebook.L").unwrap(), "8");
        let err = s.apply_text("sim.bogus = 1").unwrap_err().to_string();
        assert!(err.contains("sim.bogus"), "{err}");
        let err = s.apply_text("just words").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        s.set("train.lr", "fast").unwrap();
        let err = RunConfig::from_settings(Scale::Desk, s, "out".into()).unwrap_err().to_string();
        assert!(err.contains("train.lr"), "{err}");
    }

    #[test]
    fn digests_track_settings() {
        let a = Settings::preset(Scale::Desk);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.set("density.trials", "5").unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.training_digest(), b.training_digest());
        b.set("train.epochs", "5").unwrap();
        assert_ne!(a.training_digest(), b.training_digest());
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }
}
