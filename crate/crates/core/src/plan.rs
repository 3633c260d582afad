//! Experiment plans and the image corpus they describe.
//!
//! A plan fixes the camera roster, the per-device image sets, and every
//! training and evaluation setting. Plans are stored as plain `key=value`
//! text; [`simulate`] turns a plan into a deterministic synthetic corpus that
//! can be written to disk with a CSV manifest and read back.
//!
//! The first device listed for a model is its training device and receives
//! every set. Further devices of the same model only receive flat images and
//! an `s_ts` test set; they exist to test reuse of trained models on a new
//! sensor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::camsim::{
    capture, check_models_distinct, derive_seed, CameraModelSpec, Cfa, Demosaic, DeviceSpec,
    SceneSpec, DEFAULT_RESOLUTION, DEFAULT_SENSOR_NOISE, DEFAULT_SIGMA_F, FORGERY_SIZES,
};
use crate::cmi::{self, SamplingCounts};
use crate::imaging::{read_image, write_atomic, write_image, Image, RgbImage};
use crate::localize::{DEFAULT_STRIDE, DEFAULT_WINDOW};
use crate::nnet::{LayerSpec, TrainConfig};
use crate::wavelet::Denoiser;
use crate::{Error, Result};

/// Qualities used for the recompression experiment.
pub const JPEG_QUALITIES: [u8; 5] = [100, 90, 80, 75, 50];

/// Name of the manifest written next to a simulated corpus.
pub const MANIFEST_NAME: &str = "manifest.csv";

/// Disjoint image sets assigned to each device.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SetLabel {
    /// Low-texture shots used only for fingerprint estimation.
    Flat,
    /// Classifier training images.
    CTr,
    /// Classifier test images.
    CTs,
    /// Fusion training images.
    STr,
    /// Fusion and method comparison test images.
    STs,
    /// Threshold calibration images.
    F,
}

impl SetLabel {
    pub const ALL: [SetLabel; 6] = [
        SetLabel::Flat,
        SetLabel::CTr,
        SetLabel::CTs,
        SetLabel::STr,
        SetLabel::STs,
        SetLabel::F,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SetLabel::Flat => "flat",
            SetLabel::CTr => "c_tr",
            SetLabel::CTs => "c_ts",
            SetLabel::STr => "s_tr",
            SetLabel::STs => "s_ts",
            SetLabel::F => "f",
        }
    }
}

impl fmt::Display for SetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SetLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SetLabel::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown image set {s:?}")))
    }
}

/// Images per device in each set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SetSizes {
    pub flat: usize,
    pub c_tr: usize,
    pub c_ts: usize,
    pub s_tr: usize,
    pub s_ts: usize,
    pub f: usize,
}

impl SetSizes {
    /// Full per-device counts: 100 classifier images split 80/20, 50 fusion
    /// images split 40/10 and 10 calibration images.
    pub fn full() -> Self {
        SetSizes {
            flat: 70,
            c_tr: 80,
            c_ts: 20,
            s_tr: 40,
            s_ts: 10,
            f: 10,
        }
    }

    /// Reduced counts that train on a single core in minutes.
    pub fn desk() -> Self {
        SetSizes {
            flat: 50,
            c_tr: 60,
            c_ts: 10,
            s_tr: 20,
            s_ts: 10,
            f: 10,
        }
    }

    pub fn get(&self, set: SetLabel) -> usize {
        match set {
            SetLabel::Flat => self.flat,
            SetLabel::CTr => self.c_tr,
            SetLabel::CTs => self.c_ts,
            SetLabel::STr => self.s_tr,
            SetLabel::STs => self.s_ts,
            SetLabel::F => self.f,
        }
    }

    fn get_mut(&mut self, set: SetLabel) -> &mut usize {
        match set {
            SetLabel::Flat => &mut self.flat,
            SetLabel::CTr => &mut self.c_tr,
            SetLabel::CTs => &mut self.c_ts,
            SetLabel::STr => &mut self.s_tr,
            SetLabel::STs => &mut self.s_ts,
            SetLabel::F => &mut self.f,
        }
    }
}

/// Classifier width preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    Desk,
    Full,
}

impl ArchKind {
    pub fn layers(self, block_size: usize) -> Vec<LayerSpec> {
        match self {
            ArchKind::Desk => cmi::desk_architecture(block_size),
            ArchKind::Full => cmi::default_architecture(block_size),
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Desk => "desk",
            ArchKind::Full => "full",
        })
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(ArchKind::Desk),
            "full" => Ok(ArchKind::Full),
            _ => Err(Error::Format(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmiSettings {
    pub counts: SamplingCounts,
    pub arch: ArchKind,
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionSettings {
    pub blocks_per_image: usize,
    pub epochs: u32,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceEntry {
    pub device_id: String,
    pub model_id: String,
}

/// Everything an experiment run depends on besides the seed-derived data.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub seed: u64,
    pub resolution: usize,
    pub sigma_f: f64,
    pub sensor_noise: f64,
    pub sigma0: f64,
    pub models: Vec<CameraModelSpec>,
    pub devices: Vec<DeviceEntry>,
    pub sizes: SetSizes,
    pub jpeg_qualities: Vec<u8>,
    pub forgery_sizes: Vec<usize>,
    pub cmi: CmiSettings,
    pub fusion: FusionSettings,
    /// Blocks drawn per image when scoring the test sets.
    pub eval_blocks_per_image: usize,
    pub window: usize,
    pub stride: usize,
}

/// Three models with clearly different pipelines.
pub fn desk_models() -> Vec<CameraModelSpec> {
    vec![
        CameraModelSpec::new("m1", Cfa::Rggb, Demosaic::Bilinear, 1.0, 0.0),
        CameraModelSpec::new("m2", Cfa::Grbg, Demosaic::SmoothHue, 2.0, 2.5),
        CameraModelSpec::new("m3", Cfa::Gbrg, Demosaic::GradientCorrected, 1.5, 1.2),
    ]
    .into_iter()
    .collect::<Result<_>>()
    .expect("static roster is valid")
}

impl ExperimentPlan {
    /// Three models with two devices each and the desk set sizes.
    pub fn desk(seed: u64) -> Self {
        let models = desk_models();
        let devices = models
            .iter()
            .flat_map(|m| {
                (1..=2).map(move |d| DeviceEntry {
                    device_id: format!("{}-dev{d}", m.model_id),
                    model_id: m.model_id.clone(),
                })
            })
            .collect();
        ExperimentPlan {
            seed,
            resolution: DEFAULT_RESOLUTION,
            sigma_f: DEFAULT_SIGMA_F,
            sensor_noise: DEFAULT_SENSOR_NOISE,
            sigma0: Denoiser::default().sigma0,
            models,
            devices,
            sizes: SetSizes::desk(),
            jpeg_qualities: JPEG_QUALITIES.to_vec(),
            forgery_sizes: FORGERY_SIZES.to_vec(),
            cmi: CmiSettings {
                counts: SamplingCounts {
                    block_size: DEFAULT_WINDOW,
                    // Balanced against two other models: 10 = 2 x 5.
                    target_per_image: 10,
                    other_per_image: 5,
                },
                arch: ArchKind::Desk,
                epochs: 20,
                learning_rate: 0.005,
                batch_size: 32,
            },
            fusion: FusionSettings {
                blocks_per_image: 16,
                epochs: 200,
                learning_rate: 0.05,
            },
            eval_blocks_per_image: 16,
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
        }
    }

    /// Checks internal consistency; every constructor path ends here.
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Plan("plan lists no camera models".into()));
        }
        check_models_distinct(&self.models).map_err(|e| Error::Plan(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for d in &self.devices {
            if !seen.insert(d.device_id.as_str()) {
                return Err(Error::Plan(format!(
                    "duplicate device id {:?}",
                    d.device_id
                )));
            }
            if !valid_id(&d.device_id) {
                return Err(Error::Plan(format!("bad device id {:?}", d.device_id)));
            }
            if self.model(&d.model_id).is_none() {
                return Err(Error::Plan(format!(
                    "device {:?} refers to unknown model {:?}",
                    d.device_id, d.model_id
                )));
            }
        }
        for m in &self.models {
            if !valid_id(&m.model_id) {
                return Err(Error::Plan(format!("bad model id {:?}", m.model_id)));
            }
            if self.training_device(&m.model_id).is_none() {
                return Err(Error::Plan(format!("model {:?} has no device", m.model_id)));
            }
        }
        for set in SetLabel::ALL {
            if self.sizes.get(set) == 0 {
                return Err(Error::Plan(format!(
                    "set {set} must hold at least one image"
                )));
            }
        }
        let block = self.cmi.counts.block_size;
        if block != self.window {
            return Err(Error::Plan(format!(
                "classifier block {block} must equal the sliding window {}",
                self.window
            )));
        }
        if self.window > self.resolution || self.stride == 0 {
            return Err(Error::Plan(format!(
                "window {} / stride {} do not fit resolution {}",
                self.window, self.stride, self.resolution
            )));
        }
        if self.jpeg_qualities.iter().any(|&q| q == 0 || q > 100) {
            return Err(Error::Plan("jpeg qualities must lie in 1..=100".into()));
        }
        if self.forgery_sizes.is_empty()
            || self
                .forgery_sizes
                .iter()
                .any(|&s| s == 0 || s >= self.resolution)
        {
            return Err(Error::Plan(
                "forgery sizes must lie strictly inside the image".into(),
            ));
        }
        if !(self.sigma_f >= 0.0 && self.sensor_noise >= 0.0 && self.sigma0 > 0.0) {
            return Err(Error::Plan("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    pub fn model(&self, model_id: &str) -> Option<&CameraModelSpec> {
        self.models.iter().find(|m| m.model_id == model_id)
    }

    pub fn device(&self, device_id: &str) -> Option<&DeviceEntry> {
        self.devices.iter().find(|d| d.device_id == device_id)
    }

    /// First device listed for the model.
    pub fn training_device(&self, model_id: &str) -> Option<&DeviceEntry> {
        self.devices.iter().find(|d| d.model_id == model_id)
    }

    /// Devices of the model other than its training device.
    pub fn extra_devices(&self, model_id: &str) -> Vec<&DeviceEntry> {
        self.devices
            .iter()
            .filter(|d| d.model_id == model_id)
            .skip(1)
            .collect()
    }

    pub fn is_training_device(&self, device_id: &str) -> bool {
        self.device(device_id)
            .and_then(|d| self.training_device(&d.model_id))
            .is_some_and(|t| t.device_id == device_id)
    }

    /// Sets (and their sizes) simulated for a device.
    pub fn sets_for(&self, device_id: &str) -> Vec<(SetLabel, usize)> {
        let sets: &[SetLabel] = if self.is_training_device(device_id) {
            &SetLabel::ALL
        } else {
            &[SetLabel::Flat, SetLabel::STs]
        };
        sets.iter().map(|&s| (s, self.sizes.get(s))).collect()
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::new(Denoiser::default().levels, self.sigma0)
    }

    /// Sensor of a listed device; the PRNU pattern depends only on the plan
    /// seed and the device id.
    pub fn device_spec(&self, device_id: &str) -> Result<DeviceSpec> {
        let d = self
            .device(device_id)
            .ok_or_else(|| Error::Plan(format!("unknown device {device_id:?}")))?;
        DeviceSpec::generate(
            &d.device_id,
            &d.model_id,
            self.resolution,
            self.resolution,
            self.sigma_f,
            self.sensor_noise,
            derive_seed(self.seed, &format!("device/{device_id}"), 0),
        )
    }

    pub fn cmi_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.cmi.epochs,
            learning_rate: self.cmi.learning_rate,
            batch_size: self.cmi.batch_size,
            clip_norm: cmi::CLIP_NORM,
            seed: derive_seed(self.seed, "cmi-train", 0),
            ..TrainConfig::default()
        }
    }

    pub fn fusion_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.fusion.epochs,
            learning_rate: self.fusion.learning_rate,
            ..crate::fusion::default_train_config(derive_seed(self.seed, "fusion-train", 0))
        }
    }

    /// Serializes to the `key=value` plan format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "resolution={}", self.resolution);
        let _ = writeln!(s, "sigma_f={}", self.sigma_f);
        let _ = writeln!(s, "sensor_noise={}", self.sensor_noise);
        let _ = writeln!(s, "sigma0={}", self.sigma0);
        for set in SetLabel::ALL {
            let _ = writeln!(s, "sets.{set}={}", self.sizes.get(set));
        }
        let _ = writeln!(
            s,
            "jpeg.qualities={}",
            list(&mut self.jpeg_qualities.iter().map(|q| q.to_string()))
        );
        let _ = writeln!(
            s,
            "forgery.sizes={}",
            list(&mut self.forgery_sizes.iter().map(|q| q.to_string()))
        );
        let _ = writeln!(s, "cmi.block={}", self.cmi.counts.block_size);
        let _ = writeln!(
            s,
            "cmi.target_per_image={}",
            self.cmi.counts.target_per_image
        );
        let _ = writeln!(s, "cmi.other_per_image={}", self.cmi.counts.other_per_image);
        let _ = writeln!(s, "cmi.arch={}", self.cmi.arch);
        let _ = writeln!(s, "cmi.epochs={}", self.cmi.epochs);
        let _ = writeln!(s, "cmi.lr={}", self.cmi.learning_rate);
        let _ = writeln!(s, "cmi.batch={}", self.cmi.batch_size);
        let _ = writeln!(
            s,
            "fusion.blocks_per_image={}",
            self.fusion.blocks_per_image
        );
        let _ = writeln!(s, "fusion.epochs={}", self.fusion.epochs);
        let _ = writeln!(s, "fusion.lr={}", self.fusion.learning_rate);
        let _ = writeln!(s, "eval.blocks_per_image={}", self.eval_blocks_per_image);
        let _ = writeln!(s, "localize.window={}", self.window);
        let _ = writeln!(s, "localize.stride={}", self.stride);
        for m in &self.models {
            let _ = writeln!(
                s,
                "model.{}={},{},{},{}",
                m.model_id, m.cfa, m.demosaic, m.quant_table_scale, m.sharpen_amount
            );
        }
        for d in &self.devices {
            let _ = writeln!(s, "device.{}={}", d.device_id, d.model_id);
        }
        s
    }

    /// Parses a plan. Keys not given keep their [`ExperimentPlan::desk`]
    /// value, except that any `model.` or `device.` key replaces the whole
    /// roster. Duplicate and unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut plan = ExperimentPlan::desk(0);
        let mut seen = BTreeSet::new();
        let mut models = Vec::new();
        let mut devices = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = n + 1;
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Plan(format!("line {lineno}: expected key=value")))?;
            if !seen.insert(key.to_string()) {
                let what = match key.split_once('.') {
                    Some(("device", id)) => format!("duplicate device id {id:?}"),
                    Some(("model", id)) => format!("duplicate model id {id:?}"),
                    _ => format!("duplicate key {key:?}"),
                };
                return Err(Error::Plan(format!("line {lineno}: {what}")));
            }
            let bad = |e: String| Error::Plan(format!("line {lineno}: {key}: {e}"));
            if let Some(id) = key.strip_prefix("model.") {
                models.push(parse_model(id, value).map_err(|e| bad(e.to_string()))?);
                continue;
            }
            if let Some(id) = key.strip_prefix("device.") {
                devices.push(DeviceEntry {
                    device_id: id.to_string(),
                    model_id: value.to_string(),
                });
                continue;
            }
            if let Some(set) = key.strip_prefix("sets.") {
                let set: SetLabel = set.parse().map_err(|e: Error| bad(e.to_string()))?;
                *plan.sizes.get_mut(set) = num(value).map_err(bad)?;
                continue;
            }
            match key {
                "seed" => plan.seed = num(value).map_err(bad)?,
                "resolution" => plan.resolution = num(value).map_err(bad)?,
                "sigma_f" => plan.sigma_f = num(value).map_err(bad)?,
                "sensor_noise" => plan.sensor_noise = num(value).map_err(bad)?,
                "sigma0" => plan.sigma0 = num(value).map_err(bad)?,
                "jpeg.qualities" => plan.jpeg_qualities = num_list(value).map_err(bad)?,
                "forgery.sizes" => plan.forgery_sizes = num_list(value).map_err(bad)?,
                "cmi.block" => plan.cmi.counts.block_size = num(value).map_err(bad)?,
                "cmi.target_per_image" => {
                    plan.cmi.counts.target_per_image = num(value).map_err(bad)?
                }
                "cmi.other_per_image" => {
                    plan.cmi.counts.other_per_image = num(value).map_err(bad)?
                }
                "cmi.arch" => {
                    plan.cmi.arch = value.parse().map_err(|e: Error| bad(e.to_string()))?
                }
                "cmi.epochs" => plan.cmi.epochs = num(value).map_err(bad)?,
                "cmi.lr" => plan.cmi.learning_rate = num(value).map_err(bad)?,
                "cmi.batch" => plan.cmi.batch_size = num(value).map_err(bad)?,
                "fusion.blocks_per_image" => {
                    plan.fusion.blocks_per_image = num(value).map_err(bad)?
                }
                "fusion.epochs" => plan.fusion.epochs = num(value).map_err(bad)?,
                "fusion.lr" => plan.fusion.learning_rate = num(value).map_err(bad)?,
                "eval.blocks_per_image" => plan.eval_blocks_per_image = num(value).map_err(bad)?,
                "localize.window" => plan.window = num(value).map_err(bad)?,
                "localize.stride" => plan.stride = num(value).map_err(bad)?,
                _ => return Err(Error::Plan(format!("line {lineno}: unknown key {key:?}"))),
            }
        }
        if !models.is_empty() || !devices.is_empty() {
            plan.models = models;
            plan.devices = devices;
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentPlan::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e: T::Err| format!("{v:?}: {e}"))
}

fn num_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    v.split(',').map(|p| num(p.trim())).collect()
}

fn parse_model(id: &str, value: &str) -> Result<CameraModelSpec> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    let [cfa, dm, scale, sharpen] = parts[..] else {
        return Err(Error::Plan(format!(
            "model {id:?}: expected cfa,demosaic,quant_scale,sharpen"
        )));
    };
    CameraModelSpec::new(
        id,
        cfa.parse()?,
        dm.parse()?,
        num(scale).map_err(Error::Plan)?,
        num(sharpen).map_err(Error::Plan)?,
    )
}

/// One image of a corpus with its device, model and set.
#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub device_id: String,
    pub model_id: String,
    pub set: SetLabel,
    pub index: usize,
    pub image: RgbImage,
}

impl CorpusEntry {
    /// Path of the image relative to the corpus root.
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(&self.device_id)
            .join(self.set.name())
            .join(format!("{:04}.ppm", self.index))
    }
}

/// Images grouped by device and set, in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    index: BTreeMap<(String, SetLabel), Vec<usize>>,
}

impl Corpus {
    pub fn from_entries(entries: Vec<CorpusEntry>) -> Self {
        let mut index: BTreeMap<(String, SetLabel), Vec<usize>> = BTreeMap::new();
        for (k, e) in entries.iter().enumerate() {
            index
                .entry((e.device_id.clone(), e.set))
                .or_default()
                .push(k);
        }
        Corpus { entries, index }
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Images of one device and set, in index order.
    pub fn images(&self, device_id: &str, set: SetLabel) -> Vec<&CorpusEntry> {
        self.index
            .get(&(device_id.to_string(), set))
            .map(|ix| ix.iter().map(|&k| &self.entries[k]).collect())
            .unwrap_or_default()
    }

    /// Read access restricted to the listed sets.
    pub fn view(&self, allowed: &[SetLabel]) -> CorpusView<'_> {
        CorpusView {
            corpus: self,
            allowed: allowed.to_vec(),
        }
    }

    /// Writes every image plus [`MANIFEST_NAME`] under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.entries.par_iter().try_for_each(|e| {
            let path = dir.join(e.relative_path());
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|err| Error::io(parent, err))?;
            }
            write_image(&path, &Image::Rgb(e.image.clone()))
        })?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(format!("manifest: {e}"));
        w.write_record(["path", "device", "model", "set"])
            .map_err(csv_err)?;
        for e in &self.entries {
            let rel = e.relative_path();
            w.write_record([
                rel.to_string_lossy().as_ref(),
                &e.device_id,
                &e.model_id,
                e.set.name(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        write_atomic(dir.join(MANIFEST_NAME), &bytes)
    }

    /// Reads a corpus from a manifest with `path,device,model,set` columns.
    /// Paths are relative to the manifest's directory. Works for any image
    /// collection laid out this way, not only simulated ones.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let root = manifest.parent().unwrap_or(Path::new("."));
        let file = std::fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut rd = csv::Reader::from_reader(file);
        let headers = rd
            .headers()
            .map_err(|e| Error::Format(format!("{}: {e}", manifest.display())))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "device", "model", "set"] {
            return Err(Error::Format(format!(
                "{}: expected header path,device,model,set",
                manifest.display()
            )));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", manifest.display())))?;
            rows.push((
                rec[0].to_string(),
                rec[1].to_string(),
                rec[2].to_string(),
                rec[3].parse::<SetLabel>()?,
            ));
        }
        let mut counters: BTreeMap<(String, SetLabel), usize> = BTreeMap::new();
        let indexed: Vec<_> = rows
            .into_iter()
            .map(|(p, d, m, s)| {
                let c = counters.entry((d.clone(), s)).or_default();
                *c += 1;
                (p, d, m, s, *c - 1)
            })
            .collect();
        let entries = indexed
            .into_par_iter()
            .map(|(p, device_id, model_id, set, index)| {
                let image = read_image(root.join(&p))?.into_rgb()?;
                Ok(CorpusEntry {
                    device_id,
                    model_id,
                    set,
                    index,
                    image,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus::from_entries(entries))
    }
}

/// A corpus handle that refuses to hand out images from other sets.
#[derive(Clone, Debug)]
pub struct CorpusView<'a> {
    corpus: &'a Corpus,
    allowed: Vec<SetLabel>,
}

impl<'a> CorpusView<'a> {
    pub fn images(&self, device_id: &str, set: SetLabel) -> Result<Vec<&'a CorpusEntry>> {
        if !self.allowed.contains(&set) {
            return Err(Error::Invariant(format!(
                "set {set} is not assigned to this stage (allowed: {})",
                self.allowed
                    .iter()
                    .map(|s| s.name())
                    .collect::<Vec<_>>()
                    .join(",")
            )));
        }
        Ok(self.corpus.images(device_id, set))
    }

    /// Like [`CorpusView::images`] but an empty result is a missing input.
    pub fn require(&self, device_id: &str, set: SetLabel) -> Result<Vec<&'a CorpusEntry>> {
        let imgs = self.images(device_id, set)?;
        if imgs.is_empty() {
            return Err(Error::Dependency(format!(
                "corpus has no {set} images for device {device_id}"
            )));
        }
        Ok(imgs)
    }
}

/// Scene seed of one corpus image; unique per device, set and index.
pub fn scene_seed(plan_seed: u64, device_id: &str, set: SetLabel, index: usize) -> u64 {
    derive_seed(plan_seed, &format!("scene/{device_id}/{set}"), index as u64)
}

/// Renders the whole corpus a plan describes.
pub fn simulate(plan: &ExperimentPlan) -> Result<Corpus> {
    plan.validate()?;
    let devices: Vec<DeviceSpec> = plan
        .devices
        .iter()
        .map(|d| plan.device_spec(&d.device_id))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for dev in &devices {
        for (set, n) in plan.sets_for(&dev.device_id) {
            for k in 0..n {
                jobs.push((dev, set, k));
            }
        }
    }
    let entries = jobs
        .into_par_iter()
        .map(|(dev, set, index)| {
            let model = plan.model(&dev.model_id).expect("validated roster");
            let seed = scene_seed(plan.seed, &dev.device_id, set, index);
            let (w, h) = (plan.resolution, plan.resolution);
            let scene = if set == SetLabel::Flat {
                SceneSpec::flat(w, h, seed)
            } else {
                SceneSpec::natural(w, h, seed)
            };
            Ok(CorpusEntry {
                device_id: dev.device_id.clone(),
                model_id: dev.model_id.clone(),
                set,
                index,
                image: capture(&scene, dev, model)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::from_entries(entries))
}
