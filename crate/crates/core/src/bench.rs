//! End-to-end experiment harness: artifact training, block-level AUC
//! comparison, recompression robustness, reuse on unseen devices and the
//! forgery localization benchmark.
//!
//! Every experiment is a pure function of the plan, the corpus and the
//! trained [`Artifacts`]. Each stage reads the corpus through a
//! [`CorpusView`] restricted to the sets that stage is allowed to touch.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::camsim::{derive_seed, make_forgery, recompress, rng};
use crate::cmi::{
    aligned_origin, sample_blocks, train_cmi, CmiModelBundle, ModelImage, SamplingCounts,
};
use crate::fusion::{
    block_scores, build_training_pairs, train_fusion, FusionModel, ImageAnalysis, PairSource, H0,
    H1,
};
use crate::imaging::{write_atomic, BinaryMask, BlockRef, RgbImage};
use crate::localize::{
    binarize, calibrate_threshold, f_score, fusion_map, prnu_map, roc_auc, scaled_opening_radius,
    window_evidence, Aggregation, ProbabilityMap, SlidingParams, ThresholdCalibration,
};
use crate::plan::{Corpus, CorpusEntry, CorpusView, ExperimentPlan, SetLabel};
use crate::prnu::{estimate_fingerprint, quality_gate, Fingerprint, FingerprintOptions, PCE_GATE};
use crate::wavelet::Denoiser;
use crate::{Error, Result};

/// Average F-scores over all cameras for the three region sizes (largest
/// first), as published for the fusion method and two map-level baselines
/// at full resolution. Shipped for side-by-side reporting only.
pub const REFERENCE_F_SCORES: [(&str, [f64; 3]); 3] = [
    ("Fusion", [0.73, 0.56, 0.26]),
    ("MRF", [0.57, 0.38, 0.13]),
    ("MSF", [0.70, 0.53, 0.19]),
];

/// Published block-level AUC range across cameras for each method.
pub const REFERENCE_AUC_RANGE: [(&str, f64, f64); 3] = [
    ("PRNU", 0.91, 0.99),
    ("CNN", 0.91, 0.99),
    ("Fusion", 0.98, 0.99),
];

/// Published average relative gain of fusion over the classifier at the
/// strongest recompression.
pub const REFERENCE_Q50_GAIN: f64 = 0.23;

/// Row key used for across-model averages.
pub const AVERAGE_ROW: &str = "avg";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Prnu,
    Cnn,
    Fusion,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Prnu, Method::Cnn, Method::Fusion];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Prnu => "PRNU",
            Method::Cnn => "CNN",
            Method::Fusion => "Fusion",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PRNU" => Ok(Method::Prnu),
            "CNN" => Ok(Method::Cnn),
            "Fusion" => Ok(Method::Fusion),
            _ => Err(Error::Format(format!("unknown method {s:?}"))),
        }
    }
}

/// One table cell. `value` is `None` when the cell was planned but could
/// not be computed.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub model: String,
    pub method: Method,
    pub condition: String,
    pub metric: String,
    pub value: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn push(
        &mut self,
        model: &str,
        method: Method,
        condition: &str,
        metric: &str,
        value: Option<f64>,
    ) {
        self.rows.push(ResultRow {
            model: model.to_string(),
            method,
            condition: condition.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn extend(&mut self, other: ResultTable) {
        self.rows.extend(other.rows);
    }

    /// Value of the first matching cell; `None` if absent or failed.
    pub fn get(&self, model: &str, method: Method, condition: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.model == model
                    && r.method == method
                    && r.condition == condition
                    && r.metric == metric
            })
            .and_then(|r| r.value)
    }

    pub fn failed(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.value.is_none())
    }

    /// Appends an `avg` row for every (method, condition, metric) group.
    /// The average is over the listed models and is failed if any is.
    fn add_averages(&mut self, models: &[String]) {
        let mut groups: BTreeMap<(Method, String, String), Vec<Option<f64>>> = BTreeMap::new();
        let mut order = Vec::new();
        for r in &self.rows {
            if !models.contains(&r.model) {
                continue;
            }
            let key = (r.method, r.condition.clone(), r.metric.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r.value);
        }
        for key in order {
            let vals = &groups[&key];
            let mean = vals
                .iter()
                .copied()
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64);
            self.push(AVERAGE_ROW, key.0, &key.1, &key.2, mean);
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Format(format!("result table: {e}"));
        w.write_record(["model", "method", "condition", "metric", "value"])
            .map_err(err)?;
        for r in &self.rows {
            let value = r
                .value
                .map_or_else(|| "failed".to_string(), |v| format!("{v:.6}"));
            w.write_record([
                r.model.as_str(),
                &r.method.to_string(),
                &r.condition,
                &r.metric,
                &value,
            ])
            .map_err(err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Format(format!("result table: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut table = ResultTable::default();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::Format(format!("result table: {e}")))?;
            if rec.len() != 5 {
                return Err(Error::Format(format!(
                    "result row has {} fields",
                    rec.len()
                )));
            }
            let value = match &rec[4] {
                "failed" => None,
                v => Some(
                    v.parse()
                        .map_err(|e| Error::Format(format!("value {v:?}: {e}")))?,
                ),
            };
            table.push(&rec[0], rec[1].parse()?, &rec[2], &rec[3], value);
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }
}

/// Trained state for every model and device of a plan.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub fingerprints: BTreeMap<String, Fingerprint>,
    pub cmi: BTreeMap<String, CmiModelBundle>,
    pub fusion: BTreeMap<String, FusionModel>,
    pub calibration: BTreeMap<String, ThresholdCalibration>,
    /// Thresholds for the PRNU-only baseline map, calibrated the same way.
    pub prnu_calibration: BTreeMap<String, ThresholdCalibration>,
}

impl Artifacts {
    pub fn fingerprint(&self, device_id: &str) -> Result<&Fingerprint> {
        self.fingerprints
            .get(device_id)
            .ok_or_else(|| Error::Dependency(format!("fingerprint for device {device_id}")))
    }

    pub fn classifier(&self, model_id: &str) -> Result<&CmiModelBundle> {
        self.cmi
            .get(model_id)
            .ok_or_else(|| Error::Dependency(format!("classifier for model {model_id}")))
    }

    pub fn fusion_model(&self, model_id: &str) -> Result<&FusionModel> {
        self.fusion
            .get(model_id)
            .ok_or_else(|| Error::Dependency(format!("fusion network for model {model_id}")))
    }

    pub fn thresholds(
        &self,
        model_id: &str,
    ) -> Result<(&ThresholdCalibration, &ThresholdCalibration)> {
        let fus = self.calibration.get(model_id);
        let prnu = self.prnu_calibration.get(model_id);
        match (fus, prnu) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Dependency(format!(
                "threshold calibration for model {model_id}"
            ))),
        }
    }

    /// Lists every artifact the plan's experiments need that is absent.
    pub fn missing(&self, plan: &ExperimentPlan, calibrated: bool) -> Vec<String> {
        let mut out = Vec::new();
        for d in &plan.devices {
            if !self.fingerprints.contains_key(&d.device_id) {
                out.push(format!("fingerprints/{}.fp", d.device_id));
            }
        }
        for m in &plan.models {
            let id = &m.model_id;
            if !self.cmi.contains_key(id) {
                out.push(format!("cmi/{id}.nnet"));
            }
            if !self.fusion.contains_key(id) {
                out.push(format!("fusion/{id}.nnet"));
            }
            if calibrated && !self.calibration.contains_key(id) {
                out.push(format!("calibration/{id}.txt"));
            }
            if calibrated && !self.prnu_calibration.contains_key(id) {
                out.push(format!("calibration/{id}.prnu.txt"));
            }
        }
        out
    }

    /// Fails with one dependency error naming every missing artifact.
    pub fn require(&self, plan: &ExperimentPlan, calibrated: bool) -> Result<()> {
        let missing = self.missing(plan, calibrated);
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Dependency(missing.join(", ")))
        }
    }

    /// Writes the store layout read by [`Artifacts::load`].
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["fingerprints", "cmi", "fusion", "calibration"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (id, fp) in &self.fingerprints {
            fp.save(dir.join("fingerprints").join(format!("{id}.fp")))?;
        }
        for (id, b) in &self.cmi {
            b.save(dir.join("cmi").join(format!("{id}.nnet")))?;
        }
        for (id, f) in &self.fusion {
            f.save(dir.join("fusion").join(format!("{id}.nnet")))?;
        }
        for (id, c) in &self.calibration {
            c.save(dir.join("calibration").join(format!("{id}.txt")))?;
        }
        for (id, c) in &self.prnu_calibration {
            c.save(dir.join("calibration").join(format!("{id}.prnu.txt")))?;
        }
        Ok(())
    }

    /// Loads whatever the store holds for the plan's devices and models.
    /// Absent files are skipped; use [`Artifacts::require`] to insist.
    pub fn load(dir: impl AsRef<Path>, plan: &ExperimentPlan) -> Result<Self> {
        let dir = dir.as_ref();
        let mut a = Artifacts::default();
        for d in &plan.devices {
            let p = dir.join("fingerprints").join(format!("{}.fp", d.device_id));
            if p.exists() {
                a.fingerprints
                    .insert(d.device_id.clone(), Fingerprint::load(&p)?);
            }
        }
        for m in &plan.models {
            let id = &m.model_id;
            let p = dir.join("cmi").join(format!("{id}.nnet"));
            if p.exists() {
                a.cmi.insert(id.clone(), CmiModelBundle::load(&p)?);
            }
            let p = dir.join("fusion").join(format!("{id}.nnet"));
            if p.exists() {
                a.fusion.insert(id.clone(), FusionModel::load(&p)?);
            }
            let p = dir.join("calibration").join(format!("{id}.txt"));
            if p.exists() {
                a.calibration
                    .insert(id.clone(), ThresholdCalibration::load(&p)?);
            }
            let p = dir.join("calibration").join(format!("{id}.prnu.txt"));
            if p.exists() {
                a.prnu_calibration
                    .insert(id.clone(), ThresholdCalibration::load(&p)?);
            }
        }
        Ok(a)
    }
}

fn sliding_params(plan: &ExperimentPlan) -> SlidingParams {
    SlidingParams {
        window: plan.window,
        stride: plan.stride,
        aggregation: Aggregation::Mean,
    }
}

/// Fingerprint per device from its flat images.
pub fn estimate_fingerprints(
    plan: &ExperimentPlan,
    corpus: &Corpus,
) -> Result<BTreeMap<String, Fingerprint>> {
    let view = corpus.view(&[SetLabel::Flat]);
    let denoiser = plan.denoiser()?;
    let mut out = BTreeMap::new();
    for d in &plan.devices {
        let flats = view.require(&d.device_id, SetLabel::Flat)?;
        let grays: Vec<_> = flats.iter().map(|e| e.image.to_gray()).collect();
        let residuals = grays
            .par_iter()
            .map(|g| denoiser.residual(g))
            .collect::<Result<Vec<_>>>()?;
        let fp = estimate_fingerprint(
            &grays,
            &residuals,
            &d.device_id,
            FingerprintOptions::default(),
        )?;
        log::info!(
            "fingerprint {} from {} flat images",
            d.device_id,
            flats.len()
        );
        out.insert(d.device_id.clone(), fp);
    }
    Ok(out)
}

fn model_images<'a>(entries: &[&'a CorpusEntry]) -> Vec<ModelImage<'a>> {
    entries
        .iter()
        .map(|e| ModelImage {
            image: &e.image,
            model_id: &e.model_id,
        })
        .collect()
}

/// Trains one classifier on the `c_tr` images of every training device and
/// records its block accuracy on `c_ts`.
pub fn train_classifier(
    plan: &ExperimentPlan,
    corpus: &Corpus,
    model_id: &str,
) -> Result<CmiModelBundle> {
    let view = corpus.view(&[SetLabel::CTr, SetLabel::CTs]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for m in &plan.models {
        let dev = plan.training_device(&m.model_id).expect("validated roster");
        train.extend(view.require(&dev.device_id, SetLabel::CTr)?);
        test.extend(view.require(&dev.device_id, SetLabel::CTs)?);
    }
    let train = model_images(&train);
    let test = model_images(&test);
    let counts = plan.cmi.counts;
    let dataset = sample_blocks(
        &train,
        model_id,
        counts,
        derive_seed(plan.seed, &format!("cmi-sample/{model_id}"), 0),
    )?;
    let mut config = plan.cmi_train_config();
    config.seed = derive_seed(config.seed, model_id, 0);
    let started = std::time::Instant::now();
    let mut bundle = train_cmi(
        &train,
        &dataset,
        plan.cmi.arch.layers(counts.block_size),
        &config,
    )?;
    let test_counts = SamplingCounts {
        block_size: counts.block_size,
        target_per_image: counts.target_per_image,
        other_per_image: counts.target_per_image / 2,
    };
    let test_set = sample_blocks(
        &test,
        model_id,
        test_counts,
        derive_seed(plan.seed, &format!("cmi-test/{model_id}"), 0),
    )?;
    let acc = bundle.evaluate(&test, &test_set)?;
    bundle.test_accuracy = Some(acc);
    log::info!(
        "classifier {model_id}: {} blocks, {:.0}s, c_ts accuracy {acc:.3}",
        dataset.entries.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(bundle)
}

/// Images of `entries` whose PCE against `fp` passes the gate.
fn gated<'a>(
    entries: Vec<&'a CorpusEntry>,
    fp: &Fingerprint,
    denoiser: &Denoiser,
) -> Result<Vec<&'a CorpusEntry>> {
    let grays: Vec<_> = entries.iter().map(|e| e.image.to_gray()).collect();
    let residuals = grays
        .par_iter()
        .map(|g| denoiser.residual(g))
        .collect::<Result<Vec<_>>>()?;
    let report = quality_gate(&grays, &residuals, fp, PCE_GATE)?;
    for (k, pce) in &report.rejected {
        log::warn!(
            "{}: {}/{} rejected by the PCE gate ({pce:.1})",
            fp.device_id(),
            entries[*k].set,
            entries[*k].index
        );
    }
    Ok(report.accepted.iter().map(|&k| entries[k]).collect())
}

/// Images from the training devices of every other model in `set`.
fn other_model_images<'a>(
    plan: &ExperimentPlan,
    view: &CorpusView<'a>,
    model_id: &str,
    set: SetLabel,
) -> Result<Vec<&'a CorpusEntry>> {
    let mut out = Vec::new();
    for m in plan.models.iter().filter(|m| m.model_id != model_id) {
        let dev = plan.training_device(&m.model_id).expect("validated roster");
        out.extend(view.require(&dev.device_id, set)?);
    }
    Ok(out)
}

/// Trains the fusion network of one model on `s_tr` blocks: H1 from the
/// model's training device (after the PCE gate), H0 from the other models.
pub fn train_fusion_model(
    plan: &ExperimentPlan,
    corpus: &Corpus,
    model_id: &str,
    fp: &Fingerprint,
    cmi: &CmiModelBundle,
) -> Result<FusionModel> {
    let view = corpus.view(&[SetLabel::STr]);
    let denoiser = plan.denoiser()?;
    let dev = plan
        .training_device(model_id)
        .ok_or_else(|| Error::Plan(format!("unknown model {model_id}")))?;
    let h1 = gated(view.require(&dev.device_id, SetLabel::STr)?, fp, &denoiser)?;
    let h0 = other_model_images(plan, &view, model_id, SetLabel::STr)?;
    let sources: Vec<PairSource> = h1
        .iter()
        .map(|e| PairSource {
            image: &e.image,
            label: H1,
        })
        .chain(h0.iter().map(|e| PairSource {
            image: &e.image,
            label: H0,
        }))
        .collect();
    let pairs = build_training_pairs(
        &sources,
        fp,
        cmi,
        plan.fusion.blocks_per_image,
        &denoiser,
        derive_seed(plan.seed, &format!("fusion-pairs/{model_id}"), 0),
    )?;
    let mut config = plan.fusion_train_config();
    config.seed = derive_seed(config.seed, model_id, 0);
    let model = train_fusion(model_id, &pairs, &config)?;
    log::info!(
        "fusion {model_id}: {} pairs, final loss {:.4}",
        pairs.len(),
        model.stats.final_loss
    );
    Ok(model)
}

/// A forged image with its ground-truth mask and region size.
#[derive(Clone, Debug)]
pub struct Forgery {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub size: usize,
}

/// Copy-paste forgeries on the training-device images of `set`: every host
/// receives one region of each planned size, cut from an image of another
/// model at the same position.
pub fn forgeries(
    plan: &ExperimentPlan,
    view: &CorpusView<'_>,
    model_id: &str,
    set: SetLabel,
) -> Result<Vec<Forgery>> {
    let dev = plan
        .training_device(model_id)
        .ok_or_else(|| Error::Plan(format!("unknown model {model_id}")))?;
    let hosts = view.require(&dev.device_id, set)?;
    let donors = other_model_images(plan, view, model_id, set)?;
    if donors.is_empty() {
        return Err(Error::Plan(
            "forgeries need images from a second model".into(),
        ));
    }
    let sizes = &plan.forgery_sizes;
    let mut out = Vec::with_capacity(hosts.len() * sizes.len());
    for (k, host) in hosts.iter().enumerate() {
        for (si, &size) in sizes.iter().enumerate() {
            let n = k * sizes.len() + si;
            let donor = donors[n % donors.len()];
            let mut r = rng(derive_seed(
                plan.seed,
                &format!("forgery/{model_id}/{set}"),
                n as u64,
            ));
            let row = r.gen_range(0..=host.image.height() - size);
            let col = r.gen_range(0..=host.image.width() - size);
            let (image, mask) = make_forgery(&host.image, &donor.image, size, (row, col))?;
            out.push(Forgery { image, mask, size });
        }
    }
    Ok(out)
}

/// Fused and PRNU-only maps of one image from a single pass over its windows.
pub fn map_pair(
    plan: &ExperimentPlan,
    img: &RgbImage,
    fp: &Fingerprint,
    cmi: &CmiModelBundle,
    fusion: &FusionModel,
) -> Result<(ProbabilityMap, ProbabilityMap)> {
    let params = sliding_params(plan);
    let ev = window_evidence(img, fp, cmi, &params, &plan.denoiser()?)?;
    let (w, h) = (img.width(), img.height());
    Ok((
        fusion_map(w, h, &ev, fusion, &params)?,
        prnu_map(w, h, &ev, &params)?,
    ))
}

/// Per-model thresholds for the fused and the PRNU-only maps, from the
/// forgeries built on the calibration set `f`.
pub fn calibrate_model(
    plan: &ExperimentPlan,
    corpus: &Corpus,
    model_id: &str,
    fp: &Fingerprint,
    cmi: &CmiModelBundle,
    fusion: &FusionModel,
) -> Result<(ThresholdCalibration, ThresholdCalibration)> {
    let view = corpus.view(&[SetLabel::F]);
    let forged = forgeries(plan, &view, model_id, SetLabel::F)?;
    let maps = forged
        .par_iter()
        .map(|f| map_pair(plan, &f.image, fp, cmi, fusion))
        .collect::<Result<Vec<_>>>()?;
    let mut fused = Vec::with_capacity(maps.len());
    let mut prnu = Vec::with_capacity(maps.len());
    for ((a, b), f) in maps.into_iter().zip(&forged) {
        fused.push((a, f.mask.clone()));
        prnu.push((b, f.mask.clone()));
    }
    let radius = scaled_opening_radius(plan.resolution);
    let cal = calibrate_threshold(model_id, &fused, radius)?;
    let base = calibrate_threshold(model_id, &prnu, radius)?;
    log::info!(
        "calibration {model_id}: fusion tau {:.3} (F {:.3}), PRNU tau {:.3} (F {:.3})",
        cal.tau,
        cal.best_f_score(),
        base.tau,
        base.best_f_score()
    );
    Ok((cal, base))
}

/// Runs every training stage in protocol order.
pub fn prepare(plan: &ExperimentPlan, corpus: &Corpus) -> Result<Artifacts> {
    plan.validate()?;
    let mut art = Artifacts {
        fingerprints: estimate_fingerprints(plan, corpus)?,
        ..Artifacts::default()
    };
    for m in &plan.models {
        let b = train_classifier(plan, corpus, &m.model_id)?;
        art.cmi.insert(m.model_id.clone(), b);
    }
    train_fusion_stage(plan, corpus, &mut art)?;
    calibrate_stage(plan, corpus, &mut art)?;
    Ok(art)
}

/// Fusion training for every model; needs fingerprints and classifiers.
pub fn train_fusion_stage(
    plan: &ExperimentPlan,
    corpus: &Corpus,
    art: &mut Artifacts,
) -> Result<()> {
    let trained = plan
        .models
        .par_iter()
        .map(|m| {
            let id = &m.model_id;
            let dev = plan.training_device(id).expect("validated roster");
            train_fusion_model(
                plan,
                corpus,
                id,
                art.fingerprint(&dev.device_id)?,
                art.classifier(id)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    for f in trained {
        art.fusion.insert(f.model_id.clone(), f);
    }
    Ok(())
}

/// Threshold calibration for every model; needs all trained artifacts.
pub fn calibrate_stage(plan: &ExperimentPlan, corpus: &Corpus, art: &mut Artifacts) -> Result<()> {
    art.require(plan, false)?;
    let cals = plan
        .models
        .par_iter()
        .map(|m| {
            let id = &m.model_id;
            let dev = plan.training_device(id).expect("validated roster");
            calibrate_model(
                plan,
                corpus,
                id,
                art.fingerprint(&dev.device_id)?,
                art.classifier(id)?,
                art.fusion_model(id)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    for (m, (a, b)) in plan.models.iter().zip(cals) {
        art.calibration.insert(m.model_id.clone(), a);
        art.prnu_calibration.insert(m.model_id.clone(), b);
    }
    Ok(())
}

/// Block-level scores with the hypothesis each block belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockScore {
    pub block: BlockRef,
    pub rho: f64,
    pub phi: f64,
    pub theta: f64,
    pub h1: bool,
}

/// Scores `per_image` random blocks of each image. Block positions depend
/// only on the seed and the image's position in the list, so recompressed
/// copies of the same list are scored on the same blocks.
pub fn score_blocks(
    images: &[(&RgbImage, bool)],
    fp: &Fingerprint,
    cmi: &CmiModelBundle,
    fusion: &FusionModel,
    per_image: usize,
    denoiser: &Denoiser,
    seed: u64,
) -> Result<Vec<BlockScore>> {
    let size = cmi.block_size;
    let parts = images
        .par_iter()
        .enumerate()
        .map(|(k, (img, h1))| {
            let analysis = ImageAnalysis::new(img, denoiser)?;
            let mut r = rng(derive_seed(seed, "eval-blocks", k as u64));
            (0..per_image)
                .map(|_| {
                    let block = BlockRef::new(
                        aligned_origin(&mut r, img.height() - size),
                        aligned_origin(&mut r, img.width() - size),
                        k,
                        size,
                    );
                    let (rho, phi) = block_scores(img, &analysis, fp, cmi, &block)?;
                    Ok(BlockScore {
                        block,
                        rho,
                        phi,
                        theta: fusion.theta(rho, phi)?,
                        h1: *h1,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// AUCs of `rho`, `phi` and `1 - theta` with H1 as the positive class.
pub fn method_aucs(scores: &[BlockScore]) -> Result<[(Method, f64); 3]> {
    let auc = |f: &dyn Fn(&BlockScore) -> f64| {
        roc_auc(&scores.iter().map(|s| (f(s), s.h1)).collect::<Vec<_>>())
    };
    Ok([
        (Method::Prnu, auc(&|s| s.rho)?),
        (Method::Cnn, auc(&|s| s.phi)?),
        (Method::Fusion, auc(&|s| 1.0 - s.theta)?),
    ])
}

fn push_aucs(
    table: &mut ResultTable,
    model: &str,
    condition: &str,
    aucs: Result<[(Method, f64); 3]>,
) {
    match aucs {
        Ok(v) => {
            for (m, a) in v {
                table.push(model, m, condition, "auc", Some(a));
            }
        }
        Err(e) => {
            log::warn!("{model}/{condition}: {e}");
            for m in Method::ALL {
                table.push(model, m, condition, "auc", None);
            }
        }
    }
}

/// `s_ts` test images of one model: gated H1 images of `device_id` and H0
/// images from the other models' training devices.
fn test_images<'a>(
    plan: &ExperimentPlan,
    view: &CorpusView<'a>,
    model_id: &str,
    device_id: &str,
    fp: &Fingerprint,
) -> Result<Vec<(&'a RgbImage, bool)>> {
    let denoiser = plan.denoiser()?;
    let h1 = gated(view.require(device_id, SetLabel::STs)?, fp, &denoiser)?;
    let h0 = other_model_images(plan, view, model_id, SetLabel::STs)?;
    Ok(h1
        .iter()
        .map(|e| (&e.image, true))
        .chain(h0.iter().map(|e| (&e.image, false)))
        .collect())
}

fn eval_seed(plan: &ExperimentPlan, model_id: &str, device_id: &str) -> u64 {
    derive_seed(plan.seed, &format!("eval/{model_id}/{device_id}"), 0)
}

/// Block AUC of each method on `s_ts` for every model's training device,
/// plus the classifier's `c_ts` accuracy.
pub fn run_auc_experiment(
    plan: &ExperimentPlan,
    corpus: &Corpus,
    art: &Artifacts,
) -> Result<ResultTable> {
    art.require(plan, false)?;
    let view = corpus.view(&[SetLabel::STs]);
    let denoiser = plan.denoiser()?;
    let parts = plan
        .models
        .par_iter()
        .map(|m| {
            let id = &m.model_id;
            let dev = &plan
                .training_device(id)
                .expect("validated roster")
                .device_id;
            let fp = art.fingerprint(dev)?;
            let cmi = art.classifier(id)?;
            let fus = art.fusion_model(id)?;
            let mut t = ResultTable::default();
            let aucs = test_images(plan, &view, id, dev, fp).and_then(|imgs| {
                let s = score_blocks(
                    &imgs,
                    fp,
                    cmi,
                    fus,
                    plan.eval_blocks_per_image,
                    &denoiser,
                    eval_seed(plan, id, dev),
                )?;
                method_aucs(&s)
            });
            push_aucs(&mut t, id, "s_ts", aucs);
            t.push(id, Method::Cnn, "c_ts", "accuracy", cmi.test_accuracy);
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = ResultTable::default();
    parts.into_iter().for_each(|p| table.extend(p));
    table.add_averages(&model_ids(plan));
    Ok(table)
}

fn model_ids(plan: &ExperimentPlan) -> Vec<String> {
    plan.models.iter().map(|m| m.model_id.clone()).collect()
}

/// Block AUCs after recompressing every `s_ts` image at each planned
/// quality. Condition `none` is the unrecompressed baseline. The average
/// rows carry the relative fusion gain over the classifier per quality.
pub fn run_jpeg_experiment(
    plan: &ExperimentPlan,
    corpus: &Corpus,
    art: &Artifacts,
) -> Result<ResultTable> {
    art.require(plan, false)?;
    let view = corpus.view(&[SetLabel::STs]);
    let denoiser = plan.denoiser()?;
    let conditions: Vec<Option<u8>> = std::iter::once(None)
        .chain(plan.jpeg_qualities.iter().map(|&q| Some(q)))
        .collect();
    let parts = plan
        .models
        .par_iter()
        .map(|m| {
            let id = &m.model_id;
            let dev = &plan
                .training_device(id)
                .expect("validated roster")
                .device_id;
            let fp = art.fingerprint(dev)?;
            let cmi = art.classifier(id)?;
            let fus = art.fusion_model(id)?;
            let mut t = ResultTable::default();
            let imgs = test_images(plan, &view, id, dev, fp);
            for q in &conditions {
                let cond = q.map_or_else(|| "none".to_string(), |q| format!("q{q}"));
                let aucs = imgs
                    .as_ref()
                    .map_err(|e| Error::Dependency(e.to_string()))
                    .and_then(|imgs| {
                        let owned: Vec<(RgbImage, bool)> = match q {
                            None => imgs.iter().map(|(i, h)| ((*i).clone(), *h)).collect(),
                            Some(q) => imgs
                                .par_iter()
                                .map(|(i, h)| Ok((recompress(i, *q)?, *h)))
                                .collect::<Result<_>>()?,
                        };
                        let refs: Vec<(&RgbImage, bool)> =
                            owned.iter().map(|(i, h)| (i, *h)).collect();
                        let s = score_blocks(
                            &refs,
                            fp,
                            cmi,
                            fus,
                            plan.eval_blocks_per_image,
                            &denoiser,
                            eval_seed(plan, id, dev),
                        )?;
                        method_aucs(&s)
                    });
                push_aucs(&mut t, id, &cond, aucs);
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = ResultTable::default();
    parts.into_iter().for_each(|p| table.extend(p));
    table.add_averages(&model_ids(plan));
    for q in &conditions {
        let cond = q.map_or_else(|| "none".to_string(), |q| format!("q{q}"));
        let gain = match (
            table.get(AVERAGE_ROW, Method::Fusion, &cond, "auc"),
            table.get(AVERAGE_ROW, Method::Cnn, &cond, "auc"),
        ) {
            (Some(f), Some(c)) if c > 0.0 => Some(f / c - 1.0),
            _ => None,
        };
        table.push(AVERAGE_ROW, Method::Fusion, &cond, "gain_over_cnn", gain);
    }
    Ok(table)
}

/// Block AUCs on the extra devices of each model, reusing the training
/// device's classifier and fusion network with the new device's own
/// fingerprint.
pub fn run_cross_device_experiment(
    plan: &ExperimentPlan,
    corpus: &Corpus,
    art: &Artifacts,
) -> Result<ResultTable> {
    art.require(plan, false)?;
    let jobs: Vec<(&str, &str)> = plan
        .models
        .iter()
        .flat_map(|m| {
            plan.extra_devices(&m.model_id)
                .into_iter()
                .map(move |d| (m.model_id.as_str(), d.device_id.as_str()))
        })
        .collect();
    if jobs.is_empty() {
        return Err(Error::Plan("no model has a second device".into()));
    }
    let view = corpus.view(&[SetLabel::STs]);
    let denoiser = plan.denoiser()?;
    let parts = jobs
        .par_iter()
        .map(|&(id, dev)| {
            let fp = art.fingerprint(dev)?;
            let cmi = art.classifier(id)?;
            let fus = art.fusion_model(id)?;
            let mut t = ResultTable::default();
            let aucs = test_images(plan, &view, id, dev, fp).and_then(|imgs| {
                let s = score_blocks(
                    &imgs,
                    fp,
                    cmi,
                    fus,
                    plan.eval_blocks_per_image,
                    &denoiser,
                    eval_seed(plan, id, dev),
                )?;
                method_aucs(&s)
            });
            push_aucs(&mut t, id, dev, aucs);
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = ResultTable::default();
    parts.into_iter().for_each(|p| table.extend(p));
    Ok(table)
}

/// Mean F-score per model and region size on forgeries built from `s_ts`,
/// for the fused map and the PRNU-only map built from the same windows,
/// each binarized at its own calibrated threshold.
pub fn run_forgery_benchmark(
    plan: &ExperimentPlan,
    corpus: &Corpus,
    art: &Artifacts,
) -> Result<ResultTable> {
    art.require(plan, true)?;
    let view = corpus.view(&[SetLabel::STs]);
    let radius = scaled_opening_radius(plan.resolution);
    let parts = plan
        .models
        .par_iter()
        .map(|m| {
            let id = &m.model_id;
            let dev = &plan
                .training_device(id)
                .expect("validated roster")
                .device_id;
            let fp = art.fingerprint(dev)?;
            let cmi = art.classifier(id)?;
            let fus = art.fusion_model(id)?;
            let (cal, base) = art.thresholds(id)?;
            let scores = forgeries(plan, &view, id, SetLabel::STs).and_then(|forged| {
                forged
                    .par_iter()
                    .map(|f| {
                        let (a, b) = map_pair(plan, &f.image, fp, cmi, fus)?;
                        let fa = f_score(&binarize(&a, cal.tau, radius)?, &f.mask)?.1;
                        let fb = f_score(&binarize(&b, base.tau, radius)?, &f.mask)?.1;
                        Ok((f.size, fa, fb))
                    })
                    .collect::<Result<Vec<_>>>()
            });
            let mut t = ResultTable::default();
            for &size in &plan.forgery_sizes {
                let cond = format!("size{size}");
                let (fa, fb) = match &scores {
                    Ok(s) => {
                        let sel: Vec<_> = s.iter().filter(|x| x.0 == size).collect();
                        let n = sel.len() as f64;
                        (
                            Some(sel.iter().map(|x| x.1).sum::<f64>() / n),
                            Some(sel.iter().map(|x| x.2).sum::<f64>() / n),
                        )
                    }
                    Err(e) => {
                        log::warn!("{id}/{cond}: {e}");
                        (None, None)
                    }
                };
                t.push(id, Method::Fusion, &cond, "f_score", fa);
                t.push(id, Method::Prnu, &cond, "f_score", fb);
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = ResultTable::default();
    parts.into_iter().for_each(|p| table.extend(p));
    table.add_averages(&model_ids(plan));
    Ok(table)
}

/// Results of all four experiments.
#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub auc: ResultTable,
    pub jpeg: ResultTable,
    pub cross_device: ResultTable,
    pub forgery: ResultTable,
}

impl BenchReport {
    pub fn combined(&self) -> ResultTable {
        let mut t = ResultTable::default();
        for part in [&self.auc, &self.jpeg, &self.cross_device, &self.forgery] {
            t.extend(part.clone());
        }
        t
    }

    /// Plain-text tables in the layout of the published ones.
    pub fn summary(&self, plan: &ExperimentPlan) -> String {
        let mut s = String::new();
        let cell = |v: Option<f64>| v.map_or_else(|| "  fail".to_string(), |v| format!("{v:6.3}"));
        let _ = writeln!(s, "Block AUC on s_ts");
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>6} {:>6} {:>6}",
            "model", "acc", "PRNU", "CNN", "Fusion"
        );
        let mut rows = model_ids(plan);
        rows.push(AVERAGE_ROW.to_string());
        for id in &rows {
            let _ = writeln!(
                s,
                "{id:<8} {} {} {} {}",
                cell(self.auc.get(id, Method::Cnn, "c_ts", "accuracy")),
                cell(self.auc.get(id, Method::Prnu, "s_ts", "auc")),
                cell(self.auc.get(id, Method::Cnn, "s_ts", "auc")),
                cell(self.auc.get(id, Method::Fusion, "s_ts", "auc")),
            );
        }
        let ranges = REFERENCE_AUC_RANGE
            .iter()
            .map(|(m, lo, hi)| format!("{m} {lo:.2}-{hi:.2}"))
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(s, "reference AUC ranges: {ranges}");

        let _ = writeln!(s, "\nAverage block AUC after recompression");
        let mut conds = vec!["none".to_string()];
        conds.extend(plan.jpeg_qualities.iter().map(|q| format!("q{q}")));
        let _ = write!(s, "{:<8}", "method");
        for c in &conds {
            let _ = write!(s, " {c:>6}");
        }
        let _ = writeln!(s);
        for m in Method::ALL {
            let _ = write!(s, "{:<8}", m.to_string());
            for c in &conds {
                let _ = write!(s, " {}", cell(self.jpeg.get(AVERAGE_ROW, m, c, "auc")));
            }
            let _ = writeln!(s);
        }
        let _ = write!(s, "{:<8}", "gain");
        for c in &conds {
            let _ = write!(
                s,
                " {}",
                cell(
                    self.jpeg
                        .get(AVERAGE_ROW, Method::Fusion, c, "gain_over_cnn")
                )
            );
        }
        let _ = writeln!(
            s,
            "\nreference gain at the strongest compression: {REFERENCE_Q50_GAIN:.2}"
        );

        let _ = writeln!(s, "\nBlock AUC on devices unseen in training");
        let _ = writeln!(
            s,
            "{:<10} {:<8} {:>6} {:>6} {:>6}",
            "device", "model", "PRNU", "CNN", "Fusion"
        );
        for m in &plan.models {
            for d in plan.extra_devices(&m.model_id) {
                let g = |meth| {
                    cell(
                        self.cross_device
                            .get(&m.model_id, meth, &d.device_id, "auc"),
                    )
                };
                let _ = writeln!(
                    s,
                    "{:<10} {:<8} {} {} {}",
                    d.device_id,
                    m.model_id,
                    g(Method::Prnu),
                    g(Method::Cnn),
                    g(Method::Fusion)
                );
            }
        }

        let _ = writeln!(s, "\nMean F-score by forged region size");
        let _ = write!(s, "{:<8}", "model");
        for size in &plan.forgery_sizes {
            let _ = write!(s, " {:>13}", format!("{size}px F/PRNU"));
        }
        let _ = writeln!(s);
        for id in &rows {
            let _ = write!(s, "{id:<8}");
            for size in &plan.forgery_sizes {
                let c = format!("size{size}");
                let _ = write!(
                    s,
                    " {}/{}",
                    cell(self.forgery.get(id, Method::Fusion, &c, "f_score")),
                    cell(self.forgery.get(id, Method::Prnu, &c, "f_score"))
                );
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(
            s,
            "reference averages at full resolution (largest to smallest region):"
        );
        for (name, v) in REFERENCE_F_SCORES {
            let _ = writeln!(s, "  {name:<6} {:.2} {:.2} {:.2}", v[0], v[1], v[2]);
        }
        s
    }
}

/// Runs all four experiments on trained artifacts.
pub fn run_all(plan: &ExperimentPlan, corpus: &Corpus, art: &Artifacts) -> Result<BenchReport> {
    Ok(BenchReport {
        auc: run_auc_experiment(plan, corpus, art)?,
        jpeg: run_jpeg_experiment(plan, corpus, art)?,
        cross_device: run_cross_device_experiment(plan, corpus, art)?,
        forgery: run_forgery_benchmark(plan, corpus, art)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_csv_roundtrip_marks_failures() {
        let mut t = ResultTable::default();
        t.push("m1", Method::Prnu, "s_ts", "auc", Some(0.93));
        t.push("m1", Method::Cnn, "s_ts", "auc", None);
        let csv = t.to_csv().unwrap();
        assert!(csv.starts_with("model,method,condition,metric,value\n"));
        assert!(csv.contains("m1,CNN,s_ts,auc,failed"));
        let back = ResultTable::from_csv(&csv).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.get("m1", Method::Prnu, "s_ts", "auc"), Some(0.93));
        assert_eq!(back.failed().count(), 1);
    }

    #[test]
    fn averages_propagate_failures() {
        let mut t = ResultTable::default();
        t.push("a", Method::Prnu, "x", "auc", Some(0.8));
        t.push("b", Method::Prnu, "x", "auc", Some(0.6));
        t.push("a", Method::Cnn, "x", "auc", Some(0.9));
        t.push("b", Method::Cnn, "x", "auc", None);
        t.add_averages(&["a".into(), "b".into()]);
        assert!((t.get(AVERAGE_ROW, Method::Prnu, "x", "auc").unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(t.get(AVERAGE_ROW, Method::Cnn, "x", "auc"), None);
        assert_eq!(t.rows.len(), 6);
    }

    #[test]
    fn missing_artifacts_are_listed() {
        let plan = ExperimentPlan::desk(0);
        let art = Artifacts::default();
        let missing = art.missing(&plan, true);
        assert_eq!(missing.len(), 6 + 3 * 4);
        match art.require(&plan, false) {
            Err(Error::Dependency(msg)) => {
                assert!(msg.contains("fingerprints/m1-dev1.fp"));
                assert!(msg.contains("cmi/m3.nnet"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn method_aucs_orient_theta() {
        let b = BlockRef::new(0, 0, 0, 8);
        let s = [
            BlockScore {
                block: b,
                rho: 0.3,
                phi: 0.9,
                theta: 0.1,
                h1: true,
            },
            BlockScore {
                block: b,
                rho: 0.0,
                phi: 0.2,
                theta: 0.8,
                h1: false,
            },
        ];
        let aucs = method_aucs(&s).unwrap();
        assert!(aucs.iter().all(|(_, a)| *a == 1.0));
    }
}
