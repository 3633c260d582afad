use std::path::{Path, PathBuf};

use prnufuse_core::bench::{self, Artifacts};
use prnufuse_core::cmi::SamplingCounts;
use prnufuse_core::imaging::{read_image, read_mask, write_atomic, write_mask};
use prnufuse_core::localize::{
    binarize, confusion, scaled_opening_radius, sliding_map, Aggregation, SlidingParams,
};
use prnufuse_core::plan::{simulate, ArchKind, Corpus, ExperimentPlan, SetSizes, MANIFEST_NAME};
use prnufuse_core::{Error, Result};
use serde_json::json;

use crate::{Command, PlanArgs, Profile, StoreArgs};

/// Plan file name written next to a simulated corpus.
const PLAN_NAME: &str = "plan.txt";

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { plan, out } => cmd_simulate(&plan, &out),
        Command::Fingerprint { io, plan } => cmd_fingerprint(&io, &plan),
        Command::TrainCmi { io, plan, models } => cmd_train_cmi(&io, &plan, &models),
        Command::TrainFusion { io, plan } => cmd_train_fusion(&io, &plan),
        Command::Calibrate { io, plan } => cmd_calibrate(&io, &plan),
        Command::Detect {
            store,
            plan,
            image,
            model,
            device,
            truth,
            tau,
            map,
            mask,
        } => cmd_detect(&DetectArgs {
            store: &store,
            plan: &plan,
            image: &image,
            model: &model,
            device: device.as_deref(),
            truth: truth.as_deref(),
            tau,
            map: &map,
            mask: &mask,
        }),
        Command::Bench {
            io,
            plan,
            out,
            train,
        } => cmd_bench(&io, &plan, &out, train),
    }
}

fn corpus_dir(corpus: &Path) -> PathBuf {
    if corpus.is_dir() {
        corpus.to_path_buf()
    } else {
        corpus.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn manifest_path(corpus: &Path) -> PathBuf {
    if corpus.is_dir() {
        corpus.join(MANIFEST_NAME)
    } else {
        corpus.to_path_buf()
    }
}

impl PlanArgs {
    /// Plan file (explicit, else the corpus's own, else the desk default)
    /// with every flag override applied.
    fn resolve(&self, corpus: Option<&Path>) -> Result<ExperimentPlan> {
        let mut plan = match (&self.plan, corpus) {
            (Some(p), _) => ExperimentPlan::load(p)?,
            (None, Some(c)) if corpus_dir(c).join(PLAN_NAME).exists() => {
                ExperimentPlan::load(corpus_dir(c).join(PLAN_NAME))?
            }
            _ => ExperimentPlan::desk(0),
        };
        match self.profile {
            Some(Profile::Full) => {
                plan.sizes = SetSizes::full();
                plan.cmi.arch = ArchKind::Full;
                plan.cmi.counts = SamplingCounts::full();
            }
            Some(Profile::Desk) => {
                let desk = ExperimentPlan::desk(plan.seed);
                plan.sizes = desk.sizes;
                plan.cmi.arch = desk.cmi.arch;
                plan.cmi.counts = desk.cmi.counts;
            }
            None => {}
        }
        if let Some(s) = self.seed {
            plan.seed = s;
        }
        if let Some(s) = self.stride {
            plan.stride = s;
        }
        if let Some(s) = self.sigma0 {
            plan.sigma0 = s;
        }
        if let Some(e) = self.cmi_epochs {
            plan.cmi.epochs = e;
        }
        if let Some(e) = self.fusion_epochs {
            plan.fusion.epochs = e;
        }
        plan.validate()?;
        Ok(plan)
    }
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn load_inputs(io: &StoreArgs, plan: &PlanArgs) -> Result<(ExperimentPlan, Corpus, Artifacts)> {
    let plan = plan.resolve(Some(&io.corpus))?;
    let manifest = manifest_path(&io.corpus);
    if !manifest.exists() {
        return Err(Error::Dependency(format!(
            "corpus manifest {}",
            manifest.display()
        )));
    }
    let corpus = Corpus::load(&manifest)?;
    let art = if io.store.exists() {
        Artifacts::load(&io.store, &plan)?
    } else {
        Artifacts::default()
    };
    Ok((plan, corpus, art))
}

/// Fails listing the missing artifacts whose store path starts with one of
/// `prefixes`.
fn require_some(
    art: &Artifacts,
    plan: &ExperimentPlan,
    calibrated: bool,
    prefixes: &[&str],
) -> Result<()> {
    let missing: Vec<String> = art
        .missing(plan, calibrated)
        .into_iter()
        .filter(|m| prefixes.iter().any(|p| m.starts_with(p)))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Dependency(missing.join(", ")))
    }
}

fn cmd_simulate(args: &PlanArgs, out: &Path) -> Result<()> {
    let plan = args.resolve(None)?;
    let corpus = simulate(&plan)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Argument(format!("{}: {e}", out.display())))?;
    corpus.write(out)?;
    plan.save(out.join(PLAN_NAME))?;
    emit(json!({
        "event": "simulate",
        "images": corpus.len(),
        "models": plan.models.len(),
        "devices": plan.devices.len(),
        "out": out.display().to_string(),
    }));
    Ok(())
}

fn cmd_fingerprint(io: &StoreArgs, args: &PlanArgs) -> Result<()> {
    let (plan, corpus, mut art) = load_inputs(io, args)?;
    art.fingerprints = bench::estimate_fingerprints(&plan, &corpus)?;
    art.save(&io.store)?;
    for (id, fp) in &art.fingerprints {
        emit(json!({"event": "fingerprint", "device": id, "images": fp.num_images()}));
    }
    Ok(())
}

fn cmd_train_cmi(io: &StoreArgs, args: &PlanArgs, only: &[String]) -> Result<()> {
    let (plan, corpus, mut art) = load_inputs(io, args)?;
    for id in only {
        if plan.model(id).is_none() {
            return Err(Error::Argument(format!("unknown model {id:?}")));
        }
    }
    for m in &plan.models {
        if !only.is_empty() && !only.contains(&m.model_id) {
            continue;
        }
        let bundle = bench::train_classifier(&plan, &corpus, &m.model_id)?;
        emit(json!({
            "event": "train-cmi",
            "model": m.model_id,
            "accuracy": bundle.test_accuracy,
            "arch": bundle.net.arch_string(),
        }));
        art.cmi.insert(m.model_id.clone(), bundle);
        art.save(&io.store)?;
    }
    Ok(())
}

fn cmd_train_fusion(io: &StoreArgs, args: &PlanArgs) -> Result<()> {
    let (plan, corpus, mut art) = load_inputs(io, args)?;
    require_some(&art, &plan, false, &["fingerprints/", "cmi/"])?;
    bench::train_fusion_stage(&plan, &corpus, &mut art)?;
    art.save(&io.store)?;
    for (id, f) in &art.fusion {
        emit(json!({
            "event": "train-fusion",
            "model": id,
            "pairs": f.stats.pairs,
            "final_loss": f.stats.final_loss,
        }));
    }
    Ok(())
}

fn cmd_calibrate(io: &StoreArgs, args: &PlanArgs) -> Result<()> {
    let (plan, corpus, mut art) = load_inputs(io, args)?;
    bench::calibrate_stage(&plan, &corpus, &mut art)?;
    art.save(&io.store)?;
    for (id, c) in &art.calibration {
        emit(json!({
            "event": "calibrate",
            "model": id,
            "tau": c.tau,
            "f_score": c.best_f_score(),
            "interior": c.is_interior(),
            "prnu_tau": art.prnu_calibration.get(id).map(|p| p.tau),
        }));
    }
    Ok(())
}

struct DetectArgs<'a> {
    store: &'a Path,
    plan: &'a PlanArgs,
    image: &'a Path,
    model: &'a str,
    device: Option<&'a str>,
    truth: Option<&'a Path>,
    tau: Option<f64>,
    map: &'a Path,
    mask: &'a Path,
}

fn cmd_detect(a: &DetectArgs<'_>) -> Result<()> {
    let plan = a.plan.resolve(None)?;
    let art = Artifacts::load(a.store, &plan)?;
    let device = match a.device {
        Some(d) => d.to_string(),
        None => plan
            .training_device(a.model)
            .ok_or_else(|| Error::Argument(format!("unknown model {:?}", a.model)))?
            .device_id
            .clone(),
    };
    let mut missing = Vec::new();
    if !art.fingerprints.contains_key(&device) {
        missing.push(format!("fingerprints/{device}.fp"));
    }
    for (have, what) in [
        (
            art.cmi.contains_key(a.model),
            format!("cmi/{}.nnet", a.model),
        ),
        (
            art.fusion.contains_key(a.model),
            format!("fusion/{}.nnet", a.model),
        ),
        (
            a.tau.is_some() || art.calibration.contains_key(a.model),
            format!("calibration/{}.txt", a.model),
        ),
    ] {
        if !have {
            missing.push(what);
        }
    }
    if !missing.is_empty() {
        return Err(Error::Dependency(missing.join(", ")));
    }
    let tau = match a.tau {
        Some(t) => t,
        None => art.calibration[a.model].tau,
    };
    let img = read_image(a.image)?.into_rgb()?;
    let params = SlidingParams {
        window: plan.window,
        stride: plan.stride,
        aggregation: Aggregation::Mean,
    };
    let map = sliding_map(
        &img,
        art.fingerprint(&device)?,
        art.classifier(a.model)?,
        art.fusion_model(a.model)?,
        &params,
        &plan.denoiser()?,
    )?;
    let radius = scaled_opening_radius(img.width());
    let bin = binarize(&map, tau, radius)?;
    map.save(a.map, Some(tau))?;
    write_mask(a.mask, &bin)?;
    let total = (bin.width() * bin.height()) as f64;
    let mut record = json!({
        "event": "detect",
        "image": a.image.display().to_string(),
        "model": a.model,
        "device": device,
        "tau": tau,
        "opening_radius": radius,
        "positive_fraction": bin.count_ones() as f64 / total,
        "mean_score": map.data().iter().sum::<f64>() / total,
    });
    if let Some(t) = a.truth {
        let truth = read_mask(t)?;
        let c = confusion(&bin, &truth)?;
        record["tp"] = json!(c.tp);
        record["fp"] = json!(c.fp);
        record["fn"] = json!(c.fn_);
        record["tn"] = json!(c.tn);
        record["f_score"] = json!(c.f_score());
    }
    emit(record);
    Ok(())
}

fn cmd_bench(io: &StoreArgs, args: &PlanArgs, out: &Path, train: bool) -> Result<()> {
    let (plan, corpus, mut art) = load_inputs(io, args)?;
    if train {
        if plan
            .devices
            .iter()
            .any(|d| !art.fingerprints.contains_key(&d.device_id))
        {
            art.fingerprints = bench::estimate_fingerprints(&plan, &corpus)?;
        }
        for m in &plan.models {
            if !art.cmi.contains_key(&m.model_id) {
                let b = bench::train_classifier(&plan, &corpus, &m.model_id)?;
                art.cmi.insert(m.model_id.clone(), b);
            }
        }
        if plan
            .models
            .iter()
            .any(|m| !art.fusion.contains_key(&m.model_id))
        {
            bench::train_fusion_stage(&plan, &corpus, &mut art)?;
        }
        if !art.missing(&plan, true).is_empty() {
            bench::calibrate_stage(&plan, &corpus, &mut art)?;
        }
        art.save(&io.store)?;
    }
    art.require(&plan, true)?;
    let report = bench::run_all(&plan, &corpus, &art)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Argument(format!("{}: {e}", out.display())))?;
    report.combined().write_csv(out.join("results.csv"))?;
    let summary = report.summary(&plan);
    write_atomic(out.join("summary.txt"), summary.as_bytes())?;
    let table = report.combined();
    emit(json!({
        "event": "bench",
        "rows": table.rows.len(),
        "failed": table.failed().count(),
        "out": out.display().to_string(),
    }));
    Ok(())
}
