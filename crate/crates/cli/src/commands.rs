use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::de::DeserializeOwned;
use xcorr::correspondence::{generate_correspondence, generate_correspondence_oracle, normalize};
use xcorr::dataset::{generate_dataset, manifest_path, validate_dataset, Manifest, Split, VariationSpec, VolumeSource};
use xcorr::geometry::{Detector, ProjectionMode, ViewGeometry};
use xcorr::matcher::{
    evaluate_classifier, evaluate_correspondence, gradcheck as run_gradcheck, load_checkpoint,
    load_examples, save_checkpoint, train_classifier, train_correspondence, write_history_csv,
    BiasSource, Example, MatcherConfig, MatcherModel, TrainResult,
};
use xcorr::phantom::{anomaly_task, make_phantom, random_limb, PhantomSpec};
use xcorr::projector::{render_drr, render_drr_marching};
use xcorr::volume::{load_volume, save_volume, sidecar_path, Volume, VolumeFormat};
use xcorr::Error;

use crate::args::*;
use crate::{invalid, CmdResult, Failure};

fn io_err(path: &Path, source: std::io::Error) -> Failure {
    Failure::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(io_err(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Failure::Core(Error::Json {
            context: path.display().to_string(),
            source: e,
        })
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn append_csv_row(path: &Path, header: &str, row: &str) -> Result<(), Failure> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let text = if fresh { format!("{header}\n{row}\n") } else { format!("{row}\n") };
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

/// Raw payloads carry their header at `<path>.json`; a `.json` path is a
/// header-first file.
fn read_volume(path: &Path) -> Result<Volume, Failure> {
    require_file(path)?;
    let format = if path.extension().is_some_and(|e| e == "json") {
        VolumeFormat::HeaderFirst
    } else {
        VolumeFormat::RawF32
    };
    Ok(load_volume(path, format)?)
}

fn read_geometry(path: &Path) -> Result<ViewGeometry, Failure> {
    require_file(path)?;
    read_json(path)
}

fn read_model_config(path: Option<&Path>) -> Result<MatcherConfig, Failure> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => MatcherConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_manifest(dir: &Path) -> Result<Manifest, Failure> {
    let path = manifest_path(dir);
    require_file(&path)?;
    Ok(Manifest::load(&path)?)
}

fn history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

pub fn phantom(a: PhantomArgs) -> CmdResult {
    let spec = match (&a.spec, a.limb_seed) {
        (Some(path), _) => {
            require_file(path)?;
            PhantomSpec::load(path)?
        }
        (None, Some(seed)) => {
            if a.size == 0 {
                return Err(invalid("--size must be >= 1"));
            }
            random_limb([a.size; 3], [1.0; 3], seed, None)
        }
        (None, None) => return Err(invalid("either --spec or --limb-seed is required")),
    };
    let vol = make_phantom(&spec)?;
    save_volume(&vol, &a.out)?;
    if let Some(p) = &a.save_spec {
        write_text(p, &serde_json::to_string_pretty(&spec).expect("spec serializes"))?;
    }
    info!("wrote {} ({:?} voxels)", a.out.display(), vol.dims);
    Ok(())
}

fn resolve_geometry(a: &RenderArgs) -> Result<ViewGeometry, Failure> {
    let base = a.geometry.as_deref().map(read_geometry).transpose()?;
    let mode = a.mode.or(base.as_ref().map(|g| g.mode));
    let rotation = match &a.rotation_deg {
        Some(r) if r.len() == 3 => [r[0], r[1], r[2]],
        Some(r) => return Err(invalid(format!("--rotation-deg needs 3 values, got {}", r.len()))),
        None => base.as_ref().map_or([0.0; 3], |g| g.rotation_deg),
    };
    let detector = match &a.detector {
        Some(d) if d.len() == 5 => {
            if d[0].fract() != 0.0 || d[1].fract() != 0.0 || d[0] < 1.0 || d[1] < 1.0 {
                return Err(invalid("detector pixel counts must be positive integers"));
            }
            Some(Detector {
                nu: d[0] as usize,
                nv: d[1] as usize,
                du: d[2],
                dv: d[3],
                distance: d[4],
            })
        }
        Some(d) => return Err(invalid(format!("--detector needs 5 values, got {}", d.len()))),
        None => base.as_ref().map(|g| g.detector),
    };
    let (Some(mode), Some(detector)) = (mode, detector) else {
        return Err(invalid("geometry needs a mode and a detector (--geometry or inline flags)"));
    };
    let source_distance = a
        .source_distance_mm
        .or(base.as_ref().map(|g| g.source_distance))
        .unwrap_or(0.0);
    if mode == ProjectionMode::Cone && source_distance <= 0.0 {
        return Err(invalid("cone mode needs a positive source distance"));
    }
    Ok(ViewGeometry {
        mode,
        rotation_deg: rotation,
        source_distance,
        detector,
        isocenter: base.and_then(|g| g.isocenter),
    })
}

pub fn render(a: RenderArgs) -> CmdResult {
    let geom = resolve_geometry(&a)?;
    let vol = read_volume(&a.volume)?;
    geom.validate(&vol)?;
    if !(a.oracle_step > 0.0) {
        return Err(invalid("--oracle-step must be positive"));
    }
    let img = render_drr(&vol, &geom)?;
    img.save_pgm16(&a.out)?;
    if let Some(raw) = &a.raw {
        img.save_raw_f32(raw)?;
    }
    info!("wrote {} ({}x{})", a.out.display(), img.nu, img.nv);
    if a.oracle {
        let reference = render_drr_marching(&vol, &geom, a.oracle_step * vol.min_spacing())?;
        let diff: f64 = img
            .pixels
            .iter()
            .zip(&reference.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = reference.pixels.iter().map(|b| b * b).sum::<f64>().sqrt();
        let rel = if norm > 0.0 { diff / norm } else { diff };
        println!("oracle relative L2 {rel:.6e}");
    }
    Ok(())
}

pub fn corrgen(a: CorrgenArgs) -> CmdResult {
    let g1 = read_geometry(&a.geometry1)?;
    let g2 = read_geometry(&a.geometry2)?;
    let vol = read_volume(&a.volume)?;
    let r = generate_correspondence(&vol, &g1, &g2, a.k)?;
    let matrix = if a.normalize { normalize(&r.matrix) } else { r.matrix.clone() };
    let out = &a.out_dir;
    matrix.save(&out.join("corr.bin"))?;
    matrix.save_heatmap(&out.join("corr.pgm"))?;
    r.view1.save_pgm16(&out.join("view1.pgm"))?;
    r.view2.save_pgm16(&out.join("view2.pgm"))?;
    if a.csv {
        matrix.save_csv(&out.join("corr.csv"))?;
    }
    let (rows, cols) = matrix.shape();
    println!("correspondence {rows}x{cols}, {} nonzero", matrix.nnz());
    if a.verify {
        let oracle = generate_correspondence_oracle(&vol, &g1, &g2, a.k)?;
        let (fast, slow) = (r.matrix.to_dense(), oracle.to_dense());
        let max_diff = fast
            .iter()
            .zip(&slow)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        // Exact agreement is expected only when pixels line up with voxels.
        println!("oracle max abs difference {max_diff:.3e}");
    }
    Ok(())
}

/// Reads a variation file whose angle ranges are in degrees.
fn read_variations(path: &Path) -> Result<VariationSpec, Failure> {
    require_file(path)?;
    let mut v: serde_json::Value = read_json(path)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| invalid(format!("{}: expected a JSON object", path.display())))?;
    for view in ["view1", "view2"] {
        if obj.contains_key(&format!("{view}_angles_rad")) {
            return Err(invalid(format!("{view}_angles_rad: give angles in degrees as {view}_angles_deg")));
        }
        if let Some(deg) = obj.remove(&format!("{view}_angles_deg")) {
            let ranges: [[f64; 2]; 3] = serde_json::from_value(deg).map_err(|e| Error::Json {
                context: format!("{}: {view}_angles_deg", path.display()),
                source: e,
            })?;
            let rad = ranges.map(|r| r.map(f64::to_radians));
            obj.insert(format!("{view}_angles_rad"), serde_json::to_value(rad).unwrap());
        }
    }
    let spec: VariationSpec = serde_json::from_value(v).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    spec.validate()?;
    Ok(spec)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| io_err(dir, err)))
        .collect::<Result<_, _>>()?;
    paths.sort();
    Ok(paths)
}

fn dataset_sources(a: &DatasetArgs) -> Result<Vec<VolumeSource>, Failure> {
    if let Some(dir) = &a.volumes {
        sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_none_or(|e| e != "json") && sidecar_path(p).is_file())
            .map(|p| read_volume(&p).map(VolumeSource::Volume))
            .collect()
    } else if let Some(dir) = &a.specs {
        sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .map(|p| Ok(VolumeSource::Phantom(PhantomSpec::load(&p)?)))
            .collect()
    } else {
        let kind = a.synthetic.as_deref().unwrap_or("limb");
        if a.size == 0 || a.count == 0 {
            return Err(invalid("--size and --count must be >= 1"));
        }
        (0..a.count)
            .map(|i| {
                let seed = a.phantom_seed + i as u64;
                match kind {
                    "limb" => Ok(VolumeSource::Phantom(random_limb([a.size; 3], [1.0; 3], seed, None))),
                    "anomaly" => Ok(VolumeSource::Phantom(anomaly_task(a.size, seed, i % 2 == 0, a.delta))),
                    other => Err(invalid(format!("unknown --synthetic kind {other:?} (limb, anomaly)"))),
                }
            })
            .collect()
    }
}

pub fn dataset(a: DatasetArgs) -> CmdResult {
    let var = read_variations(&a.variations)?;
    let sources = dataset_sources(&a)?;
    if sources.is_empty() {
        return Err(invalid("no input volumes found"));
    }
    let manifest = generate_dataset(&sources, &var, a.k, &a.out_dir)?;
    let expected = sources.len() * var.pairs_per_volume;
    if manifest.samples.len() < expected {
        warn!("{} of {expected} samples failed and were skipped", expected - manifest.samples.len());
    }
    let count = |s| manifest.split(s).count();
    println!(
        "{} samples (train {}, val {}, test {})",
        manifest.samples.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    if a.verify {
        let summary = validate_dataset(&a.out_dir, &manifest, &sources, 0.1)?;
        println!("verified {} samples, {} failures", summary.checked, summary.failures.len());
        if !summary.failures.is_empty() {
            return Err(Failure::Check(summary.failures.join("; ")));
        }
    }
    Ok(())
}

fn split_examples(dir: &Path, manifest: &Manifest, patch: usize) -> Result<(Vec<Example>, Vec<Example>), Failure> {
    let train = load_examples(dir, manifest, Some(Split::Train), patch)?;
    let val = load_examples(dir, manifest, Some(Split::Val), patch)?;
    if train.is_empty() {
        return Err(invalid("dataset has no training samples"));
    }
    info!("{} training and {} validation samples", train.len(), val.len());
    Ok((train, val))
}

/// Saves the selected model and history, then reports divergence if any.
fn finish_training(r: TrainResult, out: &Path, metric: &str) -> CmdResult {
    save_checkpoint(&r.model, out)?;
    write_history_csv(&history_path(out), &r.history, metric)?;
    if let Some(best) = r.history.iter().find(|h| h.epoch == r.best_epoch) {
        println!(
            "best epoch {} val loss {:.6e} val {metric} {:.4}",
            best.epoch, best.val_loss, best.val_metric
        );
    }
    match r.diverged {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = read_model_config(a.model_config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let lr = a.lr.unwrap_or(cfg.lr_pretrain);
    let manifest = read_manifest(&a.data)?;
    let (train, val) = split_examples(&a.data, &manifest, cfg.patch_size)?;
    let model = MatcherModel::new(&cfg)?;
    info!("{} parameters", model.num_params());
    finish_training(train_correspondence(model, &train, &val, lr)?, &a.out, "ap")
}

pub fn finetune(a: FinetuneArgs) -> CmdResult {
    require_file(&a.checkpoint)?;
    let mut model = load_checkpoint(&a.checkpoint)?;
    if let Some(e) = a.epochs {
        model.config.epochs = e;
    }
    model.config.validate()?;
    let lr = a.lr.unwrap_or(model.config.lr_finetune);
    let manifest = read_manifest(&a.data)?;
    let (train, val) = split_examples(&a.data, &manifest, model.config.patch_size)?;
    finish_training(train_correspondence(model, &train, &val, lr)?, &a.out, "ap")
}

pub fn eval(a: EvalArgs) -> CmdResult {
    require_file(&a.checkpoint)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = read_manifest(&a.data)?;
    let examples = load_examples(&a.data, &manifest, a.split, model.config.patch_size)?;
    if examples.is_empty() {
        return Err(invalid("no samples in the requested split"));
    }
    let (mean, per) = evaluate_correspondence(&model, &examples, a.tau_gt, a.tau_pred)?;
    println!("{:<8} {:>7} {:>12} {:>9} {:>9} {:>9}", "split", "samples", "mse", "precision", "recall", "ap");
    let name = a.split.map_or("all".to_string(), |s| serde_json::to_value(s).unwrap().as_str().unwrap().to_owned());
    println!(
        "{:<8} {:>7} {:>12.4e} {:>9.4} {:>9.4} {:>9.4}",
        name, mean.samples, mean.mse, mean.precision, mean.recall, mean.average_precision
    );
    if mean.empty_ground_truth > 0 {
        warn!("{} samples had no positive ground truth and were left out of AP", mean.empty_ground_truth);
    }
    if let Some(p) = &a.report {
        mean.append_csv(p, &name)?;
    }
    if let Some(p) = &a.per_sample {
        let mut s = String::from("id,mse,precision,recall,ap\n");
        for (ex, r) in examples.iter().zip(&per) {
            s.push_str(&format!(
                "{},{:.9e},{:.6},{:.6},{:.6}\n",
                ex.id, r.mse, r.precision, r.recall, r.average_precision
            ));
        }
        write_text(p, &s)?;
    }
    Ok(())
}

pub fn classify(a: ClassifyArgs) -> CmdResult {
    let checkpoint = a.checkpoint.as_deref().map(|p| require_file(p).and_then(|_| Ok(load_checkpoint(p)?))).transpose()?;
    if a.pretrained && checkpoint.is_none() {
        return Err(invalid("--pretrained needs --checkpoint"));
    }
    if a.bias == BiasSource::Predicted && checkpoint.is_none() {
        return Err(invalid("--bias predicted needs --checkpoint"));
    }
    let mut init = match (&checkpoint, a.pretrained) {
        (Some(m), true) => m.clone(),
        _ => MatcherModel::new(&read_model_config(a.model_config.as_deref())?)?,
    };
    let reseed = a.seed.filter(|&s| s != init.config.seed);
    if let Some(e) = a.epochs {
        init.config.epochs = e;
    }
    if let Some(s) = reseed {
        init.config.seed = s;
        if !a.pretrained {
            init = MatcherModel::new(&init.config)?;
        }
    }
    init.config.bias_source = a.bias;
    init.config.validate()?;
    let lr = a.lr.unwrap_or(if a.pretrained { init.config.lr_finetune } else { init.config.lr_pretrain });
    let manifest = read_manifest(&a.data)?;
    let (train, val) = split_examples(&a.data, &manifest, init.config.patch_size)?;
    let test = load_examples(&a.data, &manifest, Some(Split::Test), init.config.patch_size)?;
    if test.is_empty() {
        return Err(invalid("dataset has no test samples"));
    }
    let bias_model = checkpoint.as_ref();
    let r = train_classifier(init, &train, &val, a.fusion, a.bias, bias_model, lr)?;
    if let Some(out) = &a.out {
        save_checkpoint(&r.model, out)?;
        write_history_csv(&history_path(out), &r.history, "accuracy")?;
    }
    if let Some(e) = r.diverged {
        return Err(e.into());
    }
    let (rep, _) = evaluate_classifier(&r.model, &test, a.fusion, a.bias, bias_model)?;
    let label = |v: serde_json::Value| v.as_str().unwrap_or_default().to_owned();
    let fusion = label(serde_json::to_value(a.fusion).unwrap());
    let bias = label(serde_json::to_value(a.bias).unwrap());
    println!(
        "fusion {fusion} bias {bias} pretrained {}: accuracy {:.4} precision {:.4} recall {:.4} kappa {:.4} ({} test samples)",
        a.pretrained, rep.accuracy, rep.precision, rep.recall, rep.kappa, rep.samples
    );
    if let Some(p) = &a.report {
        append_csv_row(
            p,
            "fusion,bias,pretrained,seed,accuracy,precision,recall,kappa,samples",
            &format!(
                "{fusion},{bias},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                a.pretrained, r.model.config.seed, rep.accuracy, rep.precision, rep.recall, rep.kappa, rep.samples
            ),
        )?;
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = match &a.model_config {
        Some(p) => read_model_config(Some(p))?,
        None => MatcherConfig {
            patch_size: 2,
            embed_dim: 8,
            heads: 2,
            head_dim: 4,
            layers: 2,
            ..MatcherConfig::default()
        },
    };
    let [rows, cols] = a.grid[..] else {
        return Err(invalid("--grid needs rows,cols"));
    };
    if rows == 0 || cols == 0 || a.models == 0 {
        return Err(invalid("--grid and --models must be positive"));
    }
    let mut worst = (0.0f64, String::new(), 0);
    for seed in 0..a.models {
        let r = run_gradcheck(&cfg, (rows, cols), seed)?;
        for (name, err) in &r.groups {
            log::debug!("seed {seed} {name}: {err:.3e}");
        }
        if r.worst > worst.0 {
            worst = (r.worst, r.worst_group.clone(), seed);
        }
    }
    println!("worst relative error {:.3e} ({} in model {})", worst.0, worst.1, worst.2);
    if worst.0 >= a.tolerance {
        return Err(Failure::Check(format!(
            "gradient error {:e} exceeds tolerance {:e}",
            worst.0, a.tolerance
        )));
    }
    Ok(())
}
