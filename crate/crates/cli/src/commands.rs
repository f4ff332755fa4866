use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Axis, IxDyn};
use unisod::checkpoint::{Checkpoint, FORMAT_VERSION};
use unisod::config::FlatConfig;
use unisod::data::{list_images, load_aux, load_rgb, load_sample, resize_bilinear, save_gray_png, scan_dataset, Sample};
use unisod::metrics::evaluate_dataset;
use unisod::partition::ParameterPartition;
use unisod::trainer::{attach_prompts, RunOutput, Trainer};
use unisod::{Error, Modality, Profile, PromptPath, Result, Settings, TrainMode, UniSod};

use crate::manifest::{describe_output, InputHasher, OutputFile, RunManifest};
use crate::ConfigArgs;

/// Keys that fix the network's shapes. Adapting a checkpoint reuses them so
/// the model matches the stored tensors unless the user overrides them.
const ARCHITECTURE_KEYS: &[&str] = &[
    "backbone.channels",
    "backbone.variant",
    "transformer.layers",
    "decoder.width",
    "data.height",
    "data.width",
];

/// The resolved configuration, plus only what the user supplied, so callers
/// can tell an explicit value from a default.
struct Layered {
    flat: FlatConfig,
    user: FlatConfig,
}

fn layered(args: &ConfigArgs, base: Option<&FlatConfig>) -> Result<Layered> {
    let mut user = match &args.config {
        Some(p) => FlatConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("cannot read config file {}: {source}", path.display())),
            other => other,
        })?,
        None => FlatConfig::default(),
    };
    for s in &args.set {
        user.set(s)?;
    }
    let profile: Profile = user
        .get("profile")
        .unwrap_or(&args.profile)
        .parse()
        .map_err(|e| Error::Config(format!("profile: {e}")))?;
    let mut flat = FlatConfig::defaults(profile);
    if let Some(base) = base {
        for k in ARCHITECTURE_KEYS {
            if let Some(v) = base.get(k) {
                flat.0.insert(k.to_string(), v.to_string());
            }
        }
    }
    flat.overlay(&user);
    Ok(Layered { flat, user })
}

fn put(flat: &mut FlatConfig, key: &str, value: impl ToString) {
    flat.0.insert(key.to_string(), value.to_string());
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain JSON values");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scans and loads the configured dataset, hashing every file it reads.
fn load_training_set(settings: &Settings, hasher: &mut InputHasher) -> Result<Vec<Sample>> {
    let spec = settings
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given; pass --data or set data.root".into()))?;
    let report = scan_dataset(spec)?;
    for r in &report.rejects {
        eprintln!("warning: skipping {}: {}", r.id, r.reason);
    }
    if report.samples.is_empty() {
        return Err(Error::Data(format!("no usable samples under {}", spec.root.display())));
    }
    let mut samples = Vec::with_capacity(report.samples.len());
    for d in &report.samples {
        for p in [Some(&d.rgb), d.aux.as_ref(), Some(&d.gt)].into_iter().flatten() {
            hasher.file(p)?;
        }
        samples.push(load_sample(d, spec.modality, spec.target_size)?);
    }
    Ok(samples)
}

fn finish_manifest(
    command: &str,
    args: &[String],
    config: BTreeMap<String, String>,
    hasher: InputHasher,
    outputs: &[PathBuf],
    started: Instant,
    path: &Path,
) -> Result<()> {
    let (input_hash, inputs) = hasher.finish();
    let outputs = outputs
        .iter()
        .filter(|p| p.exists())
        .map(|p| describe_output(p))
        .collect::<Result<Vec<OutputFile>>>()?;
    RunManifest {
        tool: format!("unisod {}", env!("CARGO_PKG_VERSION")),
        command: command.to_string(),
        args: args.to_vec(),
        config,
        input_hash,
        inputs,
        outputs,
        wall_time_s: started.elapsed().as_secs_f64(),
    }
    .write(path)
}

fn partition_json(mode: TrainMode, p: &ParameterPartition) -> serde_json::Value {
    let trainable = p.trainable_count();
    let frozen = p.frozen_count();
    serde_json::json!({
        "mode": mode.to_string(),
        "trainable_params": trainable,
        "frozen_params": frozen,
        "trainable_fraction": trainable as f64 / (trainable + frozen).max(1) as f64,
        "partition": p,
    })
}

fn print_partition(p: &ParameterPartition) {
    let (t, f) = (p.trainable_count(), p.frozen_count());
    println!(
        "trainable {t} frozen {f} fraction {:.4}",
        t as f64 / (t + f).max(1) as f64
    );
}

/// Runs training into `out`, replacing any log left by an earlier run.
fn train_into(trainer: &mut Trainer, samples: &[Sample], out: &Path) -> Result<RunOutput> {
    create_dir(out)?;
    let output = RunOutput::to_dir(out);
    let log = output.log_path().expect("directory output");
    if log.exists() {
        std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    let entries = trainer.run(samples, &output)?;
    if let (Some(first), Some(last)) = (entries.first(), entries.last()) {
        println!(
            "{} steps, loss {:.4} -> {:.4}",
            entries.len(),
            first.total,
            last.total
        );
    }
    Ok(output)
}

pub fn pretrain(
    args: &[String],
    cfg: &ConfigArgs,
    data: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let started = Instant::now();
    let mut flat = layered(cfg, None)?.flat;
    if let Some(d) = data {
        put(&mut flat, "data.root", d.display());
    }
    if let Some(s) = seed {
        put(&mut flat, "train.seed", s);
    }
    put(&mut flat, "train.mode", TrainMode::Pretrain);
    put(&mut flat, "train.task", Modality::Rgb);
    let settings = flat.resolve()?;
    if settings.data.as_ref().is_some_and(|d| d.modality != Modality::Rgb) {
        return Err(Error::Config("pretraining needs an RGB dataset (data.modality=rgb)".into()));
    }
    let out = out.unwrap_or_else(|| settings.output_dir.join("pretrain"));

    let mut hasher = InputHasher::default();
    hasher.text("config", &flat.render());
    let samples = load_training_set(&settings, &mut hasher)?;
    let model = UniSod::new(settings.model.clone())?;
    let mut trainer = Trainer::from_scratch(&model, settings.train.clone())?.with_snapshot(flat.clone());
    let output = train_into(&mut trainer, &samples, &out)?;

    let outputs = [output.log_path(), output.last_path(), output.best_path()]
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    finish_manifest("pretrain", args, flat.0, hasher, &outputs, started, &out.join("manifest.json"))?;
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn prompt_tune(
    args: &[String],
    cfg: &ConfigArgs,
    task: Modality,
    init: &Path,
    mode: TrainMode,
    data: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let started = Instant::now();
    let ck = Checkpoint::load(init)?;
    let Layered { mut flat, user } = layered(cfg, Some(&ck.manifest.config))?;
    if let Some(d) = data {
        put(&mut flat, "data.root", d.display());
    }
    if let Some(s) = seed {
        put(&mut flat, "train.seed", s);
    }
    put(&mut flat, "train.mode", mode);
    put(&mut flat, "train.task", task);
    match user.get("data.modality") {
        Some(m) if m.parse::<Modality>().ok() != Some(task) => {
            return Err(Error::Config(format!(
                "task {task} does not match data.modality={m}"
            )))
        }
        _ => put(&mut flat, "data.modality", task),
    }
    let settings = flat.resolve()?;
    let out = out.unwrap_or_else(|| settings.output_dir.join(format!("prompt-tune-{task}")));

    let mut hasher = InputHasher::default();
    hasher.text("config", &flat.render());
    hasher.file(init)?;
    let samples = load_training_set(&settings, &mut hasher)?;
    let model = UniSod::new(settings.model.clone())?;
    let mut trainer = Trainer::from_pretrained(&model, settings.train.clone(), &ck.params)
        .map_err(|e| incompatible(init, e))?
        .with_snapshot(flat.clone());
    let output = train_into(&mut trainer, &samples, &out)?;

    for name in trainer.partition().frozen.keys() {
        if trainer.params().get(name) != ck.params.get(name) {
            return Err(Error::Accounting(format!("frozen parameter `{name}` changed during training")));
        }
    }

    let mut outputs = [output.log_path(), output.last_path(), output.best_path()]
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    if mode.uses_spg() {
        let p = out.join(format!("prompts_{task}.safetensors"));
        trainer.prompt_checkpoint().save(&p)?;
        println!("prompts: {}", p.display());
        outputs.push(p);
    }
    let part = out.join("partition.json");
    write_json(&part, &partition_json(mode, trainer.partition()))?;
    print_partition(trainer.partition());
    outputs.push(part);
    finish_manifest("prompt-tune", args, flat.0, hasher, &outputs, started, &out.join("manifest.json"))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn incompatible(path: &Path, e: Error) -> Error {
    match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!(
            "{} does not fit this model (format version {FORMAT_VERSION}): {m}",
            path.display()
        )),
        other => other,
    }
}

pub fn predict(
    args: &[String],
    checkpoint: &Path,
    prompts: Option<&Path>,
    input: &Path,
    aux: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let started = Instant::now();
    let mut hasher = InputHasher::default();
    hasher.file(checkpoint)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.manifest.config.0.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} records no model configuration",
            checkpoint.display()
        )));
    }
    let settings = ck.manifest.config.resolve().map_err(|e| {
        Error::Checkpoint(format!("{}: stored configuration is unusable: {e}", checkpoint.display()))
    })?;
    let model = UniSod::new(settings.model.clone())?;
    ck.params.check_against(&model.base_specs()).map_err(|e| incompatible(checkpoint, e))?;

    let (params, path, task) = match prompts {
        None => (ck.params, PromptPath::None, Modality::Rgb),
        Some(p) => {
            hasher.file(p)?;
            let pc = Checkpoint::load(p)?;
            let mode: TrainMode = pc
                .manifest
                .mode
                .parse()
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
            let task: Modality = pc
                .manifest
                .task
                .parse()
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
            let merged = attach_prompts(&ck.params, &pc)?;
            merged.check_against(&model.spg_specs()).map_err(|e| incompatible(p, e))?;
            (merged, PromptPath::from(mode), task)
        }
    };
    let aux_files = match (task.has_aux(), aux) {
        (true, Some(dir)) => Some(list_images(dir)?.0),
        (true, None) => {
            return Err(Error::Config(format!("prompts are for task {task}; pass --aux")))
        }
        (false, Some(_)) => {
            return Err(Error::Config("--aux is only used with prompts for rgbd or rgbt".into()))
        }
        (false, None) => None,
    };
    if !input.is_dir() {
        return Err(Error::Config(format!("input directory {} does not exist", input.display())));
    }
    let (images, dupes) = list_images(input)?;
    if let Some(d) = dupes.iter().next() {
        return Err(Error::Data(format!("stem {d} appears with more than one extension in {}", input.display())));
    }
    create_dir(out)?;

    let hw = settings.model.input_hw;
    let mut outputs = Vec::new();
    for (stem, file) in &images {
        hasher.file(file)?;
        let rgb = load_rgb(file)?;
        let original = (rgb.dim().1, rgb.dim().2);
        let rgb = resize_bilinear(&rgb, hw);
        let a = match &aux_files {
            Some(files) => {
                let f = files
                    .get(stem)
                    .ok_or_else(|| Error::Data(format!("no auxiliary image for {stem}")))?;
                hasher.file(f)?;
                resize_bilinear(&load_aux(f)?, hw)
            }
            None => rgb.clone(),
        };
        let as_batch = |x: ndarray::Array3<f64>| x.insert_axis(Axis(0)).into_dyn();
        let s = model.predict(&params, &as_batch(rgb), &as_batch(a), path)?;
        let map = s
            .into_shape_with_order(IxDyn(&[1, hw.0, hw.1]))
            .expect("one single-channel map")
            .into_dimensionality::<ndarray::Ix3>()
            .expect("rank 3");
        let map = resize_bilinear(&map, original).index_axis_move(Axis(0), 0);
        let dest = out.join(format!("{stem}.png"));
        save_gray_png(&map, &dest)?;
        outputs.push(dest);
    }
    println!("wrote {} maps to {}", outputs.len(), out.display());
    finish_manifest(
        "predict",
        args,
        ck.manifest.config.0.clone(),
        hasher,
        &outputs,
        started,
        &out.join("manifest.json"),
    )
}

pub fn evaluate(
    args: &[String],
    pred: &Path,
    gt: &Path,
    csv: &Path,
    json: Option<PathBuf>,
    dataset: &str,
) -> Result<()> {
    let started = Instant::now();
    let report = evaluate_dataset(dataset, pred, gt)?;
    for r in &report.rejects {
        eprintln!("warning: skipping {}: {}", r.image_id, r.reason);
    }
    let json = json.unwrap_or_else(|| csv.with_extension("json"));
    let dir = csv.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    if let Some(p) = json.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(p)?;
    }
    report.write(csv, &json)?;

    let m = report.means();
    println!(
        "{dataset}: {} images  MAE {:.4}  S {:.4}  E_mean {:.4}  E_adp {:.4}  Fw {:.4}",
        report.images.len(),
        m.mae,
        m.s,
        m.e_mean,
        m.e_adaptive,
        m.fw
    );

    let mut hasher = InputHasher::default();
    for d in [pred, gt] {
        for f in list_images(d)?.0.values() {
            hasher.file(f)?;
        }
    }
    let config = BTreeMap::from([("dataset".to_string(), dataset.to_string())]);
    finish_manifest(
        "evaluate",
        args,
        config,
        hasher,
        &[csv.to_path_buf(), json],
        started,
        &dir.join("manifest.json"),
    )
}

pub fn params(args: &[String], cfg: &ConfigArgs, mode: TrainMode, out: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    let mut flat = layered(cfg, None)?.flat;
    put(&mut flat, "train.mode", mode);
    let settings = flat.resolve()?;
    let model = UniSod::new(settings.model.clone())?;
    let partition = model.partition(mode)?;
    print_partition(&partition);

    let out = out.unwrap_or_else(|| settings.output_dir.join("params"));
    create_dir(&out)?;
    let path = out.join("partition.json");
    write_json(&path, &partition_json(mode, &partition))?;
    let mut hasher = InputHasher::default();
    hasher.text("config", &flat.render());
    finish_manifest("params", args, flat.0, hasher, &[path], started, &out.join("manifest.json"))
}
