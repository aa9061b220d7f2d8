use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use primid_core::align::{
    compute_landmark_template, read_landmark_csv, CanvasGeometry, LandmarkSet, LandmarkTemplate,
    TemplateNormalization,
};
use primid_core::embedding::Embedding;
use primid_core::eval::{write_scores_csv, write_sweep_csv};
use primid_core::gallery::{save_gallery, Gallery, Individual, Species};
use primid_core::matcher;
use primid_core::model::{build_primnet, count_params, save_weights, train, PrimNetConfig, TrainingSample};
use primid_core::pipeline::{
    evaluate, load_model, load_model_config, sweep_trend, CropSample, Dataset, DatasetEntry, EmbeddingSource,
    EvalOptions, Landmarks, Recognizer,
};
use primid_core::synth::{embed_in_scene, generate, ToySpec};
use primid_service::{AppState, ImageInput, ServiceConfig, DEFAULT_K, SCHEMA_VERSION};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde_json::{json, Value};

use crate::config::CliConfig;
use crate::exit::{config_error, data_error, Classify};
use crate::{Command, ImageArgs};

const TEMPLATE_FILE: &str = "landmark_template.json";
const SCENE_SIZE: [u32; 2] = [200, 220];

pub fn run(command: Command, cfg: &CliConfig) -> anyhow::Result<ExitCode> {
    match command {
        Command::Align { landmarks, images, out } => align(cfg, &landmarks, &images, &out),
        Command::Train {
            data,
            out,
            epochs,
            lr,
            batch_size,
        } => train_cmd(cfg, &data, &out, epochs, lr, batch_size),
        Command::Embed { input, out } => embed(cfg, &input, out.as_deref()),
        Command::Enroll { id, name, input, data } => enroll(cfg, id, name, &input, data.as_deref()),
        Command::Verify { id, input, .. } => verify(cfg, &id, &input),
        Command::Identify { input, .. } => identify(cfg, &input),
        Command::Eval {
            data,
            distractors,
            folds,
            trials,
            sweep_repeats,
            epochs,
            out,
            scores_csv,
            sweep_csv,
        } => eval(
            cfg,
            &EvalArgs {
                data,
                distractors,
                folds,
                trials,
                sweep_repeats,
                epochs,
                out,
                scores_csv,
                sweep_csv,
            },
        ),
        Command::Serve { .. } => serve(cfg),
        Command::Synth {
            out,
            classes,
            per_class,
            scenes,
        } => synth(cfg, &out, classes, per_class, scenes),
    }
}

fn emit(cfg: &CliConfig, mut body: Value, text: impl FnOnce(&Value) -> String) -> anyhow::Result<()> {
    let mut stdout = std::io::stdout().lock();
    if cfg.json() {
        body["schema_version"] = json!(SCHEMA_VERSION);
        writeln!(stdout, "{}", serde_json::to_string_pretty(&body)?)?;
    } else {
        write!(stdout, "{}", text(&body))?;
    }
    Ok(())
}

fn ok() -> anyhow::Result<ExitCode> {
    Ok(ExitCode::SUCCESS)
}

fn require_file(path: Option<&Path>, what: &str, flag: &str) -> anyhow::Result<PathBuf> {
    let path = path.ok_or_else(|| config_error(format!("no {what} configured (use {flag} or the config file)")))?;
    if !path.is_file() {
        return Err(config_error(format!("{what} {} does not exist", path.display())));
    }
    Ok(path.to_path_buf())
}

fn model_config(cfg: &CliConfig) -> anyhow::Result<PrimNetConfig> {
    match &cfg.model_config {
        Some(p) => load_model_config(require_file(Some(p), "model config", "--model-config")?).config(),
        None => Ok(PrimNetConfig::default()),
    }
}

/// The configured template file, or the canonical template when none is set.
fn stored_template(cfg: &CliConfig) -> anyhow::Result<LandmarkTemplate> {
    match &cfg.template {
        Some(p) => LandmarkTemplate::load(require_file(Some(p), "landmark template", "--template")?).config(),
        None => Ok(LandmarkTemplate::canonical()),
    }
}

/// Loads the configured template if it exists; otherwise computes one from
/// the dataset's landmarks (saving it to the configured path) or falls back
/// to the canonical template for datasets of pre-aligned crops.
fn dataset_template(cfg: &CliConfig, dataset: &Dataset) -> anyhow::Result<LandmarkTemplate> {
    if let Some(p) = cfg.template.as_deref().filter(|p| p.exists()) {
        return LandmarkTemplate::load(p).config();
    }
    let sets = dataset.landmark_sets().data()?;
    if sets.is_empty() {
        return Ok(LandmarkTemplate::canonical());
    }
    let template =
        compute_landmark_template(&sets, &CanvasGeometry::default(), TemplateNormalization::default()).data()?;
    if let Some(p) = &cfg.template {
        template.save(p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(template)
}

fn recognizer(cfg: &CliConfig) -> anyhow::Result<Recognizer> {
    let weights = require_file(cfg.model.as_deref(), "model", "--model")?;
    let arch = model_config(cfg)?;
    let template = stored_template(cfg)?;
    let model = load_model(&weights, Some(&arch))
        .with_context(|| format!("loading model {}", weights.display()))
        .config()?;
    Ok(Recognizer::new(model, template))
}

fn load_dataset(path: &Path, species: Option<Species>) -> anyhow::Result<Dataset> {
    if !path.is_file() {
        return Err(config_error(format!("dataset manifest {} does not exist", path.display())));
    }
    let dataset = Dataset::load(path).data()?.filter_species(species);
    if dataset.entries.is_empty() {
        return Err(data_error(format!("dataset {} has no usable entries", path.display())));
    }
    Ok(dataset)
}

fn landmarks_from_csv(path: &Path) -> anyhow::Result<BTreeMap<String, Landmarks>> {
    let file = fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .config()?;
    let mut map = BTreeMap::new();
    for (i, row) in read_landmark_csv(file).into_iter().enumerate() {
        let set = row
            .with_context(|| format!("{} row {}", path.display(), i + 1))
            .data()?;
        map.insert(set.image_ref.clone(), Landmarks::from_set(&set));
    }
    Ok(map)
}

/// Reads every `--image` with its landmarks from `--points` or the CSV.
fn read_inputs(args: &ImageArgs) -> anyhow::Result<Vec<(PathBuf, ImageInput)>> {
    if args.images.is_empty() {
        return Err(config_error("no --image given"));
    }
    if args.points.is_some() && args.images.len() != 1 {
        return Err(config_error("--points applies to a single --image; use --landmarks for several"));
    }
    let table = args.landmarks.as_deref().map(landmarks_from_csv).transpose()?;
    args.images
        .iter()
        .map(|path| {
            let bytes = fs::read(path)
                .with_context(|| format!("reading {}", path.display()))
                .data()?;
            let landmarks = match (&args.points, &table) {
                (Some(p), _) => Some(Landmarks {
                    lx: p[0],
                    ly: p[1],
                    rx: p[2],
                    ry: p[3],
                    mx: p[4],
                    my: p[5],
                }),
                (None, Some(t)) => {
                    let name = path.file_name().map(|n| n.to_string_lossy().into_owned());
                    let found = t
                        .get(path.to_string_lossy().as_ref())
                        .or_else(|| name.and_then(|n| t.get(&n)))
                        .copied();
                    if found.is_none() {
                        return Err(data_error(format!("no landmarks for {} in the CSV", path.display())));
                    }
                    found
                }
                (None, None) => None,
            };
            Ok((
                path.clone(),
                ImageInput {
                    bytes,
                    landmarks,
                    image_ref: None,
                },
            ))
        })
        .collect()
}

fn embed_input(rec: &Recognizer, path: &Path, input: &ImageInput) -> anyhow::Result<Embedding> {
    let label = path.display().to_string();
    let img = input.decode().with_context(|| label.clone()).data()?;
    let lm = input.landmarks.map(|l| l.to_set(&label)).transpose().data()?;
    rec.embed(&img, lm.as_ref(), &label).data()
}

fn single_probe(args: &ImageArgs) -> anyhow::Result<(PathBuf, ImageInput)> {
    let mut inputs = read_inputs(args)?;
    if inputs.len() != 1 {
        return Err(config_error("exactly one --image probe is required"));
    }
    Ok(inputs.remove(0))
}

fn open_gallery(cfg: &CliConfig) -> anyhow::Result<(PathBuf, Gallery)> {
    let path = require_file(cfg.gallery.as_deref(), "gallery", "--gallery")?;
    let gallery = Gallery::load(&path)
        .with_context(|| format!("loading gallery {}", path.display()))
        .config()?;
    Ok((path, gallery))
}

fn align(cfg: &CliConfig, csv: &Path, images: &Path, out: &Path) -> anyhow::Result<ExitCode> {
    let file = fs::File::open(csv)
        .with_context(|| format!("opening {}", csv.display()))
        .config()?;
    let rows = read_landmark_csv(file);
    if rows.is_empty() {
        return Err(data_error(format!("{} has no landmark rows", csv.display())));
    }
    let mut failed = Vec::new();
    let mut valid = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        match row {
            Ok(set) => valid.push((i + 1, set)),
            Err(e) => {
                tracing::warn!(row = i + 1, "skipping: {e}");
                failed.push(json!({"row": i + 1, "error": e.to_string()}));
            }
        }
    }
    let (template, template_path) = match cfg.template.as_deref().filter(|p| p.exists()) {
        Some(p) => (LandmarkTemplate::load(p).config()?, p.to_path_buf()),
        None => {
            let sets: Vec<LandmarkSet> = valid.iter().map(|(_, s)| s.clone()).collect();
            if sets.is_empty() {
                return Err(data_error(format!("{} has no valid landmark rows", csv.display())));
            }
            let t = compute_landmark_template(&sets, &CanvasGeometry::default(), TemplateNormalization::default())
                .data()?;
            let path = cfg.template.clone().unwrap_or_else(|| out.join(TEMPLATE_FILE));
            (t, path)
        }
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if !template_path.exists() {
        template.save(&template_path)?;
    }

    let mut crops = Vec::new();
    for (row, set) in valid {
        let src = images.join(&set.image_ref);
        let result = primid_core::pipeline::read_rgb(&src)
            .map_err(anyhow::Error::from)
            .and_then(|img| Ok(primid_core::align::align_face(&img, &set, &template)?));
        match result {
            Ok((crop, params)) => {
                let stem = Path::new(&set.image_ref)
                    .file_stem()
                    .map_or_else(|| format!("row{row}"), |s| s.to_string_lossy().into_owned());
                let dst = out.join(format!("{stem}.png"));
                crop.save(&dst).with_context(|| format!("writing {}", dst.display()))?;
                crops.push(json!({
                    "row": row,
                    "image": set.image_ref,
                    "crop": dst,
                    "transform": {"s": params.scale(), "theta": params.rotation(), "mx": params.m_x, "my": params.m_y},
                }));
            }
            Err(e) => {
                tracing::warn!(row, image = %set.image_ref, "skipping: {e:#}");
                failed.push(json!({"row": row, "image": set.image_ref, "error": format!("{e:#}")}));
            }
        }
    }
    let any_failed = !failed.is_empty();
    emit(
        cfg,
        json!({"template": template_path, "crops": crops, "failed": failed}),
        |b| {
            format!(
                "wrote {} crops to {} ({} rows failed); template {}\n",
                b["crops"].as_array().map_or(0, Vec::len),
                out.display(),
                b["failed"].as_array().map_or(0, Vec::len),
                template_path.display()
            )
        },
    )?;
    Ok(if any_failed {
        ExitCode::from(crate::exit::DATA)
    } else {
        ExitCode::SUCCESS
    })
}

fn train_cmd(
    cfg: &CliConfig,
    data: &Path,
    out: &Path,
    epochs: Option<usize>,
    lr: Option<f32>,
    batch_size: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let mut arch = model_config(cfg)?;
    arch.train.seed = cfg.seed();
    if let Some(e) = epochs {
        arch.train.epochs = e;
    }
    if let Some(l) = lr {
        arch.train.lr = l;
    }
    if let Some(b) = batch_size {
        arch.train.batch_size = b;
    }
    let dataset = load_dataset(data, cfg.species)?;
    let template = dataset_template(cfg, &dataset)?;
    let samples: Vec<TrainingSample> = dataset
        .crops(&template)
        .data()?
        .into_iter()
        .map(|s| TrainingSample {
            crop: s.crop,
            label: s.individual,
        })
        .collect();
    let mut model = build_primnet(&arch).config()?;
    let report = train(&mut model, &samples, &arch.train).data()?;
    save_weights(&report.weights, out).with_context(|| format!("writing {}", out.display()))?;
    let classes: std::collections::BTreeSet<&str> = samples.iter().map(|s| s.label.as_str()).collect();
    emit(
        cfg,
        json!({
            "weights": out,
            "params": count_params(&model),
            "images": samples.len(),
            "individuals": classes.len(),
            "epochs": arch.train.epochs,
            "initial_loss": report.initial_loss,
            "epoch_losses": report.epoch_losses,
        }),
        |b| {
            format!(
                "trained on {} images of {} individuals for {} epochs; loss {:.4} -> {:.4}; wrote {}\n",
                b["images"],
                b["individuals"],
                b["epochs"],
                report.initial_loss,
                report.epoch_losses.last().copied().unwrap_or(report.initial_loss),
                out.display()
            )
        },
    )?;
    ok()
}

fn embed(cfg: &CliConfig, args: &ImageArgs, out: Option<&Path>) -> anyhow::Result<ExitCode> {
    let rec = recognizer(cfg)?;
    let mut rows = Vec::new();
    for (path, input) in read_inputs(args)? {
        let e = embed_input(&rec, &path, &input)?;
        rows.push(json!({"image": path, "image_ref": input.resolved_ref(), "embedding": e.as_slice()}));
    }
    let body = json!({"embeddings": rows});
    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(&body)? + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    emit(cfg, body, |b| {
        let mut s = String::new();
        for r in b["embeddings"].as_array().into_iter().flatten() {
            let values: Vec<String> = r["embedding"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|v| format!("{:.6}", v.as_f64().unwrap_or(f64::NAN)))
                .collect();
            s.push_str(&format!("{} {}\n", r["image"].as_str().unwrap_or_default(), values.join(" ")));
        }
        s
    })?;
    ok()
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn enroll(
    cfg: &CliConfig,
    id: Option<String>,
    name: Option<String>,
    args: &ImageArgs,
    data: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let path = cfg
        .gallery
        .clone()
        .ok_or_else(|| config_error("no gallery configured (use --gallery or the config file)"))?;
    let rec = recognizer(cfg)?;
    let mut gallery = if path.exists() {
        Gallery::load(&path)
            .with_context(|| format!("loading gallery {}", path.display()))
            .config()?
    } else {
        Gallery::new()
    };

    let mut batches: BTreeMap<String, (Individual, Vec<(Embedding, String)>)> = BTreeMap::new();
    match data {
        Some(manifest) => {
            let dataset = load_dataset(manifest, cfg.species)?;
            for entry in &dataset.entries {
                let img = primid_core::pipeline::read_rgb(dataset.image_path(entry)).data()?;
                let lm = entry.landmarks.map(|l| l.to_set(&entry.image)).transpose().data()?;
                let e = rec.embed(&img, lm.as_ref(), &entry.image).data()?;
                batches
                    .entry(entry.individual.clone())
                    .or_insert_with(|| {
                        (
                            Individual {
                                id: entry.individual.clone(),
                                name: entry.name.clone().unwrap_or_else(|| entry.individual.clone()),
                                species: entry.species,
                            },
                            Vec::new(),
                        )
                    })
                    .1
                    .push((e, entry.image.clone()));
            }
        }
        None => {
            let id = id.ok_or_else(|| config_error("enroll needs --id (or --data)"))?;
            let species = cfg.species.ok_or_else(|| config_error("enroll needs --species"))?;
            let mut entries = Vec::new();
            for (path, input) in read_inputs(args)? {
                entries.push((embed_input(&rec, &path, &input)?, input.resolved_ref()));
            }
            let individual = Individual {
                name: name.unwrap_or_else(|| id.clone()),
                id: id.clone(),
                species,
            };
            batches.insert(id, (individual, entries));
        }
    }

    let enrolled_at = now_secs();
    let mut results = Vec::new();
    for (id, (individual, entries)) in batches {
        let added = gallery.enroll(individual, entries, enrolled_at).data()?;
        let size = gallery.get(&id).map_or(0, |r| r.template.len());
        results.push(json!({"individual_id": id, "added": added, "template_size": size}));
    }
    save_gallery(&gallery, &path).with_context(|| format!("writing gallery {}", path.display()))?;
    emit(cfg, json!({"gallery": path, "enrolled": results}), |b| {
        let mut s = String::new();
        for r in b["enrolled"].as_array().into_iter().flatten() {
            s.push_str(&format!(
                "{}: +{} images (template size {})\n",
                r["individual_id"].as_str().unwrap_or_default(),
                r["added"],
                r["template_size"]
            ));
        }
        s
    })?;
    ok()
}

fn verify(cfg: &CliConfig, id: &str, args: &ImageArgs) -> anyhow::Result<ExitCode> {
    let rec = recognizer(cfg)?;
    let (_, gallery) = open_gallery(cfg)?;
    let record = gallery
        .get(id)
        .ok_or_else(|| data_error(format!("unknown individual {id}")))?;
    let (probe_path, probe) = single_probe(args)?;
    let threshold = cfg
        .threshold
        .or(cfg.verify_threshold)
        .unwrap_or(ServiceConfig::default().verify_threshold);
    let v = matcher::verify(&embed_input(&rec, &probe_path, &probe)?, record.template.embeddings(), threshold).config()?;
    emit(
        cfg,
        json!({"individual_id": id, "score": v.score, "threshold": threshold, "accept": v.accept}),
        |_| {
            format!(
                "{id}: score {:.4} {} threshold {threshold} -> {}\n",
                v.score,
                if v.accept { ">=" } else { "<" },
                if v.accept { "accept" } else { "reject" }
            )
        },
    )?;
    ok()
}

fn identify(cfg: &CliConfig, args: &ImageArgs) -> anyhow::Result<ExitCode> {
    let rec = recognizer(cfg)?;
    let (_, gallery) = open_gallery(cfg)?;
    let (probe_path, probe) = single_probe(args)?;
    let probe = embed_input(&rec, &probe_path, &probe)?;
    let templates: Vec<_> = gallery
        .templates(cfg.species)
        .map(|(id, t)| (id, t.embeddings()))
        .collect();
    let searched = templates.len();
    let k = cfg.k.unwrap_or(DEFAULT_K);
    let results = match matcher::identify(&probe, templates, k, cfg.threshold) {
        Err(matcher::MatchError::EmptyGallery) => return Err(data_error("no gallery individuals match the filter")),
        r => r.config()?,
    };
    let candidates: Vec<Value> = results
        .iter()
        .map(|r| {
            let ind = &gallery.get(&r.individual_id).expect("ranked id exists").individual;
            json!({
                "individual_id": r.individual_id,
                "name": ind.name,
                "species": ind.species,
                "score": r.score,
                "rank": r.rank,
                "accepted": r.accepted,
            })
        })
        .collect();
    emit(
        cfg,
        json!({
            "open_set": cfg.threshold.is_some(),
            "threshold": cfg.threshold,
            "gallery_size": searched,
            "candidates": candidates,
        }),
        |_| {
            let mut s = String::from("rank  individual          species        score   decision\n");
            for r in &results {
                let ind = &gallery.get(&r.individual_id).expect("ranked id exists").individual;
                s.push_str(&format!(
                    "{:<5} {:<19} {:<14} {:.4}  {}\n",
                    r.rank,
                    r.individual_id,
                    ind.species.as_str(),
                    r.score,
                    if r.accepted { "match" } else { "rejected" }
                ));
            }
            s
        },
    )?;
    ok()
}

struct EvalArgs {
    data: PathBuf,
    distractors: Option<PathBuf>,
    folds: usize,
    trials: usize,
    sweep_repeats: usize,
    epochs: Option<usize>,
    out: Option<PathBuf>,
    scores_csv: Option<PathBuf>,
    sweep_csv: Option<PathBuf>,
}

fn eval(cfg: &CliConfig, args: &EvalArgs) -> anyhow::Result<ExitCode> {
    let dataset = load_dataset(&args.data, cfg.species)?;
    let model = match &cfg.model {
        Some(_) => Some(recognizer(cfg)?),
        None => None,
    };
    let template = match &model {
        Some(r) if cfg.template.is_some() => r.template().clone(),
        _ => dataset_template(cfg, &dataset)?,
    };
    let samples: Vec<CropSample> = dataset.crops(&template).data()?;
    let distractors = match &args.distractors {
        Some(p) => Some(load_dataset(p, cfg.species)?.crops(&template).data()?),
        None => None,
    };
    let mut arch = model_config(cfg)?;
    if let Some(e) = args.epochs {
        arch.train.epochs = e;
    }
    let source = match &model {
        Some(r) => EmbeddingSource::Pretrained(r.model()),
        None => EmbeddingSource::TrainPerFold(&arch),
    };
    let opts = EvalOptions {
        k: args.folds,
        seed: cfg.seed(),
        trials: args.trials,
        sweep_sizes: None,
        sweep_repeats: args.sweep_repeats,
    };
    let output = evaluate(&samples, distractors.as_deref(), source, &opts).data()?;
    let report_json = output.report.to_json();
    if let Some(p) = &args.out {
        fs::write(p, &report_json).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &args.scores_csv {
        write_scores_csv(fs::File::create(p)?, &output.scores)?;
    }
    if let Some(p) = &args.sweep_csv {
        write_sweep_csv(fs::File::create(p)?, &output.sweep)?;
    }
    let mut stdout = std::io::stdout().lock();
    if cfg.json() {
        write!(stdout, "{report_json}")?;
    } else {
        write!(stdout, "{}", output.report.to_table())?;
        if !output.sweep.is_empty() {
            writeln!(stdout, "template size sweep (TAR@1%FAR):")?;
            for p in &output.sweep {
                writeln!(stdout, "  {:>3}  {:.4}", p.size, p.tar)?;
            }
            match sweep_trend(&output.sweep) {
                Some(rho) => writeln!(stdout, "  spearman {rho:.3}")?,
                None => writeln!(stdout, "  spearman n/a")?,
            }
        }
    }
    ok()
}

fn serve(cfg: &CliConfig) -> anyhow::Result<ExitCode> {
    let rec = recognizer(cfg)?;
    let path = cfg
        .gallery
        .clone()
        .ok_or_else(|| config_error("no gallery configured (use --gallery or the config file)"))?;
    let gallery = if path.exists() {
        Gallery::load(&path)
            .with_context(|| format!("loading gallery {}", path.display()))
            .config()?
    } else {
        Gallery::new()
    };
    let defaults = ServiceConfig::default();
    let service = ServiceConfig {
        bind: cfg.bind.unwrap_or(defaults.bind),
        static_dir: cfg.static_dir.clone(),
        verify_threshold: cfg.verify_threshold.unwrap_or(defaults.verify_threshold),
    };
    if let Some(dir) = &service.static_dir {
        if !dir.is_dir() {
            return Err(config_error(format!("static dir {} does not exist", dir.display())));
        }
    }
    let state = Arc::new(AppState::new(rec, gallery, Some(path), service.verify_threshold));
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("serving on http://{}", service.bind);
    runtime.block_on(primid_service::serve(state, &service)).config()?;
    ok()
}

fn synth(cfg: &CliConfig, out: &Path, classes: usize, per_class: usize, scenes: bool) -> anyhow::Result<ExitCode> {
    if classes == 0 || per_class == 0 {
        bail!(config_error("--classes and --per-class must be positive"));
    }
    let spec = ToySpec {
        classes,
        per_class,
        seed: cfg.seed.unwrap_or(ToySpec::default().seed),
        ..Default::default()
    };
    let species = cfg.species.unwrap_or(Species::Lemur);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let template = LandmarkTemplate::canonical();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let mut entries = Vec::new();
    let mut csv = String::from("image,lx,ly,rx,ry,mx,my\n");
    for img in generate(&spec) {
        let name = img.name();
        let landmarks = if scenes {
            let (photo, lm, _) = embed_in_scene(&img.crop, &template, SCENE_SIZE, &name, &mut rng);
            photo.save(out.join(&name))?;
            let l = Landmarks::from_set(&lm);
            csv.push_str(&format!("{name},{},{},{},{},{},{}\n", l.lx, l.ly, l.rx, l.ry, l.mx, l.my));
            Some(l)
        } else {
            img.crop.save(out.join(&name))?;
            None
        };
        entries.push(DatasetEntry {
            image: name,
            landmarks,
            individual: img.id(),
            name: None,
            species,
        });
    }
    let manifest = out.join("manifest.json");
    let count = entries.len();
    Dataset {
        root: out.to_path_buf(),
        entries,
    }
    .save(&manifest)?;
    if scenes {
        fs::write(out.join("landmarks.csv"), csv)?;
    }
    emit(
        cfg,
        json!({"manifest": manifest, "images": count, "individuals": classes, "scenes": scenes}),
        |_| format!("wrote {count} images of {classes} individuals; manifest {}\n", manifest.display()),
    )?;
    ok()
}
