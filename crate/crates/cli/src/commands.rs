use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tmcnn::classifier::{load_weights, save_weights, train, TrainConfig};
use tmcnn::dataset::load_dataset;
use tmcnn::eval::{match_detections, prf, step_series, sweep_detections, MatchConfig, Metrics};
use tmcnn::image::{load_image, preprocess};
use tmcnn::matching::NccEngine;
use tmcnn::pipeline::{detect_with_map, save_overlay, DetectionSet};
use tmcnn::synth::{generate_labyrinth, skeleton_ground_truth, GroundTruth, GtPoint, Phase, SkeletonConfig, SynthConfig};
use tmcnn::templates::{build_bank, Band, GapRule, MaskTable, Params};
use tmcnn::{GrayImage, TemplateBank, TemplateConfig};
use tmcnn_annotate::{Project, ProjectConfig};

use crate::{
    BankArgs, Command, CountsArgs, DetectArgs, EvalArgs, GapRuleArg, PhaseArg, ServeArgs, SynthArgs, TemplatesCommand,
    TrainArgs,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] tmcnn::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Service(#[from] tmcnn_annotate::ServiceError),
}

type Result<T> = std::result::Result<T, CliError>;

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_at(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_at(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

/// `"1300x972"` → `(1300, 972)`.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let size = (parse(w)?, parse(h)?);
    if size.0 == 0 || size.1 == 0 {
        return Err(format!("size {s:?} has a zero side"));
    }
    Ok(size)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Detect(args) => detect(args),
        Command::Templates(TemplatesCommand::Dump { out, bank }) => dump_templates(&out, &bank),
        Command::Train(args) => train_model(args),
        Command::Synth(args) => synth(args),
        Command::Eval(args) => eval(args),
        Command::Counts(args) => counts(args),
        Command::Serve(args) => serve(args),
    }
}

fn bank_config(args: &BankArgs) -> Result<TemplateConfig> {
    let masks = match &args.masks {
        Some(path) => read_json::<MaskTable>(path)?,
        None => MaskTable::default(),
    };
    Ok(TemplateConfig {
        stroke: args.stroke,
        gap_rule: match args.gap_rule {
            GapRuleArg::TwoGap => GapRule::TwoGap,
            GapRuleArg::ThreeGap => GapRule::ThreeGap,
        },
        masks,
    })
}

fn load_bank(args: &BankArgs) -> Result<TemplateBank> {
    Ok(build_bank(&bank_config(args)?)?)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn input_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(io_at(input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_png(p))
        .collect();
    found.sort();
    Ok(found)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string()
}

fn detect(args: DetectArgs) -> Result<()> {
    let inputs = input_images(&args.input)?;
    if inputs.is_empty() {
        return Err(CliError::Failed(format!("no input images in {}", args.input.display())));
    }
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(CliError::Failed(format!("threshold {} outside (0, 1)", args.threshold)));
    }
    let bank = load_bank(&args.bank)?;
    let model = args.weights.as_deref().map(load_weights).transpose()?;
    create_dir(&args.out)?;
    for path in &inputs {
        let started = Instant::now();
        let name = stem(path);
        let img = preprocess(&load_image(path)?, args.resize)?;
        let map = NccEngine::new(&img)?.correlate_bank(&bank)?;
        let mut set = detect_with_map(&img, &map, &bank, args.threshold, model.as_ref())?;
        set.image = name.clone();
        set.save(args.out.join(format!("{name}.json")))?;
        save_overlay(&img, &set, args.out.join(format!("{name}.overlay.png")))?;
        if args.save_map {
            map.save_png16(args.out.join(format!("{name}.map.png")))?;
        }
        log::info!(
            "{name}: {} junctions, {} terminals, {} rejected in {:.1?}",
            set.count(tmcnn::DefectClass::Junction),
            set.count(tmcnn::DefectClass::Terminal),
            set.detections.iter().filter(|d| !d.is_defect()).count(),
            started.elapsed()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct DumpEntry {
    index: usize,
    class: tmcnn::DefectClass,
    params: Params,
    mask_index: usize,
    mask_spec: tmcnn::templates::MaskSpec,
    template_png: String,
    mask_png: String,
}

#[derive(Serialize)]
struct DumpManifest<'a> {
    metadata: &'a tmcnn::templates::BankMetadata,
    entries: Vec<DumpEntry>,
}

/// Strip white, background gray, don't-care black.
fn mask_image(mask: &tmcnn::templates::Mask) -> Result<GrayImage> {
    let data = mask
        .bands()
        .iter()
        .map(|b| match b {
            Band::Strip => 1.0,
            Band::Background => 0.5,
            Band::Discarded => 0.0,
        })
        .collect();
    Ok(GrayImage::new(mask.side(), mask.side(), data)?)
}

fn dump_templates(out: &Path, args: &BankArgs) -> Result<()> {
    let bank = load_bank(args)?;
    create_dir(out)?;
    let entries = (0..bank.len())
        .into_par_iter()
        .map(|i| {
            let (template, mask) = bank.entry(i);
            let template_png = format!("{i:05}_template.png");
            let mask_png = format!("{i:05}_mask.png");
            GrayImage::new(template.side(), template.side(), template.data().to_vec())?
                .save_png(out.join(&template_png))?;
            mask_image(mask)?.save_png(out.join(&mask_png))?;
            Ok(DumpEntry {
                index: i,
                class: template.class(),
                params: template.params(),
                mask_index: bank.entries()[i].mask_index,
                mask_spec: *mask.spec(),
                template_png,
                mask_png,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = bank.metadata();
    let manifest = DumpManifest { metadata: meta, entries };
    write_file(&out.join("manifest.json"), to_json(&manifest))?;
    println!(
        "{} entries: {} junction templates (reference {}), {} terminal templates (reference {})",
        meta.entries,
        meta.junction_templates,
        meta.reference_junction_templates,
        meta.terminal_templates,
        meta.reference_terminal_templates
    );
    Ok(())
}

fn train_model(args: TrainArgs) -> Result<()> {
    let samples = load_dataset(&args.dataset)?;
    if samples.is_empty() {
        return Err(CliError::Failed(format!("dataset {} is empty", args.dataset.display())));
    }
    let config = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        batch_size: args.batch,
        seed: args.seed,
        augment: !args.no_augment,
        validation_fraction: args.validation,
        dropout: args.dropout,
    };
    config.validate()?;
    log::info!("training on {} patches", samples.len());
    let (model, report) = train(&samples, &config)?;
    save_weights(&model, &args.out)?;
    let best = report.best();
    log::info!(
        "kept epoch {} (validation accuracy {:.4}); weights in {}",
        report.best_epoch,
        best.validation_accuracy,
        args.out.display()
    );
    write_file(&args.out.with_extension("json"), to_json(&report))
}

fn synth(args: SynthArgs) -> Result<()> {
    if args.count == 0 {
        return Err(CliError::Failed("count must be at least 1".into()));
    }
    let phase = match args.phase {
        PhaseArg::Dark => Phase::Dark,
        PhaseArg::Bright => Phase::Bright,
    };
    let (width, height) = args.size;
    let base = SynthConfig {
        width,
        height,
        wavelength: args.wavelength,
        bandwidth: args.bandwidth,
        noise_sigma: args.noise,
        blur_sigma: args.blur,
        seed: args.seed,
        ..SynthConfig::default()
    };
    base.validate()?;
    let field_dir = args.out.join("field");
    create_dir(&field_dir)?;
    let skeleton = SkeletonConfig::for_wavelength(args.wavelength);
    (0..args.count).into_par_iter().try_for_each(|i| -> Result<()> {
        let cfg = SynthConfig {
            seed: args.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let name = format!("synth_{i:04}");
        let lab = generate_labyrinth(&cfg)?;
        let truth = skeleton_ground_truth(&lab.field, phase, &skeleton);
        lab.image.save_png(args.out.join(format!("{name}.png")))?;
        lab.field.to_image().save_png(field_dir.join(format!("{name}.png")))?;
        truth
            .to_detection_set(&name, width, height)
            .save(args.out.join(format!("{name}.gt.json")))?;
        log::info!(
            "{name} (seed {}): {} junctions, {} terminals",
            cfg.seed,
            truth.count(tmcnn::DefectClass::Junction),
            truth.count(tmcnn::DefectClass::Terminal)
        );
        Ok(())
    })
}

/// Every DetectionSet JSON in `dir`, keyed by its image name.
fn detection_sets(dir: &Path) -> Result<BTreeMap<String, DetectionSet>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut sets = BTreeMap::new();
    for path in paths {
        let set = DetectionSet::load(&path)?;
        if let Some(previous) = sets.insert(set.image.clone(), set) {
            return Err(CliError::Failed(format!(
                "{} holds a second detection set for image {:?}",
                dir.display(),
                previous.image
            )));
        }
    }
    Ok(sets)
}

#[derive(Serialize)]
struct ImageMetrics {
    image: String,
    #[serde(flatten)]
    metrics: Metrics,
}

#[derive(Serialize)]
struct EvalReport {
    config: MatchConfig,
    pooled: Metrics,
    images: Vec<ImageMetrics>,
}

fn metrics_csv(m: &Metrics) -> String {
    format!(
        "tp,fp,fn,precision,recall,f1\n{},{},{},{:.6},{:.6},{:.6}\n",
        m.tp, m.fp, m.fn_, m.precision, m.recall, m.f1
    )
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = MatchConfig {
        iou_threshold: args.iou,
        box_side: args.box_side,
        class_aware: !args.class_agnostic,
        border_margin: args.border_margin,
    };
    let preds = detection_sets(&args.pred)?;
    let truths = detection_sets(&args.gt)?;
    if truths.is_empty() {
        return Err(CliError::Failed(format!("no ground truth in {}", args.gt.display())));
    }
    let mut pairs: Vec<(DetectionSet, Vec<GtPoint>)> = Vec::with_capacity(truths.len());
    for (image, truth) in &truths {
        let pred = preds
            .get(image)
            .ok_or_else(|| CliError::Failed(format!("no prediction for image {image:?}")))?;
        let gt = GroundTruth::from_detection_set(truth, Phase::Dark).points;
        pairs.push((pred.clone(), gt));
    }
    if let Some(thresholds) = &args.sweep {
        let result = sweep_detections(&pairs, thresholds, &cfg)?;
        println!("{}", to_json(&result));
        if let Some(path) = &args.csv {
            write_file(path, result.to_csv())?;
        }
        return Ok(());
    }
    let images = pairs
        .iter()
        .map(|(pred, gt)| {
            Ok(ImageMetrics {
                image: pred.image.clone(),
                metrics: prf(&match_detections(pred, gt, &cfg)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = Metrics::pooled(images.iter().map(|m| &m.metrics));
    if let Some(path) = &args.csv {
        write_file(path, metrics_csv(&pooled))?;
    }
    println!(
        "{}",
        to_json(&EvalReport {
            config: cfg,
            pooled,
            images
        })
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct RunManifest {
    runs: Vec<RunEntry>,
}

#[derive(Debug, Deserialize)]
struct RunEntry {
    name: String,
    steps: Vec<StepEntry>,
}

#[derive(Debug, Deserialize)]
struct StepEntry {
    step: usize,
    file: PathBuf,
}

fn counts(args: CountsArgs) -> Result<()> {
    let manifest: RunManifest = read_json(&args.runs)?;
    let runs = manifest
        .runs
        .iter()
        .map(|run| {
            run.steps
                .iter()
                .map(|s| Ok((s.step, DetectionSet::load(args.detections.join(&s.file))?)))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| CliError::Failed(format!("run {:?}: {e}", run.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let series = step_series(&runs)?;
    let csv = series.to_csv();
    write_file(&args.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let config = ProjectConfig {
        bank: Arc::new(load_bank(&args.bank)?),
        model: args.weights.as_deref().map(load_weights).transpose()?.map(Arc::new),
        default_threshold: args.threshold,
        resize: args.resize,
        box_side: args.box_side,
    };
    let project = Project::open(&args.project, config)?;
    log::info!("{} images in {}", project.records().len(), args.project.display());
    let runtime = tokio::runtime::Runtime::new().map_err(io_at(&args.project))?;
    let addr = std::net::SocketAddr::new(args.host, args.port);
    runtime
        .block_on(tmcnn_annotate::serve(project, addr))
        .map_err(|e| CliError::Failed(format!("serving on {addr}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("1300x972"), Ok((1300, 972)));
        assert_eq!(parse_size("64X48"), Ok((64, 48)));
        assert!(parse_size("1300").is_err());
        assert!(parse_size("0x10").is_err());
        assert!(parse_size("ax10").is_err());
    }
}
