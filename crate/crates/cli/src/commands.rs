use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use ovdet3d::eval::{evaluate_map, evaluate_pr_binary, GroundTruthSet, GtBox, ScoredBox};
use ovdet3d::geometry::Box3D;
use ovdet3d::mask_graph::{detect_class_agnostic, MergeConfig};
use ovdet3d::ov_labeler::{
    label_detections, open_provider, serve, Detection, FakeProvider, LabelConfig, LabelError,
    ProviderSpec,
};
use ovdet3d::scene_io::{
    load_scene, load_vocabulary, read_boxes, read_detection_records, referenced_files,
    to_canonical_json, vocabulary_files, write_boxes, write_detections, write_pseudo_labels,
    DetectionRecord, Scene, SceneError, Vocabulary,
};
use ovdet3d::synth::{default_objects, generate, write_synthetic, SynthConfig};

use crate::args::{Cli, Command, LabelArgs, LoadArgs, MergeArgs, Protocol, RunConfig};
use crate::metadata::{write_metadata, RunRecord};
use crate::CliError;

fn input(e: SceneError) -> CliError {
    CliError::Input(e.to_string())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Detect { scene, out, load, merge } => cmd_detect(&scene, &out, &load, &merge),
        Command::Label { scene, boxes, out, vocab, load, label } => {
            cmd_label(&scene, &boxes, &out, vocab.as_deref(), &load, &label)
        }
        Command::Pipeline { scene, out, vocab, load, merge, label } => {
            cmd_pipeline(&scene, &out, vocab.as_deref(), &load, &merge, &label)
        }
        Command::Eval { preds, gts, protocol, iou, conf, out } => {
            cmd_eval(&preds, &gts, protocol, &iou, conf, out.as_deref())
        }
        Command::ExportPseudo { scene, out, load, merge } => cmd_export_pseudo(&scene, &out, &load, &merge),
        Command::Synth { out } => cmd_synth(&out),
        Command::ServeFake { seed, scene } => cmd_serve_fake(seed, scene.as_deref()),
    }
}

/// Accepts a manifest file or a directory holding `manifest.json`.
fn manifest_of(path: &Path) -> Result<PathBuf, CliError> {
    if path.is_dir() {
        let m = path.join("manifest.json");
        if m.is_file() {
            return Ok(m);
        }
        return Err(CliError::Input(format!("{}: no manifest.json", path.display())));
    }
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Input(format!("{}: no such file", path.display())))
    }
}

struct LoadedScene {
    manifest: PathBuf,
    scene: Scene,
}

fn load(path: &Path, args: &LoadArgs) -> Result<LoadedScene, CliError> {
    let manifest = manifest_of(path)?;
    let scene = load_scene(&manifest, args.point_cap, args.seed).map_err(input)?;
    Ok(LoadedScene {
        scene: scene.with_frame_limit(args.max_frames),
        manifest,
    })
}

fn detect(scene: &Scene, config: &MergeConfig) -> Result<Vec<Box3D>, CliError> {
    detect_class_agnostic(scene, config).map_err(|e| CliError::Config(e.to_string()))
}

fn write_record(out: &Path, command: &str, loaded: &LoadedScene, config: &RunConfig, extra: &[PathBuf]) -> Result<(), CliError> {
    let mut inputs = referenced_files(&loaded.manifest).map_err(input)?;
    inputs.extend_from_slice(extra);
    write_metadata(
        out,
        &RunRecord {
            command,
            scene_id: &loaded.scene.id,
            config,
            sampling: loaded.scene.sampling,
            frames_used: loaded.scene.frames.len(),
            inputs: &inputs,
        },
    )
}

fn cmd_detect(scene: &Path, out: &Path, load_args: &LoadArgs, merge: &MergeArgs) -> Result<(), CliError> {
    let config = merge.to_config(load_args.tau_occ)?;
    let loaded = load(scene, load_args)?;
    let boxes = detect(&loaded.scene, &config)?;
    write_boxes(&boxes, out).map_err(input)?;
    write_record(out, "detect", &loaded, &RunConfig::new(load_args, Some(merge), None), &[])
}

fn resolve_vocab(scene: &Scene, vocab: Option<&Path>) -> Result<(Vocabulary, Vec<PathBuf>), CliError> {
    match vocab {
        Some(p) => {
            let v = load_vocabulary(p).map_err(input)?;
            Ok((v, vocabulary_files(p).map_err(input)?))
        }
        None => scene
            .vocabulary
            .clone()
            .map(|v| (v, vec![]))
            .ok_or_else(|| CliError::Config("scene has no vocabulary and --vocab was not given".into())),
    }
}

fn label(
    scene: &Scene,
    boxes: &[Box3D],
    vocab: &Vocabulary,
    config: &LabelConfig,
    spec: &ProviderSpec,
) -> Result<Vec<Detection>, CliError> {
    let fake_labels = Some((vocab.classes.clone(), vocab.prompt_template.clone()));
    let mut provider = open_provider(spec, fake_labels).map_err(|e| CliError::Provider(e.to_string()))?;
    let dim = provider.info().dim;
    if dim != vocab.dim() {
        return Err(CliError::Config(format!(
            "vocabulary dim {} differs from provider dim {dim}",
            vocab.dim()
        )));
    }
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    label_detections(boxes, scene, &mut provider, vocab, config).map_err(|e| match e {
        LabelError::Provider { .. } => CliError::Provider(e.to_string()),
        other => CliError::Config(other.to_string()),
    })
}

fn cmd_label(
    scene: &Path,
    boxes_path: &Path,
    out: &Path,
    vocab: Option<&Path>,
    load_args: &LoadArgs,
    label_args: &LabelArgs,
) -> Result<(), CliError> {
    let (config, spec) = label_args.to_config(load_args.tau_occ)?;
    let loaded = load(scene, load_args)?;
    let boxes = read_boxes(boxes_path).map_err(input)?;
    let (vocab, vocab_files) = resolve_vocab(&loaded.scene, vocab)?;
    let detections = label(&loaded.scene, &boxes, &vocab, &config, &spec)?;
    write_detections(&detections, out).map_err(input)?;
    let mut extra = vec![boxes_path.to_path_buf()];
    extra.extend(vocab_files);
    write_record(out, "label", &loaded, &RunConfig::new(load_args, None, Some(label_args)), &extra)
}

fn cmd_pipeline(
    scene: &Path,
    out: &Path,
    vocab: Option<&Path>,
    load_args: &LoadArgs,
    merge: &MergeArgs,
    label_args: &LabelArgs,
) -> Result<(), CliError> {
    let merge_config = merge.to_config(load_args.tau_occ)?;
    let (label_config, spec) = label_args.to_config(load_args.tau_occ)?;
    let loaded = load(scene, load_args)?;
    let (vocab, vocab_files) = resolve_vocab(&loaded.scene, vocab)?;
    let boxes = detect(&loaded.scene, &merge_config)?;
    let detections = label(&loaded.scene, &boxes, &vocab, &label_config, &spec)?;
    write_detections(&detections, out).map_err(input)?;
    let config = RunConfig::new(load_args, Some(merge), Some(label_args));
    write_record(out, "pipeline", &loaded, &config, &vocab_files)
}

/// Scene manifests under `path`: the path itself, its `manifest.json`, or
/// the `manifest.json` of each immediate subdirectory (sorted).
fn scene_manifests(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() || path.join("manifest.json").is_file() {
        return Ok(vec![manifest_of(path)?]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path().join("manifest.json")))
        .filter(|m| m.is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(CliError::Input(format!("{}: no scenes found", path.display())));
    }
    Ok(found)
}

fn cmd_export_pseudo(scene: &Path, out: &Path, load_args: &LoadArgs, merge: &MergeArgs) -> Result<(), CliError> {
    let config = merge.to_config(load_args.tau_occ)?;
    let manifests = scene_manifests(scene)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
    let run_config = RunConfig::new(load_args, Some(merge), None);
    let written: Vec<Result<(), CliError>> = manifests
        .par_iter()
        .map(|m| {
            let loaded = load(m, load_args)?;
            let boxes = detect(&loaded.scene, &config)?;
            let path = write_pseudo_labels(&boxes, &loaded.scene.id, out).map_err(input)?;
            write_record(&path, "export-pseudo", &loaded, &run_config, &[])
        })
        .collect();
    written.into_iter().collect()
}

fn cmd_synth(out: &Path) -> Result<(), CliError> {
    let synth = generate(&SynthConfig::default(), &default_objects());
    let paths = write_synthetic(&synth, out).map_err(input)?;
    println!("{}", paths.manifest.display());
    println!("{}", paths.ground_truth.display());
    Ok(())
}

fn cmd_serve_fake(seed: u64, scene: Option<&Path>) -> Result<(), CliError> {
    let mut provider = FakeProvider::new(seed);
    if let Some(scene) = scene {
        let manifest = manifest_of(scene)?;
        let m = ovdet3d::scene_io::read_manifest(&manifest).map_err(input)?;
        if let Some(v) = m.vocabulary {
            provider = provider.with_label_classes(v.classes, v.prompt_template);
        }
    }
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve(&mut provider, BufReader::new(stdin.lock()), stdout.lock())
        .map_err(|e| CliError::Provider(e.to_string()))
}

/// Detection files keyed by scene id: a single file is its own scene (file
/// stem), a directory contributes every `*.json` that is not run metadata.
fn scene_files(path: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if path.is_file() {
        return Ok(BTreeMap::from([(stem(path), path.to_path_buf())]));
    }
    let entries = std::fs::read_dir(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let files: BTreeMap<String, PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().is_some_and(|e| e == "json")
                && !p.to_string_lossy().ends_with(".meta.json")
        })
        .map(|p| (stem(&p), p))
        .collect();
    if files.is_empty() {
        return Err(CliError::Input(format!("{}: no .json files", path.display())));
    }
    Ok(files)
}

fn read_records(files: &BTreeMap<String, PathBuf>) -> Result<BTreeMap<String, Vec<DetectionRecord>>, CliError> {
    files
        .iter()
        .map(|(k, p)| Ok((k.clone(), read_detection_records(p).map_err(input)?)))
        .collect()
}

fn to_box(r: &DetectionRecord, path: &Path) -> Result<Box3D, CliError> {
    r.to_box()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Class names indexed by id, taken from the ground truth.
fn class_names(gts: &BTreeMap<String, Vec<DetectionRecord>>) -> Result<Vec<String>, CliError> {
    let mut names: BTreeMap<u32, String> = BTreeMap::new();
    for (scene, records) in gts {
        for (i, r) in records.iter().enumerate() {
            let id = r
                .class_id
                .ok_or_else(|| CliError::Input(format!("ground truth {scene}[{i}] has no class_id")))?;
            let label = r.label.clone().unwrap_or_else(|| format!("class_{id}"));
            match names.get(&id) {
                Some(existing) if *existing != label => {
                    return Err(CliError::Input(format!(
                        "class id {id} is labeled both '{existing}' and '{label}'"
                    )))
                }
                _ => {
                    names.insert(id, label);
                }
            }
        }
    }
    let n = names.keys().next_back().map_or(0, |m| *m as usize + 1);
    Ok((0..n as u32)
        .map(|i| names.get(&i).cloned().unwrap_or_else(|| format!("class_{i}")))
        .collect())
}

fn cmd_eval(
    preds_path: &Path,
    gts_path: &Path,
    protocol: Protocol,
    iou: &[f64],
    conf: Option<f64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    for &t in iou.iter().chain(conf.as_ref()) {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Config(format!("threshold {t} must lie in [0, 1]")));
        }
    }
    let mut pred_files = scene_files(preds_path)?;
    let mut gt_files = scene_files(gts_path)?;
    // two single files are one scene, whatever their names
    if preds_path.is_file() && gts_path.is_file() {
        pred_files = BTreeMap::from([("scene".to_string(), preds_path.to_path_buf())]);
        gt_files = BTreeMap::from([("scene".to_string(), gts_path.to_path_buf())]);
    }
    let only_preds: Vec<&String> = pred_files.keys().filter(|k| !gt_files.contains_key(*k)).collect();
    let only_gts: Vec<&String> = gt_files.keys().filter(|k| !pred_files.contains_key(*k)).collect();
    if !only_preds.is_empty() || !only_gts.is_empty() {
        return Err(CliError::Input(format!(
            "scene ids differ: only in predictions {only_preds:?}, only in ground truth {only_gts:?}"
        )));
    }
    let pred_records = read_records(&pred_files)?;
    let gt_records = read_records(&gt_files)?;
    let names = class_names(&gt_records)?;
    let by_name: BTreeMap<&str, u32> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i as u32)).collect();

    let mut gts = BTreeMap::new();
    for (scene, records) in &gt_records {
        let boxes = records
            .iter()
            .map(|r| {
                Ok(GtBox {
                    bbox: to_box(r, &gt_files[scene])?,
                    class_id: r.class_id.expect("checked in class_names"),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        gts.insert(scene.clone(), GroundTruthSet { boxes });
    }
    // predictions whose label names no ground-truth class cannot match anything
    let mut preds = BTreeMap::new();
    for (scene, records) in &pred_records {
        let path = &pred_files[scene];
        let mut boxes = Vec::new();
        for (i, r) in records.iter().enumerate() {
            let score = r
                .score
                .ok_or_else(|| CliError::Input(format!("{}: prediction {i} has no score", path.display())))?;
            let class_id = match (r.class_id, r.label.as_deref()) {
                (Some(id), _) => Some(id),
                (None, Some(l)) => by_name.get(l).copied(),
                (None, None) => None,
            };
            let bbox = to_box(r, path)?;
            match (protocol, class_id) {
                (Protocol::Map, Some(class_id)) => boxes.push(ScoredBox { bbox, class_id, score }),
                (Protocol::Map, None) => {}
                (Protocol::Binary, c) => boxes.push(ScoredBox { bbox, class_id: c.unwrap_or(0), score }),
            }
        }
        preds.insert(scene.clone(), boxes);
    }

    let (report, table) = match protocol {
        Protocol::Map => {
            let r = evaluate_map(&preds, &gts, names.len(), iou).map_err(|e| CliError::Input(e.to_string()))?;
            let classes: Vec<Value> = r
                .classes
                .iter()
                .map(|c| {
                    json!({
                        "class_id": c.class_id,
                        "name": names[c.class_id as usize],
                        "num_gt": c.num_gt,
                        "num_pred": c.num_pred,
                        "ap": c.ap,
                    })
                })
                .collect();
            let table = r.to_table(&names);
            (
                json!({ "protocol": "map", "iou_thresholds": r.iou_thresholds, "classes": classes, "map": r.map }),
                table,
            )
        }
        Protocol::Binary => {
            let conf = conf.ok_or_else(|| CliError::Config("--protocol binary requires --conf".into()))?;
            let [iou] = iou else {
                return Err(CliError::Config("--protocol binary takes exactly one --iou value".into()));
            };
            let pr = evaluate_pr_binary(&preds, &gts, *iou, conf).map_err(|e| CliError::Input(e.to_string()))?;
            let table = format!(
                "{:<10}  {:>8}\n{:<10}  {:>8.4}\n{:<10}  {:>8.4}\n",
                "metric", "value", "precision", pr.precision, "recall", pr.recall
            );
            (
                json!({
                    "protocol": "binary",
                    "iou_threshold": iou,
                    "conf_threshold": conf,
                    "precision": pr.precision,
                    "recall": pr.recall,
                    "true_positives": pr.true_positives,
                    "false_positives": pr.false_positives,
                    "num_gt": pr.num_gt,
                }),
                table,
            )
        }
    };
    if let Some(out) = out {
        std::fs::write(out, to_canonical_json(&report)).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
    }
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(table.as_bytes())
        .map_err(|e| CliError::Input(format!("stdout: {e}")))
}
