//! The generate / stats / train / evaluate / ablate workflows.
//!
//! Each command takes a [`RunConfig`], writes everything under
//! `<out>/<run-id>/` together with a `config.txt` snapshot, and returns the
//! paths it wrote. Scenes live in `<data>/seed-<s>/` where `<data>` defaults to
//! the run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, Sweep};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::model::features::extract_features;
use crate::model::mlp::Classifier;
use crate::model::train::{self, TrainReport};
use crate::par::Exec;
use crate::pointcloud::{read_cloud, write_cloud, CloudFormat, LabeledPointCloud};
use crate::spatial::SpatialIndex;
use crate::stats::{apply_partition_rule, class_counts, ClassStats};
use crate::synth::generate_scene;

pub const SNAPSHOT_FILE: &str = "config.txt";
pub const MANIFEST_HEADER: &str =
    "split,seed,attempt_seed,class,name,target_fraction,realized_fraction,count,instances";
pub const ABLATION_HEADER: &str =
    "param,value,seed,miou,miou_head,miou_common,miou_tail,h_iou,best_epoch";

fn write_file(path: &Path, contents: &[u8]) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn write_snapshot(cfg: &RunConfig) -> Result<PathBuf> {
    write_file(
        &cfg.run_dir().join(SNAPSHOT_FILE),
        cfg.serialize().as_bytes(),
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Paths of the train and validation scenes of one seed.
pub fn scene_paths(cfg: &RunConfig, seed: u64) -> (PathBuf, PathBuf) {
    let dir = cfg.scene_dir(seed);
    let ext = cfg.scene_extension();
    (
        dir.join(format!("train.{ext}")),
        dir.join(format!("val.{ext}")),
    )
}

fn load_scenes(cfg: &RunConfig, seed: u64) -> Result<(LabeledPointCloud, LabeledPointCloud)> {
    let (train_path, val_path) = scene_paths(cfg, seed);
    for p in [&train_path, &val_path] {
        if !p.exists() {
            return Err(Error::Usage(format!(
                "scene {} not found; run `tailgeo generate` first",
                p.display()
            )));
        }
    }
    Ok((
        read_cloud(&train_path, cfg.format)?,
        read_cloud(&val_path, cfg.format)?,
    ))
}

/// Writes train and validation scenes plus `manifest.csv` for every seed.
pub fn generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let exec = Exec::for_threads(cfg.threads);
    let mut written = vec![write_snapshot(cfg)?];
    let targets = cfg.scene.target_fractions();
    for &seed in &cfg.seeds {
        let (train_path, val_path) = scene_paths(cfg, seed);
        let mut manifest = format!("{MANIFEST_HEADER}\n");
        for (split, path, validation) in [("train", &train_path, false), ("val", &val_path, true)] {
            let spec = cfg.scene_for(seed, validation);
            let scene = generate_scene(&spec, exec)?;
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_cloud(&scene.cloud, path, cfg.format)?;
            written.push(path.clone());
            let counts = class_counts(&scene.cloud);
            for (c, frac) in scene.realized_fractions().iter().enumerate() {
                let _ = writeln!(
                    manifest,
                    "{split},{},{},{c},{},{},{},{},{}",
                    spec.seed,
                    scene.attempt_seed,
                    spec.classes[c].name,
                    targets[c],
                    frac,
                    counts[c],
                    scene.instances_per_class[c]
                );
            }
        }
        written.push(write_file(
            &cfg.scene_dir(seed).join("manifest.csv"),
            manifest.as_bytes(),
        )?);
    }
    Ok(written)
}

/// Writes the class statistics of every seed's training scene.
pub fn stats(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let exec = Exec::for_threads(cfg.threads);
    let mut written = vec![write_snapshot(cfg)?];
    for &seed in &cfg.seeds {
        let (train_cloud, _) = load_scenes(cfg, seed)?;
        let index = SpatialIndex::build(&train_cloud)?;
        let stats = ClassStats::compute(
            &train_cloud,
            &index,
            cfg.loss.beta,
            cfg.loss.radius,
            &cfg.partition,
            exec,
        )?;
        let path = cfg.run_dir().join(format!("seed-{seed}")).join("stats.csv");
        written.push(write_file(&path, stats.report().as_bytes())?);
    }
    Ok(written)
}

/// Directory that holds one training run's artefacts.
pub fn train_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.run_dir()
        .join(format!("seed-{seed}"))
        .join(cfg.loss.family.as_str())
}

fn write_train_outputs(
    dir: &Path,
    model: &Classifier,
    report: &TrainReport,
) -> Result<Vec<PathBuf>> {
    let metrics = MetricReport::new(&report.confusion, &report.partition);
    Ok(vec![
        write_file(&dir.join("model.tlgm"), &model.to_bytes())?,
        write_file(&dir.join("history.csv"), report.to_csv().as_bytes())?,
        write_file(&dir.join("metrics.csv"), metrics.to_csv().as_bytes())?,
        write_file(
            &dir.join("confusion.csv"),
            report.confusion.to_csv().as_bytes(),
        )?,
    ])
}

/// Trains one model per seed and writes `model.tlgm`, `history.csv`,
/// `metrics.csv` and `confusion.csv` under `seed-<s>/<loss family>/`.
pub fn train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let exec = Exec::for_threads(cfg.threads);
    let mut written = vec![write_snapshot(cfg)?];
    for &seed in &cfg.seeds {
        let (train_cloud, val_cloud) = load_scenes(cfg, seed)?;
        let (model, report) =
            train::train(&train_cloud, &val_cloud, &cfg.train_config(seed), exec)?;
        written.extend(write_train_outputs(&train_dir(cfg, seed), &model, &report)?);
    }
    Ok(written)
}

/// Where `evaluate` gets its predictions from.
#[derive(Clone, Debug)]
pub enum Predictor {
    Model(PathBuf),
    /// A text file with one class id per line, in scene order.
    Predictions(PathBuf),
}

/// Reads a predictions file: one class id per line, blank lines ignored.
pub fn read_predictions(path: &Path) -> Result<Vec<u16>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::parse_line(n + 1, format!("'{}' is not a class id", l.trim())))
        })
        .collect()
}

/// Predicts every point of `cloud` with `model`.
pub fn predict(model: &Classifier, cloud: &LabeledPointCloud, exec: Exec) -> Result<Vec<u16>> {
    if model.classes() != cloud.num_classes() {
        return Err(Error::domain(format!(
            "model predicts {} classes, scene has {}",
            model.classes(),
            cloud.num_classes()
        )));
    }
    let index = SpatialIndex::build(cloud)?;
    let features = extract_features(cloud, &index, model.feature_config(), exec)?;
    let flat: Vec<f64> = features.rows.iter().flatten().copied().collect();
    Ok(model.forward(&flat, exec)?.predictions())
}

/// Output of [`evaluate`].
pub struct Evaluation {
    pub report: MetricReport,
    pub confusion: ConfusionMatrix,
    pub written: Vec<PathBuf>,
}

/// Scores predictions on a labelled scene. Groups come from the scene's own
/// class counts under the configured partition rule. Outputs go to
/// `eval-<scene stem>/` in the run directory.
pub fn evaluate(cfg: &RunConfig, predictor: &Predictor, scene: &Path) -> Result<Evaluation> {
    cfg.validate()?;
    let exec = Exec::for_threads(cfg.threads);
    let cloud = read_cloud(scene, CloudFormat::from_path(scene))?;
    let predictions = match predictor {
        Predictor::Model(path) => predict(&Classifier::load(path)?, &cloud, exec)?,
        Predictor::Predictions(path) => {
            let p = read_predictions(path)?;
            if p.len() != cloud.len() {
                return Err(Error::domain(format!(
                    "{} predictions for {} points",
                    p.len(),
                    cloud.len()
                )));
            }
            p
        }
    };
    let confusion =
        ConfusionMatrix::from_predictions(cloud.num_classes(), cloud.labels(), &predictions)?;
    let partition = apply_partition_rule(&class_counts(&cloud), &cfg.partition)?;
    let report = MetricReport::new(&confusion, &partition);

    let stem = scene
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("scene");
    let dir = cfg.run_dir().join(format!("eval-{stem}"));
    let mut written = vec![write_snapshot(cfg)?];
    written.push(write_file(
        &dir.join("metrics.csv"),
        report.to_csv().as_bytes(),
    )?);
    written.push(write_file(
        &dir.join("confusion.csv"),
        confusion.to_csv().as_bytes(),
    )?);
    if matches!(predictor, Predictor::Model(_)) {
        let text: String = predictions.iter().map(|p| format!("{p}\n")).collect();
        written.push(write_file(&dir.join("predictions.txt"), text.as_bytes())?);
    }
    Ok(Evaluation {
        report,
        confusion,
        written,
    })
}

/// One (value, seed) cell of an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: f64,
    pub seed: u64,
    pub report: MetricReport,
    pub best_epoch: Option<usize>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median over the defined entries; `None` if every entry is undefined.
pub fn median_of(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    median(values.into_iter().flatten().collect())
}

/// Builds the ablation summary: one row per cell in input order, then one
/// `median` row per value.
pub fn ablation_csv(param: &str, values: &[f64], rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let m = &r.report;
        let best = r
            .best_epoch
            .map_or_else(|| "NA".to_string(), |e| e.to_string());
        let _ = writeln!(
            out,
            "{param},{},{},{},{},{},{},{},{best}",
            r.value,
            r.seed,
            fmt_opt(m.miou),
            fmt_opt(m.miou_head),
            fmt_opt(m.miou_common),
            fmt_opt(m.miou_tail),
            fmt_opt(m.h_iou)
        );
    }
    for &v in values {
        let cell: Vec<&MetricReport> = rows
            .iter()
            .filter(|r| r.value == v)
            .map(|r| &r.report)
            .collect();
        let med =
            |f: fn(&MetricReport) -> Option<f64>| fmt_opt(median_of(cell.iter().map(|m| f(m))));
        let _ = writeln!(
            out,
            "{param},{v},median,{},{},{},{},{},NA",
            med(|m| m.miou),
            med(|m| m.miou_head),
            med(|m| m.miou_common),
            med(|m| m.miou_tail),
            med(|m| m.h_iou)
        );
    }
    out
}

/// Trains every (value, seed) cell of `sweep` and writes
/// `ablate-<param>/summary.csv`, with each cell's artefacts in
/// `ablate-<param>/<param>=<value>/seed-<s>/`.
pub fn ablate(cfg: &RunConfig, sweep: &Sweep) -> Result<(Vec<AblationRow>, Vec<PathBuf>)> {
    cfg.validate()?;
    if sweep.values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    let exec = Exec::for_threads(cfg.threads);
    let name = sweep.param.as_str();
    let root = cfg.run_dir().join(format!("ablate-{name}"));
    let mut cells = Vec::with_capacity(sweep.values.len());
    for &value in &sweep.values {
        let mut c = cfg.clone();
        sweep.param.apply(&mut c.loss, value)?;
        cells.push((value, c));
    }

    let mut written = vec![write_snapshot(cfg)?];
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let (train_cloud, val_cloud) = load_scenes(cfg, seed)?;
        for (value, c) in &cells {
            let (model, report) =
                train::train(&train_cloud, &val_cloud, &c.train_config(seed), exec)?;
            let dir = root
                .join(format!("{name}={value}"))
                .join(format!("seed-{seed}"));
            written.extend(write_train_outputs(&dir, &model, &report)?);
            rows.push(AblationRow {
                value: *value,
                seed,
                report: MetricReport::new(&report.confusion, &report.partition),
                best_epoch: report.best_epoch,
            });
        }
    }
    rows.sort_by(|a, b| {
        let ia = sweep.values.iter().position(|v| *v == a.value);
        let ib = sweep.values.iter().position(|v| *v == b.value);
        ia.cmp(&ib).then(
            cfg.seeds
                .iter()
                .position(|s| *s == a.seed)
                .cmp(&cfg.seeds.iter().position(|s| *s == b.seed)),
        )
    });
    let csv = ablation_csv(name, &sweep.values, &rows);
    written.push(write_file(&root.join("summary.csv"), csv.as_bytes())?);
    Ok((rows, written))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::ClassPartition;
    use crate::pointcloud::Group;

    #[test]
    fn medians() {
        assert_eq!(
            median_of([Some(3.0), None, Some(1.0), Some(2.0)]),
            Some(2.0)
        );
        assert_eq!(median_of([Some(4.0), Some(1.0)]), Some(2.5));
        assert_eq!(median_of([None, None]), None);
    }

    #[test]
    fn ablation_rows_and_medians() {
        let partition = ClassPartition::from_groups(&[Group::Head, Group::Tail]);
        let rows: Vec<AblationRow> = [
            (0.5, 1u64, [9, 1, 0, 10]),
            (0.5, 2, [10, 0, 0, 10]),
            (0.5, 3, [5, 5, 5, 5]),
        ]
        .into_iter()
        .map(|(value, seed, counts)| AblationRow {
            value,
            seed,
            report: MetricReport::new(
                &ConfusionMatrix::from_counts(2, counts.to_vec()).unwrap(),
                &partition,
            ),
            best_epoch: Some(0),
        })
        .collect();
        let csv = ablation_csv("alpha", &[0.5], &rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 1);
        assert!(lines[4].starts_with("alpha,0.5,median,"));
        assert!(lines[2].starts_with("alpha,0.5,2,1.000000,"));
    }
}
