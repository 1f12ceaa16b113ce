//! Plain-text run configuration.
//!
//! One `key = value` pair per line, with dotted section prefixes
//! (`loss.family = boundary_cb`). Blank lines and `#` comments are ignored.
//! Every key has a default, so an empty file is a valid configuration.
//! [`RunConfig::serialize`] writes every key, and parsing its output yields an
//! equal configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossFamily};
use crate::model::features::FeatureConfig;
use crate::model::train::{OptimizerConfig, TrainConfig};
use crate::pointcloud::{CloudFormat, Group};
use crate::stats::{PartitionRule, WeightNorm};
use crate::synth::{
    default_industrial_spec, ClassSpec, Mount, PrimitiveKind, Range, SceneSpec, DEFAULT_NOISE,
};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    /// Directory holding `seed-<s>/` scene folders; defaults to the run directory.
    pub data_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 leaves the choice to the thread pool.
    pub threads: usize,
    pub format: CloudFormat,
    pub scene: SceneSpec,
    pub val_points: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub hidden: Vec<usize>,
    pub features: FeatureConfig,
    pub block_size: f64,
    pub min_block_points: usize,
    pub partition: PartitionRule,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            run_id: "default".to_string(),
            out_dir: PathBuf::from("runs"),
            data_dir: None,
            seeds: vec![1],
            threads: 0,
            format: CloudFormat::Binary,
            scene: default_industrial_spec(),
            val_points: 50_000,
            loss: train.loss,
            optimizer: train.optimizer,
            epochs: train.epochs,
            hidden: train.hidden,
            features: train.features,
            block_size: train.block_size,
            min_block_points: train.min_block_points,
            partition: train.partition,
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| usage(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(usage(format!(
            "'{key}' expects true or false, got '{value}'"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v)).collect()
}

fn parse_range(key: &str, value: &str) -> Result<Range> {
    let (lo, hi) = value
        .split_once("..")
        .ok_or_else(|| usage(format!("'{key}' expects lo..hi, got '{value}'")))?;
    Ok(Range::new(parse_value(key, lo)?, parse_value(key, hi)?))
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.trim() == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn format_name(format: CloudFormat) -> &'static str {
    match format {
        CloudFormat::Csv => "csv",
        CloudFormat::Binary => "binary",
    }
}

fn blank_class(index: usize) -> ClassSpec {
    ClassSpec {
        name: format!("class{index}"),
        kind: PrimitiveKind::StraightCylinder,
        mount: Mount::Free,
        fraction: 0.0,
        instances: (1, 10_000),
        length: Range::new(1.0, 2.0),
        radius: Range::new(0.1, 0.2),
        elevation: Range::new(0.0, 1.0),
        vertical_share: 0.0,
        noise: DEFAULT_NOISE,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("line {}: expected 'key = value'", n + 1)))?;
            let key = key.trim().to_string();
            if entries
                .insert(key.clone(), (n + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(usage(format!("line {}: duplicate key '{key}'", n + 1)));
            }
        }

        let mut cfg = RunConfig::default();
        // The class count must be known before per-class keys are applied.
        if let Some((_, v)) = entries.remove("scene.classes") {
            let count: usize = parse_value("scene.classes", &v)?;
            let default_len = cfg.scene.classes.len();
            cfg.scene.classes.truncate(count);
            cfg.scene
                .classes
                .extend((default_len.min(count)..count).map(blank_class));
        }
        let mut thresholds = match cfg.partition {
            PartitionRule::Thresholds { head, tail } => (head, tail),
            PartitionRule::Explicit(_) => unreachable!("default is thresholds"),
        };
        let mut groups: Option<Vec<Group>> = None;

        for (key, (line, value)) in &entries {
            let k = key.as_str();
            let v = value.as_str();
            let ctx = |e: Error| match e {
                Error::Usage(m) => usage(format!("line {line}: {m}")),
                other => other,
            };
            (|| -> Result<()> {
                match k {
                    "run.id" => cfg.run_id = v.to_string(),
                    "run.out" => cfg.out_dir = PathBuf::from(v),
                    "run.data" => cfg.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
                    "run.seeds" => cfg.seeds = parse_list(k, v)?,
                    "run.threads" => cfg.threads = parse_value(k, v)?,
                    "run.format" => {
                        cfg.format = match v {
                            "csv" => CloudFormat::Csv,
                            "binary" => CloudFormat::Binary,
                            _ => return Err(usage(format!("unknown scene format '{v}'"))),
                        }
                    }
                    "scene.points" => cfg.scene.total_points = parse_value(k, v)?,
                    "scene.val_points" => cfg.val_points = parse_value(k, v)?,
                    "scene.imbalance_ratio" => cfg.scene.imbalance_ratio = parse_optional(k, v)?,
                    "scene.density" => cfg.scene.density = parse_value(k, v)?,
                    "scene.density_contrast" => cfg.scene.density_contrast = parse_value(k, v)?,
                    "scene.ground_density" => cfg.scene.ground_density = parse_value(k, v)?,
                    "loss.family" => cfg.loss.family = v.parse()?,
                    "loss.beta" => cfg.loss.beta = parse_value(k, v)?,
                    "loss.focal_gamma" => cfg.loss.focal_gamma = parse_value(k, v)?,
                    "loss.alpha" => cfg.loss.alpha = parse_value(k, v)?,
                    "loss.k" => cfg.loss.k = parse_value(k, v)?,
                    "loss.radius" => cfg.loss.radius = parse_value(k, v)?,
                    "loss.entropy_detached" => cfg.loss.entropy_detached = parse_bool(k, v)?,
                    "loss.include_self" => cfg.loss.include_self = parse_bool(k, v)?,
                    "loss.weight_norm" => {
                        cfg.loss.weight_norm =
                            v.parse::<WeightNorm>().map_err(|e| usage(e.to_string()))?
                    }
                    "optim.learning_rate" => cfg.optimizer.learning_rate = parse_value(k, v)?,
                    "optim.momentum" => cfg.optimizer.momentum = parse_value(k, v)?,
                    "optim.weight_decay" => cfg.optimizer.weight_decay = parse_value(k, v)?,
                    "optim.min_learning_rate" => {
                        cfg.optimizer.min_learning_rate = parse_value(k, v)?
                    }
                    "optim.max_grad_norm" => cfg.optimizer.max_grad_norm = parse_optional(k, v)?,
                    "train.epochs" => cfg.epochs = parse_value(k, v)?,
                    "train.hidden" => cfg.hidden = parse_list(k, v)?,
                    "train.block_size" => cfg.block_size = parse_value(k, v)?,
                    "train.min_block_points" => cfg.min_block_points = parse_value(k, v)?,
                    "features.k_feat" => cfg.features.k_feat = parse_value(k, v)?,
                    "features.k_context" => cfg.features.k_context = parse_value(k, v)?,
                    "features.coarse_stride" => cfg.features.coarse_stride = parse_value(k, v)?,
                    "features.density_radius" => cfg.features.density_radius = parse_value(k, v)?,
                    "partition.head" => thresholds.0 = parse_value(k, v)?,
                    "partition.tail" => thresholds.1 = parse_value(k, v)?,
                    "partition.groups" => {
                        groups = Some(
                            parse_list::<String>(k, v)?
                                .iter()
                                .map(|g| g.parse::<Group>().map_err(|e| usage(e.to_string())))
                                .collect::<Result<_>>()?,
                        )
                    }
                    _ => {
                        if let Some(rest) = k.strip_prefix("scene.class.") {
                            return cfg.apply_class_key(k, rest, v);
                        }
                        return Err(usage(format!("unknown key '{k}'")));
                    }
                }
                Ok(())
            })()
            .map_err(ctx)?;
        }
        cfg.partition = match groups {
            Some(g) => PartitionRule::Explicit(g),
            None => PartitionRule::Thresholds {
                head: thresholds.0,
                tail: thresholds.1,
            },
        };
        Ok(cfg)
    }

    fn apply_class_key(&mut self, key: &str, rest: &str, v: &str) -> Result<()> {
        let (index, field) = rest
            .split_once('.')
            .ok_or_else(|| usage(format!("malformed class key '{key}'")))?;
        let index: usize = parse_value(key, index)?;
        let count = self.scene.classes.len();
        let class = self
            .scene
            .classes
            .get_mut(index)
            .ok_or_else(|| usage(format!("'{key}' refers to class {index} of {count}")))?;
        match field {
            "name" => class.name = v.to_string(),
            "kind" => class.kind = v.parse().map_err(|e: Error| usage(e.to_string()))?,
            "mount" => class.mount = v.parse().map_err(|e: Error| usage(e.to_string()))?,
            "fraction" => class.fraction = parse_value(key, v)?,
            "instances" => {
                let (lo, hi) = v
                    .split_once("..")
                    .ok_or_else(|| usage(format!("'{key}' expects lo..hi")))?;
                class.instances = (parse_value(key, lo)?, parse_value(key, hi)?);
            }
            "length" => class.length = parse_range(key, v)?,
            "radius" => class.radius = parse_range(key, v)?,
            "elevation" => class.elevation = parse_range(key, v)?,
            "vertical_share" => class.vertical_share = parse_value(key, v)?,
            "noise" => class.noise = parse_value(key, v)?,
            _ => return Err(usage(format!("unknown class field in '{key}'"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn serialize(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("run.id", self.run_id.clone());
        kv("run.out", self.out_dir.display().to_string());
        kv(
            "run.data",
            self.data_dir
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
        );
        kv("run.seeds", join(&self.seeds));
        kv("run.threads", self.threads.to_string());
        kv("run.format", format_name(self.format).to_string());
        let s = &self.scene;
        kv("scene.points", s.total_points.to_string());
        kv("scene.val_points", self.val_points.to_string());
        kv(
            "scene.imbalance_ratio",
            s.imbalance_ratio
                .map_or("none".to_string(), |r| r.to_string()),
        );
        kv("scene.density", s.density.to_string());
        kv("scene.density_contrast", s.density_contrast.to_string());
        kv("scene.ground_density", s.ground_density.to_string());
        kv("scene.classes", s.classes.len().to_string());
        for (i, c) in s.classes.iter().enumerate() {
            let p = format!("scene.class.{i}");
            kv(&format!("{p}.name"), c.name.clone());
            kv(&format!("{p}.kind"), c.kind.to_string());
            kv(&format!("{p}.mount"), c.mount.to_string());
            kv(&format!("{p}.fraction"), c.fraction.to_string());
            kv(
                &format!("{p}.instances"),
                format!("{}..{}", c.instances.0, c.instances.1),
            );
            kv(
                &format!("{p}.length"),
                format!("{}..{}", c.length.lo, c.length.hi),
            );
            kv(
                &format!("{p}.radius"),
                format!("{}..{}", c.radius.lo, c.radius.hi),
            );
            kv(
                &format!("{p}.elevation"),
                format!("{}..{}", c.elevation.lo, c.elevation.hi),
            );
            kv(&format!("{p}.vertical_share"), c.vertical_share.to_string());
            kv(&format!("{p}.noise"), c.noise.to_string());
        }
        let l = &self.loss;
        kv("loss.family", l.family.to_string());
        kv("loss.beta", l.beta.to_string());
        kv("loss.focal_gamma", l.focal_gamma.to_string());
        kv("loss.alpha", l.alpha.to_string());
        kv("loss.k", l.k.to_string());
        kv("loss.radius", l.radius.to_string());
        kv("loss.entropy_detached", l.entropy_detached.to_string());
        kv("loss.include_self", l.include_self.to_string());
        kv("loss.weight_norm", l.weight_norm.as_str().to_string());
        let op = &self.optimizer;
        kv("optim.learning_rate", op.learning_rate.to_string());
        kv("optim.momentum", op.momentum.to_string());
        kv("optim.weight_decay", op.weight_decay.to_string());
        kv("optim.min_learning_rate", op.min_learning_rate.to_string());
        kv(
            "optim.max_grad_norm",
            op.max_grad_norm
                .map_or("none".to_string(), |c| c.to_string()),
        );
        kv("train.epochs", self.epochs.to_string());
        kv("train.hidden", join(&self.hidden));
        kv("train.block_size", self.block_size.to_string());
        kv("train.min_block_points", self.min_block_points.to_string());
        kv("features.k_feat", self.features.k_feat.to_string());
        kv("features.k_context", self.features.k_context.to_string());
        kv(
            "features.coarse_stride",
            self.features.coarse_stride.to_string(),
        );
        kv(
            "features.density_radius",
            self.features.density_radius.to_string(),
        );
        match &self.partition {
            PartitionRule::Thresholds { head, tail } => {
                kv("partition.head", head.to_string());
                kv("partition.tail", tail.to_string());
            }
            PartitionRule::Explicit(groups) => {
                kv("partition.groups", join(groups));
            }
        }
        o
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(usage("run.seeds must list at least one seed"));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(usage(
                "run.id must be a non-empty name without path separators",
            ));
        }
        self.scene.validate()?;
        if self.val_points == 0 {
            return Err(Error::domain("scene.val_points must be positive"));
        }
        self.train_config(self.seeds[0]).validate()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.run_dir())
    }

    pub fn scene_dir(&self, seed: u64) -> PathBuf {
        self.data_root().join(format!("seed-{seed}"))
    }

    pub fn scene_extension(&self) -> &'static str {
        match self.format {
            CloudFormat::Csv => "csv",
            CloudFormat::Binary => "tlg",
        }
    }

    /// Scene spec of one split. Train and validation scenes of a seed are
    /// independent draws.
    pub fn scene_for(&self, seed: u64, validation: bool) -> SceneSpec {
        let mut spec = self.scene.clone();
        if validation {
            spec.total_points = self.val_points;
            spec.seed = seed ^ 0x5641_4C5F_5343_454E;
        } else {
            spec.seed = seed;
        }
        spec
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            loss: self.loss.clone(),
            optimizer: self.optimizer.clone(),
            epochs: self.epochs,
            seed,
            hidden: self.hidden.clone(),
            features: self.features,
            block_size: self.block_size,
            min_block_points: self.min_block_points,
            partition: self.partition.clone(),
        }
    }
}

/// A loss hyperparameter that `ablate` can sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Beta,
    Radius,
    K,
    Alpha,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::Radius => "r",
            SweepParam::K => "k",
            SweepParam::Alpha => "alpha",
        }
    }

    /// Sets the parameter on `loss`; `k` must be a positive integer.
    pub fn apply(self, loss: &mut LossConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::Beta => loss.beta = value,
            SweepParam::Radius => loss.radius = value,
            SweepParam::Alpha => loss.alpha = value,
            SweepParam::K => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(usage(format!("k must be a positive integer, got {value}")));
                }
                loss.k = value as usize;
            }
        }
        loss.validate().map_err(|e| usage(e.to_string()))
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "beta" => Ok(SweepParam::Beta),
            "r" | "radius" => Ok(SweepParam::Radius),
            "k" => Ok(SweepParam::K),
            "alpha" => Ok(SweepParam::Alpha),
            other => Err(usage(format!(
                "cannot sweep '{other}'; choose one of beta, r, k, alpha"
            ))),
        }
    }
}

/// A parsed `--sweep name=v1,v2,...` argument.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, values) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("sweep must look like name=v1,v2, got '{s}'")))?;
        let param: SweepParam = name.parse()?;
        let values: Vec<f64> = parse_list("sweep", values)?;
        if values.is_empty() {
            return Err(usage("sweep needs at least one value"));
        }
        Ok(Sweep { param, values })
    }
}

/// Helper for `LossFamily` lists on the command line.
pub fn parse_families(s: &str) -> Result<Vec<LossFamily>> {
    s.split(',').map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(
            RunConfig::parse("# only a comment\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn roundtrip_default_and_modified() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
        let mut cfg = RunConfig::default();
        cfg.loss.family = LossFamily::BoundaryCb;
        cfg.loss.beta = 0.999;
        cfg.seeds = vec![3, 1, 4];
        cfg.optimizer.max_grad_norm = None;
        cfg.scene.imbalance_ratio = Some(100.0);
        cfg.data_dir = Some(PathBuf::from("/tmp/x"));
        cfg.partition = PartitionRule::Explicit(vec![Group::Head; 12]);
        cfg.scene.classes[3].radius = Range::new(0.1 / 3.0, 0.7);
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn sections_and_comments() {
        let cfg = RunConfig::parse(
            "loss.family = boundary_cb  # trailing comment\nloss.k=32\nrun.seeds = 1,2,3\n",
        )
        .unwrap();
        assert_eq!(cfg.loss.family, LossFamily::BoundaryCb);
        assert_eq!(cfg.loss.k, 32);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn bad_lines_are_usage_errors() {
        for text in [
            "nonsense",
            "loss.k = x",
            "what.is = 1",
            "loss.k = 1\nloss.k = 2",
            "scene.class.40.name = a",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn class_count_changes() {
        let cfg = RunConfig::parse(
            "scene.classes = 1\nscene.class.0.fraction = 1\nscene.class.0.instances = 1..1",
        )
        .unwrap();
        assert_eq!(cfg.scene.classes.len(), 1);
        assert_eq!(cfg.scene.classes[0].name, "duct");
        cfg.scene.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn sweeps() {
        let s: Sweep = "k=8,16,32".parse().unwrap();
        assert_eq!(s.param, SweepParam::K);
        assert_eq!(s.values, vec![8.0, 16.0, 32.0]);
        assert_eq!("k=".parse::<Sweep>().unwrap_err().exit_code(), 2);
        assert_eq!("gamma=1".parse::<Sweep>().unwrap_err().exit_code(), 2);
        let mut loss = LossConfig::default();
        assert!(SweepParam::K.apply(&mut loss, 2.5).is_err());
        SweepParam::Radius.apply(&mut loss, 0.5).unwrap();
        assert_eq!(loss.radius, 0.5);
    }
}
