//! Run configuration: flat `section.key = value` text, fully validated before
//! any model is built.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tdaf_core::{AnarVariant, BackboneKind, BackboneSpec, ModelMode, R2dnsConfig, SgdConfig, StepSchedule};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(format!("unknown dataset '{other}' (cifar10|synthetic)")),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cifar10 => "cifar10",
            Self::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneKind,
    pub stages: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub input_size: usize,
    pub anar_variant: AnarVariant,
    pub interpolation_upsample: bool,
    pub flows: usize,
    pub eta: f64,
    pub mode: ModelMode,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the epoch budget at which the rate is multiplied by `lr_factor`.
    pub milestones: Vec<f64>,
    pub lr_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub data_seed: u64,
    /// `None` follows the dataset default: on for CIFAR-10, off for synthetic.
    pub augment: Option<bool>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::TinyResnet,
            stages: 3,
            channels: vec![32, 32, 32],
            num_classes: 4,
            input_size: 32,
            anar_variant: AnarVariant::Three,
            interpolation_upsample: false,
            flows: 3,
            eta: 0.5,
            mode: ModelMode::Attention,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.5, 0.75],
            lr_factor: 0.1,
            epochs: 30,
            batch_size: 64,
            eval_batch_size: 200,
            max_steps: 0,
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            train_samples: 5000,
            test_samples: 1000,
            data_seed: 0,
            augment: None,
            mean: [0.5; 3],
            std: [0.288_675_13; 3],
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Every key the parser accepts.
pub const KEYS: &[&str] = &[
    "backbone.kind",
    "backbone.stages",
    "backbone.channels",
    "backbone.num_classes",
    "backbone.input_size",
    "anar.variant",
    "anar.interpolation_upsample",
    "model.flows",
    "model.eta",
    "model.mode",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.milestones",
    "optim.factor",
    "train.epochs",
    "train.batch_size",
    "train.eval_batch_size",
    "train.max_steps",
    "train.seed",
    "data.dataset",
    "data.dir",
    "data.train_samples",
    "data.test_samples",
    "data.seed",
    "data.augment",
    "data.mean",
    "data.std",
    "paths.out",
];

/// Keys a TDAF run may change relative to its single-flow baseline.
pub const ATTENTION_KEYS: &[&str] = &["model.flows", "anar.variant", "anar.interpolation_upsample"];

fn parse_list<V: FromStr>(v: &str) -> std::result::Result<Vec<V>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<V>().map_err(|_| format!("bad list element '{}'", s.trim())))
        .collect()
}

fn parse_triple(v: &str) -> std::result::Result<[f32; 3], String> {
    let list: Vec<f32> = parse_list(v)?;
    list.try_into().map_err(|l: Vec<f32>| format!("expected 3 values, got {}", l.len()))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got '{other}'")),
    }
}

fn parse_num<V: FromStr>(v: &str) -> std::result::Result<V, String> {
    v.parse().map_err(|_| format!("cannot parse '{v}'"))
}

/// Raw key/value pairs with the line each came from.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| HarnessError::Config { line: line_no, msg };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected 'section.key = value', got '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(err(format!("unknown key '{key}'")));
        }
        if value.is_empty() {
            return Err(err(format!("empty value for '{key}'")));
        }
        if let Some((first, _)) = out.insert(key.to_string(), (line_no, value.to_string())) {
            return Err(err(format!("duplicate key '{key}' (first set on line {first})")));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let pairs = parse_pairs(text)?;
        let mut dataset_set_norm = false;
        for (key, (line, value)) in &pairs {
            cfg.apply(key, value).map_err(|msg| HarnessError::Config { line: *line, msg })?;
            dataset_set_norm |= key == "data.mean" || key == "data.std";
        }
        if cfg.dataset == DatasetKind::Cifar10 && !dataset_set_norm {
            cfg.mean = CIFAR_MEAN;
            cfg.std = CIFAR_STD;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "backbone.kind" => self.backbone = v.parse().map_err(|e: tdaf_core::Error| e.to_string())?,
            "backbone.stages" => self.stages = parse_num(v)?,
            "backbone.channels" => self.channels = parse_list(v)?,
            "backbone.num_classes" => self.num_classes = parse_num(v)?,
            "backbone.input_size" => self.input_size = parse_num(v)?,
            "anar.variant" => {
                self.anar_variant = AnarVariant::from_layers(parse_num(v)?).map_err(|e| e.to_string())?
            }
            "anar.interpolation_upsample" => self.interpolation_upsample = parse_bool(v)?,
            "model.flows" => self.flows = parse_num(v)?,
            "model.eta" => self.eta = parse_num(v)?,
            "model.mode" => self.mode = v.parse().map_err(|e: tdaf_core::Error| e.to_string())?,
            "optim.lr" => self.lr = parse_num(v)?,
            "optim.momentum" => self.momentum = parse_num(v)?,
            "optim.weight_decay" => self.weight_decay = parse_num(v)?,
            "optim.milestones" => {
                self.milestones = if v == "none" { Vec::new() } else { parse_list(v)? }
            }
            "optim.factor" => self.lr_factor = parse_num(v)?,
            "train.epochs" => self.epochs = parse_num(v)?,
            "train.batch_size" => self.batch_size = parse_num(v)?,
            "train.eval_batch_size" => self.eval_batch_size = parse_num(v)?,
            "train.max_steps" => self.max_steps = parse_num(v)?,
            "train.seed" => self.seed = parse_num(v)?,
            "data.dataset" => self.dataset = v.parse()?,
            "data.dir" => self.data_dir = Some(PathBuf::from(v)),
            "data.train_samples" => self.train_samples = parse_num(v)?,
            "data.test_samples" => self.test_samples = parse_num(v)?,
            "data.seed" => self.data_seed = parse_num(v)?,
            "data.augment" => self.augment = if v == "auto" { None } else { Some(parse_bool(v)?) },
            "data.mean" => self.mean = parse_triple(v)?,
            "data.std" => self.std = parse_triple(v)?,
            "paths.out" => self.out_dir = PathBuf::from(v),
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        let mut spec = BackboneSpec::new(self.backbone, self.stages, self.num_classes).with_channels(&self.channels);
        spec.input_size = self.input_size;
        spec
    }

    pub fn model_config(&self) -> R2dnsConfig {
        let mut cfg = R2dnsConfig::new(self.backbone_spec(), self.flows, self.anar_variant);
        cfg.interpolation_upsample = self.interpolation_upsample;
        cfg.eta = self.eta;
        cfg.mode = self.mode;
        cfg
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Milestone fractions resolved to epoch indices.
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base_lr: self.lr,
            milestones: self
                .milestones
                .iter()
                .map(|f| (f * self.epochs as f64).floor() as usize)
                .collect(),
            factor: self.lr_factor,
        }
    }

    pub fn augment_enabled(&self) -> bool {
        self.augment.unwrap_or(self.dataset == DatasetKind::Cifar10)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Invalid(msg));
        self.model_config().validate()?;
        self.backbone_spec().validate()?;
        if self.dataset == DatasetKind::Cifar10 {
            if self.num_classes != 10 {
                return bad(format!("cifar10 has 10 classes, config says {}", self.num_classes));
            }
            if self.data_dir.is_none() {
                return bad("cifar10 needs data.dir".into());
            }
        }
        if self.input_size != 32 {
            return bad(format!("both datasets are 32x32, backbone.input_size is {}", self.input_size));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("optim.lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("optim.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("optim.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("optim.milestones are fractions of the epoch budget in [0, 1]".into());
        }
        if self.milestones.windows(2).any(|w| w[0] > w[1]) {
            return bad("optim.milestones must be non-decreasing".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad(format!("optim.factor must lie in (0, 1], got {}", self.lr_factor));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs and batch sizes must be positive".into());
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return bad("sample counts must be positive".into());
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return bad("data.std entries must be positive".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let triple = |v: &[f32; 3]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("backbone.kind", self.backbone.to_string());
        kv("backbone.stages", self.stages.to_string());
        kv("backbone.channels", list(&self.channels));
        kv("backbone.num_classes", self.num_classes.to_string());
        kv("backbone.input_size", self.input_size.to_string());
        kv("anar.variant", self.anar_variant.layers().to_string());
        kv("anar.interpolation_upsample", self.interpolation_upsample.to_string());
        kv("model.flows", self.flows.to_string());
        kv("model.eta", self.eta.to_string());
        kv("model.mode", self.mode.to_string());
        kv("optim.lr", self.lr.to_string());
        kv("optim.momentum", self.momentum.to_string());
        kv("optim.weight_decay", self.weight_decay.to_string());
        kv(
            "optim.milestones",
            if self.milestones.is_empty() {
                "none".into()
            } else {
                self.milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",")
            },
        );
        kv("optim.factor", self.lr_factor.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.eval_batch_size", self.eval_batch_size.to_string());
        kv("train.max_steps", self.max_steps.to_string());
        kv("train.seed", self.seed.to_string());
        kv("data.dataset", self.dataset.to_string());
        if let Some(d) = &self.data_dir {
            kv("data.dir", d.display().to_string());
        }
        kv("data.train_samples", self.train_samples.to_string());
        kv("data.test_samples", self.test_samples.to_string());
        kv("data.seed", self.data_seed.to_string());
        kv(
            "data.augment",
            self.augment.map_or("auto".into(), |a| a.to_string()),
        );
        kv("data.mean", triple(&self.mean));
        kv("data.std", triple(&self.std));
        kv("paths.out", self.out_dir.display().to_string());
        s
    }
}

/// Keys whose canonical values differ between two configs.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let pa = parse_pairs(&a.to_text()).expect("canonical text parses");
    let pb = parse_pairs(&b.to_text()).expect("canonical text parses");
    KEYS.iter()
        .filter(|k| pa.get(**k).map(|v| &v.1) != pb.get(**k).map(|v| &v.1))
        .map(|k| k.to_string())
        .collect()
}

/// Fails unless every differing key is in `allowed`. Output paths and the
/// seed are exempt since paired runs always differ there.
pub fn assert_comparable(a: &RunConfig, b: &RunConfig, allowed: &[&str]) -> Result<()> {
    let offending: Vec<String> = config_diff(a, b)
        .into_iter()
        .filter(|k| !allowed.contains(&k.as_str()) && k != "paths.out" && k != "train.seed")
        .collect();
    if offending.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Invalid(format!(
            "configs differ outside the allowed keys: {}",
            offending.join(", ")
        )))
    }
}
