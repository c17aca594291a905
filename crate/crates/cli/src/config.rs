//! `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use milseg::aggregation::Aggregator;
use milseg::densepriors::DenseMode;
use milseg::inference::{InferenceConfig, PriorSelection};
use milseg::optim::OptimizerConfig;
use milseg::segnet::{ConvSpec, NetworkSpec, StemStage};
use milseg::synthgen::JitterSpec;
use milseg::training::TrainingConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub data_seed: u64,
    pub foreground_classes: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,

    pub stem_channels: Vec<usize>,
    pub stem_kernels: Vec<usize>,
    /// 0 means no pooling after that stage.
    pub stem_pools: Vec<usize>,
    /// Hidden head widths; the last head layer always emits one plane per class.
    pub head_channels: Vec<usize>,
    pub head_kernels: Vec<usize>,
    pub frozen_layers: Vec<usize>,
    pub dropout: f64,
    pub init_gain: f64,

    pub aggregator: String,
    pub lse_r: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_interval: u64,
    pub batch_size: usize,
    pub epochs: usize,
    /// 0 means no step cap.
    pub max_steps: u64,
    pub jitter: bool,
    pub flip_probability: f64,
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub brightness: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    /// 0 means whole images.
    pub crop: usize,

    pub prior: PriorSelection,
    pub felzenszwalb_k: f64,
    pub felzenszwalb_min_size: usize,
    pub dense_mode: String,
    pub thresholds: Vec<f64>,
    pub threshold_grid: Vec<f64>,
    pub naive_proposals: usize,

    pub seed: u64,
    pub gradcheck_instances: usize,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub metrics: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let jitter = JitterSpec::default();
        let opt = OptimizerConfig::default();
        RunConfig {
            dataset: PathBuf::from("data"),
            data_seed: 0,
            foreground_classes: 3,
            image_size: 64,
            train_per_class: 500,
            val_per_class: 50,
            stem_channels: vec![16, 32, 32],
            stem_kernels: vec![3, 3, 3],
            stem_pools: vec![2, 2, 0],
            head_channels: vec![32, 32, 32],
            head_kernels: vec![3, 3, 3, 1],
            frozen_layers: vec![],
            dropout: 0.5,
            init_gain: 1.0,
            aggregator: "lse".into(),
            lse_r: 5.0,
            learning_rate: opt.learning_rate,
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
            lr_decay_factor: opt.decay_factor,
            lr_decay_interval: opt.decay_interval,
            batch_size: 16,
            epochs: 10,
            max_steps: 0,
            jitter: true,
            flip_probability: jitter.flip_probability,
            max_rotation_deg: jitter.max_rotation_deg,
            scale_min: jitter.scale_min,
            scale_max: jitter.scale_max,
            brightness: jitter.brightness,
            contrast_min: jitter.contrast_min,
            contrast_max: jitter.contrast_max,
            crop: 0,
            prior: PriorSelection::IlpSppxl,
            felzenszwalb_k: 200.0,
            felzenszwalb_min_size: 20,
            dense_mode: "shift-and-stitch".into(),
            thresholds: vec![],
            threshold_grid: (0..10).map(|i| i as f64 / 10.0).collect(),
            naive_proposals: 200,
            seed: 0,
            gradcheck_instances: 100,
            checkpoint: PathBuf::from("model.ckpt"),
            loss_log: PathBuf::from("loss.csv"),
            metrics: PathBuf::from("metrics.json"),
        }
    }
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad list element {s:?}")))
        .collect()
}

fn scalar<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

macro_rules! fields {
    ($( $key:literal => $field:ident : $kind:ident ),* $(,)?) => {
        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $($key => self.$field = fields!(@parse $kind, value)?,)*
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            }

            /// Canonical text form: every key, in a fixed order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{} = {}", $key, fields!(@show $kind, self.$field)).unwrap();)*
                out
            }
        }
    };
    (@parse list, $v:expr) => { list($v) };
    (@parse path, $v:expr) => { Ok::<_, String>(PathBuf::from($v)) };
    (@parse string, $v:expr) => { Ok::<_, String>($v.to_string()) };
    (@parse value, $v:expr) => { scalar($v) };
    (@show list, $e:expr) => { join(&$e) };
    (@show path, $e:expr) => { $e.display() };
    (@show string, $e:expr) => { &$e };
    (@show value, $e:expr) => { $e };
}

fields! {
    "dataset" => dataset: path,
    "data_seed" => data_seed: value,
    "foreground_classes" => foreground_classes: value,
    "image_size" => image_size: value,
    "train_per_class" => train_per_class: value,
    "val_per_class" => val_per_class: value,
    "stem_channels" => stem_channels: list,
    "stem_kernels" => stem_kernels: list,
    "stem_pools" => stem_pools: list,
    "head_channels" => head_channels: list,
    "head_kernels" => head_kernels: list,
    "frozen_layers" => frozen_layers: list,
    "dropout" => dropout: value,
    "init_gain" => init_gain: value,
    "aggregator" => aggregator: string,
    "lse_r" => lse_r: value,
    "learning_rate" => learning_rate: value,
    "momentum" => momentum: value,
    "weight_decay" => weight_decay: value,
    "lr_decay_factor" => lr_decay_factor: value,
    "lr_decay_interval" => lr_decay_interval: value,
    "batch_size" => batch_size: value,
    "epochs" => epochs: value,
    "max_steps" => max_steps: value,
    "jitter" => jitter: value,
    "flip_probability" => flip_probability: value,
    "max_rotation_deg" => max_rotation_deg: value,
    "scale_min" => scale_min: value,
    "scale_max" => scale_max: value,
    "brightness" => brightness: value,
    "contrast_min" => contrast_min: value,
    "contrast_max" => contrast_max: value,
    "crop" => crop: value,
    "prior" => prior: value,
    "felzenszwalb_k" => felzenszwalb_k: value,
    "felzenszwalb_min_size" => felzenszwalb_min_size: value,
    "dense_mode" => dense_mode: string,
    "thresholds" => thresholds: list,
    "threshold_grid" => threshold_grid: list,
    "naive_proposals" => naive_proposals: value,
    "seed" => seed: value,
    "gradcheck_instances" => gradcheck_instances: value,
    "checkpoint" => checkpoint: path,
    "loss_log" => loss_log: path,
    "metrics" => metrics: path,
}

impl RunConfig {
    /// Starts from the defaults and applies every `key = value` line.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|m| CliError::Usage(format!("config line {}: {m}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.network_spec()?.validate()?;
        self.training_config()?.validate()?;
        self.inference_config()?;
        if let Some(bad) = self.frozen_layers.iter().find(|&&l| l >= self.stem_channels.len() + self.head_kernels.len()) {
            return Err(CliError::Usage(format!("frozen layer {bad} does not exist")));
        }
        if self.threshold_grid.is_empty() {
            return Err(CliError::Usage("threshold_grid is empty".into()));
        }
        self.threshold_set()?;
        Ok(())
    }

    pub fn aggregator(&self) -> Result<Aggregator, CliError> {
        match self.aggregator.as_str() {
            "sum" => Ok(Aggregator::Sum),
            "max" => Ok(Aggregator::Max),
            "lse" => Ok(Aggregator::lse(self.lse_r)?),
            other => Err(CliError::Usage(format!("unknown aggregator {other:?} (sum, max, lse)"))),
        }
    }

    pub fn network_spec(&self) -> Result<NetworkSpec, CliError> {
        let n = self.stem_channels.len();
        if self.stem_kernels.len() != n || self.stem_pools.len() != n {
            return Err(CliError::Usage("stem_channels, stem_kernels and stem_pools differ in length".into()));
        }
        if self.head_kernels.len() != self.head_channels.len() + 1 {
            return Err(CliError::Usage("head_kernels needs one more entry than head_channels".into()));
        }
        let frozen = |i: usize| self.frozen_layers.contains(&i);
        let mut c = 3;
        let mut stem = Vec::new();
        for (i, ((&out, &k), &pool)) in self.stem_channels.iter().zip(&self.stem_kernels).zip(&self.stem_pools).enumerate() {
            let mut conv = ConvSpec::new(c, out, k);
            conv.frozen = frozen(i);
            stem.push(StemStage { conv, pool: (pool > 0).then_some(pool) });
            c = out;
        }
        let widths = self.head_channels.iter().copied().chain([self.foreground_classes + 1]);
        let mut head = Vec::new();
        for (j, (out, &k)) in widths.zip(&self.head_kernels).enumerate() {
            let mut conv = ConvSpec::new(c, out, k);
            conv.frozen = frozen(n + j);
            head.push(conv);
            c = out;
        }
        Ok(NetworkSpec {
            foreground_classes: self.foreground_classes,
            stem,
            head,
            dropout_rate: self.dropout,
            seed: self.seed,
        })
    }

    pub fn training_config(&self) -> Result<TrainingConfig, CliError> {
        Ok(TrainingConfig {
            aggregator: self.aggregator()?,
            optimizer: OptimizerConfig {
                learning_rate: self.learning_rate,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                decay_factor: self.lr_decay_factor,
                decay_interval: self.lr_decay_interval,
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            jitter: self.jitter.then(|| JitterSpec {
                flip_probability: self.flip_probability,
                max_rotation_deg: self.max_rotation_deg,
                scale_min: self.scale_min,
                scale_max: self.scale_max,
                brightness: self.brightness,
                contrast_min: self.contrast_min,
                contrast_max: self.contrast_max,
            }),
            crop: (self.crop > 0).then_some(self.crop),
            seed: self.seed,
        })
    }

    pub fn inference_config(&self) -> Result<InferenceConfig, CliError> {
        let dense_mode = match self.dense_mode.as_str() {
            "shift-and-stitch" => DenseMode::ShiftAndStitch,
            "upsample" => DenseMode::Upsample,
            other => return Err(CliError::Usage(format!("unknown dense_mode {other:?} (shift-and-stitch, upsample)"))),
        };
        if !(self.felzenszwalb_k > 0.0) || self.felzenszwalb_min_size == 0 {
            return Err(CliError::Usage("felzenszwalb_k and felzenszwalb_min_size must be positive".into()));
        }
        Ok(InferenceConfig {
            prior: self.prior,
            lse_r: self.lse_r,
            felzenszwalb_k: self.felzenszwalb_k,
            felzenszwalb_min_size: self.felzenszwalb_min_size,
            dense_mode,
        })
    }

    /// Thresholds from the config: empty means 0.5 for every class, a single
    /// value applies to every class.
    pub fn threshold_set(&self) -> Result<milseg::densepriors::ThresholdSet, CliError> {
        let n = self.foreground_classes;
        let values = match self.thresholds.len() {
            0 => vec![0.5; n],
            1 => vec![self.thresholds[0]; n],
            len if len == n => self.thresholds.clone(),
            len => return Err(CliError::Usage(format!("{len} thresholds for {n} foreground classes"))),
        };
        Ok(milseg::densepriors::ThresholdSet::new(values)?)
    }
}
