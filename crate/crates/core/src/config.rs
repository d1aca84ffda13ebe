//! Flat `key=value` run configuration. Lines starting with `#` and blank
//! lines are ignored; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attack::{AttackConfig, AttackTarget, LossRegion, MotionParams};
use crate::defense::{DefenseFlags, DefenseParams, MarginCenter};
use crate::error::{AcatError, Result};
use crate::eval::{period_label, ProviderKind, RunSettings, VideoSpec};
use crate::net::TrainConfig;

/// Parses `key=value` lines. Duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| AcatError::config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(AcatError::config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(AcatError::config(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

pub fn render_kv(kv: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    for (k, v) in kv {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| AcatError::config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(AcatError::config(format!("invalid boolean {v:?} for {key}"))),
    }
}

/// `inf`/`never` or a positive count.
pub fn parse_period(v: &str) -> Result<Option<usize>> {
    match v {
        "inf" | "never" => Ok(None),
        _ => {
            let p: usize = parse("period", v)?;
            if p == 0 {
                return Err(AcatError::config("period must be at least 1 or inf"));
            }
            Ok(Some(p))
        }
    }
}

fn parse_list<T>(key: &str, v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(AcatError::config(format!("{key} needs at least one entry")));
    }
    Ok(items)
}

/// Every tunable of a run, with defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory; `None` lets the caller pick one.
    pub out: Option<PathBuf>,
    pub dataset: PathBuf,
    pub weights: PathBuf,
    pub patch: PathBuf,
    pub require_gt: bool,
    pub provider: ProviderKind,
    // Defense.
    pub layer: usize,
    pub apply_layer: Option<usize>,
    pub tau: f64,
    pub gaussian_kernel: usize,
    pub dilation_kernel: usize,
    pub percentile_v: f64,
    pub margin_center: MarginCenter,
    pub flags: DefenseFlags,
    pub period: Option<usize>,
    pub lambda_m: Option<usize>,
    pub detector_margin: f64,
    pub detector_layer: usize,
    pub calibration_frames: usize,
    pub periods: Vec<Option<usize>>,
    pub layers: Vec<usize>,
    // Attack.
    pub beta: f64,
    pub steps: usize,
    pub step_size: f64,
    pub eot_samples: usize,
    pub patch_size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub target: AttackTarget,
    pub loss_region: LossRegion,
    pub attack_images: usize,
    // Video.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub scroll_speed: f64,
    pub amp_s: f64,
    pub motion_freq: f64,
    // Training.
    pub epochs: usize,
    pub lr: f64,
    pub class_count: usize,
    pub train_images: usize,
    pub image_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DefenseParams::default();
        let a = AttackConfig::default();
        Self {
            seed: 0,
            out: None,
            dataset: PathBuf::from("out/gen-video"),
            weights: PathBuf::from("out/train-toy/toy.weights"),
            patch: PathBuf::from("out/craft-patch/patch.ppm"),
            require_gt: false,
            provider: ProviderKind::Gt,
            layer: d.monitored_layer,
            apply_layer: None,
            tau: d.tau,
            gaussian_kernel: d.gaussian_kernel,
            dilation_kernel: d.dilation_kernel,
            percentile_v: d.percentile_v,
            margin_center: d.margin_center,
            flags: d.flags,
            period: d.update_period,
            lambda_m: None,
            detector_margin: 1.1,
            detector_layer: 3,
            calibration_frames: 8,
            periods: vec![Some(1), Some(5), Some(10), Some(30)],
            layers: vec![1, 2, 3],
            // Calibrated for the toy net; library defaults stay conservative.
            beta: 0.8,
            steps: a.steps,
            step_size: 0.02,
            eot_samples: a.eot_samples_per_step,
            patch_size: 24,
            scale_min: a.scale_range.0,
            scale_max: a.scale_range.1,
            target: a.target,
            loss_region: a.loss_region,
            attack_images: 8,
            frames: 60,
            height: 64,
            width: 128,
            scroll_speed: 0.5,
            amp_s: 0.3,
            motion_freq: 0.05,
            epochs: 20,
            lr: 0.1,
            class_count: 4,
            train_images: 48,
            image_size: 32,
        }
    }
}

/// Every accepted key, in rendering order.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "dataset",
    "weights",
    "patch",
    "require_gt",
    "provider",
    "layer",
    "apply_layer",
    "tau",
    "gaussian_kernel",
    "dilation_kernel",
    "percentile_v",
    "margin_center",
    "flags",
    "period",
    "lambda_m",
    "detector_margin",
    "detector_layer",
    "calibration_frames",
    "periods",
    "layers",
    "beta",
    "steps",
    "step_size",
    "eot_samples",
    "patch_size",
    "scale_min",
    "scale_max",
    "target",
    "loss_region",
    "attack_images",
    "frames",
    "height",
    "width",
    "scroll_speed",
    "amp_s",
    "motion_freq",
    "epochs",
    "lr",
    "class_count",
    "train_images",
    "image_size",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = if v == "auto" { None } else { Some(PathBuf::from(v)) },
            "dataset" => self.dataset = PathBuf::from(v),
            "weights" => self.weights = PathBuf::from(v),
            "patch" => self.patch = PathBuf::from(v),
            "require_gt" => self.require_gt = parse_bool(key, v)?,
            "provider" => self.provider = ProviderKind::parse(v)?,
            "layer" => self.layer = parse(key, v)?,
            "apply_layer" => {
                self.apply_layer = if v == "auto" { None } else { Some(parse(key, v)?) };
            }
            "tau" => self.tau = parse(key, v)?,
            "gaussian_kernel" => self.gaussian_kernel = parse(key, v)?,
            "dilation_kernel" => self.dilation_kernel = parse(key, v)?,
            "percentile_v" => self.percentile_v = parse(key, v)?,
            "margin_center" => self.margin_center = MarginCenter::parse(v)?,
            "flags" => self.flags = DefenseFlags::parse(v)?,
            "period" => self.period = parse_period(v)?,
            "lambda_m" => {
                self.lambda_m = if v == "auto" { None } else { Some(parse(key, v)?) };
            }
            "detector_margin" => self.detector_margin = parse(key, v)?,
            "detector_layer" => self.detector_layer = parse(key, v)?,
            "calibration_frames" => self.calibration_frames = parse(key, v)?,
            "periods" => self.periods = parse_list(key, v, parse_period)?,
            "layers" => self.layers = parse_list(key, v, |s| parse(key, s))?,
            "beta" => self.beta = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "step_size" => self.step_size = parse(key, v)?,
            "eot_samples" => self.eot_samples = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "scale_min" => self.scale_min = parse(key, v)?,
            "scale_max" => self.scale_max = parse(key, v)?,
            "target" => {
                self.target = if v == "untargeted" {
                    AttackTarget::Untargeted
                } else {
                    AttackTarget::Targeted(parse(key, v)?)
                };
            }
            "loss_region" => self.loss_region = LossRegion::parse(v)?,
            "attack_images" => self.attack_images = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "scroll_speed" => self.scroll_speed = parse(key, v)?,
            "amp_s" => self.amp_s = parse(key, v)?,
            "motion_freq" => self.motion_freq = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "class_count" => self.class_count = parse(key, v)?,
            "train_images" => self.train_images = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            _ => return Err(AcatError::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AcatError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_kv(&parse_kv(&text)?)?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &PathBuf| p.display().to_string();
        Some(match key {
            "seed" => self.seed.to_string(),
            "out" => self.out.as_ref().map_or_else(|| "auto".into(), path),
            "dataset" => path(&self.dataset),
            "weights" => path(&self.weights),
            "patch" => path(&self.patch),
            "require_gt" => self.require_gt.to_string(),
            "provider" => self.provider.as_str().to_string(),
            "layer" => self.layer.to_string(),
            "apply_layer" => self.apply_layer.map_or_else(|| "auto".into(), |v| v.to_string()),
            "tau" => self.tau.to_string(),
            "gaussian_kernel" => self.gaussian_kernel.to_string(),
            "dilation_kernel" => self.dilation_kernel.to_string(),
            "percentile_v" => self.percentile_v.to_string(),
            "margin_center" => self.margin_center.as_str().to_string(),
            "flags" => self.flags.label(),
            "period" => period_label(self.period),
            "lambda_m" => self.lambda_m.map_or_else(|| "auto".into(), |v| v.to_string()),
            "detector_margin" => self.detector_margin.to_string(),
            "detector_layer" => self.detector_layer.to_string(),
            "calibration_frames" => self.calibration_frames.to_string(),
            "periods" => self.periods.iter().map(|p| period_label(*p)).collect::<Vec<_>>().join(","),
            "layers" => self.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            "beta" => self.beta.to_string(),
            "steps" => self.steps.to_string(),
            "step_size" => self.step_size.to_string(),
            "eot_samples" => self.eot_samples.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "scale_min" => self.scale_min.to_string(),
            "scale_max" => self.scale_max.to_string(),
            "target" => match self.target {
                AttackTarget::Untargeted => "untargeted".into(),
                AttackTarget::Targeted(t) => t.to_string(),
            },
            "loss_region" => self.loss_region.as_str().to_string(),
            "attack_images" => self.attack_images.to_string(),
            "frames" => self.frames.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "scroll_speed" => self.scroll_speed.to_string(),
            "amp_s" => self.amp_s.to_string(),
            "motion_freq" => self.motion_freq.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "class_count" => self.class_count.to_string(),
            "train_images" => self.train_images.to_string(),
            "image_size" => self.image_size.to_string(),
            _ => return None,
        })
    }

    /// The fully resolved configuration as `key=value` text.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("every listed key renders"));
        }
        s
    }

    pub fn defense_params(&self) -> DefenseParams {
        DefenseParams {
            monitored_layer: self.layer,
            tau: self.tau,
            gaussian_kernel: self.gaussian_kernel,
            dilation_kernel: self.dilation_kernel,
            percentile_v: self.percentile_v,
            margin_center: self.margin_center,
            apply_layer: self.apply_layer.unwrap_or(self.layer),
            flags: self.flags,
            update_period: self.period,
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            params: self.defense_params(),
            lambda_m: self.lambda_m,
            calibration_frames: self.calibration_frames,
            detector_margin: self.detector_margin,
            detector_layer: self.detector_layer,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            beta: self.beta,
            steps: self.steps,
            step_size: self.step_size,
            monitored_layers: vec![self.layer],
            target: self.target,
            eot_samples_per_step: self.eot_samples,
            patch_height: self.patch_size,
            patch_width: self.patch_size,
            scale_range: (self.scale_min, self.scale_max),
            loss_region: self.loss_region,
        }
    }

    pub fn video_spec(&self) -> VideoSpec {
        let mut spec = VideoSpec::new(self.seed, self.frames, self.height, self.width);
        spec.scene.scroll_speed = self.scroll_speed;
        spec.scene.class_count = self.class_count;
        spec.motion = MotionParams {
            amp_s: self.amp_s,
            freq_x: self.motion_freq,
            freq_y: self.motion_freq,
            freq_s: self.motion_freq,
            ..spec.motion
        };
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            class_count: self.class_count,
            image_size: self.image_size,
            train_images: self.train_images,
            ..TrainConfig::new(self.seed, self.epochs, self.lr)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("period", "inf").unwrap();
        cfg.set("flags", "att+,nf").unwrap();
        cfg.set("lambda_m", "7").unwrap();
        cfg.set("target", "2").unwrap();
        cfg.set("periods", "1,inf").unwrap();
        let mut back = RunConfig::default();
        back.apply_kv(&parse_kv(&cfg.render()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_renders() {
        let cfg = RunConfig::default();
        for k in KEYS {
            assert!(cfg.get(k).is_some(), "{k}");
        }
        assert_eq!(cfg.render().lines().count(), KEYS.len());
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("bogus", "1"), Err(AcatError::Config(_))));
        assert!(cfg.set("tau", "two").is_err());
        assert!(cfg.set("period", "0").is_err());
        assert!(cfg.set("require_gt", "maybe").is_err());
        assert!(cfg.set("layers", "").is_err());
        assert!(parse_kv("a=1\na=2").is_err());
        assert!(parse_kv("novalue").is_err());
        assert_eq!(parse_kv("# c\n\n x = 3 \n").unwrap()["x"], "3");
    }
}
