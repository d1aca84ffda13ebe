//! Metrics, attacked-video datasets and the experiment runners.

pub mod report;
pub mod scene;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::acat::{
    default_lambda_m, run_stream, AcatState, BaselineDetector, FrameMode, FrameOutcome, GtProvider,
    StartingMaskProvider, StreamReport,
};
use crate::attack::{paste_patch, patch_trajectory, AdversarialPatch, MotionParams};
use crate::config::{parse_kv, render_kv};
use crate::defense::{CalibrationRecord, DefenseFlags, DefenseParams};
use crate::error::{AcatError, Result};
use crate::net::SlicedNetwork;
use crate::pnm;
use crate::tensor::{ActivationTensor, BinaryMask, LabelMap};
use scene::{Scene, SceneConfig};

/// IoU of the adversarial regions (zeros) of two defense-convention masks;
/// 1.0 when both are empty.
pub fn mask_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(AcatError::config(format!(
            "mask dims {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (pa, ga) = (p == 0, g == 0);
        inter += usize::from(pa && ga);
        union += usize::from(pa || ga);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean per-class IoU over the classes present in either map.
pub fn miou(pred: &LabelMap, gt: &LabelMap, class_count: usize) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(AcatError::config("label maps differ in size"));
    }
    let mut inter = vec![0usize; class_count];
    let mut union = vec![0usize; class_count];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (usize::from(p), usize::from(g));
        if p >= class_count || g >= class_count {
            return Err(AcatError::Data(format!(
                "label {} out of range for {class_count} classes",
                p.max(g)
            )));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let ious: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    Ok(if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    })
}

/// First frames of `count` independent scenes, seeded from `seed`.
pub fn scene_images(seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<(ActivationTensor, LabelMap)>> {
    (0..count)
        .map(|i| Ok(Scene::generate(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64), cfg)?.render(0)))
        .collect()
}

/// Everything needed to regenerate an attacked video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub scene: SceneConfig,
    pub motion: MotionParams,
}

impl VideoSpec {
    /// Scene seeded from `seed`, motion with default amplitudes for the frame
    /// size and phases drawn from `seed`.
    pub fn new(seed: u64, num_frames: usize, height: usize, width: usize) -> Self {
        Self {
            seed,
            num_frames,
            scene: SceneConfig::new(height, width),
            motion: MotionParams::scaled_defaults(height, width).with_random_phases(seed ^ 0x0e6a_0001),
        }
    }

    fn scene_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x5ce7e
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("num_frames", self.num_frames.to_string());
        put("height", self.scene.height.to_string());
        put("width", self.scene.width.to_string());
        put("class_count", self.scene.class_count.to_string());
        put("scroll_speed", self.scene.scroll_speed.to_string());
        put("shape_density", self.scene.shape_density.to_string());
        put("noise", self.scene.noise.to_string());
        let mo = &self.motion;
        for (k, v) in [
            ("amp_x", mo.amp_x),
            ("amp_y", mo.amp_y),
            ("amp_s", mo.amp_s),
            ("freq_x", mo.freq_x),
            ("freq_y", mo.freq_y),
            ("freq_s", mo.freq_s),
            ("phase_x", mo.phase_x),
            ("phase_y", mo.phase_y),
            ("phase_s", mo.phase_s),
            ("center_x", mo.center_x),
            ("center_y", mo.center_y),
        ] {
            put(k, v.to_string());
        }
        m
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, k: &str) -> Result<T> {
            let v = kv
                .get(k)
                .ok_or_else(|| AcatError::Data(format!("manifest is missing {k}")))?;
            v.parse()
                .map_err(|_| AcatError::Data(format!("manifest value {k}={v} is invalid")))
        }
        let mut scene = SceneConfig::new(get(kv, "height")?, get(kv, "width")?);
        scene.class_count = get(kv, "class_count")?;
        scene.scroll_speed = get(kv, "scroll_speed")?;
        scene.shape_density = get(kv, "shape_density")?;
        scene.noise = get(kv, "noise")?;
        Ok(Self {
            seed: get(kv, "seed")?,
            num_frames: get(kv, "num_frames")?,
            scene,
            motion: MotionParams {
                amp_x: get(kv, "amp_x")?,
                amp_y: get(kv, "amp_y")?,
                amp_s: get(kv, "amp_s")?,
                freq_x: get(kv, "freq_x")?,
                freq_y: get(kv, "freq_y")?,
                freq_s: get(kv, "freq_s")?,
                phase_x: get(kv, "phase_x")?,
                phase_y: get(kv, "phase_y")?,
                phase_s: get(kv, "phase_s")?,
                center_x: get(kv, "center_x")?,
                center_y: get(kv, "center_y")?,
            },
        })
    }

    /// Clean frames of the same scene, 8-bit quantised.
    pub fn clean_frames(&self, indices: impl IntoIterator<Item = usize>) -> Result<Vec<ActivationTensor>> {
        let scene = Scene::generate(self.scene_seed(), &self.scene)?;
        Ok(indices
            .into_iter()
            .map(|k| pnm::quantize_tensor(&scene.render(k).0))
            .collect())
    }
}

/// An attacked video with per-frame ground truth. Frames are held 8-bit
/// quantised so in-memory and on-disk copies agree exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoDataset {
    pub spec: VideoSpec,
    pub frames: Vec<ActivationTensor>,
    /// Defense convention: 0 where the patch is.
    pub gt_masks: Option<Vec<BinaryMask>>,
    pub labels: Vec<LabelMap>,
}

impl VideoDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn require_gt(&self) -> Result<&[BinaryMask]> {
        self.gt_masks
            .as_deref()
            .ok_or_else(|| AcatError::Data("dataset has no ground-truth masks".into()))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.spec.scene.height, self.spec.scene.width)
    }
}

/// Renders the attacked video in memory.
pub fn render_video(spec: &VideoSpec, patch: &AdversarialPatch) -> Result<VideoDataset> {
    if spec.num_frames == 0 {
        return Err(AcatError::config("a video needs at least one frame"));
    }
    spec.motion.validate()?;
    let scene = Scene::generate(spec.scene_seed(), &spec.scene)?;
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut masks = Vec::with_capacity(spec.num_frames);
    let mut labels = Vec::with_capacity(spec.num_frames);
    for k in 0..spec.num_frames {
        let (img, lab) = scene.render(k);
        let (attacked, covered) = paste_patch(&img, patch, &patch_trajectory(&spec.motion, k))
            .map_err(|e| AcatError::Frame {
                index: k,
                source: Box::new(e),
            })?;
        frames.push(pnm::quantize_tensor(&attacked));
        masks.push(covered.complement());
        labels.push(lab);
    }
    Ok(VideoDataset {
        spec: spec.clone(),
        frames,
        gt_masks: Some(masks),
        labels,
    })
}

fn numbered(dir: &Path, sub: &str, k: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{k:06}.{ext}"))
}

/// Renders the video and writes `frames/`, `masks/`, `labels/`, the patch
/// and `manifest.txt` under `out_dir`.
pub fn gen_video_dataset(spec: &VideoSpec, patch: &AdversarialPatch, out_dir: &Path) -> Result<VideoDataset> {
    let ds = render_video(spec, patch)?;
    write_dataset(&ds, patch, out_dir)?;
    Ok(ds)
}

pub fn write_dataset(ds: &VideoDataset, patch: &AdversarialPatch, out_dir: &Path) -> Result<()> {
    for sub in ["frames", "masks", "labels"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    for (k, frame) in ds.frames.iter().enumerate() {
        pnm::write_ppm(&numbered(out_dir, "frames", k, "ppm"), frame)?;
        pnm::write_labels_pgm(&numbered(out_dir, "labels", k, "pgm"), &ds.labels[k])?;
        if let Some(masks) = &ds.gt_masks {
            pnm::write_mask_pgm(&numbered(out_dir, "masks", k, "pgm"), &masks[k])?;
        }
    }
    patch.save_ppm(&out_dir.join("patch.ppm"))?;
    let mut kv = ds.spec.to_kv();
    kv.insert("patch".into(), "patch.ppm".into());
    kv.insert("patch_height".into(), patch.height().to_string());
    kv.insert("patch_width".into(), patch.width().to_string());
    kv.insert("version".into(), crate::VERSION.into());
    fs::write(out_dir.join("manifest.txt"), render_kv(&kv))?;
    Ok(())
}

/// Reads a dataset written by [`gen_video_dataset`]. Masks are optional
/// unless `require_gt` is set.
pub fn load_dataset(dir: &Path, require_gt: bool) -> Result<VideoDataset> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| AcatError::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let kv = parse_kv(&text)?;
    let spec = VideoSpec::from_kv(&kv)?;
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut labels = Vec::with_capacity(spec.num_frames);
    let mut masks = Vec::with_capacity(spec.num_frames);
    let mut masks_complete = true;
    for k in 0..spec.num_frames {
        let fp = numbered(dir, "frames", k, "ppm");
        if !fp.exists() {
            return Err(AcatError::Data(format!("missing frame {}", fp.display())));
        }
        frames.push(pnm::read_ppm(&fp)?);
        labels.push(pnm::read_labels_pgm(&numbered(dir, "labels", k, "pgm"))?);
        let mp = numbered(dir, "masks", k, "pgm");
        if mp.exists() {
            masks.push(pnm::read_mask_pgm(&mp)?);
        } else {
            masks_complete = false;
        }
    }
    if require_gt && !masks_complete {
        return Err(AcatError::Data(format!(
            "ground-truth masks missing under {}",
            dir.join("masks").display()
        )));
    }
    Ok(VideoDataset {
        spec,
        frames,
        gt_masks: masks_complete.then_some(masks),
        labels,
    })
}

/// Which component seeds the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProviderKind {
    Gt,
    Detector,
}

impl ProviderKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(Self::Gt),
            "detector" => Ok(Self::Detector),
            other => Err(AcatError::config(format!("unknown provider {other:?} (gt or detector)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Gt => "gt",
            Self::Detector => "detector",
        }
    }
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AblationConfig {
    pub flags: DefenseFlags,
    pub provider: ProviderKind,
}

/// The rows of the component ablation: nothing, noise filtering only, each
/// attention term alone, both attention terms, and everything.
pub fn standard_ablation_grid(provider: ProviderKind) -> Vec<AblationConfig> {
    let f = |att_plus, att_minus, upd, nf| DefenseFlags {
        att_plus,
        att_minus,
        upd,
        nf,
    };
    [
        f(false, false, false, false),
        f(false, false, false, true),
        f(true, false, false, false),
        f(true, false, true, true),
        f(false, true, true, true),
        f(true, true, false, true),
        f(true, true, true, true),
    ]
    .into_iter()
    .map(|flags| AblationConfig { flags, provider })
    .collect()
}

/// Shared settings of an experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub params: DefenseParams,
    /// `None` uses 1% of the monitored layer's spatial elements.
    pub lambda_m: Option<usize>,
    /// Clean frames used to calibrate the detector provider.
    pub calibration_frames: usize,
    pub detector_margin: f64,
    pub detector_layer: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            params: DefenseParams::default(),
            lambda_m: None,
            calibration_frames: 8,
            detector_margin: CalibrationRecord::DEFAULT_MARGIN,
            detector_layer: CalibrationRecord::DEFAULT_DEEP_LAYER,
        }
    }
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub config: String,
    pub provider: ProviderKind,
    pub layer: usize,
    pub period: Option<usize>,
    pub mean_mask_iou: f64,
    pub frames: usize,
    pub total_passes: f64,
    pub detections: usize,
    pub resets: usize,
}

pub const RESULTS_CSV_HEADER: &str = "config,provider,layer,period,mean_mask_iou,frames,total_passes,detections,resets";

pub fn period_label(p: Option<usize>) -> String {
    p.map_or_else(|| "inf".to_string(), |v| v.to_string())
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(RESULTS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{},{:.3},{},{}",
            r.config,
            r.provider.as_str(),
            r.layer,
            period_label(r.period),
            r.mean_mask_iou,
            r.frames,
            r.total_passes,
            r.detections,
            r.resets
        );
    }
    s
}

/// Kernel size scaled down by a resolution factor, kept odd and ≥ 1.
pub fn scaled_kernel(k: usize, factor: f64) -> usize {
    let v = ((k as f64 / factor).round() as usize).max(1);
    if v % 2 == 0 {
        v - 1
    } else {
        v
    }
}

/// Defaults for monitoring layer `l`: kernels shrink with the layer's
/// resolution relative to the first layer.
pub fn params_for_layer(base: &DefenseParams, net: &SlicedNetwork, dims: (usize, usize), l: usize) -> Result<DefenseParams> {
    let all = net.check_frame_dims(dims.0, dims.1)?;
    let (_, h1, _) = all[1];
    let (_, hl, _) = *all
        .get(l)
        .ok_or_else(|| AcatError::config(format!("layer {l} out of range")))?;
    let factor = h1 as f64 / hl as f64;
    Ok(DefenseParams {
        monitored_layer: l,
        apply_layer: l,
        gaussian_kernel: scaled_kernel(base.gaussian_kernel, factor),
        dilation_kernel: scaled_kernel(base.dilation_kernel, factor),
        ..base.clone()
    })
}

fn make_provider(
    kind: ProviderKind,
    ds: &VideoDataset,
    net: &SlicedNetwork,
    settings: &RunSettings,
) -> Result<Box<dyn StartingMaskProvider>> {
    Ok(match kind {
        // The ideal mask is known only where the attack first appears; a
        // stream that loses the patch afterwards is not re-seeded.
        ProviderKind::Gt => {
            let gt = ds.require_gt()?;
            let first = gt.iter().position(|m| m.count_zeros() > 0);
            Box::new(GtProvider::only_at(gt.to_vec(), first))
        }
        ProviderKind::Detector => {
            let frames = ds.spec.clean_frames(0..settings.calibration_frames.max(1))?;
            let calib = CalibrationRecord::calibrate(net, &frames, settings.detector_layer, settings.detector_margin)?;
            Box::new(BaselineDetector { calib })
        }
    })
}

/// Runs one defended stream over the dataset with the given parameters.
pub fn run_cell(
    ds: &VideoDataset,
    net: &SlicedNetwork,
    params: &DefenseParams,
    provider: ProviderKind,
    settings: &RunSettings,
) -> Result<StreamReport> {
    let (h, w) = ds.dims();
    let lambda_m = match settings.lambda_m {
        Some(v) => v,
        None => default_lambda_m(net, h, w, params.monitored_layer)?,
    };
    let mut state = AcatState::new(params.clone(), lambda_m);
    let mut detector = make_provider(provider, ds, net, settings)?;
    run_stream(&mut state, net, &ds.frames, detector.as_mut(), ds.gt_masks.as_deref())
}

fn row_from(report: &StreamReport, config: String, provider: ProviderKind, params: &DefenseParams) -> ResultRow {
    let all: Vec<f64> = report.events.iter().filter_map(|e| e.mask_iou).collect();
    let mean_mask_iou = report.mean_mask_iou_after_detection().unwrap_or_else(|| {
        if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        }
    });
    ResultRow {
        config,
        provider,
        layer: params.monitored_layer,
        period: params.update_period,
        mean_mask_iou,
        frames: report.events.len(),
        total_passes: report.total_passes,
        detections: report.count_mode(FrameMode::Detected),
        resets: report.count_mode(FrameMode::Reset),
    }
}

/// One stream per grid cell; mean Mask-IoU from the first detection on.
pub fn run_ablation(
    ds: &VideoDataset,
    net: &SlicedNetwork,
    grid: &[AblationConfig],
    settings: &RunSettings,
) -> Result<Vec<ResultRow>> {
    ds.require_gt()?;
    grid.iter()
        .map(|cell| {
            let params = DefenseParams {
                flags: cell.flags,
                ..settings.params.clone()
            };
            let rep = run_cell(ds, net, &params, cell.provider, settings)?;
            Ok(row_from(&rep, cell.flags.csv_label(), cell.provider, &params))
        })
        .collect()
}

/// Mean Mask-IoU for each update period (`None` = never update).
pub fn run_period_sweep(
    ds: &VideoDataset,
    net: &SlicedNetwork,
    periods: &[Option<usize>],
    provider: ProviderKind,
    settings: &RunSettings,
) -> Result<Vec<ResultRow>> {
    ds.require_gt()?;
    periods
        .iter()
        .map(|&p| {
            let params = DefenseParams {
                update_period: p,
                ..settings.params.clone()
            };
            let rep = run_cell(ds, net, &params, provider, settings)?;
            Ok(row_from(&rep, format!("P={}", period_label(p)), provider, &params))
        })
        .collect()
}

/// Mean Mask-IoU for each monitored layer, evaluated at that layer's
/// resolution.
pub fn run_layer_sweep(
    ds: &VideoDataset,
    net: &SlicedNetwork,
    layers: &[usize],
    provider: ProviderKind,
    settings: &RunSettings,
) -> Result<Vec<ResultRow>> {
    ds.require_gt()?;
    layers
        .iter()
        .map(|&l| {
            let params = params_for_layer(&settings.params, net, ds.dims(), l)?;
            let rep = run_cell(ds, net, &params, provider, settings)?;
            Ok(row_from(&rep, format!("l={l}"), provider, &params))
        })
        .collect()
}

/// Pass totals of a stream against a baseline that spends two passes on
/// every frame where an attack is handled and one elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassSummary {
    pub total: f64,
    pub baseline: f64,
    /// `total / baseline`; 1.0 for an empty stream.
    pub ratio: f64,
}

pub fn count_passes(outcomes: &[FrameOutcome]) -> PassSummary {
    let total: f64 = outcomes.iter().map(|o| o.forward_pass_units).sum();
    let baseline: f64 = outcomes
        .iter()
        .map(|o| match o.mode {
            FrameMode::Detected | FrameMode::Traced => 2.0,
            FrameMode::Clean | FrameMode::Reset => 1.0,
        })
        .sum();
    PassSummary {
        total,
        baseline,
        ratio: if baseline == 0.0 { 1.0 } else { total / baseline },
    }
}
