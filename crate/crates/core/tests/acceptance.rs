//! End-to-end acceptance checks. Each criterion prints one line of the form
//! `criterion NN [name]: PASS|FAIL (details)`. The binary has its own `main`
//! so the lines show without `--nocapture`; it exits non-zero if any fail.

mod common;

use std::path::Path;
use std::process::Command;
use std::panic;
use std::process::ExitCode;
use std::sync::{Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use acat_core::acat::{default_lambda_m, run_stream, run_two_pass_baseline, AcatState, FrameMode, GtProvider};
use acat_core::attack::{
    frame_losses, optimize_patch, paste_patch, sample_transform, AdversarialPatch, AttackConfig, AttackTarget,
    LossRegion, Placement,
};
use acat_core::config::RunConfig;
use acat_core::defense::{update_trace, DefenseFlags, DefenseParams};
use acat_core::eval::scene::{Scene, SceneConfig};
use acat_core::eval::{
    count_passes, render_video, run_ablation, run_layer_sweep, run_period_sweep, scene_images, standard_ablation_grid,
    ProviderKind, ResultRow, VideoDataset,
};
use acat_core::net::{argmax_labels, softmax_cross_entropy, train_toy_model, LossTarget, SlicedNetwork};
use acat_core::tensor::{ActivationTensor, BinaryMask, LabelMap};

const SEED: u64 = 7;

/// Trained toy net, patch and attacked video shared by the video criteria.
/// Built with the CLI defaults so the numbers match `acat` runs.
struct Fixture {
    cfg: RunConfig,
    net: SlicedNetwork,
    patch: AdversarialPatch,
    video: VideoDataset,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let cfg = RunConfig {
            seed: SEED,
            ..RunConfig::default()
        };
        let net = train_toy_model(&cfg.train_config()).expect("training").net;
        let scene = SceneConfig {
            class_count: net.class_count(),
            ..SceneConfig::new(cfg.height, cfg.width)
        };
        let images = scene_images(cfg.seed, cfg.attack_images, &scene).expect("scenes");
        let patch = optimize_patch(&net, &images, &cfg.attack_config(), cfg.seed).expect("patch");
        let video = render_video(&cfg.video_spec(), &patch).expect("video");
        Fixture {
            cfg,
            net,
            patch,
            video,
        }
    })
}

static REPORTED: Mutex<Vec<u32>> = Mutex::new(Vec::new());

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    REPORTED.lock().unwrap().push(n);
    println!(
        "criterion {n:>2} [{name}]: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} [{name}] failed: {detail}");
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed < Duration::from_secs(budget_s)
}

fn row<'a>(rows: &'a [ResultRow], config: &str) -> &'a ResultRow {
    rows.iter()
        .find(|r| r.config == config)
        .unwrap_or_else(|| panic!("no row {config}"))
}

fn c01_primitive_oracles() {
    let start = Instant::now();
    let reports = common::run_oracles(0xACA7, 100, 1e-9);
    let elapsed = start.elapsed();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.failures.is_empty())
        .map(|r| format!("{}: {}", r.name, r.failures.join("; ")))
        .collect();
    let all_ran = reports.iter().all(|r| r.instances == 100);
    let pass = failed.is_empty() && all_ran && within(elapsed, 5);
    let detail = if failed.is_empty() {
        format!("{} operations x 100 instances, {:.2}s", reports.len(), elapsed.as_secs_f64())
    } else {
        failed.join(" | ")
    };
    verdict(1, "primitive oracles", pass, &detail);
}

fn c02_gradient_correctness() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for seed in 0..10 {
        for (kind, check) in common::layer_gradient_checks(seed, 1e-4) {
            let e = check.input_err.max(check.param_err);
            if e > worst {
                worst = e;
                worst_at = format!("{kind}, seed {seed}");
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && within(elapsed, 30);
    verdict(
        2,
        "gradient correctness",
        pass,
        &format!(
            "worst relative error {worst:.2e} at {worst_at}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn c03_slicing_identity() {
    let start = Instant::now();
    let mut rng = common::rng(3);
    let mut held = 0;
    for k in 0..20 {
        let net = SlicedNetwork::toy(4, k);
        let x = common::random_activation(&mut rng, 3, 16, 24);
        if common::slicing_identity_holds(&net, &x) {
            held += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        "slicing identity",
        held == 20 && within(elapsed, 5),
        &format!("{held}/20 inputs bitwise equal at every split, {:.2}s", elapsed.as_secs_f64()),
    );
}

/// Pixel accuracy over the pixels the patch does not cover.
fn uncovered_accuracy(net: &SlicedNetwork, frame: &ActivationTensor, labels: &LabelMap, covered: &BinaryMask) -> f64 {
    let pred = argmax_labels(&net.forward(frame).unwrap());
    let (mut hit, mut total) = (0usize, 0usize);
    for (k, (&p, &t)) in pred.data.iter().zip(&labels.data).enumerate() {
        if covered.data()[k] == 0 {
            total += 1;
            hit += usize::from(p == t);
        }
    }
    hit as f64 / total as f64
}

fn c04_attack_efficacy() {
    let fx = fixture();
    let start = Instant::now();
    let net = fx.net.clone();
    let scene = SceneConfig {
        class_count: net.class_count(),
        ..SceneConfig::new(64, 64)
    };
    let train = scene_images(SEED, 8, &scene).unwrap();
    let held = scene_images(SEED + 1000, 10, &scene).unwrap();
    let cfg = AttackConfig {
        beta: 1.0,
        steps: 200,
        step_size: 0.02,
        patch_height: 48,
        patch_width: 48,
        loss_region: LossRegion::Outside,
        target: AttackTarget::Untargeted,
        ..AttackConfig::default()
    };
    let patch = optimize_patch(&net, &train, &cfg, SEED).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2000);
    let mut drop = 0.0;
    for (img, labels) in &held {
        let place = sample_transform(&mut rng, (64, 64), cfg.scale_range);
        let (attacked, covered) = paste_patch(img, &patch, &place).unwrap();
        drop += uncovered_accuracy(&net, img, labels, &covered) - uncovered_accuracy(&net, &attacked, labels, &covered);
    }
    let drop_pp = 100.0 * drop / held.len() as f64;
    let elapsed = start.elapsed();
    verdict(
        4,
        "attack efficacy",
        drop_pp >= 10.0 && within(elapsed, 300),
        &format!(
            "uncovered-pixel accuracy drop {drop_pp:.2}pp (need >= 10), {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

/// Untargeted attack loss: negative mean cross-entropy against the true labels.
fn adversarial_loss(logits: &ActivationTensor, labels: &LabelMap) -> f64 {
    -softmax_cross_entropy(logits, LossTarget::Labels(labels), None).unwrap().loss
}

fn c05_trace_amplifies_attack() {
    let fx = fixture();
    let start = Instant::now();
    let net = fx.net.clone();
    let l = fx.cfg.layer;
    let n = net.num_layers();
    let gt = fx.video.gt_masks.as_ref().unwrap();
    let mut reduced = 0;
    for k in 0..20 {
        let h = net.forward_slice(&fx.video.frames[k], 0, l).unwrap();
        let sigma = update_trace(&h, &gt[k], &DefenseFlags::ALL).unwrap();
        let weighted = h.scale_channels(sigma.weights()).unwrap();
        let plain = adversarial_loss(&net.forward_slice(&h, l, n).unwrap(), &fx.video.labels[k]);
        let traced = adversarial_loss(&net.forward_slice(&weighted, l, n).unwrap(), &fx.video.labels[k]);
        if traced <= plain {
            reduced += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        5,
        "trace amplifies the attack",
        reduced >= 16 && within(elapsed, 60),
        &format!("L_Adv reduced on {reduced}/20 frames (need >= 16), {:.1}s", elapsed.as_secs_f64()),
    );
}

fn c06_ablation_trend() {
    let fx = fixture();
    let start = Instant::now();
    let net = fx.net.clone();
    let rows = run_ablation(
        &fx.video,
        &net,
        &standard_ablation_grid(ProviderKind::Gt),
        &fx.cfg.run_settings(),
    )
    .unwrap();
    let all = row(&rows, &DefenseFlags::ALL.csv_label()).mean_mask_iou;
    let none = row(&rows, &DefenseFlags::NONE.csv_label()).mean_mask_iou;
    let plus = row(
        &rows,
        &DefenseFlags {
            att_plus: true,
            ..DefenseFlags::NONE
        }
        .csv_label(),
    )
    .mean_mask_iou;
    let elapsed = start.elapsed();
    verdict(
        6,
        "ablation trend",
        all - none >= 0.15 && all > plus && within(elapsed, 180),
        &format!(
            "all {all:.3}, none {none:.3} (gap {:.3}, need >= 0.15), att+ only {plus:.3}, {:.1}s",
            all - none,
            elapsed.as_secs_f64()
        ),
    );
}

fn c07_single_pass_accounting() {
    let fx = fixture();
    let start = Instant::now();
    let net = fx.net.clone();
    let settings = fx.cfg.run_settings();
    let params = settings.params.clone();
    let gt = fx.video.gt_masks.clone().unwrap();
    let k = fx.video.len();
    let (h, w) = fx.video.dims();
    let lambda = default_lambda_m(&net, h, w, params.monitored_layer).unwrap();

    net.reset_execution_counts();
    let mut state = AcatState::new(params.clone(), lambda);
    let mut once = GtProvider::only_at(gt.clone(), [0]);
    let report = run_stream(&mut state, &net, &fx.video.frames, &mut once, None).unwrap();
    let acat_units = net.executed_pass_units();

    net.reset_execution_counts();
    let mut every = GtProvider::new(gt);
    let base = run_two_pass_baseline(&net, &params, &fx.video.frames, &mut every).unwrap();
    let base_units = net.executed_pass_units();

    let detections = report.count_mode(FrameMode::Detected);
    let resets = report.count_mode(FrameMode::Reset);
    let elapsed = start.elapsed();
    let pass = acat_units == (k + 1) as f64
        && report.total_passes == (k + 1) as f64
        && detections == 1
        && resets == 0
        && base_units == (2 * k) as f64
        && count_passes(&base).total == (2 * k) as f64
        && within(elapsed, 60);
    verdict(
        7,
        "single-pass accounting",
        pass,
        &format!(
            "K={k}: defended {acat_units} units ({detections} detection, {resets} resets), two-pass baseline {base_units}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn c08_reset_boundary() {
    let fx = fixture();
    let start = Instant::now();
    let net = fx.net.clone();
    let (h, w) = (64, 128);
    let scene = Scene::generate(SEED + 77, &SceneConfig::new(h, w)).unwrap();
    let frames_n = 40;
    let mut frames = Vec::new();
    let mut gts = Vec::new();
    for k in 0..frames_n {
        let (bg, _) = scene.render(k);
        let scale = 1.0 - 0.95 * k as f64 / (frames_n - 1) as f64;
        let place = Placement {
            x_pos: 64.0,
            y_pos: 32.0,
            scale,
        };
        let (frame, covered) = paste_patch(&bg, &fx.patch, &place).unwrap();
        frames.push(frame);
        gts.push(covered.complement());
    }
    let params = DefenseParams::default();
    let lambda = default_lambda_m(&net, h, w, params.monitored_layer).unwrap();

    let mut state = AcatState::new(params, lambda);
    let mut provider = GtProvider::only_at(gts.clone(), [0]);
    let mut before = Vec::new();
    let mut modes = Vec::new();
    let mut counts = Vec::new();
    for f in &frames {
        before.push(state.clone());
        let out = state.process_frame(&net, f, &mut provider).unwrap();
        modes.push(out.mode);
        counts.push(out.mask_used.as_ref().map(BinaryMask::count_zeros));
    }
    let resets: Vec<usize> = (0..frames_n).filter(|&k| modes[k] == FrameMode::Reset).collect();
    let mut detail = format!("lambda_M {lambda}, resets at {resets:?}");
    let mut pass = resets.len() == 1 && modes[0] == FrameMode::Detected;
    if let Some(&r) = resets.first() {
        // Mask the trace would have produced at the reset frame.
        let probe = |lambda_m: usize| {
            let mut s = before[r].clone();
            s.lambda_m = lambda_m;
            let mut none = GtProvider::only_at(gts.clone(), []);
            s.process_frame(&net, &frames[r], &mut none).unwrap()
        };
        let c = probe(0).mask_used.map_or(0, |m| m.count_zeros());
        let traced_before = (1..r).all(|k| modes[k] == FrameMode::Traced && counts[k].is_some_and(|n| n >= lambda));
        let at_c = probe(c).mode;
        let above_c = probe(c + 1).mode;
        detail += &format!(
            ", first qualifying frame {r} with {c} adversarial pixels; lambda_M = {c} gives {at_c}, lambda_M = {} gives {above_c}",
            c + 1
        );
        pass &= c < lambda && c >= 1 && traced_before && at_c == FrameMode::Traced && above_c == FrameMode::Reset;
    }
    let elapsed = start.elapsed();
    verdict(8, "reset criterion", pass && within(elapsed, 60), &format!("{detail}, {:.1}s", elapsed.as_secs_f64()));
}

fn c09_update_period_robustness() {
    let fx = fixture();
    let start = Instant::now();
    let net = fx.net.clone();
    let rows = run_period_sweep(
        &fx.video,
        &net,
        &[Some(1), Some(5), Some(10), Some(30)],
        ProviderKind::Gt,
        &fx.cfg.run_settings(),
    )
    .unwrap();
    let ious: Vec<String> = rows.iter().map(|r| format!("{} {:.3}", r.config, r.mean_mask_iou)).collect();
    let (p1, p30) = (rows[0].mean_mask_iou, rows[3].mean_mask_iou);
    let elapsed = start.elapsed();
    verdict(
        9,
        "update-period robustness",
        (p30 - p1).abs() <= 0.10 && within(elapsed, 300),
        &format!("{}; |P30 - P1| = {:.3}, {:.1}s", ious.join(", "), (p30 - p1).abs(), elapsed.as_secs_f64()),
    );
}

fn c10_layer_sweep_trend() {
    let fx = fixture();
    let start = Instant::now();
    let net = fx.net.clone();
    // Layers 4 and 5 are the 1x1 classifier and the upsample.
    let deepest = net.num_layers() - 2;
    let rows = run_layer_sweep(&fx.video, &net, &[1, deepest], ProviderKind::Gt, &fx.cfg.run_settings()).unwrap();
    let (shallow, deep) = (rows[0].mean_mask_iou, rows[1].mean_mask_iou);
    let elapsed = start.elapsed();
    verdict(
        10,
        "layer sweep trend",
        shallow >= deep && within(elapsed, 180),
        &format!(
            "layer 1 {shallow:.3} vs layer {deepest} {deep:.3}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn c11_beta_monotonicity() {
    let fx = fixture();
    let start = Instant::now();
    let net = fx.net.clone();
    let scene = SceneConfig {
        class_count: net.class_count(),
        ..SceneConfig::new(64, 64)
    };
    let train = scene_images(SEED, 8, &scene).unwrap();
    let held = scene_images(SEED + 1000, 10, &scene).unwrap();
    let base = fx.cfg.attack_config();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3000);
    let places: Vec<Placement> = (0..held.len())
        .map(|_| sample_transform(&mut rng, (64, 64), base.scale_range))
        .collect();
    let mut energies = Vec::new();
    for beta in [0.3, 0.6, 1.0] {
        let cfg = AttackConfig { beta, ..base.clone() };
        let patch = optimize_patch(&net, &train, &cfg, SEED).unwrap();
        let e: f64 = held
            .iter()
            .zip(&places)
            .map(|((img, labels), p)| frame_losses(&net, img, labels, &patch, p, &cfg).unwrap().activation)
            .sum::<f64>()
            / held.len() as f64;
        energies.push(e);
    }
    let monotone = energies.windows(2).all(|w| w[1] >= w[0]);
    let elapsed = start.elapsed();
    verdict(
        11,
        "beta monotonicity",
        monotone && within(elapsed, 600),
        &format!(
            "layer-{} patch energy at beta 0.3/0.6/1.0: {:.4}/{:.4}/{:.4}, {:.1}s",
            base.monitored_layers[0],
            energies[0],
            energies[1],
            energies[2],
            elapsed.as_secs_f64()
        ),
    );
}

fn acat(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_acat"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn acat");
    assert!(
        out.status.success(),
        "acat {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn full_ablate_run(dir: &Path) -> Vec<u8> {
    let seed = SEED.to_string();
    acat(dir, &["train-toy", "--seed", &seed]);
    acat(dir, &["craft-patch", "--seed", &seed]);
    acat(dir, &["gen-video", "--seed", &seed]);
    acat(dir, &["ablate", "--seed", &seed]);
    std::fs::read(dir.join("out/ablate/results.csv")).unwrap()
}

fn c12_end_to_end_determinism() {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = full_ablate_run(a.path());
    let second = full_ablate_run(b.path());
    let elapsed = start.elapsed();
    verdict(
        12,
        "end-to-end determinism",
        !first.is_empty() && first == second && within(elapsed, 300),
        &format!(
            "two train/craft/gen/ablate runs, results.csv {} bytes, identical: {}, {:.1}s",
            first.len(),
            first == second,
            elapsed.as_secs_f64()
        ),
    );
}

const CRITERIA: [(u32, &str, fn()); 12] = [
    (1, "primitive oracles", c01_primitive_oracles),
    (2, "gradient correctness", c02_gradient_correctness),
    (3, "slicing identity", c03_slicing_identity),
    (4, "attack efficacy", c04_attack_efficacy),
    (5, "trace amplifies the attack", c05_trace_amplifies_attack),
    (6, "ablation trend", c06_ablation_trend),
    (7, "single-pass accounting", c07_single_pass_accounting),
    (8, "reset criterion", c08_reset_boundary),
    (9, "update-period robustness", c09_update_period_robustness),
    (10, "layer sweep trend", c10_layer_sweep_trend),
    (11, "beta monotonicity", c11_beta_monotonicity),
    (12, "end-to-end determinism", c12_end_to_end_determinism),
];

fn main() -> ExitCode {
    // An optional argument filters criteria by number or name, like libtest.
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let selected: Vec<_> = CRITERIA
        .iter()
        .filter(|(n, name, _)| {
            filter
                .as_deref()
                .map_or(true, |f| name.contains(f) || format!("c{n:02}").starts_with(f))
        })
        .collect();
    let outcomes: Vec<(u32, &str, bool)> = thread::scope(|s| {
        let handles: Vec<_> = selected
            .iter()
            .map(|&&(n, name, f)| (n, name, s.spawn(move || panic::catch_unwind(f).is_ok())))
            .collect();
        handles
            .into_iter()
            .map(|(n, name, h)| (n, name, h.join().unwrap_or(false)))
            .collect()
    });
    let reported = REPORTED.lock().unwrap().clone();
    for &(n, name, ok) in &outcomes {
        if !ok && !reported.contains(&n) {
            println!("criterion {n:>2} [{name}]: FAIL (panicked before a verdict)");
        }
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.2).map(|o| o.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        outcomes.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
