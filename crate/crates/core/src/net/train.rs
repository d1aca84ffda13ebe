use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{argmax_labels, softmax_cross_entropy, LossTarget};
use super::{GradientTape, Layer, SlicedNetwork};
use crate::error::{AcatError, Result};
use crate::eval::scene::{Scene, SceneConfig};
use crate::tensor::{ActivationTensor, LabelMap};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub class_count: usize,
    /// Side of the square training crops; must be a multiple of 4.
    pub image_size: usize,
    pub train_images: usize,
    pub holdout_images: usize,
    /// Scene template; its size and class count are replaced by
    /// `image_size` and `class_count`.
    pub scene: SceneConfig,
}

impl TrainConfig {
    pub fn new(seed: u64, epochs: usize, lr: f64) -> Self {
        Self {
            seed,
            epochs,
            lr,
            class_count: 4,
            image_size: 32,
            train_images: 48,
            holdout_images: 16,
            scene: SceneConfig::new(32, 32),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: SlicedNetwork,
    /// Mean training loss before the first update.
    pub initial_loss: f64,
    /// Mean training loss after the last epoch.
    pub final_loss: f64,
    /// Running mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Per-pixel accuracy on held-out procedural frames.
    pub holdout_accuracy: f64,
}

fn dataset(seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<(ActivationTensor, LabelMap)>> {
    (0..count)
        .map(|i| Ok(Scene::generate(seed.wrapping_add(i as u64), cfg)?.render(0)))
        .collect()
}

fn mean_loss(net: &SlicedNetwork, data: &[(ActivationTensor, LabelMap)]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in data {
        let logits = net.forward(x)?;
        total += softmax_cross_entropy(&logits, LossTarget::Labels(y), None)?.loss;
    }
    Ok(total / data.len() as f64)
}

/// Fraction of pixels whose argmax class equals the label.
pub fn pixel_accuracy(net: &SlicedNetwork, data: &[(ActivationTensor, LabelMap)]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (x, y) in data {
        let pred = argmax_labels(&net.forward(x)?);
        hit += pred.data.iter().zip(&y.data).filter(|(a, b)| a == b).count();
        total += y.data.len();
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Trains the toy segmentation network with per-image SGD on procedural
/// scenes. Deterministic given the config.
pub fn train_toy_model(cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Err(AcatError::config("epochs must be at least 1"));
    }
    if cfg.train_images == 0 || cfg.image_size == 0 || cfg.image_size % 4 != 0 {
        return Err(AcatError::config(
            "training needs at least one image and a crop size divisible by 4",
        ));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(AcatError::config(format!("learning rate {} must be finite and >= 0", cfg.lr)));
    }
    let scene_cfg = SceneConfig {
        height: cfg.image_size,
        width: cfg.image_size,
        class_count: cfg.class_count,
        ..cfg.scene.clone()
    };
    let train = dataset(cfg.seed.wrapping_mul(1_000_003), cfg.train_images, &scene_cfg)?;
    let holdout = dataset(
        cfg.seed.wrapping_mul(1_000_003).wrapping_add(0x5eed_0000),
        cfg.holdout_images,
        &scene_cfg,
    )?;

    let mut net = SlicedNetwork::toy(cfg.class_count, cfg.seed);
    let initial_loss = mean_loss(&net, &train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let n_layers = net.num_layers();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut running = 0.0;
        for &idx in &order {
            let (x, y) = &train[idx];
            let mut tape = GradientTape::new();
            let logits = net.forward_recorded(x, 0, n_layers, &mut tape)?;
            let ce = softmax_cross_entropy(&logits, LossTarget::Labels(y), None)?;
            if !ce.loss.is_finite() {
                return Err(AcatError::Training { epoch, loss: ce.loss });
            }
            running += ce.loss;
            net.backward(&mut tape, &ce.grad, &[])?;
            for (layer, g) in net.layers_mut().iter_mut().zip(tape.param_grads()) {
                if let Layer::Conv { kernel, bias, .. } = layer {
                    for (w, dw) in kernel.weights.iter_mut().zip(&g.weights) {
                        *w -= cfg.lr * dw;
                    }
                    for (b, db) in bias.iter_mut().zip(&g.bias) {
                        *b -= cfg.lr * db;
                    }
                }
            }
        }
        let epoch_loss = running / order.len() as f64;
        if !epoch_loss.is_finite() || net.params().iter().any(|p| !p.is_finite()) {
            return Err(AcatError::Training { epoch, loss: epoch_loss });
        }
        epoch_losses.push(epoch_loss);
    }
    net.round_params_to_f32();
    let final_loss = mean_loss(&net, &train)?;
    if !final_loss.is_finite() {
        return Err(AcatError::Training {
            epoch: cfg.epochs,
            loss: final_loss,
        });
    }
    let holdout_accuracy = pixel_accuracy(&net, &holdout)?;
    Ok(TrainOutcome {
        net,
        initial_loss,
        final_loss,
        epoch_losses,
        holdout_accuracy,
    })
}
