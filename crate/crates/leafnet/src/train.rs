//! Contrastive pair training: distance and loss functions, the Adam
//! optimizer and the epoch loop with loss records and checkpoints.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::manifest::DatasetManifest;
use crate::net::{
    backward, forward, Element, Embedding, LayerParam, Mode, NetworkParams, NetworkSpec, ParamSet,
};
use crate::pairs::{sample_pairs, LabeledPair, PairLabel};
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Hyperparameters for a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub similar_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.001,
            weight_decay: 0.0001,
            margin: 2.0,
            seed: 0,
            train_fraction: 1.0,
            similar_ratio: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config(format!(
                "margin must be > 0, got {}",
                self.margin
            )));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie in (0,1], got {}",
                self.train_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.similar_ratio) {
            return Err(Error::Config(format!(
                "similar ratio must lie in [0,1], got {}",
                self.similar_ratio
            )));
        }
        Ok(())
    }
}

/// One mean-batch-loss observation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Unix seconds; informational only, excluded from the CSV export.
    pub timestamp: f64,
}

/// `sqrt(sum (a_i - b_i)^2)`, accumulated in f64.
pub fn euclidean_distance_f64(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "distance between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Distance between two 32-d embeddings.
pub fn embedding_distance(a: &Embedding, b: &Embedding) -> f64 {
    let av: Vec<f64> = a.values().iter().map(|&v| v as f64).collect();
    let bv: Vec<f64> = b.values().iter().map(|&v| v as f64).collect();
    euclidean_distance_f64(&av, &bv).expect("embeddings share a length")
}

/// Contrastive loss `(1-Y) * D^2/2 + Y * max(0, m-D)^2 / 2`.
pub fn contrastive_loss(distance: f64, label: PairLabel, margin: f64) -> Result<f64> {
    if distance < 0.0 {
        return Err(Error::Config(format!(
            "contrastive loss requires D >= 0, got {distance}"
        )));
    }
    if margin <= 0.0 {
        return Err(Error::Config(format!(
            "contrastive loss requires margin > 0, got {margin}"
        )));
    }
    Ok(match label {
        PairLabel::Similar => 0.5 * distance * distance,
        PairLabel::Dissimilar => {
            let hinge = (margin - distance).max(0.0);
            0.5 * hinge * hinge
        }
    })
}

/// Loss and embedding gradients for one pair. For similar pairs the
/// gradient pushes the embeddings together; for dissimilar pairs closer
/// than the margin it pulls them apart.
pub fn pair_loss_grads(
    e1: &Array1<f32>,
    e2: &Array1<f32>,
    label: PairLabel,
    margin: f64,
) -> Result<(f64, Array1<f32>, Array1<f32>)> {
    let diff: Array1<f64> = e1
        .iter()
        .zip(e2.iter())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let distance = diff.dot(&diff).sqrt();
    let loss = contrastive_loss(distance, label, margin)?;
    let factor = match label {
        PairLabel::Similar => 1.0,
        PairLabel::Dissimilar => {
            if distance >= margin || distance == 0.0 {
                0.0
            } else {
                -(margin - distance) / distance
            }
        }
    };
    let g1: Array1<f32> = diff.mapv(|v| (factor * v) as f32);
    let g2 = g1.mapv(|v| -v);
    Ok((loss, g1, g2))
}

/// First and second moment estimates for Adam, aligned with a parameter set.
#[derive(Debug, Clone)]
pub struct AdamState<F: Element> {
    pub t: u64,
    pub m: ParamSet<F>,
    pub v: ParamSet<F>,
}

impl<F: Element> AdamState<F> {
    pub fn new(params: &NetworkParams<F>) -> Self {
        AdamState {
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

fn param_slices<F: Element>(p: &mut LayerParam<F>) -> (&mut [F], &mut [F]) {
    match p {
        LayerParam::Conv { weight, bias } => (
            weight.as_slice_mut().expect("standard layout"),
            bias.as_slice_mut().expect("standard layout"),
        ),
        LayerParam::Fc { weight, bias } => (
            weight.as_slice_mut().expect("standard layout"),
            bias.as_slice_mut().expect("standard layout"),
        ),
    }
}

fn param_slices_ref<F: Element>(p: &LayerParam<F>) -> (&[F], &[F]) {
    match p {
        LayerParam::Conv { weight, bias } => (
            weight.as_slice().expect("standard layout"),
            bias.as_slice().expect("standard layout"),
        ),
        LayerParam::Fc { weight, bias } => (
            weight.as_slice().expect("standard layout"),
            bias.as_slice().expect("standard layout"),
        ),
    }
}

/// Core Adam update over one flat slice. Weight decay is folded into the
/// gradient before the moment updates (classical L2 coupling).
#[allow(clippy::too_many_arguments)]
pub fn adam_update_slice<F: Element>(
    params: &mut [F],
    grads: &[F],
    m: &mut [F],
    v: &mut [F],
    t: u64,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let b1 = F::from(beta1).unwrap();
    let b2 = F::from(beta2).unwrap();
    let one = F::one();
    let wd = F::from(weight_decay).unwrap();
    let lr = F::from(lr).unwrap();
    let eps = F::from(eps).unwrap();
    let bias1 = F::from(1.0 - beta1.powi(t as i32)).unwrap();
    let bias2 = F::from(1.0 - beta2.powi(t as i32)).unwrap();
    for i in 0..params.len() {
        let g = grads[i] + wd * params[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One Adam step with bias correction over every parameter tensor.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<F: Element>(
    params: &mut NetworkParams<F>,
    grads: &ParamSet<F>,
    state: &mut AdamState<F>,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != params.layers.len() {
        return Err(Error::Structural {
            layer: "optimizer".into(),
            reason: "gradient set does not match parameter layout".into(),
        });
    }
    state.t += 1;
    let t = state.t;
    for (index, slot) in params.layers.iter_mut().enumerate() {
        let Some(p) = slot else { continue };
        let Some(g) = grads[index].as_ref() else {
            return Err(Error::Structural {
                layer: format!("optimizer layer {index}"),
                reason: "missing gradient tensor".into(),
            });
        };
        let (pw, pb) = param_slices(p);
        let (gw, gb) = param_slices_ref(g);
        if pw.len() != gw.len() || pb.len() != gb.len() {
            return Err(Error::Structural {
                layer: format!("optimizer layer {index}"),
                reason: "gradient shape mismatch".into(),
            });
        }
        let m = state.m[index].as_mut().expect("state mirrors params");
        let v = state.v[index].as_mut().expect("state mirrors params");
        let (mw, mb) = param_slices(m);
        let (vw, vb) = param_slices(v);
        adam_update_slice(pw, gw, mw, vw, t, lr, weight_decay, beta1, beta2, eps);
        adam_update_slice(pb, gb, mb, vb, t, lr, weight_decay, beta1, beta2, eps);
    }
    Ok(())
}

fn accumulate<F: Element>(acc: &mut ParamSet<F>, grads: &ParamSet<F>) {
    for (a, g) in acc.iter_mut().zip(grads.iter()) {
        let (Some(a), Some(g)) = (a.as_mut(), g.as_ref()) else {
            continue;
        };
        let (aw, ab) = param_slices(a);
        let (gw, gb) = param_slices_ref(g);
        for (x, y) in aw.iter_mut().zip(gw) {
            *x += *y;
        }
        for (x, y) in ab.iter_mut().zip(gb) {
            *x += *y;
        }
    }
}

fn scale<F: Element>(acc: &mut ParamSet<F>, factor: F) {
    for a in acc.iter_mut().flatten() {
        a.for_each_mut(|v| *v *= factor);
    }
}

/// All images of a manifest decoded into memory, in manifest order.
pub struct ImageStore {
    images: Vec<Array3<f32>>,
}

impl ImageStore {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.len());
        for sample in &manifest.samples {
            images.push(PixelImage::load(&sample.path)?.into_data());
        }
        Ok(ImageStore { images })
    }

    pub fn get(&self, index: usize) -> &Array3<f32> {
        &self.images[index]
    }
}

pub struct TrainOutput {
    pub params: NetworkParams<f32>,
    pub records: Vec<LossRecord>,
}

fn now_unix() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Trains the backbone with shared weights over contrastive pairs.
///
/// Per epoch, draws `manifest.len()` pairs, runs both pair members through
/// the single parameter set and applies one Adam step per batch on the
/// mean batch gradient. Emits one [`LossRecord`] per batch; when
/// `checkpoint_dir` is given, writes a checkpoint after each epoch plus a
/// final one. Fully deterministic per seed.
pub fn train(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    store: &ImageStore,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    if manifest.is_empty() {
        return Err(Error::Sampling("training manifest is empty".into()));
    }
    let spec = NetworkSpec::backbone();
    let mut params = NetworkParams::<f32>::init(&spec, config.seed);
    let mut state = AdamState::new(&params);
    let mut epoch_seeds = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9));
    let mut dropout_seeds = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x85EB_CA6B));

    let pairs_per_epoch = manifest.len();
    let mut records = Vec::new();
    let mut step = 0usize;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in 0..config.epochs {
        let pairs = sample_pairs(
            manifest,
            pairs_per_epoch,
            config.similar_ratio,
            epoch_seeds.gen(),
        )?;
        for batch in pairs.chunks(config.batch_size) {
            let mut acc = params.zeros_like();
            let mut batch_loss = 0.0f64;
            for pair in batch {
                let (loss, g1, g2) = pair_step(
                    &params,
                    store,
                    pair,
                    config.margin,
                    dropout_seeds.gen(),
                    dropout_seeds.gen(),
                )?;
                batch_loss += loss;
                accumulate(&mut acc, &g1);
                accumulate(&mut acc, &g2);
            }
            let mean_loss = batch_loss / batch.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Training {
                    step,
                    epoch,
                    reason: format!(
                        "non-finite batch loss over {} pairs ({} similar)",
                        batch.len(),
                        batch
                            .iter()
                            .filter(|p| p.label == PairLabel::Similar)
                            .count()
                    ),
                });
            }
            scale(&mut acc, 1.0 / batch.len() as f32);
            adam_step(
                &mut params,
                &acc,
                &mut state,
                config.learning_rate,
                config.weight_decay,
                0.9,
                0.999,
                1e-8,
            )?;
            records.push(LossRecord {
                step,
                epoch,
                loss: mean_loss,
                timestamp: now_unix(),
            });
            step += 1;
        }
        if let Some(dir) = checkpoint_dir {
            checkpoint::save(
                &params,
                &dir.join(format!("checkpoint_epoch_{epoch:02}.bin")),
            )?;
        }
    }
    if let Some(dir) = checkpoint_dir {
        checkpoint::save(&params, &dir.join("checkpoint_final.bin"))?;
    }
    Ok(TrainOutput { params, records })
}

/// Forward/backward for both members of one pair against the shared
/// parameter set. Returns (loss, grads for member 1, grads for member 2).
fn pair_step(
    params: &NetworkParams<f32>,
    store: &ImageStore,
    pair: &LabeledPair,
    margin: f64,
    seed1: u64,
    seed2: u64,
) -> Result<(f64, ParamSet<f32>, ParamSet<f32>)> {
    let (e1, trace1) = forward(params, store.get(pair.first), Mode::Train, seed1)?;
    let (e2, trace2) = forward(params, store.get(pair.second), Mode::Train, seed2)?;
    let (loss, g1, g2) = pair_loss_grads(&e1, &e2, pair.label, margin)?;
    let grads1 = backward(params, &trace1, &g1)?;
    let grads2 = backward(params, &trace2, &g2)?;
    Ok((loss, grads1, grads2))
}

/// Mean loss per epoch, in epoch order.
pub fn epoch_mean_losses(records: &[LossRecord]) -> Vec<f64> {
    let max_epoch = records.iter().map(|r| r.epoch).max().unwrap_or(0);
    (0..=max_epoch)
        .map(|e| {
            let batch: Vec<f64> = records
                .iter()
                .filter(|r| r.epoch == e)
                .map(|r| r.loss)
                .collect();
            batch.iter().sum::<f64>() / batch.len() as f64
        })
        .collect()
}

/// Writes the `step,epoch,loss` CSV consumed by loss-curve plots.
pub fn write_loss_csv(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from("step,epoch,loss\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.step, r.epoch, r.loss));
    }
    std::fs::write(path, out)?;
    Ok(())
}
