//! The 4D-convolutional verification network.
//!
//! A reduced ResNet-style stack of residual 4D conv blocks consumes the
//! channels-first matching tensor and emits two logits (irrelevant /
//! relevant). Each block can carry a hypersphere attention mask whose six
//! parameters are learned jointly with the convolution weights.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::har::{HarParams, SIGMA_MIN};
use crate::tape::{GradTape, NodeId};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
const RUNNING_MOMENTUM: f64 = 0.1;

/// Index of the "relevant" class in the logit vector; the ranking score is
/// its softmax probability.
pub const RELEVANT_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    /// Stride applied on all four spatial modes by the block's first conv.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_spatial: [usize; 4],
    pub blocks: Vec<BlockConfig>,
    pub kernel: usize,
    pub har_enabled: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Default stack: four residual blocks, channels 8/16/16/16, 3^4
    /// kernels, stride-2 downsampling in block 2 only. Deeper
    /// downsampling makes the class-evidence maps too coarse to localize
    /// on small grids once rescaled back up.
    pub fn default_for(input_channels: usize, grid_rows: usize, grid_cols: usize) -> Self {
        ModelConfig {
            input_channels,
            input_spatial: [grid_rows, grid_cols, grid_rows, grid_cols],
            blocks: vec![
                BlockConfig { channels: 8, stride: 1 },
                BlockConfig { channels: 16, stride: 2 },
                BlockConfig { channels: 16, stride: 1 },
                BlockConfig { channels: 16, stride: 1 },
            ],
            kernel: 3,
            har_enabled: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(CoreError::Config("at least one block required".to_string()));
        }
        if self.kernel % 2 == 0 {
            return Err(CoreError::Config("kernel side must be odd".to_string()));
        }
        if self.blocks.iter().any(|b| b.stride == 0 || b.channels == 0) {
            return Err(CoreError::Config("block stride/channels must be >= 1".to_string()));
        }
        if self.input_channels == 0 || self.input_spatial.iter().any(|&e| e == 0) {
            return Err(CoreError::Config("degenerate input shape".to_string()));
        }
        Ok(())
    }

    /// Spatial shape after each block.
    pub fn block_spatials(&self) -> Vec<[usize; 4]> {
        let pad = self.kernel / 2;
        let mut spatial = self.input_spatial;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            for e in spatial.iter_mut() {
                *e = (*e + 2 * pad - self.kernel) / b.stride + 1;
            }
            out.push(spatial);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormLayer {
    fn new(channels: usize) -> Self {
        NormLayer {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv1: ConvLayer,
    pub norm1: NormLayer,
    pub conv2: ConvLayer,
    pub norm2: NormLayer,
    /// 1^4-kernel projection on the skip path when shape changes.
    pub proj: Option<ConvLayer>,
    /// Six mask scalars (c0..c3, mu, sigma) as a [6] tensor.
    pub har: Tensor,
}

/// Softmax class score over the two logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub logits: [f64; 2],
    pub prob_relevant: f64,
}

impl ClassScore {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let m = logits[0].max(logits[1]);
        let e0 = libm::exp(logits[0] - m);
        let e1 = libm::exp(logits[1] - m);
        ClassScore {
            logits,
            prob_relevant: e1 / (e0 + e1),
        }
    }

    pub fn probabilities(&self) -> [f64; 2] {
        [1.0 - self.prob_relevant, self.prob_relevant]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// A retained forward pass: the tape plus the node ids needed for
/// gradients (training) and per-block saliency (Grad-CAM).
pub struct TapedForward {
    pub tape: GradTape,
    pub input_id: NodeId,
    pub logits_id: NodeId,
    /// Post-HAR output of every block.
    pub block_acts: Vec<NodeId>,
    /// Parameter leaf ids in `Model::param_count` order; `None` for the
    /// mask parameters of a model with attention disabled.
    pub param_ids: Vec<Option<NodeId>>,
    /// Per-norm-layer (mean, var) measured on this sample (train phase).
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// One sample's contribution to a gradient step.
pub struct SampleGrad {
    pub loss: f64,
    pub correct: bool,
    pub grads: Vec<Tensor>,
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller keeps initialization reproducible without extra deps.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    std * libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

fn he_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in as f64);
    Tensor::from_fn(shape, |_| normal(rng, std))
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.kernel;
        let spatials = config.block_spatials();
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut in_ch = config.input_channels;
        for (bi, bc) in config.blocks.iter().enumerate() {
            let ch = bc.channels;
            let conv1 = ConvLayer {
                w: he_init(&mut rng, &[ch, in_ch, k, k, k, k], in_ch * k * k * k * k),
                b: Tensor::zeros(&[ch]),
            };
            let conv2 = ConvLayer {
                w: he_init(&mut rng, &[ch, ch, k, k, k, k], ch * k * k * k * k),
                b: Tensor::zeros(&[ch]),
            };
            let proj = if in_ch != ch || bc.stride != 1 {
                Some(ConvLayer {
                    w: he_init(&mut rng, &[ch, in_ch, 1, 1, 1, 1], in_ch),
                    b: Tensor::zeros(&[ch]),
                })
            } else {
                None
            };
            let har = HarParams::init_for_shape(&spatials[bi]);
            blocks.push(Block {
                conv1,
                norm1: NormLayer::new(ch),
                conv2,
                norm2: NormLayer::new(ch),
                proj,
                har: Tensor::new(vec![6], har.to_array().to_vec())?,
            });
            in_ch = ch;
        }
        let head_w = he_init(&mut rng, &[2, in_ch], in_ch);
        let head_b = Tensor::zeros(&[2]);
        Ok(Model {
            config,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Flat list of learnable tensors, in a fixed traversal order shared
    /// with `TapedForward::param_ids` and `SampleGrad::grads`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.push(&b.conv1.w);
            v.push(&b.conv1.b);
            v.push(&b.norm1.gamma);
            v.push(&b.norm1.beta);
            v.push(&b.conv2.w);
            v.push(&b.conv2.b);
            v.push(&b.norm2.gamma);
            v.push(&b.norm2.beta);
            if let Some(p) = &b.proj {
                v.push(&p.w);
                v.push(&p.b);
            }
            v.push(&b.har);
        }
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.conv1.w);
            v.push(&mut b.conv1.b);
            v.push(&mut b.norm1.gamma);
            v.push(&mut b.norm1.beta);
            v.push(&mut b.conv2.w);
            v.push(&mut b.conv2.b);
            v.push(&mut b.norm2.gamma);
            v.push(&mut b.norm2.beta);
            if let Some(p) = &mut b.proj {
                v.push(&mut p.w);
                v.push(&mut p.b);
            }
            v.push(&mut b.har);
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let c = self.config.input_channels;
        let s = self.config.input_spatial;
        let expect = [c, s[0], s[1], s[2], s[3]];
        if input.shape() != expect {
            return Err(CoreError::Dimension(
                "input tensor does not match model input spec".to_string(),
            ));
        }
        Ok(())
    }

    /// Builds the full forward graph on a fresh tape.
    pub fn build_forward(&self, input: &Tensor, phase: Phase) -> Result<TapedForward> {
        self.check_input(input)?;
        let mut tape = GradTape::new();
        let mut param_ids = Vec::new();
        let mut batch_stats = Vec::new();
        let pad = self.config.kernel / 2;

        let input_id = tape.leaf(input.clone());
        let mut x = input_id;
        let mut block_acts = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let w1 = tape.leaf(b.conv1.w.clone());
            let b1 = tape.leaf(b.conv1.b.clone());
            let g1 = tape.leaf(b.norm1.gamma.clone());
            let be1 = tape.leaf(b.norm1.beta.clone());
            let w2 = tape.leaf(b.conv2.w.clone());
            let b2 = tape.leaf(b.conv2.b.clone());
            let g2 = tape.leaf(b.norm2.gamma.clone());
            let be2 = tape.leaf(b.norm2.beta.clone());
            param_ids.extend([w1, b1, g1, be1, w2, b2, g2, be2].map(Some));

            let stride = self.config.blocks[block_acts.len()].stride;
            let c1 = tape.conv4d(x, w1, b1, stride, pad)?;
            let n1 = match phase {
                Phase::Train => {
                    let (n, mean, var) = tape.norm_stats(c1, g1, be1, NORM_EPS)?;
                    batch_stats.push((mean, var));
                    n
                }
                Phase::Eval => tape.norm_fixed(
                    c1,
                    g1,
                    be1,
                    &b.norm1.running_mean,
                    &b.norm1.running_var,
                    NORM_EPS,
                )?,
            };
            let r1 = tape.relu(n1);
            let c2 = tape.conv4d(r1, w2, b2, 1, pad)?;
            let n2 = match phase {
                Phase::Train => {
                    let (n, mean, var) = tape.norm_stats(c2, g2, be2, NORM_EPS)?;
                    batch_stats.push((mean, var));
                    n
                }
                Phase::Eval => tape.norm_fixed(
                    c2,
                    g2,
                    be2,
                    &b.norm2.running_mean,
                    &b.norm2.running_var,
                    NORM_EPS,
                )?,
            };
            let skip = match &b.proj {
                Some(p) => {
                    let pw = tape.leaf(p.w.clone());
                    let pb = tape.leaf(p.b.clone());
                    param_ids.extend([pw, pb].map(Some));
                    tape.conv4d(x, pw, pb, stride, 0)?
                }
                None => x,
            };
            let sum = tape.add(n2, skip)?;
            let act = tape.relu(sum);
            let out = if self.config.har_enabled {
                let hp = tape.leaf(b.har.clone());
                param_ids.push(Some(hp));
                tape.har(act, hp)?
            } else {
                param_ids.push(None);
                act
            };
            block_acts.push(out);
            x = out;
        }

        let pooled = tape.global_mean(x)?;
        let hw = tape.leaf(self.head_w.clone());
        let hb = tape.leaf(self.head_b.clone());
        param_ids.extend([hw, hb].map(Some));
        let logits_id = tape.linear(pooled, hw, hb)?;

        Ok(TapedForward {
            tape,
            input_id,
            logits_id,
            block_acts,
            param_ids,
            batch_stats,
        })
    }

    /// Eval-mode inference: class score plus every block's post-HAR
    /// activation.
    pub fn forward(&self, input: &Tensor) -> Result<(ClassScore, Vec<Tensor>)> {
        let fwd = self.build_forward(input, Phase::Eval)?;
        let logits = fwd.tape.value(fwd.logits_id);
        let score = ClassScore::from_logits([logits.data()[0], logits.data()[1]]);
        let acts = fwd
            .block_acts
            .iter()
            .map(|&id| fwd.tape.value(id).clone())
            .collect();
        Ok((score, acts))
    }

    /// Ranking score for one pair: softmax probability of "relevant".
    pub fn score(&self, input: &Tensor) -> Result<f64> {
        Ok(self.forward(input)?.0.prob_relevant)
    }

    /// Loss, correctness, and per-parameter gradients for one labeled pair
    /// (training phase). Pure: the model is not mutated.
    pub fn pair_grad(&self, input: &Tensor, relevant: bool) -> Result<SampleGrad> {
        let fwd = self.build_forward(input, Phase::Train)?;
        let label = if relevant { RELEVANT_CLASS } else { 1 - RELEVANT_CLASS };
        let mut tape = fwd.tape;
        let loss_id = tape.cross_entropy(fwd.logits_id, label)?;
        let loss = tape.value(loss_id).data()[0];
        let logits = tape.value(fwd.logits_id);
        let predicted = if logits.data()[RELEVANT_CLASS] > logits.data()[1 - RELEVANT_CLASS] {
            RELEVANT_CLASS
        } else {
            1 - RELEVANT_CLASS
        };
        let grads_all = tape.backward(loss_id)?;
        let grads = fwd
            .param_ids
            .iter()
            .enumerate()
            .map(|(pi, id)| match id {
                Some(id) => grads_all.get(&tape, *id),
                None => Tensor::zeros(self.params()[pi].shape()),
            })
            .collect();
        Ok(SampleGrad {
            loss,
            correct: predicted == label,
            grads,
            batch_stats: fwd.batch_stats,
        })
    }

    /// Folds a batch of per-sample statistics into the running estimates.
    pub fn update_running_stats(&mut self, batch: &[&[(Vec<f64>, Vec<f64>)]]) {
        if batch.is_empty() {
            return;
        }
        let layers = batch[0].len();
        for layer in 0..layers {
            let channels = batch[0][layer].0.len();
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for sample in batch {
                for c in 0..channels {
                    mean[c] += sample[layer].0[c];
                    var[c] += sample[layer].1[c];
                }
            }
            let n = batch.len() as f64;
            for c in 0..channels {
                mean[c] /= n;
                var[c] /= n;
            }
            let (bi, within) = (layer / 2, layer % 2);
            let norm = if within == 0 {
                &mut self.blocks[bi].norm1
            } else {
                &mut self.blocks[bi].norm2
            };
            for c in 0..channels {
                norm.running_mean[c] =
                    (1.0 - RUNNING_MOMENTUM) * norm.running_mean[c] + RUNNING_MOMENTUM * mean[c];
                norm.running_var[c] =
                    (1.0 - RUNNING_MOMENTUM) * norm.running_var[c] + RUNNING_MOMENTUM * var[c];
            }
        }
    }

    /// Clamps every block's sigma away from the Gaussian singularity.
    pub fn clamp_har(&mut self) {
        for b in &mut self.blocks {
            let s = &mut b.har.data_mut()[5];
            if *s < SIGMA_MIN {
                *s = SIGMA_MIN;
            }
        }
    }
}

/// A labeled training pair: the packed input tensor and its relevance.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub input: Tensor,
    pub relevant: bool,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub cosine_decay: bool,
    pub val_fraction: f64,
    /// Stop once validation loss drops below this (best checkpoint kept).
    pub target_val_loss: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            cosine_decay: true,
            val_fraction: 0.2,
            target_val_loss: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Computes gradients for a slice of training pairs; the sequential default
/// for `train_with`. A std-side harness may substitute a parallel mapper —
/// results are summed in slice order either way, so the step is identical.
pub fn sequential_grad_map(model: &Model, batch: &[&TrainPair]) -> Result<Vec<SampleGrad>> {
    batch
        .iter()
        .map(|p| model.pair_grad(&p.input, p.relevant))
        .collect()
}

/// Mini-batch SGD with momentum and optional cosine learning-rate decay.
/// Returns the per-epoch log; the model is left at the checkpoint with the
/// best validation loss.
pub fn train(model: &mut Model, pairs: &[TrainPair], cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    train_with(model, pairs, cfg, &sequential_grad_map)
}

pub fn train_with(
    model: &mut Model,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
    grad_map: &(dyn Fn(&Model, &[&TrainPair]) -> Result<Vec<SampleGrad>> + Sync),
) -> Result<Vec<EpochStats>> {
    if pairs.is_empty() {
        return Err(CoreError::Config("no training pairs".to_string()));
    }
    let has_pos = pairs.iter().any(|p| p.relevant);
    let has_neg = pairs.iter().any(|p| !p.relevant);
    if !has_pos || !has_neg {
        return Err(CoreError::Config(
            "training data must contain both labels".to_string(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    shuffle(&mut order, &mut rng);
    let val_len = if pairs.len() >= 5 {
        ((pairs.len() as f64 * cfg.val_fraction) as usize).max(1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(val_len);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut velocity: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();

    let mut log = Vec::new();
    let mut best: Option<(f64, Model)> = None;

    for epoch in 0..cfg.epochs {
        let lr = if cfg.cosine_decay && cfg.epochs > 1 {
            cfg.learning_rate
                * 0.5
                * (1.0 + libm::cos(core::f64::consts::PI * epoch as f64 / cfg.epochs as f64))
        } else {
            cfg.learning_rate
        };
        shuffle(&mut train_idx, &mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for chunk in train_idx.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let grads = grad_map(model, &batch)?;
            let n = grads.len() as f64;
            for g in &grads {
                epoch_loss += g.loss;
                epoch_correct += g.correct as usize;
            }
            let stats: Vec<&[(Vec<f64>, Vec<f64>)]> =
                grads.iter().map(|g| g.batch_stats.as_slice()).collect();
            model.update_running_stats(&stats);
            for (pi, param) in model.params_mut().into_iter().enumerate() {
                let v = velocity[pi].data_mut();
                let p = param.data_mut();
                for e in 0..p.len() {
                    let mut acc = 0.0;
                    for g in &grads {
                        acc += g.grads[pi].data()[e];
                    }
                    v[e] = cfg.momentum * v[e] - lr * acc / n;
                    p[e] += v[e];
                }
            }
            model.clamp_har();
        }

        let (val_loss, val_acc) = if val_idx.is_empty() {
            (
                epoch_loss / train_idx.len().max(1) as f64,
                epoch_correct as f64 / train_idx.len().max(1) as f64,
            )
        } else {
            evaluate(model, pairs, &val_idx)?
        };
        log.push(EpochStats {
            epoch,
            learning_rate: lr,
            train_loss: epoch_loss / train_idx.len().max(1) as f64,
            train_accuracy: epoch_correct as f64 / train_idx.len().max(1) as f64,
            val_loss,
            val_accuracy: val_acc,
        });

        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
        }
        if let Some(target) = cfg.target_val_loss {
            if val_loss <= target {
                break;
            }
        }
    }

    if let Some((_, best_model)) = best {
        *model = best_model;
    }
    Ok(log)
}

/// Eval-phase cross-entropy loss and accuracy over an index subset.
fn evaluate(model: &Model, pairs: &[TrainPair], idx: &[usize]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for &i in idx {
        let p = &pairs[i];
        let (score, _) = model.forward(&p.input)?;
        let probs = score.probabilities();
        let label = if p.relevant { RELEVANT_CLASS } else { 1 - RELEVANT_CLASS };
        loss -= libm::log(probs[label].max(1e-12));
        let predicted = if score.prob_relevant > 0.5 {
            RELEVANT_CLASS
        } else {
            1 - RELEVANT_CLASS
        };
        correct += (predicted == label) as usize;
    }
    Ok((loss / idx.len() as f64, correct as f64 / idx.len() as f64))
}

/// Fisher-Yates driven by the training RNG.
fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
