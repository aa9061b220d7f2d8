//! The PrimNet embedding network: four grouped-convolution stages, each
//! followed by a channel shuffle and PReLU, then a fully connected projection
//! to an L2-normalized embedding.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::{CROP_HEIGHT, CROP_WIDTH};
use crate::embedding::Embedding;
use crate::nnet::{
    am_softmax_loss, ChannelShuffle, Conv2d, ConvSpec, L2Normalize, Layer, Linear, LossConfig, Network, NnError,
    PRelu, Sgd, Tensor,
};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PRIM";
pub const WEIGHTS_VERSION: u16 = 1;

const PIXEL_MEAN: f32 = 127.5;
const PIXEL_SCALE: f32 = 128.0;
const INITIAL_SLOPE: f32 = 0.25;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("expected a {expected_w}x{expected_h} crop, got {w}x{h}")]
    CropSize {
        w: u32,
        h: u32,
        expected_w: u32,
        expected_h: u32,
    },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("weight file format error: {0}")]
    Format(String),
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl StageSpec {
    pub const fn new(out_channels: usize, groups: usize) -> Self {
        Self {
            out_channels,
            kernel: 3,
            stride: 2,
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSettings {
    pub scale: f32,
    pub margin: f32,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.35,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    /// Fractions of the run after which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f32>,
    pub lr_decay: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            lr_milestones: vec![0.6, 0.85],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let progress = epoch as f32 / self.epochs.max(1) as f32;
        let passed = self.lr_milestones.iter().filter(|&&m| progress >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrimNetConfig {
    /// `(channels, height, width)`.
    pub input: [usize; 3],
    pub stages: Vec<StageSpec>,
    pub embed_dim: usize,
    pub loss: LossSettings,
    pub train: TrainConfig,
}

impl Default for PrimNetConfig {
    fn default() -> Self {
        Self {
            input: [3, CROP_HEIGHT as usize, CROP_WIDTH as usize],
            stages: vec![
                StageSpec::new(32, 1),
                StageSpec::new(128, 2),
                StageSpec::new(256, 4),
                StageSpec::new(80, 4),
            ],
            embed_dim: 256,
            loss: LossSettings::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct ArchitectureKey<'a> {
    input: [usize; 3],
    stages: &'a [StageSpec],
    embed_dim: usize,
}

impl PrimNetConfig {
    /// Conv specs per stage plus the flattened feature size entering the
    /// projection layer.
    fn plan(&self) -> Result<(Vec<ConvSpec>, usize), ModelError> {
        if self.stages.len() != 4 {
            return Err(ModelError::Config(format!(
                "expected exactly 4 convolution stages, got {}",
                self.stages.len()
            )));
        }
        if self.embed_dim == 0 {
            return Err(ModelError::Config("embed_dim must be positive".into()));
        }
        let [mut c, mut h, mut w] = self.input;
        let mut specs = Vec::with_capacity(4);
        for (i, st) in self.stages.iter().enumerate() {
            if st.kernel % 2 == 0 {
                return Err(ModelError::Config(format!("stage {i}: kernel must be odd")));
            }
            let spec = ConvSpec {
                in_channels: c,
                out_channels: st.out_channels,
                kernel: [st.kernel, st.kernel],
                stride: st.stride,
                padding: st.kernel / 2,
                groups: st.groups,
            };
            spec.validate()
                .map_err(|e| ModelError::Config(format!("stage {i}: {e}")))?;
            (h, w) = spec
                .output_hw(h, w)
                .map_err(|e| ModelError::Config(format!("stage {i}: {e}")))?;
            c = st.out_channels;
            specs.push(spec);
        }
        Ok((specs, c * h * w))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.plan().map(|_| ())
    }

    /// Hash of the architecture fields (input, stages, embedding size).
    pub fn architecture_hash(&self) -> u64 {
        let key = ArchitectureKey {
            input: self.input,
            stages: &self.stages,
            embed_dim: self.embed_dim,
        };
        let digest = Sha256::digest(serde_json::to_vec(&key).expect("serializable"));
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Closed-form trainable parameter count: conv weights and biases, PReLU
    /// slopes, projection weights and bias.
    pub fn expected_param_count(&self) -> Result<usize, ModelError> {
        let (specs, flat) = self.plan()?;
        let conv: usize = specs.iter().map(|s| s.param_count() + s.out_channels).sum();
        Ok(conv + flat * self.embed_dim + self.embed_dim)
    }
}

/// Serialized network parameters in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config_hash: u64,
    pub tensors: Vec<Vec<f32>>,
}

impl ModelWeights {
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.len() as u32).to_le_bytes())?;
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut cur = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8], ModelError> {
            if cur.len() < n {
                return Err(ModelError::Format(format!("truncated file while reading {what}")));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4, "magic")? != WEIGHTS_MAGIC {
            return Err(ModelError::Format("bad magic, not a PRIM weight file".into()));
        }
        let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
        if version != WEIGHTS_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let config_hash = u64::from_le_bytes(take(8, "config hash")?.try_into().unwrap());
        let count = u32::from_le_bytes(take(4, "tensor count")?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let len = u32::from_le_bytes(take(4, "tensor length")?.try_into().unwrap()) as usize;
            let raw = take(len * 4, &format!("tensor {i}"))?;
            tensors.push(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            );
        }
        if !cur.is_empty() {
            return Err(ModelError::Format(format!("{} trailing bytes", cur.len())));
        }
        Ok(Self { config_hash, tensors })
    }
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    weights.write_to(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    ModelWeights::from_bytes(&bytes)
}

#[derive(Clone, Debug)]
pub struct PrimNet {
    config: PrimNetConfig,
    network: Network<f32>,
}

/// Builds the network described by `cfg` with seeded He-normal weights.
pub fn build_primnet(cfg: &PrimNetConfig) -> Result<PrimNet, ModelError> {
    let (specs, flat) = cfg.plan()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.train.seed);
    let mut layers = Vec::new();
    for spec in specs {
        let mut conv = Conv2d::zeros(spec)?;
        conv.init_he(&mut rng);
        layers.push(Layer::Conv(conv));
        if spec.groups > 1 {
            layers.push(Layer::Shuffle(ChannelShuffle { groups: spec.groups }));
        }
        layers.push(Layer::PRelu(PRelu::new(spec.out_channels, INITIAL_SLOPE)));
    }
    let mut fc = Linear::zeros(flat, cfg.embed_dim);
    fc.init_he(&mut rng);
    layers.push(Layer::Linear(fc));
    layers.push(Layer::L2Normalize(L2Normalize));
    Ok(PrimNet {
        config: cfg.clone(),
        network: Network::new(layers),
    })
}

pub fn count_params(model: &PrimNet) -> usize {
    model.network.param_count()
}

/// Converts an RGB crop to a normalized `(1, 3, h, w)` tensor.
pub fn crop_to_tensor(crop: &RgbImage) -> Tensor<f32> {
    let (w, h) = (crop.width() as usize, crop.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in crop.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = (f32::from(px[c]) - PIXEL_MEAN) / PIXEL_SCALE;
        }
    }
    Tensor::from_vec([1, 3, h, w], data).expect("consistent shape")
}

impl PrimNet {
    pub fn config(&self) -> &PrimNetConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<f32> {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.network
    }

    fn check_crop(&self, crop: &RgbImage) -> Result<(), ModelError> {
        let [_, h, w] = self.config.input;
        if crop.width() as usize != w || crop.height() as usize != h {
            return Err(ModelError::CropSize {
                w: crop.width(),
                h: crop.height(),
                expected_w: w as u32,
                expected_h: h as u32,
            });
        }
        Ok(())
    }

    pub fn forward_embed(&self, crop: &RgbImage) -> Result<Embedding, ModelError> {
        self.check_crop(crop)?;
        let out = self.network.forward(&crop_to_tensor(crop))?;
        Embedding::from_unit(out.into_vec()).map_err(|e| ModelError::Nn(NnError::State(e.to_string())))
    }

    pub fn weights(&self) -> ModelWeights {
        ModelWeights {
            config_hash: self.config.architecture_hash(),
            tensors: self.network.params().into_iter().map(<[f32]>::to_vec).collect(),
        }
    }

    /// Rebuilds a network for `cfg` and installs `weights`, checking the
    /// architecture hash and every tensor length.
    pub fn from_weights(cfg: &PrimNetConfig, weights: &ModelWeights) -> Result<Self, ModelError> {
        let mut model = build_primnet(cfg)?;
        if weights.config_hash != cfg.architecture_hash() {
            return Err(ModelError::Format(format!(
                "weights were saved for architecture {:016x}, config is {:016x}",
                weights.config_hash,
                cfg.architecture_hash()
            )));
        }
        let mut params = model.network.params_mut();
        if params.len() != weights.tensors.len() {
            return Err(ModelError::Format(format!(
                "expected {} tensors, file has {}",
                params.len(),
                weights.tensors.len()
            )));
        }
        for (i, (dst, src)) in params.iter_mut().zip(&weights.tensors).enumerate() {
            if dst.len() != src.len() {
                return Err(ModelError::Format(format!(
                    "tensor {i}: expected {} values, file has {}",
                    dst.len(),
                    src.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(model)
    }
}

/// One aligned crop with its individual's label.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub crop: RgbImage,
    pub label: String,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub weights: ModelWeights,
    /// Mean loss over the training set before the first update.
    pub initial_loss: f32,
    /// Mean loss of every epoch, accumulated while training.
    pub epoch_losses: Vec<f32>,
}

fn training_stream(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x7472_6169_6e5f_7275)
}

/// Trains `model` with the additive-margin softmax head. The head's class
/// weights are training-only state and are discarded afterwards.
pub fn train(model: &mut PrimNet, dataset: &[TrainingSample], cfg: &TrainConfig) -> Result<TrainReport, ModelError> {
    let mut class_index = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for s in dataset {
        *counts.entry(s.label.as_str()).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(ModelError::Dataset(format!("need at least 2 classes, got {}", counts.len())));
    }
    if let Some((label, n)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(ModelError::Dataset(format!("class {label} has {n} image(s), need at least 2")));
    }
    for (i, label) in counts.keys().enumerate() {
        class_index.insert(*label, i);
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    for s in dataset {
        model.check_crop(&s.crop)?;
    }
    let sample_len = model.config.input.iter().product::<usize>();
    let inputs: Vec<f32> = dataset.iter().flat_map(|s| crop_to_tensor(&s.crop).into_vec()).collect();
    let labels: Vec<usize> = dataset.iter().map(|s| class_index[s.label.as_str()]).collect();
    let [c, h, w] = model.config.input;

    let mut rng = training_stream(cfg.seed);
    let loss_settings = model.config.loss;
    let mut head = LossConfig::random(
        loss_settings.scale,
        loss_settings.margin,
        class_index.len(),
        model.config.embed_dim,
        &mut rng,
    )?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut head_opt = Sgd::new(cfg.lr, cfg.momentum, 0.0);

    let batch_of = |idx: &[usize]| -> Result<(Tensor<f32>, Vec<usize>), ModelError> {
        let mut data = Vec::with_capacity(idx.len() * sample_len);
        for &i in idx {
            data.extend_from_slice(&inputs[i * sample_len..][..sample_len]);
        }
        Ok((Tensor::from_vec([idx.len(), c, h, w], data)?, idx.iter().map(|&i| labels[i]).collect()))
    };

    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut initial = 0.0f64;
    for chunk in all.chunks(cfg.batch_size) {
        let (x, y) = batch_of(chunk)?;
        let emb = model.network.forward(&x)?;
        initial += f64::from(am_softmax_loss(emb.data(), &y, &head)?.loss) * chunk.len() as f64;
    }
    let initial_loss = (initial / dataset.len() as f64) as f32;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order = all;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt.lr = lr;
        head_opt.lr = lr;
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = batch_of(chunk)?;
            let emb = model.network.forward_train(&x)?;
            let out = am_softmax_loss(emb.data(), &y, &head)?;
            if !out.loss.is_finite() {
                return Err(ModelError::Diverged(epoch));
            }
            total += f64::from(out.loss) * chunk.len() as f64;
            let grads = model
                .network
                .backward(&Tensor::from_vec(emb.shape(), out.grad_embeddings)?)?;
            opt.step(model.network.params_mut(), &grads)?;
            head_opt.step(vec![&mut head.class_weights], &[out.grad_weights])?;
            head.renormalize()?;
        }
        let mean = (total / dataset.len() as f64) as f32;
        tracing::debug!(epoch, lr, loss = mean, "epoch finished");
        if !mean.is_finite() {
            return Err(ModelError::Diverged(epoch));
        }
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        weights: model.weights(),
        initial_loss,
        epoch_losses,
    })
}
