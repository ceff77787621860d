//! End-to-end semantic tracking: the frozen model, k-shot inference over a
//! pseudo-video, training clips with pseudo-reference propagation, the
//! adapter trainer and the adapters-only checkpoint.

mod checkpoint;
mod eval;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use eval::{annotate, evaluate, AnnotatedReference, EvalConfig, EvalReport};
pub use train::{
    clip_gradients, train, training_forward, Adam, ClipLoss, FrameLoss, LossRecord, TrainOutput, TrainerConfig,
};

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adapters::AdapterSet;
use crate::autodiff::{bce_term, dice_value, sigmoid};
use crate::data::Episode;
use crate::encoder::{hex, init_encoder, Encoder, EncoderConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::memory::{encode_memory, memory_attention, MaskDownsampler, MemoryAttentionWeights, MemoryBank, MemoryEntry, MemoryOrigin};
use crate::promptdec::{DecoderWeights, MaskPrediction, Prompt, PromptEncoder};
use crate::{Image, Mask};

pub const MEMORY_LAYERS: usize = 2;
pub const MEMORY_MLP_RATIO: usize = 2;
pub const DECODER_BLOCKS: usize = 2;
pub const DECODER_CHANNELS: usize = 8;
pub const DICE_EPS: f64 = 1.0;

/// Every frozen component. Adapters live outside, in an [`AdapterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub downsampler: MaskDownsampler,
    pub memory: MemoryAttentionWeights,
    pub prompt_encoder: PromptEncoder,
    pub decoder: DecoderWeights,
    seed: u64,
}

/// Hash identifying the frozen weights an adapter set was trained against.
pub fn config_fingerprint(config: &EncoderConfig, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(config.adapted_layer_indices().iter().map(|&i| i as u8).collect::<Vec<_>>());
    h.update(seed.to_le_bytes());
    h.update([MEMORY_LAYERS as u8, MEMORY_MLP_RATIO as u8, DECODER_BLOCKS as u8, DECODER_CHANNELS as u8]);
    hex(&h.finalize())
}

impl Model {
    /// Builds every frozen component from one seed.
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let encoder = init_encoder(config, seed)?;
        let d = config.embed_dim;
        let downsampler = MaskDownsampler::init(config.patch_size, d, seed.wrapping_add(1));
        let memory = MemoryAttentionWeights::init(d, MEMORY_LAYERS, config.num_heads, MEMORY_MLP_RATIO, seed.wrapping_add(2))?;
        let prompt_encoder = PromptEncoder::init(config.image_size, config.patch_size, d, seed.wrapping_add(3));
        let decoder = DecoderWeights::init(
            config.grid(),
            config.patch_size,
            d,
            DECODER_BLOCKS,
            config.num_heads,
            DECODER_CHANNELS,
            &prompt_encoder.positional,
            seed.wrapping_add(4),
        )?;
        Ok(Self {
            encoder,
            downsampler,
            memory,
            prompt_encoder,
            decoder,
            seed,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fingerprint(&self) -> String {
        config_fingerprint(self.config(), self.seed)
    }

    pub fn num_frozen_parameters(&self) -> usize {
        self.encoder.num_parameters()
            + self.downsampler.num_parameters()
            + self.memory.num_parameters()
            + self.prompt_encoder.num_parameters()
            + self.decoder.num_parameters()
    }

    /// SHA-256 over the bytes of every frozen parameter.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encoder.checksum().as_bytes());
        let mut feed = |s: &[f64]| {
            for v in s {
                h.update(v.to_le_bytes());
            }
        };
        for stage in &self.downsampler.stages {
            feed(stage.weight.as_slice().expect("standard layout"));
        }
        feed(self.downsampler.projection.as_slice().expect("standard layout"));
        self.memory.for_each_param(&mut feed);
        self.prompt_encoder.for_each_param(&mut feed);
        self.decoder.for_each_param(&mut feed);
        hex(&h.finalize())
    }

    pub fn encode(&self, image: &Image, adapters: Option<&AdapterSet>, frame_id: &str) -> Result<FeatureMap> {
        self.encoder.encode_image_with_id(image, adapters, frame_id)
    }

    /// Decodes a reference's own mask from its prompt. Mask prompts bypass
    /// the decoder.
    pub fn reference_mask_from_prompt(&self, features: &FeatureMap, prompt: &Prompt) -> Result<MaskPrediction> {
        if let Prompt::Mask(m) = prompt {
            prompt.validate(self.config().image_size)?;
            return Ok(MaskPrediction::from_mask(m));
        }
        let tokens = self.prompt_encoder.encode_prompt(prompt)?;
        self.decoder.decode_mask(features, Some(&tokens))
    }

    /// Memory entry for a prompted reference image.
    pub fn reference_entry(
        &self,
        image: &Image,
        prompt: &Prompt,
        adapters: Option<&AdapterSet>,
        frame_id: &str,
    ) -> Result<MemoryEntry> {
        let features = self.encode(image, adapters, frame_id)?;
        let mask = self.reference_mask_from_prompt(&features, prompt)?.binary_mask();
        encode_memory(&features, &mask, &self.downsampler, MemoryOrigin::Reference)
    }

    /// Target prediction conditioned on the bank.
    pub fn predict(&self, target: &FeatureMap, bank: &MemoryBank) -> Result<MaskPrediction> {
        let matched = memory_attention(target, bank, &self.memory)?;
        self.decoder.decode_mask(&matched, None)
    }
}

/// References followed by the target, treated as consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoVideo {
    pub references: Vec<(Image, Prompt)>,
    pub target: Image,
}

impl PseudoVideo {
    pub fn shots(&self) -> usize {
        self.references.len()
    }
}

pub fn build_pseudo_video(references: Vec<(Image, Prompt)>, target: Image) -> Result<PseudoVideo> {
    if references.is_empty() {
        return Err(Error::Input("a pseudo-video needs at least one reference".into()));
    }
    let shape = target.dim();
    if let Some((img, _)) = references.iter().find(|(img, _)| img.dim() != shape) {
        return Err(Error::Shape(format!("reference {:?} vs target {shape:?}", img.dim())));
    }
    Ok(PseudoVideo { references, target })
}

/// Encodes every reference into a fresh bank, then segments the target.
/// References never pass through memory attention.
pub fn segment_target(model: &Model, adapters: Option<&AdapterSet>, pv: &PseudoVideo) -> Result<MaskPrediction> {
    let mut bank = MemoryBank::new();
    for (k, (image, prompt)) in pv.references.iter().enumerate() {
        bank.append(model.reference_entry(image, prompt, adapters, &format!("ref{k}"))?);
    }
    let target = model.encode(&pv.target, adapters, "target")?;
    model.predict(&target, &bank)
}

/// One annotated reference and `J` supervised targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingClip {
    pub reference: (Image, Mask),
    pub targets: Vec<(Image, Mask)>,
    /// Geometric prompt for the auxiliary reference-decoding term, if used.
    pub prompt: Option<Prompt>,
}

/// Draws `J + 1` distinct samples: the first is the reference.
pub fn build_training_clip(episode: &Episode, frames: usize, seed: u64) -> Result<TrainingClip> {
    let idx = clip_indices(episode.samples.len(), frames, seed)?;
    let pick = |i: usize| (episode.samples[i].image.clone(), episode.samples[i].mask.clone());
    Ok(TrainingClip {
        reference: pick(idx[0]),
        targets: idx[1..].iter().map(|&i| pick(i)).collect(),
        prompt: None,
    })
}

pub(crate) fn clip_indices(n_samples: usize, frames: usize, seed: u64) -> Result<Vec<usize>> {
    if frames == 0 {
        return Err(Error::Input("a training clip needs at least one target frame".into()));
    }
    if n_samples < frames + 1 {
        return Err(Error::Input(format!(
            "episode has {n_samples} samples, a clip needs {}",
            frames + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_indices(&mut rng, n_samples, frames + 1).into_vec())
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean pixelwise binary cross-entropy of `sigmoid(logits)` against `target`.
pub fn bce_loss(logits: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    check_same_shape(logits, target)?;
    let n = logits.len().max(1) as f64;
    Ok(logits.iter().zip(target).map(|(&x, &y)| bce_term(x, y)).sum::<f64>() / n)
}

/// `1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)` with `eps = 1`.
pub fn dice_loss(probs: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    check_same_shape(probs, target)?;
    Ok(dice_value(probs, target, DICE_EPS))
}

/// Logits to probabilities.
pub fn probabilities(logits: &Array2<f64>) -> Array2<f64> {
    logits.mapv(sigmoid)
}
