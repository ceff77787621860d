//! Training loss with pseudo-reference propagation and the adapter trainer.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_indices, Model, TrainingClip, DICE_EPS};
use crate::adapters::{AdapterSet, AdapterWeights};
use crate::autodiff::{sigmoid, Graph, Var};
use crate::data::{derive_seed, synthesize_prompt, Episode};
use crate::error::{Error, Result};
use crate::promptdec::{Prompt, PromptKind, PromptTokens};
use crate::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub bce_weight: f64,
    pub dice_weight: f64,
    /// Target frames per clip (`J`).
    pub frames_per_clip: usize,
    pub seed: u64,
    /// Weight of the auxiliary term that decodes the reference's own mask
    /// from a random geometric prompt. Zero disables it.
    pub prompt_loss_weight: f64,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 5,
            bce_weight: 1.0,
            dice_weight: 1.0,
            frames_per_clip: 2,
            seed: 0,
            prompt_loss_weight: 0.0,
            max_steps: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.frames_per_clip == 0 {
            return Err(Error::Config("epochs and frames_per_clip must be positive".into()));
        }
        if self.bce_weight < 0.0 || self.dice_weight < 0.0 || self.prompt_loss_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one decoded frame and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameLoss {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipLoss {
    /// Mean of the per-frame totals plus the weighted prompt term.
    pub total: f64,
    pub frames: Vec<FrameLoss>,
    pub prompt: Option<FrameLoss>,
    /// Soft masks written into the bank as pseudo-references, one per
    /// target frame except the last.
    pub pseudo_masks: Vec<Mask>,
    pub logits: Vec<Array2<f64>>,
}

/// Frozen-side inputs of a clip: cached prefix activations and
/// downsampled reference mask.
struct PreparedClip {
    reference_prefix: Array2<f64>,
    reference_mask_tokens: Array2<f64>,
    prompt: Option<(PromptTokens, Mask)>,
    targets: Vec<(Array2<f64>, Mask)>,
}

fn prepare(model: &Model, clip: &TrainingClip) -> Result<PreparedClip> {
    if clip.targets.is_empty() {
        return Err(Error::Input("training clip has no target frames".into()));
    }
    let size = model.config().image_size;
    for (_, m) in std::iter::once(&clip.reference).chain(&clip.targets) {
        if m.dim() != (size, size) {
            return Err(Error::Shape(format!("mask {:?} vs image size {size}", m.dim())));
        }
    }
    let prompt = match &clip.prompt {
        Some(Prompt::Mask(_)) | None => None,
        Some(p) => Some((model.prompt_encoder.encode_prompt(p)?, clip.reference.1.clone())),
    };
    Ok(PreparedClip {
        reference_prefix: model.encoder.encode_prefix(&clip.reference.0)?,
        reference_mask_tokens: model.downsampler.forward(&clip.reference.1),
        prompt,
        targets: clip
            .targets
            .iter()
            .map(|(img, m)| Ok((model.encoder.encode_prefix(img)?, m.clone())))
            .collect::<Result<_>>()?,
    })
}

fn column(m: &Mask) -> Array2<f64> {
    m.clone().into_shape_with_order((m.len(), 1)).expect("contiguous mask")
}

fn frame_terms(g: &Graph, logits: Var, target: &Mask, cfg: &TrainerConfig) -> (Var, FrameLoss) {
    let y = column(target);
    let bce = g.bce_with_logits(logits, &y);
    let dice = g.dice_with_logits(logits, &y, DICE_EPS);
    let total = g.add(g.scale(bce, cfg.bce_weight), g.scale(dice, cfg.dice_weight));
    let loss = FrameLoss {
        bce: g.scalar(bce),
        dice: g.scalar(dice),
        total: g.scalar(total),
    };
    (total, loss)
}

/// Records the clip loss on `g`. `pseudo_override` replaces the detached
/// soft masks that would otherwise be derived from the predictions.
fn clip_graph(
    model: &Model,
    g: &Graph,
    bound: Option<&crate::adapters::BoundAdapters>,
    clip: &PreparedClip,
    cfg: &TrainerConfig,
    pseudo_override: Option<&[Mask]>,
) -> Result<(Var, ClipLoss)> {
    let encoder = &model.encoder;
    let grid = (model.config().grid(), model.config().grid());
    let size = model.config().image_size;
    let n_frames = clip.targets.len();
    if let Some(o) = pseudo_override {
        if o.len() + 1 < n_frames {
            return Err(Error::Input(format!("{} override masks for {n_frames} frames", o.len())));
        }
    }

    let reference = encoder.encode_suffix(g, &clip.reference_prefix, bound);
    let mask_tokens = g.constant(clip.reference_mask_tokens.clone());
    let mut bank = vec![g.add(reference, mask_tokens)];
    let mut frame_vars = Vec::with_capacity(n_frames);
    let mut frames = Vec::with_capacity(n_frames);
    let mut pseudo_masks = Vec::new();
    let mut all_logits = Vec::with_capacity(n_frames);

    for (j, (prefix, target)) in clip.targets.iter().enumerate() {
        let features = encoder.encode_suffix(g, prefix, bound);
        let memory = if bank.len() == 1 { bank[0] } else { g.concat_rows(&bank) };
        let matched = crate::memory::memory_attention_graph(g, features, memory, &model.memory);
        let logits = model.decoder.decode_graph(g, matched, grid, None);
        let (total, loss) = frame_terms(g, logits, target, cfg);
        frame_vars.push(total);
        frames.push(loss);
        let pixel_logits = g.value(logits).clone().into_shape_with_order((size, size)).expect("pixel grid");
        if j + 1 < n_frames {
            let soft = match pseudo_override {
                Some(o) => o[j].clone(),
                None => pixel_logits.mapv(sigmoid),
            };
            let tokens = g.constant(model.downsampler.forward(&soft));
            bank.push(g.add(features, tokens));
            pseudo_masks.push(soft);
        }
        all_logits.push(pixel_logits);
    }

    let sum = frame_vars[1..].iter().fold(frame_vars[0], |acc, &v| g.add(acc, v));
    let mut total = g.scale(sum, 1.0 / n_frames as f64);
    let mut prompt = None;
    if let Some((tokens, mask)) = &clip.prompt {
        let logits = model.decoder.decode_graph(g, reference, grid, Some(tokens));
        let (term, loss) = frame_terms(g, logits, mask, cfg);
        total = g.add(total, g.scale(term, cfg.prompt_loss_weight));
        prompt = Some(loss);
    }
    let loss = ClipLoss {
        total: g.scalar(total),
        frames,
        prompt,
        pseudo_masks,
        logits: all_logits,
    };
    Ok((total, loss))
}

/// Forward pass of the training objective without gradients.
pub fn training_forward(
    model: &Model,
    adapters: Option<&AdapterSet>,
    clip: &TrainingClip,
    cfg: &TrainerConfig,
) -> Result<ClipLoss> {
    if let Some(a) = adapters {
        a.check_compatible(model.config())?;
    }
    let prepared = prepare(model, clip)?;
    let g = Graph::new();
    let bound = adapters.map(|a| a.bind(&g, false));
    Ok(clip_graph(model, &g, bound.as_ref(), &prepared, cfg, None)?.1)
}

/// Loss and gradient with respect to every adapter scalar, returned in the
/// shape of an [`AdapterSet`].
pub fn clip_gradients(
    model: &Model,
    adapters: &AdapterSet,
    clip: &TrainingClip,
    cfg: &TrainerConfig,
    pseudo_override: Option<&[Mask]>,
) -> Result<(ClipLoss, AdapterSet)> {
    adapters.check_compatible(model.config())?;
    let prepared = prepare(model, clip)?;
    gradients_prepared(model, adapters, &prepared, cfg, pseudo_override)
}

fn gradients_prepared(
    model: &Model,
    adapters: &AdapterSet,
    prepared: &PreparedClip,
    cfg: &TrainerConfig,
    pseudo_override: Option<&[Mask]>,
) -> Result<(ClipLoss, AdapterSet)> {
    let g = Graph::new();
    let bound = adapters.bind(&g, true);
    let (total, loss) = clip_graph(model, &g, Some(&bound), prepared, cfg, pseudo_override)?;
    let grads = g.backward(total);
    let entries: Vec<AdapterWeights> = bound
        .vars()
        .map(|(layer, down, up)| {
            let w = adapters.get(layer).expect("bound layer");
            AdapterWeights {
                w_down: grads.get(down).cloned().unwrap_or_else(|| Array2::zeros(w.w_down.dim())),
                w_up: grads.get(up).cloned().unwrap_or_else(|| Array2::zeros(w.w_up.dim())),
                kind: w.kind,
                layer_index: layer,
            }
        })
        .collect();
    let grad = AdapterSet::from_entries(adapters.kind(), adapters.bottleneck_dim(), adapters.embed_dim(), entries)?;
    Ok((loss, grad))
}

/// Adam with bias correction over every adapter matrix.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, n_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut AdapterSet, grads: &AdapterSet) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let mut offset = 0;
        for (p, g) in params.layers_mut().zip(grads.layers()) {
            for (pm, gm) in [(&mut p.w_down, &g.w_down), (&mut p.w_up, &g.w_up)] {
                let ps = pm.as_slice_mut().expect("standard layout");
                let gs = gm.as_slice().expect("standard layout");
                for (i, (w, &gr)) in ps.iter_mut().zip(gs).enumerate() {
                    let k = offset + i;
                    self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gr;
                    self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gr * gr;
                    let mhat = self.m[k] / bc1;
                    let vhat = self.v[k] / bc2;
                    *w -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
                }
                offset += ps.len();
            }
        }
    }
}

/// One row of the loss curve; `bce` and `dice` are means over frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub adapters: AdapterSet,
    pub curve: Vec<LossRecord>,
}

impl TrainOutput {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,total,bce,dice\n");
        for r in &self.curve {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.total, r.bce, r.dice));
        }
        s
    }

    pub fn write_curve(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| crate::Error::io(path, e))?;
        f.write_all(self.curve_csv().as_bytes()).map_err(|e| crate::Error::io(path, e))
    }
}

const PROMPT_KINDS: [PromptKind; 3] = [PromptKind::Point, PromptKind::Box, PromptKind::Scribble];

/// Trains `adapters` on clips drawn from `episodes`, one clip per episode per
/// epoch in shuffled order. Frozen components are only read.
pub fn train(model: &Model, episodes: &[Episode], adapters: AdapterSet, cfg: &TrainerConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::Input("training needs at least one episode".into()));
    }
    adapters.check_compatible(model.config())?;
    let mut adapters = adapters;
    let mut opt = Adam::new(cfg.learning_rate, adapters.num_parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prefixes: HashMap<(usize, usize), Array2<f64>> = HashMap::new();
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    'outer: for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &e in &order {
            if curve.len() >= max_steps {
                break 'outer;
            }
            let episode = &episodes[e];
            let idx = clip_indices(episode.samples.len(), cfg.frames_per_clip, rng.random())?;
            for &i in &idx {
                if let std::collections::hash_map::Entry::Vacant(slot) = prefixes.entry((e, i)) {
                    slot.insert(model.encoder.encode_prefix(&episode.samples[i].image)?);
                }
            }
            let reference = &episode.samples[idx[0]];
            let prompt = if cfg.prompt_loss_weight > 0.0 {
                let kind = PROMPT_KINDS[rng.random_range(0..PROMPT_KINDS.len())];
                let p = synthesize_prompt(&reference.mask, kind, derive_seed(&[cfg.seed, curve.len() as u64]))?;
                Some((model.prompt_encoder.encode_prompt(&p)?, reference.mask.clone()))
            } else {
                None
            };
            let prepared = PreparedClip {
                reference_prefix: prefixes[&(e, idx[0])].clone(),
                reference_mask_tokens: model.downsampler.forward(&reference.mask),
                prompt,
                targets: idx[1..]
                    .iter()
                    .map(|&i| (prefixes[&(e, i)].clone(), episode.samples[i].mask.clone()))
                    .collect(),
            };
            let (loss, grads) = gradients_prepared(model, &adapters, &prepared, cfg, None)?;
            opt.step(&mut adapters, &grads);
            let n = loss.frames.len() as f64;
            let record = LossRecord {
                step: curve.len(),
                total: loss.total,
                bce: loss.frames.iter().map(|f| f.bce).sum::<f64>() / n,
                dice: loss.frames.iter().map(|f| f.dice).sum::<f64>() / n,
            };
            log::debug!("step {} loss {:.5}", record.step, record.total);
            curve.push(record);
        }
    }
    Ok(TrainOutput { adapters, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapters, AdapterKind};
    use crate::data::generate_episode_with;
    use crate::data::GeneratorConfig;
    use crate::encoder::EncoderConfig;
    use crate::pipeline::build_training_clip;

    fn setup() -> (Model, AdapterSet, Vec<Episode>) {
        let c = EncoderConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            mlp_ratio: 2,
            adapted_layers: vec![],
        };
        let model = Model::new(&c, 7).unwrap();
        let adapters = init_adapters(&c, AdapterKind::AdaptFormer, 4, 1).unwrap();
        let g = GeneratorConfig {
            resolution: 16,
            max_targets: 1,
            max_distractors: 1,
        };
        let eps = (0..2).map(|k| generate_episode_with(k, 4, 3, true, &g).unwrap()).collect();
        (model, adapters, eps)
    }

    #[test]
    fn single_frame_has_no_pseudo_reference() {
        let (model, adapters, eps) = setup();
        let clip = build_training_clip(&eps[0], 1, 0).unwrap();
        let out = training_forward(&model, Some(&adapters), &clip, &TrainerConfig::default()).unwrap();
        assert_eq!(out.frames.len(), 1);
        assert!(out.pseudo_masks.is_empty());
        assert!((out.total - out.frames[0].total).abs() < 1e-15);
    }

    #[test]
    fn loss_decomposes_over_frames() {
        let (model, adapters, eps) = setup();
        let cfg = TrainerConfig {
            bce_weight: 0.7,
            dice_weight: 1.3,
            ..TrainerConfig::default()
        };
        let clip = build_training_clip(&eps[1], 2, 4).unwrap();
        let out = training_forward(&model, Some(&adapters), &clip, &cfg).unwrap();
        let recomputed: f64 = out.frames.iter().map(|f| 0.7 * f.bce + 1.3 * f.dice).sum::<f64>() / 2.0;
        assert!((out.total - recomputed).abs() < 1e-12);
        assert_eq!(out.pseudo_masks.len(), 1);
        assert!(out.pseudo_masks[0].iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn training_is_deterministic_and_leaves_model_alone() {
        let (model, adapters, eps) = setup();
        let before = model.frozen_checksum();
        let cfg = TrainerConfig {
            learning_rate: 1e-2,
            epochs: 2,
            ..TrainerConfig::default()
        };
        let a = train(&model, &eps, adapters.clone(), &cfg).unwrap();
        let b = train(&model, &eps, adapters.clone(), &cfg).unwrap();
        assert_eq!(a.adapters, b.adapters);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 4);
        assert_ne!(a.adapters, adapters);
        assert_eq!(model.frozen_checksum(), before);
        assert!(a.curve_csv().starts_with("step,total,bce,dice\n0,"));
        assert!(matches!(train(&model, &[], adapters, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn prompt_term_is_added() {
        let (model, adapters, eps) = setup();
        let mut clip = build_training_clip(&eps[0], 1, 0).unwrap();
        clip.prompt = Some(synthesize_prompt(&clip.reference.1, PromptKind::Box, 0).unwrap());
        let cfg = TrainerConfig {
            prompt_loss_weight: 0.5,
            ..TrainerConfig::default()
        };
        let out = training_forward(&model, Some(&adapters), &clip, &cfg).unwrap();
        let p = out.prompt.unwrap();
        assert!((out.total - out.frames[0].total - 0.5 * p.total).abs() < 1e-12);
    }
}
