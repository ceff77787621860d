//! Prompt encoding and the two-way attention mask decoder.
//!
//! Geometric prompts become sparse tokens: a random-Fourier positional code of
//! the pixel location plus a learned type embedding. Boxes contribute their two
//! corners, scribbles at most [`MAX_SCRIBBLE_TOKENS`] foreground points. Mask
//! prompts become a dense per-token embedding. The decoder alternates
//! token-to-image and image-to-token attention, upsamples the refined image
//! tokens to full resolution and takes a dot product with a hypernetwork
//! projection of the two output tokens.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{AttentionProjections, FeatureMap, LayerNormWeights};
use crate::error::{Error, Result};
use crate::init::truncated_normal;
use crate::Mask;

pub const MAX_SCRIBBLE_TOKENS: usize = 16;
/// Logit magnitude used when a mask prompt bypasses decoding.
pub const MASK_PROMPT_LOGIT: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Mask,
    Point,
    Box,
    Scribble,
}

impl PromptKind {
    pub const ALL: [PromptKind; 4] = [PromptKind::Mask, PromptKind::Point, PromptKind::Box, PromptKind::Scribble];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Mask => "mask",
            PromptKind::Point => "point",
            PromptKind::Box => "box",
            PromptKind::Scribble => "scribble",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(PromptKind::Mask),
            "point" => Ok(PromptKind::Point),
            "box" => Ok(PromptKind::Box),
            "scribble" => Ok(PromptKind::Scribble),
            other => Err(Error::Input(format!("unknown prompt kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointLabel {
    Foreground,
    Background,
}

/// Pixel coordinate, `x` along columns and `y` along rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

/// Reference annotation.
#[derive(Clone, Debug, PartialEq)]
pub enum Prompt {
    Mask(Mask),
    Points(Vec<(Pixel, PointLabel)>),
    /// Inclusive pixel bounds.
    Box { x_min: usize, y_min: usize, x_max: usize, y_max: usize },
    Scribble(Vec<Pixel>),
}

impl Prompt {
    pub fn kind(&self) -> PromptKind {
        match self {
            Prompt::Mask(_) => PromptKind::Mask,
            Prompt::Points(_) => PromptKind::Point,
            Prompt::Box { .. } => PromptKind::Box,
            Prompt::Scribble(_) => PromptKind::Scribble,
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        let in_bounds = |p: &Pixel| {
            if p.x >= image_size || p.y >= image_size {
                Err(Error::Input(format!(
                    "prompt coordinate ({}, {}) outside a {image_size}x{image_size} image",
                    p.x, p.y
                )))
            } else {
                Ok(())
            }
        };
        match self {
            Prompt::Mask(m) => {
                if m.dim() != (image_size, image_size) {
                    return Err(Error::Shape(format!("mask prompt {:?} vs image {image_size}", m.dim())));
                }
                if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Input("mask prompt must be binary".into()));
                }
            }
            Prompt::Points(points) => {
                if points.is_empty() {
                    return Err(Error::Input("point prompt without points".into()));
                }
                points.iter().try_for_each(|(p, _)| in_bounds(p))?;
            }
            Prompt::Box { x_min, y_min, x_max, y_max } => {
                in_bounds(&Pixel { x: *x_min, y: *y_min })?;
                in_bounds(&Pixel { x: *x_max, y: *y_max })?;
                if x_min > x_max || y_min > y_max {
                    return Err(Error::Input("degenerate box".into()));
                }
            }
            Prompt::Scribble(points) => {
                if points.is_empty() {
                    return Err(Error::Input("empty scribble".into()));
                }
                points.iter().try_for_each(in_bounds)?;
            }
        }
        Ok(())
    }
}

/// Encoded prompt: sparse tokens plus an optional dense per-token embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTokens {
    pub sparse: Array2<f64>,
    pub dense: Option<Array2<f64>>,
}

impl PromptTokens {
    pub fn num_sparse(&self) -> usize {
        self.sparse.nrows()
    }
}

/// Decoded logits and their 0-threshold binarization.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub logits: Array2<f64>,
    pub binary: Array2<bool>,
}

impl MaskPrediction {
    pub fn from_logits(logits: Array2<f64>) -> Self {
        let binary = logits.mapv(|v| v > 0.0);
        Self { logits, binary }
    }

    /// Mask prompt passed through as saturated logits.
    pub fn from_mask(mask: &Mask) -> Self {
        Self::from_logits(mask.mapv(|v| if v > 0.5 { MASK_PROMPT_LOGIT } else { -MASK_PROMPT_LOGIT }))
    }

    pub fn binary_mask(&self) -> Mask {
        self.binary.mapv(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn probabilities(&self) -> Mask {
        self.logits.mapv(crate::autodiff::sigmoid)
    }
}

/// Random-Fourier positional code shared by prompts and image tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalCode {
    /// `(2, d/2)`
    pub frequencies: Array2<f64>,
}

impl PositionalCode {
    fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            frequencies: truncated_normal(rng, (2, d / 2), 1.0),
        }
    }

    /// Code for normalized coordinates in `[0, 1]`.
    pub fn encode(&self, x: f64, y: f64) -> Array1<f64> {
        let half = self.frequencies.ncols();
        let mut out = Array1::zeros(2 * half);
        let (cx, cy) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        for j in 0..half {
            let a = 2.0 * std::f64::consts::PI * (cx * self.frequencies[[0, j]] + cy * self.frequencies[[1, j]]);
            out[j] = a.sin();
            out[half + j] = a.cos();
        }
        out
    }

    /// Codes for every token center of a `grid x grid` layout.
    pub fn grid(&self, grid: usize) -> Array2<f64> {
        let d = 2 * self.frequencies.ncols();
        let mut out = Array2::zeros((grid * grid, d));
        for ty in 0..grid {
            for tx in 0..grid {
                let code = self.encode((tx as f64 + 0.5) / grid as f64, (ty as f64 + 0.5) / grid as f64);
                out.row_mut(ty * grid + tx).assign(&code);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoder {
    pub image_size: usize,
    pub patch_size: usize,
    pub positional: PositionalCode,
    pub foreground: Array1<f64>,
    pub background: Array1<f64>,
    pub box_corners: [Array1<f64>; 2],
    pub mask_inside: Array1<f64>,
    pub mask_outside: Array1<f64>,
}

fn row(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    truncated_normal(rng, (1, d), 1.0).row(0).to_owned()
}

impl PromptEncoder {
    pub fn init(image_size: usize, patch_size: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positional = PositionalCode::init(&mut rng, embed_dim);
        Self {
            image_size,
            patch_size,
            positional,
            foreground: row(&mut rng, embed_dim),
            background: row(&mut rng, embed_dim),
            box_corners: [row(&mut rng, embed_dim), row(&mut rng, embed_dim)],
            mask_inside: row(&mut rng, embed_dim),
            mask_outside: row(&mut rng, embed_dim),
        }
    }

    fn point_code(&self, p: Pixel) -> Array1<f64> {
        let s = self.image_size as f64;
        self.positional.encode((p.x as f64 + 0.5) / s, (p.y as f64 + 0.5) / s)
    }

    pub fn encode_prompt(&self, prompt: &Prompt) -> Result<PromptTokens> {
        prompt.validate(self.image_size)?;
        let d = self.foreground.len();
        let stack = |rows: Vec<Array1<f64>>| {
            let mut out = Array2::zeros((rows.len(), d));
            for (i, r) in rows.into_iter().enumerate() {
                out.row_mut(i).assign(&r);
            }
            out
        };
        let tokens = match prompt {
            Prompt::Mask(mask) => {
                let grid = self.image_size / self.patch_size;
                let p = self.patch_size;
                let mut dense = Array2::zeros((grid * grid, d));
                for ty in 0..grid {
                    for tx in 0..grid {
                        let cover = mask
                            .slice(ndarray::s![ty * p..(ty + 1) * p, tx * p..(tx + 1) * p])
                            .mean()
                            .unwrap_or(0.0);
                        let e = &self.mask_inside * cover + &self.mask_outside * (1.0 - cover);
                        dense.row_mut(ty * grid + tx).assign(&e);
                    }
                }
                PromptTokens {
                    sparse: Array2::zeros((0, d)),
                    dense: Some(dense),
                }
            }
            Prompt::Points(points) => PromptTokens {
                sparse: stack(
                    points
                        .iter()
                        .map(|(p, label)| {
                            let e = match label {
                                PointLabel::Foreground => &self.foreground,
                                PointLabel::Background => &self.background,
                            };
                            self.point_code(*p) + e
                        })
                        .collect(),
                ),
                dense: None,
            },
            Prompt::Box { x_min, y_min, x_max, y_max } => PromptTokens {
                sparse: stack(vec![
                    self.point_code(Pixel { x: *x_min, y: *y_min }) + &self.box_corners[0],
                    self.point_code(Pixel { x: *x_max, y: *y_max }) + &self.box_corners[1],
                ]),
                dense: None,
            },
            Prompt::Scribble(points) => PromptTokens {
                sparse: stack(
                    subsample(points, MAX_SCRIBBLE_TOKENS)
                        .into_iter()
                        .map(|p| self.point_code(p) + &self.foreground)
                        .collect(),
                ),
                dense: None,
            },
        };
        Ok(tokens)
    }

    pub fn num_parameters(&self) -> usize {
        self.positional.frequencies.len() + 6 * self.foreground.len()
    }

    pub(crate) fn for_each_param(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.positional.frequencies.as_slice().unwrap());
        for e in [
            &self.foreground,
            &self.background,
            &self.box_corners[0],
            &self.box_corners[1],
            &self.mask_inside,
            &self.mask_outside,
        ] {
            f(e.as_slice().unwrap());
        }
    }
}

/// Evenly spaced subsequence of at most `max` points.
fn subsample(points: &[Pixel], max: usize) -> Vec<Pixel> {
    if points.len() <= max {
        return points.to_vec();
    }
    (0..max).map(|i| points[i * points.len() / max]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoWayBlock {
    pub self_attn: AttentionProjections,
    pub norm1: LayerNormWeights,
    pub token_to_image: AttentionProjections,
    pub norm2: LayerNormWeights,
    pub mlp1: Array2<f64>,
    pub mlp2: Array2<f64>,
    pub norm3: LayerNormWeights,
    pub image_to_token: AttentionProjections,
    pub norm4: LayerNormWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    pub output_tokens: Array2<f64>,
    pub blocks: Vec<TwoWayBlock>,
    pub final_attn: AttentionProjections,
    pub final_norm: LayerNormWeights,
    /// `(d, patch*patch*channels)`
    pub upscale: Array2<f64>,
    pub hyper1: Array2<f64>,
    /// `(d, channels)`
    pub hyper2: Array2<f64>,
    pub image_pe: Array2<f64>,
    pub num_heads: usize,
    pub patch_size: usize,
    pub channels: usize,
}

pub const NUM_OUTPUT_TOKENS: usize = 2;

fn attend(g: &Graph, q_in: Var, k_in: Var, v_in: Var, w: &AttentionProjections, heads: usize) -> Var {
    let q = g.linear(q_in, &w.w_q);
    let k = g.linear(k_in, &w.w_k);
    let v = g.linear(v_in, &w.w_v);
    let a = g.attention(q, k, v, heads);
    g.linear(a, &w.w_o)
}

impl DecoderWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        grid: usize,
        patch_size: usize,
        embed_dim: usize,
        num_blocks: usize,
        num_heads: usize,
        channels: usize,
        positional: &PositionalCode,
        seed: u64,
    ) -> Result<Self> {
        if num_heads == 0 || !embed_dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "decoder width {embed_dim} not divisible by {num_heads} heads"
            )));
        }
        let d = embed_dim;
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..num_blocks)
            .map(|_| TwoWayBlock {
                self_attn: AttentionProjections::init(&mut rng, d, std),
                norm1: LayerNormWeights::identity(d),
                token_to_image: AttentionProjections::init(&mut rng, d, std),
                norm2: LayerNormWeights::identity(d),
                mlp1: truncated_normal(&mut rng, (d, 2 * d), std),
                mlp2: truncated_normal(&mut rng, (2 * d, d), 1.0 / ((2 * d) as f64).sqrt()),
                norm3: LayerNormWeights::identity(d),
                image_to_token: AttentionProjections::init(&mut rng, d, std),
                norm4: LayerNormWeights::identity(d),
            })
            .collect();
        Ok(Self {
            output_tokens: truncated_normal(&mut rng, (NUM_OUTPUT_TOKENS, d), 1.0),
            blocks,
            final_attn: AttentionProjections::init(&mut rng, d, std),
            final_norm: LayerNormWeights::identity(d),
            upscale: truncated_normal(&mut rng, (d, patch_size * patch_size * channels), std),
            hyper1: truncated_normal(&mut rng, (d, d), std),
            hyper2: truncated_normal(&mut rng, (d, channels), std),
            image_pe: positional.grid(grid),
            num_heads,
            patch_size,
            channels,
        })
    }

    /// Decodes `(h*w, 1)` logits at full image resolution, rows in raster
    /// order.
    pub fn decode_graph(&self, g: &Graph, features: Var, grid: (usize, usize), prompt: Option<&PromptTokens>) -> Var {
        let heads = self.num_heads;
        let mut tokens = g.constant(self.output_tokens.clone());
        let mut image = features;
        if let Some(p) = prompt {
            if p.sparse.nrows() > 0 {
                let sparse = g.constant(p.sparse.clone());
                tokens = g.concat_rows(&[tokens, sparse]);
            }
            if let Some(dense) = &p.dense {
                let dense = g.constant(dense.clone());
                image = g.add(image, dense);
            }
        }
        let pe = g.constant(self.image_pe.clone());
        for b in &self.blocks {
            let a = attend(g, tokens, tokens, tokens, &b.self_attn, heads);
            tokens = b.norm1.apply(g, g.add(tokens, a));
            let keys = g.add(image, pe);
            let a = attend(g, tokens, keys, image, &b.token_to_image, heads);
            tokens = b.norm2.apply(g, g.add(tokens, a));
            let m = g.linear(tokens, &b.mlp1);
            let m = g.gelu(m);
            let m = g.linear(m, &b.mlp2);
            tokens = b.norm3.apply(g, g.add(tokens, m));
            let queries = g.add(image, pe);
            let a = attend(g, queries, tokens, tokens, &b.image_to_token, heads);
            image = b.norm4.apply(g, g.add(image, a));
        }
        let keys = g.add(image, pe);
        let a = attend(g, tokens, keys, image, &self.final_attn, heads);
        tokens = self.final_norm.apply(g, g.add(tokens, a));

        let up = g.linear(image, &self.upscale);
        let up = g.pixel_shuffle(up, grid, self.patch_size, self.channels);
        let up = g.gelu(up);
        let out = g.slice_rows(tokens, 0, NUM_OUTPUT_TOKENS);
        let h = g.linear(out, &self.hyper1);
        let h = g.gelu(h);
        let h = g.linear(h, &self.hyper2);
        let first = g.slice_rows(h, 0, 1);
        let second = g.slice_rows(h, 1, 2);
        let hyper = g.scale(g.add(first, second), 0.5);
        let hyper = g.transpose(hyper);
        g.matmul(up, hyper)
    }

    /// Full-resolution mask from matched (or prompted) features.
    pub fn decode_mask(&self, features: &FeatureMap, prompt: Option<&PromptTokens>) -> Result<MaskPrediction> {
        if features.tokens.dim() != self.image_pe.dim() {
            return Err(Error::Shape(format!(
                "decoder expects {:?} tokens, got {:?}",
                self.image_pe.dim(),
                features.tokens.dim()
            )));
        }
        if let Some(p) = prompt {
            if p.sparse.ncols() != features.dim() || p.dense.as_ref().is_some_and(|d| d.dim() != features.tokens.dim()) {
                return Err(Error::Shape("prompt token width does not match features".into()));
            }
        }
        let g = Graph::new();
        let x = g.constant(features.tokens.clone());
        let logits = self.decode_graph(&g, x, (features.height, features.width), prompt);
        let side = (features.height * self.patch_size, features.width * self.patch_size);
        let logits = g.value(logits).clone().into_shape_with_order(side).expect("pixel grid");
        Ok(MaskPrediction::from_logits(logits))
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |s| n += s.len());
        n
    }

    pub(crate) fn for_each_param(&self, f: &mut dyn FnMut(&[f64])) {
        let attn = |a: &AttentionProjections, f: &mut dyn FnMut(&[f64])| {
            for w in [&a.w_q, &a.w_k, &a.w_v, &a.w_o] {
                f(w.as_slice().unwrap());
            }
        };
        let ln = |l: &LayerNormWeights, f: &mut dyn FnMut(&[f64])| {
            f(l.gamma.as_slice().unwrap());
            f(l.beta.as_slice().unwrap());
        };
        f(self.output_tokens.as_slice().unwrap());
        for b in &self.blocks {
            attn(&b.self_attn, f);
            attn(&b.token_to_image, f);
            attn(&b.image_to_token, f);
            f(b.mlp1.as_slice().unwrap());
            f(b.mlp2.as_slice().unwrap());
            for l in [&b.norm1, &b.norm2, &b.norm3, &b.norm4] {
                ln(l, f);
            }
        }
        attn(&self.final_attn, f);
        ln(&self.final_norm, f);
        for w in [&self.upscale, &self.hyper1, &self.hyper2] {
            f(w.as_slice().unwrap());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn setup(image: usize, patch: usize, d: usize) -> (PromptEncoder, DecoderWeights) {
        let pe = PromptEncoder::init(image, patch, d, 1);
        let dec = DecoderWeights::init(image / patch, patch, d, 2, 2, 4, &pe.positional, 2).unwrap();
        (pe, dec)
    }

    fn features(seed: u64, grid: usize, d: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(Array2::from_shape_fn((grid * grid, d), |_| rng.random_range(-1.0..1.0)), grid, grid, "f").unwrap()
    }

    #[test]
    fn box_gives_two_corner_tokens() {
        let (pe, _) = setup(64, 4, 16);
        let t = pe
            .encode_prompt(&Prompt::Box { x_min: 0, y_min: 0, x_max: 63, y_max: 63 })
            .unwrap();
        assert_eq!(t.num_sparse(), 2);
        assert!(t.dense.is_none());
    }

    #[test]
    fn scribble_token_count() {
        let (pe, _) = setup(64, 4, 16);
        let pts: Vec<Pixel> = (0..7).map(|i| Pixel { x: i, y: 3 }).collect();
        assert_eq!(pe.encode_prompt(&Prompt::Scribble(pts)).unwrap().num_sparse(), 7);
        let long: Vec<Pixel> = (0..40).map(|i| Pixel { x: i, y: 3 }).collect();
        assert_eq!(pe.encode_prompt(&Prompt::Scribble(long)).unwrap().num_sparse(), MAX_SCRIBBLE_TOKENS);
    }

    #[test]
    fn invalid_prompts() {
        let (pe, _) = setup(64, 4, 16);
        let out = Prompt::Points(vec![(Pixel { x: 70, y: 2 }, PointLabel::Foreground)]);
        assert!(matches!(pe.encode_prompt(&out), Err(Error::Input(_))));
        assert!(matches!(pe.encode_prompt(&Prompt::Scribble(vec![])), Err(Error::Input(_))));
        let degenerate = Prompt::Box { x_min: 10, y_min: 5, x_max: 9, y_max: 6 };
        assert!(matches!(pe.encode_prompt(&degenerate), Err(Error::Input(_))));
        let mut m = Array2::zeros((64, 64));
        m[[1, 1]] = 0.5;
        assert!(pe.encode_prompt(&Prompt::Mask(m)).is_err());
    }

    #[test]
    fn mask_prompt_is_dense() {
        let (pe, _) = setup(16, 4, 8);
        let mut m = Array2::zeros((16, 16));
        m.slice_mut(ndarray::s![0..4, 0..4]).fill(1.0);
        let t = pe.encode_prompt(&Prompt::Mask(m)).unwrap();
        assert_eq!(t.num_sparse(), 0);
        let dense = t.dense.unwrap();
        assert_eq!(dense.dim(), (16, 8));
        assert_eq!(dense.row(0), pe.mask_inside.view());
        assert_eq!(dense.row(5), pe.mask_outside.view());
    }

    #[test]
    fn output_resolution_and_threshold() {
        let (pe, dec) = setup(32, 4, 16);
        let f = features(3, 8, 16);
        let pred = dec.decode_mask(&f, None).unwrap();
        assert_eq!(pred.logits.dim(), (32, 32));
        assert_eq!(pred.binary, pred.logits.mapv(|v| v > 0.0));
        let tokens = pe
            .encode_prompt(&Prompt::Points(vec![(Pixel { x: 3, y: 30 }, PointLabel::Foreground)]))
            .unwrap();
        let prompted = dec.decode_mask(&f, Some(&tokens)).unwrap();
        assert_eq!(prompted.logits.dim(), (32, 32));
        assert!(prompted.logits.iter().all(|v| v.is_finite()));
        let negative = MaskPrediction::from_logits(Array2::from_elem((4, 4), -5.0));
        assert!(negative.binary.iter().all(|b| !b));
    }

    #[test]
    fn wrong_feature_shape() {
        let (_, dec) = setup(32, 4, 16);
        assert!(matches!(dec.decode_mask(&features(1, 4, 16), None), Err(Error::Shape(_))));
    }

    #[test]
    fn mask_bypass_is_saturated() {
        let mut m = Array2::zeros((4, 4));
        m[[1, 2]] = 1.0;
        let p = MaskPrediction::from_mask(&m);
        assert_eq!(p.logits[[1, 2]], MASK_PROMPT_LOGIT);
        assert_eq!(p.logits[[0, 0]], -MASK_PROMPT_LOGIT);
        assert_eq!(p.binary_mask(), m);
    }
}
