//! Frozen plain-transformer image encoder with adapter insertion points.
//!
//! Images are split into non-overlapping square patches, linearly embedded,
//! offset by a learned absolute position table and passed through pre-norm
//! transformer blocks. A final layer norm produces the feature grid used both
//! by memory attention and by the mask decoder.

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterKind, AdapterSet, BoundAdapters};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::init::truncated_normal;
use crate::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Blocks that receive adapters. Empty means "the last two".
    pub adapted_layers: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 4,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 4,
            adapted_layers: Vec::new(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.patch_size.is_power_of_two() {
            return bad(format!("patch_size {} must be a power of two", self.patch_size));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_blocks == 0 || self.mlp_ratio == 0 {
            return bad("num_blocks and mlp_ratio must be positive".into());
        }
        if let Some(&i) = self.adapted_layers.iter().find(|&&i| i >= self.num_blocks) {
            return bad(format!("adapted layer {i} outside [0, {})", self.num_blocks));
        }
        Ok(())
    }

    /// Tokens per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sorted, de-duplicated adapted block indices.
    pub fn adapted_layer_indices(&self) -> Vec<usize> {
        let mut layers = if self.adapted_layers.is_empty() {
            (self.num_blocks.saturating_sub(2)..self.num_blocks).collect()
        } else {
            self.adapted_layers.clone()
        };
        layers.sort_unstable();
        layers.dedup();
        layers
    }

    /// Number of leading blocks that never carry adapters.
    pub fn frozen_prefix_len(&self) -> usize {
        self.adapted_layer_indices().first().copied().unwrap_or(self.num_blocks)
    }
}

/// Dense token grid of shape `(h, w, d)` stored as `h*w` rows of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tokens: Array2<f64>,
    pub height: usize,
    pub width: usize,
    pub frame_id: String,
}

impl FeatureMap {
    pub fn new(tokens: Array2<f64>, height: usize, width: usize, frame_id: impl Into<String>) -> Result<Self> {
        if tokens.nrows() != height * width {
            return Err(Error::Shape(format!(
                "{} tokens do not form a {height}x{width} grid",
                tokens.nrows()
            )));
        }
        Ok(Self {
            tokens,
            height,
            width,
            frame_id: frame_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// `(h, w, d)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.dim())
    }

    pub fn token(&self, y: usize, x: usize) -> ndarray::ArrayView1<'_, f64> {
        self.tokens.row(y * self.width + x)
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProjections {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

impl AttentionProjections {
    pub(crate) fn init(rng: &mut ChaCha8Rng, d: usize, std: f64) -> Self {
        Self {
            w_q: truncated_normal(rng, (d, d), std),
            w_k: truncated_normal(rng, (d, d), std),
            w_v: truncated_normal(rng, (d, d), std),
            w_o: truncated_normal(rng, (d, d), std),
        }
    }

    fn for_each(&self, f: &mut dyn FnMut(ArrayView2<'_, f64>)) {
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            f(w.view());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormWeights {
    pub(crate) fn identity(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    pub(crate) fn apply(&self, g: &Graph, x: Var) -> Var {
        g.layer_norm(x, &self.gamma, &self.beta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub norm1: LayerNormWeights,
    pub attn: AttentionProjections,
    pub norm2: LayerNormWeights,
    pub fc1: Array2<f64>,
    pub fc2: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    pub patch_embed: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: LayerNormWeights,
}

const INIT_STD: f64 = 0.02;

/// Builds a deterministic frozen encoder.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<Encoder> {
    config.validate()?;
    let d = config.embed_dim;
    let p = config.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch_embed = truncated_normal(&mut rng, (p * p * 3, d), INIT_STD);
    let pos_embed = truncated_normal(&mut rng, (config.num_tokens(), d), INIT_STD);
    let blocks = (0..config.num_blocks)
        .map(|_| BlockWeights {
            norm1: LayerNormWeights::identity(d),
            attn: AttentionProjections::init(&mut rng, d, INIT_STD),
            norm2: LayerNormWeights::identity(d),
            fc1: truncated_normal(&mut rng, (d, d * config.mlp_ratio), INIT_STD),
            fc2: truncated_normal(&mut rng, (d * config.mlp_ratio, d), INIT_STD),
        })
        .collect();
    Ok(Encoder {
        config: config.clone(),
        patch_embed,
        pos_embed,
        blocks,
        final_norm: LayerNormWeights::identity(d),
    })
}

pub(crate) fn check_image(image: &Image, size: usize) -> Result<()> {
    if image.dim() != (size, size, 3) {
        return Err(Error::Shape(format!(
            "expected a {size}x{size}x3 image, got {:?}",
            image.dim()
        )));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("image contains non-finite pixels".into()));
    }
    Ok(())
}

impl Encoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Flattens the image into `(tokens, patch*patch*3)` rows of normalized
    /// pixels, ordered `(py, px, channel)` within each patch.
    pub fn patchify(&self, image: &Image) -> Result<Array2<f64>> {
        check_image(image, self.config.image_size)?;
        let p = self.config.patch_size;
        let grid = self.config.grid();
        let mut out = Array2::zeros((grid * grid, p * p * 3));
        for ty in 0..grid {
            for tx in 0..grid {
                let mut row = out.row_mut(ty * grid + tx);
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..3 {
                            let v = image[[ty * p + py, tx * p + px, c]];
                            row[(py * p + px) * 3 + c] = (v - 0.5) / 0.25;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Patch embedding plus position table.
    pub fn embed(&self, image: &Image) -> Result<Array2<f64>> {
        Ok(self.patchify(image)?.dot(&self.patch_embed) + &self.pos_embed)
    }

    /// Token state after the frozen leading blocks (those before the first
    /// adapted layer). It depends on nothing trainable and can be cached.
    pub fn encode_prefix(&self, image: &Image) -> Result<Array2<f64>> {
        let g = Graph::new();
        let mut x = g.constant(self.embed(image)?);
        for block in &self.blocks[..self.config.frozen_prefix_len()] {
            x = self.block_forward(&g, block, x, None);
        }
        let out = g.value(x).clone();
        Ok(out)
    }

    /// Remaining blocks and the final norm, recorded on `g`.
    pub fn encode_suffix(&self, g: &Graph, prefix: &Array2<f64>, adapters: Option<&BoundAdapters>) -> Var {
        let mut x = g.constant(prefix.clone());
        for (i, block) in self.blocks.iter().enumerate().skip(self.config.frozen_prefix_len()) {
            let slot = adapters.and_then(|a| a.layer(i));
            x = self.block_forward(g, block, x, slot.map(|s| (adapters.unwrap().kind, s)));
        }
        self.final_norm.apply(g, x)
    }

    /// Full forward pass.
    pub fn encode_image(&self, image: &Image, adapters: Option<&AdapterSet>) -> Result<FeatureMap> {
        self.encode_image_with_id(image, adapters, "frame")
    }

    pub fn encode_image_with_id(
        &self,
        image: &Image,
        adapters: Option<&AdapterSet>,
        frame_id: &str,
    ) -> Result<FeatureMap> {
        if let Some(a) = adapters {
            a.check_compatible(&self.config)?;
        }
        let prefix = self.encode_prefix(image)?;
        let g = Graph::new();
        let bound = adapters.map(|a| a.bind(&g, false));
        let out = self.encode_suffix(&g, &prefix, bound.as_ref());
        let tokens = g.value(out).clone();
        let grid = self.config.grid();
        FeatureMap::new(tokens, grid, grid, frame_id)
    }

    /// One pre-norm block. The adapter, when present, is either
    /// AdaptFormer (parallel to the MLP on the post-attention stream),
    /// LoRA (low-rank query/value updates) or a serial bottleneck after
    /// the MLP residual.
    pub(crate) fn block_forward(
        &self,
        g: &Graph,
        block: &BlockWeights,
        x: Var,
        adapter: Option<(AdapterKind, (Var, Var))>,
    ) -> Var {
        let h = block.norm1.apply(g, x);
        let mut q = g.linear(h, &block.attn.w_q);
        let k = g.linear(h, &block.attn.w_k);
        let mut v = g.linear(h, &block.attn.w_v);
        if let Some((AdapterKind::Lora, (down, up))) = adapter {
            let delta = crate::adapters::lora_deltas(g, h, down, up);
            q = g.add(q, delta.query);
            v = g.add(v, delta.value);
        }
        let attn = g.attention(q, k, v, self.config.num_heads);
        let attn = g.linear(attn, &block.attn.w_o);
        let x_self = g.add(x, attn);
        let m = block.norm2.apply(g, x_self);
        let m = g.linear(m, &block.fc1);
        let m = g.gelu(m);
        let m = g.linear(m, &block.fc2);
        let out = g.add(x_self, m);
        match adapter {
            Some((AdapterKind::AdaptFormer, (down, up))) => {
                let delta = crate::adapters::bottleneck(g, x_self, down, up);
                g.add(out, delta)
            }
            Some((AdapterKind::SerialAdapter, (down, up))) => {
                let delta = crate::adapters::bottleneck(g, out, down, up);
                g.add(out, delta)
            }
            _ => out,
        }
    }

    fn for_each_param(&self, f: &mut dyn FnMut(ArrayView2<'_, f64>)) {
        f(self.patch_embed.view());
        f(self.pos_embed.view());
        for b in &self.blocks {
            for ln in [&b.norm1, &b.norm2] {
                f(ln.gamma.view().insert_axis(ndarray::Axis(0)));
                f(ln.beta.view().insert_axis(ndarray::Axis(0)));
            }
            b.attn.for_each(f);
            f(b.fc1.view());
            f(b.fc2.view());
        }
        f(self.final_norm.gamma.view().insert_axis(ndarray::Axis(0)));
        f(self.final_norm.beta.view().insert_axis(ndarray::Axis(0)));
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |w| n += w.len());
        n
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.for_each_param(&mut |w| {
            for v in w.iter() {
                hasher.update(v.to_le_bytes());
            }
        });
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
