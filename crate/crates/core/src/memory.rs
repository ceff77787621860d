//! Dense feature matching: mask fusion into memory entries, the per-episode
//! memory bank, and cross-attention from target tokens to every stored token.
//!
//! Bank entries carry no temporal or slot encoding, so the matched features
//! do not depend on the order in which references were appended.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gelu, Graph, Var};
use crate::encoder::{AttentionProjections, FeatureMap, LayerNormWeights};
use crate::error::{Error, Result};
use crate::init::truncated_normal;
use crate::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryOrigin {
    Reference,
    PseudoReference,
}

/// Fused feature + mask representation of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub fused: FeatureMap,
    pub origin: MemoryOrigin,
}

impl MemoryEntry {
    pub fn frame_id(&self) -> &str {
        &self.fused.frame_id
    }
}

/// Ordered store of memory entries for a single episode.
#[derive(Clone, Debug, Default)]
pub struct MemoryBank {
    entries: Vec<MemoryEntry>,
    capacity: Option<usize>,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bank that drops its oldest entry once `capacity` is exceeded.
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            capacity: Some(capacity.max(1)),
        }
    }

    pub fn append(&mut self, entry: MemoryEntry) {
        self.entries.push(entry);
        if let Some(cap) = self.capacity {
            if self.entries.len() > cap {
                self.entries.remove(0);
            }
        }
    }

    pub fn reset(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn origins(&self) -> Vec<MemoryOrigin> {
        self.entries.iter().map(|e| e.origin).collect()
    }
}

/// 2-D convolution with square kernel, zero padding `kernel/2`, no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels, k, k)`
    pub weight: Array4<f64>,
    pub stride: usize,
}

impl Conv2d {
    /// `input` is `(channels, H, W)`.
    pub fn forward(&self, input: &ndarray::Array3<f64>) -> ndarray::Array3<f64> {
        let (cout, cin, k, _) = self.weight.dim();
        let (c, h, w) = input.dim();
        assert_eq!(c, cin, "conv input channels");
        let pad = (k / 2) as isize;
        let oh = (h + 2 * pad as usize - k) / self.stride + 1;
        let ow = (w + 2 * pad as usize - k) / self.stride + 1;
        let mut out = ndarray::Array3::zeros((cout, oh, ow));
        for o in 0..cout {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..cin {
                        for ky in 0..k {
                            let iy = (y * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (x * self.stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += self.weight[[o, i, ky, kx]] * input[[i, iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[o, y, x]] = acc;
                }
            }
        }
        out
    }
}

/// Frozen mask downsampler: stride-2 3x3 convolutions with GELU until the
/// mask reaches token resolution, then a 1x1 projection to the feature width.
/// Bias-free, so an all-zero mask maps to all-zero features.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDownsampler {
    pub stages: Vec<Conv2d>,
    /// `(channels, d)`
    pub projection: Array2<f64>,
}

impl MaskDownsampler {
    pub fn init(patch_size: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_stages = patch_size.trailing_zeros() as usize;
        let mut stages = Vec::with_capacity(n_stages);
        let mut cin = 1;
        for s in 0..n_stages {
            let cout = (4usize << (2 * s)).min(embed_dim);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let w = truncated_normal(&mut rng, (cout, cin * 9), std)
                .into_shape_with_order((cout, cin, 3, 3))
                .expect("conv weight shape");
            stages.push(Conv2d { weight: w, stride: 2 });
            cin = cout;
        }
        let projection = truncated_normal(&mut rng, (cin, embed_dim), 1.0 / (cin as f64).sqrt());
        Self { stages, projection }
    }

    /// Maps an `H x W` mask to `(h*w, d)` tokens.
    pub fn forward(&self, mask: &Mask) -> Array2<f64> {
        let (h, w) = mask.dim();
        let mut x = mask.clone().into_shape_with_order((1, h, w)).expect("mask reshape");
        for stage in &self.stages {
            x = stage.forward(&x).mapv(gelu);
        }
        let (c, gh, gw) = x.dim();
        let tokens = x
            .permuted_axes([1, 2, 0])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((gh * gw, c))
            .expect("token reshape");
        tokens.dot(&self.projection)
    }

    pub fn num_parameters(&self) -> usize {
        self.stages.iter().map(|s| s.weight.len()).sum::<usize>() + self.projection.len()
    }
}

fn check_mask(mask: &Mask, features: &FeatureMap, patch: usize) -> Result<()> {
    let want = (features.height * patch, features.width * patch);
    if mask.dim() != want {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image resolution {want:?}",
            mask.dim()
        )));
    }
    if mask.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::Input("mask values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// `fused = features + conv_down(mask)`. Soft masks are used as given.
pub fn encode_memory(
    features: &FeatureMap,
    mask: &Mask,
    downsampler: &MaskDownsampler,
    origin: MemoryOrigin,
) -> Result<MemoryEntry> {
    let patch = 1usize << downsampler.stages.len();
    check_mask(mask, features, patch)?;
    let down = downsampler.forward(mask);
    if down.dim() != features.tokens.dim() {
        return Err(Error::Shape(format!(
            "downsampled mask {:?} vs features {:?}",
            down.dim(),
            features.tokens.dim()
        )));
    }
    let fused = FeatureMap::new(&features.tokens + &down, features.height, features.width, features.frame_id.clone())?;
    Ok(MemoryEntry { fused, origin })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryLayer {
    pub query_norm: LayerNormWeights,
    pub attn: AttentionProjections,
    pub ffn_norm: LayerNormWeights,
    pub ffn1: Array2<f64>,
    pub ffn2: Array2<f64>,
}

/// Frozen cross-attention stack.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryAttentionWeights {
    pub layers: Vec<MemoryLayer>,
    pub final_norm: LayerNormWeights,
    pub num_heads: usize,
}

impl MemoryAttentionWeights {
    pub fn init(embed_dim: usize, num_layers: usize, num_heads: usize, mlp_ratio: usize, seed: u64) -> Result<Self> {
        if num_heads == 0 || !embed_dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "memory attention width {embed_dim} not divisible by {num_heads} heads"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = embed_dim;
        let std = 1.0 / (d as f64).sqrt();
        let layers = (0..num_layers)
            .map(|_| MemoryLayer {
                query_norm: LayerNormWeights::identity(d),
                attn: AttentionProjections::init(&mut rng, d, std),
                ffn_norm: LayerNormWeights::identity(d),
                ffn1: truncated_normal(&mut rng, (d, d * mlp_ratio), std),
                ffn2: truncated_normal(&mut rng, (d * mlp_ratio, d), 1.0 / ((d * mlp_ratio) as f64).sqrt()),
            })
            .collect();
        Ok(Self {
            layers,
            final_norm: LayerNormWeights::identity(d),
            num_heads,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| 4 * l.attn.w_q.len() + l.ffn1.len() + l.ffn2.len() + 4 * l.query_norm.gamma.len())
            .sum::<usize>()
            + 2 * self.final_norm.gamma.len()
    }

    pub(crate) fn for_each_param(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            for w in [&l.attn.w_q, &l.attn.w_k, &l.attn.w_v, &l.attn.w_o, &l.ffn1, &l.ffn2] {
                f(w.as_slice().expect("standard layout"));
            }
            for ln in [&l.query_norm, &l.ffn_norm] {
                f(ln.gamma.as_slice().unwrap());
                f(ln.beta.as_slice().unwrap());
            }
        }
        f(self.final_norm.gamma.as_slice().unwrap());
        f(self.final_norm.beta.as_slice().unwrap());
    }
}

/// Attention sub-layer: `x + W_o Attn(Q(LN(x)), K(mem), V(mem))`.
pub fn cross_attend(g: &Graph, x: Var, memory: Var, layer: &MemoryLayer, heads: usize) -> Var {
    let h = layer.query_norm.apply(g, x);
    let q = g.linear(h, &layer.attn.w_q);
    let k = g.linear(memory, &layer.attn.w_k);
    let v = g.linear(memory, &layer.attn.w_v);
    let a = g.attention(q, k, v, heads);
    let a = g.linear(a, &layer.attn.w_o);
    g.add(x, a)
}

/// Full memory attention on graph values. `memory` holds the concatenated
/// tokens of every bank entry.
pub fn memory_attention_graph(g: &Graph, target: Var, memory: Var, weights: &MemoryAttentionWeights) -> Var {
    let mut x = target;
    for layer in &weights.layers {
        x = cross_attend(g, x, memory, layer, weights.num_heads);
        let f = layer.ffn_norm.apply(g, x);
        let f = g.linear(f, &layer.ffn1);
        let f = g.gelu(f);
        let f = g.linear(f, &layer.ffn2);
        x = g.add(x, f);
    }
    weights.final_norm.apply(g, x)
}

fn bank_tokens(target: &FeatureMap, bank: &MemoryBank) -> Result<Array2<f64>> {
    if bank.is_empty() {
        return Err(Error::State("no reference encoded: memory bank is empty".into()));
    }
    for e in bank.entries() {
        if e.fused.dim() != target.dim() {
            return Err(Error::Shape(format!(
                "memory entry width {} vs target width {}",
                e.fused.dim(),
                target.dim()
            )));
        }
    }
    let views: Vec<_> = bank.entries().iter().map(|e| e.fused.tokens.view()).collect();
    Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("checked widths"))
}

/// Conditions target tokens on every token stored in `bank`.
pub fn memory_attention(target: &FeatureMap, bank: &MemoryBank, weights: &MemoryAttentionWeights) -> Result<FeatureMap> {
    let memory = bank_tokens(target, bank)?;
    let g = Graph::new();
    let x = g.constant(target.tokens.clone());
    let m = g.constant(memory);
    let out = memory_attention_graph(&g, x, m, weights);
    let tokens = g.value(out).clone();
    FeatureMap::new(tokens, target.height, target.width, target.frame_id.clone())
}

/// First-layer attention distributions, one `(queries, bank tokens)` matrix
/// per head.
pub fn first_layer_attention(
    target: &FeatureMap,
    bank: &MemoryBank,
    weights: &MemoryAttentionWeights,
) -> Result<Vec<Array2<f64>>> {
    let memory = bank_tokens(target, bank)?;
    let layer = weights
        .layers
        .first()
        .ok_or_else(|| Error::Config("memory attention has no layers".into()))?;
    let g = Graph::new();
    let x = g.constant(target.tokens.clone());
    let h = layer.query_norm.apply(&g, x);
    let q = g.value(h).dot(&layer.attn.w_q);
    let k = memory.dot(&layer.attn.w_k);
    let d = q.ncols();
    let dh = d / weights.num_heads;
    Ok((0..weights.num_heads)
        .map(|head| {
            let cols = ndarray::s![.., head * dh..(head + 1) * dh];
            let mut s = q.slice(cols).dot(&k.slice(cols).t()) / (dh as f64).sqrt();
            crate::autodiff::softmax_rows(&mut s);
            s
        })
        .collect())
}
