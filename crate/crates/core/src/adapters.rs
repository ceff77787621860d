//! Bottleneck adapters: the only trainable parameters in the system.
//!
//! Every kind stores one down-projection `W_down` and one up-projection
//! `W_up` per adapted encoder block. LoRA keeps its query and value
//! factors side by side in the same two matrices: the first `bottleneck_dim`
//! columns of `W_down` (rows of `W_up`) belong to the query update, the rest
//! to the value update.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::init::truncated_normal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    #[serde(rename = "adaptformer")]
    AdaptFormer,
    Lora,
    SerialAdapter,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [AdapterKind::AdaptFormer, AdapterKind::Lora, AdapterKind::SerialAdapter];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::AdaptFormer => "adaptformer",
            AdapterKind::Lora => "lora",
            AdapterKind::SerialAdapter => "serial_adapter",
        }
    }

    /// Bottleneck columns per adapted layer.
    fn width(self, bottleneck_dim: usize) -> usize {
        match self {
            AdapterKind::Lora => 2 * bottleneck_dim,
            _ => bottleneck_dim,
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptformer" => Ok(AdapterKind::AdaptFormer),
            "lora" => Ok(AdapterKind::Lora),
            "serial_adapter" | "adapter" => Ok(AdapterKind::SerialAdapter),
            other => Err(Error::Config(format!("unknown adapter kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights {
    pub w_down: Array2<f64>,
    pub w_up: Array2<f64>,
    pub kind: AdapterKind,
    pub layer_index: usize,
}

/// Per-layer adapters sharing one kind and bottleneck width.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    kind: AdapterKind,
    bottleneck_dim: usize,
    embed_dim: usize,
    entries: BTreeMap<usize, AdapterWeights>,
}

/// Query and value updates produced by a LoRA adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraDelta<T> {
    pub query: T,
    pub value: T,
}

fn check_kind(w: &AdapterWeights, kind: AdapterKind) -> Result<()> {
    if w.kind != kind {
        return Err(Error::Config(format!("expected a {kind} adapter, got {}", w.kind)));
    }
    Ok(())
}

fn check_width(x: &Array2<f64>, w: &AdapterWeights) -> Result<()> {
    if x.ncols() != w.w_down.nrows() {
        return Err(Error::Shape(format!(
            "token width {} does not match adapter width {}",
            x.ncols(),
            w.w_down.nrows()
        )));
    }
    Ok(())
}

/// `relu(x W_down) W_up`, token-wise, no bias and no scale.
pub fn adaptformer_forward(x: &Array2<f64>, w: &AdapterWeights) -> Result<Array2<f64>> {
    check_kind(w, AdapterKind::AdaptFormer)?;
    check_width(x, w)?;
    Ok(x.dot(&w.w_down).mapv(|v| v.max(0.0)).dot(&w.w_up))
}

/// Same bottleneck as AdaptFormer; the encoder applies it after the MLP
/// residual instead of in parallel with the MLP.
pub fn serial_adapter_forward(x: &Array2<f64>, w: &AdapterWeights) -> Result<Array2<f64>> {
    check_kind(w, AdapterKind::SerialAdapter)?;
    check_width(x, w)?;
    Ok(x.dot(&w.w_down).mapv(|v| v.max(0.0)).dot(&w.w_up))
}

/// Linear low-rank updates `x A B` for the query and value projections.
pub fn lora_forward(x: &Array2<f64>, w: &AdapterWeights) -> Result<LoraDelta<Array2<f64>>> {
    check_kind(w, AdapterKind::Lora)?;
    check_width(x, w)?;
    let r = w.w_down.ncols() / 2;
    Ok(LoraDelta {
        query: x.dot(&w.w_down.slice(s![.., ..r])).dot(&w.w_up.slice(s![..r, ..])),
        value: x.dot(&w.w_down.slice(s![.., r..])).dot(&w.w_up.slice(s![r.., ..])),
    })
}

pub(crate) fn bottleneck(g: &Graph, x: Var, down: Var, up: Var) -> Var {
    let z = g.matmul(x, down);
    let z = g.relu(z);
    g.matmul(z, up)
}

pub(crate) fn lora_deltas(g: &Graph, x: Var, down: Var, up: Var) -> LoraDelta<Var> {
    let r = g.shape(down).1 / 2;
    let width = g.shape(up).0;
    let half = |lo: usize, hi: usize| {
        let a = g.slice_cols(down, lo, hi);
        let b = g.slice_rows(up, lo, hi);
        let xa = g.matmul(x, a);
        g.matmul(xa, b)
    };
    LoraDelta {
        query: half(0, r),
        value: half(r, width),
    }
}

/// Builds adapters for every adapted layer: truncated-normal down-projection
/// and zero up-projection, so the adapted model starts out identical to the
/// frozen one.
pub fn init_adapters(config: &EncoderConfig, kind: AdapterKind, bottleneck_dim: usize, seed: u64) -> Result<AdapterSet> {
    config.validate()?;
    let d = config.embed_dim;
    if bottleneck_dim == 0 || bottleneck_dim >= d {
        return Err(Error::Config(format!(
            "bottleneck dimension {bottleneck_dim} must lie in [1, {d})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = kind.width(bottleneck_dim);
    let std = 1.0 / (d as f64).sqrt();
    let entries = config
        .adapted_layer_indices()
        .into_iter()
        .map(|layer| {
            let w = AdapterWeights {
                w_down: truncated_normal(&mut rng, (d, width), std),
                w_up: Array2::zeros((width, d)),
                kind,
                layer_index: layer,
            };
            (layer, w)
        })
        .collect();
    Ok(AdapterSet {
        kind,
        bottleneck_dim,
        embed_dim: d,
        entries,
    })
}

/// Adapter matrices recorded on a graph.
pub struct BoundAdapters {
    pub kind: AdapterKind,
    layers: Vec<(usize, (Var, Var))>,
}

impl BoundAdapters {
    pub fn layer(&self, index: usize) -> Option<(Var, Var)> {
        self.layers.iter().find(|(i, _)| *i == index).map(|(_, v)| *v)
    }

    /// `(layer, W_down, W_up)` in layer order.
    pub fn vars(&self) -> impl Iterator<Item = (usize, Var, Var)> + '_ {
        self.layers.iter().map(|(i, (d, u))| (*i, *d, *u))
    }
}

impl AdapterSet {
    /// Assembles a set from explicit weights, validating shapes.
    pub fn from_entries(
        kind: AdapterKind,
        bottleneck_dim: usize,
        embed_dim: usize,
        entries: impl IntoIterator<Item = AdapterWeights>,
    ) -> Result<Self> {
        if bottleneck_dim == 0 || bottleneck_dim >= embed_dim {
            return Err(Error::Config(format!(
                "bottleneck dimension {bottleneck_dim} must lie in [1, {embed_dim})"
            )));
        }
        let width = kind.width(bottleneck_dim);
        let mut map = BTreeMap::new();
        for w in entries {
            if w.kind != kind {
                return Err(Error::Config("adapter kinds differ within a set".into()));
            }
            if w.w_down.dim() != (embed_dim, width) || w.w_up.dim() != (width, embed_dim) {
                return Err(Error::Shape(format!(
                    "layer {} adapter matrices {:?}/{:?} do not match d={embed_dim}, width={width}",
                    w.layer_index,
                    w.w_down.dim(),
                    w.w_up.dim()
                )));
            }
            if w.w_down.iter().chain(w.w_up.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("layer {} adapter is not finite", w.layer_index)));
            }
            if map.insert(w.layer_index, w).is_some() {
                return Err(Error::Config("duplicate adapter layer".into()));
            }
        }
        Ok(Self {
            kind,
            bottleneck_dim,
            embed_dim,
            entries: map,
        })
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.bottleneck_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn get(&self, layer: usize) -> Option<&AdapterWeights> {
        self.entries.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = &AdapterWeights> {
        self.entries.values()
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut AdapterWeights> {
        self.entries.values_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Trainable scalar count.
    pub fn num_parameters(&self) -> usize {
        self.layers().map(|w| w.w_down.len() + w.w_up.len()).sum()
    }

    pub fn check_compatible(&self, config: &EncoderConfig) -> Result<()> {
        if self.embed_dim != config.embed_dim {
            return Err(Error::Shape(format!(
                "adapters built for d={}, encoder has d={}",
                self.embed_dim, config.embed_dim
            )));
        }
        let expected = config.adapted_layer_indices();
        let have: Vec<usize> = self.entries.keys().copied().collect();
        if have != expected {
            return Err(Error::Shape(format!(
                "adapters cover layers {have:?}, encoder adapts {expected:?}"
            )));
        }
        Ok(())
    }

    /// Records the matrices on `g`, as parameters when `trainable`.
    pub fn bind(&self, g: &Graph, trainable: bool) -> BoundAdapters {
        let leaf = |a: &Array2<f64>| {
            if trainable {
                g.param(a.clone())
            } else {
                g.constant(a.clone())
            }
        };
        BoundAdapters {
            kind: self.kind,
            layers: self
                .entries
                .iter()
                .map(|(i, w)| (*i, (leaf(&w.w_down), leaf(&w.w_up))))
                .collect(),
        }
    }

    /// Fills every up-projection with truncated-normal noise. Useful to move
    /// away from the zero-initialized point, where the down-projection has no
    /// gradient.
    pub fn randomize_up(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in self.entries.values_mut() {
            w.w_up = truncated_normal(&mut rng, w.w_up.dim(), std);
        }
    }

    /// Flat view over every scalar, in layer order, `W_down` before `W_up`.
    pub fn flat_len(&self) -> usize {
        self.num_parameters()
    }

    pub fn flat_get(&self, index: usize) -> f64 {
        let (w, is_up, i) = self.locate(index);
        let m = if is_up { &w.w_up } else { &w.w_down };
        m.as_slice().expect("standard layout")[i]
    }

    pub fn flat_set(&mut self, index: usize, value: f64) {
        let (layer, is_up, i) = {
            let (w, is_up, i) = self.locate(index);
            (w.layer_index, is_up, i)
        };
        let w = self.entries.get_mut(&layer).expect("located layer");
        let m = if is_up { &mut w.w_up } else { &mut w.w_down };
        m.as_slice_mut().expect("standard layout")[i] = value;
    }

    fn locate(&self, mut index: usize) -> (&AdapterWeights, bool, usize) {
        for w in self.entries.values() {
            if index < w.w_down.len() {
                return (w, false, index);
            }
            index -= w.w_down.len();
            if index < w.w_up.len() {
                return (w, true, index);
            }
            index -= w.w_up.len();
        }
        panic!("flat adapter index out of range");
    }
}
