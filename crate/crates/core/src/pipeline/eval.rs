//! Few-shot evaluation over a fold's unseen classes and batch annotation
//! with optional reuse of reference memory entries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::adapters::AdapterSet;
use crate::analysis::IouAccumulator;
use crate::data::{derive_seed, synthesize_prompt, Episode, FoldSpec};
use crate::error::{Error, Result};
use crate::memory::{MemoryBank, MemoryEntry};
use crate::promptdec::{MaskPrediction, Prompt, PromptKind};
use crate::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub shots: usize,
    pub prompt: PromptKind,
    pub seed: u64,
    /// Reverse the reference order before building the bank.
    pub permute_references: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shots: 1,
            prompt: PromptKind::Mask,
            seed: 0,
            permute_references: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_class: BTreeMap<usize, f64>,
    pub miou: f64,
    pub n_targets: usize,
    /// Class ids of every evaluated episode, in order.
    pub audit: Vec<usize>,
}

impl EvalReport {
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class_id,iou\n");
        for (c, v) in &self.per_class {
            s.push_str(&format!("{c},{v}\n"));
        }
        s.push_str(&format!("mean,{}\n", self.miou));
        s
    }
}

/// For each episode the first `shots` samples are prompted references and
/// the rest are targets.
pub fn evaluate(
    model: &Model,
    adapters: Option<&AdapterSet>,
    episodes: &[&Episode],
    fold: &FoldSpec,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    if let Some(a) = adapters {
        a.check_compatible(model.config())?;
    }
    let mut acc = IouAccumulator::new();
    let mut n_targets = 0;
    let mut audit = Vec::with_capacity(episodes.len());
    for (e, ep) in episodes.iter().enumerate() {
        if !fold.is_test_class(ep.class_id) {
            return Err(Error::Input(format!(
                "class {} is not an unseen class of fold {}",
                ep.class_id, fold.fold_id
            )));
        }
        audit.push(ep.class_id);
        if ep.samples.len() <= cfg.shots {
            return Err(Error::Input(format!(
                "episode with {} samples cannot provide {} references and a target",
                ep.samples.len(),
                cfg.shots
            )));
        }
        let mut refs: Vec<usize> = (0..cfg.shots).collect();
        if cfg.permute_references {
            refs.reverse();
        }
        let mut bank = MemoryBank::new();
        for &k in &refs {
            let s = &ep.samples[k];
            let prompt = synthesize_prompt(&s.mask, cfg.prompt, derive_seed(&[cfg.seed, e as u64, k as u64]))?;
            bank.append(model.reference_entry(&s.image, &prompt, adapters, &format!("ref{k}"))?);
        }
        for s in &ep.samples[cfg.shots..] {
            let target = model.encode(&s.image, adapters, "target")?;
            let pred = model.predict(&target, &bank)?;
            acc.add(ep.class_id, &pred.binary_mask(), &s.mask)?;
            n_targets += 1;
        }
    }
    Ok(EvalReport {
        per_class: acc.per_class(),
        miou: acc.miou(),
        n_targets,
        audit,
    })
}

/// A named, prompted reference for annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedReference {
    pub name: String,
    pub image: Image,
    pub prompt: Prompt,
}

/// Segments every target for every reference. With `cache` the reference
/// memory entries are built once; without it they are rebuilt per target.
/// Result is indexed `[target][reference]`.
pub fn annotate(
    model: &Model,
    adapters: Option<&AdapterSet>,
    references: &[AnnotatedReference],
    targets: &[Image],
    cache: bool,
) -> Result<Vec<Vec<MaskPrediction>>> {
    if targets.is_empty() {
        return Err(Error::Input("no target images to annotate".into()));
    }
    if references.is_empty() {
        return Err(Error::Input("no reference images".into()));
    }
    let entry = |r: &AnnotatedReference| model.reference_entry(&r.image, &r.prompt, adapters, &r.name);
    let cached: Vec<MemoryEntry> = if cache {
        references.iter().map(entry).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    targets
        .iter()
        .map(|img| {
            let features = model.encode(img, adapters, "target")?;
            references
                .iter()
                .enumerate()
                .map(|(k, r)| {
                    let mut bank = MemoryBank::new();
                    bank.append(if cache { cached[k].clone() } else { entry(r)? });
                    model.predict(&features, &bank)
                })
                .collect()
        })
        .collect()
}
