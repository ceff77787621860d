//! Dataset layout on disk and the end-to-end routines shared by the
//! command-line tool: generation, fold-restricted training and the ablation
//! grid.
//!
//! Layout under a data root:
//! `folds/fold_{f}.manifest` and `episodes/class_{cc}/episode_{eee}/`.

use std::path::{Path, PathBuf};

use crate::adapters::{init_adapters, AdapterKind, AdapterSet};
use crate::config::RunConfig;
use crate::data::{derive_seed, generate_episode_with, make_folds, read_episode, read_fold, write_episode, write_fold, Episode, FoldSpec};
use crate::error::{Error, Result};
use crate::pipeline::{evaluate, train, EvalConfig, Model, TrainOutput, TrainerConfig};

pub fn fold_path(root: &Path, fold_id: usize) -> PathBuf {
    root.join("folds").join(format!("fold_{fold_id}.manifest"))
}

pub fn episode_path(root: &Path, class_id: usize, index: usize) -> PathBuf {
    root.join("episodes")
        .join(format!("class_{class_id:02}"))
        .join(format!("episode_{index:03}"))
}

/// Episodes of one class, generated deterministically from the data seed.
pub fn generate_class_episodes(cfg: &RunConfig, class_id: usize) -> Result<Vec<Episode>> {
    let gen = cfg.data.generator(cfg.encoder.image_size);
    (0..cfg.data.episodes_per_class)
        .map(|e| {
            generate_episode_with(
                class_id,
                cfg.data.samples_per_episode,
                derive_seed(&[cfg.data.seed, class_id as u64, e as u64]),
                cfg.data.distractors,
                &gen,
            )
        })
        .collect()
}

/// Writes every fold manifest and every class's episodes.
pub fn generate_dataset(root: &Path, cfg: &RunConfig) -> Result<Vec<FoldSpec>> {
    cfg.validate()?;
    let folds = make_folds(cfg.data.folds)?;
    let dir = root.join("folds");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for f in &folds {
        write_fold(f, &fold_path(root, f.fold_id))?;
    }
    for class_id in 0..crate::data::NUM_CLASSES {
        for (e, ep) in generate_class_episodes(cfg, class_id)?.iter().enumerate() {
            write_episode(ep, &episode_path(root, class_id, e))?;
        }
    }
    Ok(folds)
}

pub fn load_fold(root: &Path, fold_id: usize) -> Result<FoldSpec> {
    let path = fold_path(root, fold_id);
    if !path.is_file() {
        return Err(Error::Input(format!("fold {fold_id} not found under {}", root.display())));
    }
    read_fold(&path)
}

/// Every episode directory of `class_id`, in index order.
pub fn load_class_episodes(root: &Path, class_id: usize) -> Result<Vec<Episode>> {
    let dir = root.join("episodes").join(format!("class_{class_id:02}"));
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_episode(d)).collect()
}

pub fn load_classes(root: &Path, classes: &[usize]) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for &c in classes {
        out.extend(load_class_episodes(root, c)?);
    }
    Ok(out)
}

/// Fails if any episode belongs to one of the fold's unseen classes.
pub fn assert_no_leakage(episodes: &[Episode], fold: &FoldSpec) -> Result<()> {
    match episodes.iter().find(|e| fold.is_test_class(e.class_id)) {
        Some(e) => Err(Error::State(format!(
            "fold leakage: class {} is unseen in fold {}",
            e.class_id, fold.fold_id
        ))),
        None => Ok(()),
    }
}

pub fn fresh_adapters(cfg: &RunConfig, kind: AdapterKind, bottleneck: usize) -> Result<AdapterSet> {
    init_adapters(&cfg.encoder.config(), kind, bottleneck, cfg.adapters.seed)
}

/// Trains adapters of the configured kind on seen-class episodes only.
pub fn train_on_fold(model: &Model, episodes: &[Episode], fold: &FoldSpec, cfg: &RunConfig) -> Result<TrainOutput> {
    assert_no_leakage(episodes, fold)?;
    let kind = cfg.adapters.kind()?;
    let adapters = fresh_adapters(cfg, kind, cfg.adapters.bottleneck(cfg.encoder.embed_dim))?;
    train(model, episodes, adapters, &cfg.trainer)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    /// `None` evaluates the frozen model.
    pub adapter: Option<(AdapterKind, usize)>,
    pub frames_per_clip: usize,
}

impl AblationVariant {
    /// Frozen model, adapters without pseudo-references (J=1), the full
    /// loss, each adapter kind and a range of bottleneck widths.
    pub fn default_grid(cfg: &RunConfig) -> Result<Vec<AblationVariant>> {
        let d = cfg.encoder.embed_dim;
        let kind = cfg.adapters.kind()?;
        let b = cfg.adapters.bottleneck(d);
        let j = cfg.trainer.frames_per_clip.max(2);
        let mut v = vec![
            AblationVariant {
                name: "frozen".into(),
                adapter: None,
                frames_per_clip: 1,
            },
            AblationVariant {
                name: "adapter_j1".into(),
                adapter: Some((kind, b)),
                frames_per_clip: 1,
            },
            AblationVariant {
                name: "full_loss".into(),
                adapter: Some((kind, b)),
                frames_per_clip: j,
            },
        ];
        for k in AdapterKind::ALL.into_iter().filter(|&k| k != kind) {
            v.push(AblationVariant {
                name: format!("kind_{k}"),
                adapter: Some((k, b)),
                frames_per_clip: j,
            });
        }
        for width in [d / 8, d / 4] {
            if width > 0 && width != b {
                v.push(AblationVariant {
                    name: format!("bottleneck_{width}"),
                    adapter: Some((kind, width)),
                    frames_per_clip: j,
                });
            }
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub kind: String,
    pub bottleneck: usize,
    pub frames_per_clip: usize,
    pub trainable_parameters: usize,
    pub miou: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,kind,bottleneck,frames_per_clip,trainable_parameters,miou\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant, r.kind, r.bottleneck, r.frames_per_clip, r.trainable_parameters, r.miou
        ));
    }
    s
}

/// Trains and evaluates each variant on one fold.
pub fn run_ablation(
    model: &Model,
    train_episodes: &[Episode],
    test_episodes: &[Episode],
    fold: &FoldSpec,
    cfg: &RunConfig,
    variants: &[AblationVariant],
) -> Result<Vec<AblationRow>> {
    assert_no_leakage(train_episodes, fold)?;
    let tests: Vec<&Episode> = test_episodes.iter().collect();
    let eval_cfg = EvalConfig {
        permute_references: false,
        ..cfg.eval.clone()
    };
    variants
        .iter()
        .map(|v| {
            let (adapters, kind, bottleneck) = match v.adapter {
                None => (None, "none".to_string(), 0),
                Some((kind, b)) => {
                    let tc = TrainerConfig {
                        frames_per_clip: v.frames_per_clip,
                        ..cfg.trainer.clone()
                    };
                    let out = train(model, train_episodes, fresh_adapters(cfg, kind, b)?, &tc)?;
                    (Some(out.adapters), kind.to_string(), b)
                }
            };
            let report = evaluate(model, adapters.as_ref(), &tests, fold, &eval_cfg)?;
            log::info!("ablation {}: mIoU {:.4}", v.name, report.miou);
            Ok(AblationRow {
                variant: v.name.clone(),
                kind,
                bottleneck,
                frames_per_clip: v.frames_per_clip,
                trainable_parameters: adapters.as_ref().map_or(0, AdapterSet::num_parameters),
                miou: report.miou,
            })
        })
        .collect()
}
