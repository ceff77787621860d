//! `semtrack`: dataset generation, adapter training, few-shot evaluation,
//! batch annotation and representation analysis.
//!
//! Relative output paths are resolved under `$SEMTRACK_OUT_ROOT` when that
//! variable is set.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use semtrack::analysis::{
    extract_object_features, linear_probe, pca_rgb_export, pca_sweep, probe_samples, ProbeConfig, Split,
};
use semtrack::config::RunConfig;
use semtrack::data::{load_mask_png, load_rgb_png, save_mask_png, synthesize_prompt, Episode};
use semtrack::pipeline::{annotate, evaluate, load_checkpoint, save_checkpoint, AnnotatedReference, EvalConfig, Model};
use semtrack::promptdec::PromptKind;
use semtrack::workflow::{
    ablation_csv, assert_no_leakage, generate_dataset, load_classes, load_fold, run_ablation, train_on_fold,
    AblationVariant,
};
use semtrack::adapters::AdapterSet;

pub const OUT_ROOT_ENV: &str = "SEMTRACK_OUT_ROOT";

#[derive(Parser)]
#[command(name = "semtrack", version, about = "Few-shot segmentation as semantic tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Prompt {
    Mask,
    Point,
    Box,
    Scribble,
}

impl From<Prompt> for PromptKind {
    fn from(p: Prompt) -> Self {
        match p {
            Prompt::Mask => PromptKind::Mask,
            Prompt::Point => PromptKind::Point,
            Prompt::Box => PromptKind::Box,
            Prompt::Scribble => PromptKind::Scribble,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    PcaSweep,
    Probe,
    PcaRgb,
    Ablation,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark: fold manifests and episodes.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..=18))]
        folds: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        episodes_per_class: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train adapters on a fold's seen classes.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
    /// Few-shot evaluation on a fold's unseen classes.
    Eval {
        /// Omit to evaluate the frozen model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long, value_enum)]
        prompt: Option<Prompt>,
        #[arg(long)]
        seed: Option<u64>,
        /// Reverse the order of the references.
        #[arg(long)]
        permute_references: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Segment every target image for every prompted reference.
    Annotate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of `{name}.png` images with `{name}_mask.png` masks.
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "on")]
        cache: Switch,
        #[arg(long, value_enum, default_value = "mask")]
        prompt: Prompt,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Representation analyses and the ablation grid.
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
}

/// Places relative paths under the output root, if one is configured.
fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn build_model(cfg: &RunConfig) -> Result<Model> {
    Ok(Model::new(&cfg.encoder.config(), cfg.encoder.seed)?)
}

fn load_adapters(path: Option<&Path>, model: &Model) -> Result<Option<AdapterSet>> {
    path.map(|p| load_checkpoint(p, model).with_context(|| format!("loading checkpoint {}", p.display())))
        .transpose()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn usage_error(msg: &str) -> ! {
    Cli::command().error(clap::error::ErrorKind::MissingRequiredArgument, msg).exit()
}

fn cmd_gen_data(
    out: &Path,
    seed: Option<u64>,
    folds: Option<u64>,
    per_class: Option<u64>,
    config: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    if let Some(f) = folds {
        cfg.data.folds = f as usize;
    }
    if let Some(n) = per_class {
        cfg.data.episodes_per_class = n as usize;
    }
    let out = resolve(out);
    let folds = generate_dataset(&out, &cfg)?;
    println!(
        "wrote {} classes x {} episodes and {} fold manifests to {}",
        semtrack::data::NUM_CLASSES,
        cfg.data.episodes_per_class,
        folds.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(config: Option<&Path>, fold_id: usize, out_checkpoint: &Path, data: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let model = build_model(&cfg)?;
    let data = resolve(data);
    let fold = load_fold(&data, fold_id)?;
    let episodes = load_classes(&data, &fold.train_classes)?;
    assert_no_leakage(&episodes, &fold)?;
    let start = Instant::now();
    let out = train_on_fold(&model, &episodes, &fold, &cfg)?;
    println!("frozen parameters: {}", model.num_frozen_parameters());
    println!("trainable parameters: {}", out.adapters.num_parameters());
    let path = resolve(out_checkpoint);
    save_checkpoint(&out.adapters, &model, &path)?;
    let curve = path.with_extension("loss.csv");
    out.write_curve(&curve)?;
    let (first, last) = (out.curve.first(), out.curve.last());
    if let (Some(a), Some(b)) = (first, last) {
        println!("loss {:.4} -> {:.4} over {} steps", a.total, b.total, out.curve.len());
    }
    println!(
        "checkpoint {} and loss curve {} written in {:.1}s",
        path.display(),
        curve.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: Option<&Path>,
    fold_id: usize,
    shots: Option<usize>,
    prompt: Option<Prompt>,
    seed: Option<u64>,
    permute: bool,
    config: Option<&Path>,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    let model = build_model(&cfg)?;
    let adapters = load_adapters(checkpoint, &model)?;
    let data = resolve(data);
    let fold = load_fold(&data, fold_id)?;
    let episodes = load_classes(&data, &fold.test_classes)?;
    if let Some(k) = shots {
        cfg.eval.shots = k;
    }
    if let Some(p) = prompt {
        cfg.eval.prompt = p.into();
    }
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    cfg.eval.permute_references |= permute;
    let refs: Vec<&Episode> = episodes.iter().collect();
    let report = evaluate(&model, adapters.as_ref(), &refs, &fold, &cfg.eval)?;
    let out = resolve(out);
    write(&out.join("per_class_iou.csv"), &report.per_class_csv())?;
    let audit: String = report.audit.iter().map(|c| format!("{c}\n")).collect();
    write(&out.join("class_audit.txt"), &audit)?;
    println!(
        "fold {fold_id} {}-shot {} prompt: mIoU {:.4} over {} targets",
        cfg.eval.shots, cfg.eval.prompt, report.miou, report.n_targets
    );
    Ok(())
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out: Vec<(String, PathBuf)> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p)))
        .collect();
    out.sort();
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_annotate(
    checkpoint: Option<&Path>,
    refs_dir: &Path,
    targets_dir: &Path,
    out: &Path,
    cache: Switch,
    prompt: Prompt,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let model = build_model(&cfg)?;
    let adapters = load_adapters(checkpoint, &model)?;
    let mut references = Vec::new();
    for (name, path) in png_stems(refs_dir)?.into_iter().filter(|(n, _)| !n.ends_with("_mask")) {
        let mask = load_mask_png(&refs_dir.join(format!("{name}_mask.png")))?;
        let p = synthesize_prompt(&mask, prompt.into(), 0)?;
        references.push(AnnotatedReference {
            name,
            image: load_rgb_png(&path)?,
            prompt: p,
        });
    }
    let targets = png_stems(targets_dir)?;
    if targets.is_empty() {
        bail!(semtrack::Error::Input(format!("no target images in {}", targets_dir.display())));
    }
    let images = targets.iter().map(|(_, p)| load_rgb_png(p)).collect::<semtrack::Result<Vec<_>>>()?;
    let start = Instant::now();
    let masks = annotate(&model, adapters.as_ref(), &references, &images, cache == Switch::On)?;
    let elapsed = start.elapsed().as_secs_f64();
    let out = resolve(out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for ((tname, _), per_ref) in targets.iter().zip(&masks) {
        for (r, pred) in references.iter().zip(per_ref) {
            save_mask_png(&pred.binary_mask(), &out.join(format!("{tname}__{}.png", r.name)))?;
        }
    }
    let rate = images.len() as f64 / elapsed.max(1e-9);
    write(
        &out.join("report.csv"),
        &format!(
            "targets,references,cache,seconds,images_per_second\n{},{},{:?},{elapsed},{rate}\n",
            images.len(),
            references.len(),
            cache
        ),
    )?;
    println!(
        "annotated {} targets x {} references in {elapsed:.3}s ({rate:.2} images/s, cache {:?})",
        images.len(),
        references.len(),
        cache
    );
    Ok(())
}

fn split_halves(episodes: &[Episode]) -> (Vec<&Episode>, Vec<&Episode>) {
    let mut per_class: std::collections::BTreeMap<usize, usize> = Default::default();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for e in episodes {
        let k = per_class.entry(e.class_id).or_default();
        if k.is_multiple_of(2) {
            a.push(e);
        } else {
            b.push(e);
        }
        *k += 1;
    }
    (a, b)
}

fn cmd_analyze(
    checkpoint: Option<&Path>,
    mode: Mode,
    fold_id: usize,
    config: Option<&Path>,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let model = build_model(&cfg)?;
    let data = resolve(data);
    let out = resolve(out);
    let fold = load_fold(&data, fold_id)?;
    let test = load_classes(&data, &fold.test_classes)?;
    if mode == Mode::Ablation {
        let train_eps = load_classes(&data, &fold.train_classes)?;
        let variants = AblationVariant::default_grid(&cfg)?;
        let rows = run_ablation(&model, &train_eps, &test, &fold, &cfg, &variants)?;
        write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
        for r in &rows {
            println!("{:<16} mIoU {:.4}", r.variant, r.miou);
        }
        return Ok(());
    }
    let Some(ck) = checkpoint else {
        usage_error("--checkpoint is required for frozen-vs-adapted comparisons");
    };
    let adapters = load_adapters(Some(ck), &model)?;
    let variants = [("frozen", None), ("adapted", adapters.as_ref())];
    let (first, second) = split_halves(&test);
    match mode {
        Mode::PcaSweep => {
            let d = cfg.encoder.embed_dim;
            let grid: Vec<usize> = std::iter::successors(Some(2), |n| Some(n * 2)).take_while(|&n| n < d).chain([d]).collect();
            let mut columns = Vec::new();
            for (name, a) in variants {
                let tr = extract_object_features(&model, a, &first, Split::Train)?;
                let te = extract_object_features(&model, a, &second, Split::Test)?;
                columns.push((name, pca_sweep(&tr, &te, &grid, cfg.eval.seed)?));
            }
            let mut csv = String::from("n_components,frozen,adapted\n");
            for (i, n) in grid.iter().enumerate() {
                csv.push_str(&format!("{n},{},{}\n", columns[0].1[i].1, columns[1].1[i].1));
            }
            write(&out.join("pca_sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Mode::Probe => {
            let classes = &fold.test_classes;
            let patch = cfg.encoder.patch_size;
            let mut csv = String::from("model,probe_miou,fss_miou\n");
            for (name, a) in variants {
                let tr = probe_samples(&model, a, &first, classes)?;
                let te = probe_samples(&model, a, &second, classes)?;
                let probe = linear_probe(&tr, &te, classes.len() + 1, patch, &ProbeConfig::default())?;
                let fss = evaluate(&model, a, &second, &fold, &EvalConfig { shots: 1, ..cfg.eval.clone() })?;
                csv.push_str(&format!("{name},{},{}\n", probe.miou, fss.miou));
            }
            write(&out.join("probe.csv"), &csv)?;
            print!("{csv}");
        }
        Mode::PcaRgb => {
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let samples: Vec<_> = test.iter().take(4).filter_map(|e| e.samples.first()).collect();
            for (name, a) in variants {
                let maps = samples
                    .iter()
                    .map(|s| model.encode(&s.image, a, name))
                    .collect::<semtrack::Result<Vec<_>>>()?;
                let path = out.join(format!("pca_rgb_{name}.png"));
                pca_rgb_export(&maps, cfg.encoder.image_size, &path)?;
                println!("wrote {}", path.display());
            }
        }
        Mode::Ablation => unreachable!(),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            folds,
            episodes_per_class,
            config,
        } => cmd_gen_data(&out, seed, folds, episodes_per_class, config.as_deref()),
        Command::Train {
            config,
            fold,
            out_checkpoint,
            data,
        } => cmd_train(config.as_deref(), fold, &out_checkpoint, &data),
        Command::Eval {
            checkpoint,
            fold,
            shots,
            prompt,
            seed,
            permute_references,
            config,
            data,
            out,
        } => cmd_eval(
            checkpoint.as_deref(),
            fold,
            shots,
            prompt,
            seed,
            permute_references,
            config.as_deref(),
            &data,
            &out,
        ),
        Command::Annotate {
            checkpoint,
            refs,
            targets,
            out,
            cache,
            prompt,
            config,
        } => cmd_annotate(checkpoint.as_deref(), &refs, &targets, &out, cache, prompt, config.as_deref()),
        Command::Analyze {
            checkpoint,
            mode,
            fold,
            config,
            data,
            out,
        } => cmd_analyze(checkpoint.as_deref(), mode, fold, config.as_deref(), &data, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
