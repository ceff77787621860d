//! Synthetic shapes benchmark: 18 classes (6 shape families x 3 textures),
//! class folds, episode generation, prompt synthesis and episode file I/O.
//!
//! Shapes are rasterized by evaluating an analytic predicate at every pixel
//! center without anti-aliasing, so masks are exact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::promptdec::{Pixel, PointLabel, Prompt, PromptKind};
use crate::{Image, Mask};

pub const NUM_CLASSES: usize = 18;
pub const DEFAULT_RESOLUTION: usize = 64;
pub const MAX_SCRIBBLE_LEN: usize = 16;
/// Smallest visible area of a target instance, in pixels.
pub const MIN_VISIBLE_PIXELS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Texture {
    Flat,
    Stripes,
    Noise,
}

const FAMILIES: [Family; 6] = [
    Family::Disk,
    Family::Square,
    Family::Triangle,
    Family::Ring,
    Family::Cross,
    Family::Bar,
];
const TEXTURES: [Texture; 3] = [Texture::Flat, Texture::Stripes, Texture::Noise];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShapeClass {
    pub family: Family,
    pub texture: Texture,
}

impl ShapeClass {
    pub fn from_id(id: usize) -> Result<Self> {
        if id >= NUM_CLASSES {
            return Err(Error::Input(format!("unknown class id {id} (expected < {NUM_CLASSES})")));
        }
        Ok(Self {
            family: FAMILIES[id / 3],
            texture: TEXTURES[id % 3],
        })
    }

    pub fn id(self) -> usize {
        self.family as usize * 3 + self.texture as usize
    }

    pub fn all() -> impl Iterator<Item = ShapeClass> {
        (0..NUM_CLASSES).map(|i| ShapeClass::from_id(i).expect("in range"))
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}-{:?}", self.family, self.texture)
    }
}

/// Disjoint split of the class ids into seen (train) and unseen (test).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub fold_id: usize,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

impl FoldSpec {
    pub fn is_test_class(&self, class_id: usize) -> bool {
        self.test_classes.contains(&class_id)
    }
}

/// Partitions the classes into `n_folds` test sets. Classes are ordered so
/// that each contiguous chunk mixes families and textures, then chunked.
pub fn make_folds(n_folds: usize) -> Result<Vec<FoldSpec>> {
    if !(2..=NUM_CLASSES).contains(&n_folds) {
        return Err(Error::Config(format!("fold count must be in 2..={NUM_CLASSES}, got {n_folds}")));
    }
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by_key(|&id| ((id / 3 + id % 3) % 3, id));
    let mut folds = Vec::with_capacity(n_folds);
    let mut start = 0;
    for f in 0..n_folds {
        let size = NUM_CLASSES / n_folds + usize::from(f < NUM_CLASSES % n_folds);
        let mut test: Vec<usize> = order[start..start + size].to_vec();
        test.sort_unstable();
        start += size;
        let train = (0..NUM_CLASSES).filter(|c| !test.contains(c)).collect();
        folds.push(FoldSpec {
            fold_id: f,
            train_classes: train,
            test_classes: test,
        });
    }
    Ok(folds)
}

/// Placement and appearance of one shape in a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: ShapeClass,
    pub center: (f64, f64),
    pub radius: f64,
    pub rotation: f64,
    pub color: [f64; 3],
    pub stripe_phase: f64,
    pub noise_seed: u64,
}

impl Instance {
    fn local(&self, px: f64, py: f64) -> (f64, f64) {
        let (dx, dy) = (px - self.center.0, py - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        ((c * dx + s * dy) / self.radius, (-s * dx + c * dy) / self.radius)
    }

    /// Shape support at the pixel center `(x + 0.5, y + 0.5)`.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (u, v) = self.local(x as f64 + 0.5, y as f64 + 0.5);
        shape_predicate(self.class.family, u, v)
    }

    fn shade(&self, x: usize, y: usize) -> [f64; 3] {
        let (u, _) = self.local(x as f64 + 0.5, y as f64 + 0.5);
        let factor = match self.class.texture {
            Texture::Flat => 1.0,
            Texture::Stripes => {
                if ((u * 2.5 + self.stripe_phase).rem_euclid(1.0)) < 0.5 {
                    1.0
                } else {
                    0.3
                }
            }
            Texture::Noise => 0.35 + 0.65 * hash_unit(self.noise_seed, x as u64, y as u64),
        };
        self.color.map(|c| c * factor)
    }
}

/// Analytic shape predicates in the instance's normalized frame.
pub fn shape_predicate(family: Family, u: f64, v: f64) -> bool {
    match family {
        Family::Disk => u * u + v * v <= 1.0,
        Family::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
        Family::Triangle => {
            let h = 3f64.sqrt() / 2.0;
            v <= 0.5 && v >= -1.0 + (u.abs() / h) * 1.5
        }
        Family::Ring => {
            let r2 = u * u + v * v;
            (0.55 * 0.55..=1.0).contains(&r2)
        }
        Family::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        Family::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
    }
}

fn hash_unit(seed: u64, x: u64, y: u64) -> f64 {
    let mut z = seed ^ x.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ y.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Mixes several integers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Target-class pixels.
    pub mask: Mask,
    /// Per-pixel instance index plus one, 0 for background.
    pub instance_map: Array2<u8>,
    /// Class id of each instance, in drawing order.
    pub instance_classes: Vec<usize>,
}

impl Sample {
    /// Per-pixel class id plus one, 0 for background.
    pub fn label_map(&self) -> Array2<u8> {
        self.instance_map
            .mapv(|i| if i == 0 { 0 } else { self.instance_classes[i as usize - 1] as u8 + 1 })
    }

    pub fn instance_mask(&self, index: usize) -> Mask {
        self.instance_map
            .mapv(|i| if i as usize == index + 1 { 1.0 } else { 0.0 })
    }

    pub fn resolution(&self) -> usize {
        self.mask.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub class_id: usize,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Episode {
    pub fn resolution(&self) -> usize {
        self.samples.first().map_or(0, Sample::resolution)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub max_targets: usize,
    pub max_distractors: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            max_targets: 2,
            max_distractors: 2,
        }
    }
}

fn random_instance(rng: &mut ChaCha8Rng, class: ShapeClass, res: f64) -> Instance {
    let radius = rng.random_range(0.14 * res..0.26 * res);
    let margin = 0.6 * radius;
    let mut color = [0.0; 3];
    // Saturated colors away from the background's mid-gray range.
    let hue = rng.random_range(0.0..6.0f64);
    for (i, c) in color.iter_mut().enumerate() {
        let d = ((hue - 2.0 * i as f64).rem_euclid(6.0) - 3.0).abs();
        *c = (d - 1.0).clamp(0.0, 1.0) * 0.8 + 0.15;
    }
    Instance {
        class,
        center: (rng.random_range(margin..res - margin), rng.random_range(margin..res - margin)),
        radius,
        rotation: rng.random_range(0.0..std::f64::consts::TAU),
        color,
        stripe_phase: rng.random_range(0.0..1.0),
        noise_seed: rng.random(),
    }
}

fn render(instances: &[Instance], target: usize, res: usize, rng: &mut ChaCha8Rng) -> Sample {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.6));
    let grad = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let mut image = Array3::zeros((res, res, 3));
    let mut instance_map = Array2::zeros((res, res));
    for y in 0..res {
        for x in 0..res {
            let g = grad.0 * (x as f64 / res as f64 - 0.5) + grad.1 * (y as f64 / res as f64 - 0.5);
            let mut px = base.map(|b| (b + g).clamp(0.0, 1.0));
            for (k, inst) in instances.iter().enumerate() {
                if inst.contains(x, y) {
                    px = inst.shade(x, y);
                    instance_map[[y, x]] = k as u8 + 1;
                }
            }
            for c in 0..3 {
                image[[y, x, c]] = px[c];
            }
        }
    }
    let classes: Vec<usize> = instances.iter().map(|i| i.class.id()).collect();
    let mask = instance_map.mapv(|i: u8| {
        if i > 0 && classes[i as usize - 1] == target {
            1.0
        } else {
            0.0
        }
    });
    Sample {
        image,
        mask,
        instance_map,
        instance_classes: classes,
    }
}

fn visible_target_ok(sample: &Sample, target: usize) -> bool {
    sample
        .instance_classes
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == target)
        .all(|(k, _)| sample.instance_map.iter().filter(|&&i| i as usize == k + 1).count() >= MIN_VISIBLE_PIXELS)
}

pub fn generate_sample(class_id: usize, seed: u64, distractors: bool, cfg: &GeneratorConfig) -> Result<Sample> {
    let class = ShapeClass::from_id(class_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = cfg.resolution as f64;
    loop {
        let n_targets = rng.random_range(1..=cfg.max_targets.max(1));
        let n_distractors = if distractors {
            rng.random_range(0..=cfg.max_distractors)
        } else {
            0
        };
        let mut instances: Vec<Instance> = (0..n_targets).map(|_| random_instance(&mut rng, class, res)).collect();
        for _ in 0..n_distractors {
            let mut other = rng.random_range(0..NUM_CLASSES - 1);
            if other >= class_id {
                other += 1;
            }
            let other = ShapeClass::from_id(other)?;
            instances.push(random_instance(&mut rng, other, res));
        }
        // Fisher-Yates on drawing order so targets may be occluded.
        for i in (1..instances.len()).rev() {
            let j = rng.random_range(0..=i);
            instances.swap(i, j);
        }
        let sample = render(&instances, class_id, cfg.resolution, &mut rng);
        if visible_target_ok(&sample, class_id) {
            return Ok(sample);
        }
    }
}

pub fn generate_episode(class_id: usize, n_samples: usize, seed: u64, distractors: bool) -> Result<Episode> {
    generate_episode_with(class_id, n_samples, seed, distractors, &GeneratorConfig::default())
}

pub fn generate_episode_with(
    class_id: usize,
    n_samples: usize,
    seed: u64,
    distractors: bool,
    cfg: &GeneratorConfig,
) -> Result<Episode> {
    ShapeClass::from_id(class_id)?;
    if cfg.resolution < 8 {
        return Err(Error::Config(format!("resolution {} too small", cfg.resolution)));
    }
    let samples = (0..n_samples)
        .map(|i| generate_sample(class_id, derive_seed(&[seed, class_id as u64, i as u64]), distractors, cfg))
        .collect::<Result<_>>()?;
    Ok(Episode {
        class_id,
        seed,
        samples,
    })
}

fn foreground(mask: &Mask) -> Vec<Pixel> {
    mask.indexed_iter()
        .filter(|(_, &v)| v > 0.5)
        .map(|((y, x), _)| Pixel { x, y })
        .collect()
}

/// Tight inclusive bounding box `(x_min, y_min, x_max, y_max)`.
pub fn tight_box(mask: &Mask) -> Option<(usize, usize, usize, usize)> {
    foreground(mask).iter().fold(None, |acc, p| {
        Some(match acc {
            None => (p.x, p.y, p.x, p.y),
            Some((a, b, c, d)) => (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        })
    })
}

/// Derives a prompt of the requested kind from a ground-truth mask.
pub fn synthesize_prompt(mask: &Mask, kind: PromptKind, seed: u64) -> Result<Prompt> {
    if kind == PromptKind::Mask {
        return Ok(Prompt::Mask(mask.clone()));
    }
    let fg = foreground(mask);
    if fg.is_empty() {
        return Err(Error::Input(format!("cannot derive a {kind} prompt from an empty mask")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match kind {
        PromptKind::Point => Prompt::Points(vec![(fg[rng.random_range(0..fg.len())], PointLabel::Foreground)]),
        PromptKind::Box => {
            let (x_min, y_min, x_max, y_max) = tight_box(mask).expect("non-empty");
            Prompt::Box { x_min, y_min, x_max, y_max }
        }
        PromptKind::Scribble => {
            let (h, w) = mask.dim();
            let mut p = fg[rng.random_range(0..fg.len())];
            let mut walk = vec![p];
            while walk.len() < MAX_SCRIBBLE_LEN {
                let mut next = Vec::with_capacity(4);
                if p.x > 0 {
                    next.push(Pixel { x: p.x - 1, y: p.y });
                }
                if p.x + 1 < w {
                    next.push(Pixel { x: p.x + 1, y: p.y });
                }
                if p.y > 0 {
                    next.push(Pixel { x: p.x, y: p.y - 1 });
                }
                if p.y + 1 < h {
                    next.push(Pixel { x: p.x, y: p.y + 1 });
                }
                next.retain(|q| mask[[q.y, q.x]] > 0.5 && !walk.contains(q));
                if next.is_empty() {
                    break;
                }
                p = next[rng.random_range(0..next.len())];
                walk.push(p);
            }
            Prompt::Scribble(walk)
        }
        PromptKind::Mask => unreachable!(),
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| to_u8(image[[y as usize, x as usize, c]])))
    });
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_gray_png(values: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([values[[y as usize, x as usize]]]));
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    save_gray_png(&mask.mapv(|v| if v > 0.5 { 255 } else { 0 }), path)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::format(path, "missing file"));
    }
    image::open(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_rgb_png(path: &Path) -> Result<Image> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn load_gray_png(path: &Path) -> Result<Array2<u8>> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0]))
}

/// Loads a mask PNG; any nonzero pixel is foreground.
pub fn load_mask_png(path: &Path) -> Result<Mask> {
    Ok(load_gray_png(path)?.mapv(|v| if v > 0 { 1.0 } else { 0.0 }))
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_manifest(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn manifest_field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::format(path, format!("missing key {key}")))?
        .parse()
        .map_err(|_| Error::format(path, format!("bad value for {key}")))
}

fn parse_list(text: &str, path: &Path) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::format(path, format!("bad list entry {t:?}"))))
        .collect()
}

fn join(list: &[usize]) -> String {
    list.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn write_episode(episode: &Episode, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "class_id={}\nn_samples={}\nseed={}\nresolution={}\n",
        episode.class_id,
        episode.samples.len(),
        episode.seed,
        episode.resolution()
    );
    for (i, s) in episode.samples.iter().enumerate() {
        manifest.push_str(&format!("instances_{i}={}\n", join(&s.instance_classes)));
        save_rgb_png(&s.image, &dir.join(format!("sample_{i}.png")))?;
        save_mask_png(&s.mask, &dir.join(format!("sample_{i}_mask.png")))?;
        save_gray_png(&s.instance_map, &dir.join(format!("sample_{i}_instances.png")))?;
    }
    let path = dir.join("manifest");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn read_episode(dir: &Path) -> Result<Episode> {
    let path = dir.join("manifest");
    let text = fs::read_to_string(&path).map_err(|_| Error::format(&path, "missing or unreadable manifest"))?;
    let map = parse_manifest(&text, &path)?;
    let class_id: usize = manifest_field(&map, "class_id", &path)?;
    let n: usize = manifest_field(&map, "n_samples", &path)?;
    let seed: u64 = manifest_field(&map, "seed", &path)?;
    let res: usize = manifest_field(&map, "resolution", &path)?;
    ShapeClass::from_id(class_id).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let image = load_rgb_png(&dir.join(format!("sample_{i}.png")))?;
        let mask_path = dir.join(format!("sample_{i}_mask.png"));
        let mask = load_mask_png(&mask_path)?;
        if image.dim() != (res, res, 3) || mask.dim() != (res, res) {
            return Err(Error::format(&mask_path, format!("expected {res}x{res} sample")));
        }
        let inst_path = dir.join(format!("sample_{i}_instances.png"));
        let (instance_map, instance_classes) = if inst_path.is_file() {
            let classes = parse_list(map.get(&format!("instances_{i}")).map_or("", String::as_str), &path)?;
            let m = load_gray_png(&inst_path)?;
            if m.iter().any(|&v| v as usize > classes.len()) {
                return Err(Error::format(&inst_path, "instance index without class entry"));
            }
            (m, classes)
        } else {
            // Externally converted episodes may carry only a target mask.
            (mask.mapv(|v| u8::from(v > 0.5)), vec![class_id])
        };
        samples.push(Sample {
            image,
            mask,
            instance_map,
            instance_classes,
        });
    }
    Ok(Episode {
        class_id,
        seed,
        samples,
    })
}

pub fn write_fold(fold: &FoldSpec, path: &Path) -> Result<()> {
    let text = format!(
        "fold_id={}\ntrain_classes={}\ntest_classes={}\n",
        fold.fold_id,
        join(&fold.train_classes),
        join(&fold.test_classes)
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_fold(path: &Path) -> Result<FoldSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map = parse_manifest(&text, path)?;
    let fold = FoldSpec {
        fold_id: manifest_field(&map, "fold_id", path)?,
        train_classes: parse_list(map.get("train_classes").map_or("", String::as_str), path)?,
        test_classes: parse_list(map.get("test_classes").map_or("", String::as_str), path)?,
    };
    if fold.train_classes.iter().any(|c| fold.test_classes.contains(c)) {
        return Err(Error::format(path, "train and test classes overlap"));
    }
    Ok(fold)
}
