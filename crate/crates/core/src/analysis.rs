//! Representation diagnostics and segmentation metrics: object-level
//! features, PCA, k-means centroid assignment, component sweeps, a
//! pixel-level linear probe, PCA-to-RGB rendering and IoU bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::AdapterSet;
use crate::data::Episode;
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::pipeline::Model;
use crate::Mask;

/// Fraction of a token's patch that must be mask-covered for the token to
/// count toward an object feature.
pub const COVERAGE_THRESHOLD: f64 = 0.5;
pub const KMEANS_RESTARTS: usize = 50;
const KMEANS_MAX_ITERS: usize = 100;

// ---------------------------------------------------------------- metrics

/// `|pred & gt| / |pred | gt|`, or 1 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(if u == 0.0 { 1.0 } else { i / u })
}

fn intersection_union(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    let (mut i, mut u) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p > 0.5, g > 0.5);
        i += f64::from(u8::from(p && g));
        u += f64::from(u8::from(p || g));
    }
    Ok((i, u))
}

/// Per-class IoU accumulated over many images: each class scores
/// `sum(intersection) / sum(union)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IouAccumulator {
    totals: BTreeMap<usize, (f64, f64)>,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class_id: usize, pred: &Mask, gt: &Mask) -> Result<()> {
        let (i, u) = intersection_union(pred, gt)?;
        let t = self.totals.entry(class_id).or_default();
        t.0 += i;
        t.1 += u;
        Ok(())
    }

    pub fn per_class(&self) -> BTreeMap<usize, f64> {
        self.totals
            .iter()
            .map(|(&c, &(i, u))| (c, if u == 0.0 { 1.0 } else { i / u }))
            .collect()
    }

    /// Mean over classes; 0 when nothing was added.
    pub fn miou(&self) -> f64 {
        let per = self.per_class();
        if per.is_empty() {
            0.0
        } else {
            per.values().sum::<f64>() / per.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: BTreeMap<usize, f64>,
    pub miou: f64,
}

/// mIoU over `(class, prediction, ground truth)` triples.
pub fn compute_miou<'a>(items: impl IntoIterator<Item = (usize, &'a Mask, &'a Mask)>) -> Result<MiouReport> {
    let mut acc = IouAccumulator::new();
    for (c, p, g) in items {
        acc.add(c, p, g)?;
    }
    Ok(MiouReport {
        per_class: acc.per_class(),
        miou: acc.miou(),
    })
}

// ------------------------------------------------------- object features

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectFeature {
    pub vector: Array1<f64>,
    pub class_id: usize,
    pub split: Split,
}

/// Fraction of every patch covered by `mask`, one value per token.
pub fn token_coverage(mask: &Mask, patch: usize, grid: (usize, usize)) -> Result<Array2<f64>> {
    if mask.dim() != (grid.0 * patch, grid.1 * patch) {
        return Err(Error::Shape(format!("mask {:?} vs token grid {grid:?} x {patch}", mask.dim())));
    }
    Ok(Array2::from_shape_fn(grid, |(ty, tx)| {
        mask.slice(ndarray::s![ty * patch..(ty + 1) * patch, tx * patch..(tx + 1) * patch])
            .iter()
            .filter(|&&v| v > 0.5)
            .count() as f64
            / (patch * patch) as f64
    }))
}

/// Mean of the tokens at least half covered by `mask`, or `None` when no
/// token qualifies.
pub fn object_vector(features: &FeatureMap, mask: &Mask, patch: usize) -> Result<Option<Array1<f64>>> {
    let cover = token_coverage(mask, patch, (features.height, features.width))?;
    let mut sum = Array1::zeros(features.dim());
    let mut n = 0usize;
    for (t, &c) in cover.iter().enumerate() {
        if c >= COVERAGE_THRESHOLD {
            sum += &features.tokens.row(t);
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// One feature per instance of each episode's class.
pub fn extract_object_features(
    model: &Model,
    adapters: Option<&AdapterSet>,
    episodes: &[&Episode],
    split: Split,
) -> Result<Vec<ObjectFeature>> {
    let patch = model.config().patch_size;
    let mut out = Vec::new();
    for ep in episodes {
        for (s_idx, s) in ep.samples.iter().enumerate() {
            let features = model.encode(&s.image, adapters, "object")?;
            for (k, &c) in s.instance_classes.iter().enumerate() {
                if c != ep.class_id {
                    continue;
                }
                match object_vector(&features, &s.instance_mask(k), patch)? {
                    Some(vector) => out.push(ObjectFeature {
                        vector,
                        class_id: c,
                        split,
                    }),
                    None => log::warn!(
                        "class {} sample {s_idx} instance {k}: no token reaches {COVERAGE_THRESHOLD} coverage, skipped",
                        ep.class_id
                    ),
                }
            }
        }
    }
    Ok(out)
}

fn stack(features: &[ObjectFeature]) -> Array2<f64> {
    let d = features.first().map_or(0, |f| f.vector.len());
    let mut out = Array2::zeros((features.len(), d));
    for (i, f) in features.iter().enumerate() {
        out.row_mut(i).assign(&f.vector);
    }
    out
}

// -------------------------------------------------------------------- PCA

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// Orthonormal rows, by decreasing explained variance.
    pub components: Array2<f64>,
    pub explained_variance_ratio: Array1<f64>,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Maps reduced coordinates back to the input space.
    pub fn reconstruct(&self, reduced: &Array2<f64>) -> Array2<f64> {
        let k = reduced.ncols();
        reduced.dot(&self.components.slice(ndarray::s![..k, ..])) + &self.mean
    }
}

/// PCA of the rows of `data` via an SVD of the centered matrix.
pub fn pca_fit(data: &Array2<f64>) -> Result<PcaModel> {
    let (n, d) = data.dim();
    if n < 2 {
        return Err(Error::Input(format!("PCA needs at least 2 samples, got {n}")));
    }
    if d == 0 {
        return Err(Error::Input("PCA needs at least one feature".into()));
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centered = data - &mean;
    // Zero rows leave the right singular vectors unchanged and make V square.
    let rows = n.max(d);
    let m = DMatrix::from_fn(rows, d, |i, j| if i < n { centered[[i, j]] } else { 0.0 });
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let components = Array2::from_shape_fn((d, d), |(r, c)| v_t[(order[r], c)]);
    let variances: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let total: f64 = variances.iter().sum();
    let explained_variance_ratio = if total > 0.0 {
        variances.iter().map(|v| v / total).collect()
    } else {
        Array1::zeros(d)
    };
    Ok(PcaModel {
        mean,
        components,
        explained_variance_ratio,
    })
}

pub fn pca_project(model: &PcaModel, data: &Array2<f64>, n_components: usize) -> Result<Array2<f64>> {
    if n_components == 0 || n_components > model.dim() {
        return Err(Error::Input(format!(
            "n_components must lie in [1, {}], got {n_components}",
            model.dim()
        )));
    }
    if data.ncols() != model.dim() {
        return Err(Error::Shape(format!("data width {} vs PCA width {}", data.ncols(), model.dim())));
    }
    Ok((data - &model.mean).dot(&model.components.slice(ndarray::s![..n_components, ..]).t()))
}

// ---------------------------------------------------------------- k-means

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ndarray::ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    centroids
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(point, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn kmeans_once(data: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> KMeans {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    centroids.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = data.rows().into_iter().map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, r) in data.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centroids.row(c)));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, r) in data.rows().into_iter().enumerate() {
            let (c, _) = nearest(r, &centroids);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, r) in data.rows().into_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(1.0, &r);
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    let inertia = data
        .rows()
        .into_iter()
        .zip(&labels)
        .map(|(r, &l)| sq_dist(r, centroids.row(l)))
        .sum();
    KMeans {
        centroids,
        labels,
        inertia,
    }
}

/// k-means++ with `restarts` independent runs; the lowest inertia wins.
pub fn kmeans(data: &Array2<f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeans> {
    if k == 0 || k > data.nrows() {
        return Err(Error::Input(format!("k={k} with {} points", data.nrows())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans_once(data, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

/// Nearest-centroid accuracy. Centroids come from k-means on the (optionally
/// PCA-reduced) train features, each cluster labelled by its majority train
/// class (ties to the lowest id); the score is the mean per-class accuracy on
/// the test features. `n_components = None` uses the raw features.
pub fn centroid_assignment_accuracy(
    train: &[ObjectFeature],
    test: &[ObjectFeature],
    n_components: Option<usize>,
    seed: u64,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("centroid assignment needs train and test features".into()));
    }
    let classes: BTreeSet<usize> = train.iter().map(|f| f.class_id).collect();
    if let Some(f) = test.iter().find(|f| !classes.contains(&f.class_id)) {
        return Err(Error::Input(format!("test class {} has no train features", f.class_id)));
    }
    let (mut xtr, mut xte) = (stack(train), stack(test));
    if let Some(n) = n_components {
        let pca = pca_fit(&xtr)?;
        xtr = pca_project(&pca, &xtr, n)?;
        xte = pca_project(&pca, &xte, n)?;
    }
    let km = kmeans(&xtr, classes.len(), seed, KMEANS_RESTARTS)?;
    let mut votes: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); classes.len()];
    for (f, &l) in train.iter().zip(&km.labels) {
        *votes[l].entry(f.class_id).or_default() += 1;
    }
    // Highest count, then lowest class id.
    let cluster_class: Vec<Option<usize>> = votes
        .iter()
        .map(|v| v.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&c, _)| c))
        .collect();
    let live: Vec<usize> = (0..classes.len()).filter(|&c| cluster_class[c].is_some()).collect();
    let live_centroids = km.centroids.select(Axis(0), &live);
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (f, row) in test.iter().zip(xte.rows()) {
        let (c, _) = nearest(row, &live_centroids);
        let predicted = cluster_class[live[c]].expect("live cluster");
        let e = per_class.entry(f.class_id).or_default();
        e.0 += usize::from(predicted == f.class_id);
        e.1 += 1;
    }
    Ok(per_class.values().map(|&(hit, n)| hit as f64 / n as f64).sum::<f64>() / per_class.len() as f64)
}

/// Accuracy at each grid point divided by the unreduced accuracy.
pub fn pca_sweep(
    train: &[ObjectFeature],
    test: &[ObjectFeature],
    grid: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let full = centroid_assignment_accuracy(train, test, None, seed)?;
    if full == 0.0 {
        return Err(Error::Normalization("full-feature accuracy is zero".into()));
    }
    grid.iter()
        .map(|&n| Ok((n, centroid_assignment_accuracy(train, test, Some(n), seed)? / full)))
        .collect()
}

pub fn sweep_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("n_components,relative_accuracy\n");
    for (n, r) in curve {
        s.push_str(&format!("{n},{r}\n"));
    }
    s
}

// ------------------------------------------------------------ linear probe

/// Token features and the per-pixel class labels of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSample {
    pub features: FeatureMap,
    /// Class index per pixel, `0..num_classes`.
    pub labels: Array2<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.05,
        }
    }
}

/// Linear classifier from token features to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `(d, classes)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub patch: usize,
}

impl LinearProbe {
    pub fn zeros(d: usize, classes: usize, patch: usize) -> Self {
        Self {
            weight: Array2::zeros((d, classes)),
            bias: Array1::zeros(classes),
            patch,
        }
    }

    /// Pixel labels: argmax per token (lowest index on ties), upsampled by
    /// nearest neighbour.
    pub fn predict(&self, features: &FeatureMap) -> Array2<usize> {
        let logits = features.tokens.dot(&self.weight) + &self.bias;
        let p = self.patch;
        Array2::from_shape_fn((features.height * p, features.width * p), |(y, x)| {
            let row = logits.row((y / p) * features.width + x / p);
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        })
    }
}

fn label_fractions(labels: &Array2<usize>, patch: usize, grid: (usize, usize), classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((grid.0 * grid.1, classes));
    for ((y, x), &l) in labels.indexed_iter() {
        out[[(y / patch) * grid.1 + x / patch, l]] += 1.0;
    }
    out / (patch * patch) as f64
}

/// Fits the probe with full-batch Adam on pixel cross-entropy. Because
/// logits are upsampled by nearest neighbour, pixel cross-entropy equals
/// token cross-entropy against the patch's label fractions.
pub fn fit_linear_probe(train: &[ProbeSample], num_classes: usize, patch: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let first = train.first().ok_or_else(|| Error::Input("probe needs training images".into()))?;
    let d = first.features.dim();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in train {
        let grid = (s.features.height, s.features.width);
        if s.labels.dim() != (grid.0 * patch, grid.1 * patch) {
            return Err(Error::Shape(format!("labels {:?} vs grid {grid:?}", s.labels.dim())));
        }
        if s.labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::Input(format!("label outside 0..{num_classes}")));
        }
        xs.push(s.features.tokens.view());
        ys.push(label_fractions(&s.labels, patch, grid, num_classes));
    }
    let x = ndarray::concatenate(Axis(0), &xs).map_err(|e| Error::Shape(e.to_string()))?;
    let yv: Vec<_> = ys.iter().map(|y| y.view()).collect();
    let y = ndarray::concatenate(Axis(0), &yv).expect("same class count");
    let n = x.nrows() as f64;

    let mut probe = LinearProbe::zeros(d, num_classes, patch);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m_w = Array2::<f64>::zeros((d, num_classes));
    let mut v_w = m_w.clone();
    let mut m_b = Array1::<f64>::zeros(num_classes);
    let mut v_b = m_b.clone();
    for t in 1..=cfg.steps {
        let mut p = x.dot(&probe.weight) + &probe.bias;
        crate::autodiff::softmax_rows(&mut p);
        let g = (p - &y) / n;
        let gw = x.t().dot(&g);
        let gb = g.sum_axis(Axis(0));
        let (c1, c2) = (1.0 - f64::powi(b1, t as i32), 1.0 - f64::powi(b2, t as i32));
        m_w = &m_w * b1 + &gw * (1.0 - b1);
        v_w = &v_w * b2 + &(&gw * &gw) * (1.0 - b2);
        m_b = &m_b * b1 + &gb * (1.0 - b1);
        v_b = &v_b * b2 + &(&gb * &gb) * (1.0 - b2);
        probe.weight -= &((&m_w / c1) / ((&v_w / c2).mapv(f64::sqrt) + eps) * cfg.learning_rate);
        probe.bias -= &((&m_b / c1) / ((&v_b / c2).mapv(f64::sqrt) + eps) * cfg.learning_rate);
    }
    Ok(probe)
}

/// mIoU of a probe over every class present in the test labels or
/// predictions.
pub fn probe_miou(probe: &LinearProbe, test: &[ProbeSample]) -> Result<MiouReport> {
    let mut acc = IouAccumulator::new();
    for s in test {
        let pred = probe.predict(&s.features);
        if pred.dim() != s.labels.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs labels {:?}", pred.dim(), s.labels.dim())));
        }
        let present: BTreeSet<usize> = pred.iter().chain(s.labels.iter()).copied().collect();
        for c in present {
            let pm = pred.mapv(|l| f64::from(u8::from(l == c)));
            let gm = s.labels.mapv(|l| f64::from(u8::from(l == c)));
            acc.add(c, &pm, &gm)?;
        }
    }
    Ok(MiouReport {
        per_class: acc.per_class(),
        miou: acc.miou(),
    })
}

/// Trains a probe on `train` and reports test mIoU.
pub fn linear_probe(
    train: &[ProbeSample],
    test: &[ProbeSample],
    num_classes: usize,
    patch: usize,
    cfg: &ProbeConfig,
) -> Result<MiouReport> {
    let seen: BTreeSet<usize> = train.iter().flat_map(|s| s.labels.iter().copied()).collect();
    if let Some(c) = test.iter().flat_map(|s| s.labels.iter().copied()).find(|c| !seen.contains(c)) {
        return Err(Error::Input(format!("class {c} appears in test labels but not in training")));
    }
    let probe = fit_linear_probe(train, num_classes, patch, cfg)?;
    probe_miou(&probe, test)
}

/// Probe samples for every image of `episodes`. Pixel labels are the index
/// of the pixel's class in `classes` plus one; anything else is background.
pub fn probe_samples(
    model: &Model,
    adapters: Option<&AdapterSet>,
    episodes: &[&Episode],
    classes: &[usize],
) -> Result<Vec<ProbeSample>> {
    let mut out = Vec::new();
    for ep in episodes {
        for s in &ep.samples {
            let features = model.encode(&s.image, adapters, "probe")?;
            let labels = s.instance_map.mapv(|i| {
                if i == 0 {
                    return 0;
                }
                let c = s.instance_classes[i as usize - 1];
                classes.iter().position(|&k| k == c).map_or(0, |p| p + 1)
            });
            out.push(ProbeSample { features, labels });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- PCA-RGB

/// Projects every token of every map onto the first three joint principal
/// components, min-max scales each channel to `[0, 255]` (constant channels
/// become 128) and upsamples each map to `image_size`. Maps are placed side
/// by side.
pub fn pca_rgb(features: &[FeatureMap], image_size: usize) -> Result<Array3<u8>> {
    let first = features.first().ok_or_else(|| Error::Input("no feature maps".into()))?;
    let d = first.dim();
    if d < 3 {
        return Err(Error::Input(format!("PCA-RGB needs at least 3 feature dims, got {d}")));
    }
    if features.iter().any(|f| f.dim() != d) {
        return Err(Error::Shape("feature maps differ in width".into()));
    }
    let views: Vec<_> = features.iter().map(|f| f.tokens.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).expect("same width");
    let pca = pca_fit(&all)?;
    let proj = pca_project(&pca, &all, 3)?;
    let mut scaled = Array2::<u8>::zeros(proj.dim());
    for c in 0..3 {
        let col = proj.column(c);
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = hi - lo;
        for (i, &v) in col.iter().enumerate() {
            scaled[[i, c]] = if range <= 1e-12 * (1.0 + hi.abs()) {
                128
            } else {
                ((v - lo) / range * 255.0).round() as u8
            };
        }
    }
    let mut out = Array3::zeros((image_size, image_size * features.len(), 3));
    let mut offset = 0;
    for (k, f) in features.iter().enumerate() {
        for y in 0..image_size {
            for x in 0..image_size {
                let t = offset + (y * f.height / image_size) * f.width + x * f.width / image_size;
                for c in 0..3 {
                    out[[y, k * image_size + x, c]] = scaled[[t, c]];
                }
            }
        }
        offset += f.height * f.width;
    }
    Ok(out)
}

pub fn pca_rgb_export(features: &[FeatureMap], image_size: usize, path: &Path) -> Result<Array3<u8>> {
    let img = pca_rgb(features, image_size)?;
    let (h, w, _) = img.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| img[[y as usize, x as usize, c]]))
    });
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn feat(v: &[f64], class_id: usize) -> ObjectFeature {
        ObjectFeature {
            vector: Array1::from(v.to_vec()),
            class_id,
            split: Split::Train,
        }
    }

    #[test]
    fn iou_examples() {
        let mut a = Mask::zeros((20, 20));
        let mut b = Mask::zeros((20, 20));
        a.slice_mut(ndarray::s![0..10, 0..10]).fill(1.0);
        b.slice_mut(ndarray::s![0..10, 5..15]).fill(1.0);
        assert!((iou(&a, &b).unwrap() - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let mut c = Mask::zeros((20, 20));
        c[[19, 19]] = 1.0;
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        assert_eq!(iou(&Mask::zeros((2, 2)), &Mask::zeros((2, 2))).unwrap(), 1.0);
        assert!(matches!(iou(&a, &Mask::zeros((3, 3))), Err(Error::Shape(_))));
    }

    #[test]
    fn object_vector_toy() {
        let tokens = array![[1.0, 2.0], [3.0, 6.0]];
        let f = FeatureMap::new(tokens, 1, 2, "t").unwrap();
        let mut m = Mask::zeros((2, 4));
        m.slice_mut(ndarray::s![.., 0..2]).fill(1.0);
        m[[0, 2]] = 1.0;
        m[[1, 2]] = 1.0;
        // Second patch is exactly half covered and counts.
        assert_eq!(object_vector(&f, &m, 2).unwrap().unwrap(), array![2.0, 4.0]);
        m[[1, 2]] = 0.0;
        assert_eq!(object_vector(&f, &m, 2).unwrap().unwrap(), array![1.0, 2.0]);
        assert!(object_vector(&f, &Mask::zeros((2, 4)), 2).unwrap().is_none());
    }

    #[test]
    fn pca_line_and_reconstruction() {
        let line = Array2::from_shape_fn((10, 2), |(i, j)| if j == 0 { i as f64 } else { 2.0 * i as f64 });
        let p = pca_fit(&line).unwrap();
        assert!(p.explained_variance_ratio[0] >= 1.0 - 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((7, 5), |_| rng.random_range(-1.0..1.0));
        let p = pca_fit(&x).unwrap();
        let back = p.reconstruct(&pca_project(&p, &x, 5).unwrap());
        assert!((&back - &x).iter().all(|v| v.abs() < 1e-9));
        assert!(pca_project(&p, &x, 6).is_err());
        assert!(pca_fit(&x.slice(ndarray::s![0..1, ..]).to_owned()).is_err());
        // Fewer samples than dims still yields a complete basis.
        let gram = p.components.dot(&p.components.t());
        assert!((&gram - &Array2::<f64>::eye(5)).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn separated_points_are_perfectly_assigned() {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..3 {
            let v = [c as f64 * 10.0, -(c as f64) * 5.0, 1.0];
            for _ in 0..4 {
                train.push(feat(&v, c));
            }
            test.push(feat(&v, c));
        }
        assert_eq!(centroid_assignment_accuracy(&train, &test, None, 0).unwrap(), 1.0);
        assert_eq!(centroid_assignment_accuracy(&train, &test, Some(2), 0).unwrap(), 1.0);
        test.push(feat(&[0.0, 0.0, 0.0], 9));
        assert!(matches!(centroid_assignment_accuracy(&train, &test, None, 0), Err(Error::Input(_))));
    }

    #[test]
    fn sweep_rows_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng, c: usize| {
            let v: Vec<f64> = (0..4).map(|j| if j == c { 5.0 } else { 0.0 } + rng.random_range(-1.0..1.0)).collect();
            feat(&v, c)
        };
        let train: Vec<_> = (0..24).map(|i| mk(&mut rng, i % 3)).collect();
        let test: Vec<_> = (0..9).map(|i| mk(&mut rng, i % 3)).collect();
        let curve = pca_sweep(&train, &test, &[2, 4], 0).unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[1].1, 1.0);
        assert!(sweep_csv(&curve).starts_with("n_components,relative_accuracy\n2,"));
    }

    #[test]
    fn probe_on_indicator_features() {
        let mk = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels_tok: Vec<usize> = (0..16).map(|_| rng.random_range(0..3)).collect();
            let tokens = Array2::from_shape_fn((16, 3), |(t, c)| f64::from(u8::from(labels_tok[t] == c)));
            let labels = Array2::from_shape_fn((8, 8), |(y, x)| labels_tok[(y / 2) * 4 + x / 2]);
            ProbeSample {
                features: FeatureMap::new(tokens, 4, 4, "p").unwrap(),
                labels,
            }
        };
        let train: Vec<_> = (0..4).map(mk).collect();
        let test: Vec<_> = (10..12).map(mk).collect();
        let r = linear_probe(&train, &test, 3, 2, &ProbeConfig::default()).unwrap();
        assert!(r.miou >= 0.99, "{r:?}");
        let zero = fit_linear_probe(&train, 3, 2, &ProbeConfig { steps: 0, ..ProbeConfig::default() }).unwrap();
        assert!(zero.predict(&test[0].features).iter().all(|&l| l == 0));
    }

    #[test]
    fn pca_rgb_constant_and_size() {
        let f = FeatureMap::new(Array2::from_elem((4, 5), 0.3), 2, 2, "c").unwrap();
        let img = pca_rgb(&[f.clone(), f], 8).unwrap();
        assert_eq!(img.dim(), (8, 16, 3));
        assert!(img.iter().all(|&v| v == 128));
        let narrow = FeatureMap::new(Array2::zeros((4, 2)), 2, 2, "n").unwrap();
        assert!(matches!(pca_rgb(&[narrow], 8), Err(Error::Input(_))));
    }
}
