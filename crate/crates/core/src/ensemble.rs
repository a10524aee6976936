//! Logistic-regression stacking of predictor maps.
//!
//! Each pixel is a row with one column per feature predictor, in the order
//! given by [`EnsembleWeights::features`] (default `rec_error`, `kl_grad`,
//! `rec_grad`). ELBO-grad is left out since it is the sum of the two
//! gradient terms. Fitting uses a small labeled subset of whole images; the
//! rest is held out for evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::pixel_auroc;
use crate::predictors::{AnomalyMap, MapKind, PredictorKind};

pub const DEFAULT_FEATURES: [PredictorKind; 3] = [PredictorKind::RecError, PredictorKind::KlGrad, PredictorKind::RecGrad];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub labeled_fraction: f64,
    pub seed: u64,
    /// Assign whole images to one side; otherwise pixels are split independently.
    pub stratify_by_image: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            labeled_fraction: 0.10,
            seed: 0,
            stratify_by_image: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction < 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction must lie in (0, 1), got {}",
                self.labeled_fraction
            )));
        }
        Ok(())
    }

    /// Per-pixel flags (image-major order): `true` means labeled.
    pub fn assign(&self, n_images: usize, pixels_per_image: usize) -> Result<Vec<bool>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        if self.stratify_by_image {
            if n_images < 2 {
                return Err(Error::Data("an image-level split needs at least 2 images".into()));
            }
            let k = ((self.labeled_fraction * n_images as f64).round() as usize).clamp(1, n_images - 1);
            let mut order: Vec<usize> = (0..n_images).collect();
            order.shuffle(&mut rng);
            let mut labeled_image = vec![false; n_images];
            for &i in &order[..k] {
                labeled_image[i] = true;
            }
            Ok(labeled_image
                .into_iter()
                .flat_map(|l| std::iter::repeat_n(l, pixels_per_image))
                .collect())
        } else {
            Ok((0..n_images * pixels_per_image)
                .map(|_| rng.random::<f64>() < self.labeled_fraction)
                .collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    /// Coefficient of `½·‖w‖²` added to the mean cross-entropy; bias unpenalized.
    pub l2: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub standardize: bool,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iters: 10_000,
            tolerance: 1e-6,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub features: Vec<PredictorKind>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub standardized: bool,
    pub feature_stats: Option<Vec<FeatureStats>>,
    pub seed: u64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl EnsembleWeights {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if w.weights.len() != w.features.len() || !w.weights.iter().chain([&w.bias]).all(|v| v.is_finite()) {
            return Err(Error::format(path, "weights must be finite, one per feature"));
        }
        Ok(w)
    }

    /// `w·f + b` for one row of raw features.
    pub fn logit(&self, row: ArrayView1<'_, f64>) -> f64 {
        let mut z = self.bias;
        for (j, (&w, &f)) in self.weights.iter().zip(row.iter()).enumerate() {
            let f = match &self.feature_stats {
                Some(st) if self.standardized => (f - st[j].mean) / st[j].std,
                _ => f,
            };
            z += w * f;
        }
        z
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Pixels × features matrix, plus labels when masks are given.
pub fn build_feature_matrix(
    per_image: &[Vec<AnomalyMap>],
    features: &[PredictorKind],
    masks: Option<&Array4<u8>>,
) -> Result<(Array2<f64>, Option<Vec<bool>>)> {
    if features.is_empty() {
        return Err(Error::Config("at least one feature predictor is required".into()));
    }
    let Some(first) = per_image.first().and_then(|m| m.first()) else {
        return Err(Error::Data("no maps given".into()));
    };
    let (h, w) = first.scores.dim();
    let fingerprint = &first.model_fingerprint;
    if let Some(m) = masks {
        if m.dim() != (per_image.len(), 1, h, w) {
            return Err(Error::shape(format!("masks {:?}", (per_image.len(), 1, h, w)), format!("{:?}", m.dim())));
        }
    }
    let rows = per_image.len() * h * w;
    let mut x = Array2::<f64>::zeros((rows, features.len()));
    for (i, maps) in per_image.iter().enumerate() {
        for (j, &kind) in features.iter().enumerate() {
            let map = maps
                .iter()
                .find(|m| m.kind == MapKind::Predictor(kind))
                .ok_or_else(|| Error::Data(format!("image {i} has no {kind} map")))?;
            if map.scores.dim() != (h, w) {
                return Err(Error::shape(format!("{:?}", (h, w)), format!("{:?}", map.scores.dim())));
            }
            if &map.model_fingerprint != fingerprint {
                return Err(Error::Data(format!("image {i}: {kind} map comes from a different model")));
            }
            let flat = map.scores.iter().copied().collect::<Array1<f64>>();
            x.slice_mut(s![i * h * w..(i + 1) * h * w, j]).assign(&flat);
        }
    }
    let labels = masks.map(|m| m.iter().map(|&v| v != 0).collect());
    Ok((x, labels))
}

fn objective(x: &ArrayView2<'_, f64>, y: &[f64], w: &[f64], l2: f64) -> f64 {
    let n = y.len() as f64;
    let d = w.len() - 1;
    let mut loss = 0.0;
    for (row, &yi) in x.axis_iter(Axis(0)).zip(y) {
        let z = w[d] + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        // log(1 + e^z) − y·z, stable for both signs.
        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - yi * z;
    }
    loss / n + 0.5 * l2 * w[..d].iter().map(|v| v * v).sum::<f64>()
}

/// Gradient and Hessian of the objective; the bias is the last coordinate.
fn derivatives(x: &ArrayView2<'_, f64>, y: &[f64], w: &[f64], l2: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = y.len() as f64;
    let d = w.len() - 1;
    let mut g = vec![0.0; d + 1];
    let mut h = vec![vec![0.0; d + 1]; d + 1];
    let mut f = vec![1.0; d + 1];
    for (row, &yi) in x.axis_iter(Axis(0)).zip(y) {
        f[..d].iter_mut().zip(row.iter()).for_each(|(a, &b)| *a = b);
        let z = w[d] + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        let p = sigmoid(z);
        let s = p * (1.0 - p);
        for a in 0..=d {
            g[a] += (p - yi) * f[a];
            for b in 0..=a {
                h[a][b] += s * f[a] * f[b];
            }
        }
    }
    for a in 0..=d {
        g[a] /= n;
        for b in 0..=a {
            h[a][b] /= n;
            h[b][a] = h[a][b];
        }
    }
    for a in 0..d {
        g[a] += l2 * w[a];
        h[a][a] += l2;
    }
    (g, h)
}

/// Solves `h·x = g` by Gaussian elimination with partial pivoting.
fn solve(mut h: Vec<Vec<f64>>, mut g: Vec<f64>) -> Option<Vec<f64>> {
    let n = g.len();
    for c in 0..n {
        let p = (c..n).max_by(|&a, &b| h[a][c].abs().total_cmp(&h[b][c].abs()))?;
        if h[p][c].abs() < 1e-300 {
            return None;
        }
        h.swap(c, p);
        g.swap(c, p);
        for r in c + 1..n {
            let f = h[r][c] / h[c][c];
            for k in c..n {
                h[r][k] -= f * h[c][k];
            }
            g[r] -= f * g[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| h[r][k] * x[k]).sum();
        x[r] = (g[r] - s) / h[r][r];
    }
    Some(x)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Fits `P(anomalous | f) = sigmoid(w·f + b)` by damped Newton iterations on
/// the L2-penalized mean cross-entropy. Falls back to a gradient step when
/// the Newton direction is unusable.
pub fn fit_logistic(
    features: ArrayView2<'_, f64>,
    labels: &[bool],
    feature_kinds: &[PredictorKind],
    cfg: &LogisticConfig,
    seed: u64,
) -> Result<EnsembleWeights> {
    let (n, d) = features.dim();
    if n != labels.len() {
        return Err(Error::shape(format!("{n} labels"), labels.len()));
    }
    if d != feature_kinds.len() {
        return Err(Error::shape(format!("{} feature columns", feature_kinds.len()), d));
    }
    if !(cfg.l2 >= 0.0 && cfg.tolerance > 0.0) {
        return Err(Error::Config("l2 must be >= 0 and tolerance > 0".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClass);
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("feature matrix contains non-finite values".into()));
    }

    let stats = cfg.standardize.then(|| {
        features
            .axis_iter(Axis(1))
            .map(|c| {
                let mean = c.mean().unwrap_or(0.0);
                let std = c.std(0.0);
                FeatureStats {
                    mean,
                    std: if std > 0.0 { std } else { 1.0 },
                }
            })
            .collect::<Vec<_>>()
    });
    let x = match &stats {
        Some(st) => {
            let mut x = features.to_owned();
            for (mut c, s) in x.axis_iter_mut(Axis(1)).zip(st) {
                c.mapv_inplace(|v| (v - s.mean) / s.std);
            }
            x
        }
        None => features.to_owned(),
    };
    let xv = x.view();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();

    let prior = positives as f64 / n as f64;
    let mut w = vec![0.0; d + 1];
    w[d] = (prior / (1.0 - prior)).ln();
    let mut f = objective(&xv, &y, &w, cfg.l2);
    let mut iterations = 0;
    let (mut g, mut h) = derivatives(&xv, &y, &w, cfg.l2);
    while norm(&g) >= cfg.tolerance && iterations < cfg.max_iters {
        iterations += 1;
        let newton = solve(h, g.clone()).filter(|dir| dir.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() > 0.0);
        let dir = newton.unwrap_or_else(|| g.clone());
        // Backtracking until the objective decreases (Armijo).
        let slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = w.iter().zip(&dir).map(|(a, b)| a - step * b).collect();
            let ft = objective(&xv, &y, &trial, cfg.l2);
            if ft <= f - 1e-4 * step * slope {
                w = trial;
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        (g, h) = derivatives(&xv, &y, &w, cfg.l2);
        if !accepted {
            // No decrease representable in floating point; the gradient is
            // as small as this data allows.
            break;
        }
    }
    let gradient_norm = norm(&g);
    if gradient_norm >= cfg.tolerance {
        log::warn!("logistic fit stopped after {iterations} iterations with gradient norm {gradient_norm:.3e}");
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("logistic fit produced non-finite weights".into()));
    }
    Ok(EnsembleWeights {
        features: feature_kinds.to_vec(),
        weights: w[..d].to_vec(),
        bias: w[d],
        standardized: cfg.standardize,
        feature_stats: stats,
        seed,
        iterations,
        gradient_norm,
    })
}

fn image_features(weights: &EnsembleWeights, maps: &[AnomalyMap]) -> Result<(Array2<f64>, (usize, usize), String)> {
    let (x, _) = build_feature_matrix(std::slice::from_ref(&maps.to_vec()), &weights.features, None)?;
    let first = maps
        .iter()
        .find(|m| m.kind == MapKind::Predictor(weights.features[0]))
        .expect("feature matrix found it");
    Ok((x, first.scores.dim(), first.model_fingerprint.clone()))
}

/// Linear score `w·f + b` per pixel. Ranks pixels exactly like
/// [`predict_map`] but does not saturate in floating point.
pub fn predict_logit_map(weights: &EnsembleWeights, maps: &[AnomalyMap]) -> Result<AnomalyMap> {
    let (x, dim, model_fingerprint) = image_features(weights, maps)?;
    let scores = x.axis_iter(Axis(0)).map(|r| weights.logit(r)).collect::<Array1<f64>>();
    Ok(AnomalyMap {
        scores: scores.into_shape_with_order(dim).expect("one score per pixel"),
        kind: MapKind::Ensemble,
        model_fingerprint,
    })
}

/// Anomaly probability per pixel, kept inside the open interval (0, 1).
pub fn predict_map(weights: &EnsembleWeights, maps: &[AnomalyMap]) -> Result<AnomalyMap> {
    let mut m = predict_logit_map(weights, maps)?;
    let hi = 1.0 - f64::EPSILON / 2.0;
    m.scores.mapv_inplace(|z| sigmoid(z).clamp(f64::MIN_POSITIVE, hi));
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub weights: EnsembleWeights,
    pub split: SplitSpec,
    pub labeled_pixels: usize,
    pub heldout_pixels: usize,
    /// Held-out AUROC of the ensemble and of every supplied predictor.
    pub heldout_auroc: BTreeMap<String, f64>,
}

impl EnsembleReport {
    pub fn best_single(&self) -> Option<(String, f64)> {
        self.heldout_auroc
            .iter()
            .filter(|(k, _)| k.as_str() != "ensemble")
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.clone(), *v))
    }
}

/// Fits on the labeled split and scores the held-out pixels.
///
/// `per_image` holds every available predictor map for each image; those
/// not used as features still get a held-out AUROC for comparison.
pub fn fit_and_evaluate(
    per_image: &[Vec<AnomalyMap>],
    masks: &Array4<u8>,
    features: &[PredictorKind],
    split: &SplitSpec,
    cfg: &LogisticConfig,
) -> Result<EnsembleReport> {
    let (x, labels) = build_feature_matrix(per_image, features, Some(masks))?;
    let labels = labels.expect("masks given");
    let pixels_per_image = x.nrows() / per_image.len();
    let labeled = split.assign(per_image.len(), pixels_per_image)?;
    let train_rows: Vec<usize> = (0..labeled.len()).filter(|&i| labeled[i]).collect();
    let test_rows: Vec<usize> = (0..labeled.len()).filter(|&i| !labeled[i]).collect();
    let train_labels: Vec<bool> = train_rows.iter().map(|&i| labels[i]).collect();
    let weights = fit_logistic(x.select(Axis(0), &train_rows).view(), &train_labels, features, cfg, split.seed)?;

    let test_labels: Vec<bool> = test_rows.iter().map(|&i| labels[i]).collect();
    let mut heldout = BTreeMap::new();
    let logits: Vec<f64> = test_rows.iter().map(|&i| weights.logit(x.row(i))).collect();
    heldout.insert(MapKind::Ensemble.to_string(), pixel_auroc(&logits, &test_labels)?);

    let mut kinds: Vec<MapKind> = per_image[0].iter().map(|m| m.kind).collect();
    kinds.sort();
    kinds.dedup();
    for kind in kinds {
        let mut pooled = Vec::with_capacity(labeled.len());
        for (i, maps) in per_image.iter().enumerate() {
            let m = maps
                .iter()
                .find(|m| m.kind == kind)
                .ok_or_else(|| Error::Data(format!("image {i} has no {kind} map")))?;
            pooled.extend(m.scores.iter().copied());
        }
        if pooled.len() != labeled.len() {
            return Err(Error::shape(format!("{} pixels", labeled.len()), pooled.len()));
        }
        let scores: Vec<f64> = test_rows.iter().map(|&i| pooled[i]).collect();
        heldout.insert(kind.to_string(), pixel_auroc(&scores, &test_labels)?);
    }
    Ok(EnsembleReport {
        weights,
        split: *split,
        labeled_pixels: train_rows.len(),
        heldout_pixels: test_rows.len(),
        heldout_auroc: heldout,
    })
}
