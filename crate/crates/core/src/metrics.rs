//! Pixel-wise AUROC and dataset-level evaluation.
//!
//! AUROC is computed over all test pixels pooled into one ROC curve, not as
//! a mean of per-image curves. Tied scores receive midranks, which makes the
//! rank statistic equal to the pairwise definition
//! `(wins + ½·ties) / (P·N)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{s, Array4, ArrayView4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::fingerprint;
use crate::model::{ImageBatch, Vae};
use crate::predictors::{model_fingerprint, AnomalyMap, MapKind, PredictorConfig, PredictorKind, Scorer};
use crate::projection::{proj_rec_error_map, ProjectionConfig};
use crate::real::Real;

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", scores.len()), labels.len()));
    }
    if let Some(i) = scores.iter().position(|v| v.is_nan()) {
        return Err(Error::Numerical(format!("score {i} is NaN")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Probability that a random positive pixel outscores a random negative one.
pub fn pixel_auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based) midranks of the positives, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share the midrank (i + 1 + j) / 2.
        let positives = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += positives * (i + 1 + j) as u128;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2.0 * (p * n) as f64))
}

/// Pairwise O(P·N) reference for [`pixel_auroc`].
pub fn auroc_bruteforce_oracle(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut twice_wins: u64 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            if si > sj {
                twice_wins += 2;
            } else if si == sj {
                twice_wins += 1;
            }
        }
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Flattens maps and masks in image order, for pooled AUROC.
pub fn pool(maps: &[AnomalyMap], masks: &Array4<u8>) -> Result<(Vec<f64>, Vec<bool>)> {
    if maps.len() != masks.dim().0 {
        return Err(Error::shape(format!("{} masks", maps.len()), masks.dim().0));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, m) in maps.iter().enumerate() {
        let mask = masks.slice(s![i, 0, .., ..]);
        if mask.dim() != m.scores.dim() {
            return Err(Error::shape(format!("{:?}", m.scores.dim()), format!("{:?}", mask.dim())));
        }
        scores.extend(m.scores.iter());
        labels.extend(mask.iter().map(|&v| v != 0));
    }
    Ok((scores, labels))
}

/// Projection settings for evaluation; each lambda is run and the best
/// AUROC is reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSweep {
    pub base: ProjectionConfig,
    pub lambdas: Vec<f64>,
}

impl Default for ProjectionSweep {
    fn default() -> Self {
        Self {
            base: ProjectionConfig::default(),
            lambdas: vec![0.1, 1.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub predictors: Vec<PredictorKind>,
    pub predictor_cfg: PredictorConfig,
    pub projection: Option<ProjectionSweep>,
    /// Images per forward pass.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalRequest {
    fn default() -> Self {
        Self {
            predictors: PredictorKind::ALL.to_vec(),
            predictor_cfg: PredictorConfig::default(),
            projection: None,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by predictor name (`rec_error`, ..., `proj_rec_error`, `ensemble`).
    pub per_predictor_auroc: BTreeMap<String, f64>,
    /// AUROC of `proj_rec_error` for each lambda tried.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub projection_sweep: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_lambda: Option<f64>,
    pub pixel_count: usize,
    pub positive_fraction: f64,
    pub config_fingerprint: String,
    pub model_fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn auroc(&self, kind: MapKind) -> Option<f64> {
        self.per_predictor_auroc.get(&kind.to_string()).copied()
    }

    /// Table with one row per predictor.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Predictor | AUROC |\n|---|---|\n");
        let order = PredictorKind::ALL
            .iter()
            .map(|k| MapKind::Predictor(*k))
            .chain([MapKind::ProjRecError, MapKind::Ensemble]);
        for kind in order {
            if let Some(v) = self.auroc(kind) {
                let label = match (kind, self.best_lambda) {
                    (MapKind::ProjRecError, Some(l)) => format!("{kind} (λ={l})"),
                    _ => kind.to_string(),
                };
                writeln!(out, "| {label} | {v:.3} |").expect("writing to a String");
            }
        }
        writeln!(
            out,
            "\n{} pixels, {:.2}% anomalous, pooled over all images.",
            self.pixel_count,
            100.0 * self.positive_fraction
        )
        .expect("writing to a String");
        out
    }
}

/// Maps for every requested predictor, keyed `[kind][image]`, computed in
/// fixed-size chunks so results do not depend on the thread count.
pub fn compute_maps<T: Real>(
    model: &Vae<T>,
    images: ArrayView4<'_, T>,
    kinds: &[PredictorKind],
    cfg: &PredictorConfig,
    batch_size: usize,
) -> Result<Vec<Vec<AnomalyMap>>> {
    let scorer = Scorer::new(model, *cfg);
    let n = images.dim().0;
    let chunks: Vec<_> = (0..n).step_by(batch_size.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|&start| {
            let end = (start + batch_size.max(1)).min(n);
            scorer.score_many(images.slice(s![start..end, .., .., ..]), kinds)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<Vec<AnomalyMap>> = vec![Vec::with_capacity(n); kinds.len()];
    for part in parts {
        for (k, maps) in part.into_iter().enumerate() {
            out[k].extend(maps);
        }
    }
    Ok(out)
}

pub fn compute_projection_maps<T: Real>(
    model: &Vae<T>,
    images: ArrayView4<'_, T>,
    cfg: &ProjectionConfig,
    batch_size: usize,
) -> Result<Vec<AnomalyMap>> {
    let n = images.dim().0;
    let chunks: Vec<_> = (0..n).step_by(batch_size.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|&start| {
            let end = (start + batch_size.max(1)).min(n);
            proj_rec_error_map(model, images.slice(s![start..end, .., .., ..]), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// One pooled AUROC per requested predictor. Uses the global rayon pool;
/// wrap the call in `ThreadPool::install` to bound the worker count.
pub fn evaluate_dataset<T: Real>(
    model: &Vae<T>,
    test: &ImageBatch<T>,
    masks: Option<&Array4<u8>>,
    request: &EvalRequest,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let masks = masks.ok_or_else(|| Error::Data("evaluation needs ground-truth masks".into()))?;
    let (b, _, h, w) = test.data.dim();
    if masks.dim() != (b, 1, h, w) {
        return Err(Error::shape(format!("masks {:?}", (b, 1, h, w)), format!("{:?}", masks.dim())));
    }
    if request.predictors.is_empty() && request.projection.is_none() {
        return Err(Error::Config("no predictors requested".into()));
    }
    let labels: Vec<bool> = masks.iter().map(|&v| v != 0).collect();
    let positives = labels.iter().filter(|&&l| l).count();

    let mut per_predictor = BTreeMap::new();
    let maps = compute_maps(model, test.view(), &request.predictors, &request.predictor_cfg, request.batch_size)?;
    for (kind, maps) in request.predictors.iter().zip(&maps) {
        let (scores, labels) = pool(maps, masks)?;
        per_predictor.insert(kind.to_string(), pixel_auroc(&scores, &labels)?);
    }

    let mut sweep = BTreeMap::new();
    let mut best_lambda = None;
    if let Some(p) = &request.projection {
        let mut best = f64::NEG_INFINITY;
        for &lambda in &p.lambdas {
            let cfg = ProjectionConfig { lambda, ..p.base };
            let maps = compute_projection_maps(model, test.view(), &cfg, request.batch_size)?;
            let (scores, labels) = pool(&maps, masks)?;
            let auc = pixel_auroc(&scores, &labels)?;
            log::info!("proj_rec_error lambda={lambda}: AUROC {auc:.4}");
            sweep.insert(lambda.to_string(), auc);
            if auc > best {
                best = auc;
                best_lambda = Some(lambda);
            }
        }
        if best_lambda.is_some() {
            per_predictor.insert(MapKind::ProjRecError.to_string(), best);
        }
    }

    Ok(EvalReport {
        per_predictor_auroc: per_predictor,
        projection_sweep: sweep,
        best_lambda,
        pixel_count: labels.len(),
        positive_fraction: positives as f64 / labels.len() as f64,
        config_fingerprint: fingerprint(request),
        model_fingerprint: model_fingerprint(model),
        seed: request.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        let labels = [false, false, true, true];
        assert_eq!(pixel_auroc(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap(), 0.75);
        assert_eq!(auroc_bruteforce_oracle(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap(), 0.75);
        assert_eq!(pixel_auroc(&[0.0, 0.0, 1.0, 1.0], &labels).unwrap(), 1.0);
        assert_eq!(pixel_auroc(&[3.0; 4], &labels).unwrap(), 0.5);
        assert_eq!(auroc_bruteforce_oracle(&[3.0; 4], &labels).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(pixel_auroc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
        assert!(matches!(pixel_auroc(&[0.1, 0.2], &[false, false]), Err(Error::SingleClass)));
        assert!(matches!(auroc_bruteforce_oracle(&[0.1], &[false]), Err(Error::SingleClass)));
        assert!(pixel_auroc(&[0.1], &[true, false]).is_err());
        assert!(pixel_auroc(&[f64::NAN, 0.0], &[true, false]).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..2000).prop_flat_map(|n| {
            (
                // Small integer grid produces many ties.
                prop::collection::vec(prop_oneof![(0i32..20).prop_map(|v| v as f64 / 4.0), -5.0..5.0f64], n),
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_filter("both classes", |(_, l)| l.iter().any(|&v| v) && l.iter().any(|&v| !v))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn rank_statistic_matches_oracle((scores, labels) in instance()) {
            let a = pixel_auroc(&scores, &labels).unwrap();
            let b = auroc_bruteforce_oracle(&scores, &labels).unwrap();
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn invariant_under_monotone_transforms((scores, labels) in instance(), slope in 0.1..10.0f64, shift in -3.0..3.0f64) {
            let a = pixel_auroc(&scores, &labels).unwrap();
            let affine: Vec<f64> = scores.iter().map(|v| slope * v + shift).collect();
            let exp: Vec<f64> = scores.iter().map(|v| v.exp()).collect();
            prop_assert!((pixel_auroc(&affine, &labels).unwrap() - a).abs() <= 1e-12);
            prop_assert!((pixel_auroc(&exp, &labels).unwrap() - a).abs() <= 1e-12);
        }

        #[test]
        fn complement_symmetry_without_ties(n in 2usize..500, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            labels[0] = true;
            labels[1] = false;
            let a = pixel_auroc(&scores, &labels).unwrap();
            let neg: Vec<f64> = scores.iter().map(|v| -v).collect();
            prop_assert!((pixel_auroc(&neg, &labels).unwrap() - (1.0 - a)).abs() <= 1e-12);
        }
    }

    #[test]
    fn markdown_lists_requested_rows() {
        let mut per = BTreeMap::new();
        per.insert("rec_error".to_string(), 0.8);
        per.insert("proj_rec_error".to_string(), 0.85);
        let r = EvalReport {
            per_predictor_auroc: per,
            projection_sweep: BTreeMap::new(),
            best_lambda: Some(1.0),
            pixel_count: 100,
            positive_fraction: 0.1,
            config_fingerprint: String::new(),
            model_fingerprint: String::new(),
            seed: 0,
        };
        let md = r.to_markdown();
        assert!(md.contains("| rec_error | 0.800 |"));
        assert!(md.contains("| proj_rec_error (λ=1) | 0.850 |"));
        assert!(!md.contains("kl_grad"));
    }
}
