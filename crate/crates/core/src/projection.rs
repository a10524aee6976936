//! Energy-descent projection of an input onto the learned normal manifold.
//!
//! `E(x_t) = L_r(x_t) + λ·‖x_t − x_0‖₁` is minimized over the input with
//! Adam, starting at `x_0`. The L1 subgradient at zero is taken as 0. The
//! lowest-energy iterate is kept, so the result never has higher energy than
//! the input even though individual Adam steps may increase it.

use std::fmt::Write as _;

use ndarray::{s, Array2, Array4, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::predictors::{model_fingerprint, rec_error_arrays, AnomalyMap, MapKind};
use crate::model::Vae;
use crate::real::Real;

/// Which pixel map to derive from a projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMap {
    /// `(x_0 − x_best)²`: how far each pixel was moved.
    #[default]
    Displacement,
    /// Reconstruction error of the projected image.
    ProjectedRecError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop after this many iterations without a new best energy.
    pub early_stop_patience: usize,
    /// Kept for run records; the descent itself draws no random numbers.
    pub seed: u64,
    pub record_iterates: bool,
    pub map: ProjectionMap,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.03,
            lambda: 1.0,
            max_iters: 100,
            early_stop_patience: 20,
            seed: 0,
            record_iterates: false,
            map: ProjectionMap::Displacement,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionTrace<T> {
    /// `x_0 ..= x_t`, only with `record_iterates`.
    pub iterates: Option<Vec<Array2<T>>>,
    /// `E(x_t)` for every evaluated iterate; `energies[0] = E(x_0)`.
    pub energies: Vec<f64>,
    pub l1_terms: Vec<f64>,
    pub rec_terms: Vec<f64>,
    pub best_iterate: Array2<T>,
    pub best_energy: f64,
    pub best_index: usize,
    /// Set when a non-finite energy or gradient ended the descent.
    pub diverged: bool,
}

impl<T> ProjectionTrace<T> {
    /// `iteration,energy,l1_term,rec_term` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,energy,l1_term,rec_term\n");
        for (i, ((e, l1), r)) in self.energies.iter().zip(&self.l1_terms).zip(&self.rec_terms).enumerate() {
            writeln!(out, "{i},{e},{l1},{r}").expect("writing to a String");
        }
        out
    }
}

fn check_pair<T>(x_t: &ArrayView4<'_, T>, x_0: &ArrayView4<'_, T>) -> Result<()> {
    if x_t.dim() != x_0.dim() {
        return Err(Error::shape(format!("{:?}", x_0.dim()), format!("{:?}", x_t.dim())));
    }
    Ok(())
}

fn l1_per_sample<T: Real>(x_t: &ArrayView4<'_, T>, x_0: &ArrayView4<'_, T>) -> Vec<f64> {
    x_t.axis_iter(Axis(0))
        .zip(x_0.axis_iter(Axis(0)))
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(&p, &q)| (p.as_f64() - q.as_f64()).abs()).sum())
        .collect()
}

/// Energy of `x_t` relative to `x_0`, summed over the batch.
pub fn energy<T: Real>(model: &Vae<T>, x_t: ArrayView4<'_, T>, x_0: ArrayView4<'_, T>, lambda: f64) -> Result<f64> {
    check_pair(&x_t, &x_0)?;
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let rec: f64 = rec_error_arrays(model, x_t)?.sum() * 0.5;
    let l1: f64 = l1_per_sample(&x_t, &x_0).iter().sum();
    let e = rec + lambda * l1;
    if !e.is_finite() {
        return Err(Error::Numerical(format!("energy is {e}")));
    }
    Ok(e)
}

/// `∇_x E` for every image in the batch, with `sign(0) = 0`.
pub fn energy_gradient<T: Real>(
    model: &Vae<T>,
    x_t: ArrayView4<'_, T>,
    x_0: ArrayView4<'_, T>,
    lambda: f64,
) -> Result<Array4<T>> {
    check_pair(&x_t, &x_0)?;
    let (_, mut grad) = model.rec_loss_and_gradient(x_t)?;
    add_l1_subgradient(&mut grad, &x_t, &x_0, lambda);
    Ok(grad)
}

fn add_l1_subgradient<T: Real>(grad: &mut Array4<T>, x_t: &ArrayView4<'_, T>, x_0: &ArrayView4<'_, T>, lambda: f64) {
    let lam = T::from_f64_lossy(lambda);
    Zip::from(grad).and(x_t).and(x_0).for_each(|g, &a, &b| {
        let d = a - b;
        if d > T::zero() {
            *g += lam;
        } else if d < T::zero() {
            *g -= lam;
        }
    });
}

struct Slot<T> {
    current: Array2<T>,
    adam: Adam<T>,
    trace: ProjectionTrace<T>,
    since_best: usize,
    done: bool,
}

/// Projects every image of `x_0` independently. Adam state is per image and
/// each image stops on its own; active images are evaluated together.
pub fn project_batch<T: Real>(model: &Vae<T>, x_0: ArrayView4<'_, T>, cfg: &ProjectionConfig) -> Result<Vec<ProjectionTrace<T>>> {
    cfg.validate()?;
    let (b, c, h, w) = x_0.dim();
    if c != 1 {
        return Err(Error::shape("(B, 1, H, W)", format!("{:?}", x_0.dim())));
    }
    let adam_cfg = AdamConfig::default().with_learning_rate(cfg.alpha);
    let mut slots: Vec<Slot<T>> = (0..b)
        .map(|i| {
            let img = x_0.slice(s![i, 0, .., ..]).to_owned();
            Slot {
                current: img.clone(),
                adam: Adam::new(adam_cfg),
                trace: ProjectionTrace {
                    iterates: cfg.record_iterates.then(Vec::new),
                    energies: Vec::new(),
                    l1_terms: Vec::new(),
                    rec_terms: Vec::new(),
                    best_iterate: img,
                    best_energy: f64::INFINITY,
                    best_index: 0,
                    diverged: false,
                },
                since_best: 0,
                done: false,
            }
        })
        .collect();

    for t in 0..=cfg.max_iters {
        let active: Vec<usize> = (0..b).filter(|&i| !slots[i].done).collect();
        if active.is_empty() {
            break;
        }
        let mut xt = Array4::<T>::zeros((active.len(), 1, h, w));
        for (k, &i) in active.iter().enumerate() {
            xt.slice_mut(s![k, 0, .., ..]).assign(&slots[i].current);
        }
        let x0 = x_0.select(Axis(0), &active);
        let (rec, mut grad) = model.rec_loss_and_gradient(xt.view())?;
        let l1 = l1_per_sample(&xt.view(), &x0.view());
        add_l1_subgradient(&mut grad, &xt.view(), &x0.view(), cfg.lambda);

        for (k, &i) in active.iter().enumerate() {
            let slot = &mut slots[i];
            let r = rec[k].as_f64();
            let e = r + cfg.lambda * l1[k];
            let g = grad.slice(s![k, 0, .., ..]);
            if !e.is_finite() || g.iter().any(|v| !v.is_finite()) {
                if t == 0 {
                    return Err(Error::Numerical(format!("energy of input image {i} is not finite")));
                }
                log::warn!("projection of image {i} diverged at iteration {t}; keeping best iterate {}", slot.trace.best_index);
                slot.trace.diverged = true;
                slot.done = true;
                continue;
            }
            slot.trace.energies.push(e);
            slot.trace.l1_terms.push(l1[k]);
            slot.trace.rec_terms.push(r);
            if let Some(its) = slot.trace.iterates.as_mut() {
                its.push(slot.current.clone());
            }
            if e < slot.trace.best_energy {
                slot.trace.best_energy = e;
                slot.trace.best_index = t;
                slot.trace.best_iterate.assign(&slot.current);
                slot.since_best = 0;
            } else {
                slot.since_best += 1;
            }
            if t == cfg.max_iters || slot.since_best >= cfg.early_stop_patience {
                slot.done = true;
                continue;
            }
            let g = g.to_owned();
            slot.adam.step(
                vec![slot.current.as_slice_mut().expect("standard layout")],
                &[g.as_slice().expect("standard layout")],
            );
        }
    }

    Ok(slots
        .into_iter()
        .map(|s| {
            debug_assert!(s.trace.best_energy <= s.trace.energies[0]);
            s.trace
        })
        .collect())
}

/// Projection of a single image `(1, 1, H, W)`.
pub fn project<T: Real>(model: &Vae<T>, x_0: ArrayView4<'_, T>, cfg: &ProjectionConfig) -> Result<ProjectionTrace<T>> {
    if x_0.dim().0 != 1 {
        return Err(Error::shape("batch of 1", format!("batch of {}", x_0.dim().0)));
    }
    Ok(project_batch(model, x_0, cfg)?.remove(0))
}

/// Maps derived from finished projections of `x_0` (one trace per image).
pub fn maps_from_traces<T: Real>(
    model: &Vae<T>,
    x_0: ArrayView4<'_, T>,
    traces: &[ProjectionTrace<T>],
    map: ProjectionMap,
) -> Result<Vec<AnomalyMap>> {
    if traces.len() != x_0.dim().0 {
        return Err(Error::shape(format!("{} traces", x_0.dim().0), traces.len()));
    }
    let fingerprint = model_fingerprint(model);
    let scores: Vec<Array2<f64>> = match map {
        ProjectionMap::Displacement => traces
            .iter()
            .enumerate()
            .map(|(i, tr)| {
                let x = x_0.slice(s![i, 0, .., ..]);
                Zip::from(&x).and(&tr.best_iterate).map_collect(|&a, &b| {
                    let d = a.as_f64() - b.as_f64();
                    d * d
                })
            })
            .collect(),
        ProjectionMap::ProjectedRecError => {
            let (b, _, h, w) = x_0.dim();
            let mut best = Array4::<T>::zeros((b, 1, h, w));
            for (i, tr) in traces.iter().enumerate() {
                best.slice_mut(s![i, 0, .., ..]).assign(&tr.best_iterate);
            }
            rec_error_arrays(model, best.view())?.outer_iter().map(|m| m.to_owned()).collect()
        }
    };
    Ok(scores
        .into_iter()
        .map(|scores| AnomalyMap {
            scores,
            kind: MapKind::ProjRecError,
            model_fingerprint: fingerprint.clone(),
        })
        .collect())
}

/// Proj-Rec-Error maps for every image in `x_0`.
pub fn proj_rec_error_map<T: Real>(model: &Vae<T>, x_0: ArrayView4<'_, T>, cfg: &ProjectionConfig) -> Result<Vec<AnomalyMap>> {
    let traces = project_batch(model, x_0, cfg)?;
    maps_from_traces(model, x_0, &traces, cfg.map)
}
