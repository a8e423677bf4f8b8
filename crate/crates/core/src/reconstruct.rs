//! Reconstruction of the missing part of a curve from its observed fragment.
//!
//! Every eigen-based estimator is evaluated as an [`Expansion`]: a base
//! vector plus one additive term per component, so that truncations
//! `K = 0..K_max` share one score computation. GCV relies on this.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{classify_complete, Curve, FunctionalDataset, ObservationPair, DEFAULT_COMPLETE_MARGIN};
use crate::eigen::{EigenSystem, Subdomain, DEFAULT_LAMBDA_REL_FLOOR};
use crate::error::{Error, Result};
use crate::grid::{DomainGrid, Interval};
use crate::scores::{ce_scores, grid_scores, integral_scores, Quadrature, ScoreMethod};
use crate::smoothing::{
    estimate_noise_variance, llk_covariance, llk_curve, llk_mean, Bandwidths, CovarianceEstimate,
    MeanEstimate, NoiseVariance, DEFAULT_MIN_PAIRS, DEFAULT_TRIM_FRACTION,
};

pub const DEFAULT_FVE_THRESHOLD: f64 = 0.99;
/// Ridge candidates as multiples of `trace(Γᴼᴼ)/|O|`.
pub const RIDGE_GRID: [f64; 9] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ano,
    AnoCe,
    Ayes,
    AyesCe,
    Pace,
    Kraus,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::AyesCe,
        Method::Ayes,
        Method::AnoCe,
        Method::Ano,
        Method::Pace,
        Method::Kraus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ano => "ano",
            Self::AnoCe => "anoce",
            Self::Ayes => "ayes",
            Self::AyesCe => "ayesce",
            Self::Pace => "pace",
            Self::Kraus => "kraus",
        }
    }

    /// Display label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::Ano => "ANo",
            Self::AnoCe => "ANoCE",
            Self::Ayes => "AYes",
            Self::AyesCe => "AYesCE",
            Self::Pace => "PACE",
            Self::Kraus => "KRAUS",
        }
    }

    pub fn score_method(self) -> ScoreMethod {
        match self {
            Self::AnoCe | Self::AyesCe | Self::Pace => ScoreMethod::ConditionalExpectation,
            _ => ScoreMethod::Integral,
        }
    }

    pub fn is_aligned(self) -> bool {
        matches!(self, Self::Ayes | Self::AyesCe)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ObservedSmoothed,
    Reconstructed,
    NonEstimable,
    /// Filled at step `r` of the iterative scheme.
    Iteration(usize),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ObservedSmoothed => f.write_str("observed"),
            Self::Reconstructed => f.write_str("reconstructed"),
            Self::NonEstimable => f.write_str("non_estimable"),
            Self::Iteration(r) => write!(f, "iteration_{r}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum Truncation {
    Fixed(usize),
    Gcv,
    /// Smallest `K` whose fraction of variance explained reaches the threshold.
    Fve(f64),
}

impl FromStr for Truncation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("gcv") {
            return Ok(Self::Gcv);
        }
        if let Some(rest) = s.strip_prefix("fve") {
            let rest = rest.trim_start_matches([':', '=']);
            if rest.is_empty() {
                return Ok(Self::Fve(DEFAULT_FVE_THRESHOLD));
            }
            let tau: f64 = rest
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("invalid FVE threshold {rest:?}")))?;
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::InvalidArgument(format!("FVE threshold {tau} must lie in (0, 1]")));
            }
            return Ok(Self::Fve(tau));
        }
        s.parse::<usize>()
            .map(Self::Fixed)
            .map_err(|_| Error::InvalidArgument(format!("truncation must be an integer, gcv or fve, got {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructedCurve {
    pub curve_id: String,
    pub grid: DomainGrid,
    /// `NaN` exactly where the provenance is non-estimable.
    pub values: Vec<f64>,
    pub provenance: Vec<Provenance>,
    pub k_used: Option<usize>,
    pub rho: Option<f64>,
    pub method: Method,
    pub scores: Vec<f64>,
    pub error_variance: Option<Vec<f64>>,
    pub flags: Vec<String>,
}

impl ReconstructedCurve {
    pub fn is_complete(&self) -> bool {
        self.provenance.iter().all(|p| *p != Provenance::NonEstimable)
    }

    pub fn non_estimable_count(&self) -> usize {
        self.provenance
            .iter()
            .filter(|p| **p == Provenance::NonEstimable)
            .count()
    }

    /// CSV with columns `u,value,provenance,error_variance`; unavailable
    /// numbers are written as empty fields.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> std::io::Result<()> {
        crate::smoothing::write_comment(&mut out, comment)?;
        writeln!(out, "u,value,provenance,error_variance")?;
        for (r, u) in self.grid.points().iter().enumerate() {
            let v = self.values[r];
            let ev = self.error_variance.as_ref().map_or(f64::NAN, |e| e[r]);
            writeln!(out, "{u},{},{},{}", fmt_opt(v), self.provenance[r], fmt_opt(ev))?;
        }
        Ok(())
    }
}

pub(crate) fn fmt_opt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelConfig {
    pub h_x: Option<f64>,
    pub h_mu: Option<f64>,
    pub h_gamma: Option<f64>,
    pub min_pairs: usize,
    pub trim_fraction: f64,
    pub lambda_rel_floor: f64,
    pub complete_margin: f64,
    pub quadrature: Quadrature,
    pub error_variance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            h_x: None,
            h_mu: None,
            h_gamma: None,
            min_pairs: DEFAULT_MIN_PAIRS,
            trim_fraction: DEFAULT_TRIM_FRACTION,
            lambda_rel_floor: DEFAULT_LAMBDA_REL_FLOOR,
            complete_margin: DEFAULT_COMPLETE_MARGIN,
            quadrature: Quadrature::Backward,
            error_variance: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GcvTable {
    /// `(K or ρ, RSS, GCV)` per admissible candidate.
    pub rows: Vec<(f64, f64, f64)>,
    pub complete_curves: usize,
    pub chosen: f64,
}

type GeometryKey = Vec<(usize, usize)>;

/// Fitted mean, covariance and noise variance together with caches of
/// eigensystems and GCV choices per subdomain geometry.
#[derive(Debug)]
pub struct ReconstructionModel {
    pub mean: MeanEstimate,
    pub cov: CovarianceEstimate,
    pub sigma2: NoiseVariance,
    pub bandwidths: Bandwidths,
    pub full_eigsys: Option<Arc<EigenSystem>>,
    pub config: ModelConfig,
    complete: Vec<Curve>,
    eig_cache: Mutex<HashMap<GeometryKey, Arc<EigenSystem>>>,
    gcv_cache: Mutex<HashMap<(Method, GeometryKey), Arc<GcvTable>>>,
}

impl ReconstructionModel {
    pub fn fit(dataset: &FunctionalDataset, config: ModelConfig) -> Result<Self> {
        let rot = Bandwidths::rule_of_thumb(dataset);
        let bandwidths = Bandwidths {
            h_x: config.h_x.unwrap_or(rot.h_x),
            h_mu: config.h_mu.unwrap_or(rot.h_mu),
            h_gamma: config.h_gamma.unwrap_or(rot.h_gamma),
        };
        bandwidths.validate(dataset.domain().len())?;
        let grid = dataset.grid();
        let mean = llk_mean(dataset, grid, bandwidths.h_mu)?;
        let cov = llk_covariance(dataset, &mean, grid, bandwidths.h_gamma, config.min_pairs);
        let sigma2 = estimate_noise_variance(dataset, &mean, &cov, config.trim_fraction)?;
        let complete = classify_complete(dataset, config.complete_margin)
            .into_iter()
            .map(|i| dataset.curves()[i].clone())
            .collect();
        Self::from_parts(mean, cov, sigma2, bandwidths, complete, config)
    }

    /// Assembles a model from externally supplied estimates. `complete`
    /// holds the curves used by GCV.
    pub fn from_parts(
        mean: MeanEstimate,
        cov: CovarianceEstimate,
        sigma2: NoiseVariance,
        bandwidths: Bandwidths,
        complete: Vec<Curve>,
        config: ModelConfig,
    ) -> Result<Self> {
        if mean.grid != cov.grid {
            return Err(Error::InvalidArgument("mean and covariance grids differ".into()));
        }
        let full = Subdomain::full(&cov.grid);
        let full_eigsys = match EigenSystem::fit(&cov, &full, config.lambda_rel_floor) {
            Ok(e) => Some(Arc::new(e)),
            Err(Error::CovarianceNotEstimable) => None,
            Err(e) => return Err(e),
        };
        let mut cache = HashMap::new();
        if let Some(e) = &full_eigsys {
            cache.insert(full.key(), e.clone());
        }
        Ok(Self {
            mean,
            cov,
            sigma2,
            bandwidths,
            full_eigsys,
            config,
            complete,
            eig_cache: Mutex::new(cache),
            gcv_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn grid(&self) -> &DomainGrid {
        &self.cov.grid
    }

    pub fn complete_curves(&self) -> &[Curve] {
        &self.complete
    }

    /// Eigensystem on `sub`, computed once per grid geometry.
    pub fn eigensystem(&self, sub: &Subdomain) -> Result<Arc<EigenSystem>> {
        let key = sub.key();
        if let Some(e) = self.eig_cache.lock().expect("cache lock").get(&key) {
            return Ok(e.clone());
        }
        let e = Arc::new(EigenSystem::fit(&self.cov, sub, self.config.lambda_rel_floor)?);
        self.eig_cache
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| e.clone());
        Ok(e)
    }

    pub fn curve_subdomain(&self, curve: &Curve) -> Result<Subdomain> {
        Subdomain::new(curve.segments().to_vec(), self.grid())
    }

    /// Eigensystem matching the method: the full domain for PACE, the
    /// observed subdomain otherwise.
    fn method_eigensystem(&self, method: Method, sub: &Subdomain) -> Result<Arc<EigenSystem>> {
        if method == Method::Pace {
            return self.full_eigsys.clone().ok_or(Error::FullDomainNotEstimable);
        }
        self.eigensystem(sub)
    }

    /// Reconstructs `curve` with the truncation policy applied to the
    /// curve's own geometry.
    pub fn reconstruct(&self, curve: &Curve, method: Method, truncation: Truncation) -> Result<ReconstructedCurve> {
        let sub = self.curve_subdomain(curve)?;
        if method == Method::Kraus {
            let rho = match truncation {
                Truncation::Fixed(_) | Truncation::Fve(_) => None,
                Truncation::Gcv => Some(self.gcv(method, &sub)?.chosen),
            };
            return reconstruct_kraus(curve, self, rho);
        }
        let eig = self.method_eigensystem(method, &sub)?;
        // GCV scores the missing part; a complete curve has none.
        let no_missing = sub.grid_indices().len() == self.grid().len();
        let k = match truncation {
            Truncation::Fixed(k) => k,
            Truncation::Fve(tau) => fve_truncation(&eig.eigenvalues, tau),
            Truncation::Gcv if no_missing => fve_truncation(&eig.eigenvalues, DEFAULT_FVE_THRESHOLD),
            Truncation::Gcv => self.gcv(method, &sub)?.chosen as usize,
        };
        let mut out = reconstruct_with(curve, self, method, k)?;
        if no_missing && truncation == Truncation::Gcv {
            out.flags.push(format!("no missing part for GCV; K chosen by FVE {DEFAULT_FVE_THRESHOLD}"));
        }
        Ok(out)
    }

    /// GCV table for `method` on the target geometry `sub`, cached.
    pub fn gcv(&self, method: Method, sub: &Subdomain) -> Result<Arc<GcvTable>> {
        let key = (method, sub.key());
        if let Some(t) = self.gcv_cache.lock().expect("cache lock").get(&key) {
            return Ok(t.clone());
        }
        let table = Arc::new(if method == Method::Kraus {
            select_ridge_gcv(self, sub)?
        } else {
            select_truncation_gcv(method, self, sub, None)?
        });
        self.gcv_cache
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| table.clone());
        Ok(table)
    }
}

/// Smallest `K` with `Σ_{k≤K} λₖ / Σ λₖ ≥ τ`.
pub fn fve_truncation(eigenvalues: &[f64], tau: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    let mut acc = 0.0;
    for (k, l) in eigenvalues.iter().enumerate() {
        acc += l;
        if acc >= tau * total {
            return k + 1;
        }
    }
    eigenvalues.len()
}

/// Observed information for one reconstruction: a raw curve, or gridded
/// values (the curve itself on the subdomain grid) for the iterative scheme.
#[derive(Clone, Copy)]
pub(crate) enum Observed<'a> {
    Raw(&'a Curve),
    Gridded { id: &'a str, values: &'a [f64] },
}

impl Observed<'_> {
    fn id(&self) -> &str {
        match self {
            Self::Raw(c) => c.id(),
            Self::Gridded { id, .. } => id,
        }
    }
}

/// `values(K) = base + Σ_{k<K} scores[k]·terms[k]`; `NaN` base marks
/// non-estimable.
#[derive(Debug, Clone)]
pub(crate) struct Expansion {
    pub base: Vec<f64>,
    pub terms: Vec<Vec<f64>>,
    pub provenance: Vec<Provenance>,
    pub scores: Vec<f64>,
    pub flags: Vec<String>,
}

impl Expansion {
    pub fn evaluate(&self, k: usize) -> Vec<f64> {
        let mut v = self.base.clone();
        for (t, s) in self.terms.iter().zip(&self.scores[..k]) {
            for (x, d) in v.iter_mut().zip(t) {
                *x += s * d;
            }
        }
        v
    }
}

/// A value linear in the scores: `base + Σ_{k<K} ξₖ·per_k`.
struct Anchor {
    base: f64,
    per_k: Vec<f64>,
}

fn compute_scores(
    obs: Observed<'_>,
    eig: &EigenSystem,
    model: &ReconstructionModel,
    method: ScoreMethod,
    k: usize,
    flags: &mut Vec<String>,
) -> Result<Vec<f64>> {
    match obs {
        Observed::Gridded { values, .. } => {
            let on_sub: Vec<f64> = eig.subdomain.grid_indices().iter().map(|&r| values[r]).collect();
            grid_scores(&on_sub, eig, &model.mean, k)
        }
        Observed::Raw(curve) => {
            let s = match method {
                ScoreMethod::Integral => integral_scores(curve, eig, &model.mean, k, model.config.quadrature)?,
                ScoreMethod::ConditionalExpectation => ce_scores(curve, eig, &model.cov, model.sigma2, &model.mean, k)?,
            };
            let d = &s.diagnostics;
            if d.insufficient_points {
                flags.push("insufficient points".into());
            }
            if d.jitter_applied {
                flags.push("jitter applied".into());
            }
            if d.ill_conditioned {
                flags.push(format!("ill-conditioned score system ({:e})", d.condition.unwrap_or(f64::NAN)));
            }
            Ok(s.values)
        }
    }
}

/// Eigen-based expansion of `method` for up to `k_max` components on `eig`.
pub(crate) fn expand(
    obs: Observed<'_>,
    model: &ReconstructionModel,
    method: Method,
    eig: &EigenSystem,
    intervals: &[Interval],
    k_max: usize,
) -> Result<Expansion> {
    let grid = model.grid();
    let l = grid.len();
    let mut flags = Vec::new();
    let score_method = match obs {
        Observed::Gridded { .. } => ScoreMethod::Integral,
        Observed::Raw(_) => method.score_method(),
    };
    let scores = compute_scores(obs, eig, model, score_method, k_max, &mut flags)?;
    let basis = eig.basis_on_grid(k_max);
    let tol = grid.tol();
    let in_obs: Vec<bool> = grid
        .points()
        .iter()
        .map(|&u| intervals.iter().any(|iv| iv.contains_tol(u, tol)))
        .collect();
    let estimable: Vec<bool> = (0..l)
        .map(|r| match method {
            Method::Pace => true,
            _ => eig.extrapolable[r] || eig.subdomain.contains_index(r),
        })
        .collect();

    let mu = &model.mean.values;
    let mut base = vec![f64::NAN; l];
    let mut terms = vec![vec![0.0; l]; k_max];
    let mut provenance = vec![Provenance::NonEstimable; l];
    // Plain truncated expansion, shared by ANo, PACE and the fallbacks.
    let plain = |r: usize, base: &mut [f64], terms: &mut [Vec<f64>]| {
        base[r] = mu[r];
        for j in 0..k_max {
            terms[j][r] = basis[j][r];
        }
    };
    for r in 0..l {
        if !estimable[r] {
            continue;
        }
        provenance[r] = if in_obs[r] {
            Provenance::ObservedSmoothed
        } else {
            Provenance::Reconstructed
        };
        plain(r, &mut base, &mut terms);
    }
    if !method.is_aligned() {
        return Ok(Expansion {
            base,
            terms,
            provenance,
            scores,
            flags,
        });
    }

    let smooth = |u: f64| -> Option<f64> {
        match obs {
            Observed::Raw(c) => llk_curve(c, u, model.bandwidths.h_x).ok(),
            Observed::Gridded { values, .. } => {
                // Snap so a covered grid point never mixes in an uncovered neighbour.
                let r = grid.nearest(u);
                let v = if (grid.points()[r] - u).abs() <= tol {
                    values[r]
                } else {
                    grid.interpolate(values, u)
                };
                v.is_finite().then_some(v)
            }
        }
    };
    // Anchor value X̂(ϑ) - μ̂(ϑ) - Σ ξₖ φₖ(ϑ), with the plain-expansion
    // fallback at the nearest observed grid point when smoothing fails.
    let mut anchor_fallbacks = 0usize;
    let mut anchor = |theta: f64| -> Anchor {
        let phi: Vec<f64> = (0..k_max).map(|j| eig.basis_at(j, theta)).collect();
        match smooth(theta) {
            Some(x) => Anchor {
                base: x - model.mean.at(theta),
                per_k: phi.iter().map(|p| -p).collect(),
            },
            None => {
                anchor_fallbacks += 1;
                let s = nearest_subdomain_index(eig, grid.nearest(theta));
                Anchor {
                    base: mu[s] - model.mean.at(theta),
                    per_k: (0..k_max).map(|j| basis[j][s] - phi[j]).collect(),
                }
            }
        }
    };
    let lows: Vec<Anchor> = intervals.iter().map(|iv| anchor(iv.lo)).collect();
    let highs: Vec<Anchor> = intervals.iter().map(|iv| anchor(iv.hi)).collect();
    if anchor_fallbacks > 0 {
        flags.push(format!("boundary smoother failed at {anchor_fallbacks} anchor(s)"));
    }

    let mut smooth_fallbacks = 0usize;
    for (r, &u) in grid.points().iter().enumerate() {
        if !estimable[r] {
            continue;
        }
        if in_obs[r] {
            match smooth(u) {
                Some(x) => {
                    base[r] = x;
                    for t in terms.iter_mut() {
                        t[r] = 0.0;
                    }
                }
                None => smooth_fallbacks += 1,
            }
            continue;
        }
        let weights = anchor_weights(intervals, u);
        let mut b = mu[r];
        for &(side, j, w) in &weights {
            let a = if side { &highs[j] } else { &lows[j] };
            b += w * a.base;
            for (kk, t) in terms.iter_mut().enumerate() {
                t[r] += w * a.per_k[kk];
            }
        }
        base[r] = b;
    }
    if smooth_fallbacks > 0 {
        flags.push(format!("curve smoother failed at {smooth_fallbacks} observed grid point(s)"));
    }
    Ok(Expansion {
        base,
        terms,
        provenance,
        scores,
        flags,
    })
}

fn nearest_subdomain_index(eig: &EigenSystem, r: usize) -> usize {
    let idx = eig.subdomain.grid_indices();
    match idx.binary_search(&r) {
        Ok(_) => r,
        Err(p) if p == 0 => idx[0],
        Err(p) if p >= idx.len() => idx[idx.len() - 1],
        Err(p) => {
            if r - idx[p - 1] <= idx[p] - r {
                idx[p - 1]
            } else {
                idx[p]
            }
        }
    }
}

/// Boundary anchors for `u` outside the observed intervals, as
/// `(is_upper_end, interval, weight)`: the nearest extreme outside the
/// hull, linear interpolation between `Bⱼ` and `Aⱼ₊₁` inside a gap.
pub(crate) fn anchor_weights(intervals: &[Interval], u: f64) -> Vec<(bool, usize, f64)> {
    let last = intervals.len() - 1;
    if u <= intervals[0].lo {
        return vec![(false, 0, 1.0)];
    }
    if u >= intervals[last].hi {
        return vec![(true, last, 1.0)];
    }
    for j in 0..last {
        let (b, a_next) = (intervals[j].hi, intervals[j + 1].lo);
        if u >= b && u <= a_next {
            let w = (u - b) / (a_next - b);
            return vec![(true, j, 1.0 - w), (false, j + 1, w)];
        }
    }
    // Inside an interval: anchor at the nearer end of that interval.
    let j = intervals.iter().position(|iv| iv.contains(u)).unwrap_or(0);
    let iv = intervals[j];
    if (u - iv.lo).abs() < (iv.hi - u).abs() {
        vec![(false, j, 1.0)]
    } else {
        vec![(true, j, 1.0)]
    }
}

fn finish(
    obs: Observed<'_>,
    model: &ReconstructionModel,
    method: Method,
    eig: &EigenSystem,
    exp: Expansion,
    k: usize,
) -> ReconstructedCurve {
    let values = exp.evaluate(k);
    let mut flags = exp.flags;
    let error_variance = model.config.error_variance.then(|| {
        let (v, clamped) = error_variance_on_grid(eig, &model.cov, k);
        if clamped > 0 {
            flags.push(format!("error variance clamped to zero at {clamped} grid point(s)"));
        }
        v
    });
    ReconstructedCurve {
        curve_id: obs.id().to_string(),
        grid: model.grid().clone(),
        values,
        provenance: exp.provenance,
        k_used: Some(k),
        rho: None,
        method,
        scores: exp.scores[..k].to_vec(),
        error_variance,
        flags,
    }
}

fn check_k(eig: &EigenSystem, k: usize) -> Result<()> {
    if k > eig.k_available() {
        return Err(Error::TooManyComponents {
            requested: k,
            available: eig.k_available(),
        });
    }
    Ok(())
}

/// Eigen-based reconstruction with a fixed truncation.
pub fn reconstruct_with(curve: &Curve, model: &ReconstructionModel, method: Method, k: usize) -> Result<ReconstructedCurve> {
    match method {
        Method::Ano | Method::AnoCe => reconstruct_ano(curve, model, k, method.score_method()),
        Method::Ayes | Method::AyesCe => reconstruct_ayes(curve, model, k, method.score_method()),
        Method::Pace => reconstruct_pace(curve, model, k),
        Method::Kraus => Err(Error::InvalidArgument(
            "the ridge reconstruction takes a ridge parameter, not a truncation".into(),
        )),
    }
}

/// `μ̂(u) + Σ_{k≤K} ξ̂ₖ φ̃̂ₖ(u)` on every estimable grid point.
pub fn reconstruct_ano(curve: &Curve, model: &ReconstructionModel, k: usize, scores: ScoreMethod) -> Result<ReconstructedCurve> {
    let method = match scores {
        ScoreMethod::Integral => Method::Ano,
        ScoreMethod::ConditionalExpectation => Method::AnoCe,
    };
    let sub = model.curve_subdomain(curve)?;
    let eig = model.eigensystem(&sub)?;
    check_k(&eig, k)?;
    let exp = expand(Observed::Raw(curve), model, method, &eig, curve.segments(), k)?;
    Ok(finish(Observed::Raw(curve), model, method, &eig, exp, k))
}

/// Boundary-aligned reconstruction: the curve smoother on `O` and
/// `X̂(ϑ) + μ̂(u) - μ̂(ϑ) + Σ ξ̂ₖ (φ̃̂ₖ(u) - φ̂ₖ(ϑ))` on `M`.
pub fn reconstruct_ayes(curve: &Curve, model: &ReconstructionModel, k: usize, scores: ScoreMethod) -> Result<ReconstructedCurve> {
    let method = match scores {
        ScoreMethod::Integral => Method::Ayes,
        ScoreMethod::ConditionalExpectation => Method::AyesCe,
    };
    let sub = model.curve_subdomain(curve)?;
    let eig = model.eigensystem(&sub)?;
    check_k(&eig, k)?;
    let exp = expand(Observed::Raw(curve), model, method, &eig, curve.segments(), k)?;
    Ok(finish(Observed::Raw(curve), model, method, &eig, exp, k))
}

/// Truncated Karhunen-Loève expansion in the full-domain eigenfunctions
/// with conditional-expectation scores.
pub fn reconstruct_pace(curve: &Curve, model: &ReconstructionModel, k: usize) -> Result<ReconstructedCurve> {
    let eig = model.full_eigsys.clone().ok_or(Error::FullDomainNotEstimable)?;
    check_k(&eig, k)?;
    let exp = expand(Observed::Raw(curve), model, Method::Pace, &eig, curve.segments(), k)?;
    Ok(finish(Observed::Raw(curve), model, Method::Pace, &eig, exp, k))
}

/// Discretized ridge operator `x ↦ Γᴹᴼ (Γᴼᴼ + ρI)⁻¹ x`, solved in the
/// symmetric form `(W^{1/2} G W^{1/2} + ρI) z = W^{1/2} x`.
pub(crate) struct RidgeOperator {
    idx: Vec<usize>,
    sqrt_w: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// Rows `γ̂(u_r, ·)` on the subdomain, `None` where not estimable.
    rows: Vec<Option<Vec<f64>>>,
}

impl RidgeOperator {
    pub fn new(cov: &CovarianceEstimate, sub: &Subdomain, rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::NonPositiveRidge);
        }
        let idx = sub.grid_indices().to_vec();
        let n = idx.len();
        let sqrt_w: Vec<f64> = sub.weights(cov.grid.spacing()).iter().map(|w| w.sqrt()).collect();
        let mut a = DMatrix::<f64>::zeros(n, n);
        for p in 0..n {
            for q in 0..n {
                let g = cov.get(idx[p], idx[q]).ok_or(Error::CovarianceNotEstimable)?;
                a[(p, q)] = sqrt_w[p] * g * sqrt_w[q];
            }
            a[(p, p)] += rho;
        }
        let chol = a.cholesky().ok_or(Error::IllConditioned {
            condition: f64::INFINITY,
        })?;
        let rows = (0..cov.len())
            .map(|r| idx.iter().map(|&s| cov.get(r, s)).collect::<Option<Vec<f64>>>())
            .collect();
        Ok(Self {
            idx,
            sqrt_w,
            chol,
            rows,
        })
    }

    /// `trace(Γᴼᴼ)/|O|`, the scale of the ridge grid.
    pub fn ridge_scale(cov: &CovarianceEstimate, sub: &Subdomain) -> Result<f64> {
        let w = sub.weights(cov.grid.spacing());
        let idx = sub.grid_indices();
        let mut tr = 0.0;
        for (p, &r) in idx.iter().enumerate() {
            tr += w[p] * cov.get(r, r).ok_or(Error::CovarianceNotEstimable)?;
        }
        Ok(tr / idx.len() as f64)
    }

    /// Full-grid prediction of the centered curve from its centered values
    /// on the subdomain grid; `NaN` where the row is not estimable.
    pub fn apply(&self, centered: &[f64]) -> Vec<f64> {
        let rhs = nalgebra::DVector::from_iterator(
            self.idx.len(),
            centered.iter().zip(&self.sqrt_w).map(|(x, s)| x * s),
        );
        let z = self.chol.solve(&rhs);
        let zw: Vec<f64> = z.iter().zip(&self.sqrt_w).map(|(z, s)| z * s).collect();
        self.rows
            .iter()
            .map(|row| match row {
                Some(g) => g.iter().zip(&zw).map(|(a, b)| a * b).sum(),
                None => f64::NAN,
            })
            .collect()
    }
}

/// Curve smoother evaluated at the subdomain grid points.
fn smooth_on_subdomain(curve: &Curve, sub: &Subdomain, grid: &DomainGrid, h_x: f64) -> Result<Vec<f64>> {
    sub.grid_indices()
        .iter()
        .map(|&r| llk_curve(curve, grid.points()[r], h_x))
        .collect()
}

fn ridge_expansion(curve: &Curve, model: &ReconstructionModel, sub: &Subdomain, op: &RidgeOperator) -> Result<(Vec<f64>, Vec<Provenance>)> {
    let grid = model.grid();
    let mu = &model.mean.values;
    let smoothed = smooth_on_subdomain(curve, sub, grid, model.bandwidths.h_x)?;
    let centered: Vec<f64> = smoothed
        .iter()
        .zip(sub.grid_indices())
        .map(|(x, &r)| x - mu[r])
        .collect();
    let pred = op.apply(&centered);
    let mut values = vec![f64::NAN; grid.len()];
    let mut prov = vec![Provenance::NonEstimable; grid.len()];
    for r in 0..grid.len() {
        if pred[r].is_finite() {
            values[r] = mu[r] + pred[r];
            prov[r] = Provenance::Reconstructed;
        }
    }
    for (p, &r) in sub.grid_indices().iter().enumerate() {
        values[r] = smoothed[p];
        prov[r] = Provenance::ObservedSmoothed;
    }
    Ok((values, prov))
}

/// Functional ridge-regression reconstruction. With `rho = None` the ridge
/// parameter is chosen by GCV on the curve's geometry.
pub fn reconstruct_kraus(curve: &Curve, model: &ReconstructionModel, rho: Option<f64>) -> Result<ReconstructedCurve> {
    let sub = model.curve_subdomain(curve)?;
    let rho = match rho {
        Some(r) => r,
        None => model.gcv(Method::Kraus, &sub)?.chosen,
    };
    let op = RidgeOperator::new(&model.cov, &sub, rho)?;
    let (values, provenance) = ridge_expansion(curve, model, &sub, &op)?;
    Ok(ReconstructedCurve {
        curve_id: curve.id().to_string(),
        grid: model.grid().clone(),
        values,
        provenance,
        k_used: None,
        rho: Some(rho),
        method: Method::Kraus,
        scores: Vec::new(),
        error_variance: None,
        flags: Vec::new(),
    })
}

/// Splits a complete curve into its pseudo-observed part inside `sub` and
/// the pseudo-missing observations outside it.
fn pseudo_split(curve: &Curve, sub: &Subdomain, tol: f64) -> Option<(Curve, Vec<ObservationPair>)> {
    let (inside, outside): (Vec<ObservationPair>, Vec<ObservationPair>) = curve
        .points()
        .iter()
        .partition(|p| sub.contains(p.u, tol));
    if outside.is_empty() {
        return None;
    }
    let mut pseudo = Curve::new(curve.id(), inside).ok()?;
    if sub.intervals().len() > 1 {
        let segs = sub
            .intervals()
            .iter()
            .map(|iv| Interval { lo: iv.lo - tol, hi: iv.hi + tol })
            .collect();
        pseudo = pseudo.with_segments(segs).ok()?;
    }
    Some((pseudo, outside))
}

/// Mean squared residual at the pseudo-missing abscissae; points where
/// the reconstruction is not estimable are skipped.
fn residual_mean(grid: &DomainGrid, values: &[f64], missing: &[ObservationPair]) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for p in missing {
        let (r, t) = grid.locate(p.u);
        let v = if t == 0.0 {
            values[r]
        } else {
            (1.0 - t) * values[r] + t * values[r + 1]
        };
        if v.is_finite() {
            s += (p.y - v).powi(2);
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// GCV choice of the truncation for reconstructing over the complement of
/// `target`: `GCV(K) = RSS(K) / (1 - K/|C|)²`, ties toward smaller `K`.
pub fn select_truncation_gcv(
    method: Method,
    model: &ReconstructionModel,
    target: &Subdomain,
    candidates: Option<&[usize]>,
) -> Result<GcvTable> {
    if method == Method::Kraus {
        return select_ridge_gcv(model, target);
    }
    if model.complete.is_empty() {
        return Err(Error::NoCompleteCurves);
    }
    let eig = model.method_eigensystem(method, target)?;
    let grid = model.grid();
    let tol = grid.tol();
    let c = model.complete.len();
    let k_max = eig.k_available().min(c.saturating_sub(1));
    let ks: Vec<usize> = match candidates {
        Some(cs) => cs.iter().copied().filter(|&k| k >= 1 && k <= k_max).collect(),
        None => (1..=k_max).collect(),
    };
    if ks.is_empty() {
        return Err(Error::NoGcvCandidate);
    }
    let top = *ks.iter().max().expect("nonempty");
    let per_curve: Vec<Option<Vec<f64>>> = model
        .complete
        .par_iter()
        .map(|curve| {
            let (pseudo, missing) = pseudo_split(curve, target, tol)?;
            let exp = expand(Observed::Raw(&pseudo), model, method, &eig, pseudo.segments(), top).ok()?;
            ks.iter()
                .map(|&k| residual_mean(grid, &exp.evaluate(k), &missing))
                .collect()
        })
        .collect();
    let mut rss = vec![0.0; ks.len()];
    let mut used = 0usize;
    for v in per_curve.into_iter().flatten() {
        used += 1;
        for (acc, x) in rss.iter_mut().zip(v) {
            *acc += x;
        }
    }
    if used == 0 {
        return Err(Error::NoCompleteCurves);
    }
    let mut rows = Vec::with_capacity(ks.len());
    let mut best: Option<(f64, usize)> = None;
    for (&k, &r) in ks.iter().zip(&rss) {
        let denom = (1.0 - k as f64 / c as f64).powi(2);
        let g = r / denom;
        rows.push((k as f64, r, g));
        if best.is_none_or(|(bg, _)| g < bg) {
            best = Some((g, k));
        }
    }
    Ok(GcvTable {
        rows,
        complete_curves: c,
        chosen: best.expect("nonempty").1 as f64,
    })
}

/// GCV choice of the ridge parameter over [`RIDGE_GRID`] scaled by
/// `trace(Γᴼᴼ)/|O|`, with effective degrees of freedom `Σ λ/(λ+ρ)`.
pub fn select_ridge_gcv(model: &ReconstructionModel, target: &Subdomain) -> Result<GcvTable> {
    if model.complete.is_empty() {
        return Err(Error::NoCompleteCurves);
    }
    let grid = model.grid();
    let tol = grid.tol();
    let c = model.complete.len() as f64;
    let eig = model.eigensystem(target)?;
    let scale = RidgeOperator::ridge_scale(&model.cov, target)?;
    let pairs: Vec<(Curve, Vec<ObservationPair>)> = model
        .complete
        .iter()
        .filter_map(|curve| pseudo_split(curve, target, tol))
        .collect();
    let mut rows = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for mult in RIDGE_GRID {
        let rho = mult * scale;
        let df: f64 = eig.eigenvalues.iter().map(|l| l / (l + rho)).sum();
        if df >= c {
            continue;
        }
        // γ̂ is not positive semidefinite in general; ridges too small to
        // make the system definite are not candidates.
        let op = match RidgeOperator::new(&model.cov, target, rho) {
            Ok(op) => op,
            Err(Error::IllConditioned { .. }) => continue,
            Err(e) => return Err(e),
        };
        let per_curve: Vec<Option<f64>> = pairs
            .par_iter()
            .map(|(pseudo, missing)| {
                let sub = model.curve_subdomain(pseudo).ok()?;
                let (values, _) = if sub.key() == target.key() {
                    ridge_expansion(pseudo, model, target, &op).ok()?
                } else {
                    let op = RidgeOperator::new(&model.cov, &sub, rho).ok()?;
                    ridge_expansion(pseudo, model, &sub, &op).ok()?
                };
                residual_mean(grid, &values, missing)
            })
            .collect();
        let used: Vec<f64> = per_curve.into_iter().flatten().collect();
        if used.is_empty() {
            continue;
        }
        let rss: f64 = used.iter().sum();
        let g = rss / (1.0 - df / c).powi(2);
        rows.push((rho, rss, g));
        if best.is_none_or(|(bg, _)| g < bg) {
            best = Some((g, rho));
        }
    }
    let (_, rho) = best.ok_or(Error::NoGcvCandidate)?;
    Ok(GcvTable {
        rows,
        complete_curves: model.complete.len(),
        chosen: rho,
    })
}

/// `max(0, γ̂(u,u) - Σₖ λ̂ₖ φ̃̂ₖ(u)²)` at grid index `r`; `None` where
/// either term is unavailable.
pub fn error_variance(eig: &EigenSystem, cov: &CovarianceEstimate, r: usize) -> Option<f64> {
    raw_error_variance(eig, cov, r, eig.k_available()).map(|v| v.max(0.0))
}

fn raw_error_variance(eig: &EigenSystem, cov: &CovarianceEstimate, r: usize, k: usize) -> Option<f64> {
    let g = cov.get(r, r)?;
    let in_sub = eig.subdomain.grid_indices().binary_search(&r);
    let mut s = 0.0;
    for (k, l) in eig.eigenvalues.iter().enumerate().take(k) {
        let phi = if !eig.extrapolated.is_empty() && eig.extrapolable[r] {
            eig.extrapolated[k][r]
        } else if let Ok(p) = in_sub {
            eig.eigenfunctions[k][p]
        } else {
            return None;
        };
        s += l * phi * phi;
    }
    Some(g - s)
}

/// Error variance of the `k`-term reconstruction on the whole grid (`NaN`
/// where unavailable) and the number of negative values clamped to zero.
/// `Cov(X(u), ξₖ) = λₖ φ̃ₖ(u)` makes the truncated sum exact for a `k`-term
/// operator.
pub fn error_variance_on_grid(eig: &EigenSystem, cov: &CovarianceEstimate, k: usize) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let v = (0..cov.len())
        .map(|r| match raw_error_variance(eig, cov, r, k) {
            Some(v) if v < 0.0 => {
                clamped += 1;
                0.0
            }
            Some(v) => v,
            None => f64::NAN,
        })
        .collect();
    (v, clamped)
}
