//! MAP-EM for the spatially regularized Student-t mixture: initialization,
//! E-step, M-step, objective, convergence loop, and component-death repair.
//!
//! One iteration runs `e_step -> m_step_components -> location_field ->
//! scale_field -> prior_update`, then evaluates the negative log-posterior.
//! The component update uses the scale weights omega computed from the
//! previous iteration's parameters, and the covariance update divides by the
//! responsibility mass (not the omega-weighted mass). Without the spatial
//! prior the mixing field collapses to a single global weight vector updated
//! from the responsibility column means, which is classical mixture EM.
//!
//! All parallel reductions run over fixed-size pixel chunks whose partial
//! sums are folded in index order, so results do not depend on thread count.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{
    argmax_labels, entropy_map, FeatureField, LabelMap, ProbabilityField, ScalarField,
};
use crate::prior::{location_field, prior_update, scale_field, PriorState, SmoothingKernel};
use crate::special::ln_gamma;
use crate::studentt::{solve_nu, ComponentParams, NU_MAX};

/// Fixed reduction chunk size; changing it changes float summation order.
const CHUNK: usize = 2048;

/// Which component family the mixture uses. `Gaussian` pins the degrees of
/// freedom at `NU_MAX` with unit scale weights, reusing the Student-t path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    StudentT,
    Gaussian,
}

/// Fit hyperparameters. `min_component_mass = None` resolves to `D + 1` at
/// fit time, the smallest mass that keeps a covariance estimate meaningful.
#[derive(Clone, Debug)]
pub struct FitConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// Width of the spatial smoothing kernel, in pixels.
    pub sigma: f64,
    pub min_component_mass: Option<f64>,
    pub model_kind: ModelKind,
    pub with_spatial_prior: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            rel_tol: 1e-5,
            seed: 0,
            sigma: 4.25,
            min_component_mass: None,
            model_kind: ModelKind::StudentT,
            with_spatial_prior: true,
        }
    }
}

/// Mixture state: K components plus the per-pixel mixing field (and the
/// neighborhood statistics it was derived from).
#[derive(Clone, Debug)]
pub struct MixtureModel {
    pub components: Vec<ComponentParams>,
    pub prior: PriorState,
    pub model_kind: ModelKind,
    pub with_spatial_prior: bool,
}

impl MixtureModel {
    pub fn new(
        components: Vec<ComponentParams>,
        prior: PriorState,
        model_kind: ModelKind,
        with_spatial_prior: bool,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument(
                "a mixture needs at least one component".into(),
            ));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::DimMismatch {
                expected: d,
                got: components.iter().map(|c| c.dim()).find(|&x| x != d).unwrap(),
            });
        }
        if prior.p.k() != components.len() {
            return Err(Error::KMismatch {
                a: prior.p.k(),
                b: components.len(),
            });
        }
        Ok(Self {
            components,
            prior,
            model_kind,
            with_spatial_prior,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }
}

/// Objective values per iteration plus how the loop ended.
#[derive(Clone, Debug)]
pub struct FitTrace {
    pub objective_per_iter: Vec<f64>,
    pub n_iters: usize,
    pub converged: bool,
}

fn feature_slice(f: &FeatureField) -> &[f64] {
    f.data()
        .as_slice()
        .expect("feature fields are stored row-major contiguous")
}

fn global_mean_cov(f: &FeatureField) -> (Array1<f64>, Array2<f64>) {
    let n = f.n_pixels();
    let d = f.dim();
    let x = f.data();
    let mean = x.sum_axis(ndarray::Axis(0)) / n as f64;
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in x.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[[i, j]] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[[i, j]] / n as f64;
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    (mean, cov)
}

fn ridge_for(cov: &Array2<f64>) -> f64 {
    let d = cov.nrows();
    let trace: f64 = (0..d).map(|i| cov[[i, i]]).sum();
    1e-6 * (trace / d as f64).max(0.0) + 1e-12
}

/// K-means++ seeding plus a few Lloyd rounds, then per-cluster moments.
/// Degrees of freedom start at 10 (Student-t) or pinned at the Gaussian clamp.
pub fn init_model(f: &FeatureField, k: usize, config: &FitConfig) -> Result<MixtureModel> {
    use rand::Rng;
    use rand::SeedableRng;

    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let n = f.n_pixels();
    let d = f.dim();
    if n < k {
        return Err(Error::TooFewSamples { needed: k, got: n });
    }
    let (global_mean, global_cov) = global_mean_cov(f);
    let ridge = ridge_for(&global_cov);
    let nu0 = match config.model_kind {
        ModelKind::StudentT => 10.0,
        ModelKind::Gaussian => NU_MAX,
    };
    let prior = PriorState::uniform(f.lattice(), k)?;

    if k == 1 {
        let mut sigma = global_cov;
        for i in 0..d {
            sigma[[i, i]] += ridge;
        }
        let comp = ComponentParams::new(nu0, global_mean, sigma)?;
        return MixtureModel::new(vec![comp], prior, config.model_kind, config.with_spatial_prior);
    }

    let xs = feature_slice(f);
    let row = |i: usize| &xs[i * d..(i + 1) * d];
    let dist_sq = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);

    // K-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| dist_sq(row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                target -= v;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = row(next).to_vec();
        for i in 0..n {
            let nd = dist_sq(row(i), &c);
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
        centers.push(c);
    }

    // Lloyd refinement.
    let mut assign = vec![0usize; n];
    for _round in 0..10 {
        assign
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(ci, chunk)| {
                let base = ci * CHUNK;
                for (off, a) in chunk.iter_mut().enumerate() {
                    let p = row(base + off);
                    let mut best = 0usize;
                    let mut best_d = f64::INFINITY;
                    for (j, c) in centers.iter().enumerate() {
                        let dd = dist_sq(p, c);
                        if dd < best_d {
                            best_d = dd;
                            best = j;
                        }
                    }
                    *a = best;
                }
            });
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0f64; d]; k];
        for i in 0..n {
            let a = assign[i];
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Reseed an empty cluster at the point farthest from its
                // current center; deterministic argmax.
                let mut far_i = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let dd = dist_sq(row(i), &centers[assign[i]]);
                    if dd > far_d {
                        far_d = dd;
                        far_i = i;
                    }
                }
                centers[j] = row(far_i).to_vec();
            } else {
                for (c, s) in centers[j].iter_mut().zip(&sums[j]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
    }

    // Per-cluster scatter around the final centers.
    let mut counts = vec![0usize; k];
    let mut scatters = vec![Array2::<f64>::zeros((d, d)); k];
    for i in 0..n {
        let p = row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, c) in centers.iter().enumerate() {
            let dd = dist_sq(p, c);
            if dd < best_d {
                best_d = dd;
                best = j;
            }
        }
        counts[best] += 1;
        let c = &centers[best];
        let s = &mut scatters[best];
        for a in 0..d {
            let da = p[a] - c[a];
            for b in a..d {
                s[[a, b]] += da * (p[b] - c[b]);
            }
        }
    }

    let mut components = Vec::with_capacity(k);
    for j in 0..k {
        let mu = Array1::from(centers[j].clone());
        let mut sigma = if counts[j] > 0 {
            let mut s = scatters[j].clone();
            for a in 0..d {
                for b in a..d {
                    let v = s[[a, b]] / counts[j] as f64;
                    s[[a, b]] = v;
                    s[[b, a]] = v;
                }
            }
            s
        } else {
            global_cov.clone()
        };
        for a in 0..d {
            sigma[[a, a]] += ridge;
        }
        components.push(ComponentParams::new(nu0, mu, sigma)?);
    }
    MixtureModel::new(components, prior, config.model_kind, config.with_spatial_prior)
}

/// Posterior responsibilities `tau_{n,k} ~ p_{n,k} exp(log_pdf_k(x_n))`,
/// normalized per pixel with log-sum-exp.
pub fn e_step(model: &MixtureModel, f: &FeatureField) -> ProbabilityField {
    let n = f.n_pixels();
    let k = model.k();
    let d = f.dim();
    assert_eq!(model.dim(), d, "model/feature dimension mismatch");
    assert_eq!(
        model.prior.p.lattice(),
        f.lattice(),
        "mixing field lives on a different lattice"
    );
    let xs = feature_slice(f);
    let ps = model.prior.p.data().as_slice().expect("row-major");
    let mut out = vec![0.0f64; n * k];
    out.par_chunks_mut(CHUNK * k)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let base = ci * CHUNK;
            let mut logits = vec![0.0f64; k];
            for (off, tau_row) in chunk.chunks_mut(k).enumerate() {
                let i = base + off;
                let x = ndarray::ArrayView1::from(&xs[i * d..(i + 1) * d]);
                let mut max = f64::NEG_INFINITY;
                for (j, l) in logits.iter_mut().enumerate() {
                    let p = ps[i * k + j];
                    *l = if p > 0.0 {
                        p.ln() + model.components[j].log_pdf(x)
                    } else {
                        f64::NEG_INFINITY
                    };
                    if *l > max {
                        max = *l;
                    }
                }
                let mut total = 0.0;
                for (t, &l) in tau_row.iter_mut().zip(logits.iter()) {
                    let e = (l - max).exp();
                    *t = e;
                    total += e;
                }
                for t in tau_row.iter_mut() {
                    *t /= total;
                }
            }
        });
    let data = Array2::from_shape_vec((n, k), out).expect("shape by construction");
    ProbabilityField::new(f.lattice(), data).expect("rows normalized by log-sum-exp")
}

struct MomentPartial {
    mass: f64,
    weighted_mass: f64,
    weighted_sum: Vec<f64>,
}

/// One M-step over all components: omega from the previous parameters, then
/// the weighted mean, the mass-normalized scatter, and the nu root-solve
/// (skipped for Gaussian mixtures). A component whose responsibility mass
/// falls below `min_mass` is reborn at the worst-fit feature vector with the
/// global covariance.
pub fn m_step_components(
    f: &FeatureField,
    tau: &ProbabilityField,
    model: &MixtureModel,
    min_mass: f64,
) -> Result<Vec<ComponentParams>> {
    let n = f.n_pixels();
    let d = f.dim();
    let k = model.k();
    assert_eq!(tau.k(), k, "responsibility/component count mismatch");
    assert_eq!(tau.lattice(), f.lattice(), "lattice mismatch");
    let xs = feature_slice(f);
    let gaussian = model.model_kind == ModelKind::Gaussian;

    let mut updated: Vec<Option<ComponentParams>> = Vec::with_capacity(k);
    let mut dead: Vec<usize> = Vec::new();

    for j in 0..k {
        let comp = &model.components[j];
        let tau_col: Vec<f64> = tau.data().column(j).to_vec();

        // Scale weights from the previous iteration's parameters.
        let omega: Vec<f64> = if gaussian {
            Vec::new()
        } else {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let x = ndarray::ArrayView1::from(&xs[i * d..(i + 1) * d]);
                    comp.omega(comp.mahalanobis_sq(x))
                })
                .collect()
        };
        let w = |i: usize| if gaussian { 1.0 } else { omega[i] };

        let partials: Vec<MomentPartial> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|ci| {
                let lo = ci * CHUNK;
                let hi = ((ci + 1) * CHUNK).min(n);
                let mut p = MomentPartial {
                    mass: 0.0,
                    weighted_mass: 0.0,
                    weighted_sum: vec![0.0; d],
                };
                for i in lo..hi {
                    let t = tau_col[i];
                    if t == 0.0 {
                        continue;
                    }
                    let tw = t * w(i);
                    p.mass += t;
                    p.weighted_mass += tw;
                    for (s, &v) in p.weighted_sum.iter_mut().zip(&xs[i * d..(i + 1) * d]) {
                        *s += tw * v;
                    }
                }
                p
            })
            .collect();
        let mut mass = 0.0;
        let mut weighted_mass = 0.0;
        let mut weighted_sum = vec![0.0f64; d];
        for p in &partials {
            mass += p.mass;
            weighted_mass += p.weighted_mass;
            for (a, b) in weighted_sum.iter_mut().zip(&p.weighted_sum) {
                *a += b;
            }
        }

        if mass < min_mass || weighted_mass <= 0.0 {
            dead.push(j);
            updated.push(None);
            continue;
        }

        let mu: Vec<f64> = weighted_sum.iter().map(|s| s / weighted_mass).collect();

        // Scatter around the new mean, normalized by the responsibility mass,
        // plus the kappa accumulator for the nu update.
        let scatter_partials: Vec<(Array2<f64>, f64)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|ci| {
                let lo = ci * CHUNK;
                let hi = ((ci + 1) * CHUNK).min(n);
                let mut s = Array2::<f64>::zeros((d, d));
                let mut kap = 0.0;
                for i in lo..hi {
                    let t = tau_col[i];
                    if t == 0.0 {
                        continue;
                    }
                    let wi = w(i);
                    let tw = t * wi;
                    let x = &xs[i * d..(i + 1) * d];
                    for a in 0..d {
                        let da = x[a] - mu[a];
                        for b in a..d {
                            s[[a, b]] += tw * da * (x[b] - mu[b]);
                        }
                    }
                    kap += t * (wi.ln() - wi);
                }
                (s, kap)
            })
            .collect();
        let mut scatter = Array2::<f64>::zeros((d, d));
        let mut kappa_acc = 0.0;
        for (s, kap) in &scatter_partials {
            scatter += s;
            kappa_acc += kap;
        }
        for a in 0..d {
            for b in a..d {
                let v = scatter[[a, b]] / mass;
                scatter[[a, b]] = v;
                scatter[[b, a]] = v;
            }
        }

        let nu_new = if gaussian {
            NU_MAX
        } else {
            let df = d as f64;
            let half = 0.5 * (comp.nu() + df);
            let kappa = half.ln()
                - crate::special::digamma(half).expect("positive argument")
                - 1.0
                - kappa_acc / mass;
            solve_nu(kappa)
        };

        match ComponentParams::new(nu_new, Array1::from(mu), scatter) {
            Ok(c) => updated.push(Some(c)),
            Err(Error::NotPositiveDefinite) => {
                dead.push(j);
                updated.push(None);
            }
            Err(e) => return Err(e),
        }
    }

    if !dead.is_empty() {
        // Rank pixels by how badly the current model explains them and hand
        // each dead component its own worst-fit location.
        let fits: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = ndarray::ArrayView1::from(&xs[i * d..(i + 1) * d]);
                model
                    .components
                    .iter()
                    .map(|c| c.log_pdf(x))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| fits[a].total_cmp(&fits[b]).then(a.cmp(&b)));
        let (_, global_cov) = global_mean_cov(f);
        let ridge = ridge_for(&global_cov);
        let nu_reset = if gaussian { NU_MAX } else { 10.0 };
        for (slot, &j) in dead.iter().enumerate() {
            let pick = order[slot.min(n - 1)];
            let mu = Array1::from(xs[pick * d..(pick + 1) * d].to_vec());
            let mut sigma = global_cov.clone();
            for a in 0..d {
                sigma[[a, a]] += ridge;
            }
            updated[j] = Some(ComponentParams::new(nu_reset, mu, sigma)?);
        }
    }

    Ok(updated.into_iter().map(|c| c.expect("filled above")).collect())
}

/// Negative log-posterior in marginal form: the mixture negative
/// log-likelihood under the current mixing field, plus (with the spatial
/// prior) the negative log-density of each pixel's mixing vector under its
/// Dirichlet neighborhood prior with `a = m/s^2 + 1`.
pub fn objective(model: &MixtureModel, f: &FeatureField) -> f64 {
    let n = f.n_pixels();
    let k = model.k();
    let d = f.dim();
    let xs = feature_slice(f);
    let ps = model.prior.p.data().as_slice().expect("row-major");

    let nll: f64 = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CHUNK;
            let hi = ((ci + 1) * CHUNK).min(n);
            let mut acc = 0.0;
            let mut logits = vec![0.0f64; k];
            for i in lo..hi {
                let x = ndarray::ArrayView1::from(&xs[i * d..(i + 1) * d]);
                let mut max = f64::NEG_INFINITY;
                for (j, l) in logits.iter_mut().enumerate() {
                    let p = ps[i * k + j];
                    *l = if p > 0.0 {
                        p.ln() + model.components[j].log_pdf(x)
                    } else {
                        f64::NEG_INFINITY
                    };
                    if *l > max {
                        max = *l;
                    }
                }
                let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
                acc -= max + sum.ln();
            }
            acc
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();

    if !model.with_spatial_prior {
        return nll;
    }

    // Dirichlet term. The closed-form s^2 can hit exactly 0 where the
    // neighborhood is consensual; the density evaluation floors it so the
    // trace stays finite (the updates themselves never divide by s^2).
    let ms = model.prior.location.data().as_slice().expect("row-major");
    let s2s = model.prior.scale_sq.data();
    let dir: f64 = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CHUNK;
            let hi = ((ci + 1) * CHUNK).min(n);
            let mut acc = 0.0;
            for i in lo..hi {
                let inv_s2 = 1.0 / s2s[i].max(1e-12);
                let mut ln_dir = ln_gamma(inv_s2 + k as f64).expect("positive argument");
                for j in 0..k {
                    let a = ms[i * k + j] * inv_s2 + 1.0;
                    ln_dir -= ln_gamma(a).expect("positive argument");
                    if a > 1.0 {
                        ln_dir += (a - 1.0) * ps[i * k + j].max(1e-300).ln();
                    }
                }
                acc -= ln_dir;
            }
            acc
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();

    nll + dir
}

fn mixing_means(tau: &ProbabilityField) -> Vec<f64> {
    let n = tau.n_pixels() as f64;
    tau.data()
        .columns()
        .into_iter()
        .map(|c| c.sum() / n)
        .collect()
}

fn broadcast_field(lattice: crate::field::Lattice, weights: &[f64]) -> ProbabilityField {
    let n = lattice.n_pixels();
    let k = weights.len();
    let data = Array2::from_shape_fn((n, k), |(_, j)| weights[j]);
    ProbabilityField::new(lattice, data).expect("weights sum to one")
}

/// Run EM to convergence (relative objective change below `rel_tol`) or
/// `max_iters`. Returns the fitted model, the posterior responsibilities
/// under the final parameters, and the objective trace.
pub fn fit(
    f: &FeatureField,
    k: usize,
    config: &FitConfig,
) -> Result<(MixtureModel, ProbabilityField, FitTrace)> {
    if config.max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    if !(config.rel_tol > 0.0) {
        return Err(Error::InvalidArgument("rel_tol must be positive".into()));
    }
    let mut model = init_model(f, k, config)?;
    let kernel = if config.with_spatial_prior {
        Some(SmoothingKernel::new(config.sigma)?)
    } else {
        None
    };
    let min_mass = config
        .min_component_mass
        .unwrap_or((f.dim() + 1) as f64);

    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev = f64::INFINITY;
    for _iter in 0..config.max_iters {
        let tau = e_step(&model, f);
        model.components = m_step_components(f, &tau, &model, min_mass)?;
        if let Some(kernel) = &kernel {
            let m = location_field(kernel, &tau);
            let s2 = scale_field(kernel, &tau, &m);
            let p = prior_update(&tau, &m, &s2);
            model.prior = PriorState {
                location: m,
                scale_sq: s2,
                p,
            };
        } else {
            let weights = mixing_means(&tau);
            let p = broadcast_field(f.lattice(), &weights);
            model.prior = PriorState {
                location: p.clone(),
                scale_sq: ScalarField::constant(f.lattice(), 0.0),
                p,
            };
        }
        let obj = objective(&model, f);
        trace.push(obj);
        if prev.is_finite() && (prev - obj).abs() <= config.rel_tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
        prev = obj;
    }

    let tau = e_step(&model, f);
    let n_iters = trace.len();
    Ok((
        model,
        tau,
        FitTrace {
            objective_per_iter: trace,
            n_iters,
            converged,
        },
    ))
}

/// A finished segmentation: the per-pixel attribution field (the spatial
/// mixing field when the prior is on, otherwise the posterior), its argmax
/// labels and entropy, and the fitted model with its trace.
#[derive(Clone, Debug)]
pub struct SegmentationResult {
    pub model: MixtureModel,
    pub probabilities: ProbabilityField,
    pub labels: LabelMap,
    pub entropy: ScalarField,
    pub trace: FitTrace,
}

/// Fit and package the per-pixel outputs.
pub fn segment(f: &FeatureField, k: usize, config: &FitConfig) -> Result<SegmentationResult> {
    let (model, tau, trace) = fit(f, k, config)?;
    let probabilities = if config.with_spatial_prior {
        model.prior.p.clone()
    } else {
        tau
    };
    let labels = argmax_labels(&probabilities);
    let entropy = entropy_map(&probabilities);
    Ok(SegmentationResult {
        model,
        probabilities,
        labels,
        entropy,
        trace,
    })
}
