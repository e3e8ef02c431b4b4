//! Multivariate Student-t component: density, Mahalanobis distance, the EM
//! weight omega, the kappa statistic, and the degrees-of-freedom root solve.
//!
//! The log-density uses the standard normalizer
//! `ln G((nu+D)/2) - ln G(nu/2) - (D/2) ln(nu pi) - 1/2 ln|Sigma|`
//! so that `exp(log_pdf)` integrates to 1; posterior ratios across components
//! are only meaningful for true densities.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma, trigamma};

/// Lower clamp for fitted degrees of freedom.
pub const NU_MIN: f64 = 0.1;
/// Upper clamp for fitted degrees of freedom; also the pinned value used for
/// Gaussian-mixture baselines.
pub const NU_MAX: f64 = 1e6;

/// Parameters of one mixture component, with the Cholesky factor and log
/// normalizer cached at construction. Immutable afterwards.
#[derive(Clone, Debug)]
pub struct ComponentParams {
    nu: f64,
    mu: Array1<f64>,
    sigma: Array2<f64>,
    chol: Array2<f64>,
    log_norm: f64,
}

impl ComponentParams {
    /// Build a component, symmetrizing `sigma` and factoring it. A failed
    /// factorization gets diagonal jitter of `1e-6 tr(sigma)/D` per retry,
    /// up to three times, before giving up.
    ///
    /// `nu` may be any positive finite value; fitting clamps to
    /// `[NU_MIN, NU_MAX]` but the density itself is defined beyond that
    /// (large `nu` is the Gaussian limit).
    pub fn new(nu: f64, mu: Array1<f64>, sigma: Array2<f64>) -> Result<Self> {
        if !nu.is_finite() || nu <= 0.0 {
            return Err(Error::Domain {
                func: "ComponentParams::new (nu)",
                value: nu,
            });
        }
        let d = mu.len();
        if d == 0 {
            return Err(Error::InvalidArgument("mu must have dimension >= 1".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: sigma.nrows().max(sigma.ncols()),
            });
        }
        if mu.iter().any(|v| !v.is_finite()) || sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "component parameters",
            });
        }
        let scale = sigma.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            for j in (i + 1)..d {
                if (sigma[[i, j]] - sigma[[j, i]]).abs() > 1e-10 * scale {
                    return Err(Error::InvalidArgument(
                        "sigma is not symmetric within tolerance".into(),
                    ));
                }
            }
        }
        let mut sym = sigma.clone();
        for i in 0..d {
            for j in 0..d {
                sym[[i, j]] = 0.5 * (sigma[[i, j]] + sigma[[j, i]]);
            }
        }

        let trace: f64 = (0..d).map(|i| sym[[i, i]]).sum();
        let base_jitter = if trace > 0.0 {
            1e-6 * trace / d as f64
        } else {
            1e-9
        };
        let mut chol = None;
        let mut sigma_used = sym.clone();
        for attempt in 0..=3u32 {
            let mut trial = sym.clone();
            let jitter = base_jitter * attempt as f64;
            for i in 0..d {
                trial[[i, i]] += jitter;
            }
            if let Some(l) = cholesky_lower(&trial) {
                sigma_used = trial;
                chol = Some(l);
                break;
            }
        }
        let chol = chol.ok_or(Error::NotPositiveDefinite)?;

        let half_log_det: f64 = (0..d).map(|i| chol[[i, i]].ln()).sum();
        let df = d as f64;
        let log_norm = ln_gamma(0.5 * (nu + df)).expect("positive argument")
            - ln_gamma(0.5 * nu).expect("positive argument")
            - 0.5 * df * (nu * std::f64::consts::PI).ln()
            - half_log_det;

        Ok(Self {
            nu,
            mu,
            sigma: sigma_used,
            chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn mu(&self) -> ArrayView1<'_, f64> {
        self.mu.view()
    }

    pub fn sigma(&self) -> ArrayView2<'_, f64> {
        self.sigma.view()
    }

    /// Cached lower-triangular Cholesky factor of sigma.
    pub fn chol(&self) -> ArrayView2<'_, f64> {
        self.chol.view()
    }

    /// Squared Mahalanobis distance `(x-mu)^T Sigma^-1 (x-mu)`, computed as
    /// the squared norm of the forward-substitution solve `L y = x - mu`.
    pub fn mahalanobis_sq(&self, x: ArrayView1<'_, f64>) -> f64 {
        let d = self.dim();
        assert_eq!(x.len(), d, "feature dimension mismatch");
        let mut d_sq = 0.0;
        // y is materialized one entry at a time; keep a small stack-ish buffer.
        let mut y = [0.0f64; 16];
        let mut y_heap;
        let y: &mut [f64] = if d <= 16 {
            &mut y[..d]
        } else {
            y_heap = vec![0.0; d];
            &mut y_heap
        };
        for i in 0..d {
            let mut acc = x[i] - self.mu[i];
            for j in 0..i {
                acc -= self.chol[[i, j]] * y[j];
            }
            let yi = acc / self.chol[[i, i]];
            y[i] = yi;
            d_sq += yi * yi;
        }
        d_sq
    }

    /// Log density of the multivariate Student-t at `x`.
    pub fn log_pdf(&self, x: ArrayView1<'_, f64>) -> f64 {
        let d_sq = self.mahalanobis_sq(x);
        self.log_pdf_from_mahalanobis(d_sq)
    }

    /// Log density given an already-computed squared Mahalanobis distance.
    pub fn log_pdf_from_mahalanobis(&self, d_sq: f64) -> f64 {
        let df = self.dim() as f64;
        self.log_norm - 0.5 * (self.nu + df) * (d_sq / self.nu).ln_1p()
    }

    /// Scale-mixture weight `omega = (nu + D) / (nu + d^2)`; down-weights
    /// outlying samples in the mean and covariance updates.
    pub fn omega(&self, d_sq: f64) -> f64 {
        debug_assert!(d_sq >= 0.0);
        (self.nu + self.dim() as f64) / (self.nu + d_sq)
    }

    /// The kappa statistic whose root gives the updated degrees of freedom:
    /// `kappa = ln((nu+D)/2) - psi((nu+D)/2) - 1 - (1/N_k) sum tau (ln w - w)`
    /// with `nu` taken from the current (pre-update) parameters.
    pub fn kappa(&self, tau_col: &[f64], omega_vals: &[f64]) -> Result<f64> {
        assert_eq!(tau_col.len(), omega_vals.len(), "sample count mismatch");
        let mass: f64 = tau_col.iter().sum();
        if mass < 1e-12 {
            return Err(Error::EmptyComponent { mass });
        }
        let mut acc = 0.0;
        for (&t, &w) in tau_col.iter().zip(omega_vals) {
            if t > 0.0 {
                acc += t * (w.ln() - w);
            }
        }
        let half = 0.5 * (self.nu + self.dim() as f64);
        Ok(half.ln() - digamma(half).expect("positive argument") - 1.0 - acc / mass)
    }
}

/// Dense lower-triangular Cholesky; `None` when the matrix is not positive
/// definite (non-positive or non-finite pivot).
fn cholesky_lower(a: &Array2<f64>) -> Option<Array2<f64>> {
    let d = a.nrows();
    let mut l = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let root = diag.sqrt();
        l[[j, j]] = root;
        for i in (j + 1)..d {
            let mut acc = a[[i, j]];
            for k in 0..j {
                acc -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = acc / root;
        }
    }
    Some(l)
}

/// Left-hand side of the degrees-of-freedom equation: `ln(nu/2) - psi(nu/2)`.
/// Strictly decreasing in `nu`, positive everywhere, ~`1/nu` for large `nu`.
pub fn nu_equation_lhs(nu: f64) -> f64 {
    let half = 0.5 * nu;
    half.ln() - digamma(half).expect("positive argument")
}

/// Solve `ln(nu/2) - psi(nu/2) = kappa` for `nu`, clamped to
/// `[NU_MIN, NU_MAX]`. Newton iteration on `t = ln nu` with a maintained
/// bracket and bisection fallback; the left-hand side is strictly decreasing
/// so the root is unique.
pub fn solve_nu(kappa_val: f64) -> f64 {
    if !kappa_val.is_finite() || kappa_val <= nu_equation_lhs(NU_MAX) {
        return NU_MAX;
    }
    if kappa_val >= nu_equation_lhs(NU_MIN) {
        return NU_MIN;
    }
    let g = |t: f64| nu_equation_lhs(t.exp()) - kappa_val;
    let mut lo = NU_MIN.ln(); // g(lo) > 0
    let mut hi = NU_MAX.ln(); // g(hi) < 0
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let gt = g(t);
        if gt.abs() < 1e-13 {
            break;
        }
        if gt > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        // d/dt [ln(nu/2) - psi(nu/2)] at nu = e^t equals 1 - (nu/2) psi'(nu/2),
        // which is strictly negative.
        let nu = t.exp();
        let deriv = 1.0 - 0.5 * nu * trigamma(0.5 * nu).expect("positive argument");
        let newton = t - gt / deriv;
        t = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-14 {
            break;
        }
    }
    t.exp().clamp(NU_MIN, NU_MAX)
}
