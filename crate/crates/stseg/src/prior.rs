//! Spatial Dirichlet prior: Gaussian smoothing of responsibilities into a
//! location field m, a per-pixel scale field s^2, and the closed-form
//! reliability-weighted update `p = (s^2 tau + m) / (s^2 + 1)`.
//!
//! Smoothing is a separable truncated Gaussian with per-pixel border
//! renormalization: the kernel mass that falls inside the image is rescaled
//! to 1, which preserves constant fields (and hence simplex row sums) at
//! every pixel including corners. For a separable kernel on a rectangular
//! domain the per-pass 1D renormalization equals the per-pixel 2D one, since
//! the in-image kernel mass factorizes as the product of the two 1D masses.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{Lattice, ProbabilityField, ScalarField};

/// Truncated, normalized 1D Gaussian tap set plus the cached self-correlation
/// of the induced 2D kernel, `self_corr0 = sum over support of G(u)^2`.
#[derive(Clone, Debug)]
pub struct SmoothingKernel {
    sigma: f64,
    radius: usize,
    taps: Vec<f64>,
    self_corr0: f64,
}

impl SmoothingKernel {
    /// Kernel of width `sigma` (pixels), truncated at radius `ceil(3 sigma)`
    /// and renormalized to unit mass.
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::Domain {
                func: "SmoothingKernel::new (sigma)",
                value: sigma,
            });
        }
        let radius = (3.0 * sigma).ceil() as usize;
        let radius = radius.max(1);
        let mut taps = Vec::with_capacity(2 * radius + 1);
        for i in 0..=(2 * radius) {
            let d = i as f64 - radius as f64;
            taps.push((-0.5 * d * d / (sigma * sigma)).exp());
        }
        let total: f64 = taps.iter().sum();
        for t in &mut taps {
            *t /= total;
        }
        // For the separable 2D kernel G(u,v) = t_u t_v the sum of squares
        // factorizes: sum G^2 = (sum t^2)^2. This is G*G evaluated at 0.
        let sq: f64 = taps.iter().map(|t| t * t).sum();
        let self_corr0 = (sq * sq).min(1.0);
        Ok(Self {
            sigma,
            radius,
            taps,
            self_corr0,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// `G * G (0)` of the truncated 2D kernel; strictly below 1 except for
    /// sub-pixel sigmas where it rounds up to 1 and disables the scale field.
    pub fn self_corr0(&self) -> f64 {
        self.self_corr0
    }

    /// One renormalized 1D pass along a line of `len` samples.
    /// `get(i)` reads input, `put(i, v)` writes output.
    fn pass_line(&self, len: usize, get: impl Fn(usize) -> f64, mut put: impl FnMut(usize, f64)) {
        let r = self.radius as isize;
        let n = len as isize;
        // Prefix sums of taps for the border mass corrections.
        let mut prefix = Vec::with_capacity(self.taps.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for &t in &self.taps {
            acc += t;
            prefix.push(acc);
        }
        for i in 0..n {
            let lo = (-r).max(-i);
            let hi = r.min(n - 1 - i);
            let mut sum = 0.0;
            for d in lo..=hi {
                sum += self.taps[(d + r) as usize] * get((i + d) as usize);
            }
            if lo > -r || hi < r {
                let mass = prefix[(hi + r + 1) as usize] - prefix[(lo + r) as usize];
                sum /= mass;
            }
            put(i as usize, sum);
        }
    }
}

/// Separable smoothing of a scalar field with border renormalization.
/// Constant fields pass through unchanged at every pixel.
pub fn smooth_field(g: &SmoothingKernel, field: &ScalarField) -> ScalarField {
    let lattice = field.lattice();
    let data = smooth_raw(g, lattice, field.data());
    ScalarField::new(lattice, data).expect("smoothing preserves finiteness")
}

fn smooth_raw(g: &SmoothingKernel, lattice: Lattice, input: &[f64]) -> Vec<f64> {
    let (h, w) = (lattice.height(), lattice.width());
    // Horizontal pass, rows independent.
    let mut mid = vec![0.0; input.len()];
    mid.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        let line = &input[row * w..(row + 1) * w];
        g.pass_line(w, |i| line[i], |i, v| out[i] = v);
    });
    // Vertical pass, output rows independent; each reads the in-range rows
    // of the intermediate buffer.
    let mut out = vec![0.0; input.len()];
    let r = g.radius() as isize;
    let mut prefix = Vec::with_capacity(g.taps().len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &t in g.taps() {
        acc += t;
        prefix.push(acc);
    }
    out.par_chunks_mut(w).enumerate().for_each(|(row, out_row)| {
        let i = row as isize;
        let lo = (-r).max(-i);
        let hi = r.min(h as isize - 1 - i);
        let mass = prefix[(hi + r + 1) as usize] - prefix[(lo + r) as usize];
        let renorm = lo > -r || hi < r;
        for d in lo..=hi {
            let tap = g.taps()[(d + r) as usize];
            let src = &mid[((i + d) as usize) * w..((i + d) as usize + 1) * w];
            for (o, &s) in out_row.iter_mut().zip(src) {
                *o += tap * s;
            }
        }
        if renorm {
            for o in out_row.iter_mut() {
                *o /= mass;
            }
        }
    });
    out
}

/// Location field `m_k = G * tau_k`, channel by channel. Rows stay on the
/// simplex because the per-pixel weights are shared across channels and sum
/// to one.
pub fn location_field(g: &SmoothingKernel, tau: &ProbabilityField) -> ProbabilityField {
    let lattice = tau.lattice();
    let k = tau.k();
    let n = tau.n_pixels();
    let mut out = Array2::<f64>::zeros((n, k));
    for j in 0..k {
        let channel: Vec<f64> = tau.data().column(j).to_vec();
        let sm = smooth_raw(g, lattice, &channel);
        for (i, v) in sm.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    ProbabilityField::new(lattice, out)
        .expect("smoothing preserves simplex rows up to rounding")
}

/// Per-pixel prior scale
/// `s^2 = max(0, 1/(K (1 - G*G(0))) sum_k [G*(tau_k^2) - m_k^2])`.
///
/// `m` must be `location_field(g, tau)`. When the truncated kernel is so
/// narrow that `G*G(0)` rounds to 1 (sub-pixel sigma) the scale is defined
/// as 0 everywhere: the neighborhood carries no averaging information.
pub fn scale_field(g: &SmoothingKernel, tau: &ProbabilityField, m: &ProbabilityField) -> ScalarField {
    assert_eq!(tau.lattice(), m.lattice(), "lattice mismatch");
    assert_eq!(tau.k(), m.k(), "component count mismatch");
    let lattice = tau.lattice();
    let n = tau.n_pixels();
    let k = tau.k();
    let denom = k as f64 * (1.0 - g.self_corr0());
    if denom.abs() < 1e-12 * k as f64 {
        return ScalarField::constant(lattice, 0.0);
    }
    let mut acc = vec![0.0f64; n];
    for j in 0..k {
        let sq: Vec<f64> = tau.data().column(j).iter().map(|&t| t * t).collect();
        let sm = smooth_raw(g, lattice, &sq);
        for i in 0..n {
            let mk = m.data()[[i, j]];
            acc[i] += sm[i] - mk * mk;
        }
    }
    let data = acc.into_iter().map(|v| (v / denom).max(0.0)).collect();
    ScalarField::new(lattice, data).expect("scale field entries are finite")
}

/// Closed-form prior update `p = (s^2 tau + m) / (s^2 + 1)`, a convex blend
/// of evidence and neighborhood that stays on the simplex exactly.
pub fn prior_update(
    tau: &ProbabilityField,
    m: &ProbabilityField,
    s_sq: &ScalarField,
) -> ProbabilityField {
    assert_eq!(tau.lattice(), m.lattice(), "lattice mismatch");
    assert_eq!(tau.lattice(), s_sq.lattice(), "lattice mismatch");
    assert_eq!(tau.k(), m.k(), "component count mismatch");
    let n = tau.n_pixels();
    let k = tau.k();
    let mut out = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        let s2 = s_sq.data()[i];
        debug_assert!(s2 >= 0.0);
        let inv = 1.0 / (s2 + 1.0);
        for j in 0..k {
            out[[i, j]] = (s2 * tau.data()[[i, j]] + m.data()[[i, j]]) * inv;
        }
    }
    ProbabilityField::new(tau.lattice(), out).expect("convex blend of simplex rows")
}

/// The prior's state inside a fitted model: neighborhood location `m`,
/// reliability scale `s^2`, and the current mixing field `p`.
#[derive(Clone, Debug)]
pub struct PriorState {
    pub location: ProbabilityField,
    pub scale_sq: ScalarField,
    pub p: ProbabilityField,
}

impl PriorState {
    /// Flat starting state: uniform location and mixing field, zero scale.
    pub fn uniform(lattice: Lattice, k: usize) -> Result<Self> {
        Ok(Self {
            location: ProbabilityField::uniform(lattice, k)?,
            scale_sq: ScalarField::constant(lattice, 0.0),
            p: ProbabilityField::uniform(lattice, k)?,
        })
    }
}
