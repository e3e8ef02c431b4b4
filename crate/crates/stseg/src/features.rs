//! Per-pixel feature extraction: CIELAB color, quadrature Gabor responses,
//! and PCA reduction of the stacked channels.
//!
//! The raw feature vector per pixel is the Lab triple (or raw RGB) followed
//! by one response per filter; with the default 4 orientations and even/odd
//! phases that is 3 + 8 = 11 channels. Channels are standardized over the
//! image before PCA so color and texture share a common scale.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{FeatureField, Lattice, Rgb8Image};

/// Which color triple seeds the feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Lab,
    Rgb,
}

// sRGB (D65) to XYZ matrix and white point, IEC 61966-2-1.
const M_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];
const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

fn srgb_to_linear(v: u8) -> f64 {
    let c = v as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Convert one 8-bit sRGB pixel to CIELAB (D65 white). L lands in [0, 100].
pub fn rgb_to_lab(r: u8, g: u8, b: u8) -> [f64; 3] {
    let lin = [srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b)];
    let mut xyz = [0.0f64; 3];
    for (i, row) in M_XYZ.iter().enumerate() {
        xyz[i] = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let f = |t: f64| {
        const DELTA: f64 = 6.0 / 29.0;
        if t > DELTA * DELTA * DELTA {
            t.cbrt()
        } else {
            t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
        }
    };
    let fx = f(xyz[0] / WHITE[0]);
    let fy = f(xyz[1] / WHITE[1]);
    let fz = f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Quadrature Gabor bank: one even and one odd kernel per orientation, all at
/// a single spatial period. Kernels are DC-free and L2-normalized.
#[derive(Clone, Debug)]
pub struct FilterBank {
    kernels: Vec<Array2<f64>>,
    orientations: Vec<f64>,
    scale: f64,
    radius: usize,
}

impl FilterBank {
    /// Kernels in orientation order, even phase then odd phase for each.
    pub fn kernels(&self) -> &[Array2<f64>] {
        &self.kernels
    }

    pub fn orientations(&self) -> &[f64] {
        &self.orientations
    }

    /// Spatial period of the carrier, in pixels.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn n_channels(&self) -> usize {
        self.kernels.len()
    }
}

/// Build the bank: `n_orient` angles at `k pi / n_orient`, carrier period
/// `scale` pixels, isotropic Gaussian envelope of width `0.56 * scale`,
/// truncated at three envelope widths.
pub fn make_filter_bank(n_orient: usize, scale: f64) -> Result<FilterBank> {
    if n_orient == 0 {
        return Err(Error::InvalidArgument(
            "filter bank needs at least one orientation".into(),
        ));
    }
    if !scale.is_finite() || scale < 2.0 {
        return Err(Error::InvalidArgument(format!(
            "filter scale must be at least 2 pixels, got {scale}"
        )));
    }
    let sigma = 0.56 * scale;
    let radius = (3.0 * sigma).ceil() as usize;
    let size = 2 * radius + 1;
    let mut kernels = Vec::with_capacity(2 * n_orient);
    let mut orientations = Vec::with_capacity(n_orient);
    for o in 0..n_orient {
        let theta = o as f64 * std::f64::consts::PI / n_orient as f64;
        orientations.push(theta);
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        for odd_phase in [false, true] {
            let mut k = Array2::<f64>::zeros((size, size));
            let mut env = Array2::<f64>::zeros((size, size));
            for dy in 0..size {
                for dx in 0..size {
                    let y = dy as f64 - radius as f64;
                    let x = dx as f64 - radius as f64;
                    // Carrier varies along the orientation axis; x is the
                    // column offset, y the row offset.
                    let along = x * cos_t + y * sin_t;
                    let e = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                    let phase = 2.0 * std::f64::consts::PI * along / scale;
                    env[[dy, dx]] = e;
                    k[[dy, dx]] = e * if odd_phase { phase.sin() } else { phase.cos() };
                }
            }
            // Remove the DC component along the envelope so flat regions
            // produce zero response, then normalize energy.
            let dc = k.sum() / env.sum();
            k.zip_mut_with(&env, |v, &e| *v -= dc * e);
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            k.mapv_inplace(|v| v / norm);
            kernels.push(k);
        }
    }
    Ok(FilterBank {
        kernels,
        orientations,
        scale,
        radius,
    })
}

/// Mirror index into `[0, len)`: reflection about the edge pixels
/// (-1 maps to 0, len maps to len-1), folded as often as needed.
fn mirror(mut i: isize, len: usize) -> usize {
    let n = len as isize;
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Correlate a scalar image with one square kernel under mirror padding.
/// Output has the same size as the input.
pub fn convolve_mirror(lattice: Lattice, input: &[f64], kernel: &Array2<f64>) -> Vec<f64> {
    assert_eq!(input.len(), lattice.n_pixels());
    let (h, w) = (lattice.height(), lattice.width());
    let kh = kernel.nrows();
    let r = (kh / 2) as isize;
    let mut out = vec![0.0; input.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(row, out_row)| {
        for (col, o) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for dy in -r..=r {
                let y = mirror(row as isize + dy, h);
                let base = y * w;
                for dx in -r..=r {
                    let x = mirror(col as isize + dx, w);
                    acc += kernel[[(dy + r) as usize, (dx + r) as usize]] * input[base + x];
                }
            }
            *o = acc;
        }
    });
    out
}

/// Stack color channels and filter responses into the raw feature field,
/// standardized per channel (zero mean; unit variance where the channel is
/// not degenerate, otherwise left centered).
pub fn extract_raw_features(img: &Rgb8Image, bank: &FilterBank, cs: ColorSpace) -> FeatureField {
    let lattice = img.lattice();
    let n = lattice.n_pixels();
    let d_raw = 3 + bank.n_channels();
    let mut data = Array2::<f64>::zeros((n, d_raw));

    // Color triple and the luminance the filters see.
    let mut lum = vec![0.0f64; n];
    for row in 0..lattice.height() {
        for col in 0..lattice.width() {
            let i = lattice.index(row, col);
            let [r, g, b] = img.at(row, col);
            let triple = match cs {
                ColorSpace::Lab => rgb_to_lab(r, g, b),
                ColorSpace::Rgb => [r as f64, g as f64, b as f64],
            };
            data[[i, 0]] = triple[0];
            data[[i, 1]] = triple[1];
            data[[i, 2]] = triple[2];
            lum[i] = match cs {
                ColorSpace::Lab => triple[0],
                ColorSpace::Rgb => (r as f64 + g as f64 + b as f64) / 3.0,
            };
        }
    }

    let responses: Vec<Vec<f64>> = bank
        .kernels()
        .par_iter()
        .map(|k| convolve_mirror(lattice, &lum, k))
        .collect();
    for (c, resp) in responses.into_iter().enumerate() {
        for (i, v) in resp.into_iter().enumerate() {
            data[[i, 3 + c]] = v;
        }
    }

    // Standardize each channel; a (near-)constant channel stays centered so
    // it carries no weight instead of exploding.
    for c in 0..d_raw {
        let mut col = data.column_mut(c);
        let mean = col.sum() / n as f64;
        col.mapv_inplace(|v| v - mean);
        let var = col.iter().map(|v| v * v).sum::<f64>() / n as f64;
        if var > 1e-12 {
            let inv_sd = 1.0 / var.sqrt();
            col.mapv_inplace(|v| v * inv_sd);
        }
    }

    FeatureField::new(lattice, data).expect("finite by construction")
}

/// PCA basis fitted to a feature field: centering vector, orthonormal basis
/// columns sorted by decreasing eigenvalue, and the variance bookkeeping.
#[derive(Clone, Debug)]
pub struct PcaModel {
    mean: Array1<f64>,
    basis: Array2<f64>,
    eigenvalues: Vec<f64>,
    retained_variance_fraction: f64,
}

impl PcaModel {
    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    /// `D_raw x D` matrix with orthonormal columns.
    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    /// All eigenvalues of the feature covariance, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn retained_variance_fraction(&self) -> f64 {
        self.retained_variance_fraction
    }

    pub fn out_dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Fit PCA keeping the smallest dimension whose cumulative eigenvalue
/// fraction reaches `var_keep`. No whitening: projections keep their scale.
pub fn pca_fit(f: &FeatureField, var_keep: f64) -> Result<PcaModel> {
    if !(0.0..=1.0).contains(&var_keep) || var_keep <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "var_keep must lie in (0, 1], got {var_keep}"
        )));
    }
    let n = f.n_pixels();
    let d = f.dim();
    if n <= d {
        return Err(Error::TooFewSamples { needed: d, got: n });
    }
    let x = f.data();
    let mean = x.sum_axis(ndarray::Axis(0)) / n as f64;

    // Population covariance of the centered data.
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

    let (mut eigvals, eigvecs) = jacobi_eigen(&cov);
    // Sort descending, carrying the eigenvector columns along.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].total_cmp(&eigvals[a]));
    eigvals = order.iter().map(|&i| eigvals[i]).collect();
    let total: f64 = eigvals.iter().map(|v| v.max(0.0)).sum();

    let keep = if total <= 0.0 {
        1
    } else {
        let mut acc = 0.0;
        let mut keep = d;
        for (i, &ev) in eigvals.iter().enumerate() {
            acc += ev.max(0.0);
            if acc / total >= var_keep {
                keep = i + 1;
                break;
            }
        }
        keep
    };

    let mut basis = Array2::<f64>::zeros((d, keep));
    for (out_col, &src) in order.iter().take(keep).enumerate() {
        for i in 0..d {
            basis[[i, out_col]] = eigvecs[[i, src]];
        }
    }
    let retained = if total <= 0.0 {
        1.0
    } else {
        eigvals.iter().take(keep).map(|v| v.max(0.0)).sum::<f64>() / total
    };

    Ok(PcaModel {
        mean,
        basis,
        eigenvalues: eigvals,
        retained_variance_fraction: retained,
    })
}

/// Project a feature field through a fitted PCA model: `x -> B^T (x - mean)`.
pub fn pca_apply(model: &PcaModel, f: &FeatureField) -> Result<FeatureField> {
    if f.dim() != model.mean.len() {
        return Err(Error::DimMismatch {
            expected: model.mean.len(),
            got: f.dim(),
        });
    }
    let centered = f.data() - &model.mean.view().insert_axis(ndarray::Axis(0));
    let projected = centered.dot(&model.basis);
    FeatureField::new(f.lattice(), projected)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvector columns), unsorted.
fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(d);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() < 1e-14 * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..d {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for i in 0..d {
                    let mpi = m[[p, i]];
                    let mqi = m[[q, i]];
                    m[[p, i]] = c * mpi - s * mqi;
                    m[[q, i]] = s * mpi + c * mqi;
                }
                for i in 0..d {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| m[[i, i]]).collect();
    (eig, v)
}
