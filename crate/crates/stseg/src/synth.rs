//! Synthetic validation data: smooth ground-truth mixing fields with a
//! controllable uncertainty level, Student-t image sampling from them, and
//! the permutation-aligned recovery error.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{FeatureField, LabelMap, Lattice, ProbabilityField, ScalarField};
use crate::prior::{smooth_field, SmoothingKernel};
use crate::studentt::ComponentParams;

/// How peaked the generated ground-truth mixing field should be.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Uncertainty {
    /// Near-binary field: most pixels almost certainly belong to one segment.
    Low,
    /// Balanced field with substantial per-pixel entropy.
    High,
}

/// Recipe for one synthetic image: the lattice, the per-segment color
/// distributions (3-channel), the uncertainty regime, and the seed.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub lattice: Lattice,
    pub components: Vec<ComponentParams>,
    pub uncertainty: Uncertainty,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(
        lattice: Lattice,
        components: Vec<ComponentParams>,
        uncertainty: Uncertainty,
        seed: u64,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument(
                "a synthetic image needs at least one segment".into(),
            ));
        }
        for c in &components {
            if c.dim() != 3 {
                return Err(Error::DimMismatch {
                    expected: 3,
                    got: c.dim(),
                });
            }
        }
        Ok(Self {
            lattice,
            components,
            uncertainty,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }
}

/// Smooth random bump fields through a temperature-controlled softmax.
///
/// Each segment gets an independent white-noise field smoothed at a quarter
/// of the image side and standardized, so the truth is made of a handful of
/// large coherent regions with gentle transitions. The softmax amplitude is
/// then calibrated to the regime target: `Low` sharpens until at least 80%
/// of pixels have a dominant segment (max above 0.9); `High` bisects the
/// amplitude so the mean entropy sits just above half the maximum — balanced
/// mixing everywhere, but still clearly structured.
pub fn gen_prior_field(spec: &SynthSpec) -> ProbabilityField {
    let k = spec.k();
    assert!(k >= 2, "uncertainty regimes need at least two segments");
    let l = spec.lattice;
    let n = l.n_pixels();

    // Noise generation uses a stream no pixel-sampling stream can collide
    // with, so the field and the image draws stay independent.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let sigma = (l.height().min(l.width()) as f64 / 3.0).max(2.0);
    let kernel = SmoothingKernel::new(sigma).expect("positive width");

    let mut fields: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let smoothed = smooth_field(&kernel, &ScalarField::new(l, noise).expect("finite"));
        let mut v = smoothed.data().to_vec();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for x in v.iter_mut() {
            *x = (*x - mean) / scale;
        }
        fields.push(v);
    }

    let softmax = |amp: f64| -> Array2<f64> {
        let mut p = Array2::<f64>::zeros((n, k));
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for j in 0..k {
                let v = amp * fields[j][i];
                p[[i, j]] = v;
                if v > max {
                    max = v;
                }
            }
            let mut total = 0.0;
            for j in 0..k {
                let e = (p[[i, j]] - max).exp();
                p[[i, j]] = e;
                total += e;
            }
            for j in 0..k {
                p[[i, j]] /= total;
            }
        }
        p
    };

    let mean_entropy = |p: &Array2<f64>| -> f64 {
        p.rows()
            .into_iter()
            .map(|r| -r.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>())
            .sum::<f64>()
            / n as f64
    };

    let data = match spec.uncertainty {
        Uncertainty::Low => {
            let mut amp = 1.0f64;
            loop {
                let p = softmax(amp);
                let confident = p
                    .rows()
                    .into_iter()
                    .filter(|r| r.iter().cloned().fold(0.0, f64::max) > 0.9)
                    .count();
                if confident as f64 >= 0.8 * n as f64 || amp > 1e6 {
                    break p;
                }
                amp *= 1.6;
            }
        }
        Uncertainty::High => {
            // Pointwise softmax entropy decreases monotonically as the
            // amplitude grows, so bisect for the sharpest amplitude whose
            // mean entropy still clears the target with a small margin.
            let target = 0.55 * (k as f64).ln();
            let mut lo = 1e-3f64;
            let mut hi = 1e3f64;
            for _ in 0..60 {
                let mid = (lo * hi).sqrt();
                if mean_entropy(&softmax(mid)) >= target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            softmax(lo)
        }
    };
    ProbabilityField::new(l, data).expect("softmax rows sum to one")
}

/// Draw one image: per pixel, a segment from the mixing vector, then a
/// Student-t color as a Gaussian draw scaled by the square root of
/// `nu / ChiSquared(nu)`. Every pixel owns its own counter-indexed random
/// stream, so the output is independent of traversal or thread order.
pub fn sample_image(spec: &SynthSpec, p: &ProbabilityField) -> (FeatureField, LabelMap) {
    let l = spec.lattice;
    assert_eq!(p.lattice(), l, "mixing field lattice mismatch");
    assert_eq!(p.k(), spec.k(), "mixing field segment count mismatch");
    let n = l.n_pixels();
    let k = spec.k();
    let ps = p.data().as_slice().expect("row-major");

    let chis: Vec<ChiSquared<f64>> = spec
        .components
        .iter()
        .map(|c| ChiSquared::new(c.nu()).expect("positive degrees of freedom"))
        .collect();

    let mut data = vec![0.0f64; n * 3];
    let mut labels = vec![0u32; n];
    data.par_chunks_mut(3)
        .zip(labels.par_iter_mut())
        .enumerate()
        .for_each(|(i, (x, label))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            // Categorical draw by cumulative walk.
            let u: f64 = rng.random();
            let mut c = k - 1;
            let mut acc = 0.0;
            for j in 0..k {
                acc += ps[i * k + j];
                if u < acc {
                    c = j;
                    break;
                }
            }
            *label = c as u32;

            let comp = &spec.components[c];
            let w: f64 = chis[c].sample(&mut rng);
            let scale = (comp.nu() / w).sqrt();
            let z: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let chol = comp.chol();
            for r in 0..3 {
                let mut v = comp.mu()[r];
                for cix in 0..=r {
                    v += scale * chol[[r, cix]] * z[cix];
                }
                x[r] = v;
            }
        });

    let f = FeatureField::new(l, Array2::from_shape_vec((n, 3), data).expect("shape"))
        .expect("finite samples");
    let labels = LabelMap::new(l, labels, k as u32).expect("labels below k");
    (f, labels)
}

/// Ready-made segment distributions for synthetic images: means spread on a
/// circle in the 3-channel color cube, isotropic covariances, and degrees of
/// freedom cycling through heavy and light tails.
pub fn default_components(k: usize) -> Vec<ComponentParams> {
    let nus = [3.0, 10.0, 5.0, 30.0, 4.0, 15.0];
    (0..k)
        .map(|j| {
            let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
            let mu = ndarray::array![
                60.0 * angle.cos(),
                60.0 * angle.sin(),
                25.0 * (2.0 * angle).cos()
            ];
            let sigma = Array2::from_diag(&ndarray::array![100.0, 100.0, 100.0]);
            ComponentParams::new(nus[j % nus.len()], mu, sigma).expect("fixed valid parameters")
        })
        .collect()
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..k).collect();
    fn heap(n: usize, items: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n <= 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..n {
            heap(n - 1, items, out);
            if n % 2 == 0 {
                items.swap(i, n - 1);
            } else {
                items.swap(0, n - 1);
            }
        }
    }
    heap(k, &mut items, &mut out);
    out
}

/// Mean absolute error between two mixing fields after aligning segment
/// identities with the best of all K! channel permutations (K at most 6).
pub fn recovery_mae(p_true: &ProbabilityField, p_est: &ProbabilityField) -> Result<f64> {
    if p_true.lattice() != p_est.lattice() {
        return Err(Error::LatticeMismatch {
            a_height: p_true.lattice().height(),
            a_width: p_true.lattice().width(),
            b_height: p_est.lattice().height(),
            b_width: p_est.lattice().width(),
        });
    }
    if p_true.k() != p_est.k() {
        return Err(Error::KMismatch {
            a: p_true.k(),
            b: p_est.k(),
        });
    }
    let k = p_true.k();
    if k > 6 {
        return Err(Error::InvalidArgument(
            "segment matching is exhaustive and limited to k <= 6".into(),
        ));
    }
    let n = p_true.n_pixels();
    let t = p_true.data().as_slice().expect("row-major");
    let e = p_est.data().as_slice().expect("row-major");

    let best = permutations(k)
        .iter()
        .map(|perm| {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += (t[i * k + j] - e[i * k + perm[j]]).abs();
                    }
                    acc
                })
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    Ok(best / (n * k) as f64)
}
