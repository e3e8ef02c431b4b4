//! Pixel lattice and the typed per-pixel containers shared across the crate.
//!
//! All per-pixel storage is row-major: pixel `(row, col)` lives at flat index
//! `row * width + col`. Probability fields keep one simplex row per pixel and
//! are validated on construction so downstream code can rely on the row-sum
//! invariant instead of re-checking it.

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Image grid dimensions. Rows index height, columns index width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lattice {
    height: usize,
    width: usize,
}

impl Lattice {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyLattice { height, width });
        }
        Ok(Self { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Flat row-major index of `(row, col)`.
    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    /// Inverse of [`Lattice::index`].
    pub fn coords(&self, index: usize) -> (usize, usize) {
        debug_assert!(index < self.n_pixels());
        (index / self.width, index % self.width)
    }
}

pub(crate) fn check_lattices(a: Lattice, b: Lattice) -> Result<()> {
    if a != b {
        return Err(Error::LatticeMismatch {
            a_height: a.height,
            a_width: a.width,
            b_height: b.height,
            b_width: b.width,
        });
    }
    Ok(())
}

/// One D-dimensional feature vector per pixel, stored as an `N x D` matrix.
#[derive(Clone, Debug)]
pub struct FeatureField {
    lattice: Lattice,
    data: Array2<f64>,
}

impl FeatureField {
    pub fn new(lattice: Lattice, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != lattice.n_pixels() {
            return Err(Error::DimMismatch {
                expected: lattice.n_pixels(),
                got: data.nrows(),
            });
        }
        if data.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "feature dimension must be at least 1".into(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "feature field",
            });
        }
        Ok(Self { lattice, data })
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn n_pixels(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn row(&self, n: usize) -> ArrayView1<'_, f64> {
        self.data.row(n)
    }
}

/// One probability simplex over K components per pixel (`N x K`).
///
/// Construction enforces the invariant that entries lie in `[0, 1]` and each
/// row sums to 1 within 1e-9.
#[derive(Clone, Debug)]
pub struct ProbabilityField {
    lattice: Lattice,
    data: Array2<f64>,
}

impl ProbabilityField {
    pub fn new(lattice: Lattice, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != lattice.n_pixels() {
            return Err(Error::DimMismatch {
                expected: lattice.n_pixels(),
                got: data.nrows(),
            });
        }
        if data.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "probability field needs at least one component".into(),
            ));
        }
        for (row, r) in data.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &v in r {
                if !(-1e-12..=1.0 + 1e-12).contains(&v) {
                    return Err(Error::InvalidArgument(format!(
                        "probability entry {v} in row {row} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "probability row {row} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { lattice, data })
    }

    /// Uniform field: every pixel gets `1/k` for each component.
    pub fn uniform(lattice: Lattice, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "probability field needs at least one component".into(),
            ));
        }
        let data = Array2::from_elem((lattice.n_pixels(), k), 1.0 / k as f64);
        Ok(Self { lattice, data })
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn k(&self) -> usize {
        self.data.ncols()
    }

    pub fn n_pixels(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn row(&self, n: usize) -> ArrayView1<'_, f64> {
        self.data.row(n)
    }
}

/// One scalar per pixel (entropy maps, smoothing inputs/outputs, scale fields).
#[derive(Clone, Debug)]
pub struct ScalarField {
    lattice: Lattice,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(lattice: Lattice, data: Vec<f64>) -> Result<Self> {
        if data.len() != lattice.n_pixels() {
            return Err(Error::DimMismatch {
                expected: lattice.n_pixels(),
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "scalar field",
            });
        }
        Ok(Self { lattice, data })
    }

    pub fn constant(lattice: Lattice, value: f64) -> Self {
        Self {
            lattice,
            data: vec![value; lattice.n_pixels()],
        }
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[self.lattice.index(row, col)]
    }
}

/// One integer label in `{0, .., k-1}` per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    lattice: Lattice,
    labels: Vec<u32>,
    k: u32,
}

impl LabelMap {
    pub fn new(lattice: Lattice, labels: Vec<u32>, k: u32) -> Result<Self> {
        if labels.len() != lattice.n_pixels() {
            return Err(Error::DimMismatch {
                expected: lattice.n_pixels(),
                got: labels.len(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidArgument("label count must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for k = {k}"
            )));
        }
        Ok(Self { lattice, labels, k })
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn k(&self) -> usize {
        self.k as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.labels[self.lattice.index(row, col)]
    }
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8Image {
    lattice: Lattice,
    data: Vec<u8>,
}

impl Rgb8Image {
    pub fn new(lattice: Lattice, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * lattice.n_pixels() {
            return Err(Error::DimMismatch {
                expected: 3 * lattice.n_pixels(),
                got: data.len(),
            });
        }
        Ok(Self { lattice, data })
    }

    pub fn from_fn(lattice: Lattice, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * lattice.n_pixels());
        for row in 0..lattice.height() {
            for col in 0..lattice.width() {
                data.extend_from_slice(&f(row, col));
            }
        }
        Self { lattice, data }
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * self.lattice.index(row, col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Hard segmentation: per pixel, the component with the largest probability.
/// Ties resolve to the lowest component index.
pub fn argmax_labels(p: &ProbabilityField) -> LabelMap {
    let labels = p
        .data()
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0usize;
            let mut best_v = r[0];
            for (j, &v) in r.iter().enumerate().skip(1) {
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            best as u32
        })
        .collect();
    LabelMap::new(p.lattice(), labels, p.k() as u32)
        .expect("argmax labels are in range by construction")
}

/// Per-pixel Shannon entropy of the component probabilities, in nats.
/// Zero entries contribute zero; values land in `[0, ln k]`.
pub fn entropy_map(p: &ProbabilityField) -> ScalarField {
    let data = p
        .data()
        .rows()
        .into_iter()
        .map(|r| {
            let mut h = 0.0;
            for &v in r {
                if v > 0.0 {
                    h -= v * v.ln();
                }
            }
            h.max(0.0)
        })
        .collect();
    ScalarField::new(p.lattice(), data).expect("entropy of a valid field is finite")
}

/// Scale each row of a nonnegative matrix to sum to 1, producing a valid
/// probability field. Rows with total mass below 1e-300 are an error.
pub fn renormalize_rows(lattice: Lattice, mut data: Array2<f64>) -> Result<ProbabilityField> {
    if data.nrows() != lattice.n_pixels() {
        return Err(Error::DimMismatch {
            expected: lattice.n_pixels(),
            got: data.nrows(),
        });
    }
    for (row, mut r) in data.rows_mut().into_iter().enumerate() {
        let mut sum = 0.0;
        for &v in r.iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "renormalize_rows requires finite nonnegative entries, row {row} has {v}"
                )));
            }
            sum += v;
        }
        if sum <= 1e-300 {
            return Err(Error::ZeroRow { row });
        }
        r.mapv_inplace(|v| v / sum);
    }
    ProbabilityField::new(lattice, data)
}
