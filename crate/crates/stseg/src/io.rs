//! File formats: PPM/PNG images in, PPM out, 16-bit PGM label and entropy
//! maps, the binary probability-field container, BSDS-style `.seg` human
//! segmentations, plain-text model parameters, and CSV traces/score tables.
//!
//! Every writer goes through a temp-file-plus-rename so a crash never leaves
//! a partial artifact behind.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::em::{FitTrace, MixtureModel, ModelKind};
use crate::error::{Error, Result};
use crate::field::{LabelMap, Lattice, ProbabilityField, Rgb8Image, ScalarField};

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Write `bytes` to `path` atomically: a sibling temp file is written, synced
/// by the OS on close, then renamed over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp~");
    let tmp_path = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp_path)?;
        f.write_all(bytes)?;
    }
    fs::rename(&tmp_path, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Netpbm parsing helpers
// ---------------------------------------------------------------------------

/// Token reader over netpbm headers: skips whitespace and `#` comments.
struct PnmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> PnmHeader<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path: path_str(path),
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format {
                path: self.path.clone(),
                msg: "unexpected end of header".into(),
            });
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                path: self.path.clone(),
                msg: format!("expected a number, got {:?}", String::from_utf8_lossy(tok)),
            })
    }

    /// Consume exactly one whitespace byte after the maxval, per the P5/P6
    /// binary formats, and return the raster that follows.
    fn raster(mut self) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(Error::Format {
                path: self.path,
                msg: "missing separator before raster".into(),
            });
        }
        self.pos += 1;
        Ok(&self.bytes[self.pos..])
    }
}

/// Read an 8-bit binary PPM (P6, maxval 255).
pub fn read_ppm(path: &Path) -> Result<Rgb8Image> {
    let bytes = fs::read(path)?;
    let mut h = PnmHeader::new(&bytes, path);
    if h.token()? != b"P6" {
        return Err(Error::Format {
            path: path_str(path),
            msg: "not a binary PPM (P6)".into(),
        });
    }
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if maxval != 255 {
        return Err(Error::Format {
            path: path_str(path),
            msg: format!("unsupported maxval {maxval} (only 255)"),
        });
    }
    let raster = h.raster()?;
    let expected = height * width * 3;
    if raster.len() != expected {
        return Err(Error::Format {
            path: path_str(path),
            msg: format!("raster holds {} bytes, expected {expected}", raster.len()),
        });
    }
    Rgb8Image::new(Lattice::new(height, width)?, raster.to_vec())
}

/// Write an 8-bit binary PPM (P6).
pub fn write_ppm(img: &Rgb8Image, path: &Path) -> Result<()> {
    let l = img.lattice();
    let mut out = format!("P6\n{} {}\n255\n", l.width(), l.height()).into_bytes();
    out.extend_from_slice(img.data());
    atomic_write(path, &out)
}

/// Read a PPM or PNG image by extension.
pub fn read_image(path: &Path) -> Result<Rgb8Image> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" => read_ppm(path),
        "png" => {
            let img = image::open(path)?.into_rgb8();
            let (w, h) = img.dimensions();
            Rgb8Image::new(Lattice::new(h as usize, w as usize)?, img.into_raw())
        }
        other => Err(Error::Format {
            path: path_str(path),
            msg: format!("unsupported image extension {other:?} (use ppm or png)"),
        }),
    }
}

/// Write a 16-bit binary PGM (P5, maxval 65535, big-endian samples).
fn write_pgm16(values: impl Iterator<Item = u16>, lattice: Lattice, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", lattice.width(), lattice.height()).into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    atomic_write(path, &out)
}

/// Label map as a raw-valued 16-bit PGM.
pub fn write_label_map_pgm(m: &LabelMap, path: &Path) -> Result<()> {
    if m.k() > u16::MAX as usize + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} labels do not fit a 16-bit PGM",
            m.k()
        )));
    }
    write_pgm16(m.labels().iter().map(|&l| l as u16), m.lattice(), path)
}

/// Entropy map as a 16-bit PGM, scaled by `65535 / ln k` so full intensity
/// always means maximal uncertainty regardless of the segment count.
pub fn write_entropy_pgm(e: &ScalarField, k: usize, path: &Path) -> Result<()> {
    let scale = if k > 1 { 65535.0 / (k as f64).ln() } else { 0.0 };
    write_pgm16(
        e.data()
            .iter()
            .map(|&h| (h * scale).round().clamp(0.0, 65535.0) as u16),
        e.lattice(),
        path,
    )
}

/// Read a binary PGM (P5) with 8- or 16-bit samples as a label map; the
/// segment count is one past the largest value present.
pub fn read_label_map_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let mut h = PnmHeader::new(&bytes, path);
    if h.token()? != b"P5" {
        return Err(Error::Format {
            path: path_str(path),
            msg: "not a binary PGM (P5)".into(),
        });
    }
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format {
            path: path_str(path),
            msg: format!("invalid maxval {maxval}"),
        });
    }
    let raster = h.raster()?;
    let n = height * width;
    let wide = maxval > 255;
    let expected = n * if wide { 2 } else { 1 };
    if raster.len() != expected {
        return Err(Error::Format {
            path: path_str(path),
            msg: format!("raster holds {} bytes, expected {expected}", raster.len()),
        });
    }
    let labels: Vec<u32> = if wide {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    } else {
        raster.iter().map(|&b| b as u32).collect()
    };
    let k = labels.iter().max().copied().unwrap_or(0) + 1;
    LabelMap::new(Lattice::new(height, width)?, labels, k)
}

// ---------------------------------------------------------------------------
// Probability-field container
// ---------------------------------------------------------------------------

const PSEG_MAGIC: &[u8; 4] = b"PSEG";
const PSEG_VERSION: u16 = 1;

/// Serialize a probability field: magic "PSEG", version u16, then height,
/// width, and channel count as u32 (all little-endian), then the row-major
/// float32 samples, pixel-major and channel-minor.
pub fn write_prob_field(p: &ProbabilityField, path: &Path) -> Result<()> {
    let l = p.lattice();
    let mut out = Vec::with_capacity(18 + 4 * p.n_pixels() * p.k());
    out.extend_from_slice(PSEG_MAGIC);
    out.extend_from_slice(&PSEG_VERSION.to_le_bytes());
    out.extend_from_slice(&(l.height() as u32).to_le_bytes());
    out.extend_from_slice(&(l.width() as u32).to_le_bytes());
    out.extend_from_slice(&(p.k() as u32).to_le_bytes());
    for &v in p.data().iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    atomic_write(path, &out)
}

/// Read a probability field written by [`write_prob_field`]. Rows are
/// renormalized on ingestion to absorb float32 rounding.
pub fn read_prob_field(path: &Path) -> Result<ProbabilityField> {
    let bytes = fs::read(path)?;
    let fail = |msg: String| Error::Format {
        path: path_str(path),
        msg,
    };
    if bytes.len() < 18 {
        return Err(fail(format!("{} bytes is too short for a header", bytes.len())));
    }
    if &bytes[0..4] != PSEG_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PSEG_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let read_u32 =
        |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
    let height = read_u32(6) as usize;
    let width = read_u32(10) as usize;
    let k = read_u32(14) as usize;
    if k == 0 {
        return Err(fail("zero channels".into()));
    }
    let lattice = Lattice::new(height, width)?;
    let n = lattice.n_pixels();
    let expected = 18 + 4 * n * k;
    if bytes.len() != expected {
        return Err(fail(format!(
            "{} bytes for a {height}x{width}x{k} field, expected {expected}",
            bytes.len()
        )));
    }
    let mut data = Array2::<f64>::zeros((n, k));
    for (i, chunk) in bytes[18..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(fail(format!("non-finite sample at index {i}")));
        }
        data[[i / k, i % k]] = v as f64;
    }
    crate::field::renormalize_rows(lattice, data)
}

// ---------------------------------------------------------------------------
// BSDS-style .seg human segmentations
// ---------------------------------------------------------------------------

/// Parse a plain-text `.seg` human segmentation: free-form `key value`
/// header lines (at least `width`, `height`), a `data` line, then rows
/// `label row col_start col_end` with inclusive column ranges. Every pixel
/// must be covered exactly once; labels are renumbered densely in order of
/// first appearance in the file.
pub fn parse_seg_file(path: &Path) -> Result<LabelMap> {
    let text = fs::read_to_string(path)?;
    let parse_err = |msg: String| Error::Parse {
        path: path_str(path),
        msg,
    };
    let coverage_err = |msg: String| Error::Coverage {
        path: path_str(path),
        msg,
    };

    let mut width: Option<usize> = None;
    let mut height: Option<usize> = None;
    let mut lines = text.lines().enumerate();
    for (ln, line) in lines.by_ref() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        if key == "data" {
            break;
        }
        let value = parts.next();
        match key {
            "width" => {
                width = Some(value.and_then(|v| v.parse().ok()).ok_or_else(|| {
                    parse_err(format!("line {}: bad width", ln + 1))
                })?)
            }
            "height" => {
                height = Some(value.and_then(|v| v.parse().ok()).ok_or_else(|| {
                    parse_err(format!("line {}: bad height", ln + 1))
                })?)
            }
            _ => {} // other header keys (image, user, gray, ...) are ignored
        }
    }
    let width = width.ok_or_else(|| parse_err("missing width header".into()))?;
    let height = height.ok_or_else(|| parse_err("missing height header".into()))?;
    let lattice = Lattice::new(height, width)?;

    let mut labels = vec![u32::MAX; lattice.n_pixels()];
    let mut dense: Vec<u32> = Vec::new(); // raw label of each dense id, in first-appearance order
    for (ln, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(format!(
                "line {}: expected `label row col_start col_end`",
                ln + 1
            )));
        }
        let nums: Vec<usize> = fields
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(format!("line {}: {e}", ln + 1)))?;
        let (raw, row, c0, c1) = (nums[0] as u32, nums[1], nums[2], nums[3]);
        if row >= height || c1 >= width || c0 > c1 {
            return Err(parse_err(format!(
                "line {}: run {row}:{c0}-{c1} outside {height}x{width}",
                ln + 1
            )));
        }
        let id = match dense.iter().position(|&d| d == raw) {
            Some(i) => i as u32,
            None => {
                dense.push(raw);
                (dense.len() - 1) as u32
            }
        };
        for c in c0..=c1 {
            let at = lattice.index(row, c);
            if labels[at] != u32::MAX {
                return Err(coverage_err(format!("pixel ({row},{c}) covered twice")));
            }
            labels[at] = id;
        }
    }
    if let Some(missing) = labels.iter().position(|&l| l == u32::MAX) {
        let (r, c) = lattice.coords(missing);
        return Err(coverage_err(format!("pixel ({r},{c}) never covered")));
    }
    LabelMap::new(lattice, labels, dense.len() as u32)
}

// ---------------------------------------------------------------------------
// Model parameters and CSV reports
// ---------------------------------------------------------------------------

/// Fitted parameters as plain-text `key = value` lines: global settings,
/// then per-component degrees of freedom, mean, and covariance (row-major).
pub fn write_model_params(model: &MixtureModel, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("k = {}\n", model.k()));
    out.push_str(&format!("dim = {}\n", model.dim()));
    out.push_str(&format!(
        "model_kind = {}\n",
        match model.model_kind {
            ModelKind::StudentT => "student-t",
            ModelKind::Gaussian => "gaussian",
        }
    ));
    out.push_str(&format!(
        "with_spatial_prior = {}\n",
        model.with_spatial_prior
    ));
    for (i, c) in model.components.iter().enumerate() {
        out.push_str(&format!("component{i}.nu = {:.17e}\n", c.nu()));
        let mu: Vec<String> = c.mu().iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&format!("component{i}.mu = {}\n", mu.join(" ")));
        let sigma: Vec<String> = c.sigma().iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&format!("component{i}.sigma = {}\n", sigma.join(" ")));
    }
    atomic_write(path, out.as_bytes())
}

/// Objective trace as CSV (`iter,objective`).
pub fn write_trace_csv(trace: &FitTrace, path: &Path) -> Result<()> {
    let mut out = String::from("iter,objective\n");
    for (i, obj) in trace.objective_per_iter.iter().enumerate() {
        out.push_str(&format!("{i},{obj:.17e}\n"));
    }
    out.push_str(&format!(
        "# converged = {} after {} iterations\n",
        trace.converged, trace.n_iters
    ));
    atomic_write(path, out.as_bytes())
}

/// Generic CSV writer for score tables: a header row plus string records.
pub fn write_csv(header: &[&str], rows: &[Vec<String>], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}
