//! End-to-end pipelines behind the CLI subcommands: segment an image, write
//! synthetic validation data, score predictions against references, tabulate
//! multi-subject statistics, and sweep the segment count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::em::{segment, FitConfig, ModelKind, SegmentationResult};
use crate::error::{Error, Result};
use crate::eval::{
    boundary_from_labels, f_boundary, pearson, rand_indices, subject_stats, DEFAULT_BOUNDARY_TOL,
};
use crate::features::{
    extract_raw_features, make_filter_bank, pca_apply, pca_fit, ColorSpace, PcaModel,
};
use crate::field::{entropy_map, FeatureField, LabelMap, Lattice, Rgb8Image};
use crate::io;
use crate::synth::{gen_prior_field, sample_image, SynthSpec, Uncertainty};

/// Orientation count fixed by the feature design; the paper's single spatial
/// scale, here 8 px.
pub const N_ORIENTATIONS: usize = 4;
pub const FILTER_SCALE: f64 = 8.0;
const K_MAX_ALLOWED: usize = 64;

/// Run `f` on a dedicated thread pool of the given size, or inline on the
/// global pool when `threads` is `None`. Results are identical either way;
/// the knob only controls resource use.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(t) if t > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .expect("thread pool construction")
            .install(f),
        _ => f(),
    }
}

fn check_k(k: usize) -> Result<()> {
    if !(1..=K_MAX_ALLOWED).contains(&k) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside the supported range 1..={K_MAX_ALLOWED}"
        )));
    }
    Ok(())
}

fn input_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// Color + oriented-filter features reduced by PCA; the standard front end
/// shared by all fitting commands.
pub fn image_to_features(img: &Rgb8Image, pca_var: f64) -> Result<(FeatureField, PcaModel)> {
    let bank = make_filter_bank(N_ORIENTATIONS, FILTER_SCALE)?;
    let raw = extract_raw_features(img, &bank, ColorSpace::Lab);
    let pca = pca_fit(&raw, pca_var)?;
    let reduced = pca_apply(&pca, &raw)?;
    Ok((reduced, pca))
}

/// Everything `segment` needs beyond the fit hyperparameters.
#[derive(Clone, Debug)]
pub struct SegmentOpts {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub k: usize,
    pub sigma: f64,
    pub model_kind: ModelKind,
    pub with_spatial_prior: bool,
    pub pca_var: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl SegmentOpts {
    fn fit_config(&self) -> FitConfig {
        FitConfig {
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            seed: self.seed,
            sigma: self.sigma,
            min_component_mass: None,
            model_kind: self.model_kind,
            with_spatial_prior: self.with_spatial_prior,
        }
    }
}

/// Paths of the artifacts one segmentation run writes.
#[derive(Clone, Debug)]
pub struct SegmentArtifacts {
    pub labels: PathBuf,
    pub prob_field: PathBuf,
    pub entropy: PathBuf,
    pub model_params: PathBuf,
    pub trace: PathBuf,
}

/// Outcome summary of one segmentation run.
#[derive(Debug)]
pub struct SegmentOutcome {
    pub result: SegmentationResult,
    pub artifacts: SegmentArtifacts,
    pub feature_dim: usize,
    pub mean_entropy: f64,
}

/// Segment one image and write the label map, probability field, entropy
/// map, model parameters, and fit trace into the output directory.
pub fn run_segment(opts: &SegmentOpts) -> Result<SegmentOutcome> {
    check_k(opts.k)?;
    let img = io::read_image(&opts.input)?;
    std::fs::create_dir_all(&opts.output_dir)?;
    let (features, _pca) = image_to_features(&img, opts.pca_var)?;
    let result = segment(&features, opts.k, &opts.fit_config())?;
    let artifacts = write_segmentation(&result, &opts.output_dir, &input_stem(&opts.input))?;
    let mean_entropy =
        result.entropy.data().iter().sum::<f64>() / result.entropy.data().len() as f64;
    Ok(SegmentOutcome {
        feature_dim: features.dim(),
        mean_entropy,
        result,
        artifacts,
    })
}

fn write_segmentation(
    result: &SegmentationResult,
    dir: &Path,
    stem: &str,
) -> Result<SegmentArtifacts> {
    let artifacts = SegmentArtifacts {
        labels: dir.join(format!("{stem}_labels.pgm")),
        prob_field: dir.join(format!("{stem}_p.pseg")),
        entropy: dir.join(format!("{stem}_entropy.pgm")),
        model_params: dir.join(format!("{stem}_model.txt")),
        trace: dir.join(format!("{stem}_trace.csv")),
    };
    io::write_label_map_pgm(&result.labels, &artifacts.labels)?;
    io::write_prob_field(&result.probabilities, &artifacts.prob_field)?;
    io::write_entropy_pgm(&result.entropy, result.model.k(), &artifacts.entropy)?;
    io::write_model_params(&result.model, &artifacts.model_params)?;
    io::write_trace_csv(&result.trace, &artifacts.trace)?;
    Ok(artifacts)
}

/// Synthetic-image generation settings.
#[derive(Clone, Debug)]
pub struct SynthOpts {
    pub output_dir: PathBuf,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub uncertainty: Uncertainty,
    pub seed: u64,
}

/// Artifacts written by `synth`.
#[derive(Clone, Debug)]
pub struct SynthArtifacts {
    pub image: PathBuf,
    pub true_field: PathBuf,
    pub labels: PathBuf,
}

/// Generate a synthetic validation image: a smooth ground-truth mixing
/// field, per-pixel segment draws, and Student-t colors; writes the color
/// image (PPM, channels clamped to 8 bits around mid-gray), the true field
/// (PSEG), and the drawn labels (PGM).
pub fn run_synth(opts: &SynthOpts) -> Result<SynthArtifacts> {
    check_k(opts.k)?;
    if opts.k < 2 {
        return Err(Error::InvalidArgument(
            "synthetic images need k >= 2".into(),
        ));
    }
    std::fs::create_dir_all(&opts.output_dir)?;
    let spec = SynthSpec::new(
        Lattice::new(opts.height, opts.width)?,
        crate::synth::default_components(opts.k),
        opts.uncertainty,
        opts.seed,
    )?;
    let p = gen_prior_field(&spec);
    let (features, labels) = sample_image(&spec, &p);

    // Map the 3-channel samples into displayable 8-bit RGB around mid-gray.
    let img = Rgb8Image::from_fn(spec.lattice, |r, c| {
        let row = features.row(spec.lattice.index(r, c));
        let mut px = [0u8; 3];
        for (out, &v) in px.iter_mut().zip(row.iter()) {
            *out = (v + 128.0).round().clamp(0.0, 255.0) as u8;
        }
        px
    });

    let regime = match opts.uncertainty {
        Uncertainty::Low => "low",
        Uncertainty::High => "high",
    };
    let stem = format!("synth_{regime}_k{}_seed{}", opts.k, opts.seed);
    let artifacts = SynthArtifacts {
        image: opts.output_dir.join(format!("{stem}.ppm")),
        true_field: opts.output_dir.join(format!("{stem}_true_p.pseg")),
        labels: opts.output_dir.join(format!("{stem}_true_labels.pgm")),
    };
    io::write_ppm(&img, &artifacts.image)?;
    io::write_prob_field(&p, &artifacts.true_field)?;
    io::write_label_map_pgm(&labels, &artifacts.labels)?;
    Ok(artifacts)
}

/// Scoring settings: predicted label maps against reference segmentations.
#[derive(Clone, Debug)]
pub struct EvalOpts {
    /// A predicted label map (16-bit PGM) or a directory of them.
    pub pred: PathBuf,
    /// A reference map (`.seg` or PGM) or a directory searched recursively;
    /// several references may share one image stem.
    pub truth: PathBuf,
    /// Optional CSV report destination.
    pub output: Option<PathBuf>,
}

/// Scores for one image.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub image: String,
    pub k: usize,
    pub n_refs: usize,
    pub ri: f64,
    pub ari: f64,
    pub f_b: f64,
    pub mean_entropy: Option<f64>,
}

fn collect_files(root: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if root.is_file() {
        out.push(root.to_path_buf());
        return Ok(out);
    }
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                stack.push(path);
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Image identity of an artifact file: its stem with the artifact suffixes
/// used by `segment` and `synth` stripped, so `X_labels.pgm`,
/// `X_true_labels.pgm`, and `X.seg` all group under `X`.
fn image_id(stem: &str) -> &str {
    stem.strip_suffix("_true_labels")
        .or_else(|| stem.strip_suffix("_labels"))
        .unwrap_or(stem)
}

fn read_reference(path: &Path) -> Result<LabelMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("seg") => io::parse_seg_file(path),
        _ => io::read_label_map_pgm(path),
    }
}

/// Score every predicted label map against the references sharing its image
/// stem (a prediction named `X_labels.pgm` matches references named `X.*`).
/// RI and aRI are averaged over references; the boundary F-measure uses all
/// references jointly. Mean entropy is read from the prediction's sibling
/// PSEG artifact when present.
pub fn run_eval(opts: &EvalOpts) -> Result<Vec<EvalRecord>> {
    let preds = collect_files(&opts.pred, &["pgm"])?;
    if preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no predicted label maps (.pgm) under {}",
            opts.pred.display()
        )));
    }
    let mut refs_by_stem: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for path in collect_files(&opts.truth, &["seg", "pgm"])? {
        refs_by_stem
            .entry(image_id(&input_stem(&path)).to_string())
            .or_default()
            .push(path);
    }

    let mut records = Vec::new();
    for pred_path in preds {
        let stem = input_stem(&pred_path);
        // Skip sibling artifacts that are not label maps.
        if stem.ends_with("_entropy") {
            continue;
        }
        let image = image_id(&stem).to_string();
        let Some(ref_paths) = refs_by_stem.get(&image) else {
            continue;
        };
        let pred = io::read_label_map_pgm(&pred_path)?;
        let refs: Vec<LabelMap> = ref_paths
            .iter()
            .map(|p| read_reference(p))
            .collect::<Result<_>>()?;

        let mut ri_sum = 0.0;
        let mut ari_sum = 0.0;
        for r in &refs {
            let (ri, ari) = rand_indices(&pred, r)?;
            ri_sum += ri;
            ari_sum += ari;
        }
        let truth_boundaries: Vec<_> = refs.iter().map(boundary_from_labels).collect();
        let f_b = f_boundary(
            &boundary_from_labels(&pred),
            &truth_boundaries,
            DEFAULT_BOUNDARY_TOL,
        )?;

        let pseg = pred_path.with_file_name(format!("{image}_p.pseg"));
        let mean_entropy = if pseg.is_file() {
            let p = io::read_prob_field(&pseg)?;
            let e = entropy_map(&p);
            Some(e.data().iter().sum::<f64>() / e.data().len() as f64)
        } else {
            None
        };

        records.push(EvalRecord {
            image,
            k: pred.k(),
            n_refs: refs.len(),
            ri: ri_sum / refs.len() as f64,
            ari: ari_sum / refs.len() as f64,
            f_b,
            mean_entropy,
        });
    }

    if let Some(out) = &opts.output {
        let rows: Vec<Vec<String>> = records
            .iter()
            .map(|r| {
                vec![
                    r.image.clone(),
                    r.k.to_string(),
                    r.n_refs.to_string(),
                    format!("{:.6}", r.ri),
                    format!("{:.6}", r.ari),
                    format!("{:.6}", r.f_b),
                    r.mean_entropy.map(|e| format!("{e:.6}")).unwrap_or_default(),
                ]
            })
            .collect();
        io::write_csv(
            &["image", "k", "n_refs", "ri", "ari", "f_b", "mean_entropy"],
            &rows,
            out,
        )?;
    }
    Ok(records)
}

/// Multi-subject statistics settings.
#[derive(Clone, Debug)]
pub struct StatsOpts {
    /// Directory of `.seg`/PGM reference maps, several subjects per image.
    pub truth: PathBuf,
    pub output: Option<PathBuf>,
}

/// Per-image segment-count statistics across subjects.
#[derive(Clone, Debug)]
pub struct StatsRecord {
    pub image: String,
    pub n_subjects: usize,
    pub mean_segments: f64,
    pub sd_segments: f64,
}

/// Summary over a reference directory.
#[derive(Clone, Debug)]
pub struct StatsSummary {
    pub records: Vec<StatsRecord>,
    /// Pearson correlation between per-image mean segment count and its
    /// standard deviation, when at least three images qualify.
    pub mean_sd_correlation: Option<f64>,
}

/// Group reference maps by image stem and report per-image segment-count
/// mean and spread across subjects, plus the cross-image count/spread
/// correlation.
pub fn run_stats(opts: &StatsOpts) -> Result<StatsSummary> {
    let mut by_stem: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for path in collect_files(&opts.truth, &["seg", "pgm"])? {
        by_stem.entry(input_stem(&path)).or_default().push(path);
    }
    let mut records = Vec::new();
    for (image, paths) in by_stem {
        if paths.len() < 2 {
            continue;
        }
        let maps: Vec<LabelMap> = paths
            .iter()
            .map(|p| read_reference(p))
            .collect::<Result<_>>()?;
        let stats = subject_stats(&maps, None, None)?;
        records.push(StatsRecord {
            image,
            n_subjects: maps.len(),
            mean_segments: stats.mean_segments,
            sd_segments: stats.sd_segments,
        });
    }

    let mean_sd_correlation = if records.len() >= 3 {
        let means: Vec<f64> = records.iter().map(|r| r.mean_segments).collect();
        let sds: Vec<f64> = records.iter().map(|r| r.sd_segments).collect();
        pearson(&means, &sds).ok()
    } else {
        None
    };

    if let Some(out) = &opts.output {
        let rows: Vec<Vec<String>> = records
            .iter()
            .map(|r| {
                vec![
                    r.image.clone(),
                    r.n_subjects.to_string(),
                    format!("{:.6}", r.mean_segments),
                    format!("{:.6}", r.sd_segments),
                ]
            })
            .collect();
        io::write_csv(
            &["image", "n_subjects", "mean_segments", "sd_segments"],
            &rows,
            out,
        )?;
    }
    Ok(StatsSummary {
        records,
        mean_sd_correlation,
    })
}

/// Sweep settings: everything `segment` takes, over a K range.
#[derive(Clone, Debug)]
pub struct SweepOpts {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub k_min: usize,
    pub k_max: usize,
    pub sigma: f64,
    pub model_kind: ModelKind,
    pub with_spatial_prior: bool,
    pub pca_var: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

/// One row of the sweep report.
#[derive(Clone, Debug)]
pub struct SweepRecord {
    pub k: usize,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub mean_entropy: f64,
}

/// Fit the image once per K in the range, writing per-K artifacts and a
/// summary CSV; features are extracted once and shared.
pub fn run_sweep(opts: &SweepOpts) -> Result<Vec<SweepRecord>> {
    check_k(opts.k_min)?;
    check_k(opts.k_max)?;
    if opts.k_min > opts.k_max {
        return Err(Error::InvalidArgument(format!(
            "empty k range {}..={}",
            opts.k_min, opts.k_max
        )));
    }
    let img = io::read_image(&opts.input)?;
    std::fs::create_dir_all(&opts.output_dir)?;
    let (features, _pca) = image_to_features(&img, opts.pca_var)?;
    let stem = input_stem(&opts.input);

    let mut records = Vec::new();
    for k in opts.k_min..=opts.k_max {
        let cfg = FitConfig {
            max_iters: opts.max_iters,
            rel_tol: opts.rel_tol,
            seed: opts.seed,
            sigma: opts.sigma,
            min_component_mass: None,
            model_kind: opts.model_kind,
            with_spatial_prior: opts.with_spatial_prior,
        };
        let result = segment(&features, k, &cfg)?;
        write_segmentation(&result, &opts.output_dir, &format!("{stem}_k{k}"))?;
        let mean_entropy =
            result.entropy.data().iter().sum::<f64>() / result.entropy.data().len() as f64;
        records.push(SweepRecord {
            k,
            iterations: result.trace.n_iters,
            converged: result.trace.converged,
            objective: *result
                .trace
                .objective_per_iter
                .last()
                .expect("at least one iteration"),
            mean_entropy,
        });
    }

    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                r.iterations.to_string(),
                r.converged.to_string(),
                format!("{:.10e}", r.objective),
                format!("{:.6}", r.mean_entropy),
            ]
        })
        .collect();
    io::write_csv(
        &["k", "iterations", "converged", "objective", "mean_entropy"],
        &rows,
        &opts.output_dir.join(format!("{stem}_sweep.csv")),
    )?;
    Ok(records)
}
