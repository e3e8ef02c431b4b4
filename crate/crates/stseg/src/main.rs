//! Thin command-line front end over the library pipelines.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use stseg::em::ModelKind;
use stseg::run::{
    run_eval, run_segment, run_stats, run_sweep, run_synth, with_threads, EvalOpts, SegmentOpts,
    StatsOpts, SweepOpts, SynthOpts,
};
use stseg::synth::Uncertainty;

#[derive(Parser)]
#[command(
    name = "stseg",
    about = "Image segmentation with spatially regularized Student-t mixtures",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: one per logical core).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    #[value(name = "student-t")]
    StudentT,
    Gaussian,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::StudentT => ModelKind::StudentT,
            ModelArg::Gaussian => ModelKind::Gaussian,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum UncertaintyArg {
    Low,
    High,
}

impl From<UncertaintyArg> for Uncertainty {
    fn from(u: UncertaintyArg) -> Self {
        match u {
            UncertaintyArg::Low => Uncertainty::Low,
            UncertaintyArg::High => Uncertainty::High,
        }
    }
}

/// Fit flags shared by `segment` and `sweep`.
#[derive(clap::Args)]
struct FitArgs {
    /// Spatial smoothing width of the mixing-field prior, in pixels.
    #[arg(long, default_value_t = 4.25)]
    sigma: f64,
    /// Component family.
    #[arg(long, value_enum, default_value = "student-t")]
    model: ModelArg,
    /// Drop the spatial prior: mixing weights become global (classical EM).
    #[arg(long)]
    no_spatial_prior: bool,
    /// Fraction of feature variance kept by PCA.
    #[arg(long, default_value_t = 0.999)]
    pca_var: f64,
    /// Iteration cap.
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Relative objective-change convergence threshold.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Random seed for initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Segment one image into k regions and write the artifacts.
    Segment {
        /// Input image (PPM or PNG).
        #[arg(long)]
        input: PathBuf,
        /// Directory for the output artifacts.
        #[arg(long)]
        output_dir: PathBuf,
        /// Number of segments.
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Generate a synthetic validation image with known ground truth.
    Synth {
        #[arg(long)]
        output_dir: PathBuf,
        /// Number of segments (at least 2).
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        /// Ground-truth field regime.
        #[arg(long, value_enum, default_value = "low")]
        uncertainty: UncertaintyArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score predicted label maps against reference segmentations.
    Eval {
        /// Predicted label map (16-bit PGM) or a directory of them.
        #[arg(long)]
        pred: PathBuf,
        /// Reference map (.seg or PGM) or a directory searched recursively.
        #[arg(long)]
        truth: PathBuf,
        /// Optional CSV report path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Segment-count statistics across subjects of each image.
    Stats {
        /// Directory of reference segmentations (several per image).
        #[arg(long)]
        truth: PathBuf,
        /// Optional CSV report path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Segment one image for every k in a range; write per-k artifacts and a CSV.
    Sweep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        k_min: usize,
        #[arg(long)]
        k_max: usize,
        #[command(flatten)]
        fit: FitArgs,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let threads = cli.threads;
    match cli.command {
        Command::Segment {
            input,
            output_dir,
            k,
            fit,
        } => {
            let opts = SegmentOpts {
                input,
                output_dir,
                k,
                sigma: fit.sigma,
                model_kind: fit.model.into(),
                with_spatial_prior: !fit.no_spatial_prior,
                pca_var: fit.pca_var,
                max_iters: fit.max_iters,
                rel_tol: fit.tol,
                seed: fit.seed,
            };
            let outcome = with_threads(threads, || run_segment(&opts))?;
            println!(
                "segmented {} into k={} regions: {} features, {} iterations ({}), mean entropy {:.4}",
                opts.input.display(),
                opts.k,
                outcome.feature_dim,
                outcome.result.trace.n_iters,
                if outcome.result.trace.converged {
                    "converged"
                } else {
                    "iteration cap"
                },
                outcome.mean_entropy,
            );
            println!("artifacts in {}", opts.output_dir.display());
        }
        Command::Synth {
            output_dir,
            k,
            height,
            width,
            uncertainty,
            seed,
        } => {
            let opts = SynthOpts {
                output_dir,
                height,
                width,
                k,
                uncertainty: uncertainty.into(),
                seed,
            };
            let artifacts = with_threads(threads, || run_synth(&opts))?;
            println!("wrote {}", artifacts.image.display());
            println!("wrote {}", artifacts.true_field.display());
            println!("wrote {}", artifacts.labels.display());
        }
        Command::Eval {
            pred,
            truth,
            output,
        } => {
            let opts = EvalOpts {
                pred,
                truth,
                output,
            };
            let records = with_threads(threads, || run_eval(&opts))?;
            if records.is_empty() {
                println!("no prediction/reference stems matched");
            }
            println!("image\tk\tn_refs\tri\tari\tf_b");
            for r in &records {
                println!(
                    "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                    r.image, r.k, r.n_refs, r.ri, r.ari, r.f_b
                );
            }
            if records.len() > 1 {
                let n = records.len() as f64;
                println!(
                    "mean\t\t\t{:.4}\t{:.4}\t{:.4}",
                    records.iter().map(|r| r.ri).sum::<f64>() / n,
                    records.iter().map(|r| r.ari).sum::<f64>() / n,
                    records.iter().map(|r| r.f_b).sum::<f64>() / n,
                );
            }
        }
        Command::Stats { truth, output } => {
            let opts = StatsOpts { truth, output };
            let summary = with_threads(threads, || run_stats(&opts))?;
            println!("image\tn_subjects\tmean_segments\tsd_segments");
            for r in &summary.records {
                println!(
                    "{}\t{}\t{:.3}\t{:.3}",
                    r.image, r.n_subjects, r.mean_segments, r.sd_segments
                );
            }
            match summary.mean_sd_correlation {
                Some(c) => println!("mean/sd Pearson correlation over images: {c:.4}"),
                None => println!("mean/sd correlation needs at least 3 images with 2+ subjects"),
            }
        }
        Command::Sweep {
            input,
            output_dir,
            k_min,
            k_max,
            fit,
        } => {
            let opts = SweepOpts {
                input,
                output_dir,
                k_min,
                k_max,
                sigma: fit.sigma,
                model_kind: fit.model.into(),
                with_spatial_prior: !fit.no_spatial_prior,
                pca_var: fit.pca_var,
                max_iters: fit.max_iters,
                rel_tol: fit.tol,
                seed: fit.seed,
            };
            let records = with_threads(threads, || run_sweep(&opts))?;
            println!("k\titers\tconverged\tobjective\tmean_entropy");
            for r in &records {
                println!(
                    "{}\t{}\t{}\t{:.6e}\t{:.4}",
                    r.k, r.iterations, r.converged, r.objective, r.mean_entropy
                );
            }
        }
    }
    Ok(())
}
