use std::path::PathBuf;
use std::process::ExitCode;

use cacp_core::dataset::Task;
use cacp_core::pipeline::{run_augment, run_build_gallery, run_evaluate, run_preview, RunConfig};
use cacp_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Context-aware copy-paste augmentation.
#[derive(Parser)]
#[command(name = "cacp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a folder-per-category gallery and build its area-ratio table.
    BuildGallery(RunArgs),
    /// Write an augmented copy of a dataset.
    Augment(RunArgs),
    /// Score predictions against ground truth and print a TSV report.
    Evaluate(EvalArgs),
    /// Dry run on one base image: caption, ranking, prompt overlay and composite.
    Preview {
        #[command(flatten)]
        run: RunArgs,
        /// Base image to preview.
        #[arg(long)]
        image: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// classification, detection or segmentation.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    source_dir: Option<String>,
    #[arg(long)]
    gallery_dir: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Share of images to augment, as 1/N.
    #[arg(long)]
    fraction: Option<String>,
    /// Augmented variants per selected image.
    #[arg(long)]
    variants: Option<String>,
    /// box, box+rand or box+cam.
    #[arg(long)]
    prompt_mode: Option<String>,
    /// Extra prompt points.
    #[arg(long)]
    points: Option<String>,
    /// fake or real, for every backend role.
    #[arg(long)]
    backends: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Continue an interrupted augment run in the same output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    task: String,
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    truth_dir: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let overrides = [
            ("task", self.task),
            ("source_dir", self.source_dir),
            ("gallery_dir", self.gallery_dir),
            ("output_dir", self.out_dir),
            ("fraction", self.fraction),
            ("variants_per_image", self.variants),
            ("prompt.mode", self.prompt_mode),
            ("prompt.n_points", self.points),
            ("backends", self.backends),
            ("seed", self.seed),
        ];
        for (key, value) in overrides {
            if let Some(value) = value {
                config.set(key, &value)?;
            }
        }
        if self.resume {
            config.resume = true;
        }
        config.validate()?;
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildGallery(args) => {
            let (index, ratios) = run_build_gallery(&args.into_config()?)?;
            println!("index\t{}", index.display());
            println!("ratio_table\t{}", ratios.display());
        }
        Command::Augment(args) => {
            let report = run_augment(&args.into_config()?)?;
            print!("{}", report.to_text());
        }
        Command::Evaluate(args) => {
            let task: Task = args.task.parse()?;
            let tsv = run_evaluate(&args.pred_dir, &args.truth_dir, task)?.to_tsv();
            if let Some(path) = &args.out {
                std::fs::write(path, &tsv).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
            }
            print!("{tsv}");
        }
        Command::Preview { run, image } => {
            let out = run_preview(&run.into_config()?, &image)?;
            println!("caption\t{}", out.caption_path.display());
            println!("ranking\t{}", out.ranking_path.display());
            match (&out.overlay_path, &out.composite_path) {
                (Some(overlay), Some(composite)) => {
                    println!("prompt_overlay\t{}", overlay.display());
                    println!("composite\t{}", composite.display());
                }
                _ => println!("composite\tnone (no donor object found)"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
