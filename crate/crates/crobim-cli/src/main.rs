//! Command-line front end: train, eval, predict, stats, verify.
//!
//! Exit codes: 0 success, 1 usage/config/data error, 2 numerical failure,
//! 3 verification failure.

use clap::{Parser, Subcommand};
use crobim::dataio::{self, vocab, Split};
use crobim::dump;
use crobim::error::CrobimError;
use crobim::metrics::binarize;
use crobim::train;
use crobim::RunConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "crobim",
    about = "Referring image segmentation with bidirectional cross-modal interaction",
    version
)]
struct Cli {
    /// Flat key-value config file (section.key = value). Defaults apply
    /// when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config entry, e.g. --set run.steps=100 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Disable context-aware prompt modulation (raw prompts).
    #[arg(long, global = true)]
    no_capm: bool,

    /// Disable attention-deficit compensation (K = 0).
    #[arg(long, global = true)]
    no_compensation: bool,

    /// Use a single-direction decoder (skip the language-side update).
    #[arg(long, global = true)]
    single_direction: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the combined objective; writes checkpoints, a loss log and
    /// final metric reports into the output directory.
    Train {
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split and write the metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "val")]
        split: String,
        /// Evaluate in N shards and merge (same result as one pass).
        #[arg(long, default_value_t = 1)]
        shards: usize,
    },
    /// Segment one image given a referring expression.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expression: String,
        /// Also write attention dumps and heat-map renderings.
        #[arg(long)]
        dump: bool,
    },
    /// Dataset statistics for a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the gradient-check and oracle-equivalence suite.
    Verify,
}

fn load_config(cli: &Cli) -> crobim::Result<RunConfig> {
    let mut run = match &cli.config {
        Some(path) => RunConfig::from_kv_file(path)?,
        None => RunConfig::desk(),
    };
    for kv in &cli.sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CrobimError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        run.set_override(key.trim(), value.trim())?;
    }
    if cli.no_capm {
        run.model.enable_capm = false;
    }
    if cli.no_compensation {
        run.model.enable_compensation = false;
    }
    if cli.single_direction {
        run.model.bidirectional_decoder = false;
    }
    if let Ok(dir) = std::env::var("CROBIM_OUT_DIR") {
        if !dir.is_empty() {
            run.out_dir = PathBuf::from(dir);
        }
    }
    run.validate()?;
    Ok(run)
}

fn cmd_train(run: &RunConfig, resume: Option<&Path>) -> crobim::Result<()> {
    let outcome = train::train(run, resume)?;
    println!(
        "trained {} steps, final loss {:.6}",
        outcome.steps_run, outcome.final_loss
    );
    println!("train split:\n{}", outcome.train_report.to_text());
    if let Some(val) = &outcome.val_report {
        println!("val split:\n{}", val.to_text());
    }
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(())
}

fn cmd_eval(run: &RunConfig, checkpoint: &Path, split: &str, shards: usize) -> crobim::Result<()> {
    let split = Split::parse(split)?;
    let model = train::load_model(run, checkpoint)?;
    let samples = if run.data == "synth" {
        let (train_data, val_data) = train::load_data(run)?;
        match split {
            Split::Train => train_data,
            _ => val_data,
        }
    } else {
        dataio::load_manifest(Path::new(&run.data), split, &run.model)?
    };
    if samples.is_empty() {
        return Err(CrobimError::InvalidArgument(format!(
            "split {split} is empty"
        )));
    }
    let report = if shards > 1 {
        train::evaluate_sharded(&model, &samples, shards)?
    } else {
        train::evaluate(&model, &samples)?
    };
    report.write(&run.out_dir, &format!("metrics_{split}"))?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_predict(
    run: &RunConfig,
    checkpoint: &Path,
    image_path: &Path,
    expression: &str,
    dump_attn: bool,
) -> crobim::Result<()> {
    let model = train::load_model(run, checkpoint)?;
    let image = dataio::manifest::load_image_rgb(image_path)?;
    let h = run.model.image_size;
    if image.shape() != [h, h, 3] {
        return Err(CrobimError::shape(
            "predict input image",
            format!("[{h}, {h}, 3]"),
            format!("{:?}", image.shape()),
        ));
    }
    let tokens = vocab::tokenize(expression);
    if tokens.is_empty() {
        return Err(CrobimError::InvalidArgument(
            "expression has no words".into(),
        ));
    }
    let (_, logits_up, trace, attn) = model.predict(&image, &tokens)?;
    let mask = binarize(&logits_up, 0.5);
    let out = &run.out_dir;
    std::fs::create_dir_all(out)?;
    dataio::manifest::save_mask(&out.join("mask.png"), &mask)?;
    // overlay: tint predicted pixels toward red
    let mut overlay = image.clone();
    for y in 0..h {
        for x in 0..h {
            if mask[[y, x]] != 0 {
                overlay[[y, x, 0]] = 0.5 * overlay[[y, x, 0]] + 0.5;
                overlay[[y, x, 1]] *= 0.5;
                overlay[[y, x, 2]] *= 0.5;
            }
        }
    }
    dataio::manifest::save_image_rgb(&out.join("overlay.png"), &overlay)?;
    println!(
        "mask: {} ({} foreground pixels)",
        out.join("mask.png").display(),
        mask.iter().filter(|&&v| v != 0).count()
    );
    if dump_attn {
        let dump_dir = out.join("attention");
        dump::dump_attention(&dump_dir, &trace, &attn)?;
        // heat maps: per-stage mean score maps, saliency, deficit
        for (i, scores) in trace.scores.scores.iter().enumerate() {
            let (sh, sw) = trace.scores.level_dims[i];
            let dl = scores.shape()[1];
            let mean = ndarray::Array2::from_shape_fn((sh, sw), |(r, c)| {
                (0..dl).map(|d| scores[[r * sw + c, d]]).sum::<f64>() / dl as f64
            });
            dump::render_heatmap(&mean, &dump_dir.join(format!("S_{}_mean.png", i + 1)), 8)?;
        }
        for (i, sal) in trace.saliency.iter().enumerate() {
            dump::render_heatmap(sal, &dump_dir.join(format!("saliency_{}.png", i + 1)), 16)?;
        }
        dump::render_heatmap(&trace.deficit, &dump_dir.join("deficit.png"), 16)?;
        println!("attention dumps: {}", dump_dir.display());
    }
    Ok(())
}

fn cmd_stats(run: &RunConfig, manifest_path: &Path) -> crobim::Result<()> {
    let manifest = dataio::Manifest::load(manifest_path)?;
    let stats = dataio::dataset_stats(&manifest)?;
    let out = &run.out_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("stats.txt"), stats.to_text())?;
    std::fs::write(out.join("stats.json"), stats.to_json())?;
    let wl: Vec<(String, u64)> = stats
        .word_length_hist
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    dataio::stats::render_histogram(&wl, 10, &out.join("hist_word_length.png"))?;
    let cats: Vec<(String, u64)> = stats
        .category_counts
        .iter()
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    dataio::stats::render_histogram(&cats, 10, &out.join("hist_categories.png"))?;
    let sizes: Vec<(String, u64)> = stats
        .object_size_hist
        .iter()
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    dataio::stats::render_histogram(&sizes, 10, &out.join("hist_object_size.png"))?;
    print!("{}", stats.to_text());
    Ok(())
}

fn cmd_verify(run: &RunConfig) -> crobim::Result<bool> {
    let report = crobim::verify::run_verification(&run.model)?;
    let table = report.render_table();
    print!("{table}");
    std::fs::create_dir_all(&run.out_dir)?;
    std::fs::write(run.out_dir.join("verify_report.txt"), &table)?;
    Ok(report.pass())
}

fn run(cli: Cli) -> crobim::Result<ExitCode> {
    let run_config = load_config(&cli)?;
    match &cli.command {
        Command::Train { resume } => {
            cmd_train(&run_config, resume.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            split,
            shards,
        } => {
            cmd_eval(&run_config, checkpoint, split, *shards)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict {
            checkpoint,
            image,
            expression,
            dump,
        } => {
            cmd_predict(&run_config, checkpoint, image, expression, *dump)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Stats { manifest } => {
            cmd_stats(&run_config, manifest)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            if cmd_verify(&run_config)? {
                println!("verification passed");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("verification FAILED");
                Ok(ExitCode::from(3))
            }
        }
    }
}

fn exit_code_for(err: &CrobimError) -> u8 {
    match err {
        CrobimError::Numerical { .. } => 2,
        CrobimError::Verification(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's default usage exit code is 2; the contract here is 1,
            // except --help/--version which stay successful
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
