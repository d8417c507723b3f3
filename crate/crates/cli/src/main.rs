//! `priorfuse` command-line tool.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad input, 3 bad state or configuration.

mod imageio;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use priorfuse::checkpoint::Checkpoint;
use priorfuse::data::synthetic_dataset;
use priorfuse::metrics::{self, GrayImage, MetricReport};
use priorfuse::network::Network;
use priorfuse::train::{smoothed_endpoints, train_toy};
use priorfuse::verify::{self, Check, Scope};
use priorfuse::{loss, Error, FusionConfig, Tensor};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "priorfuse", version, about = "Prior-guided infrared/visible image fusion")]
struct Cli {
    /// Configuration file of `key = value` lines (`#` starts a comment).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key; may be repeated and wins over --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Seed for everything random (defaults to `train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fuse an infrared/visible pair with a trained checkpoint.
    Fuse {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print EN, SF, AG and SD for each image as CSV.
    Metrics {
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Evaluate the training objective for a fused image against its sources.
    Loss {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value = "ops")]
        scope: String,
        /// Force the named check to fail (exercises failure reporting).
        #[arg(long, hide = true, value_name = "CHECK")]
        debug_corrupt: Option<String>,
    },
    /// Train the toy model on synthetic pairs and save a checkpoint.
    TrainToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        pairs: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
    /// Oracle equivalence, degeneracy, routing and operator gradient checks.
    Selftest {
        #[arg(long, hide = true, value_name = "CHECK")]
        debug_corrupt: Option<String>,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Input(_) | Error::Dimension { .. } | Error::Io(_) => 2,
            Error::Config(_) | Error::Integrity { .. } | Error::Parameter(_) => 3,
            Error::Oracle(_) => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn state_error(message: String) -> Failure {
    Failure { code: 3, message }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Config file first, then `--set` overrides, then `--seed`.
fn load_config(cli: &Cli) -> Result<FusionConfig, Failure> {
    let mut cfg = FusionConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| state_error(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| state_error(format!("{}: {e}", path.display())))?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| state_error(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn customized(cli: &Cli) -> bool {
    cli.config.is_some() || !cli.overrides.is_empty()
}

fn run(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Fuse { ir, vis, checkpoint, out } => fuse(cli, &cfg, ir, vis, checkpoint, out),
        Command::Metrics { images } => {
            let mut out = String::from(MetricReport::CSV_HEADER);
            for path in images {
                let report = metrics::evaluate(&imageio::read(path)?)?;
                out.push('\n');
                out.push_str(&report.csv_row());
            }
            println!("{out}");
            Ok(())
        }
        Command::Loss { fused, ir, vis } => {
            let [f, i, v] = [fused, ir, vis].map(|p| imageio::read(p));
            let (f, i, v) = (f?, i?, v?);
            same_size(&[("fused", &f), ("infrared", &i), ("visible", &v)])?;
            let report = loss::evaluate(&f.to_unit_tensor(), &i.to_unit_tensor(), &v.to_unit_tensor(), &cfg.loss)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Command::Gradcheck { scope, debug_corrupt } => {
            let scope: Scope = scope.parse()?;
            let checks = verify::gradient_suite(scope, cfg.train.seed)?;
            report_checks(checks, debug_corrupt.as_deref())
        }
        Command::Selftest { debug_corrupt } => {
            let checks = verify::selftest(cfg.train.seed)?;
            report_checks(checks, debug_corrupt.as_deref())
        }
        Command::TrainToy { out, pairs, side } => {
            let data: Vec<_> = synthetic_dataset(*pairs, *side, cfg.train.seed)?
                .into_iter()
                .map(|p| (p.ir, p.vis))
                .collect();
            let outcome = train_toy(&data, &cfg)?;
            outcome
                .checkpoint
                .save(out)
                .map_err(|e| Failure { code: 2, message: format!("cannot write {}: {e}", out.display()) })?;
            let window = 5.min(outcome.losses.len());
            let (first, last) = smoothed_endpoints(&outcome.losses, window).unwrap_or((f64::NAN, f64::NAN));
            let summary = json!({
                "steps": outcome.losses.len(),
                "first_loss": first,
                "last_loss": last,
                "ratio": last / first,
                "checkpoint": out.display().to_string(),
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            Ok(())
        }
    }
}

fn same_size(images: &[(&str, &GrayImage)]) -> Outcome {
    let (name0, first) = images[0];
    for &(name, img) in &images[1..] {
        if (img.height, img.width) != (first.height, first.width) {
            return Err(Failure {
                code: 2,
                message: format!(
                    "size mismatch: {name0} is {}x{}, {name} is {}x{}",
                    first.height, first.width, img.height, img.width
                ),
            });
        }
    }
    Ok(())
}

fn fuse(cli: &Cli, cfg: &FusionConfig, ir: &Path, vis: &Path, ckpt_path: &Path, out: &Path) -> Outcome {
    let ir_img = imageio::read(ir)?;
    let vis_img = imageio::read(vis)?;
    same_size(&[("infrared", &ir_img), ("visible", &vis_img)])?;

    let ckpt = Checkpoint::load(ckpt_path)
        .map_err(|e| state_error(format!("checkpoint {}: {e}", ckpt_path.display())))?;
    // an explicit configuration must describe the stored network; otherwise the stored one is used
    let net_cfg = if customized(cli) { cfg.clone() } else { ckpt.config.clone() };
    ckpt.validate_against(&net_cfg)
        .map_err(|e| state_error(format!("checkpoint {}: {e}", ckpt_path.display())))?;
    let net = Network::new(net_cfg)?;

    let factor = 1 << (net.cfg.scales() - 1);
    let (h, w) = (ir_img.height, ir_img.width);
    let pad = |img: &GrayImage| pad_replicate(&img.to_unit_tensor(), padded_side(h, factor), padded_side(w, factor));
    let fused = net.infer(&ckpt.params, &pad(&ir_img), &pad(&vis_img))?;
    let fused = GrayImage::from_unit_tensor(&crop(&fused, h, w))?;

    imageio::write(out, &fused)?;
    let report = metrics::evaluate(&fused)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

/// Smallest multiple of `factor` that is at least `n` and `3 * factor`.
fn padded_side(n: usize, factor: usize) -> usize {
    n.div_ceil(factor).max(3) * factor
}

/// Extends a `[1, 1, h, w]` plane to `[1, 1, ph, pw]` by repeating its last row and column.
fn pad_replicate(t: &Tensor, ph: usize, pw: usize) -> Tensor {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    Tensor::from_fn(&[1, 1, ph, pw], |k| {
        let (r, c) = ((k / pw).min(h - 1), (k % pw).min(w - 1));
        t.data()[r * w + c]
    })
}

fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let pw = t.shape()[3];
    Tensor::from_fn(&[1, 1, h, w], |k| t.data()[(k / w) * pw + k % w])
}

fn report_checks(mut checks: Vec<Check>, corrupt: Option<&str>) -> Outcome {
    if let Some(name) = corrupt {
        if !verify::corrupt_tolerance(&mut checks, name) {
            return Err(state_error(format!("no check named `{name}`")));
        }
    }
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<&Check> = checks.iter().filter(|c| !c.passed()).collect();
    if failed.is_empty() {
        println!("{} checks passed", checks.len());
        return Ok(());
    }
    let list = failed
        .iter()
        .map(|c| format!("{} (error {:.3e}, tolerance {:.0e})", c.name, c.error, c.tolerance))
        .collect::<Vec<_>>()
        .join(", ");
    Err(Failure {
        code: 1,
        message: format!("{} of {} checks failed: {list}", failed.len(), checks.len()),
    })
}
