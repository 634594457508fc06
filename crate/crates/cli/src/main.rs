mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "rftrace", version, about = "Receptive-field traced inference tools")]
struct Cli {
    /// Worker threads for verify and eval.
    #[arg(long, global = true, env = "RF_TRACE_JOBS")]
    jobs: Option<usize>,

    /// Print per-phase wall time to stderr.
    #[arg(long, global = true)]
    timing: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a fixture graph and seeded random weights.
    Gen {
        /// toy-r18-fpn, r50-fpn-approx, chain-N, diamond or segnet.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Input shape as C,H,W (model default otherwise).
        #[arg(long)]
        input: Option<String>,
        /// Skip the weights.
        #[arg(long)]
        graph_only: bool,
    },
    /// Back-trace a click or rect and report regions and crop plans.
    Trace {
        #[arg(long)]
        graph: PathBuf,
        /// Pixel X,Y in the input frame.
        #[arg(long, conflicts_with = "rect")]
        click: Option<String>,
        /// Output rect T,L,B,R (inclusive).
        #[arg(long)]
        rect: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random traced-vs-full equivalence trials.
    Verify {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Static FLOPs, full or for a trace.
    Flops {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, conflicts_with = "rect")]
        click: Option<String>,
        #[arg(long)]
        rect: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate 25 banded clicks per instance mask.
    Clicks {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// mIoU-T and mTA of predicted masks.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        clicks: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        beta: f64,
        /// auto, exhaustive or sampled.
        #[arg(long, default_value = "auto")]
        protocol: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment the instance under a click.
    Segment {
        /// Model bundle directory written by `gen --model segnet`.
        #[arg(long)]
        model: PathBuf,
        /// 8-bit PPM (or PGM) image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        click: String,
        /// Output mask PGM.
        #[arg(long)]
        out: PathBuf,
        /// Force a pyramid level, e.g. P4.
        #[arg(long)]
        level: Option<String>,
        /// Diagnostics JSON path (defaults to the mask path with .json).
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        // A second initialization can only fail if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global();
    }
    let ctx = report::Context::new(cli.timing);
    let result = match cli.command {
        Command::Gen {
            model,
            seed,
            out,
            input,
            graph_only,
        } => commands::gen(&ctx, &model, seed, &out, input.as_deref(), graph_only),
        Command::Trace {
            graph,
            click,
            rect,
            out,
        } => commands::trace(&ctx, &graph, click.as_deref(), rect.as_deref(), out.as_deref()),
        Command::Verify {
            graph,
            weights,
            trials,
            tol,
            seed,
            out,
        } => commands::verify(&ctx, &graph, &weights, trials, tol, seed, cli.jobs, out.as_deref()),
        Command::Flops {
            graph,
            click,
            rect,
            out,
        } => commands::flops(&ctx, &graph, click.as_deref(), rect.as_deref(), out.as_deref()),
        Command::Clicks { masks, seed, out } => commands::clicks(&ctx, &masks, seed, &out),
        Command::Eval {
            preds,
            gts,
            clicks,
            beta,
            protocol,
            out,
        } => commands::eval(&ctx, &preds, &gts, &clicks, beta, &protocol, cli.jobs, out.as_deref()),
        Command::Segment {
            model,
            image,
            click,
            out,
            level,
            diagnostics,
        } => commands::segment(
            &ctx,
            &model,
            &image,
            &click,
            &out,
            level.as_deref(),
            diagnostics.as_deref(),
        ),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            report::emit_error(&e);
            ExitCode::from(2)
        }
    }
}
