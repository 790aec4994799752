use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nnchip::config::{parse_encoding, parse_granularity, parse_scale, Overrides, RunConfig};
use nnchip::{commands, Error};
use nnchip_core::CodecKind;

/// Compile trained networks onto constrained neural-network chips.
#[derive(Parser)]
#[command(name = "nnchip", version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(flatten)]
    constraints: Constraints,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Constraints {
    #[arg(long, global = true)]
    io_bits: Option<u32>,
    #[arg(long, global = true)]
    weight_bits: Option<u32>,
    /// dynamic, fraction or sharing.
    #[arg(long, global = true, value_parser = parse_encoding)]
    encoding: Option<CodecKind>,
    /// Core-op scale as MxN (outputs x inputs).
    #[arg(long, global = true, value_parser = parse_scale)]
    scale: Option<(usize, usize)>,
    #[arg(long, global = true)]
    reencode_factor: Option<usize>,
    /// Parts tuned together, or "all".
    #[arg(long, global = true, value_parser = parse_granularity)]
    granularity: Option<usize>,
}

#[derive(Subcommand)]
enum Verb {
    /// Train the float baseline.
    Train {
        /// Architecture, e.g. mlp:784-100-10 or lenet-small.
        model: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Transform the baseline into a validated core-op graph.
    Compile {
        /// Hardware preset (tianji-ann, prime) or spec file.
        #[arg(long)]
        hardware: Option<String>,
        /// Tuning config file.
        #[arg(long)]
        tuning: Option<PathBuf>,
    },
    /// Simulate the compiled graph over the test set.
    Evaluate {
        /// Manifest stem to evaluate instead of the compiled graph.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Place the compiled core-ops on the chip mesh.
    Map,
    /// Compile and evaluate once per value of one axis.
    Sweep {
        /// io_bits, weight_bits, reencode_factor, encoding or granularity.
        axis: String,
        #[arg(required = true)]
        values: Vec<String>,
        #[arg(long)]
        hardware: Option<String>,
        #[arg(long)]
        tuning: Option<PathBuf>,
    },
    /// Summarize the reports in the output directory.
    Report,
}

fn run(cli: Cli) -> Result<String, Error> {
    let mut rc = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        rc.seed = s;
    }
    if let Some(o) = cli.out {
        rc.out = o;
    }
    let c = cli.constraints;
    let ov = Overrides {
        io_bits: c.io_bits,
        weight_bits: c.weight_bits,
        encoding: c.encoding,
        scale: c.scale,
        reencode_factor: c.reencode_factor,
        granularity: c.granularity,
    };
    let mut pick = |hardware: Option<String>, tuning: Option<PathBuf>| {
        if let Some(h) = hardware {
            rc.hardware = h;
        }
        if tuning.is_some() {
            rc.tuning = tuning;
        }
    };
    match cli.verb {
        Verb::Train { model, epochs } => {
            if let Some(m) = model {
                rc.model = m;
            }
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            commands::train(&rc)
        }
        Verb::Compile { hardware, tuning } => {
            pick(hardware, tuning);
            commands::compile(&rc, &ov)
        }
        Verb::Evaluate { graph } => commands::evaluate(&rc, &ov, graph.as_deref()),
        Verb::Map => commands::map(&rc, &ov),
        Verb::Sweep {
            axis,
            values,
            hardware,
            tuning,
        } => {
            pick(hardware, tuning);
            commands::sweep(&rc, &ov, &axis, &values)
        }
        Verb::Report => commands::report(&rc),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
