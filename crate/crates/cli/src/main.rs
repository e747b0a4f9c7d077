use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use panelkit::synth::DgpConfig;
use panelkit_cli::commands::{self, Dgp, Format, Workspace};
use panelkit_cli::config::{RunSpec, Subset, PRESETS};
use panelkit_cli::{io, report, CliError, Result};

#[derive(Parser)]
#[command(name = "panelkit", version, about = "County panel econometrics pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate input CSVs and write a workspace directory.
    Ingest {
        /// `fips,year,<vars>` panel.
        #[arg(long)]
        panel: PathBuf,
        /// `fips_a,fips_b` adjacency list.
        #[arg(long)]
        adjacency: Option<PathBuf>,
        /// County typology indicators.
        #[arg(long)]
        features: Option<PathBuf>,
        /// `from,to` FIPS consolidation map.
        #[arg(long)]
        fips_remap: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit the models of a run spec.
    Estimate {
        #[arg(long, short)]
        workspace: PathBuf,
        /// TOML run spec.
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        /// Bundled spec (see `presets`).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_enum)]
        subset: Option<Subset>,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulation draws for spatial impact standard errors.
        #[arg(long)]
        sims: Option<usize>,
        /// Negate estimates in the coefficient-plot table.
        #[arg(long)]
        flip_sign: bool,
        /// Typology labels for grouped-slope models.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Cross-sectional dependence tests on saved fits or panel variables.
    Diagnose {
        #[arg(long, short)]
        workspace: PathBuf,
        /// Saved model names.
        #[arg(long = "fit")]
        fits: Vec<String>,
        /// Panel variables to test.
        #[arg(long = "variable")]
        variables: Vec<String>,
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_enum)]
        subset: Option<Subset>,
        /// Add the permutation CD test with this many draws.
        #[arg(long)]
        permutations: Option<usize>,
        #[arg(long, default_value_t = 20220101)]
        seed: u64,
        /// Exit with code 4 when any |CD| exceeds this value.
        #[arg(long)]
        max_abs_cd: Option<f64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Ward clustering of the county features with k selection.
    Cluster {
        #[arg(long, short)]
        workspace: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        subset: Subset,
        #[arg(long, default_value = "active_mines")]
        coal_variable: String,
        /// First and last year of the coal rule.
        #[arg(long, num_args = 2, value_names = ["FIRST", "LAST"])]
        years: Option<Vec<i32>>,
        #[arg(long, default_value_t = 8)]
        k_max: usize,
        /// Gap-statistic reference sets.
        #[arg(long, default_value_t = 100)]
        refs: usize,
        #[arg(long, default_value_t = 20220101)]
        seed: u64,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write a synthetic panel (and torus adjacency for the spatial DGP).
    Synth {
        #[arg(long, value_enum, default_value = "twfe")]
        dgp: Dgp,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        t: usize,
        /// Comma-separated coefficients.
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        beta: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        factors: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        rows: usize,
        #[arg(long, default_value_t = 10)]
        cols: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// List the bundled run specs, or print one.
    Presets { name: Option<String> },
}

fn load_spec(spec: Option<PathBuf>, preset: Option<String>) -> Result<Option<RunSpec>> {
    match (spec, preset) {
        (Some(p), _) => RunSpec::parse(&io::read_text(&p)?).map(Some),
        (None, Some(name)) => RunSpec::preset(&name).map(Some),
        (None, None) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { panel, adjacency, features, fips_remap, out } => {
            let r = commands::ingest(&commands::IngestArgs { panel, adjacency, features, remap: fips_remap, out: out.clone() })?;
            println!("{}", r.panel);
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!("workspace written to {}", out.display());
        }
        Command::Estimate { workspace, spec, preset, subset, seed, sims, flip_sign, groups, format, out } => {
            let spec = load_spec(spec, preset)?.ok_or_else(|| CliError::Spec("pass --spec or --preset".into()))?;
            let r = commands::estimate(&commands::EstimateArgs {
                workspace: Workspace::new(workspace),
                spec,
                subset,
                seed,
                sims,
                flip_sign,
                format,
                groups,
                out,
            })?;
            print!("{}", report::regression_table(&r.reports, r.manifest.short_hash()));
            let imp = report::impacts_table(&r.reports, r.manifest.short_hash());
            if !imp.is_empty() {
                print!("\n{imp}");
            }
            for rep in &r.reports {
                for w in &rep.warnings {
                    eprintln!("warning ({}): {w}", rep.model);
                }
            }
        }
        Command::Diagnose {
            workspace,
            fits,
            variables,
            spec,
            preset,
            subset,
            permutations,
            seed,
            max_abs_cd,
            format,
            out,
        } => {
            let args = commands::DiagnoseArgs {
                workspace: Workspace::new(workspace),
                fits,
                variables,
                spec: load_spec(spec, preset)?,
                subset,
                permutations,
                seed,
                max_abs_cd,
                format,
                out,
            };
            let r = commands::diagnose(&args);
            if let Ok(r) = &r {
                print!("{}", report::csd_table(&r.tests, r.manifest.short_hash()));
                for (rank, s) in &r.comparison {
                    println!("{rank}. {} AIC {:.2} BIC {:.2}", s.name, s.aic, s.bic);
                }
                for w in &r.warnings {
                    eprintln!("warning: {w}");
                }
            }
            r?;
        }
        Command::Cluster { workspace, subset, coal_variable, years, k_max, refs, seed, k, format, out } => {
            let years = years.map(|y| [y[0], y[1]]);
            let r = commands::cluster(&commands::ClusterArgs {
                workspace: Workspace::new(workspace),
                subset,
                coal_variable,
                years,
                k_max,
                reference_sets: refs,
                seed,
                k,
                format,
                out: out.clone(),
            })?;
            println!("{}", r.selection.note());
            println!("k = {} ({}), sizes {:?}", r.k, r.rule, r.typology.sizes());
            println!("labels written to {}", out.join("labels.csv").display());
        }
        Command::Synth { dgp, n, t, beta, rho, delta, factors, sigma, seed, rows, cols, out } => {
            let config = DgpConfig { n, t, beta, rho, delta, n_factors: factors, sigma, seed, ..DgpConfig::default() };
            let (panel, _) = commands::synth(&commands::SynthArgs { dgp, config, rows, cols, out: out.clone() })?;
            println!("{panel}");
            println!("written to {}", out.display());
        }
        Command::Presets { name } => match name {
            Some(n) => print!("{}", RunSpec::preset(&n)?.to_toml()),
            None => {
                for (n, d, _) in PRESETS {
                    println!("{n:10} {d}");
                }
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
