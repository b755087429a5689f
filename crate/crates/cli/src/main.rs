use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Parser, ValueEnum};

use scg_core::scenario::{load_scenario, preset, preset_names, Scenario};
use scg_core::sweep::{load_manifest, replay, run_sweep, SweepOptions};
use scg_core::topology::HnpFormula;

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum FormulaArg {
    ReceiverCentric,
    AsWritten,
}

impl From<FormulaArg> for HnpFormula {
    fn from(f: FormulaArg) -> Self {
        match f {
            FormulaArg::ReceiverCentric => HnpFormula::ReceiverCentric,
            FormulaArg::AsWritten => HnpFormula::AsWritten,
        }
    }
}

/// Run CSMA / TSCH / grouping simulation sweeps and write CSV results.
#[derive(Debug, Parser)]
#[command(name = "scgsim", version)]
#[command(group(ArgGroup::new("input").required(true).args(["scenario", "preset", "replay", "list_presets"])))]
struct Args {
    /// Scenario TOML file.
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,

    /// Built-in scenario, e.g. fig5_300node.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,

    /// Rerun a previous sweep from its manifest.json and check that every
    /// output is byte-identical.
    #[arg(long, value_name = "MANIFEST")]
    replay: Option<PathBuf>,

    /// Print the built-in preset names.
    #[arg(long)]
    list_presets: bool,

    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "scg-out")]
    out: PathBuf,

    /// Worker threads (default: all available processors).
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    parallel: Option<u16>,

    /// Also write every topology as JSON under <out>/topologies/.
    #[arg(long)]
    export_topology: bool,

    /// Hidden-node formula used when calibrating radii.
    #[arg(long, value_enum, value_name = "FORMULA")]
    hnp_formula: Option<FormulaArg>,

    /// Print the resolved scenario and exit without running.
    #[arg(long)]
    dry_run: bool,
}

fn resolve(args: &Args) -> Result<Scenario> {
    let mut scenario = match (&args.scenario, &args.preset) {
        (Some(path), None) => load_scenario(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(name)) => preset(name)?,
        _ => bail!("give exactly one of --scenario and --preset"),
    };
    if let Some(f) = args.hnp_formula {
        scenario.hnp_formula = f.into();
    }
    Ok(scenario)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match real_main(&args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main(args: &Args) -> Result<ExitCode> {
    let parallel = args.parallel.map(usize::from);
    if args.list_presets {
        for name in preset_names() {
            println!("{name}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    if let Some(path) = &args.replay {
        if args.hnp_formula.is_some() || args.export_topology {
            bail!("--replay takes its settings from the manifest");
        }
        let manifest = load_manifest(path)?;
        let mismatches = replay(&manifest, &args.out, parallel)?;
        if mismatches.is_empty() {
            println!("replay of {} into {}: identical", manifest.scenario_name, args.out.display());
            return Ok(ExitCode::SUCCESS);
        }
        for m in &mismatches {
            eprintln!("differs: {m}");
        }
        return Ok(ExitCode::FAILURE);
    }

    let scenario = resolve(args)?;
    if args.dry_run {
        print!("{}", scenario.to_toml());
        println!("# {} runs", scenario.run_count());
        return Ok(ExitCode::SUCCESS);
    }
    eprintln!("{}: {} runs -> {}", scenario.name, scenario.run_count(), args.out.display());
    let opts = SweepOptions { parallel, export_topology: args.export_topology };
    let manifest = run_sweep(&scenario, &args.out, opts)?;
    if manifest.failures > 0 {
        eprintln!(
            "{} of {} runs failed; see {}",
            manifest.failures,
            manifest.runs,
            args.out.join("errors.log").display()
        );
        return Ok(ExitCode::FAILURE);
    }
    println!("{} runs written to {}", manifest.runs, args.out.display());
    Ok(ExitCode::SUCCESS)
}
