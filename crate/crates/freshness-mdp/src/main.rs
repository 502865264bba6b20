use std::path::PathBuf;
use std::process::ExitCode;

use freshness_mdp::cli::{load_spec, run_experiment, Family, Overrides};

const USAGE: &str = "\
usage: freshness-mdp <family> [--config <path>] [--bmax L[,L...]] [--seed N] [--out <path.csv>]
                     [--epsV x] [--epsLambda x] [--gamma x] [--T n] [--runs n]

families:
  aoii-sweep-alpha      average AoII vs. rate budget, token policies vs. the constrained optimum
  aoii-sweep-pr         average AoII vs. source stay probability
  aoi2-sweep-q          average AoI vs. request probability, with uniform/random baselines
  aoi2-sweep-alphamax   average AoI vs. the requested-slot rate cap
  aoi2-gap-bmax         token-vs-optimum gap as the bucket capacity grows
  solve                 solve one instance and dump its policy table as CSV
  simulate              replay a policy or baseline and report Monte Carlo estimates

config files are line-oriented `key = value` with `#` comments; flags override file values.";

fn parse_args() -> Result<(Family, Option<PathBuf>, Overrides), String> {
    let mut args = std::env::args().skip(1);
    let family_arg = args.next().ok_or_else(|| "missing <family>".to_string())?;
    if family_arg == "--help" || family_arg == "-h" || family_arg == "help" {
        return Err(String::new());
    }
    let family = Family::parse(&family_arg)
        .ok_or_else(|| format!("unknown family `{family_arg}`"))?;

    let mut config = None;
    let mut overrides = Overrides::default();
    while let Some(flag) = args.next() {
        let mut value_for = |flag: &str| {
            args.next().ok_or_else(|| format!("flag {flag} expects a value"))
        };
        match flag.as_str() {
            "--config" => config = Some(PathBuf::from(value_for("--config")?)),
            "--bmax" => {
                let raw = value_for("--bmax")?;
                let list: Result<Vec<u32>, _> =
                    raw.split(',').map(|s| s.trim().parse::<u32>()).collect();
                overrides.b_max_list =
                    Some(list.map_err(|_| format!("cannot parse `{raw}` for --bmax"))?);
            }
            "--seed" => {
                overrides.master_seed = Some(
                    value_for("--seed")?
                        .parse()
                        .map_err(|_| "cannot parse --seed".to_string())?,
                )
            }
            "--out" => overrides.out_path = Some(PathBuf::from(value_for("--out")?)),
            "--epsV" => {
                overrides.epsilon_v = Some(
                    value_for("--epsV")?
                        .parse()
                        .map_err(|_| "cannot parse --epsV".to_string())?,
                )
            }
            "--epsLambda" => {
                overrides.epsilon_lambda = Some(
                    value_for("--epsLambda")?
                        .parse()
                        .map_err(|_| "cannot parse --epsLambda".to_string())?,
                )
            }
            "--gamma" => {
                overrides.gamma = Some(
                    value_for("--gamma")?
                        .parse()
                        .map_err(|_| "cannot parse --gamma".to_string())?,
                )
            }
            "--T" => {
                overrides.horizon = Some(
                    value_for("--T")?.parse().map_err(|_| "cannot parse --T".to_string())?,
                )
            }
            "--runs" => {
                overrides.n_runs = Some(
                    value_for("--runs")?
                        .parse()
                        .map_err(|_| "cannot parse --runs".to_string())?,
                )
            }
            other => return Err(format!("unknown flag `{other}`")),
        }
    }
    Ok((family, config, overrides))
}

fn main() -> ExitCode {
    let (family, config, overrides) = match parse_args() {
        Ok(parsed) => parsed,
        Err(message) => {
            if !message.is_empty() {
                eprintln!("error: {message}\n");
            }
            eprintln!("{USAGE}");
            return ExitCode::from(2);
        }
    };

    let spec = match load_spec(family, config.as_deref(), &overrides) {
        Ok(spec) => spec,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(err.exit_code() as u8);
        }
    };

    match run_experiment(&spec) {
        Ok(summary) => {
            for note in &summary.notes {
                println!("{note}");
            }
            println!(
                "wrote {} rows to {}",
                summary.rows_written,
                summary.out_path.display()
            );
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
