use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use prism_cf::runner::{self, ExperimentConfig, Settings, TheoryArgs, KEYS};
use prism_cf::theory;
use prism_cf::{Error, Result};

fn flag_name(key: &str) -> &'static str {
    Box::leak(key.replace('_', "-").into_boxed_str())
}

fn experiment_command(name: &'static str, about: &'static str) -> Command {
    let mut cmd = Command::new(name)
        .about(about)
        .allow_negative_numbers(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("config file"),
        );
    for (key, default, help) in KEYS {
        let help = if default.is_empty() {
            help.to_string()
        } else {
            format!("{help} [default: {default}]")
        };
        cmd = cmd.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .value_name("VALUE")
                .help(help),
        );
    }
    cmd
}

fn model_arg() -> Arg {
    Arg::new("model")
        .long("model")
        .value_name("FILE")
        .required(true)
        .help("model file written by train")
}

fn theory_command(name: &'static str, about: &'static str, lambda: &'static str) -> Command {
    let arg = |id: &'static str, flag: &'static str, help: &'static str| {
        Arg::new(id).long(flag).value_name("VALUE").help(help)
    };
    Command::new(name)
        .about(about)
        .allow_negative_numbers(true)
        .arg(arg("eta", "eta", "learning rate").default_value("0.01"))
        .arg(arg("lambda", "lambda", "weight decay").default_value(lambda))
        .arg(arg("cos_sq", "cos-sq", "squared user-item cosine").default_value("0.81"))
        .arg(arg("exp_sq_mag", "exp-sq-mag", "squared item magnitude").default_value("1"))
        .arg(arg("degrees", "degrees", "comma-separated item degrees"))
        .arg(arg(
            "fractions",
            "fractions",
            "comma-separated batch fractions |B|/|E|",
        ))
        .arg(
            Arg::new("out")
                .long("out")
                .required(true)
                .value_name("FILE")
                .help("output CSV"),
        )
}

fn cli() -> Command {
    Command::new("prism")
        .about("Train and analyze collaborative-filtering embeddings")
        .subcommand_required(true)
        .subcommand(experiment_command(
            "train",
            "train one model and write model, epoch log and metrics",
        ))
        .subcommand(experiment_command(
            "sweep",
            "train over a lambda or alpha grid and seeds",
        ))
        .subcommand(
            experiment_command("evaluate", "evaluate a saved model on the test split")
                .arg(model_arg()),
        )
        .subcommand(
            experiment_command(
                "correlate",
                "magnitude-degree correlations of a saved model",
            )
            .arg(model_arg()),
        )
        .subcommand(
            Command::new("theory")
                .about("closed-form magnitude dynamics")
                .subcommand_required(true)
                .subcommand(theory_command(
                    "heatmap",
                    "expected magnitude change over degree x batch fraction",
                    "1e-4",
                ))
                .subcommand(
                    theory_command(
                        "oracle",
                        "closed form against Monte-Carlo simulation",
                        "1e-6",
                    )
                    .arg(
                        Arg::new("trials")
                            .long("trials")
                            .default_value("100000")
                            .help("simulated steps per grid cell"),
                    )
                    .arg(
                        Arg::new("dim")
                            .long("dim")
                            .default_value("16")
                            .help("embedding dimension"),
                    )
                    .arg(
                        Arg::new("seed")
                            .long("seed")
                            .default_value("0")
                            .help("seed of cell 0; cell k uses seed + k"),
                    ),
                ),
        )
        .subcommand(
            Command::new("synth")
                .about("write a synthetic power-law interaction file")
                .allow_negative_numbers(true)
                .allow_negative_numbers(true)
                .arg(
                    Arg::new("users")
                        .long("users")
                        .default_value("1000")
                        .help("number of users"),
                )
                .arg(
                    Arg::new("items")
                        .long("items")
                        .default_value("1500")
                        .help("number of items"),
                )
                .arg(
                    Arg::new("edges")
                        .long("edges")
                        .default_value("30000")
                        .help("distinct interactions"),
                )
                .arg(
                    Arg::new("exponent")
                        .long("exponent")
                        .default_value("1.0")
                        .help("power-law exponent of item popularity"),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .default_value("0")
                        .help("generator seed"),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .required(true)
                        .value_name("FILE")
                        .help("output interaction file"),
                ),
        )
}

fn value<T: std::str::FromStr>(m: &ArgMatches, id: &str) -> Result<T> {
    let raw = m.get_one::<String>(id).map(String::as_str).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::config(id, format!("cannot parse {raw:?}")))
}

fn list(m: &ArgMatches, id: &str) -> Result<Option<Vec<f64>>> {
    m.get_one::<String>(id)
        .map(|raw| {
            raw.split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::config(id, format!("cannot parse {s:?}")))
                })
                .collect()
        })
        .transpose()
}

fn experiment(m: &ArgMatches) -> Result<ExperimentConfig> {
    let mut settings = match m.get_one::<String>("config") {
        Some(p) => Settings::load(&PathBuf::from(p))?,
        None => Settings::defaults(),
    };
    for (key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            settings.set(key, v)?;
        }
    }
    ExperimentConfig::from_settings(&settings)
}

fn theory_args(m: &ArgMatches) -> Result<TheoryArgs> {
    Ok(TheoryArgs {
        eta: value(m, "eta")?,
        lambda: value(m, "lambda")?,
        cos_sq: value(m, "cos_sq")?,
        exp_sq_mag: value(m, "exp_sq_mag")?,
        degrees: list(m, "degrees")?.unwrap_or_default(),
        fractions: list(m, "fractions")?.unwrap_or_default(),
    })
}

/// Bad theory or generator parameters come straight from flags, so they
/// exit like any other configuration error.
fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(reason) | Error::Infeasible(reason) => {
            Error::config("arguments", reason)
        }
        other => other,
    }
}

fn run(matches: ArgMatches) -> Result<()> {
    match matches.subcommand() {
        Some(("train", m)) => {
            let paths = runner::cmd_train(&experiment(m)?)?;
            println!("{}", paths.model.display());
            println!("{}", paths.epoch_log.display());
            println!("{}", paths.metrics.display());
        }
        Some(("sweep", m)) => println!("{}", runner::cmd_sweep(&experiment(m)?)?.display()),
        Some(("evaluate", m)) => {
            let model = PathBuf::from(m.get_one::<String>("model").expect("required"));
            println!(
                "{}",
                runner::cmd_evaluate(&experiment(m)?, &model)?.display()
            );
        }
        Some(("correlate", m)) => {
            let model = PathBuf::from(m.get_one::<String>("model").expect("required"));
            println!(
                "{}",
                runner::cmd_correlate(&experiment(m)?, &model)?.display()
            );
        }
        Some(("theory", t)) => match t.subcommand() {
            Some(("heatmap", m)) => {
                let mut args = theory_args(m)?;
                if args.degrees.is_empty() {
                    args.degrees = theory::default_heatmap_degrees();
                }
                if args.fractions.is_empty() {
                    args.fractions = theory::default_heatmap_fractions();
                }
                let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
                runner::cmd_heatmap(&args, &out).map_err(as_config)?;
                println!("{}", out.display());
            }
            Some(("oracle", m)) => {
                let mut args = theory_args(m)?;
                if args.degrees.is_empty() {
                    args.degrees = theory::default_oracle_degrees();
                }
                if args.fractions.is_empty() {
                    args.fractions = theory::default_oracle_fractions();
                }
                let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
                let rows = runner::cmd_oracle(
                    &args,
                    value(m, "dim")?,
                    value(m, "trials")?,
                    value(m, "seed")?,
                    &out,
                )
                .map_err(as_config)?;
                let worst = rows.iter().map(|r| r.z_score.abs()).fold(0.0, f64::max);
                log::info!("max |z| = {worst:.3}");
                println!("{}", out.display());
            }
            _ => unreachable!("subcommand required"),
        },
        Some(("synth", m)) => {
            let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
            runner::cmd_synth(
                value(m, "users")?,
                value(m, "items")?,
                value(m, "edges")?,
                value(m, "exponent")?,
                value(m, "seed")?,
                &out,
            )
            .map_err(as_config)?;
            println!("{}", out.display());
        }
        _ => unreachable!("subcommand required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
