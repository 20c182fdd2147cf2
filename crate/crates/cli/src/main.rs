//! `cfrag` command-line driver.
//!
//! Every pipeline subcommand takes the same configuration sources, applied
//! in order: built-in defaults, then `--config FILE`, then one flag per
//! config key (`--m 4`, `--out-dir runs/a`), then `--set key=value`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use cfrag::pipeline::{
    emit_report, generate_synthetic, load_report, run_eval, run_train, write_synthetic,
    PipelineConfig, SyntheticSpec, Workspace, REPORT_JSON,
};
use cfrag::Error;

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn set_arg() -> Arg {
    Arg::new("set")
        .long("set")
        .value_name("KEY=VALUE")
        .action(ArgAction::Append)
        .help("Override one key; applied after every other source")
}

fn key_args(keys: impl IntoIterator<Item = String>, heading: &'static str) -> Vec<Arg> {
    keys.into_iter()
        .map(|k| {
            Arg::new(k.clone())
                .long(flag_name(&k))
                .value_name("VALUE")
                .help_heading(heading)
                .hide_short_help(true)
        })
        .collect()
}

fn config_keys() -> Vec<String> {
    PipelineConfig::default().snapshot().into_keys().collect()
}

fn pipeline_command(name: &'static str, about: &'static str) -> Command {
    Command::new(name)
        .about(about)
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Flat key = value config file"),
        )
        .arg(set_arg())
        .args(key_args(config_keys(), "Config keys"))
}

fn cli() -> Command {
    Command::new("cfrag")
        .about("Collaborative-filtering-augmented retrieval pipeline")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("verbose")
                .long("verbose")
                .short('v')
                .action(ArgAction::Count)
                .global(true)
                .help("Log more (repeat for debug output)"),
        )
        .subcommand(
            Command::new("synth")
                .about("Write a synthetic clustered benchmark")
                .arg(
                    Arg::new("out")
                        .long("out")
                        .short('o')
                        .required(true)
                        .value_name("DIR")
                        .value_parser(clap::value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("spec")
                        .long("spec")
                        .value_name("FILE")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("Flat key = value synthetic spec"),
                )
                .arg(set_arg())
                .args(key_args(SyntheticSpec::KEYS.map(String::from), "Spec keys")),
        )
        .subcommand(pipeline_command(
            "train-user",
            "Stage 1: train the user encoder and build the user index",
        ))
        .subcommand(pipeline_command(
            "train-retriever",
            "Stage 2: distill feedback into the retriever",
        ))
        .subcommand(pipeline_command(
            "train-reranker",
            "Stage 3: distill feedback into the reranker",
        ))
        .subcommand(pipeline_command("train", "Run all three training stages"))
        .subcommand(pipeline_command(
            "eval",
            "Evaluate trained checkpoints and write the report",
        ))
        .subcommand(
            pipeline_command("report", "Print the summary of an existing report")
                .arg(
                    Arg::new("report")
                        .long("report")
                        .value_name("FILE")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("Report to read; defaults to report.json in out_dir"),
                )
                .arg(
                    Arg::new("csv")
                        .long("csv")
                        .value_name("DIR")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("Also write the JSON and CSV files into DIR"),
                ),
        )
}

/// Applies per-key flags and then `--set` overrides through `set`.
fn apply_overrides(
    m: &ArgMatches,
    keys: &[String],
    mut set: impl FnMut(&str, &str) -> cfrag::Result<()>,
) -> cfrag::Result<()> {
    for key in keys {
        if let Some(v) = m.get_one::<String>(key) {
            set(key, v)?;
        }
    }
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn load_config(m: &ArgMatches) -> cfrag::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    apply_overrides(m, &config_keys(), |k, v| cfg.set(k, v))?;
    cfg.validate()?;
    Ok(cfg)
}

fn points(cfg: &PipelineConfig) -> Vec<PipelineConfig> {
    if cfg.grid_search {
        cfg.grid_points()
    } else {
        vec![cfg.clone()]
    }
}

fn synth(m: &ArgMatches) -> cfrag::Result<()> {
    let mut spec = match m.get_one::<PathBuf>("spec") {
        Some(path) => SyntheticSpec::from_flat(&std::fs::read_to_string(path)?)?,
        None => SyntheticSpec::default(),
    };
    let keys: Vec<String> = SyntheticSpec::KEYS.map(String::from).to_vec();
    apply_overrides(m, &keys, |k, v| spec.set(k, v))?;
    let data = generate_synthetic(&spec)?;
    let out = m.get_one::<PathBuf>("out").expect("required");
    write_synthetic(&data, out)?;
    println!(
        "wrote {} users and {} samples to {}",
        data.dataset.users.len(),
        data.dataset.samples.len(),
        out.display()
    );
    Ok(())
}

fn print_trace(stage: &str, trace: &[f64]) {
    match (trace.first(), trace.last()) {
        (Some(a), Some(b)) => println!("{stage} loss {a:.4} -> {b:.4} over {} points", trace.len()),
        _ => println!("{stage}: no training steps"),
    }
}

fn report(m: &ArgMatches) -> cfrag::Result<()> {
    let path = match m.get_one::<PathBuf>("report") {
        Some(p) => p.clone(),
        None => load_config(m)?.out_dir.join(REPORT_JSON),
    };
    let report = load_report(&path)?;
    print!("{}", report.summary());
    if let Some(dir) = m.get_one::<PathBuf>("csv") {
        emit_report(&report, dir)?;
        println!("wrote report files to {}", dir.display());
    }
    Ok(())
}

fn run(matches: &ArgMatches) -> cfrag::Result<()> {
    let (name, m) = matches.subcommand().expect("subcommand required");
    match name {
        "synth" => synth(m),
        "report" => report(m),
        _ => {
            let cfg = load_config(m)?;
            for p in points(&cfg) {
                if cfg.grid_search {
                    println!("grid point {}", p.out_dir.display());
                }
                match name {
                    "train-user" => print_trace("user", &Workspace::open(&p)?.train_user()?),
                    "train-retriever" => {
                        print_trace("retriever", &Workspace::open(&p)?.train_retriever()?)
                    }
                    "train-reranker" => {
                        print_trace("reranker", &Workspace::open(&p)?.train_reranker()?)
                    }
                    "train" => {
                        let t = run_train(&p)?;
                        print_trace("user", &t.user);
                        print_trace("retriever", &t.retriever);
                        print_trace("reranker", &t.reranker);
                    }
                    "eval" => {
                        let r = run_eval(&p)?;
                        print!("{}", r.summary());
                        println!(
                            "report written to {}",
                            p.out_dir.join(REPORT_JSON).display()
                        );
                    }
                    _ => unreachable!("unknown subcommand {name}"),
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let level = match matches.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
