use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use fedsparse::dataset::{load_split, save_split, Dataset};
use fedsparse::experiment::{
    compare, model_from_tensors, read_checkpoint, run_experiment, write_comparison, ExperimentConfig, OUT_ROOT_ENV,
};
use fedsparse::training::{evaluate, EvalSettings};
use fedsparse::{Error, LossConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn config(e: Error) -> Self {
        Failure::Config(e.to_string())
    }

    fn runtime(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::InvalidArgument(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn cli() -> Command {
    let mut run = Command::new("run")
        .about("Run a federated experiment and write its metrics")
        .arg(Arg::new("config").long("config").value_name("PATH").value_parser(value_parser!(PathBuf)));
    for &key in ExperimentConfig::KEYS {
        let mut arg = Arg::new(key).long(key).value_name("VALUE").help_heading("Config overrides");
        if key.contains('_') {
            let alias: &'static str = Box::leak(key.replace('_', "-").into_boxed_str());
            arg = arg.visible_alias(alias);
        }
        run = run.arg(arg);
    }
    Command::new("fedsparse")
        .about("Sparse federated training of a grid object detector")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(format!(
            "Exit codes: 0 success, {EXIT_CONFIG} configuration error, {EXIT_RUNTIME} runtime failure.\n\
             ${OUT_ROOT_ENV} sets the root for run and comparison outputs."
        ))
        .subcommand(run)
        .subcommand(
            Command::new("compare")
                .about("Compare per-round mAP and bytes saved across runs")
                .arg(
                    Arg::new("dirs")
                        .value_name("DIR")
                        .num_args(2..)
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(Arg::new("out").long("out").value_name("DIR").value_parser(value_parser!(PathBuf))),
        )
        .subcommand(
            Command::new("gen-data")
                .about("Generate the synthetic train/test splits described by a spec file")
                .arg(Arg::new("spec").long("spec").value_name("PATH").value_parser(value_parser!(PathBuf)))
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                ),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a saved model on a dataset directory")
                .arg(
                    Arg::new("model")
                        .long("model")
                        .value_name("PATH")
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("data")
                        .long("data")
                        .value_name("DIR")
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(Arg::new("split").long("split").default_value("test"))
                .arg(
                    Arg::new("boxes_per_cell")
                        .long("boxes-per-cell")
                        .default_value("2")
                        .value_parser(value_parser!(usize)),
                )
                .arg(Arg::new("json").long("json").action(ArgAction::SetTrue).help("Print the full result as JSON")),
        )
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(Failure::config),
        None => Ok(ExperimentConfig::default()),
    }
}

fn cmd_run(m: &ArgMatches) -> Result<(), Failure> {
    let mut cfg = load_config(m.get_one("config"))?;
    let overrides: Vec<(&str, &str)> = ExperimentConfig::KEYS
        .iter()
        .filter_map(|&k| m.get_one::<String>(k).map(|v| (k, v.as_str())))
        .collect();
    cfg.apply_overrides(overrides).map_err(Failure::config)?;
    let summary = run_experiment(&cfg).map_err(Failure::runtime)?;
    println!(
        "{}: {} rounds, final mAP@0.5 {:.2}, bytes saved {}, output {}",
        summary.method,
        summary.rounds.len(),
        summary.final_map50,
        summary.bytes_saved_total,
        summary.out_dir.display()
    );
    Ok(())
}

fn cmd_compare(m: &ArgMatches) -> Result<(), Failure> {
    let dirs: Vec<PathBuf> = m.get_many::<PathBuf>("dirs").expect("required").cloned().collect();
    let out = m.get_one::<PathBuf>("out").cloned().unwrap_or_else(|| {
        std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join("compare")
    });
    let cmp = compare(&dirs).map_err(Failure::runtime)?;
    write_comparison(&cmp, &out).map_err(Failure::runtime)?;
    let (header, rows) = cmp.map_table();
    println!("{}", header.join("\t"));
    for row in rows {
        println!("{}", row.join("\t"));
    }
    println!("wrote comparison files to {}", out.display());
    Ok(())
}

fn cmd_gen_data(m: &ArgMatches) -> Result<(), Failure> {
    let cfg = load_config(m.get_one("spec"))?;
    let out: &PathBuf = m.get_one("out").expect("required");
    let (train, test) = fedsparse::experiment::generate_splits(&cfg).map_err(Failure::runtime)?;
    save_split(out, "train", &train).map_err(Failure::runtime)?;
    save_split(out, "test", &test).map_err(Failure::runtime)?;
    println!("wrote {} train and {} test images to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<(), Failure> {
    let model_path: &PathBuf = m.get_one("model").expect("required");
    let data_dir: &PathBuf = m.get_one("data").expect("required");
    let split: &String = m.get_one("split").expect("defaulted");
    let boxes: usize = *m.get_one("boxes_per_cell").expect("defaulted");
    let samples = load_split(data_dir, split).map_err(Failure::runtime)?;
    let shape = samples.first().map(|s| s.image.shape().to_vec()).unwrap_or_default();
    if shape.len() != 3 {
        return Err(Failure::Runtime(format!("{}: no images in split `{split}`", data_dir.display())));
    }
    let tensors = read_checkpoint(model_path).map_err(Failure::runtime)?;
    let model = model_from_tensors(tensors, boxes, (shape[1], shape[2])).map_err(Failure::runtime)?;
    let cfg = model.config().clone();
    let data = Dataset::new(samples, cfg.grid_size, cfg.num_classes).map_err(Failure::runtime)?;
    let result =
        evaluate(&model, &data, &LossConfig::default(), &EvalSettings::default()).map_err(Failure::runtime)?;
    if m.get_flag("json") {
        println!("{}", serde_json::to_string_pretty(&result).expect("serializable"));
    } else {
        println!("images {}  loss {:.4}  mAP@0.5 {:.2}", data.len(), result.loss, result.metrics.map);
        for c in &result.metrics.per_class {
            println!("  class {}: AP {:.2} ({} objects)", c.class, c.ap, c.num_ground_truth);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = cli().get_matches();
    let outcome = match matches.subcommand() {
        Some(("run", m)) => cmd_run(m),
        Some(("compare", m)) => cmd_compare(m),
        Some(("gen-data", m)) => cmd_gen_data(m),
        Some(("eval", m)) => cmd_eval(m),
        _ => unreachable!("subcommand required"),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
