//! Command-line interface: `gen`, `train`, `eval`, `map`, `check-grad`.
//!
//! Flags mirror the config keys as `--kebab-case`; `--config <path>` loads a
//! `key = value` file first and explicit flags override it. Exit codes:
//! 0 success, 1 usage error, 2 runtime failure.

use std::path::PathBuf;

use crate::data::{generate_scene, load_cube, save_cube, SceneSpec};
use crate::error::Error;
use crate::harness::{
    check_gradients, evaluate, render_map, run_training_with_artifacts, MapSource, RunConfig,
    PALETTE,
};
use crate::model::ModelState;

const GENERAL_USAGE: &str = "usage: hsiden <command> [flags]

commands:
  gen         generate a synthetic scene cube (.hsic)
  train       train a model on a cube, writing log/splits/checkpoint/map
  eval        evaluate a checkpoint on the held-out test pixels
  map         render a classification map (.ppm)
  check-grad  run the finite-difference gradient suites

run 'hsiden <command> --help' for the command's flags";

const GEN_USAGE: &str = "usage: hsiden gen --out <cube.hsic> [flags]

flags:
  --out <path>                output cube path (required)
  --seed <u64>                PRNG seed (default 1)
  --classes <n>               number of classes (default 4)
  --bands <n>                 spectral bands (default 32)
  --rows <n> --cols <n>       spatial extents (default 64 x 64)
  --region-size <n>           class block side (default 8)
  --true-bases <n>            generator base noises (default 8)
  --noise-amplitude <x>       base-noise weight scale (default 0.9)
  --white-noise-sigma <x>     white sensor noise std (default 0.02)
  --signature-mix <x>         blend of class-difference directions into the
                              base noises, in [0,1] (default 0)";

const TRAIN_USAGE: &str = "usage: hsiden train --cube <cube.hsic> --out-dir <dir> [flags]

writes log.csv, splits.csv, model.hdnm, map.ppm into --out-dir.

flags (also valid as 'key = value' lines in --config <file>):
  --cube <path>         input cube (required)
  --out-dir <dir>       output directory (required)
  --config <path>       config file; explicit flags override it
  --k <n>               base noises (default 64)
  --d <n>               feature dimension (default 64)
  --neighbor <n>        odd patch size (default 5)
  --lr <x>              learning rate (default 1e-4)
  --batch <n>           batch size (default 4)
  --alpha <x>           diversity tradeoff (default 1)
  --beta <x>            noise-space decay rate in [0,1] (default 0.9)
  --lambda-c <x>        center-loss weight (default 0.01)
  --gamma <x>           center update rate in [0,1] (default 0.5)
  --epochs <n>          training epochs (default 30)
  --per-class <n>       training pixels per class (default 200)
  --seed <u64>          PRNG seed (default 1)
  --update-sign <s>     'descent' or 'as-written' (default descent)
  --baseline            disable the noise module (ablation)";

const EVAL_USAGE: &str = "usage: hsiden eval --cube <cube.hsic> --checkpoint <model.hdnm> [flags]

re-derives the train/test split from --seed/--per-class and scores the
checkpoint on the test pixels.

flags:
  --cube <path>         input cube (required)
  --checkpoint <path>   model checkpoint (required)
  --per-class <n>       training pixels per class used for the split (default 200)
  --seed <u64>          split seed (default 1)
  --baseline            evaluate with the noise module disabled";

const MAP_USAGE: &str = "usage: hsiden map --cube <cube.hsic> --out <map.ppm> [flags]

renders ground truth, or predictions when --checkpoint is given.

flags:
  --cube <path>         input cube (required)
  --out <path>          output PPM path (required)
  --checkpoint <path>   model checkpoint (predictions instead of truth)
  --baseline            predict with the noise module disabled";

const CHECK_GRAD_USAGE: &str = "usage: hsiden check-grad

runs the finite-difference suites (tensor primitives, noise-space update
gradient, end-to-end model) and prints one line per suite";

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        CliError::Runtime(e)
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Entry point; returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let outcome = dispatch(&args);
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("{msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(args: &[String]) -> CliResult {
    let Some(command) = args.first() else {
        return Err(usage(GENERAL_USAGE));
    };
    let rest = &args[1..];
    match command.as_str() {
        "gen" => cmd_gen(rest),
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "map" => cmd_map(rest),
        "check-grad" => cmd_check_grad(rest),
        "--help" | "-h" | "help" => {
            println!("{GENERAL_USAGE}");
            Ok(())
        }
        other => Err(usage(format!(
            "unknown command '{other}'\n\n{GENERAL_USAGE}"
        ))),
    }
}

/// Split raw args into (flag, value) pairs. Boolean flags take no value.
fn parse_flags<'a>(
    args: &'a [String],
    boolean: &[&str],
    usage_text: &str,
) -> Result<Vec<(&'a str, Option<&'a str>)>, CliError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if arg == "--help" || arg == "-h" {
            out.push(("--help", None));
            i += 1;
            continue;
        }
        let Some(name) = arg.strip_prefix("--") else {
            return Err(usage(format!(
                "unexpected token '{arg}'\n\n{usage_text}"
            )));
        };
        if boolean.contains(&name) {
            out.push((name, None));
            i += 1;
        } else {
            let Some(value) = args.get(i + 1) else {
                return Err(usage(format!(
                    "flag '--{name}' needs a value\n\n{usage_text}"
                )));
            };
            out.push((name, Some(value.as_str())));
            i += 2;
        }
    }
    Ok(out)
}

fn wants_help(flags: &[(&str, Option<&str>)]) -> bool {
    flags.iter().any(|(n, _)| *n == "--help")
}

fn parse_num<T: std::str::FromStr>(name: &str, value: &str, usage_text: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| usage(format!("invalid value '{value}' for --{name}\n\n{usage_text}")))
}

fn cmd_gen(args: &[String]) -> CliResult {
    let flags = parse_flags(args, &[], GEN_USAGE)?;
    if wants_help(&flags) {
        println!("{GEN_USAGE}");
        return Ok(());
    }
    let mut out: Option<PathBuf> = None;
    let (mut classes, mut bands, mut rows, mut cols) = (4usize, 32usize, 64usize, 64usize);
    let mut region = 8usize;
    let mut true_bases = 8usize;
    let mut amplitude = 0.9f64;
    let mut sigma = 0.02f64;
    let mut mix = 0.0f64;
    let mut seed = 1u64;
    for (name, value) in flags {
        let value = value.unwrap_or_default();
        match name {
            "out" => out = Some(PathBuf::from(value)),
            "classes" => classes = parse_num(name, value, GEN_USAGE)?,
            "bands" => bands = parse_num(name, value, GEN_USAGE)?,
            "rows" => rows = parse_num(name, value, GEN_USAGE)?,
            "cols" => cols = parse_num(name, value, GEN_USAGE)?,
            "region-size" => region = parse_num(name, value, GEN_USAGE)?,
            "true-bases" => true_bases = parse_num(name, value, GEN_USAGE)?,
            "noise-amplitude" => amplitude = parse_num(name, value, GEN_USAGE)?,
            "white-noise-sigma" => sigma = parse_num(name, value, GEN_USAGE)?,
            "signature-mix" => mix = parse_num(name, value, GEN_USAGE)?,
            "seed" => seed = parse_num(name, value, GEN_USAGE)?,
            other => return Err(usage(format!("unknown flag '--{other}'\n\n{GEN_USAGE}"))),
        }
    }
    let out = out.ok_or_else(|| usage(format!("--out is required\n\n{GEN_USAGE}")))?;
    if !(0.0..=1.0).contains(&mix) {
        return Err(usage(format!(
            "--signature-mix must be in [0,1]\n\n{GEN_USAGE}"
        )));
    }
    let spec = SceneSpec::confusable(
        classes, bands, rows, cols, true_bases, amplitude, sigma, region, mix, seed,
    );
    let cube = generate_scene(&spec)?;
    save_cube(&cube, &out)?;
    println!(
        "wrote {}: {} classes, {} bands, {}x{} pixels",
        out.display(),
        classes,
        bands,
        rows,
        cols
    );
    Ok(())
}

/// Apply config-file + flag pairs onto a RunConfig (flags win).
fn build_config(
    args: &[String],
    boolean: &[&str],
    usage_text: &str,
) -> Result<RunConfig, CliError> {
    let flags = parse_flags(args, boolean, usage_text)?;
    if wants_help(&flags) {
        println!("{usage_text}");
        // signal "done" through a sentinel: caller checks for --help first
    }
    let mut cfg = RunConfig::default();
    if let Some((_, Some(path))) = flags.iter().find(|(n, _)| *n == "config") {
        cfg.merge_file(std::path::Path::new(path))
            .map_err(|e| match e {
                Error::Io(io) => CliError::Runtime(Error::Io(io)),
                other => usage(format!("{other}\n\n{usage_text}")),
            })?;
    }
    for (name, value) in &flags {
        match *name {
            "config" | "--help" => {}
            "baseline" => cfg
                .set("baseline", "true")
                .map_err(|e| usage(format!("{e}\n\n{usage_text}")))?,
            _ => {
                let value = value.ok_or_else(|| {
                    usage(format!("flag '--{name}' needs a value\n\n{usage_text}"))
                })?;
                cfg.set(name, value)
                    .map_err(|e| usage(format!("{e}\n\n{usage_text}")))?;
            }
        }
    }
    cfg.validate()
        .map_err(|e| usage(format!("{e}\n\n{usage_text}")))?;
    Ok(cfg)
}

fn cmd_train(args: &[String]) -> CliResult {
    if parse_flags(args, &["baseline"], TRAIN_USAGE)?
        .iter()
        .any(|(n, _)| *n == "--help")
    {
        println!("{TRAIN_USAGE}");
        return Ok(());
    }
    let cfg = build_config(args, &["baseline"], TRAIN_USAGE)?;
    let cube_path = cfg
        .cube
        .clone()
        .ok_or_else(|| usage(format!("--cube is required\n\n{TRAIN_USAGE}")))?;
    if cfg.out_dir.is_none() {
        return Err(usage(format!("--out-dir is required\n\n{TRAIN_USAGE}")));
    }
    let cube = load_cube(&cube_path)?;
    let outcome = run_training_with_artifacts(&cfg, &cube)?;
    for record in &outcome.records {
        println!(
            "epoch {:>3}: held-out OA {:.4}",
            record.epoch, record.overall_accuracy
        );
    }
    let report = &outcome.final_eval;
    println!(
        "final test: OA {:.4}  AA {:.4}  Kappa {:.4}  ({} pixels)",
        report.overall_accuracy, report.average_accuracy, report.kappa, report.total
    );
    Ok(())
}

fn cmd_eval(args: &[String]) -> CliResult {
    if parse_flags(args, &["baseline"], EVAL_USAGE)?
        .iter()
        .any(|(n, _)| *n == "--help")
    {
        println!("{EVAL_USAGE}");
        return Ok(());
    }
    let cfg = build_config(args, &["baseline"], EVAL_USAGE)?;
    let cube_path = cfg
        .cube
        .clone()
        .ok_or_else(|| usage(format!("--cube is required\n\n{EVAL_USAGE}")))?;
    let ckpt_path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| usage(format!("--checkpoint is required\n\n{EVAL_USAGE}")))?;
    let cube = load_cube(&cube_path)?;
    let state = ModelState::load(&ckpt_path)?;
    let (_, test) = crate::data::split_train_test(&cube, cfg.per_class, cfg.seed)?;
    let report = evaluate(&state, &cube, &test, state.neighbor, cfg.baseline)?;
    println!(
        "OA {:.4}  AA {:.4}  Kappa {:.4}  ({} pixels)",
        report.overall_accuracy, report.average_accuracy, report.kappa, report.total
    );
    for (i, acc) in report.per_class.iter().enumerate() {
        match acc {
            Some(a) => println!("class {:>2}: {:.4}", i + 1, a),
            None => println!("class {:>2}: (absent)", i + 1),
        }
    }
    Ok(())
}

fn cmd_map(args: &[String]) -> CliResult {
    let flags = parse_flags(args, &["baseline"], MAP_USAGE)?;
    if wants_help(&flags) {
        println!("{MAP_USAGE}");
        return Ok(());
    }
    let mut cube_path: Option<PathBuf> = None;
    let mut out: Option<PathBuf> = None;
    let mut checkpoint: Option<PathBuf> = None;
    let mut baseline = false;
    for (name, value) in flags {
        match name {
            "cube" => cube_path = value.map(PathBuf::from),
            "out" => out = value.map(PathBuf::from),
            "checkpoint" => checkpoint = value.map(PathBuf::from),
            "baseline" => baseline = true,
            other => return Err(usage(format!("unknown flag '--{other}'\n\n{MAP_USAGE}"))),
        }
    }
    let cube_path = cube_path.ok_or_else(|| usage(format!("--cube is required\n\n{MAP_USAGE}")))?;
    let out = out.ok_or_else(|| usage(format!("--out is required\n\n{MAP_USAGE}")))?;
    let cube = load_cube(&cube_path)?;
    match checkpoint {
        Some(ckpt) => {
            let state = ModelState::load(&ckpt)?;
            render_map(
                &cube,
                &MapSource::Predictions {
                    state: &state,
                    baseline,
                },
                &PALETTE,
                &out,
            )?;
        }
        None => render_map(&cube, &MapSource::GroundTruth, &PALETTE, &out)?,
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_check_grad(args: &[String]) -> CliResult {
    let flags = parse_flags(args, &[], CHECK_GRAD_USAGE)?;
    if wants_help(&flags) {
        println!("{CHECK_GRAD_USAGE}");
        return Ok(());
    }
    if let Some((name, _)) = flags.first() {
        return Err(usage(format!(
            "unknown flag '--{name}'\n\n{CHECK_GRAD_USAGE}"
        )));
    }
    let report = check_gradients()?;
    for suite in &report.suites {
        println!("{}", suite.line());
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Runtime(Error::invalid(
            "gradient check failed".to_string(),
        )))
    }
}
