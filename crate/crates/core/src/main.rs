use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cascade_flow::checkpoint;
use cascade_flow::config::{model_keys, RunConfig, KEYS};
use cascade_flow::data_io::{
    dataset_sample, flow_to_color, read_flo, read_kitti_png, read_rgb_png, sequence, write_flo, write_rgb_png, FlowSample,
};
use cascade_flow::eval::{evaluate, metrics_table};
use cascade_flow::pipeline::FlowModel;
use cascade_flow::selftest;
use cascade_flow::train::{metric_lines, train};
use cascade_tensor::Real;
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

fn flag(key: &str) -> &'static str {
    // clap keeps borrowed names; the set of keys is fixed and small
    Box::leak(key.replace('_', "-").into_boxed_str())
}

fn with_config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("key = value configuration file; flags override it"),
    );
    KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(Arg::new(*key).long(flag(key)).value_name("VALUE").help_heading("Configuration"))
    })
}

/// Desk defaults, then the config file, then flags. The flag reports whether
/// any architecture key was given explicitly.
fn config_from(m: &ArgMatches) -> Result<(RunConfig, bool), String> {
    let mut cfg = RunConfig::desk();
    let mut explicit_model = false;
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.apply_text(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        explicit_model |= text
            .lines()
            .filter_map(|l| l.split_once('='))
            .any(|(k, _)| model_keys().contains(&k.trim()));
    }
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v).map_err(|e| e.to_string())?;
            explicit_model |= model_keys().contains(key);
        }
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok((cfg, explicit_model))
}

fn cli() -> Command {
    let path_arg = |name: &'static str, help: &'static str| {
        Arg::new(name).long(name).value_name("PATH").value_parser(value_parser!(PathBuf)).required(true).help(help)
    };
    Command::new("cascade-flow")
        .about("Coarse-to-fine recurrent optical flow: training, evaluation and inference")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            with_config_args(Command::new("train").about("Train on generated synthetic pairs"))
                .arg(path_arg("out", "directory for the manifest, checkpoints and metric log"))
                .arg(Arg::new("quiet").long("quiet").action(ArgAction::SetTrue).help("do not print per-step metrics")),
        )
        .subcommand(
            with_config_args(Command::new("eval").about("Report EPE and Fl of a checkpoint on synthetic pairs"))
                .arg(path_arg("checkpoint", "trained parameters"))
                .arg(
                    Arg::new("sequence")
                        .long("sequence")
                        .value_name("FRAMES")
                        .value_parser(value_parser!(usize))
                        .help("evaluate one ordered sequence, warm-starting each pair from the previous one"),
                ),
        )
        .subcommand(
            with_config_args(Command::new("infer").about("Estimate the flow between two images"))
                .arg(path_arg("checkpoint", "trained parameters"))
                .arg(path_arg("image1", "first frame (png)"))
                .arg(path_arg("image2", "second frame (png)"))
                .arg(path_arg("out-flo", "output .flo file"))
                .arg(path_arg("out-png", "output color visualization")),
        )
        .subcommand(
            Command::new("viz")
                .about("Render a .flo or KITTI flow png with the standard color wheel")
                .arg(path_arg("flow", "input flow"))
                .arg(path_arg("out", "output png"))
                .arg(Arg::new("max-flow").long("max-flow").value_parser(value_parser!(f32)).help("saturation radius in pixels")),
        )
        .subcommand(
            Command::new("selftest")
                .about("Run the oracle, invariant and gradient checks")
                .arg(Arg::new("seed").long("seed").value_parser(value_parser!(u64)).default_value("17")),
        )
}

fn cmd_train<T: Real>(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<(), String> {
    let outcome = train::<T>(cfg, Some(out), |s| {
        if !quiet {
            print!("{}", metric_lines(s));
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(m) = outcome.manifest {
        eprintln!("run {} finished: {} steps, checkpoint {}", m.run_id, cfg.train.steps, m.checkpoint.display());
    }
    Ok(())
}

fn load_model(cfg: &mut RunConfig, explicit_model: bool, path: &Path) -> Result<(FlowModel, cascade_flow::nn::ParamStore<f64>), String> {
    let expected = explicit_model.then(|| cfg.model.clone());
    let (model_cfg, store) = checkpoint::load::<f64>(path, expected.as_ref()).map_err(|e| e.to_string())?;
    cfg.model = model_cfg;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok((FlowModel::new(&cfg.model), store))
}

fn cmd_eval(m: &ArgMatches) -> Result<(), String> {
    let (mut cfg, explicit) = config_from(m)?;
    let (model, store) = load_model(&mut cfg, explicit, m.get_one::<PathBuf>("checkpoint").unwrap())?;
    let iters = cfg.schedule.eval_iters.clone();
    let (samples, chain): (Vec<FlowSample>, bool) = match m.get_one::<usize>("sequence") {
        Some(&frames) => (sequence(&cfg.data, 0, frames)?, true),
        None => ((0..cfg.data.samples.max(1)).map(|i| dataset_sample(&cfg.data, i)).collect::<Result<_, _>>()?, false),
    };
    let (metrics, _) = evaluate(&model, &store, &samples, &iters, chain).map_err(|e| e.to_string())?;
    print!("{}", metrics_table(&metrics, &iters));
    Ok(())
}

fn cmd_infer(m: &ArgMatches) -> Result<(), String> {
    let (mut cfg, explicit) = config_from(m)?;
    let path = |k: &str| m.get_one::<PathBuf>(k).unwrap();
    let (model, store) = load_model(&mut cfg, explicit, path("checkpoint"))?;
    let a = read_rgb_png(path("image1")).map_err(|e| e.to_string())?;
    let b = read_rgb_png(path("image2")).map_err(|e| e.to_string())?;
    if (a.height, a.width) != (b.height, b.width) {
        return Err(format!("image sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height));
    }
    let trace = model.estimate(&store, &a, &b, &cfg.schedule.eval_iters, None).map_err(|e| e.to_string())?;
    write_flo(path("out-flo"), &trace.final_flow).map_err(|e| e.to_string())?;
    write_rgb_png(path("out-png"), &flow_to_color(&trace.final_flow, None)).map_err(|e| e.to_string())?;
    let mean: f64 = trace.final_flow.u().iter().zip(trace.final_flow.v()).map(|(u, v)| (u * u + v * v).sqrt() as f64).sum::<f64>()
        / (a.height * a.width) as f64;
    println!("mean_magnitude\t{mean:.6}");
    println!("max_magnitude\t{:.6}", trace.final_flow.max_magnitude());
    Ok(())
}

fn cmd_viz(m: &ArgMatches) -> Result<(), String> {
    let input = m.get_one::<PathBuf>("flow").unwrap();
    let flow = if input.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        read_kitti_png(input).map_err(|e| e.to_string())?.0
    } else {
        read_flo(input).map_err(|e| e.to_string())?
    };
    let image = flow_to_color(&flow, m.get_one::<f32>("max-flow").copied());
    write_rgb_png(m.get_one::<PathBuf>("out").unwrap(), &image).map_err(|e| e.to_string())
}

fn cmd_selftest(m: &ArgMatches) -> Result<(), String> {
    let opts = selftest::Options { seed: *m.get_one::<u64>("seed").unwrap(), ..Default::default() };
    let checks = selftest::run(&opts);
    print!("{}", selftest::report(&checks));
    match checks.iter().find(|c| !c.passed) {
        Some(c) => Err(format!("self-test failed at {}: {}", c.name, c.detail)),
        None => Ok(()),
    }
}

fn run() -> Result<(), String> {
    let matches = cli().get_matches();
    match matches.subcommand() {
        Some(("train", m)) => {
            let (cfg, _) = config_from(m)?;
            let out = m.get_one::<PathBuf>("out").unwrap();
            let quiet = m.get_flag("quiet");
            if cfg.train.double_precision {
                cmd_train::<f64>(&cfg, out, quiet)
            } else {
                cmd_train::<f32>(&cfg, out, quiet)
            }
        }
        Some(("eval", m)) => cmd_eval(m),
        Some(("infer", m)) => cmd_infer(m),
        Some(("viz", m)) => cmd_viz(m),
        Some(("selftest", m)) => cmd_selftest(m),
        _ => unreachable!("a subcommand is required"),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
