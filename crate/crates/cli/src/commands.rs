use std::fs;
use std::path::{Path, PathBuf};

use trnet::arch::ArchSpec;
use trnet::cost::arch_cost;
use trnet::io::{load_trt, save_trt, Checkpoint};
use trnet::planner::{plan_report, verify_bounds_for_dims};
use trnet::ring::{decompose as fit_ring, AlsOptions};
use trnet::train::{train_with, TrainConfig};
use trnet::verify::{run_suite, Suite};

use crate::Failure;

type CmdResult = Result<(), Failure>;

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, contents: &[u8]) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::failed(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::failed(e.to_string()))
}

pub fn analyze(
    path: &Path,
    rank: Option<usize>,
    batch: Option<usize>,
    symbolic: bool,
    csv: bool,
    json: bool,
) -> CmdResult {
    let arch = ArchSpec::from_json(&read_input(path)?)?;
    let rank = rank.unwrap_or(arch.defaults.rank);
    let batch = batch.unwrap_or(arch.defaults.batch);
    if rank == 0 || batch == 0 {
        return Err(Failure::usage("--rank and --batch must be >= 1"));
    }
    let cost = arch_cost(&arch, rank, batch)?;
    if json {
        println!("{}", to_json(&cost)?);
    } else if csv {
        print!("{}", cost.to_csv());
    } else {
        print!("{}", cost.to_text(symbolic));
    }
    Ok(())
}

pub fn plan(dims: &[usize], rank: usize, all: bool, check: bool) -> CmdResult {
    if rank == 0 || dims.is_empty() || dims.contains(&0) {
        return Err(Failure::usage("--dims needs positive sizes and --rank must be >= 1"));
    }
    if (all || check) && !(2..=trnet::planner::MAX_EXHAUSTIVE).contains(&dims.len()) {
        return Err(Failure::usage(format!(
            "exhaustive mode supports 2..={} cores, got {}",
            trnet::planner::MAX_EXHAUSTIVE,
            dims.len()
        )));
    }
    let report = plan_report(dims, rank, all || check)?;
    println!("{}", to_json(&report)?);
    if check {
        let pass = if dims.iter().all(|&d| d == dims[0]) {
            let bounds = verify_bounds_for_dims(dims, rank)?;
            eprintln!(
                "bounds: {} plans checked, flops_2x in [{}, {}] within [{}, {}], peak memory in [{}, {}] within [{}, {}]",
                bounds.plans_checked,
                bounds.min_flops,
                bounds.max_flops,
                bounds.flops_lower,
                bounds.flops_upper,
                bounds.min_memory,
                bounds.max_memory,
                bounds.memory_lower,
                bounds.memory_upper
            );
            bounds.pass && report.theorem1.pass
        } else {
            report.theorem1.pass
        };
        if !pass {
            return Err(Failure::failed("merge-cost bound violated"));
        }
        eprintln!("pass: {} plans inside bounds", report.theorem1.plans_checked);
    }
    Ok(())
}

pub struct DecomposeArgs {
    pub input: PathBuf,
    pub rank: usize,
    pub modes: Option<Vec<usize>>,
    pub sweeps: usize,
    pub tol: f64,
    pub restarts: usize,
    pub target_fit: f64,
    pub max_fit: Option<f64>,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

pub fn decompose(args: DecomposeArgs) -> CmdResult {
    if args.rank == 0 {
        return Err(Failure::usage("--rank must be >= 1"));
    }
    let mut x = load_trt(&args.input).map_err(|e| Failure::usage(format!("{}: {e}", args.input.display())))?;
    if let Some(modes) = &args.modes {
        x = x
            .into_shape(modes)
            .map_err(|e| Failure::usage(format!("--modes: {e}")))?;
    }
    let opts = AlsOptions {
        max_sweeps: args.sweeps,
        tol: args.tol,
        seed: args.seed,
        restarts: args.restarts,
        target_fit: args.target_fit,
        ..Default::default()
    };
    let dec = fit_ring(&x, args.rank, &opts)?;
    if let Some(out) = &args.out {
        let mut ck = Checkpoint::default();
        for (i, core) in dec.ring.core_tensors().enumerate() {
            ck.push(format!("core{i}"), core.clone());
        }
        ck.save(out)?;
    }
    let report = serde_json::json!({
        "shape": x.shape(),
        "rank": args.rank,
        "params": dec.ring.param_count(),
        "fit_error": dec.fit_error,
        "sweeps": dec.history.len() - 1,
        "history": dec.history,
        "ridge_retries": dec.ridge_retries,
    });
    println!("{}", to_json(&report)?);
    match args.max_fit {
        Some(limit) if dec.fit_error.is_nan() || dec.fit_error > limit => Err(Failure::failed(format!(
            "fit error {:e} above {limit:e}",
            dec.fit_error
        ))),
        _ => Ok(()),
    }
}

pub fn verify(suite: &str, witness_dir: &Path, json: bool, seed: u64) -> CmdResult {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse().map_err(|e: trnet::Error| Failure::usage(e.to_string()))?]
    };
    let mut failed = 0;
    let mut reports = Vec::new();
    for s in suites {
        let report = run_suite(s, seed)?;
        for (i, check) in report.checks.iter().enumerate() {
            if !json {
                println!("[{s}] {check}");
            }
            if let Some(w) = &check.witness {
                fs::create_dir_all(witness_dir).map_err(|e| Failure::failed(e.to_string()))?;
                let path = witness_dir.join(format!("witness-{s}-{i}.trt"));
                save_trt(&path, w)?;
                eprintln!("[{s}] witness written to {}", path.display());
            }
            failed += usize::from(!check.passed);
        }
        reports.push(report);
    }
    if json {
        println!("{}", to_json(&reports)?);
    }
    if failed > 0 {
        return Err(Failure::failed(format!("{failed} check(s) failed")));
    }
    Ok(())
}

pub fn train(
    config_path: &Path,
    data_dir: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    timestamps: bool,
) -> CmdResult {
    let base = config_path.parent().unwrap_or(Path::new("."));
    let mut config = TrainConfig::from_json(&read_input(config_path)?, base)?;
    if seed.is_some() {
        config.seed = seed;
    }
    config.seed = Some(config.seed());
    if let trnet::train::DatasetSource::Mnist { dir: None, .. } = config.dataset {
        if data_dir.is_none() {
            return Err(Failure::usage("MNIST config without a data directory; pass --data-dir"));
        }
    }
    let (train_set, test_set) = config.load_datasets(data_dir)?;
    let net = config.build_network()?;
    fs::create_dir_all(out).map_err(|e| Failure::failed(format!("{}: {e}", out.display())))?;
    write_output(&out.join("config.echo.json"), to_json(&config)?.as_bytes())?;
    eprintln!(
        "training {} ({:?}, rank {}, {} parameters) on {} samples",
        config.arch.name,
        config.model,
        config.rank(),
        net.param_count(),
        train_set.len()
    );
    let outcome = train_with(&config, net, &train_set, &test_set, |row| {
        eprintln!(
            "epoch {:>4}  train_err {:.4}  test_err {:.4}  loss {:.6}",
            row.epoch, row.train_err, row.test_err, row.loss
        );
    })?;
    write_output(&out.join("log.csv"), outcome.log.to_csv(timestamps).as_bytes())?;
    let ck = outcome.network.to_checkpoint().encode()?;
    write_output(&out.join("model.trm"), &ck)?;
    write_output(
        &out.join("model.json"),
        to_json(&outcome.network.sidecar(&config.arch))?.as_bytes(),
    )?;
    match outcome.aborted {
        Some(reason) => Err(Failure::failed(format!(
            "training aborted: {reason}; last good model saved"
        ))),
        None => Ok(()),
    }
}
