use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use itemcf::algorithms::{AlgoConfig, ScaleSpec};
use itemcf::similarity::TheoryConstants;
use itemcf::engine::{Environment, RunTrace, TraceRecord, ENGINE_VERSION};
use itemcf::itemspace::{validate_assumptions, AssumptionReport, ClusterSpec, MeasureSpec, UserClusterSpec};
use itemcf::metrics::{
    bootstrap_cold_start, linear_lower_bound, mean_regret, BootstrapColdStart, BoundsOverlay, ColdStartEstimate,
    ColdStartOptions, MeanCurve, RegretCurve, RegretRecorder,
};

use crate::config::{MeasureSource, RunConfig};
use crate::{Failure, SimulateArgs};

/// Per-user samples for the like-mass check on measures without finite support.
const LIKE_MASS_SAMPLES: usize = 10_000;

fn config_from_args(args: &SimulateArgs) -> Result<RunConfig, Failure> {
    let measure = match args.measure.as_str() {
        "uniform" => MeasureSource::Inline(MeasureSpec::UniformCube { n_users: args.n_users }),
        "cluster" => MeasureSource::Inline(MeasureSpec::HierarchicalClusters(ClusterSpec::new(
            args.k,
            args.n_users,
            args.nu,
            1,
            0,
        ))),
        "user_clusters" => MeasureSource::Inline(MeasureSpec::UserClusters(UserClusterSpec {
            k_clusters: args.k,
            n_users: args.n_users,
            nu: args.nu,
            genres: args.genres,
        })),
        path => MeasureSource::Path(path.into()),
    };
    let algo = match args.algo.as_str() {
        "random" => AlgoConfig::Random {},
        "oracle" => AlgoConfig::Oracle {},
        "user_user" => AlgoConfig::UserUser { k: args.k, nu: args.nu },
        "item_item" => {
            let d = match args.d {
                Some(d) => d,
                None => {
                    let m = measure.load()?;
                    itemcf::itemspace::doubling_dimension_exact(&m).map_err(|e| {
                        Failure::config(format!("--d is required when the measure has no exact doubling dimension ({e})"))
                    })?
                }
            };
            AlgoConfig::ItemItem {
                d,
                nu: args.nu,
                scale: ScaleSpec::Preset(args.scale.clone()),
                boundary: Default::default(),
                block_replacement: false,
                concurrency: args.concurrency,
            }
        }
        other => return Err(Failure::config(format!("unknown --algo {other:?} (expected random, oracle, item_item or user_user)"))),
    };
    let seeds = match &args.seed_list {
        Some(list) => list.clone(),
        None => (0..args.seeds).collect(),
    };
    Ok(RunConfig {
        measure,
        algo,
        horizon: args.horizon,
        seeds,
        nu: None,
        stride: args.stride,
        bootstrap: args.bootstrap,
        write_traces: !args.no_traces,
        strict: args.strict,
        out_dir: Some(args.out.clone()),
    })
}

#[derive(Serialize)]
struct RunManifest<'a> {
    engine_version: &'a str,
    config_hash: &'a str,
    algo: &'a str,
    measure: String,
    n_users: usize,
    horizon: u64,
    stride: u64,
    seeds: &'a [u64],
    scale: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct Report<'a> {
    config_hash: &'a str,
    engine_version: &'a str,
    algo: &'a str,
    scale: Option<serde_json::Value>,
    n_users: usize,
    horizon: u64,
    seeds: usize,
    final_regret: f64,
    final_regret_stderr: f64,
    cold_start_options: ColdStartOptions,
    cold_start: ColdStartEstimate,
    bootstrap: Option<BootstrapColdStart>,
    linear_lower_bound: Option<f64>,
    bounds: Option<BoundsOverlay>,
    assumptions: Option<AssumptionSummary>,
}

#[derive(Serialize)]
struct AssumptionSummary {
    nu: f64,
    a2_user_ok: bool,
    a2_item_ok: bool,
    d_exact: Option<f64>,
}

impl From<&AssumptionReport> for AssumptionSummary {
    fn from(r: &AssumptionReport) -> Self {
        AssumptionSummary {
            nu: r.nu,
            a2_user_ok: r.a2_user_ok,
            a2_item_ok: r.a2_item_ok,
            d_exact: r.d_exact,
        }
    }
}

pub fn run(args: SimulateArgs) -> Result<(), Failure> {
    let cfg = match &args.config {
        Some(path) => {
            let mut cfg = RunConfig::from_file(path)?;
            if cfg.out_dir.is_none() {
                cfg.out_dir = Some(args.out.clone());
            }
            cfg
        }
        None => config_from_args(&args)?,
    };
    execute(&cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn scale_of(algo: &AlgoConfig) -> Result<Option<serde_json::Value>, Failure> {
    match algo {
        AlgoConfig::ItemItem { scale, .. } => {
            let knobs = scale.resolve().map_err(Failure::config)?;
            let name = match scale {
                ScaleSpec::Preset(name) => serde_json::Value::String(name.clone()),
                ScaleSpec::Knobs(_) => serde_json::Value::Null,
            };
            Ok(Some(serde_json::json!({ "preset": name, "knobs": knobs })))
        }
        _ => Ok(None),
    }
}

fn execute(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.validate()?;
    let measure = Arc::new(cfg.measure.load()?);
    let n = measure.n_users();
    let stride = cfg.stride.unwrap_or(n as u64);
    let hash = cfg.hash();
    let algo_name = cfg.algo.name();
    let scale = scale_of(&cfg.algo)?;

    let assumptions = match cfg.nu.or(cfg.algo_nu()) {
        Some(nu) => {
            let report = validate_assumptions(&measure, nu, LIKE_MASS_SAMPLES, 0).map_err(|e| Failure::config(e.to_string()))?;
            if !report.a2_ok() {
                let msg = format!(
                    "like fractions leave [nu, 2nu] at nu={nu} (users ok: {}, items ok: {})",
                    report.a2_user_ok, report.a2_item_ok
                );
                if cfg.strict {
                    return Err(Failure::assumption(msg));
                }
                eprintln!("warning: {msg}");
            }
            Some(report)
        }
        None => None,
    };
    // surfaces algorithm config errors before any output is written
    cfg.algo.build(&measure, cfg.seeds[0]).map_err(|e| Failure::config(e.to_string()))?;
    let bounds = match &cfg.algo {
        AlgoConfig::ItemItem { d, nu, scale, .. } => {
            let knobs = scale.resolve().map_err(Failure::config)?;
            let consts = TheoryConstants::new(*d, *nu, n, knobs).map_err(|e| Failure::config(e.to_string()))?;
            Some(BoundsOverlay::new(&consts))
        }
        _ => None,
    };

    let out = cfg.out_dir.clone().unwrap_or_else(|| "itemcf-out".into());
    fs::create_dir_all(out.join("curves"))?;
    if cfg.write_traces {
        fs::create_dir_all(out.join("traces"))?;
    }
    write_json(&out.join("config.json"), cfg)?;
    write_json(
        &out.join("run_manifest.json"),
        &RunManifest {
            engine_version: ENGINE_VERSION,
            config_hash: &hash,
            algo: algo_name,
            measure: cfg.measure.describe(),
            n_users: n,
            horizon: cfg.horizon,
            stride,
            seeds: &cfg.seeds,
            scale: scale.clone(),
        },
    )?;

    let algo_json = serde_json::to_value(&cfg.algo).expect("algo serializes");
    let measure_desc = cfg.measure.describe();
    let curves: Vec<RegretCurve> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<RegretCurve, Failure> {
            let mut algo = cfg.algo.build(&measure, seed).map_err(|e| Failure::config(e.to_string()))?;
            let mut env = Environment::new(measure.clone(), seed);
            let mut rec = RegretRecorder::new(n, stride, seed, algo_name);
            let mut records: Vec<TraceRecord> = Vec::new();
            env.run_with(algo.as_mut(), cfg.horizon, |r| {
                rec.record(r.feedback);
                if cfg.write_traces {
                    records.push(r.clone());
                }
            })
            .map_err(|e| Failure::data(format!("seed {seed}: {e}")))?;
            let curve = rec.finish();
            if cfg.write_traces {
                let trace = RunTrace {
                    version: ENGINE_VERSION.to_string(),
                    seed,
                    n_users: n,
                    horizon: cfg.horizon,
                    records,
                };
                let base = out.join("traces").join(format!("seed-{seed}"));
                let file = BufWriter::new(File::create(base.with_extension("csv"))?);
                trace.write_csv(file).map_err(|e| Failure::data(e.to_string()))?;
                write_json(
                    &base.with_extension("json"),
                    &trace.manifest(&hash, &measure_desc, algo_json.clone()),
                )?;
            }
            write_curve(&out.join("curves").join(format!("seed-{seed}.csv")), &curve)?;
            Ok(curve)
        })
        .collect::<Result<_, _>>()?;

    let mean = match mean_regret(&curves) {
        Ok(m) => m,
        Err(_) => MeanCurve {
            n_users: n,
            algo: algo_name.to_string(),
            n_seeds: 1,
            ts: curves[0].ts(),
            mean: curves[0].values(),
            stderr: vec![0.0; curves[0].len()],
        },
    };
    let mut w = BufWriter::new(File::create(out.join("mean_curve.csv"))?);
    mean.write_csv(&mut w).map_err(|e| Failure::data(e.to_string()))?;
    w.flush()?;

    let opts = ColdStartOptions::default();
    let cold_start = mean.cold_start(&opts);
    let bootstrap = if curves.len() >= 2 && cfg.bootstrap > 0 {
        Some(bootstrap_cold_start(&curves, &opts, cfg.bootstrap, cfg.seeds[0]).map_err(|e| Failure::data(e.to_string()))?)
    } else {
        None
    };
    let last = mean.mean.len() - 1;
    let report = Report {
        config_hash: &hash,
        engine_version: ENGINE_VERSION,
        algo: algo_name,
        scale,
        n_users: n,
        horizon: cfg.horizon,
        seeds: curves.len(),
        final_regret: mean.mean[last],
        final_regret_stderr: mean.stderr[last],
        cold_start_options: opts,
        cold_start: cold_start.clone(),
        bootstrap,
        linear_lower_bound: assumptions.as_ref().map(|a| linear_lower_bound(a.nu, n)),
        bounds,
        assumptions: assumptions.as_ref().map(AssumptionSummary::from),
    };
    write_json(&out.join("report.json"), &report)?;

    let cs = match cold_start.cold_start {
        Some(v) => format!("{v}"),
        None => "none".into(),
    };
    println!(
        "{algo_name}: {} seeds, R({}) = {:.4} ± {:.4}, cold start {cs}, outputs in {}",
        curves.len(),
        mean.ts[last],
        mean.mean[last],
        mean.stderr[last],
        out.display()
    );
    Ok(())
}

fn write_curve(path: &Path, curve: &RegretCurve) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "T,R")?;
    for k in 0..curve.len() {
        writeln!(w, "{},{}", curve.t_at(k), curve.r_at(k))?;
    }
    w.flush()?;
    Ok(())
}
