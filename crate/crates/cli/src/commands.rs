use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use itemcf::algorithms::AlgoConfig;
use itemcf::ddestimate::{estimate, Binarize, DdError, DdOptions, RadiusGrid, RatingsCorpus};
use itemcf::engine::{replay as replay_trace, RunTrace, TraceManifest};
use itemcf::itemspace::{validate_assumptions, ClusterSpec, ItemMeasure, MeasureSpec, UserClusterSpec};

use crate::config::MeasureSource;
use crate::{EstimateDdArgs, Failure, GenSpaceArgs, ReplayArgs};

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, format!("{text}\n"))?;
    Ok(())
}

pub fn gen_space(args: GenSpaceArgs) -> Result<(), Failure> {
    let spec = match args.kind.as_str() {
        "cluster" => {
            let mut spec = ClusterSpec::new(args.k, args.n_users, args.nu, args.depth, args.seed);
            if let Some(l) = args.locality {
                spec.locality = l;
            }
            MeasureSpec::HierarchicalClusters(spec)
        }
        "user_clusters" => MeasureSpec::UserClusters(UserClusterSpec {
            k_clusters: args.k,
            n_users: args.n_users,
            nu: args.nu,
            genres: args.genres,
        }),
        "uniform" => MeasureSpec::UniformCube { n_users: args.n_users },
        other => return Err(Failure::config(format!("unknown --kind {other:?} (expected cluster, user_clusters or uniform)"))),
    };
    let measure = ItemMeasure::from_spec(&spec).map_err(|e| Failure::config(e.to_string()))?;
    let report =
        validate_assumptions(&measure, args.nu, args.samples, args.seed).map_err(|e| Failure::config(e.to_string()))?;

    fs::create_dir_all(&args.out)?;
    let written = if args.materialize { measure.materialized() } else { measure };
    let json = written.to_json().map_err(|e| Failure::data(e.to_string()))?;
    write_text(&args.out.join("measure.json"), &json)?;
    write_text(
        &args.out.join("assumptions.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;

    let d = report.d_exact.map_or_else(|| "n/a".to_string(), |d| format!("{d}"));
    println!(
        "like mass ok for users: {}, items: {}, d_exact: {d}, outputs in {}",
        report.a2_user_ok,
        report.a2_item_ok,
        args.out.display()
    );
    if args.strict && !report.a2_ok() {
        return Err(Failure::assumption(format!("like fractions leave [nu, 2nu] at nu={}", args.nu)));
    }
    Ok(())
}

fn parse_binarize(rule: &str) -> Result<Binarize, Failure> {
    if let Some(b) = Binarize::by_name(rule) {
        return Ok(b);
    }
    let bad = || Failure::config(format!("unknown --binarize {rule:?} (expected jester, movielens, above:X or at-least:X)"));
    let (kind, x) = rule.split_once(':').ok_or_else(bad)?;
    let x: f64 = x.parse().map_err(|_| bad())?;
    match kind {
        "above" => Ok(Binarize::Above(x)),
        "at-least" => Ok(Binarize::AtLeast(x)),
        _ => Err(bad()),
    }
}

fn dd_failure(e: DdError) -> Failure {
    match e {
        DdError::IllPosed(_) | DdError::Argument(_) => Failure::config(e.to_string()),
        _ => Failure::data(e.to_string()),
    }
}

pub fn estimate_dd(args: EstimateDdArgs) -> Result<(), Failure> {
    let rule = parse_binarize(&args.binarize)?;
    if !(0.0..0.5).contains(&args.delta) {
        return Err(dd_failure(DdError::IllPosed(args.delta)));
    }
    let points = match args.grid.as_str() {
        "per-user" => None,
        g => match g.parse::<usize>() {
            Ok(p) if p >= 2 => Some(p),
            _ => return Err(Failure::config(format!("--grid must be an integer ≥ 2 or per-user, got {g:?}"))),
        },
    };
    let file = File::open(&args.ratings)
        .map_err(|e| Failure::data(format!("cannot read ratings {}: {e}", args.ratings.display())))?;
    let corpus = RatingsCorpus::from_csv(BufReader::new(file), rule).map_err(dd_failure)?;
    let grid = match points {
        Some(p) => RadiusGrid::uniform(p),
        None => RadiusGrid::per_user(corpus.n_users()),
    };
    let opts = DdOptions {
        delta: args.delta,
        min_corating: args.min_corating,
        grid,
        bin_width: args.bin_width,
    };
    let report = estimate(&corpus, &opts).map_err(dd_failure)?;

    fs::create_dir_all(&args.out)?;
    let mut w = BufWriter::new(File::create(args.out.join("dd_items.csv"))?);
    report.write_items_csv(&mut w).map_err(dd_failure)?;
    w.flush()?;
    write_text(&args.out.join("dd_histogram.json"), &report.summary_json().map_err(dd_failure)?)?;
    println!(
        "{} items, {} users, histogram mode {}, clamp rate {:.4}, outputs in {}",
        report.n_items,
        report.n_users,
        report.histogram.mode,
        report.clamp_rate,
        args.out.display()
    );
    Ok(())
}

/// A manifest names its measure by path or carries the inline spec.
fn manifest_measure(manifest: &TraceManifest) -> Result<ItemMeasure, Failure> {
    match serde_json::from_str::<MeasureSpec>(&manifest.measure) {
        Ok(spec) => MeasureSource::Inline(spec).load(),
        Err(_) => MeasureSource::Path(manifest.measure.clone().into()).load(),
    }
}

pub fn replay(args: ReplayArgs) -> Result<(), Failure> {
    let manifest_path = args.manifest.unwrap_or_else(|| args.trace.with_extension("json"));
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Failure::data(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
    let manifest: TraceManifest =
        serde_json::from_str(&text).map_err(|e| Failure::data(format!("manifest {}: {e}", manifest_path.display())))?;
    let algo: AlgoConfig = serde_json::from_value(manifest.algo.clone())
        .map_err(|e| Failure::data(format!("manifest algo: {e}")))?;
    let measure = Arc::new(manifest_measure(&manifest)?);
    let file = File::open(&args.trace)
        .map_err(|e| Failure::data(format!("cannot read trace {}: {e}", args.trace.display())))?;
    let trace = RunTrace::read_csv(BufReader::new(file), &manifest).map_err(|e| Failure::data(e.to_string()))?;
    if trace.records.len() as u64 != manifest.records {
        return Err(Failure::data(format!(
            "trace has {} records, manifest says {}",
            trace.records.len(),
            manifest.records
        )));
    }
    let mut recommender = algo.build(&measure, manifest.seed).map_err(|e| Failure::data(e.to_string()))?;
    let report = replay_trace(&trace, measure, recommender.as_mut()).map_err(|e| Failure::data(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if report.is_identical() {
        Ok(())
    } else {
        Err(Failure::data(format!(
            "trace diverges at t={}",
            report.first_divergence.as_ref().map_or(0, |d| d.t)
        )))
    }
}
