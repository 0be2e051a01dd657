//! Law commands: fit, optimize, synth runs and potential.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use perflaw_core::fitting::{self, FitResult, FitSettings, LawParams, RunRecord, SizeCovariate};
use perflaw_core::laws::{self, LossForm, LossLawParams, MetricKind, ParamMap, PerfLawParams};
use perflaw_core::optimize::{self, Budget, PotentialEntry, SearchMode, SearchSpace};
use perflaw_core::runstore::{self, DuplicatePolicy, RunArchive, RunFilter};
use perflaw_core::synth::{self, RunGrid, SynthDataset};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::args::{FitArgs, FitLossArgs, LawKind, OptimizeArgs, PotentialArgs, RunsArgs};
use crate::config::PipelineConfig;
use crate::data::read_json;
use crate::report::{CmdResult, Failure, Report};

/// Keys of a fit document that are not law parameters.
const FIT_META: [&str; 9] = [
    "law",
    "form",
    "r_squared",
    "rss",
    "converged",
    "iterations",
    "start_index",
    "points",
    "size_covariate",
];

fn assignment<'a>(s: &'a str, what: &str) -> Result<(&'a str, &'a str), Failure> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Failure::Usage(format!("{what} expects name=value, got {s:?}")))
}

fn number<T: FromStr>(s: &str, what: &str) -> Result<T, Failure> {
    s.parse()
        .map_err(|_| Failure::Usage(format!("{what}: {s:?} is not a number")))
}

fn pair<T: FromStr>(s: &str, what: &str) -> Result<(T, T), Failure> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| Failure::Usage(format!("{what} expects lo:hi, got {s:?}")))?;
    Ok((number(a.trim(), what)?, number(b.trim(), what)?))
}

fn parse_or<T>(flag: Option<&str>, config: Option<&str>, default: T) -> Result<T, Failure>
where
    T: FromStr<Err = perflaw_core::Error>,
{
    match flag.or(config) {
        Some(s) => Ok(s.parse()?),
        None => Ok(default),
    }
}

fn io_missing(path: &Path) -> Failure {
    Failure::Io(format!("{}: no such file", path.display()))
}

// ---- fit ----

fn load_runs(args: &FitArgs, cfg: &PipelineConfig, default_metric: Option<MetricKind>) -> Result<Vec<RunRecord>, Failure> {
    let metric = match &args.metric {
        Some(m) => Some(m.parse::<MetricKind>()?),
        None => default_metric,
    };
    let filter = RunFilter {
        dataset_id: args.dataset.clone(),
        metric: metric.map(|m| m.kind),
        k: metric.and_then(|m| m.k),
    };
    if let Some(path) = args.runs.as_ref().or(cfg.fit.runs.as_ref()) {
        return Ok(runstore::read_runs_file(path, &filter)?);
    }
    if let Some(root) = &args.archive {
        let runs = root.join("runs.jsonl");
        if !runs.exists() {
            return Err(io_missing(&runs));
        }
        return Ok(RunArchive::open(root)?.load_runs(&filter)?);
    }
    Err(Failure::Usage("no runs: pass --runs or --archive".into()))
}

fn settings(args: &FitArgs, cfg: &PipelineConfig, base: FitSettings) -> Result<FitSettings, Failure> {
    let mut s = base;
    if let Some(n) = args.starts.or(cfg.fit.starts) {
        s.starts = n;
    }
    if let Some(seed) = args.seed.or(cfg.fit.seed) {
        s.seed = seed;
    }
    s.mask.extend(cfg.fit.mask.clone());
    for m in &args.mask {
        let (k, v) = assignment(m, "--mask")?;
        s.mask.insert(k.to_string(), number(v, "--mask")?);
    }
    for k in &args.free {
        s.mask.remove(k.trim());
    }
    s.bounds.extend(cfg.fit.bounds.clone());
    for b in &args.bounds {
        let (k, v) = assignment(b, "--bounds")?;
        s.bounds.insert(k.to_string(), pair(v, "--bounds")?);
    }
    Ok(s)
}

fn fit_names(args: &FitArgs, default: &str) -> String {
    args.name.clone().unwrap_or_else(|| default.to_string())
}

fn out_dir(args: &FitArgs, cfg: &PipelineConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| args.archive.clone())
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Per-point plot data: inputs, observed, predicted, residual.
fn write_points(
    path: &Path,
    runs: &[RunRecord],
    predict: impl Fn(&RunRecord) -> perflaw_core::Result<f64>,
) -> Result<(), Failure> {
    let io = |e: csv::Error| Failure::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([
        "dataset_id",
        "n_layers",
        "d_emb",
        "metric",
        "d_prime",
        "observed",
        "predicted",
        "residual",
    ])
    .map_err(io)?;
    for r in runs {
        let p = predict(r)?;
        w.write_record([
            r.dataset_id.clone(),
            r.n_layers.to_string(),
            r.d_emb.to_string(),
            r.metric_kind().to_string(),
            r.d_prime.map_or_else(String::new, |d| d.to_string()),
            r.value.to_string(),
            p.to_string(),
            (r.value - p).to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn save(
    args: &FitArgs,
    cfg: &PipelineConfig,
    name: &str,
    fit: &FitResult,
    runs: &[RunRecord],
    predict: impl Fn(&RunRecord) -> perflaw_core::Result<f64>,
) -> Result<Value, Failure> {
    let archive = RunArchive::open(out_dir(args, cfg))?;
    let fit_path = archive.save_fit(name, fit)?;
    let points_path = archive.fits_dir().join(format!("{name}.points.csv"));
    write_points(&points_path, runs, predict)?;
    Ok(json!({
        "name": name,
        "fit_path": fit_path,
        "points_path": points_path,
        "fit": fit.to_json(),
    }))
}

fn fit_text(json: &Value) -> String {
    let fit = &json["fit"];
    let mut text = format!(
        "{} law ({}) fitted on {} points\n",
        fit["law"].as_str().unwrap_or("?"),
        fit["form"].as_str().unwrap_or("?"),
        fit["points"]
    );
    if let Value::Object(map) = fit {
        for (k, v) in map.iter().filter(|(k, _)| !FIT_META.contains(&k.as_str())) {
            text.push_str(&format!("  {k} = {v}\n"));
        }
    }
    match fit["r_squared"].as_f64() {
        Some(r2) => text.push_str(&format!("R^2 = {r2}\n")),
        None => text.push_str("R^2 undefined (observations have zero variance)\n"),
    }
    text.push_str(&format!(
        "converged: {}\nfit: {}\npoints: {}\n",
        fit["converged"],
        json["fit_path"].as_str().unwrap_or(""),
        json["points_path"].as_str().unwrap_or("")
    ));
    text
}

pub fn fit_perf(args: &FitArgs, cfg: &PipelineConfig) -> CmdResult {
    let runs = load_runs(args, cfg, None)?;
    let s = settings(args, cfg, FitSettings::perf_default())?;
    let fit = fitting::fit_perf_law(&runs, &s)?;
    let json = save(args, cfg, &fit_names(args, "perf"), &fit, &runs, |r| fit.predict(r))?;
    let text = fit_text(&json);
    Ok(Report { json, text })
}

pub fn fit_loss(args: &FitLossArgs, cfg: &PipelineConfig) -> CmdResult {
    let common = &args.common;
    let runs = load_runs(common, cfg, Some(MetricKind::loss()))?;
    let mut s = settings(common, cfg, FitSettings::default())?;
    s.size_covariate = parse_or(args.covariate.as_deref(), cfg.fit.covariate.as_deref(), SizeCovariate::default())?;
    if !args.data_params {
        let form = parse_or(args.form.as_deref(), cfg.fit.form.as_deref(), LossForm::Simplified)?;
        let fit = fitting::fit_loss_law(&runs, form, &s)?;
        let json = save(common, cfg, &fit_names(common, "loss"), &fit, &runs, |r| fit.predict(r))?;
        let text = fit_text(&json);
        return Ok(Report { json, text });
    }

    let dp = fitting::fit_data_parameters(&runs, &s)?;
    let law = dp.law;
    let cov = s.size_covariate;
    let mut json = save(common, cfg, &fit_names(common, "loss"), &dp.fit, &runs, |r| {
        laws::eval_loss_law(&law, cov.size(r), dp.data_parameters[&r.dataset_id])
    })?;
    json["data_parameters"] = json!(dp.data_parameters);
    json["linearity"] = linearity(&runs, &dp.data_parameters)?;
    let mut text = fit_text(&json);
    for (ds, v) in &dp.data_parameters {
        text.push_str(&format!("data parameter {ds} = {v}\n"));
    }
    if let Some(r) = json["linearity"]["pearson_r"].as_f64() {
        text.push_str(&format!("pearson r vs D' = {r}\n"));
    }
    Ok(Report { json, text })
}

/// Linear fit of fitted data parameters against each dataset's recorded
/// `D′`, when every dataset carries one consistent value.
fn linearity(runs: &[RunRecord], fitted: &BTreeMap<String, f64>) -> Result<Value, Failure> {
    let mut recorded: BTreeMap<&str, f64> = BTreeMap::new();
    for r in runs {
        let Some(d) = r.d_prime else { return Ok(Value::Null) };
        if *recorded.entry(&r.dataset_id).or_insert(d) != d {
            return Ok(Value::Null);
        }
    }
    let xs: Vec<f64> = fitted.keys().map(|k| recorded[k.as_str()]).collect();
    let ys: Vec<f64> = fitted.values().copied().collect();
    let lf = fitting::linear_fit(&xs, &ys)?;
    Ok(json!({
        "slope": lf.slope,
        "intercept": lf.intercept,
        "pearson_r": lf.pearson_r,
        "r_squared": lf.r_squared,
    }))
}

// ---- optimize ----

fn load_fit(fit: Option<&PathBuf>, archive: Option<&PathBuf>, name: Option<&str>) -> Result<FitResult, Failure> {
    let path = match (fit, archive, name) {
        (Some(p), _, _) => p.clone(),
        (None, Some(root), Some(n)) => root.join("fits").join(format!("{n}.json")),
        (None, None, Some(n)) => PathBuf::from("fits").join(format!("{n}.json")),
        _ => return Err(Failure::Usage("no fit: pass --fit PATH or --name NAME".into())),
    };
    Ok(runstore::load_fit_file(&path)?)
}

fn perf_params(fit: &FitResult, what: &str) -> Result<PerfLawParams, Failure> {
    match fit.params {
        LawParams::Perf(p) => Ok(p),
        LawParams::Loss(_) => Err(Failure::Invalid(format!("{what} is a loss-law fit; a performance-law fit is needed"))),
    }
}

fn search_mode(s: &str) -> Result<SearchMode, Failure> {
    match s {
        "auto" => Ok(SearchMode::Auto),
        "exhaustive" => Ok(SearchMode::Exhaustive),
        "coarse-to-fine" | "coarse_to_fine" => Ok(SearchMode::CoarseToFine),
        other => Err(Failure::Usage(format!("unknown search mode {other:?}"))),
    }
}

pub fn optimize(args: &OptimizeArgs, cfg: &PipelineConfig) -> CmdResult {
    let fit = load_fit(args.fit.as_ref(), args.archive.as_ref(), args.name.as_deref())?;
    let params = perf_params(&fit, "the fit")?;
    let d_prime = args
        .d_prime
        .or(cfg.search.d_prime)
        .ok_or_else(|| Failure::Usage("pass --d-prime (data scale of the target dataset)".into()))?;
    let n_range = match &args.n_range {
        Some(s) => pair(s, "--n-range")?,
        None => cfg.search.n_range.unwrap_or((1, 64)),
    };
    let d_range = match &args.d_range {
        Some(s) => pair(s, "--d-range")?,
        None => cfg.search.d_range.unwrap_or((1, 1024)),
    };
    let mode_name = args.mode.as_deref().or(cfg.search.mode.as_deref()).unwrap_or("auto");
    let mode = search_mode(mode_name)?;
    let mut space = SearchSpace::new(n_range, d_range);
    let budget = match args.budget.as_deref().or(cfg.search.budget.as_deref()) {
        Some(b) => Some(b.parse::<Budget>()?),
        None => None,
    };
    if let Some(b) = budget {
        space = space.with_budget(b);
    }
    let res = optimize::optimize(&params, d_prime, &space, mode)?;

    let mut json = serde_json::to_value(&res).expect("result serializes");
    json["d_prime"] = json!(d_prime);
    json["n_range"] = json!([n_range.0, n_range.1]);
    json["d_range"] = json!([d_range.0, d_range.1]);
    json["budget"] = json!(budget.map(|b| format!("{}:{}", b.functional.as_str(), b.limit)));
    json["mode"] = json!(if budget.is_some() { "constrained" } else { mode_name });

    let mut text = format!(
        "argmax: n_layers = {}, d_emb = {}\npredicted: {}\nevaluated points: {}\n",
        res.argmax_n, res.argmax_d, res.predicted, res.evaluated_points
    );
    if let Some(frontier) = &res.frontier {
        text.push_str("frontier (n, d, predicted):\n");
        for p in frontier {
            text.push_str(&format!("  {}\t{}\t{}\n", p.n, p.d, p.predicted));
        }
    }
    Ok(Report { json, text })
}

// ---- synth runs ----

fn law_map(args: &RunsArgs) -> Result<ParamMap, Failure> {
    let mut map = ParamMap::new();
    if let Some(path) = &args.params {
        let doc = read_json(path)?;
        let obj = doc
            .as_object()
            .ok_or_else(|| Failure::Invalid(format!("{}: expected a JSON object", path.display())))?;
        if let Some(law) = obj.get("law").and_then(Value::as_str) {
            let want = match args.law {
                LawKind::Loss => "loss",
                LawKind::Perf => "perf",
            };
            if law != want {
                return Err(Failure::Invalid(format!("{}: a {law}-law document, not {want}", path.display())));
            }
        }
        for (k, v) in obj.iter().filter(|(k, _)| !FIT_META.contains(&k.as_str())) {
            let x = v
                .as_f64()
                .ok_or_else(|| Failure::Invalid(format!("{}: {k} is not a number", path.display())))?;
            map.insert(k.clone(), x);
        }
    }
    for s in &args.set {
        let (k, v) = assignment(s, "--set")?;
        map.insert(k.to_string(), number(v, "--set")?);
    }
    Ok(map)
}

pub fn synth_runs(args: &RunsArgs, _cfg: &PipelineConfig) -> CmdResult {
    let map = law_map(args)?;
    let datasets = args
        .datasets
        .iter()
        .map(|s| {
            let (id, v) = assignment(s, "--dataset")?;
            Ok(SynthDataset {
                dataset_id: id.to_string(),
                d_prime: number(v, "--dataset")?,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let grid = RunGrid {
        datasets,
        n_layers: args.n_layers.clone(),
        d_emb: args.d_emb.clone(),
    };
    let (runs, metric) = match args.law {
        LawKind::Perf => {
            let p = PerfLawParams::from_map(&map)?;
            let metric: MetricKind = args.metric.parse()?;
            (synth::perf_runs(&p, &grid, metric, args.sigma, args.seed)?, metric)
        }
        LawKind::Loss => {
            let p = LossLawParams::from_map(&map)?;
            p.validate()?;
            let cov = parse_or(args.covariate.as_deref(), None, SizeCovariate::default())?;
            (synth::loss_runs(&p, &grid, cov, args.sigma, args.seed)?, MetricKind::loss())
        }
    };
    let path = match &args.archive {
        Some(root) => {
            let policy: DuplicatePolicy = args.on_duplicate.parse()?;
            let archive = RunArchive::open(root)?;
            archive.append_runs(&runs, policy)?;
            archive.runs_path()
        }
        None => {
            runstore::write_runs_file(&args.out, &runs)?;
            args.out.clone()
        }
    };
    Ok(Report::from_json(json!({
        "path": path,
        "law": if args.law == LawKind::Perf { "perf" } else { "loss" },
        "metric": metric.to_string(),
        "runs": runs.len(),
        "datasets": grid.datasets.len(),
        "sigma": args.sigma,
        "seed": args.seed,
    })))
}

// ---- potential ----

#[derive(Deserialize)]
struct TableRow {
    label: String,
    #[serde(default)]
    w1: Option<f64>,
    #[serde(default)]
    w2: Option<f64>,
    w3: f64,
    w4: f64,
    #[serde(default)]
    observed: Option<f64>,
}

fn table_entries(path: &Path) -> Result<Vec<PotentialEntry>, Failure> {
    if !path.exists() {
        return Err(io_missing(path));
    }
    let bad = |e: csv::Error| Failure::Invalid(format!("{}: {e}", path.display()));
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(bad)?;
    rd.deserialize::<TableRow>()
        .map(|row| {
            let r = row.map_err(bad)?;
            Ok(PotentialEntry {
                label: r.label,
                w1: r.w1,
                w2: r.w2,
                w3: r.w3,
                w4: r.w4,
                observed: r.observed,
            })
        })
        .collect()
}

pub fn potential(args: &PotentialArgs, _cfg: &PipelineConfig) -> CmdResult {
    let mut entries = match &args.table {
        Some(t) => table_entries(t)?,
        None => {
            let mut sources: Vec<(String, PathBuf)> = Vec::new();
            for f in &args.fits {
                sources.push(match f.split_once('=') {
                    Some((label, p)) => (label.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(f);
                        let label = p.file_stem().map_or_else(|| f.clone(), |s| s.to_string_lossy().into_owned());
                        (label, p)
                    }
                });
            }
            for n in &args.names {
                let root = args.archive.clone().unwrap_or_else(|| PathBuf::from("."));
                sources.push((n.clone(), root.join("fits").join(format!("{n}.json"))));
            }
            sources
                .into_iter()
                .map(|(label, path)| {
                    let fit = runstore::load_fit_file(&path)?;
                    let p = perf_params(&fit, &path.display().to_string())?;
                    Ok(PotentialEntry::from_params(label, &p, None))
                })
                .collect::<Result<Vec<_>, Failure>>()?
        }
    };
    for o in &args.observed {
        let (label, v) = assignment(o, "--observed")?;
        let value: f64 = number(v, "--observed")?;
        let e = entries
            .iter_mut()
            .find(|e| e.label == label)
            .ok_or_else(|| Failure::Invalid(format!("--observed names unknown fit {label:?}")))?;
        e.observed = Some(value);
    }
    let report = optimize::scaling_potential(&entries)?;
    let json = serde_json::to_value(&report).expect("report serializes");
    Ok(Report {
        json,
        text: format!("{report}\n"),
    })
}
