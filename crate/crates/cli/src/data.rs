//! Dataset commands: stats, apen, verify-bound and synth markov.

use std::path::{Path, PathBuf};

use perflaw_core::apen::{self, ApEnConfig, Pooling, DEFAULT_EPSILON};
use perflaw_core::dataset::{self, InteractionSequence, SequenceFormat};
use perflaw_core::markov::{self, MarkovChain};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::{ApenArgs, BoundArgs, DatasetArgs, EntropyArgs, MarkovArgs};
use crate::config::PipelineConfig;
use crate::report::{CmdResult, Failure, Report};

/// Written next to generated sequences so `apen` can print the analytic
/// value alongside the estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSidecar {
    pub transitions: Vec<Vec<f64>>,
    pub stationary: Vec<f64>,
    pub analytic_apen: f64,
    pub len: usize,
    pub users: usize,
    pub seed: u64,
}

pub fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("chain.json")
}

fn format_for(path: &Path, explicit: Option<&str>) -> Result<SequenceFormat, Failure> {
    match explicit {
        Some(f) => Ok(f.parse()?),
        None => Ok(match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => SequenceFormat::Csv,
            _ => SequenceFormat::Jsonl,
        }),
    }
}

struct Loaded {
    path: PathBuf,
    truncate: Option<usize>,
    seqs: Vec<InteractionSequence>,
}

fn load(args: &DatasetArgs, cfg: &PipelineConfig) -> Result<Loaded, Failure> {
    let path = args
        .path
        .clone()
        .or_else(|| cfg.dataset.path.clone())
        .ok_or_else(|| Failure::Usage("no dataset: pass a PATH or set [dataset] path".into()))?;
    let format = format_for(&path, args.format.as_deref().or(cfg.dataset.format.as_deref()))?;
    let mut seqs = dataset::load_sequences(&path, format)?;
    let truncate = args.truncate.or(cfg.dataset.truncate);
    if let Some(n) = truncate {
        if n == 0 {
            return Err(Failure::Invalid("--truncate must be at least 1".into()));
        }
        seqs = dataset::truncate(&seqs, n);
    }
    Ok(Loaded { path, truncate, seqs })
}

fn entropy_config(args: &EntropyArgs, cfg: &PipelineConfig) -> Result<(ApEnConfig, f64), Failure> {
    let pooling = match args.pooling.as_deref().or(cfg.apen.pooling.as_deref()) {
        Some(p) => p.parse::<Pooling>()?,
        None => Pooling::default(),
    };
    let epsilon = args.epsilon.or(cfg.apen.epsilon).unwrap_or(DEFAULT_EPSILON);
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Failure::Invalid(format!("epsilon {epsilon} must be finite and >= 0")));
    }
    let ac = ApEnConfig {
        m: args.m.or(cfg.apen.m).unwrap_or(1),
        r: 0.0,
        pooling,
    };
    Ok((ac, epsilon))
}

pub fn stats(args: &DatasetArgs, cfg: &PipelineConfig) -> CmdResult {
    let data = load(args, cfg)?;
    let st = dataset::compute_stats(&data.seqs)?;
    let mut json = serde_json::to_value(&st).expect("stats serialize");
    json["path"] = json!(data.path);
    json["truncate"] = json!(data.truncate);
    Ok(Report::from_json(json))
}

pub fn apen(args: &ApenArgs, cfg: &PipelineConfig) -> CmdResult {
    let data = load(&args.data, cfg)?;
    let (ac, epsilon) = entropy_config(&args.entropy, cfg)?;
    let st = dataset::compute_stats(&data.seqs)?;
    let r = apen::compute_apen(&data.seqs, &ac)?;
    let inv = apen::apen_prime(r.apen, epsilon)?;
    let d_prime = apen::data_parameter(st.tokens, r.apen, epsilon)?;

    let mut json = json!({
        "path": data.path,
        "tokens": st.tokens,
        "users": st.num_users,
        "m": ac.m,
        "pooling": ac.pooling.as_str(),
        "epsilon": epsilon,
        "apen": r.apen,
        "apen_prime": inv,
        "d_prime": d_prime,
        "phi_m": r.phi_m,
        "phi_m1": r.phi_m1,
        "windows_m": r.windows_m,
        "windows_m1": r.windows_m1,
    });
    let chain = match &args.chain {
        Some(p) => Some(p.clone()),
        None => Some(sidecar_path(&data.path)).filter(|p| p.exists()),
    };
    if let Some(p) = chain {
        let text = std::fs::read_to_string(&p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
        let side: ChainSidecar = serde_json::from_str(&text)
            .map_err(|e| Failure::Invalid(format!("{}: {e}", p.display())))?;
        let analytic = markov::markov_apen(&MarkovChain::new(side.transitions)?)?;
        json["chain"] = json!(p);
        json["analytic_apen"] = json!(analytic);
        json["relative_error"] = json!((r.apen - analytic).abs() / analytic);
    }
    Ok(Report::from_json(json))
}

pub fn verify_bound(args: &BoundArgs, cfg: &PipelineConfig) -> CmdResult {
    let data = load(&args.data, cfg)?;
    let (ac, epsilon) = entropy_config(&args.entropy, cfg)?;
    let rep = apen::verify_encoding_bound(&data.seqs, &ac, epsilon)?;
    let json = serde_json::to_value(&rep).expect("report serializes");
    let verdict = match rep.holds {
        Some(true) => "holds",
        Some(false) => "violated",
        None => "degenerate (ApEn ~ 0, right side undefined)",
    };
    let rhs = rep.rhs.map_or_else(|| "-".to_string(), |v| v.to_string());
    let text = format!(
        "lhs (|U| * H(S)): {}\nrhs (tokens / ApEn): {rhs}\nverdict: {verdict}\n|U| > S_max: {}\n",
        rep.lhs, rep.users_exceed_s_max
    );
    Ok(Report { json, text })
}

pub fn synth_markov(args: &MarkovArgs, _cfg: &PipelineConfig) -> CmdResult {
    let chain = if args.uniform {
        MarkovChain::uniform(args.states)?
    } else {
        MarkovChain::from_flat(args.states, &args.p)?
    };
    let pi = chain.resolve_stationary()?;
    let analytic = markov::markov_apen(&chain)?;
    if args.users == 0 {
        return Err(Failure::Invalid("--users must be at least 1".into()));
    }
    // one independent stream per user, all derived from the one seed
    let mut seeder = ChaCha8Rng::seed_from_u64(args.seed);
    let seqs = (0..args.users)
        .map(|u| markov::generate_markov(&chain, args.len, seeder.next_u64(), format!("u{}", u + 1)))
        .collect::<Result<Vec<_>, _>>()?;
    let body = match format_for(&args.out, None)? {
        SequenceFormat::Csv => dataset::write_csv(&seqs),
        SequenceFormat::Jsonl => dataset::write_jsonl(&seqs),
    };
    write(&args.out, body.as_bytes())?;

    let side = ChainSidecar {
        transitions: chain.transitions().to_vec(),
        stationary: pi.clone(),
        analytic_apen: analytic,
        len: args.len,
        users: args.users,
        seed: args.seed,
    };
    let side_path = sidecar_path(&args.out);
    let mut side_body = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    side_body.push('\n');
    write(&side_path, side_body.as_bytes())?;

    Ok(Report::from_json(json!({
        "path": args.out,
        "chain_path": side_path,
        "states": args.states,
        "users": args.users,
        "tokens": args.len * args.users,
        "seed": args.seed,
        "stationary": pi,
        "analytic_apen": analytic,
    })))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

pub fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_follows_extension_unless_given() {
        assert_eq!(format_for(Path::new("a.CSV"), None).unwrap(), SequenceFormat::Csv);
        assert_eq!(format_for(Path::new("a.txt"), None).unwrap(), SequenceFormat::Jsonl);
        assert_eq!(format_for(Path::new("a.txt"), Some("csv")).unwrap(), SequenceFormat::Csv);
        assert_eq!(format_for(Path::new("a"), Some("xml")).unwrap_err().code(), 3);
    }

    #[test]
    fn sidecar_sits_next_to_data() {
        assert_eq!(sidecar_path(Path::new("d/m.jsonl")), PathBuf::from("d/m.chain.json"));
    }
}
