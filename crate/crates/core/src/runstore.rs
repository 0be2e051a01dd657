//! On-disk archive of run records and fit artifacts.
//!
//! Layout under the archive directory:
//!
//! ```text
//! runs.jsonl        one RunRecord per line, insertion order
//! fits/<name>.json  FitResult documents
//! manifest.json     creation time, tool version, dataset digests
//! .lock             present while a writer holds the archive
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fitting::{validate_runs, FitResult, RunRecord};
use crate::laws::{MetricKind, MetricName};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum DuplicatePolicy {
    #[default]
    Reject,
    /// Overwrite the stored record in place (rewrites `runs.jsonl`).
    Replace,
    /// Append anyway; both records are kept.
    KeepBoth,
}

impl std::str::FromStr for DuplicatePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reject" => Ok(Self::Reject),
            "replace" => Ok(Self::Replace),
            "keep-both" | "keep_both" => Ok(Self::KeepBoth),
            other => Err(Error::Invalid(format!("unknown duplicate policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunFilter {
    pub dataset_id: Option<String>,
    pub metric: Option<MetricName>,
    pub k: Option<u32>,
}

impl RunFilter {
    pub fn matches(&self, r: &RunRecord) -> bool {
        self.dataset_id.as_ref().is_none_or(|d| *d == r.dataset_id)
            && self.metric.is_none_or(|m| m == r.metric)
            && self.k.is_none_or(|k| Some(k) == r.k)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` wins when set.
    pub created_at: u64,
    pub tool_version: String,
    pub datasets: BTreeMap<String, DatasetDigest>,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct AppendReport {
    pub appended: usize,
    pub replaced: usize,
}

/// Held while writing; removes the lock file on drop.
#[derive(Debug)]
pub struct ArchiveLock {
    path: PathBuf,
}

impl Drop for ArchiveLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug)]
pub struct RunArchive {
    root: PathBuf,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn now() -> u64 {
    if let Some(epoch) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
    {
        return epoch;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes through a sibling temp file and renames over the target.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn key_text(r: &RunRecord) -> String {
    format!(
        "({}, n_layers={}, d_emb={}, {})",
        r.dataset_id,
        r.n_layers,
        r.d_emb,
        r.metric_kind()
    )
}

fn record_line(r: &RunRecord) -> String {
    let mut s = serde_json::to_string(r).expect("records serialize");
    s.push('\n');
    s
}

fn valid_fit_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl RunArchive {
    /// Opens an archive, creating the layout if the directory is new.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let archive = Self { root: root.into() };
        fs::create_dir_all(archive.fits_dir()).map_err(|e| Error::io(archive.fits_dir(), e))?;
        if !archive.runs_path().exists() {
            File::create(archive.runs_path()).map_err(|e| Error::io(archive.runs_path(), e))?;
        }
        if !archive.manifest_path().exists() {
            archive.write_manifest(&Manifest {
                created_at: now(),
                tool_version: TOOL_VERSION.to_string(),
                datasets: BTreeMap::new(),
            })?;
        }
        Ok(archive)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn runs_path(&self) -> PathBuf {
        self.root.join("runs.jsonl")
    }

    pub fn fits_dir(&self) -> PathBuf {
        self.root.join("fits")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn fit_path(&self, name: &str) -> PathBuf {
        self.fits_dir().join(format!("{name}.json"))
    }

    /// Takes the advisory writer lock.
    pub fn lock(&self) -> Result<ArchiveLock> {
        let path = self.root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(ArchiveLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn load_runs(&self, filter: &RunFilter) -> Result<Vec<RunRecord>> {
        read_runs_file(&self.runs_path(), filter)
    }

    pub fn append_runs(&self, runs: &[RunRecord], policy: DuplicatePolicy) -> Result<AppendReport> {
        validate_runs(runs)?;
        let _lock = self.lock()?;
        let mut stored = self.load_runs(&RunFilter::default())?;
        let mut index: HashMap<(String, u32, u32, MetricKind), usize> = HashMap::new();
        for (i, r) in stored.iter().enumerate() {
            index.entry(r.key()).or_insert(i);
        }

        let mut report = AppendReport::default();
        match policy {
            DuplicatePolicy::Reject => {
                for r in runs {
                    if index.insert(r.key(), usize::MAX).is_some() {
                        return Err(Error::DuplicateRun(key_text(r)));
                    }
                }
                self.append_lines(runs)?;
                report.appended = runs.len();
            }
            DuplicatePolicy::KeepBoth => {
                self.append_lines(runs)?;
                report.appended = runs.len();
            }
            DuplicatePolicy::Replace => {
                let mut fresh = Vec::new();
                for r in runs {
                    match index.get(&r.key()) {
                        Some(&i) if i < stored.len() => {
                            stored[i] = r.clone();
                            report.replaced += 1;
                        }
                        Some(&i) => {
                            fresh[i - stored.len()] = r.clone();
                            report.replaced += 1;
                        }
                        None => {
                            index.insert(r.key(), stored.len() + fresh.len());
                            fresh.push(r.clone());
                        }
                    }
                }
                report.appended = fresh.len();
                if report.replaced == 0 {
                    self.append_lines(&fresh)?;
                } else {
                    stored.extend(fresh);
                    let body: String = stored.iter().map(record_line).collect();
                    write_atomic(&self.runs_path(), body.as_bytes())?;
                }
            }
        }
        Ok(report)
    }

    fn append_lines(&self, runs: &[RunRecord]) -> Result<()> {
        let path = self.runs_path();
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let body: String = runs.iter().map(record_line).collect();
        f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn save_fit(&self, name: &str, fit: &FitResult) -> Result<PathBuf> {
        if !valid_fit_name(name) {
            return Err(Error::Invalid(format!(
                "fit name {name:?} must be letters, digits, '_', '-' or '.'"
            )));
        }
        let _lock = self.lock()?;
        let path = self.fit_path(name);
        let mut body = serde_json::to_string_pretty(&fit.to_json()).expect("fit serializes");
        body.push('\n');
        write_atomic(&path, body.as_bytes())?;
        Ok(path)
    }

    pub fn load_fit(&self, name: &str) -> Result<FitResult> {
        load_fit_file(&self.fit_path(name))
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.manifest_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })
    }

    fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let mut body = serde_json::to_string_pretty(m).expect("manifest serializes");
        body.push('\n');
        write_atomic(&self.manifest_path(), body.as_bytes())
    }

    /// Records the digest of a dataset file under `name`.
    pub fn record_dataset(&self, name: &str, path: &Path) -> Result<DatasetDigest> {
        let _lock = self.lock()?;
        let digest = DatasetDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        };
        let mut m = self.manifest()?;
        m.datasets.insert(name.to_string(), digest.clone());
        self.write_manifest(&m)?;
        Ok(digest)
    }

    /// Checks every recorded dataset digest against the file on disk.
    pub fn verify_manifest(&self) -> Result<()> {
        for d in self.manifest()?.datasets.values() {
            let actual = sha256_file(&d.path)?;
            if actual != d.sha256 {
                return Err(Error::DigestMismatch {
                    path: d.path.clone(),
                    expected: d.sha256.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// Reads a runs JSONL file, validating every record. Errors carry the
/// 1-based line number.
pub fn read_runs_file(path: &Path, filter: &RunFilter) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if filter.matches(&record) {
            out.push(record);
        }
    }
    Ok(out)
}

/// Writes runs as JSONL, one record per line, replacing the file.
pub fn write_runs_file(path: &Path, runs: &[RunRecord]) -> Result<()> {
    validate_runs(runs)?;
    let body: String = runs.iter().map(record_line).collect();
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn load_fit_file(path: &Path) -> Result<FitResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })?;
    FitResult::from_json(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laws::MetricKind;

    fn hr(n: u32, v: f64) -> RunRecord {
        RunRecord::new("ml-1m", n, 64, MetricKind::new(MetricName::Hr, Some(10)).unwrap(), v, Some(2.5e7))
    }

    fn loss(n: u32, v: f64) -> RunRecord {
        RunRecord::new("ml-1m", n, 64, MetricKind::loss(), v, None)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunArchive::open(dir.path()).unwrap();
        let runs = vec![hr(1, 0.1), hr(2, 0.2 / 3.0), loss(4, 7.123456789)];
        a.append_runs(&runs, DuplicatePolicy::Reject).unwrap();
        let back = a.load_runs(&RunFilter::default()).unwrap();
        assert_eq!(back, runs);
        let bytes = fs::read_to_string(a.runs_path()).unwrap();
        assert_eq!(bytes, back.iter().map(record_line).collect::<String>());
    }

    #[test]
    fn duplicates_by_policy() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunArchive::open(dir.path()).unwrap();
        a.append_runs(&[hr(1, 0.1), hr(2, 0.2)], DuplicatePolicy::Reject).unwrap();

        let err = a.append_runs(&[hr(2, 0.25)], DuplicatePolicy::Reject).unwrap_err();
        assert!(err.to_string().contains("n_layers=2"), "{err}");
        assert!(a.append_runs(&[hr(3, 0.3), hr(3, 0.3)], DuplicatePolicy::Reject).is_err());

        let before = fs::read(a.runs_path()).unwrap();
        a.append_runs(&[hr(2, 0.25)], DuplicatePolicy::KeepBoth).unwrap();
        let after = fs::read(a.runs_path()).unwrap();
        assert_eq!(&after[..before.len()], &before[..]);
        assert_eq!(a.load_runs(&RunFilter::default()).unwrap().len(), 3);

        let dir = tempfile::tempdir().unwrap();
        let a = RunArchive::open(dir.path()).unwrap();
        a.append_runs(&[hr(1, 0.1), hr(2, 0.2)], DuplicatePolicy::Reject).unwrap();
        let rep = a
            .append_runs(&[hr(1, 0.15), hr(5, 0.5), hr(5, 0.55)], DuplicatePolicy::Replace)
            .unwrap();
        assert_eq!(rep, AppendReport { appended: 1, replaced: 2 });
        assert_eq!(
            a.load_runs(&RunFilter::default()).unwrap(),
            vec![hr(1, 0.15), hr(2, 0.2), hr(5, 0.55)]
        );
    }

    #[test]
    fn invalid_record_rejected_with_index() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunArchive::open(dir.path()).unwrap();
        let err = a.append_runs(&[hr(1, 0.1), hr(2, 1.2)], DuplicatePolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { index: 1, .. }));
        assert!(a.load_runs(&RunFilter::default()).unwrap().is_empty());
    }

    #[test]
    fn filters() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunArchive::open(dir.path()).unwrap();
        let mut other = hr(1, 0.3);
        other.dataset_id = "beauty".into();
        a.append_runs(&[hr(1, 0.1), loss(1, 5.0), other.clone()], DuplicatePolicy::Reject)
            .unwrap();
        let f = RunFilter { metric: Some(MetricName::Hr), ..Default::default() };
        assert_eq!(a.load_runs(&f).unwrap(), vec![hr(1, 0.1), other.clone()]);
        let f = RunFilter { dataset_id: Some("beauty".into()), ..Default::default() };
        assert_eq!(a.load_runs(&f).unwrap(), vec![other]);
        assert_eq!(a.load_runs(&RunFilter::default()).unwrap().len(), 3);
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunArchive::open(dir.path()).unwrap();
        a.append_runs(&[hr(1, 0.1), hr(2, 0.2)], DuplicatePolicy::Reject).unwrap();
        let mut text = fs::read_to_string(a.runs_path()).unwrap();
        text.push_str(&record_line(&hr(3, 0.3))[..30]);
        fs::write(a.runs_path(), text).unwrap();
        assert!(matches!(
            a.load_runs(&RunFilter::default()),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn lock_excludes_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunArchive::open(dir.path()).unwrap();
        let held = a.lock().unwrap();
        assert!(matches!(
            a.append_runs(&[hr(1, 0.1)], DuplicatePolicy::Reject),
            Err(Error::Locked(_))
        ));
        drop(held);
        a.append_runs(&[hr(1, 0.1)], DuplicatePolicy::Reject).unwrap();
    }

    #[test]
    fn manifest_digests() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunArchive::open(dir.path().join("arch")).unwrap();
        let data = dir.path().join("seqs.jsonl");
        fs::write(&data, b"abc").unwrap();
        let d = a.record_dataset("toy", &data).unwrap();
        // SHA-256("abc"), FIPS 180-2 test vector
        assert_eq!(d.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let m = a.manifest().unwrap();
        assert_eq!(m.tool_version, TOOL_VERSION);
        assert!(a.verify_manifest().is_ok());
        fs::write(&data, b"abd").unwrap();
        assert!(matches!(a.verify_manifest(), Err(Error::DigestMismatch { .. })));
    }

    #[test]
    fn fits_round_trip() {
        use crate::fitting::{LawParams, SizeCovariate};
        use crate::laws::PerfLawParams;
        let dir = tempfile::tempdir().unwrap();
        let a = RunArchive::open(dir.path()).unwrap();
        let fit = FitResult {
            params: LawParams::Perf(PerfLawParams::canonical(0.1, 0.2, 0.3, 0.4, 0.5, 1.5, 2.5)),
            r_squared: Some(0.97),
            rss: 0.01,
            iterations: 40,
            converged: true,
            start_index: 0,
            points: 42,
            size_covariate: SizeCovariate::Layers,
        };
        a.save_fit("sasrec-hr", &fit).unwrap();
        assert_eq!(a.load_fit("sasrec-hr").unwrap(), fit);
        assert!(matches!(a.load_fit("missing"), Err(Error::Io { .. })));
        assert!(a.save_fit("../escape", &fit).is_err());
    }
}
