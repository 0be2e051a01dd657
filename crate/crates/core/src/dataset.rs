//! User interaction sequences and corpus statistics.
//!
//! Two on-disk formats are accepted:
//!
//! * CSV with header `user_id,items[,ratings]`, where `items` (and `ratings`)
//!   are space-separated integer lists.
//! * JSONL, one object per line: `{"user_id": "u1", "items": [5, 7], "ratings": [4, 5]}`.
//!
//! Item order is taken as given and assumed chronological.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ItemId = u64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InteractionSequence {
    user_id: String,
    items: Vec<ItemId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ratings: Option<Vec<i64>>,
}

impl InteractionSequence {
    pub fn new(user_id: impl Into<String>, items: Vec<ItemId>) -> Result<Self> {
        Self::with_ratings(user_id, items, None)
    }

    pub fn with_ratings(
        user_id: impl Into<String>,
        items: Vec<ItemId>,
        ratings: Option<Vec<i64>>,
    ) -> Result<Self> {
        let user_id = user_id.into();
        if items.is_empty() {
            return Err(Error::Invalid(format!("user {user_id}: empty item list")));
        }
        if let Some(pos) = items.iter().position(|&i| i == 0) {
            return Err(Error::Invalid(format!(
                "user {user_id}: item id at position {pos} is not positive"
            )));
        }
        if let Some(r) = &ratings {
            if r.len() != items.len() {
                return Err(Error::Invalid(format!(
                    "user {user_id}: {} ratings for {} items",
                    r.len(),
                    items.len()
                )));
            }
        }
        Ok(Self {
            user_id,
            items,
            ratings,
        })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn ratings(&self) -> Option<&[i64]> {
        self.ratings.as_deref()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceFormat {
    Csv,
    Jsonl,
}

impl FromStr for SequenceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "jsonl" | "json" => Ok(Self::Jsonl),
            other => Err(Error::Invalid(format!("unknown sequence format {other:?}"))),
        }
    }
}

/// Corpus-level counts: users, longest and mean sequence length, total
/// tokens and vocabulary size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub s_max: usize,
    pub s_mean: f64,
    pub tokens: u64,
    pub vocab: usize,
}

pub fn load_sequences(path: &Path, format: SequenceFormat) -> Result<Vec<InteractionSequence>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_sequences(&bytes, format)
}

/// Parses sequences from raw file contents. Line numbers in errors are
/// 1-based and count the header line for CSV.
pub fn parse_sequences(bytes: &[u8], format: SequenceFormat) -> Result<Vec<InteractionSequence>> {
    let seqs = match format {
        SequenceFormat::Csv => parse_csv(bytes)?,
        SequenceFormat::Jsonl => parse_jsonl(bytes)?,
    };
    if seqs.is_empty() {
        return Err(Error::NoSequences);
    }
    Ok(seqs)
}

fn parse_id_list(field: &str, what: &str, line: usize) -> Result<Vec<i64>> {
    field
        .split_ascii_whitespace()
        .map(|tok| {
            tok.parse::<i64>().map_err(|_| Error::Parse {
                line,
                message: format!("{what}: {tok:?} is not an integer"),
            })
        })
        .collect()
}

fn positive_items(raw: Vec<i64>, line: usize) -> Result<Vec<ItemId>> {
    raw.into_iter()
        .map(|v| {
            if v > 0 {
                Ok(v as ItemId)
            } else {
                Err(Error::Parse {
                    line,
                    message: format!("item id {v} is not positive"),
                })
            }
        })
        .collect()
}

fn build(
    user_id: String,
    items: Vec<ItemId>,
    ratings: Option<Vec<i64>>,
    line: usize,
    seen: &mut HashSet<String>,
) -> Result<InteractionSequence> {
    if !seen.insert(user_id.clone()) {
        return Err(Error::Parse {
            line,
            message: format!("duplicate user_id {user_id:?}"),
        });
    }
    InteractionSequence::with_ratings(user_id, items, ratings).map_err(|e| Error::Parse {
        line,
        message: match e {
            Error::Invalid(m) => m,
            other => other.to_string(),
        },
    })
}

fn parse_csv(bytes: &[u8]) -> Result<Vec<InteractionSequence>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Err(Error::NoSequences);
    }
    let names: Vec<&str> = headers.iter().collect();
    let has_ratings = match names.as_slice() {
        ["user_id", "items"] => false,
        ["user_id", "items", "ratings"] => true,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected header `user_id,items[,ratings]`, found `{}`",
                    names.join(",")
                ),
            })
        }
    };

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let user = record.get(0).unwrap_or_default().to_string();
        if user.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty user_id".into(),
            });
        }
        let items = positive_items(
            parse_id_list(record.get(1).unwrap_or_default(), "items", line)?,
            line,
        )?;
        let ratings = if has_ratings {
            let field = record.get(2).unwrap_or_default();
            if field.is_empty() {
                None
            } else {
                Some(parse_id_list(field, "ratings", line)?)
            }
        } else {
            None
        };
        out.push(build(user, items, ratings, line, &mut seen)?);
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSequence {
    user_id: String,
    items: Vec<i64>,
    #[serde(default)]
    ratings: Option<Vec<i64>>,
}

fn parse_jsonl(bytes: &[u8]) -> Result<Vec<InteractionSequence>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        message: "invalid UTF-8".into(),
    })?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row: JsonSequence = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let items = positive_items(row.items, line)?;
        out.push(build(row.user_id, items, row.ratings, line, &mut seen)?);
    }
    Ok(out)
}

pub fn write_jsonl(seqs: &[InteractionSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&serde_json::to_string(s).expect("sequence serializes"));
        out.push('\n');
    }
    out
}

pub fn write_csv(seqs: &[InteractionSequence]) -> String {
    let with_ratings = seqs.iter().any(|s| s.ratings.is_some());
    let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
    let mut out = String::from(if with_ratings {
        "user_id,items,ratings\n"
    } else {
        "user_id,items\n"
    });
    for s in seqs {
        out.push_str(&s.user_id);
        out.push(',');
        out.push_str(&join(&mut s.items.iter().map(u64::to_string)));
        if with_ratings {
            out.push(',');
            if let Some(r) = &s.ratings {
                out.push_str(&join(&mut r.iter().map(i64::to_string)));
            }
        }
        out.push('\n');
    }
    out
}

pub fn compute_stats(seqs: &[InteractionSequence]) -> Result<DatasetStats> {
    if seqs.is_empty() {
        return Err(Error::NoSequences);
    }
    let tokens: u64 = seqs.iter().map(|s| s.len() as u64).sum();
    let s_max = seqs.iter().map(InteractionSequence::len).max().unwrap_or(0);
    let vocab = seqs
        .iter()
        .flat_map(|s| s.items.iter().copied())
        .collect::<HashSet<_>>()
        .len();
    Ok(DatasetStats {
        num_users: seqs.len(),
        s_max,
        s_mean: tokens as f64 / seqs.len() as f64,
        tokens,
        vocab,
    })
}

/// Caps every sequence at `s_max` items, keeping the most recent suffix.
pub fn truncate(seqs: &[InteractionSequence], s_max: usize) -> Vec<InteractionSequence> {
    assert!(s_max >= 1, "truncation length must be positive");
    seqs.iter()
        .map(|s| {
            if s.len() <= s_max {
                return s.clone();
            }
            let start = s.len() - s_max;
            InteractionSequence {
                user_id: s.user_id.clone(),
                items: s.items[start..].to_vec(),
                ratings: s.ratings.as_ref().map(|r| r[start..].to_vec()),
            }
        })
        .collect()
}

/// Entropy (nats) of the empirical distribution over distinct whole
/// sequences, each user contributing one draw.
pub fn sequence_distribution_entropy(seqs: &[InteractionSequence]) -> f64 {
    if seqs.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&[ItemId], usize> = HashMap::new();
    for s in seqs {
        *counts.entry(s.items()).or_default() += 1;
    }
    // sorted multiplicities keep the float sum order independent of hashing
    let mut mult: Vec<usize> = counts.into_values().collect();
    mult.sort_unstable();
    let total = seqs.len() as f64;
    let h: f64 = mult
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    h.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(user: &str, items: &[u64]) -> InteractionSequence {
        InteractionSequence::new(user, items.to_vec()).unwrap()
    }

    #[test]
    fn csv_sample_counts_tokens() {
        let csv = b"user_id,items\nu1,5 7 5\nu2,7\nu3,5 5\n";
        let seqs = parse_sequences(csv, SequenceFormat::Csv).unwrap();
        assert_eq!(seqs.len(), 3);
        assert_eq!(seqs[0].items(), &[5, 7, 5]);
        let stats = compute_stats(&seqs).unwrap();
        assert_eq!(stats.tokens, 6);
        assert_eq!(stats.vocab, 2);
    }

    #[test]
    fn csv_with_ratings() {
        let csv = b"user_id,items,ratings\nu1,5 7,4 5\nu2,3,\n";
        let seqs = parse_sequences(csv, SequenceFormat::Csv).unwrap();
        assert_eq!(seqs[0].ratings(), Some(&[4, 5][..]));
        assert_eq!(seqs[1].ratings(), None);

        let bad = b"user_id,items,ratings\nu1,5 7,4\n";
        let err = parse_sequences(bad, SequenceFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(
            parse_sequences(b"", SequenceFormat::Csv),
            Err(Error::NoSequences)
        ));
        assert!(matches!(
            parse_sequences(b"user_id,items\n", SequenceFormat::Csv),
            Err(Error::NoSequences)
        ));
        assert!(matches!(
            parse_sequences(b"\n\n", SequenceFormat::Jsonl),
            Err(Error::NoSequences)
        ));
    }

    #[test]
    fn zero_item_reports_line() {
        let csv = b"user_id,items\nu1,5 7\nu2,3 0 4\n";
        match parse_sequences(csv, SequenceFormat::Csv) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("not positive"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let jsonl = b"{\"user_id\":\"a\",\"items\":[1]}\n{\"user_id\":\"b\",\"items\":[-2]}\n";
        assert!(matches!(
            parse_sequences(jsonl, SequenceFormat::Jsonl),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn malformed_rows() {
        let csv = b"user_id,items\nu1,5 x\n";
        assert!(matches!(
            parse_sequences(csv, SequenceFormat::Csv),
            Err(Error::Parse { line: 2, .. })
        ));
        let csv = b"user,items\nu1,5\n";
        assert!(matches!(
            parse_sequences(csv, SequenceFormat::Csv),
            Err(Error::Parse { line: 1, .. })
        ));
        let jsonl = b"{\"user_id\":\"a\",\"items\":[1]}\n{\"user_id\":\"b\",\"items\":[2]\n";
        assert!(matches!(
            parse_sequences(jsonl, SequenceFormat::Jsonl),
            Err(Error::Parse { line: 2, .. })
        ));
        let dup = b"user_id,items\nu1,5\nu1,6\n";
        assert!(matches!(
            parse_sequences(dup, SequenceFormat::Csv),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let seqs = vec![
            seq("a", &[3, 1, 4]),
            InteractionSequence::with_ratings("b", vec![1, 5], Some(vec![2, 3])).unwrap(),
        ];
        let text = write_jsonl(&seqs);
        assert_eq!(parse_sequences(text.as_bytes(), SequenceFormat::Jsonl).unwrap(), seqs);
        let text = write_csv(&seqs);
        assert_eq!(parse_sequences(text.as_bytes(), SequenceFormat::Csv).unwrap(), seqs);
    }

    #[test]
    fn stats_by_hand() {
        let seqs = vec![seq("a", &[1, 2, 3]), seq("b", &[1]), seq("c", &[4, 4])];
        let s = compute_stats(&seqs).unwrap();
        assert_eq!(s.num_users, 3);
        assert_eq!(s.s_max, 3);
        assert_eq!(s.s_mean, 2.0);
        assert_eq!(s.tokens, 6);
        assert_eq!(s.vocab, 4);

        let one = compute_stats(&[seq("x", &[9])]).unwrap();
        assert_eq!((one.num_users, one.s_max, one.tokens, one.vocab), (1, 1, 1, 1));
        assert!(matches!(compute_stats(&[]), Err(Error::NoSequences)));
    }

    #[test]
    fn truncate_keeps_suffix() {
        let items: Vec<u64> = (1..=10).collect();
        let seqs = vec![
            InteractionSequence::with_ratings("a", items.clone(), Some((1..=10).collect()))
                .unwrap(),
        ];
        let t = truncate(&seqs, 5);
        assert_eq!(t[0].items(), &[6, 7, 8, 9, 10]);
        assert_eq!(t[0].ratings().unwrap(), &[6, 7, 8, 9, 10]);
        assert_eq!(truncate(&seqs, 10), seqs);
        assert_eq!(truncate(&seqs, 50), seqs);
    }

    #[test]
    fn sequence_entropy_examples() {
        let same: Vec<_> = (0..5).map(|i| seq(&i.to_string(), &[1, 2])).collect();
        assert_eq!(sequence_distribution_entropy(&same), 0.0);

        let distinct: Vec<_> = (1..=4).map(|i| seq(&i.to_string(), &[i])).collect();
        assert!((sequence_distribution_entropy(&distinct) - 4f64.ln()).abs() < 1e-12);

        let mixed = vec![
            seq("a", &[1, 2]),
            seq("b", &[1, 2]),
            seq("c", &[2]),
            seq("d", &[3, 3]),
        ];
        let expected = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((sequence_distribution_entropy(&mixed) - expected).abs() < 1e-12);
        assert!((expected - 1.0397).abs() < 1e-4);
    }
}
