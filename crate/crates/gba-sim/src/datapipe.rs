//! Synthetic pair generation for training plus the image-text pair cleaning
//! and augmentation-routing rules as exact predicates.
//!
//! Cleaning order: structural drops first (caption shorter than 5 characters,
//! aspect ratio above 3), then score routing (similarity >= threshold keeps
//! the record, below routes it to the rewrite queue). The score boundary is
//! inclusive on the keep side.

use crate::error::{Result, SimError};
use crate::numerics::{Matrix, Rng};
use serde::{Deserialize, Serialize};

pub const MIN_CAPTION_CHARS: u64 = 5;
pub const MAX_ASPECT_RATIO: f64 = 3.0;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Language {
    En,
    Cn,
}

/// One image-text pair's metadata flowing through the cleaning pipeline.
/// Caption length is counted in displayed characters (code points) so the
/// 5-character floor covers CJK captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub caption_length: u64,
    pub aspect_ratio: f64,
    pub sim_score: f64,
    pub lang: Language,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
}

impl PairRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.aspect_ratio > 0.0) {
            return Err(SimError::InvalidArgument {
                arg: "aspect_ratio",
                reason: format!("must be positive, got {}", self.aspect_ratio),
            });
        }
        if !(-1.0..=1.0).contains(&self.sim_score) {
            return Err(SimError::InvalidArgument {
                arg: "sim_score",
                reason: format!("must lie in [-1, 1], got {}", self.sim_score),
            });
        }
        Ok(())
    }
}

/// Outcome of one cleaning pass. kept, the two drop classes, and the rewrite
/// queue partition the input.
#[derive(Debug, Clone, Default)]
pub struct CleanReport {
    pub kept: Vec<PairRecord>,
    pub dropped_short_text: u64,
    pub dropped_aspect: u64,
    pub rewrite_queue: Vec<PairRecord>,
    /// (language, kept count) tallies.
    pub kept_per_lang: Vec<(Language, u64)>,
}

impl CleanReport {
    pub fn input_size(&self) -> u64 {
        self.kept.len() as u64
            + self.dropped_short_text
            + self.dropped_aspect
            + self.rewrite_queue.len() as u64
    }
}

/// Partition records per the cleaning rules, preserving input order within
/// each partition.
pub fn clean(records: &[PairRecord], threshold: f64) -> CleanReport {
    let mut report = CleanReport::default();
    let mut kept_en = 0u64;
    let mut kept_cn = 0u64;
    for rec in records {
        if rec.caption_length < MIN_CAPTION_CHARS {
            report.dropped_short_text += 1;
        } else if rec.aspect_ratio > MAX_ASPECT_RATIO {
            report.dropped_aspect += 1;
        } else if rec.sim_score >= threshold {
            match rec.lang {
                Language::En => kept_en += 1,
                Language::Cn => kept_cn += 1,
            }
            report.kept.push(rec.clone());
        } else {
            report.rewrite_queue.push(rec.clone());
        }
    }
    report.kept_per_lang = vec![(Language::En, kept_en), (Language::Cn, kept_cn)];
    report
}

/// Pluggable caption transformer standing in for a caption-rewriting model.
/// Implementations return the revised record with a re-scored similarity.
pub trait Rewriter {
    fn rewrite(&self, record: &PairRecord) -> std::result::Result<PairRecord, String>;
}

/// Default stub: caption fields unchanged, score re-emitted as-is.
pub struct IdentityRewriter;

impl Rewriter for IdentityRewriter {
    fn rewrite(&self, record: &PairRecord) -> std::result::Result<PairRecord, String> {
        Ok(record.clone())
    }
}

#[derive(Debug, Clone)]
pub enum RewriteOutcome {
    Rewritten(PairRecord),
    /// Rewriter failed; the record stays in the queue with the error noted.
    Failed {
        record: PairRecord,
        error: String,
    },
}

pub fn rewrite_stub(record: &PairRecord, rewriter: &dyn Rewriter) -> RewriteOutcome {
    match rewriter.rewrite(record) {
        Ok(rec) => RewriteOutcome::Rewritten(rec),
        Err(error) => RewriteOutcome::Failed {
            record: record.clone(),
            error,
        },
    }
}

/// Parse line-delimited JSON records. Line numbers are 1-based in errors.
pub fn parse_records(input: &str) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: PairRecord =
            serde_json::from_str(line).map_err(|e| SimError::MalformedRecord {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        rec.validate().map_err(|e| SimError::MalformedRecord {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn records_to_jsonl(records: &[PairRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// Parameters for a separable synthetic retrieval task.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticTask {
    pub n_pairs: usize,
    pub d_in: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs < 2 {
            return Err(SimError::InvalidArgument {
                arg: "n_pairs",
                reason: format!("need at least 2 pairs, got {}", self.n_pairs),
            });
        }
        if self.noise_std < 0.0 {
            return Err(SimError::InvalidArgument {
                arg: "noise_std",
                reason: format!("must be non-negative, got {}", self.noise_std),
            });
        }
        Ok(())
    }
}

/// Raw paired input features before encoding. Row i of each side belongs to
/// the same pair.
#[derive(Debug, Clone)]
pub struct RawPairs {
    pub img: Matrix,
    pub txt: Matrix,
}

impl RawPairs {
    pub fn len(&self) -> usize {
        self.img.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, start: usize, count: usize) -> RawPairs {
        RawPairs {
            img: self.img.slice_rows(start, count),
            txt: self.txt.slice_rows(start, count),
        }
    }
}

/// Anchor vectors with the image side equal to the anchor and the text side
/// the anchor plus isotropic gaussian noise.
pub fn synth_pairs(task: &SyntheticTask) -> Result<RawPairs> {
    task.validate()?;
    let mut rng = Rng::from_seed(task.seed);
    let anchors = rng.gaussian(task.n_pairs, task.d_in, 1.0)?;
    let txt = if task.noise_std > 0.0 {
        let noise = rng.gaussian(task.n_pairs, task.d_in, task.noise_std)?;
        anchors.add(&noise)?
    } else {
        anchors.clone()
    };
    Ok(RawPairs { img: anchors, txt })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, len: u64, aspect: f64, score: f64) -> PairRecord {
        PairRecord {
            id: id.to_string(),
            caption_length: len,
            aspect_ratio: aspect,
            sim_score: score,
            lang: Language::En,
            payload: None,
        }
    }

    #[test]
    fn clean_drops_short_text() {
        let report = clean(&[rec("a", 3, 1.0, 0.9)], DEFAULT_SCORE_THRESHOLD);
        assert_eq!(report.dropped_short_text, 1);
        assert!(report.kept.is_empty());
    }

    #[test]
    fn clean_boundary_cases_kept() {
        // length exactly 5, aspect exactly 3, score exactly 0.25: all kept
        let report = clean(&[rec("b", 5, 3.0, 0.25)], DEFAULT_SCORE_THRESHOLD);
        assert_eq!(report.kept.len(), 1);
        assert_eq!(report.input_size(), 1);
    }

    #[test]
    fn clean_routes_low_score_to_rewrite() {
        let report = clean(&[rec("c", 20, 1.0, 0.20)], DEFAULT_SCORE_THRESHOLD);
        assert_eq!(report.rewrite_queue.len(), 1);
        assert!(report.kept.is_empty());
    }

    #[test]
    fn clean_structural_drop_precedes_score_routing() {
        // short caption with low score counts as a text drop, not a rewrite
        let report = clean(&[rec("d", 2, 1.0, 0.1)], DEFAULT_SCORE_THRESHOLD);
        assert_eq!(report.dropped_short_text, 1);
        assert!(report.rewrite_queue.is_empty());
    }

    #[test]
    fn clean_partition_counts_sum() {
        let records: Vec<PairRecord> = (0..50)
            .map(|i| {
                rec(
                    &format!("r{i}"),
                    (i % 10) as u64,
                    0.5 + (i % 7) as f64 * 0.5,
                    -1.0 + (i as f64) * 0.04,
                )
            })
            .collect();
        let report = clean(&records, DEFAULT_SCORE_THRESHOLD);
        assert_eq!(report.input_size(), 50);
    }

    #[test]
    fn clean_idempotent_on_kept() {
        let records: Vec<PairRecord> = (0..40)
            .map(|i| {
                rec(
                    &format!("r{i}"),
                    2 + i as u64,
                    1.0 + (i % 5) as f64,
                    -0.5 + i as f64 * 0.04,
                )
            })
            .collect();
        let first = clean(&records, DEFAULT_SCORE_THRESHOLD);
        let second = clean(&first.kept, DEFAULT_SCORE_THRESHOLD);
        assert_eq!(second.kept, first.kept);
        assert_eq!(second.dropped_short_text, 0);
        assert_eq!(second.dropped_aspect, 0);
        assert!(second.rewrite_queue.is_empty());
    }

    #[test]
    fn clean_order_insensitive_counts() {
        let records: Vec<PairRecord> = (0..30)
            .map(|i| {
                rec(
                    &format!("r{i}"),
                    i as u64,
                    1.0 + (i % 4) as f64,
                    -1.0 + i as f64 * 0.06,
                )
            })
            .collect();
        let mut reversed = records.clone();
        reversed.reverse();
        let a = clean(&records, DEFAULT_SCORE_THRESHOLD);
        let b = clean(&reversed, DEFAULT_SCORE_THRESHOLD);
        assert_eq!(a.kept.len(), b.kept.len());
        assert_eq!(a.dropped_short_text, b.dropped_short_text);
        assert_eq!(a.dropped_aspect, b.dropped_aspect);
        assert_eq!(a.rewrite_queue.len(), b.rewrite_queue.len());
    }

    #[test]
    fn identity_rewrite_roundtrip() {
        let r = rec("e", 10, 1.0, 0.1);
        match rewrite_stub(&r, &IdentityRewriter) {
            RewriteOutcome::Rewritten(out) => assert_eq!(out, r),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rewriter_raising_score_becomes_keepable() {
        struct Boost;
        impl Rewriter for Boost {
            fn rewrite(&self, record: &PairRecord) -> std::result::Result<PairRecord, String> {
                let mut out = record.clone();
                out.sim_score = 0.9;
                Ok(out)
            }
        }
        let first = clean(&[rec("f", 10, 1.0, 0.1)], DEFAULT_SCORE_THRESHOLD);
        assert_eq!(first.rewrite_queue.len(), 1);
        let rewritten: Vec<PairRecord> = first
            .rewrite_queue
            .iter()
            .map(|r| match rewrite_stub(r, &Boost) {
                RewriteOutcome::Rewritten(out) => out,
                RewriteOutcome::Failed { .. } => panic!("boost cannot fail"),
            })
            .collect();
        let second = clean(&rewritten, DEFAULT_SCORE_THRESHOLD);
        assert_eq!(second.kept.len(), 1);
    }

    #[test]
    fn reclean_of_rewrites_never_increases_drops() {
        let records: Vec<PairRecord> = (0..100)
            .map(|i| {
                rec(
                    &format!("r{i}"),
                    3 + (i % 12) as u64,
                    0.5 + (i % 8) as f64 * 0.5,
                    -1.0 + i as f64 * 0.02,
                )
            })
            .collect();
        let first = clean(&records, DEFAULT_SCORE_THRESHOLD);
        let rewritten: Vec<PairRecord> = first
            .rewrite_queue
            .iter()
            .map(|r| match rewrite_stub(r, &IdentityRewriter) {
                RewriteOutcome::Rewritten(out) => out,
                RewriteOutcome::Failed { .. } => unreachable!(),
            })
            .collect();
        let second = clean(&rewritten, DEFAULT_SCORE_THRESHOLD);
        // queue members already passed the structural gates
        assert_eq!(second.dropped_short_text, 0);
        assert_eq!(second.dropped_aspect, 0);
    }

    #[test]
    fn failed_rewrite_keeps_record() {
        struct Broken;
        impl Rewriter for Broken {
            fn rewrite(&self, _: &PairRecord) -> std::result::Result<PairRecord, String> {
                Err("model unavailable".to_string())
            }
        }
        let r = rec("g", 10, 1.0, 0.1);
        match rewrite_stub(&r, &Broken) {
            RewriteOutcome::Failed { record, error } => {
                assert_eq!(record, r);
                assert!(error.contains("unavailable"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_reports_line_number() {
        let input = "{\"id\":\"a\",\"caption_length\":9,\"aspect_ratio\":1.0,\"sim_score\":0.5,\"lang\":\"EN\"}\nnot json\n";
        match parse_records(input) {
            Err(SimError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let records = vec![rec("a", 9, 1.5, 0.5), rec("b", 12, 2.0, -0.2)];
        let parsed = parse_records(&records_to_jsonl(&records)).unwrap();
        assert_eq!(parsed, records);
    }

    #[test]
    fn synth_zero_noise_identical_sides() {
        let task = SyntheticTask {
            n_pairs: 8,
            d_in: 4,
            noise_std: 0.0,
            seed: 5,
        };
        let pairs = synth_pairs(&task).unwrap();
        assert_eq!(pairs.img, pairs.txt);
    }

    #[test]
    fn synth_deterministic_per_seed() {
        let task = SyntheticTask {
            n_pairs: 8,
            d_in: 4,
            noise_std: 0.1,
            seed: 5,
        };
        let a = synth_pairs(&task).unwrap();
        let b = synth_pairs(&task).unwrap();
        assert_eq!(a.img, b.img);
        assert_eq!(a.txt, b.txt);
    }

    #[test]
    fn synth_low_noise_is_separable_by_cosine() {
        let task = SyntheticTask {
            n_pairs: 64,
            d_in: 16,
            noise_std: 0.01,
            seed: 77,
        };
        let pairs = synth_pairs(&task).unwrap();
        // brute-force nearest neighbor by cosine must recover the pairing
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        for i in 0..64 {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for j in 0..64 {
                let s = cos(pairs.img.row(i), pairs.txt.row(j));
                if s > best_sim {
                    best_sim = s;
                    best = j;
                }
            }
            assert_eq!(best, i);
        }
    }

    #[test]
    fn synth_rejects_bad_task() {
        assert!(synth_pairs(&SyntheticTask {
            n_pairs: 1,
            d_in: 4,
            noise_std: 0.0,
            seed: 0
        })
        .is_err());
    }
}
