//! Descriptive statistics over trajectories and datasets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{judge_quality, BackendError, Judge};
use crate::dataset::{DatasetSample, ImageStore, PipelineError};
use crate::protocol::TurnOutput;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no trajectories to summarize")]
    EmptyInput,
    #[error("subset `{0}` is empty")]
    EmptySubset(String),
    #[error("subset `{subset}` has {available} sample(s), {requested} requested")]
    SubsetTooSmall { subset: String, requested: usize, available: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Image(#[from] PipelineError),
}

pub const ROUND_BUCKETS: [&str; 3] = ["1", "2", ">=3"];

/// Share of trajectories that finished after one, two, or three or more
/// turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundHistogram {
    pub total: usize,
    pub counts: [usize; 3],
    /// Trajectories with no completed turn; kept out of the buckets.
    pub skipped: usize,
}

impl RoundHistogram {
    pub fn fractions(&self) -> [f64; 3] {
        self.counts.map(|c| c as f64 / self.total as f64)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8} {:>8} {:>8}  \n", "rounds", "count", "share");
        for ((label, count), frac) in ROUND_BUCKETS.iter().zip(self.counts).zip(self.fractions()) {
            let bar = "#".repeat((frac * 40.0).round() as usize);
            out.push_str(&format!("{label:<8} {count:>8} {:>7.1}%  {bar}\n", frac * 100.0));
        }
        out.push_str(&format!("{:<8} {:>8}\n", "total", self.total));
        if self.skipped > 0 {
            out.push_str(&format!("{:<8} {:>8}\n", "skipped", self.skipped));
        }
        out
    }
}

/// Buckets trajectory lengths (turn counts). Zero-length trajectories are
/// counted as skipped.
pub fn round_distribution(lengths: &[usize]) -> Result<RoundHistogram, StatsError> {
    let mut counts = [0usize; 3];
    let mut skipped = 0;
    for &n in lengths {
        match n {
            0 => skipped += 1,
            1 => counts[0] += 1,
            2 => counts[1] += 1,
            _ => counts[2] += 1,
        }
    }
    let total = counts.iter().sum();
    if total == 0 {
        return Err(StatsError::EmptyInput);
    }
    Ok(RoundHistogram { total, counts, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub subset: String,
    pub samples: usize,
    pub logic: f64,
    pub visual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub rows: Vec<QualityRow>,
}

impl QualityReport {
    /// Subsets as rows; the two rubric dimensions and their mean as columns.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16} {:>6} {:>7} {:>7} {:>7}\n", "subset", "n", "logic", "visual", "avg");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>6} {:>7.2} {:>7.2} {:>7.2}\n",
                r.subset,
                r.samples,
                r.logic,
                r.visual,
                (r.logic + r.visual) / 2.0
            ));
        }
        out
    }
}

/// Text the judge reads for one sample.
pub fn sample_text(sample: &DatasetSample) -> String {
    match sample {
        DatasetSample::TruncatedQa { payload, .. } => format!("Question: {}\nAnswer: {}", payload.question, payload.answer),
        DatasetSample::ReflectiveChain { payload, .. } => {
            let mut out = format!("Question: {}", payload.source.question);
            for (k, round) in payload.rounds.iter().enumerate() {
                let turn = TurnOutput {
                    answer: round.answer.clone(),
                    reflection: round.reflection.clone(),
                    tool_call: Some(round.tool_call.clone()),
                    round_index: k as u32 + 1,
                };
                let text = turn.to_text().unwrap_or_else(|_| round.answer.clone());
                out.push_str(&format!("\nRound {}:\n{text}", k + 1));
            }
            out
        }
    }
}

/// The image shown with a sample: the first marked image of a chain, or
/// the original image of a QA pair.
fn sample_image(sample: &DatasetSample, store: &ImageStore) -> Result<Vec<u8>, PipelineError> {
    let reference = match sample {
        DatasetSample::TruncatedQa { payload, .. } => payload.image.as_str(),
        DatasetSample::ReflectiveChain { payload, .. } => {
            payload.marker_rounds().find_map(|r| r.image.as_deref()).unwrap_or(payload.source.image.as_str())
        }
    };
    store.load(reference)
}

/// Mean judge scores (1 to 5) per named subset. With `sample_size`, each
/// subset is scored on a seeded random sample of that size.
pub fn quality_report(
    subsets: &[(String, Vec<DatasetSample>)],
    judge: &dyn Judge,
    store: &ImageStore,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<QualityReport, StatsError> {
    let mut rows = Vec::with_capacity(subsets.len());
    for (name, samples) in subsets {
        if samples.is_empty() {
            return Err(StatsError::EmptySubset(name.clone()));
        }
        let mut picked: Vec<&DatasetSample> = samples.iter().collect();
        if let Some(k) = sample_size {
            if k > samples.len() {
                return Err(StatsError::SubsetTooSmall { subset: name.clone(), requested: k, available: samples.len() });
            }
            picked.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            picked.truncate(k);
        }
        let (mut logic, mut visual) = (0u64, 0u64);
        for sample in &picked {
            let image = sample_image(sample, store)?;
            let q = judge_quality(judge, &sample_text(sample), Some(&image))?;
            logic += q.logic as u64;
            visual += q.visual as u64;
        }
        let n = picked.len() as f64;
        rows.push(QualityRow { subset: name.clone(), samples: picked.len(), logic: logic as f64 / n, visual: visual as f64 / n });
    }
    Ok(QualityReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockJudge;
    use crate::dataset::{Domain, Provenance, TruncatedQa};

    #[test]
    fn histogram_examples() {
        let h = round_distribution(&[1, 1, 2, 3]).unwrap();
        assert_eq!(h.fractions(), [0.5, 0.25, 0.25]);
        assert_eq!(round_distribution(&[1, 1, 1]).unwrap().fractions(), [1.0, 0.0, 0.0]);
        assert!(matches!(round_distribution(&[]), Err(StatsError::EmptyInput)));
        assert!(matches!(round_distribution(&[0]), Err(StatsError::EmptyInput)));
        let h = round_distribution(&[0, 5]).unwrap();
        assert_eq!((h.total, h.skipped, h.counts), (1, 1, [0, 0, 1]));
        let table = round_distribution(&[1, 1, 2, 3]).unwrap().to_table();
        assert!(table.contains("50.0%"));
        assert!(table.contains(">=3"));
    }

    fn qa(id: &str, answer: &str) -> DatasetSample {
        DatasetSample::TruncatedQa {
            payload: TruncatedQa { image: "i.png".into(), question: "q".into(), answer: answer.into(), domain: Domain::Ocr },
            provenance: Provenance { record_id: id.into(), decisions: vec![] },
        }
    }

    #[test]
    fn quality_means_per_subset() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("i.png"), b"png").unwrap();
        let store = ImageStore::at(dir.path());
        let judge = MockJudge::new().with_quality("clean", 5, 5).with_quality("noise", 1, 1);
        let subsets = vec![
            ("clean".to_string(), (0..4).map(|i| qa(&i.to_string(), "clean answer")).collect()),
            ("noise".to_string(), (0..3).map(|i| qa(&i.to_string(), "noise answer")).collect()),
        ];
        let report = quality_report(&subsets, &judge, &store, None, 0).unwrap();
        assert_eq!((report.rows[0].logic, report.rows[0].visual), (5.0, 5.0));
        assert_eq!((report.rows[1].logic, report.rows[1].visual), (1.0, 1.0));
        assert!(report.to_table().contains("clean"));

        let sampled = quality_report(&subsets, &judge, &store, Some(2), 9).unwrap();
        assert_eq!(sampled.rows[0].samples, 2);
        assert!(matches!(
            quality_report(&subsets, &judge, &store, Some(4), 9),
            Err(StatsError::SubsetTooSmall { requested: 4, available: 3, .. })
        ));
        let empty = vec![("none".to_string(), vec![])];
        assert!(matches!(quality_report(&empty, &judge, &store, None, 0), Err(StatsError::EmptySubset(_))));
    }
}
