//! Text normalization, word error rate, and relative-benefit reporting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("WER is undefined for an empty reference")]
    EmptyReference,
}

/// Lowercase, strip everything outside [a-z0-9] to spaces, collapse runs of
/// spaces, trim, split. Idempotent.
pub fn normalize_text(s: &str) -> Vec<String> {
    let cleaned: String = s
        .chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            if c.is_ascii_lowercase() || c.is_ascii_digit() {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().map(|w| w.to_string()).collect()
}

/// Word-level Levenshtein distance with unit substitution/insertion/deletion
/// costs. Two rolling rows keep it O(min) memory.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Word error rate: edit distance divided by reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Relative WER benefit of adding modality X to the audio-only baseline:
/// (WER_A - WER_{X+A}) / WER_A. Positive means X helped. Undefined (None)
/// when the baseline WER is zero.
pub fn relative_benefit(wer_a: f64, wer_xa: f64) -> Option<f64> {
    if wer_a <= 0.0 {
        None
    } else {
        Some((wer_a - wer_xa) / wer_a)
    }
}

/// Running corpus totals: WER is pooled (total edits over total reference
/// words), not the mean of per-utterance rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusTally {
    pub edits: usize,
    pub ref_words: usize,
    pub utterances: usize,
}

impl CorpusTally {
    pub fn add(&mut self, edits: usize, ref_words: usize) {
        self.edits += edits;
        self.ref_words += ref_words;
        self.utterances += 1;
    }

    pub fn merge(&mut self, other: &CorpusTally) {
        self.edits += other.edits;
        self.ref_words += other.ref_words;
        self.utterances += other.utterances;
    }

    pub fn wer(&self) -> Result<f64, EvalError> {
        if self.ref_words == 0 {
            return Err(EvalError::EmptyReference);
        }
        Ok(self.edits as f64 / self.ref_words as f64)
    }
}

/// Score one (reference, hypothesis) pair after normalization; returns the
/// (edits, reference length) cell that pooled WER aggregates.
pub fn score_pair(reference: &str, hypothesis: &str) -> Result<(usize, usize), EvalError> {
    let r = normalize_text(reference);
    let h = normalize_text(hypothesis);
    if r.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok((edit_distance(&r, &h), r.len()))
}

/// Errors from the end-to-end evaluation path (decode + score).
#[derive(Debug, thiserror::Error)]
pub enum EvalRunError {
    #[error(transparent)]
    Score(#[from] EvalError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// One (configuration, SNR) cell of an evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCell {
    pub config: String,
    pub snr_db: crate::dataset::Snr,
    pub wer: f64,
    pub edits: usize,
    pub ref_words: usize,
    pub utterances: usize,
}

/// Per-configuration evaluation over an SNR grid plus grid-average WER and
/// relative benefit against the audio-only baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalCell>,
}

impl EvalReport {
    pub fn wer_at(&self, config: &str, snr_db: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.config == config && r.snr_db.0.to_bits() == snr_db.to_bits())
            .map(|r| r.wer)
    }

    /// Unweighted mean WER of one config over every grid SNR present.
    pub fn avg_wer(&self, config: &str) -> Option<f64> {
        let cells: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.config == config)
            .map(|r| r.wer)
            .collect();
        if cells.is_empty() {
            None
        } else {
            Some(cells.iter().sum::<f64>() / cells.len() as f64)
        }
    }

    /// Per-cell benefit of `config` against `baseline` at the same SNR.
    pub fn benefit_at(&self, baseline: &str, config: &str, snr_db: f64) -> Option<f64> {
        relative_benefit(self.wer_at(baseline, snr_db)?, self.wer_at(config, snr_db)?)
    }

    /// Average benefit computed from grid-averaged WERs (the alternative,
    /// averaging per-cell benefits, is deliberately not used here).
    pub fn avg_benefit(&self, baseline: &str, config: &str) -> Option<f64> {
        relative_benefit(self.avg_wer(baseline)?, self.avg_wer(config)?)
    }
}

/// Decode and score one modality configuration over the whole SNR grid on
/// the test split: corpus WER per SNR (pooled edits over pooled reference
/// words), one report row per grid point.
pub fn evaluate(
    model: &crate::model::Model,
    dataset_dir: &std::path::Path,
    config_label: &str,
    modalities: crate::channels::ModalitySet,
    ocr_variant: crate::dataset::OcrVariant,
    max_new: usize,
) -> Result<Vec<EvalCell>, EvalRunError> {
    use rayon::prelude::*;
    let vocab = crate::channels::Vocabulary::new();
    let mut rows = Vec::new();
    for &snr in crate::dataset::SNR_GRID.iter() {
        let examples = crate::dataset::load_examples(
            dataset_dir,
            crate::dataset::Split::Test,
            Some(snr),
            modalities,
            ocr_variant,
        )?;
        let seqs: Result<Vec<_>, crate::model::ModelError> = examples
            .iter()
            .map(|ex| {
                crate::model::assemble(ex, crate::channels::Task::Asr, &vocab, model.config.max_seq_len)
                    .map(|s| (s, ex.reference()))
            })
            .collect();
        let seqs = seqs?;
        let cells: Result<Vec<(usize, usize)>, EvalRunError> = seqs
            .par_iter()
            .map(|(seq, reference)| {
                let ids = model.greedy_decode(seq.prefix(), max_new)?;
                let hyp = vocab.decode_words(&ids);
                Ok(score_pair(reference, &hyp)?)
            })
            .collect();
        let mut tally = CorpusTally::default();
        for (edits, refs) in cells? {
            tally.add(edits, refs);
        }
        rows.push(EvalCell {
            config: config_label.to_string(),
            snr_db: crate::dataset::Snr(snr),
            wer: tally.wer()?,
            edits: tally.edits,
            ref_words: tally.ref_words,
            utterances: tally.utterances,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalizer_examples() {
        assert_eq!(normalize_text("Hello,  World!"), vec!["hello", "world"]);
        assert_eq!(normalize_text("Three PLUS five"), vec!["three", "plus", "five"]);
        assert_eq!(normalize_text(""), Vec::<String>::new());
    }

    #[test]
    fn normalizer_is_idempotent() {
        for s in ["Hello,  World!", "a-b_c 12 x!", "  ", "MiXeD 0cAsE\t\ntabs"] {
            let once = normalize_text(s);
            let twice = normalize_text(&once.join(" "));
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn wer_examples() {
        let a = |s: &str| -> Vec<String> { s.split_whitespace().map(String::from).collect() };
        assert_eq!(wer(&a("a b c"), &a("a b c")).unwrap(), 0.0);
        assert!((wer(&a("a b c"), &a("a x c")).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer(&a("a b"), &a("")).unwrap(), 1.0);
        assert_eq!(wer(&a("a"), &a("a b")).unwrap(), 1.0);
        assert_eq!(wer::<String>(&[], &a("x")), Err(EvalError::EmptyReference));
    }

    #[test]
    fn corpus_wer_pools_edits_not_rates() {
        let mut tally = CorpusTally::default();
        tally.add(1, 3);
        tally.add(0, 3);
        assert!((tally.wer().unwrap() - 1.0 / 6.0).abs() < 1e-12);
        // Mean of per-utterance WERs would be 1/6 here too; make the cases
        // diverge to pin the pooled definition.
        let mut t2 = CorpusTally::default();
        t2.add(1, 1);
        t2.add(0, 9);
        assert!((t2.wer().unwrap() - 0.1).abs() < 1e-12); // mean of rates would be 0.5
    }

    #[test]
    fn benefit_examples_and_sign_convention() {
        assert!((relative_benefit(0.50, 0.40).unwrap() - 0.20).abs() < 1e-12);
        assert!((relative_benefit(0.50, 0.55).unwrap() + 0.10).abs() < 1e-12);
        assert_eq!(relative_benefit(0.0, 0.1), None);
        // Positive benefit means the added modality reduced WER.
        assert!(relative_benefit(0.5, 0.3).unwrap() > 0.0);
    }

    #[test]
    fn benefit_is_scale_invariant() {
        for k in [0.1, 0.5, 2.0, 7.3] {
            let b1 = relative_benefit(0.4, 0.3).unwrap();
            let b2 = relative_benefit(0.4 * k, 0.3 * k).unwrap();
            assert!((b1 - b2).abs() < 1e-12);
        }
    }

    /// Exponential-time reference: the textbook recursive definition.
    fn edit_distance_recursive(r: &[u8], h: &[u8]) -> usize {
        match (r, h) {
            ([], h) => h.len(),
            (r, []) => r.len(),
            (r, h) => {
                let cost = usize::from(r[0] != h[0]);
                (edit_distance_recursive(&r[1..], &h[1..]) + cost)
                    .min(edit_distance_recursive(&r[1..], h) + 1)
                    .min(edit_distance_recursive(r, &h[1..]) + 1)
            }
        }
    }

    #[test]
    fn dp_matches_exhaustive_recursion_up_to_length_four() {
        // All sequences of length 0..=4 over a 3-symbol alphabet, both sides.
        let mut seqs: Vec<Vec<u8>> = vec![vec![]];
        for _ in 0..4 {
            let mut next = Vec::new();
            for s in &seqs {
                if s.len() == seqs.iter().map(|x| x.len()).max().unwrap() {
                    for c in 0..3u8 {
                        let mut t = s.clone();
                        t.push(c);
                        next.push(t);
                    }
                }
            }
            seqs.extend(next);
        }
        assert_eq!(seqs.len(), 1 + 3 + 9 + 27 + 81);
        for r in &seqs {
            for h in &seqs {
                assert_eq!(
                    edit_distance(r, h),
                    edit_distance_recursive(r, h),
                    "mismatch for {r:?} vs {h:?}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn wer_bounds_hold(r in proptest::collection::vec(0u8..3, 1..8),
                           h in proptest::collection::vec(0u8..3, 0..8)) {
            let w = wer(&r, &h).unwrap();
            prop_assert!(w >= 0.0);
            prop_assert!(w <= r.len().max(h.len()) as f64 / r.len() as f64);
            prop_assert_eq!(wer(&r, &r).unwrap(), 0.0);
        }

        #[test]
        fn normalize_output_is_clean(s in ".*") {
            for w in normalize_text(&s) {
                prop_assert!(w.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit()));
                prop_assert!(!w.is_empty());
            }
        }
    }
}
