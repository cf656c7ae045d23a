//! Sequence assembly: one example becomes one token sequence
//! `[prompt][tag+stream per input modality, order A,I,L,O][BOS][target][EOS]`
//! plus a loss mask that is true exactly on target positions.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::channels::{Task, Vocabulary, BOS, PAD};
use crate::dataset::Example;

/// One loss segment: a labeled half-open position range of masked targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence {
    pub example_id: String,
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub segments: Vec<Segment>,
    /// Real length; `ids` beyond this hold PAD after batch padding and are
    /// excluded from both attention and loss.
    pub content_len: usize,
    /// Index of the BOS token; `ids[..=bos_pos]` is the decode prefix.
    pub bos_pos: usize,
}

impl AssembledSequence {
    pub fn prefix(&self) -> &[u32] {
        &self.ids[..=self.bos_pos]
    }

    pub fn target_ids(&self) -> &[u32] {
        &self.ids[self.bos_pos + 1..self.content_len]
    }
}

/// Assemble one example for a task. The prompt id encodes (task, modality
/// set); input streams always appear in the canonical A,I,L,O order.
pub fn assemble(
    example: &Example,
    task: Task,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<AssembledSequence, ModelError> {
    let mut set = crate::channels::ModalitySet::empty();
    for s in &example.streams {
        set = set.with(s.modality);
    }
    if set.mask() == 0 {
        return Err(ModelError::NoInputStreams { example_id: example.id.clone() });
    }
    if task == Task::Asr && !set.contains(crate::channels::Modality::A) {
        return Err(ModelError::MissingAudio { example_id: example.id.clone() });
    }
    let mut ids = vec![vocab.prompt_id(task, set)];
    for m in set.iter_layout() {
        let stream = example.stream(m).expect("stream present by construction");
        ids.push(vocab.tag_id(m));
        ids.extend_from_slice(&stream.ids);
    }
    let bos_pos = ids.len();
    ids.push(BOS);
    let target_start = ids.len();
    ids.extend_from_slice(&example.target.ids); // includes EOS
    let content_len = ids.len();
    if content_len > max_seq_len {
        return Err(ModelError::SequenceTooLong {
            example_id: example.id.clone(),
            len: content_len,
            max: max_seq_len,
        });
    }
    let mut loss_mask = vec![false; content_len];
    for m in loss_mask.iter_mut().take(content_len).skip(target_start) {
        *m = true;
    }
    let segments = vec![Segment { label: "T".into(), start: target_start, end: content_len }];
    Ok(AssembledSequence { example_id: example.id.clone(), ids, loss_mask, segments, content_len, bos_pos })
}

/// Pad every sequence to the batch maximum with PAD; padding is masked out
/// of the loss and, because each sequence is processed at its own
/// content_len, out of attention too.
pub fn pad_batch(batch: &mut [AssembledSequence]) {
    let max = batch.iter().map(|s| s.content_len).max().unwrap_or(0);
    for seq in batch.iter_mut() {
        seq.ids.resize(max, PAD);
        seq.loss_mask.resize(max, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{self, ChannelConfig, Modality, NoiseSpec};
    use crate::dataset::OcrVariant;
    use crate::eqgen::{generate_triple, EqConfig};

    fn example_with(mods: &[Modality]) -> Example {
        let vocab = Vocabulary::new();
        let cfg = EqConfig::default();
        let ch = ChannelConfig::default();
        let triple = generate_triple(5, &cfg);
        let mut streams = Vec::new();
        for &m in mods {
            streams.push(match m {
                Modality::A => {
                    channels::encode_audio(&triple, &vocab, ch.repeat_rate, &NoiseSpec::clean(), 1)
                }
                Modality::I => channels::encode_image(&triple, &vocab, ch.image_grid_len),
                Modality::L => channels::encode_lip(&triple, &vocab),
                Modality::O => channels::encode_ocr(&triple, &vocab, 0.0, 1, 3, &cfg).unwrap(),
                Modality::T => unreachable!(),
            });
        }
        let target = channels::encode_target(&triple, &vocab);
        Example {
            id: "t0".into(),
            triple,
            streams,
            target,
            snr_db: f64::INFINITY,
            ocr_variant: OcrVariant::Oracle3,
        }
    }

    #[test]
    fn audio_only_layout() {
        let vocab = Vocabulary::new();
        let ex = example_with(&[Modality::A]);
        let seq = assemble(&ex, Task::Asr, &vocab, 768).unwrap();
        assert_eq!(seq.ids[0], vocab.prompt_id(Task::Asr, "A".parse().unwrap()));
        assert_eq!(seq.ids[1], channels::TAG_A);
        assert_eq!(seq.ids[seq.bos_pos], BOS);
        assert_eq!(*seq.ids.last().unwrap(), channels::EOS);
        // Mask is true exactly on target positions (incl. EOS).
        let masked = seq.loss_mask.iter().filter(|&&m| m).count();
        assert_eq!(masked, ex.target.ids.len());
        assert_eq!(masked, ex.triple.transcript().split(' ').count() + 1);
    }

    #[test]
    fn tags_follow_canonical_order_regardless_of_request_order() {
        let vocab = Vocabulary::new();
        // Streams supplied in O, L, A order must still assemble as A, L, O.
        let ex = example_with(&[Modality::O, Modality::L, Modality::A]);
        let seq = assemble(&ex, Task::Asr, &vocab, 768).unwrap();
        let tags: Vec<u32> = seq
            .ids
            .iter()
            .copied()
            .filter(|&id| [channels::TAG_A, channels::TAG_I, channels::TAG_L, channels::TAG_O].contains(&id))
            .collect();
        assert_eq!(tags, vec![channels::TAG_A, channels::TAG_L, channels::TAG_O]);
    }

    #[test]
    fn overflow_names_the_example() {
        let vocab = Vocabulary::new();
        let ex = example_with(&[Modality::A, Modality::I, Modality::L, Modality::O]);
        let err = assemble(&ex, Task::Asr, &vocab, 16).unwrap_err();
        match err {
            ModelError::SequenceTooLong { example_id, max, .. } => {
                assert_eq!(example_id, "t0");
                assert_eq!(max, 16);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn prompt_distinguishes_task_and_modality_set() {
        let vocab = Vocabulary::new();
        let a = assemble(&example_with(&[Modality::A]), Task::Asr, &vocab, 768).unwrap();
        let la = assemble(&example_with(&[Modality::L, Modality::A]), Task::Asr, &vocab, 768).unwrap();
        let lip = assemble(&example_with(&[Modality::L]), Task::LipToText, &vocab, 768).unwrap();
        assert_ne!(a.ids[0], la.ids[0]);
        assert_ne!(la.ids[0], lip.ids[0]);
    }

    #[test]
    fn padding_extends_ids_and_mask_only() {
        let mut batch = vec![
            assemble(&example_with(&[Modality::A]), Task::Asr, &Vocabulary::new(), 768).unwrap(),
            assemble(
                &example_with(&[Modality::A, Modality::O]),
                Task::Asr,
                &Vocabulary::new(),
                768,
            )
            .unwrap(),
        ];
        let lens: Vec<usize> = batch.iter().map(|s| s.content_len).collect();
        pad_batch(&mut batch);
        assert_eq!(batch[0].ids.len(), batch[1].ids.len());
        for (seq, len) in batch.iter().zip(lens) {
            assert_eq!(seq.content_len, len);
            assert!(seq.ids[len..].iter().all(|&id| id == PAD));
            assert!(seq.loss_mask[len..].iter().all(|&m| !m));
        }
    }
}
