//! Example assembly, train/dev/test splits, persistence, and the frequency
//! filter for OCR words.
//!
//! Records are stored one JSON object per line with a fixed field order, so
//! rebuilding a dataset with the same seed is byte-identical. Audio noise and
//! OCR variants are re-derivable on demand from (dataset seed, example id,
//! requested SNR/variant), which avoids storing nine noisy copies of every
//! split.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{
    self, ChannelConfig, Modality, ModalitySet, NoiseSpec, Span, TokenStream, Vocabulary,
};
use crate::eqgen::{generate_triple, EqConfig, Equation, EquationTriple};
use crate::util::{derive_seed, fnv1a64};

/// The 9-level SNR schedule used for training augmentation and evaluation.
pub const SNR_GRID: [f64; 9] = [
    f64::INFINITY,
    20.0,
    10.0,
    5.0,
    0.0,
    -5.0,
    -10.0,
    -20.0,
    f64::NEG_INFINITY,
];

/// The finite part of the grid (used for sweet-spot argmax checks).
pub const SNR_GRID_FINITE: [f64; 7] = [20.0, 10.0, 5.0, 0.0, -5.0, -10.0, -20.0];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad record on line {line} of {path}: {message}")]
    BadRecord { path: PathBuf, line: usize, message: String },
    #[error("split ratios {0:?} must be positive and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("need at least 10 examples, got {0}")]
    TooFewExamples(usize),
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error("OCR stream requested but variant is `none`")]
    MissingOcrVariant,
    #[error(transparent)]
    Channel(#[from] channels::ChannelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// SNR value with the file representation the record format pins down:
/// a JSON number when finite, the strings "inf"/"-inf" otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snr(pub f64);

impl Serialize for Snr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else if self.0 == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Snr(v)),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(Snr(f64::INFINITY)),
                "-inf" => Ok(Snr(f64::NEG_INFINITY)),
                other => other
                    .parse::<f64>()
                    .map(Snr)
                    .map_err(|_| serde::de::Error::custom(format!("bad snr {other:?}"))),
            },
        }
    }
}

/// Serialize an SNR for use in file names and seed labels.
pub fn snr_label(snr: f64) -> String {
    if snr == f64::INFINITY {
        "inf".into()
    } else if snr == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{snr}")
    }
}

/// Which OCR rendering an example carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OcrVariant {
    None,
    Real,
    Oracle3,
    Oracle10,
    Filtered(usize),
}

impl OcrVariant {
    pub fn label(&self) -> String {
        match self {
            OcrVariant::None => "none".into(),
            OcrVariant::Real => "real".into(),
            OcrVariant::Oracle3 => "oracle3".into(),
            OcrVariant::Oracle10 => "oracle10".into(),
            OcrVariant::Filtered(k) => format!("filtered{k}"),
        }
    }
}

impl std::str::FromStr for OcrVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(OcrVariant::None),
            "real" => Ok(OcrVariant::Real),
            "oracle3" => Ok(OcrVariant::Oracle3),
            "oracle10" => Ok(OcrVariant::Oracle10),
            other => {
                if let Some(k) = other.strip_prefix("filtered") {
                    k.parse::<usize>()
                        .map(OcrVariant::Filtered)
                        .map_err(|_| format!("bad filtered K in {other:?}"))
                } else {
                    Err(format!("unknown ocr variant {other:?}"))
                }
            }
        }
    }
}

impl TryFrom<String> for OcrVariant {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<OcrVariant> for String {
    fn from(v: OcrVariant) -> String {
        v.label()
    }
}

/// One dataset example as used in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub triple: EquationTriple,
    /// Input streams in canonical layout order (A, I, L, O), only those
    /// requested or stored.
    pub streams: Vec<TokenStream>,
    pub target: TokenStream,
    pub snr_db: f64,
    pub ocr_variant: OcrVariant,
}

impl Example {
    pub fn stream(&self, m: Modality) -> Option<&TokenStream> {
        self.streams.iter().find(|s| s.modality == m)
    }

    /// Normalized reference transcript for scoring.
    pub fn reference(&self) -> String {
        self.triple.transcript()
    }
}

fn spans_to_triples(spans: &[Span]) -> Vec<(usize, usize, usize)> {
    spans.iter().map(|s| (s.equation_index, s.start, s.end)).collect()
}

fn spans_from_triples(spans: &[(usize, usize, usize)]) -> Vec<Span> {
    spans
        .iter()
        .map(|&(equation_index, start, end)| Span { equation_index, start, end })
        .collect()
}

/// On-disk record. Field order is the file format contract.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Record {
    id: String,
    snr_db: Snr,
    spoken_indices: [usize; 2],
    equations: Vec<Equation>,
    tokens_a: Vec<u32>,
    spans_a: Vec<(usize, usize, usize)>,
    tokens_i: Vec<u32>,
    spans_i: Vec<(usize, usize, usize)>,
    tokens_l: Vec<u32>,
    spans_l: Vec<(usize, usize, usize)>,
    tokens_o: Vec<u32>,
    spans_o: Vec<(usize, usize, usize)>,
    tokens_t: Vec<u32>,
    spans_t: Vec<(usize, usize, usize)>,
    ocr_variant: OcrVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn file_name(&self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Dev => "dev.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_examples: usize,
    pub split_counts: [usize; 3],
    pub split_ratios: [f64; 3],
    pub snr_schedule: Vec<Snr>,
    pub eq_config: EqConfig,
    pub channel_config: ChannelConfig,
    pub vocab_hash: String,
    pub config_hash: String,
}

pub const FORMAT_VERSION: u32 = 1;

/// Number of examples per split: dev and test round down, train absorbs the
/// remainder, so ratios (0.8, 0.1, 0.1) on 10000 give 8000/1000/1000.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], DatasetError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidRatios(ratios));
    }
    let dev = (n as f64 * ratios[1]).floor() as usize;
    let test = (n as f64 * ratios[2]).floor() as usize;
    Ok([n - dev - test, dev, test])
}

fn audio_noise_seed(dataset_seed: u64, id: &str, snr_db: f64) -> u64 {
    derive_seed(dataset_seed, &format!("{id}|audio-noise|{}", snr_label(snr_db)))
}

fn ocr_seed(dataset_seed: u64, id: &str) -> u64 {
    derive_seed(dataset_seed, &format!("{id}|ocr"))
}

/// Build all streams of one example for the given noise/variant settings.
fn materialize(
    triple: &EquationTriple,
    id: &str,
    dataset_seed: u64,
    snr_db: f64,
    modalities: ModalitySet,
    variant: OcrVariant,
    vocab: &Vocabulary,
    eq_cfg: &EqConfig,
    ch_cfg: &ChannelConfig,
    fq_table: &FrequencyTable,
) -> Result<Vec<TokenStream>, DatasetError> {
    let mut streams = Vec::new();
    for m in modalities.iter_layout() {
        let stream = match m {
            Modality::A => channels::encode_audio(
                triple,
                vocab,
                ch_cfg.repeat_rate,
                &NoiseSpec::second_half(snr_db),
                audio_noise_seed(dataset_seed, id, snr_db),
            ),
            Modality::I => channels::encode_image(triple, vocab, ch_cfg.image_grid_len),
            Modality::L => channels::encode_lip(triple, vocab),
            Modality::O => match variant {
                OcrVariant::None => return Err(DatasetError::MissingOcrVariant),
                OcrVariant::Real => channels::encode_ocr(
                    triple,
                    vocab,
                    ch_cfg.ocr_char_error_rate,
                    ocr_seed(dataset_seed, id),
                    3,
                    eq_cfg,
                )?,
                OcrVariant::Oracle3 => {
                    channels::encode_ocr(triple, vocab, 0.0, ocr_seed(dataset_seed, id), 3, eq_cfg)?
                }
                OcrVariant::Oracle10 => {
                    channels::encode_ocr(triple, vocab, 0.0, ocr_seed(dataset_seed, id), 10, eq_cfg)?
                }
                OcrVariant::Filtered(k) => encode_ocr_filtered(
                    triple,
                    vocab,
                    ocr_seed(dataset_seed, id),
                    k,
                    fq_table,
                    eq_cfg,
                )?,
            },
            Modality::T => unreachable!(),
        };
        streams.push(stream);
    }
    Ok(streams)
}

/// Build and persist a dataset. Deterministic: the same arguments produce
/// byte-identical files.
pub fn build_dataset(
    out_dir: &Path,
    n_examples: usize,
    seed: u64,
    eq_cfg: &EqConfig,
    ch_cfg: &ChannelConfig,
    split_ratios: [f64; 3],
) -> Result<DatasetManifest, DatasetError> {
    if n_examples < 10 {
        return Err(DatasetError::TooFewExamples(n_examples));
    }
    let counts = split_counts(n_examples, split_ratios)?;
    let vocab = Vocabulary::new();
    let fq = FrequencyTable::bundled();

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut triple_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "triples"));
    let mut snr_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "snr-schedule"));

    let mut writers: Vec<(Split, std::io::BufWriter<fs::File>)> = [Split::Train, Split::Dev, Split::Test]
        .into_iter()
        .map(|split| {
            let path = out_dir.join(split.file_name());
            fs::File::create(&path)
                .map(|f| (split, std::io::BufWriter::new(f)))
                .map_err(io_err(&path))
        })
        .collect::<Result<_, _>>()?;

    for i in 0..n_examples {
        let split = if i < counts[0] {
            0
        } else if i < counts[0] + counts[1] {
            1
        } else {
            2
        };
        let id = format!("ex{i:06}");
        let triple = generate_triple(triple_rng.gen::<u64>(), eq_cfg);
        // Training audio is stored with its drawn schedule SNR applied;
        // dev/test are stored clean and re-noised on demand.
        let snr_db = if split == 0 {
            SNR_GRID[snr_rng.gen_range(0..SNR_GRID.len())]
        } else {
            f64::INFINITY
        };
        let modalities = ModalitySet::empty()
            .with(Modality::A)
            .with(Modality::I)
            .with(Modality::L)
            .with(Modality::O);
        let streams = materialize(
            &triple,
            &id,
            seed,
            snr_db,
            modalities,
            OcrVariant::Oracle3,
            &vocab,
            eq_cfg,
            ch_cfg,
            &fq,
        )?;
        let target = channels::encode_target(&triple, &vocab);
        let record = Record {
            id,
            snr_db: Snr(snr_db),
            spoken_indices: triple.spoken_indices,
            equations: triple.equations.to_vec(),
            tokens_a: streams[0].ids.clone(),
            spans_a: spans_to_triples(&streams[0].spans),
            tokens_i: streams[1].ids.clone(),
            spans_i: spans_to_triples(&streams[1].spans),
            tokens_l: streams[2].ids.clone(),
            spans_l: spans_to_triples(&streams[2].spans),
            tokens_o: streams[3].ids.clone(),
            spans_o: spans_to_triples(&streams[3].spans),
            tokens_t: target.ids.clone(),
            spans_t: spans_to_triples(&target.spans),
            ocr_variant: OcrVariant::Oracle3,
        };
        let line = serde_json::to_string(&record).expect("record serialization cannot fail");
        let path = out_dir.join(writers[split].0.file_name());
        let w = &mut writers[split].1;
        w.write_all(line.as_bytes()).map_err(io_err(&path))?;
        w.write_all(b"\n").map_err(io_err(&path))?;
    }
    for (split, mut w) in writers {
        let path = out_dir.join(split.file_name());
        w.flush().map_err(io_err(&path))?;
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed,
        n_examples,
        split_counts: counts,
        split_ratios,
        snr_schedule: SNR_GRID.iter().map(|&s| Snr(s)).collect(),
        eq_config: eq_cfg.clone(),
        channel_config: ch_cfg.clone(),
        vocab_hash: format!("{:016x}", vocab.hash()),
        config_hash: String::new(),
    };
    let manifest = DatasetManifest {
        config_hash: format!(
            "{:016x}",
            fnv1a64(serde_json::to_string(&manifest).unwrap().as_bytes())
        ),
        ..manifest
    };
    let manifest_path = out_dir.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).unwrap() + "\n",
    )
    .map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::BadRecord {
        path,
        line: 0,
        message: e.to_string(),
    })
}

fn read_records(dir: &Path, split: Split) -> Result<Vec<Record>, DatasetError> {
    let path = dir.join(split.file_name());
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| DatasetError::BadRecord {
            path: path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

fn record_to_example(rec: Record) -> Example {
    let equations: [Equation; 3] = rec
        .equations
        .try_into()
        .expect("records always carry exactly 3 equations");
    let triple = EquationTriple { equations, spoken_indices: rec.spoken_indices };
    let streams = vec![
        TokenStream { modality: Modality::A, ids: rec.tokens_a, spans: spans_from_triples(&rec.spans_a) },
        TokenStream { modality: Modality::I, ids: rec.tokens_i, spans: spans_from_triples(&rec.spans_i) },
        TokenStream { modality: Modality::L, ids: rec.tokens_l, spans: spans_from_triples(&rec.spans_l) },
        TokenStream { modality: Modality::O, ids: rec.tokens_o, spans: spans_from_triples(&rec.spans_o) },
    ];
    let target = TokenStream {
        modality: Modality::T,
        ids: rec.tokens_t,
        spans: spans_from_triples(&rec.spans_t),
    };
    Example {
        id: rec.id,
        triple,
        streams,
        target,
        snr_db: rec.snr_db.0,
        ocr_variant: rec.ocr_variant,
    }
}

/// Read a split exactly as stored (all four streams, stored noise/variant).
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<Example>, DatasetError> {
    Ok(read_records(dir, split)?.into_iter().map(record_to_example).collect())
}

/// Load a split materialized for a particular consumer: only the requested
/// modalities, audio re-noised at `snr_db` (or the stored SNR when `None`),
/// and the requested OCR variant. Deterministic: repeated loads agree.
pub fn load_examples(
    dir: &Path,
    split: Split,
    snr_db: Option<f64>,
    modalities: ModalitySet,
    variant: OcrVariant,
) -> Result<Vec<Example>, DatasetError> {
    let manifest = load_manifest(dir)?;
    let vocab = Vocabulary::new();
    let fq = FrequencyTable::bundled();
    let records = read_records(dir, split)?;
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let ex = record_to_example(rec);
        let snr = snr_db.unwrap_or(ex.snr_db);
        let streams = materialize(
            &ex.triple,
            &ex.id,
            manifest.seed,
            snr,
            modalities,
            variant,
            &vocab,
            &manifest.eq_config,
            &manifest.channel_config,
            &fq,
        )?;
        out.push(Example {
            id: ex.id,
            triple: ex.triple,
            streams,
            target: ex.target,
            snr_db: snr,
            ocr_variant: if modalities.contains(Modality::O) { variant } else { OcrVariant::None },
        });
    }
    Ok(out)
}

/// Word -> rank table (1 = most frequent). Unknown words rank as rarest.
#[derive(Debug, Clone)]
pub struct FrequencyTable {
    ranks: HashMap<String, u32>,
}

impl FrequencyTable {
    /// Parse a plain-text list, one word per line, most frequent first.
    /// Blank lines and `#` comments are skipped; on duplicates the first
    /// occurrence wins so each word keeps a unique rank.
    pub fn from_text(text: &str) -> FrequencyTable {
        let mut ranks = HashMap::new();
        let mut rank = 1u32;
        for line in text.lines() {
            let w = line.trim();
            if w.is_empty() || w.starts_with('#') {
                continue;
            }
            if !ranks.contains_key(w) {
                ranks.insert(w.to_string(), rank);
                rank += 1;
            }
        }
        FrequencyTable { ranks }
    }

    /// The list bundled with the crate.
    pub fn bundled() -> FrequencyTable {
        Self::from_text(include_str!("../data/wordfreq.txt"))
    }

    /// Rank of a word; unknown words are treated as infinitely rare.
    pub fn rank(&self, word: &str) -> u64 {
        self.ranks.get(word).map(|&r| r as u64).unwrap_or(u64::MAX)
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

/// Keep at most K words: the rarest ones by table rank, originals' order
/// preserved, duplicates dropped keeping the first occurrence. Ties on rank
/// keep earlier occurrences.
pub fn fq_filter(words: &[String], table: &FrequencyTable, k: usize) -> Vec<String> {
    assert!(k >= 1, "K must be at least 1");
    let mut unique: Vec<(usize, &String)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (pos, w) in words.iter().enumerate() {
        if seen.insert(w.as_str()) {
            unique.push((pos, w));
        }
    }
    if unique.len() > k {
        // Rarest first; ties broken toward earlier positions.
        unique.sort_by(|a, b| table.rank(b.1).cmp(&table.rank(a.1)).then(a.0.cmp(&b.0)));
        unique.truncate(k);
        unique.sort_by_key(|(pos, _)| *pos);
    }
    unique.into_iter().map(|(_, w)| w.clone()).collect()
}

/// Split OCR sentence texts into words for the frequency filter, stripping
/// the parentheses the renderer may attach to nested operands.
pub fn ocr_words(texts: &[String]) -> Vec<String> {
    texts
        .iter()
        .flat_map(|t| t.split_whitespace())
        .map(|w| w.trim_matches(|c| c == '(' || c == ')').to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// The filtered OCR variant: take the 10-sentence oracle word list, keep the
/// K rarest words, and emit them as a single space-joined OCR segment.
fn encode_ocr_filtered(
    triple: &EquationTriple,
    vocab: &Vocabulary,
    rng_seed: u64,
    k: usize,
    table: &FrequencyTable,
    eq_cfg: &EqConfig,
) -> Result<TokenStream, DatasetError> {
    let texts = channels::ocr_sentence_texts(triple, rng_seed, 10, eq_cfg)?;
    let kept = fq_filter(&ocr_words(&texts), table, k);
    let joined = kept.join(" ");
    let ids: Vec<u32> = joined
        .chars()
        .map(|c| vocab.ocr_id(c).expect("filter output uses OCR charset"))
        .collect();
    let end = ids.len();
    Ok(TokenStream {
        modality: Modality::O,
        ids,
        spans: vec![Span { equation_index: 0, start: 0, end }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn build_small(n: usize, seed: u64) -> (TempDir, DatasetManifest) {
        let dir = TempDir::new().unwrap();
        let m = build_dataset(
            dir.path(),
            n,
            seed,
            &EqConfig::default(),
            &ChannelConfig::default(),
            [0.8, 0.1, 0.1],
        )
        .unwrap();
        (dir, m)
    }

    #[test]
    fn split_count_examples() {
        assert_eq!(split_counts(10_000, [0.8, 0.1, 0.1]).unwrap(), [8000, 1000, 1000]);
        assert_eq!(split_counts(100, [0.8, 0.1, 0.1]).unwrap(), [80, 10, 10]);
        assert!(split_counts(100, [0.8, 0.1, 0.2]).is_err());
        assert!(split_counts(100, [1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn rejects_tiny_datasets() {
        let dir = TempDir::new().unwrap();
        let r = build_dataset(
            dir.path(),
            5,
            0,
            &EqConfig::default(),
            &ChannelConfig::default(),
            [0.8, 0.1, 0.1],
        );
        assert!(matches!(r, Err(DatasetError::TooFewExamples(5))));
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let (d1, _) = build_small(50, 7);
        let (d2, _) = build_small(50, 7);
        for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"] {
            let a = fs::read(d1.path().join(f)).unwrap();
            let b = fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "file {f} differs between rebuilds");
        }
    }

    #[test]
    fn round_trip_is_structurally_equal() {
        let (dir, _) = build_small(30, 3);
        let examples = read_split(dir.path(), Split::Train).unwrap();
        assert_eq!(examples.len(), 24);
        // Write the records again from the parsed examples and compare.
        let raw = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        for (line, ex) in raw.lines().zip(&examples) {
            let rec: Record = serde_json::from_str(line).unwrap();
            let round = record_to_example(rec);
            assert_eq!(&round, ex);
        }
    }

    #[test]
    fn ids_are_disjoint_across_splits() {
        let (dir, _) = build_small(40, 11);
        let mut ids = std::collections::HashSet::new();
        for split in [Split::Train, Split::Dev, Split::Test] {
            for ex in read_split(dir.path(), split).unwrap() {
                assert!(ids.insert(ex.id.clone()), "duplicate id {}", ex.id);
            }
        }
        assert_eq!(ids.len(), 40);
    }

    #[test]
    fn training_snr_histogram_is_uniform() {
        let (dir, _) = build_small(2_000, 123);
        let examples = read_split(dir.path(), Split::Train).unwrap();
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for ex in &examples {
            *counts.entry(ex.snr_db.to_bits()).or_default() += 1;
        }
        assert_eq!(counts.len(), SNR_GRID.len());
        let n = examples.len() as f64;
        let p = 1.0 / SNR_GRID.len() as f64;
        let sigma = (p * (1.0 - p) / n).sqrt();
        for (_, c) in counts {
            let freq = c as f64 / n;
            assert!((freq - p).abs() <= 3.5 * sigma, "freq {freq} vs {p}");
        }
    }

    #[test]
    fn dev_and_test_are_stored_clean() {
        let (dir, _) = build_small(40, 5);
        for split in [Split::Dev, Split::Test] {
            for ex in read_split(dir.path(), split).unwrap() {
                assert_eq!(ex.snr_db, f64::INFINITY);
            }
        }
    }

    #[test]
    fn load_projects_requested_modalities() {
        let (dir, _) = build_small(20, 9);
        let only_a = load_examples(
            dir.path(),
            Split::Test,
            Some(f64::INFINITY),
            ModalitySet::AUDIO_ONLY,
            OcrVariant::None,
        )
        .unwrap();
        for ex in &only_a {
            assert_eq!(ex.streams.len(), 1);
            assert_eq!(ex.streams[0].modality, Modality::A);
        }
    }

    #[test]
    fn load_oracle10_at_mid_snr_recomputes_channels() {
        let (dir, _) = build_small(20, 13);
        let set = ModalitySet::AUDIO_ONLY.with(Modality::O);
        let loaded =
            load_examples(dir.path(), Split::Test, Some(0.0), set, OcrVariant::Oracle10).unwrap();
        let vocab = Vocabulary::new();
        let mut corrupted = 0usize;
        let mut corruptible = 0usize;
        for ex in &loaded {
            let o = ex.stream(Modality::O).unwrap();
            assert_eq!(o.spans.len(), 10);
            let a = ex.stream(Modality::A).unwrap();
            let clean = channels::encode_audio(&ex.triple, &vocab, 2, &NoiseSpec::clean(), 0);
            for span in &a.spans {
                let cut = span.start + channels::first_corruptible_index(span.end - span.start);
                assert_eq!(a.ids[span.start..cut], clean.ids[span.start..cut]);
                for pos in cut..span.end {
                    corruptible += 1;
                    if a.ids[pos] != clean.ids[pos] {
                        corrupted += 1;
                    }
                }
            }
        }
        // p(0dB)=0.5 with 1/|block| self-substitutions: rate ~ 0.483.
        let rate = corrupted as f64 / corruptible as f64;
        assert!(rate > 0.3 && rate < 0.65, "corruption rate {rate} implausible for 0 dB");
    }

    #[test]
    fn repeated_loads_are_identical() {
        let (dir, _) = build_small(15, 21);
        let set = ModalitySet::AUDIO_ONLY.with(Modality::O).with(Modality::L);
        let a = load_examples(dir.path(), Split::Dev, Some(-5.0), set, OcrVariant::Real).unwrap();
        let b = load_examples(dir.path(), Split::Dev, Some(-5.0), set, OcrVariant::Real).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fq_filter_toy_examples() {
        let table = FrequencyTable::from_text("the\nof\n");
        let mut t = table;
        t.ranks.insert("gradient".into(), 5000);
        t.ranks.insert("transformer".into(), 9000);
        let words: Vec<String> = ["the", "gradient", "of", "transformer"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(fq_filter(&words, &t, 2), vec!["gradient", "transformer"]);
        assert_eq!(fq_filter(&words, &t, 10), words);
        assert_eq!(fq_filter(&words, &t, 1), vec!["transformer"]);
    }

    #[test]
    fn fq_filter_dedups_keeping_first() {
        let table = FrequencyTable::bundled();
        let words: Vec<String> = ["17", "=", "17", "3", "="].iter().map(|s| s.to_string()).collect();
        let out = fq_filter(&words, &table, 10);
        assert_eq!(out, vec!["17", "=", "3"]);
    }

    #[test]
    fn fq_filter_is_idempotent() {
        use rand::Rng;
        let table = FrequencyTable::bundled();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pool: Vec<String> = ["the", "of", "17", "3", "+", "=", "log", "qzx", "foo", "19", "seven"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for _ in 0..1000 {
            let len = rng.gen_range(0..20);
            let words: Vec<String> =
                (0..len).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect();
            let k = rng.gen_range(1..8);
            let once = fq_filter(&words, &table, k);
            let twice = fq_filter(&once, &table, k);
            assert_eq!(once, twice, "not idempotent for {words:?} K={k}");
        }
    }

    #[test]
    fn filtered_variant_yields_single_short_segment() {
        let (dir, _) = build_small(12, 31);
        let set = ModalitySet::AUDIO_ONLY.with(Modality::O);
        let loaded = load_examples(
            dir.path(),
            Split::Test,
            Some(0.0),
            set,
            OcrVariant::Filtered(10),
        )
        .unwrap();
        let ten = load_examples(dir.path(), Split::Test, Some(0.0), set, OcrVariant::Oracle10)
            .unwrap();
        for (f, o) in loaded.iter().zip(&ten) {
            let fo = f.stream(Modality::O).unwrap();
            let oo = o.stream(Modality::O).unwrap();
            assert_eq!(fo.spans.len(), 1);
            assert!(fo.ids.len() < oo.ids.len(), "filtered should be shorter");
        }
    }

    #[test]
    fn requesting_ocr_without_variant_fails() {
        let (dir, _) = build_small(12, 37);
        let set = ModalitySet::AUDIO_ONLY.with(Modality::O);
        let r = load_examples(dir.path(), Split::Test, Some(0.0), set, OcrVariant::None);
        assert!(matches!(r, Err(DatasetError::MissingOcrVariant)));
    }

    #[test]
    fn snr_serialization_contract() {
        assert_eq!(serde_json::to_string(&Snr(f64::INFINITY)).unwrap(), "\"inf\"");
        assert_eq!(serde_json::to_string(&Snr(f64::NEG_INFINITY)).unwrap(), "\"-inf\"");
        assert_eq!(serde_json::to_string(&Snr(-5.0)).unwrap(), "-5.0");
        let v: Snr = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(v.0, f64::INFINITY);
        let v: Snr = serde_json::from_str("10.0").unwrap();
        assert_eq!(v.0, 10.0);
    }
}
