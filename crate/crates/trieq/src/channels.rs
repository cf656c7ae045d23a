//! Symbolic modality channels and the shared token vocabulary.
//!
//! Real codecs are replaced by deterministic lossy maps into disjoint id
//! blocks of one global vocabulary:
//!
//! - audio: one unit per lexicon word, repeated `repeat_rate` times, with
//!   SNR-controlled substitution noise on the second half of each spoken
//!   equation (the first half always stays clean);
//! - lip: per-character viseme classes, noise-free but many-to-one;
//! - image: a fixed-length stream of hashed character bigrams over all three
//!   equations (implicit, hard-to-read);
//! - OCR: the symbolic text character-by-character, optionally with i.i.d.
//!   character substitutions and optional irrelevant distractor sentences.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eqgen::{self, EqConfig, EquationTriple};
use crate::util::{derive_seed, fnv1a64};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("OCR sentence count must be 3 or 10, got {0}")]
    InvalidSentenceCount(usize),
}

/// Input/output modalities. `T` is the text target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    I,
    L,
    O,
    T,
}

/// A set of input modalities. Layout order in assembled sequences is fixed
/// to A, I, L, O regardless of how the set was written down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const AUDIO_ONLY: ModalitySet = ModalitySet(1);

    pub fn empty() -> Self {
        ModalitySet(0)
    }

    pub fn with(mut self, m: Modality) -> Self {
        self.0 |= Self::bit(m);
        self
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0 & Self::bit(m) != 0
    }

    fn bit(m: Modality) -> u8 {
        match m {
            Modality::A => 1,
            Modality::I => 2,
            Modality::L => 4,
            Modality::O => 8,
            Modality::T => panic!("target is not an input modality"),
        }
    }

    pub fn mask(&self) -> u8 {
        self.0
    }

    /// Input modalities in the canonical layout order A, I, L, O.
    pub fn iter_layout(&self) -> impl Iterator<Item = Modality> + '_ {
        [Modality::A, Modality::I, Modality::L, Modality::O]
            .into_iter()
            .filter(|m| self.contains(*m))
    }

    /// Human label in the I, L, O, A order used by report tables.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for m in [Modality::I, Modality::L, Modality::O] {
            if self.contains(m) {
                parts.push(match m {
                    Modality::I => "I",
                    Modality::L => "L",
                    _ => "O",
                });
            }
        }
        if self.contains(Modality::A) {
            parts.push("A");
        }
        parts.join("+")
    }
}

impl std::fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl std::str::FromStr for ModalitySet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = ModalitySet::empty();
        for part in s.split('+') {
            let m = match part.trim() {
                "A" | "a" => Modality::A,
                "I" | "i" => Modality::I,
                "L" | "l" => Modality::L,
                "O" | "o" => Modality::O,
                other => return Err(format!("unknown modality {other:?}")),
            };
            set = set.with(m);
        }
        Ok(set)
    }
}

impl TryFrom<String> for ModalitySet {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ModalitySet> for String {
    fn from(s: ModalitySet) -> String {
        s.label()
    }
}

/// Tasks a sequence can be assembled for. Each (task, modality set) pair gets
/// its own prompt id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Asr,
    LipToText,
}

impl Task {
    fn index(&self) -> u32 {
        match self {
            Task::Asr => 0,
            Task::LipToText => 1,
        }
    }
}

pub const TASK_COUNT: u32 = 2;
pub const VISEME_CLASS_COUNT: u32 = 8;
pub const IMAGE_CODEBOOK: u32 = 64;

/// OCR character set: lowercase letters, digits, space, and the operator
/// symbols the renderer can emit.
pub const OCR_CHARSET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 +-/^=()";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: u32,
    pub len: u32,
}

impl Block {
    pub fn contains(&self, id: u32) -> bool {
        id >= self.start && id < self.start + self.len
    }
}

/// The global vocabulary: pairwise-disjoint id blocks for special tokens,
/// text words, audio units, lip units, image units, and OCR characters.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    lexicon: Vec<&'static str>,
    pub prompts: Block,
    pub text: Block,
    pub audio: Block,
    pub lip: Block,
    pub image: Block,
    pub ocr: Block,
    vocab_size: u32,
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const TAG_A: u32 = 4;
pub const TAG_I: u32 = 5;
pub const TAG_L: u32 = 6;
pub const TAG_O: u32 = 7;

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let lexicon = eqgen::lexicon();
        let prompts = Block { start: 8, len: TASK_COUNT * 16 };
        let text = Block { start: prompts.start + prompts.len, len: lexicon.len() as u32 };
        let audio = Block { start: text.start + text.len, len: lexicon.len() as u32 };
        let lip = Block { start: audio.start + audio.len, len: VISEME_CLASS_COUNT + 1 };
        let image = Block { start: lip.start + lip.len, len: IMAGE_CODEBOOK + 1 };
        let ocr = Block { start: image.start + image.len, len: OCR_CHARSET.chars().count() as u32 };
        let vocab_size = ocr.start + ocr.len;
        Vocabulary { lexicon, prompts, text, audio, lip, image, ocr, vocab_size }
    }

    pub fn size(&self) -> u32 {
        self.vocab_size
    }

    pub fn lexicon(&self) -> &[&'static str] {
        &self.lexicon
    }

    /// Stable fingerprint of the whole layout; stored in checkpoints and
    /// manifests so mismatched artifacts are detected on load.
    pub fn hash(&self) -> u64 {
        let desc = format!(
            "v1|{}|{}|{}|{}|{}|{}",
            self.lexicon.join(","),
            OCR_CHARSET,
            VISEME_CLASS_COUNT,
            IMAGE_CODEBOOK,
            TASK_COUNT,
            self.vocab_size
        );
        fnv1a64(desc.as_bytes())
    }

    pub fn word_index(&self, word: &str) -> Option<u32> {
        self.lexicon.iter().position(|w| *w == word).map(|i| i as u32)
    }

    pub fn text_id(&self, word: &str) -> Option<u32> {
        self.word_index(word).map(|i| self.text.start + i)
    }

    pub fn audio_id(&self, word: &str) -> Option<u32> {
        self.word_index(word).map(|i| self.audio.start + i)
    }

    pub fn lip_id(&self, class: u32) -> u32 {
        debug_assert!(class < VISEME_CLASS_COUNT);
        self.lip.start + class
    }

    /// Word-boundary marker inside lip streams (mouth at rest).
    pub fn lip_gap_id(&self) -> u32 {
        self.lip.start + VISEME_CLASS_COUNT
    }

    pub fn image_unit_id(&self, unit: u32) -> u32 {
        debug_assert!(unit < IMAGE_CODEBOOK);
        self.image.start + unit
    }

    pub fn image_pad_id(&self) -> u32 {
        self.image.start + IMAGE_CODEBOOK
    }

    pub fn ocr_id(&self, c: char) -> Option<u32> {
        OCR_CHARSET.chars().position(|x| x == c).map(|i| self.ocr.start + i as u32)
    }

    pub fn prompt_id(&self, task: Task, modalities: ModalitySet) -> u32 {
        self.prompts.start + task.index() * 16 + modalities.mask() as u32
    }

    pub fn tag_id(&self, m: Modality) -> u32 {
        match m {
            Modality::A => TAG_A,
            Modality::I => TAG_I,
            Modality::L => TAG_L,
            Modality::O => TAG_O,
            Modality::T => panic!("target streams are introduced by BOS, not a tag"),
        }
    }

    /// Content block for a modality (what a stream's in-span ids belong to).
    pub fn block(&self, m: Modality) -> Block {
        match m {
            Modality::A => self.audio,
            Modality::I => self.image,
            Modality::L => self.lip,
            Modality::O => self.ocr,
            Modality::T => self.text,
        }
    }

    /// Render one id for human eyes or WER scoring. Text words decode to the
    /// word itself; everything else decodes to a bracket-free placeholder
    /// that will count as a wrong word if a model emits it.
    pub fn display(&self, id: u32) -> String {
        if self.text.contains(id) {
            return self.lexicon[(id - self.text.start) as usize].to_string();
        }
        match id {
            PAD => "pad".into(),
            BOS => "bos".into(),
            EOS => "eos".into(),
            SEP => "sep".into(),
            TAG_A => "tagA".into(),
            TAG_I => "tagI".into(),
            TAG_L => "tagL".into(),
            TAG_O => "tagO".into(),
            id if self.prompts.contains(id) => format!("prompt{}", id - self.prompts.start),
            id if self.audio.contains(id) => {
                format!("a:{}", self.lexicon[(id - self.audio.start) as usize])
            }
            id if self.lip.contains(id) => format!("l{}", id - self.lip.start),
            id if self.image.contains(id) => format!("i{}", id - self.image.start),
            id if self.ocr.contains(id) => {
                let c = OCR_CHARSET.chars().nth((id - self.ocr.start) as usize).unwrap();
                format!("o:{c}")
            }
            other => format!("tok{other}"),
        }
    }

    /// Decode a target id sequence back to its word string (stops nowhere;
    /// callers strip EOS themselves).
    pub fn decode_words(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.display(id)).collect::<Vec<_>>().join(" ")
    }
}

/// Half-open id span of one equation's segment inside a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub equation_index: usize,
    pub start: usize,
    pub end: usize,
}

/// One modality's token rendering. Ids inside spans belong to the modality's
/// block; positions between spans hold separators (SEP, or image padding).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub modality: Modality,
    pub ids: Vec<u32>,
    pub spans: Vec<Span>,
}

impl TokenStream {
    /// Check the block/span invariants against a vocabulary.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), String> {
        let block = vocab.block(self.modality);
        let mut prev_end = 0usize;
        for span in &self.spans {
            if span.start < prev_end || span.end > self.ids.len() || span.start > span.end {
                return Err(format!("span {span:?} out of order or out of bounds"));
            }
            for &id in &self.ids[span.start..span.end] {
                if !block.contains(id) {
                    return Err(format!("id {id} outside the {:?} block", self.modality));
                }
            }
            prev_end = span.end;
        }
        for (pos, &id) in self.ids.iter().enumerate() {
            let in_span = self.spans.iter().any(|s| pos >= s.start && pos < s.end);
            if !in_span && id != SEP && id != EOS && !block.contains(id) {
                return Err(format!("separator position {pos} holds unexpected id {id}"));
            }
        }
        Ok(())
    }
}

/// Where corruption may land inside the audio stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorruptionRegion {
    SecondHalfPerEquation,
    Whole,
    None,
}

/// Noise severity plus placement. `snr_db` may be +/- infinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub region: CorruptionRegion,
}

impl NoiseSpec {
    pub fn clean() -> Self {
        NoiseSpec { snr_db: f64::INFINITY, region: CorruptionRegion::SecondHalfPerEquation }
    }

    pub fn second_half(snr_db: f64) -> Self {
        NoiseSpec { snr_db, region: CorruptionRegion::SecondHalfPerEquation }
    }
}

/// Map SNR in dB to a token substitution probability: p = 1/(1 + 10^(snr/10)).
/// Monotone non-increasing with p(+inf)=0, p(0)=0.5, p(-inf)=1.
pub fn snr_to_corruption(snr_db: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf(snr_db / 10.0))
}

/// Channel parameters shared by dataset building and on-demand reloading.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Audio units emitted per spoken word.
    pub repeat_rate: usize,
    /// Fixed image stream length (bigram stream truncated or padded to this).
    pub image_grid_len: usize,
    /// Character substitution probability of the "real OCR" variant.
    pub ocr_char_error_rate: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig { repeat_rate: 2, image_grid_len: 80, ocr_char_error_rate: 0.05 }
    }
}

/// First index (relative to span start) that noise may touch: ceil(len/2).
/// The clean half is never shorter than the corruptible half.
pub fn first_corruptible_index(span_len: usize) -> usize {
    span_len.div_ceil(2)
}

/// Audio channel: spoken equations in spoken order, each word's unit repeated
/// `repeat_rate` times, SEP between equations, then substitution noise.
pub fn encode_audio(
    triple: &EquationTriple,
    vocab: &Vocabulary,
    repeat_rate: usize,
    noise: &NoiseSpec,
    rng_seed: u64,
) -> TokenStream {
    assert!(repeat_rate >= 1);
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    for (k, &eq_idx) in triple.spoken_indices.iter().enumerate() {
        if k > 0 {
            ids.push(SEP);
        }
        let start = ids.len();
        for word in triple.equations[eq_idx].spoken_words() {
            let unit = vocab.audio_id(word).expect("spoken words are lexicon words");
            for _ in 0..repeat_rate {
                ids.push(unit);
            }
        }
        spans.push(Span { equation_index: eq_idx, start, end: ids.len() });
    }
    apply_audio_noise(&mut ids, &spans, vocab, noise, rng_seed);
    TokenStream { modality: Modality::A, ids, spans }
}

fn apply_audio_noise(
    ids: &mut [u32],
    spans: &[Span],
    vocab: &Vocabulary,
    noise: &NoiseSpec,
    rng_seed: u64,
) {
    let p = snr_to_corruption(noise.snr_db);
    if p <= 0.0 || matches!(noise.region, CorruptionRegion::None) {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for span in spans {
        let len = span.end - span.start;
        let from = match noise.region {
            CorruptionRegion::SecondHalfPerEquation => span.start + first_corruptible_index(len),
            CorruptionRegion::Whole => span.start,
            CorruptionRegion::None => continue,
        };
        for id in ids[from..span.end].iter_mut() {
            if rng.gen::<f64>() < p {
                *id = vocab.audio.start + rng.gen_range(0..vocab.audio.len);
            }
        }
    }
}

/// Viseme class of one character (total on a-z; non-letters share the velar
/// bucket so the map stays total on arbitrary strings).
fn viseme_class(c: char) -> u32 {
    match c {
        'b' | 'p' | 'm' => 0,
        'f' | 'v' => 1,
        't' | 'd' | 's' | 'z' | 'n' | 'l' => 2,
        'r' => 4,
        'a' => 5,
        'e' | 'i' => 6,
        'o' | 'u' | 'w' => 7,
        _ => 3, // k g c q j y h x and anything else
    }
}

/// Character-wise viseme sequence of a word: the "th" digraph shares the f/v
/// class, and consecutive identical classes collapse into one mouth shape.
pub fn viseme_sequence(word: &str) -> Vec<u32> {
    let chars: Vec<char> = word.chars().collect();
    let mut classes = Vec::with_capacity(chars.len());
    let mut i = 0;
    while i < chars.len() {
        let class = if chars[i] == 't' && chars.get(i + 1) == Some(&'h') {
            i += 2;
            1
        } else {
            i += 1;
            viseme_class(chars[i - 1])
        };
        if classes.last() != Some(&class) {
            classes.push(class);
        }
    }
    classes
}

/// Lip channel: same layout as audio (spoken equations, spoken order) but
/// each word becomes its viseme-class sequence, words separated by a gap
/// unit. Noise-free, inherently ambiguous.
pub fn encode_lip(triple: &EquationTriple, vocab: &Vocabulary) -> TokenStream {
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    for (k, &eq_idx) in triple.spoken_indices.iter().enumerate() {
        if k > 0 {
            ids.push(SEP);
        }
        let start = ids.len();
        for (w, word) in triple.equations[eq_idx].spoken_words().iter().enumerate() {
            if w > 0 {
                ids.push(vocab.lip_gap_id());
            }
            for class in viseme_sequence(word) {
                ids.push(vocab.lip_id(class));
            }
        }
        spans.push(Span { equation_index: eq_idx, start, end: ids.len() });
    }
    TokenStream { modality: Modality::L, ids, spans }
}

/// Hash one character bigram into the image codebook.
pub fn image_unit_of_bigram(a: char, b: char) -> u32 {
    let mut buf = [0u8; 8];
    let s = {
        let mut t = String::with_capacity(8);
        t.push(a);
        t.push(b);
        t
    };
    let n = s.len().min(8);
    buf[..n].copy_from_slice(&s.as_bytes()[..n]);
    (fnv1a64(&buf[..n]) % IMAGE_CODEBOOK as u64) as u32
}

/// Image channel: all three equations' symbolic text (spoken or not) as a
/// fixed-length stream of hashed overlapping character bigrams. Collisions
/// are intended; overflow is truncated; the remainder is image padding.
pub fn encode_image(triple: &EquationTriple, vocab: &Vocabulary, grid_len: usize) -> TokenStream {
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    for (eq_idx, eq) in triple.equations.iter().enumerate() {
        let chars: Vec<char> = eq.text.chars().collect();
        let start = ids.len();
        for w in chars.windows(2) {
            ids.push(vocab.image_unit_id(image_unit_of_bigram(w[0], w[1])));
        }
        spans.push(Span { equation_index: eq_idx, start, end: ids.len() });
    }
    ids.truncate(grid_len);
    spans.retain(|s| s.start < grid_len);
    for span in spans.iter_mut() {
        span.end = span.end.min(grid_len);
    }
    while ids.len() < grid_len {
        ids.push(vocab.image_pad_id());
    }
    TokenStream { modality: Modality::I, ids, spans }
}

/// The sentence texts an OCR stream is built from: the 3 real equations in
/// image order, then (for the 10-sentence variant) 7 freshly generated
/// irrelevant equations. Distractors are a pure function of the seed.
pub fn ocr_sentence_texts(
    triple: &EquationTriple,
    rng_seed: u64,
    n_sentences: usize,
    eq_cfg: &EqConfig,
) -> Result<Vec<String>, ChannelError> {
    if n_sentences != 3 && n_sentences != 10 {
        return Err(ChannelError::InvalidSentenceCount(n_sentences));
    }
    let mut texts: Vec<String> = triple.equations.iter().map(|e| e.text.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, "ocr-distractors"));
    for _ in 3..n_sentences {
        texts.push(eqgen::generate_equation(rng.gen::<u64>(), eq_cfg).text);
    }
    Ok(texts)
}

/// OCR channel: the symbolic text of all 3 equations (plus, for the
/// 10-sentence variant, 7 freshly generated irrelevant equations), character
/// by character, SEP between sentences, each character substituted by a
/// uniformly random OCR character with probability `char_error_rate`.
pub fn encode_ocr(
    triple: &EquationTriple,
    vocab: &Vocabulary,
    char_error_rate: f64,
    rng_seed: u64,
    n_sentences: usize,
    eq_cfg: &EqConfig,
) -> Result<TokenStream, ChannelError> {
    let texts = ocr_sentence_texts(triple, rng_seed, n_sentences, eq_cfg)?;

    let mut ids = Vec::new();
    let mut spans = Vec::new();
    for (idx, text) in texts.iter().enumerate() {
        if idx > 0 {
            ids.push(SEP);
        }
        let start = ids.len();
        for c in text.chars() {
            ids.push(vocab.ocr_id(c).unwrap_or_else(|| panic!("unencodable OCR char {c:?}")));
        }
        spans.push(Span { equation_index: idx, start, end: ids.len() });
    }

    if char_error_rate > 0.0 {
        let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, "ocr-noise"));
        for span in &spans {
            for id in ids[span.start..span.end].iter_mut() {
                if noise.gen::<f64>() < char_error_rate {
                    *id = vocab.ocr.start + noise.gen_range(0..vocab.ocr.len);
                }
            }
        }
    }
    Ok(TokenStream { modality: Modality::O, ids, spans })
}

/// Target channel: word ids of the spoken equations in spoken order,
/// terminated by EOS.
pub fn encode_target(triple: &EquationTriple, vocab: &Vocabulary) -> TokenStream {
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    for &eq_idx in &triple.spoken_indices {
        let start = ids.len();
        for word in triple.equations[eq_idx].spoken_words() {
            ids.push(vocab.text_id(word).expect("spoken words are lexicon words"));
        }
        spans.push(Span { equation_index: eq_idx, start, end: ids.len() });
    }
    ids.push(EOS);
    TokenStream { modality: Modality::T, ids, spans }
}
