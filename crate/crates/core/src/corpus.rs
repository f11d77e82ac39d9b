//! Annotated triples, the capped vocabulary, and per-example encoding with an
//! extended vocabulary for source words outside the fixed vocabulary.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{contract, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// One pre-tokenized, pre-annotated sentence–answer–question triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTriple {
    pub sentence: Vec<String>,
    pub pos: Vec<String>,
    pub ner: Vec<String>,
    /// Inclusive start of the answer span.
    pub answer_start: usize,
    /// Exclusive end of the answer span.
    pub answer_end: usize,
    pub question: Vec<String>,
}

impl RawTriple {
    pub fn validate(&self) -> Result<()> {
        let n = self.sentence.len();
        if n == 0 {
            return Err(contract!("empty sentence"));
        }
        if self.pos.len() != n || self.ner.len() != n {
            return Err(contract!(
                "sentence has {n} tokens but {} POS and {} NER tags",
                self.pos.len(),
                self.ner.len()
            ));
        }
        if !(self.answer_start < self.answer_end && self.answer_end <= n) {
            return Err(contract!(
                "answer span ({}, {}) out of range for {n} tokens",
                self.answer_start,
                self.answer_end
            ));
        }
        Ok(())
    }
}

/// Word vocabulary shared by the source, the target, and the language model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Specials followed by `tokens` in the given order.
    pub fn from_words<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: BTreeMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        for tok in tokens {
            let tok = tok.into();
            if index.contains_key(&tok) {
                return Err(contract!("duplicate vocabulary entry `{tok}`"));
            }
            index.insert(tok.clone(), words.len());
            words.push(tok);
        }
        Ok(Self { words, index })
    }

    /// Parses the persisted form: every entry in id order, specials first.
    pub fn from_list(list: &[String]) -> Result<Self> {
        if list.len() < SPECIALS.len() || list[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(contract!("vocabulary list must start with {SPECIALS:?}"));
        }
        Self::from_words(list[4..].iter().cloned())
    }

    /// Every entry in id order, specials included.
    pub fn to_list(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> usize {
        self.id(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }
}

/// Keeps the `cap` most frequent tokens of sentences and questions combined.
/// Frequency ties are broken by lexicographic order.
pub fn build_vocabulary(corpus: &[RawTriple], cap: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(contract!("cannot build a vocabulary from an empty corpus"));
    }
    if cap == 0 {
        return Err(contract!("vocabulary cap must be at least 1"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in corpus {
        for tok in t.sentence.iter().chain(&t.question) {
            if !SPECIALS.contains(&tok.as_str()) {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    // stable sort keeps the lexicographic order among equal counts
    ranked.sort_by_key(|&(_, n)| core::cmp::Reverse(n));
    Vocabulary::from_words(ranked.into_iter().take(cap).map(|(w, _)| w))
}

/// Closed tag set for one annotation layer (POS or NER); id 0 is the unknown tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    tags: Vec<String>,
    index: BTreeMap<String, usize>,
}

pub const UNKNOWN_TAG: &str = "<unk>";

impl TagSet {
    pub fn from_tags<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = Self { tags: alloc::vec![UNKNOWN_TAG.to_string()], index: BTreeMap::new() };
        set.index.insert(UNKNOWN_TAG.to_string(), 0);
        for t in tags {
            let t = t.into();
            if !set.index.contains_key(&t) {
                set.index.insert(t.clone(), set.tags.len());
                set.tags.push(t);
            }
        }
        set
    }

    /// Every distinct tag in `layer`, sorted.
    pub fn build<'a>(layer: impl Iterator<Item = &'a String>) -> Self {
        let mut distinct: Vec<&String> = layer.collect();
        distinct.sort();
        distinct.dedup();
        Self::from_tags(distinct.into_iter().cloned())
    }

    pub fn id(&self, tag: &str) -> usize {
        self.index.get(tag).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Every tag in id order.
    pub fn to_list(&self) -> &[String] {
        &self.tags
    }
}

/// Word vocabulary plus the POS and NER tag sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub words: Vocabulary,
    pub pos: TagSet,
    pub ner: TagSet,
}

impl Lexicon {
    pub fn build(corpus: &[RawTriple], cap: usize) -> Result<Self> {
        Ok(Self {
            words: build_vocabulary(corpus, cap)?,
            pos: TagSet::build(corpus.iter().flat_map(|t| &t.pos)),
            ner: TagSet::build(corpus.iter().flat_map(|t| &t.ner)),
        })
    }
}

/// Surface capitalization class of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CaseTag {
    AllLower = 0,
    Capitalized = 1,
    AllUpper = 2,
    Mixed = 3,
    NonAlpha = 4,
}

impl CaseTag {
    pub const COUNT: usize = 5;

    pub fn of(surface: &str) -> Self {
        let letters: Vec<char> = surface.chars().filter(|c| c.is_alphabetic()).collect();
        if letters.is_empty() {
            return CaseTag::NonAlpha;
        }
        let upper = letters.iter().filter(|c| c.is_uppercase()).count();
        if upper == 0 {
            CaseTag::AllLower
        } else if letters[0].is_uppercase() && upper == 1 {
            CaseTag::Capitalized
        } else if upper == letters.len() {
            CaseTag::AllUpper
        } else {
            CaseTag::Mixed
        }
    }
}

/// Answer-position tag of a source token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerTag {
    Outside = 0,
    Begin = 1,
    Inside = 2,
}

impl AnswerTag {
    pub const COUNT: usize = 3;
}

/// Model-ready form of a triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    /// Source ids in the fixed vocabulary (UNK for out-of-vocabulary words).
    pub src_ids: Vec<usize>,
    /// Source ids in the extended vocabulary. Out-of-vocabulary word `k` of
    /// `oov_list` gets id `vocab_size + k`.
    pub src_ext_ids: Vec<usize>,
    /// Distinct out-of-vocabulary source words in first-occurrence order.
    pub oov_list: Vec<String>,
    pub answer_tags: Vec<AnswerTag>,
    pub pos_ids: Vec<usize>,
    pub ner_ids: Vec<usize>,
    pub case_ids: Vec<usize>,
    /// `BOS q_1 .. q_n`, fixed-vocabulary ids.
    pub tgt_in: Vec<usize>,
    /// `q_1 .. q_n EOS`, extended ids for words copied from the source.
    pub tgt_out: Vec<usize>,
    /// Size of the fixed vocabulary the ids refer to.
    pub vocab_size: usize,
}

impl EncodedExample {
    pub fn src_len(&self) -> usize {
        self.src_ids.len()
    }

    /// Width of the extended distribution for this example.
    pub fn extended_size(&self) -> usize {
        self.vocab_size + self.oov_list.len()
    }

    /// Surface form of an extended id.
    pub fn surface<'a>(&'a self, vocab: &'a Vocabulary, id: usize) -> Result<&'a str> {
        if id < self.vocab_size {
            vocab.word(id).ok_or_else(|| contract!("id {id} not in vocabulary"))
        } else {
            self.oov_list
                .get(id - self.vocab_size)
                .map(String::as_str)
                .ok_or_else(|| contract!("extended id {id} beyond {} source OOVs", self.oov_list.len()))
        }
    }
}

pub fn encode_example(t: &RawTriple, lex: &Lexicon) -> Result<EncodedExample> {
    t.validate()?;
    let vocab = &lex.words;
    let v = vocab.len();
    let mut oov_list: Vec<String> = Vec::new();
    let mut src_ids = Vec::with_capacity(t.sentence.len());
    let mut src_ext_ids = Vec::with_capacity(t.sentence.len());
    for tok in &t.sentence {
        match vocab.id(tok) {
            Some(id) => {
                src_ids.push(id);
                src_ext_ids.push(id);
            }
            None => {
                let k = match oov_list.iter().position(|w| w == tok) {
                    Some(k) => k,
                    None => {
                        oov_list.push(tok.clone());
                        oov_list.len() - 1
                    }
                };
                src_ids.push(UNK);
                src_ext_ids.push(v + k);
            }
        }
    }

    let answer_tags = (0..t.sentence.len())
        .map(|i| {
            if i == t.answer_start {
                AnswerTag::Begin
            } else if i > t.answer_start && i < t.answer_end {
                AnswerTag::Inside
            } else {
                AnswerTag::Outside
            }
        })
        .collect();

    let mut tgt_in = Vec::with_capacity(t.question.len() + 1);
    let mut tgt_out = Vec::with_capacity(t.question.len() + 1);
    tgt_in.push(BOS);
    for tok in &t.question {
        let id = vocab.id_or_unk(tok);
        tgt_in.push(id);
        let ext = if vocab.contains(tok) { id } else { oov_list.iter().position(|w| w == tok).map_or(UNK, |k| v + k) };
        tgt_out.push(ext);
    }
    tgt_out.push(EOS);

    Ok(EncodedExample {
        src_ids,
        src_ext_ids,
        oov_list,
        answer_tags,
        pos_ids: t.pos.iter().map(|p| lex.pos.id(p)).collect(),
        ner_ids: t.ner.iter().map(|n| lex.ner.id(n)).collect(),
        case_ids: t.sentence.iter().map(|w| CaseTag::of(w) as usize).collect(),
        tgt_in,
        tgt_out,
        vocab_size: v,
    })
}

/// Maps extended ids back to surfaces: fixed-vocabulary ids through the
/// vocabulary, the rest through the example's OOV list.
pub fn decode_ids(ids: &[usize], ex: &EncodedExample, vocab: &Vocabulary) -> Result<Vec<String>> {
    ids.iter().map(|&id| ex.surface(vocab, id).map(ToString::to_string)).collect()
}
