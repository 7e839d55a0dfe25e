//! Tokenization, the template-free unified sample format, sequence packing,
//! JSONL loading and the synthetic fact corpus.

mod jsonl;
mod synth;

pub use jsonl::{load_jsonl, write_jsonl, RecordKind};
pub use synth::{synth_corpus, Fact, SynthCorpus};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample separator, appended after every packed sample.
pub const SEP: usize = 256;
/// Chat template markers: system, user and assistant turn.
pub const ST: usize = 257;
pub const UT: usize = 258;
pub const AT: usize = 259;
pub const PAD: usize = 260;
pub const VOCAB_SIZE: usize = 261;

pub fn is_special(id: usize) -> bool {
    id >= 256
}

/// Byte-level encoding: one id per UTF-8 byte.
pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Inverse of [`tokenize`]. In strict mode any special id is an error;
/// otherwise special ids are skipped.
pub fn detokenize(ids: &[usize], strict: bool) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < 256 {
            bytes.push(id as u8);
        } else if strict || id >= VOCAB_SIZE {
            return Err(Error::Input(format!("cannot detokenize special id {id}")));
        }
    }
    String::from_utf8(bytes).map_err(|e| Error::Input(format!("invalid UTF-8 in decoded bytes: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub query: String,
    pub response: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub query: String,
    pub chosen: String,
    pub rejected: String,
}

impl RawDocument {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            score: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::Input("document text is empty".into()));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Input(format!("quality score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

impl InstructionPair {
    pub fn new(query: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            response: response.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() || self.response.is_empty() {
            return Err(Error::Input("instruction query and response must be non-empty".into()));
        }
        Ok(())
    }
}

impl PreferenceTriple {
    pub fn new(
        query: impl Into<String>,
        chosen: impl Into<String>,
        rejected: impl Into<String>,
    ) -> Self {
        Self {
            query: query.into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() || self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::Input("preference fields must be non-empty".into()));
        }
        if self.chosen == self.rejected {
            return Err(Error::Input("chosen and rejected responses are identical".into()));
        }
        Ok(())
    }

    /// The (query, chosen) pair used wherever only the positive response counts.
    pub fn positive(&self) -> InstructionPair {
        InstructionPair::new(self.query.clone(), self.chosen.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Cpt(RawDocument),
    Sft(InstructionPair),
    Dpo(PreferenceTriple),
}

impl Record {
    pub fn kind(&self) -> RecordKind {
        match self {
            Record::Cpt(_) => RecordKind::Cpt,
            Record::Sft(_) => RecordKind::Sft,
            Record::Dpo(_) => RecordKind::Dpo,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Record::Cpt(d) => d.validate(),
            Record::Sft(p) => p.validate(),
            Record::Dpo(t) => t.validate(),
        }
    }
}

/// Template-free token sequence from any record kind. Carries no SEP; the
/// separator is added at packing time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnifiedSample {
    pub tokens: Vec<usize>,
    pub source: RecordKind,
}

pub fn to_unified(record: &Record) -> Result<UnifiedSample> {
    record.validate()?;
    let tokens = match record {
        Record::Cpt(d) => tokenize(&d.text),
        Record::Sft(p) => [tokenize(&p.query), tokenize(&p.response)].concat(),
        // the rejected response plays no part in pre-training
        Record::Dpo(t) => [tokenize(&t.query), tokenize(&t.chosen)].concat(),
    };
    Ok(UnifiedSample {
        tokens,
        source: record.kind(),
    })
}

/// Unifies every record of the three datasets into one mixture, in input order.
pub fn build_mixture(
    docs: &[RawDocument],
    pairs: &[InstructionPair],
    triples: &[PreferenceTriple],
) -> Result<Vec<UnifiedSample>> {
    let records = docs
        .iter()
        .cloned()
        .map(Record::Cpt)
        .chain(pairs.iter().cloned().map(Record::Sft))
        .chain(triples.iter().cloned().map(Record::Dpo));
    records.map(|r| to_unified(&r)).collect()
}

/// One fixed-length training window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBlock {
    pub tokens: Vec<usize>,
    /// `false` exactly on trailing PAD positions.
    pub mask: Vec<bool>,
}

impl PackedBlock {
    pub fn active_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Order in which samples are laid out before packing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackOrder {
    /// Seeded global shuffle across all kinds.
    #[default]
    Shuffled,
    /// Kinds concatenated cpt → sft → dpo, each kind shuffled on its own.
    PerKind,
    /// Input order, no shuffle.
    InOrder,
}

/// Concatenates samples with a trailing SEP each and cuts the stream into
/// `max_seq_len` windows; the last window is right-padded with PAD.
pub fn pack_blocks(
    samples: &[UnifiedSample],
    max_seq_len: usize,
    seed: u64,
    order: PackOrder,
) -> Result<Vec<PackedBlock>> {
    if max_seq_len < 2 {
        return Err(Error::Param(format!("max_seq_len must be >= 2, got {max_seq_len}")));
    }
    for s in samples {
        if s.tokens.iter().any(|&t| matches!(t, ST | UT | AT | PAD) || t >= VOCAB_SIZE) {
            return Err(Error::Input("unified samples may not contain template or PAD ids".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    match order {
        PackOrder::Shuffled => idx.shuffle(&mut rng),
        PackOrder::PerKind => {
            let mut ordered = Vec::with_capacity(samples.len());
            for kind in [RecordKind::Cpt, RecordKind::Sft, RecordKind::Dpo] {
                let mut part: Vec<usize> = idx.iter().copied().filter(|&i| samples[i].source == kind).collect();
                part.shuffle(&mut rng);
                ordered.extend(part);
            }
            idx = ordered;
        }
        PackOrder::InOrder => {}
    }
    let mut stream = Vec::new();
    for i in idx {
        stream.extend_from_slice(&samples[i].tokens);
        stream.push(SEP);
    }
    let blocks = stream
        .chunks(max_seq_len)
        .map(|chunk| {
            let mut tokens = chunk.to_vec();
            let mut mask = vec![true; chunk.len()];
            tokens.resize(max_seq_len, PAD);
            mask.resize(max_seq_len, false);
            PackedBlock { tokens, mask }
        })
        .collect();
    Ok(blocks)
}

/// `epochs` independently shuffled packings (seeds `seed`, `seed + 1`, ...)
/// laid end to end, so no fixed sample neighbourhood repeats across epochs.
pub fn pack_epochs(
    samples: &[UnifiedSample],
    max_seq_len: usize,
    seed: u64,
    order: PackOrder,
    epochs: usize,
) -> Result<Vec<PackedBlock>> {
    if epochs == 0 {
        return Err(Error::Param("epochs must be >= 1".into()));
    }
    let mut out = Vec::new();
    for e in 0..epochs as u64 {
        out.extend(pack_blocks(samples, max_seq_len, seed.wrapping_add(e), order)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("ab"), vec![97, 98]);
        let s = "héllo, wörld ✓";
        assert_eq!(detokenize(&tokenize(s), true).unwrap(), s);
        assert!(tokenize(s).iter().all(|&t| t < 256));
    }

    #[test]
    fn detokenize_special_ids() {
        assert!(detokenize(&[97, SEP], true).is_err());
        assert_eq!(detokenize(&[97, SEP, 98], false).unwrap(), "ab");
        assert!(detokenize(&[999], false).is_err());
    }

    #[test]
    fn unified_layouts() {
        let pair = to_unified(&Record::Sft(InstructionPair::new("Q", "A"))).unwrap();
        assert_eq!(pair.tokens, vec![81, 65]);
        let dpo = to_unified(&Record::Dpo(PreferenceTriple::new("Q", "good", "bad"))).unwrap();
        assert_eq!(
            dpo.tokens,
            to_unified(&Record::Sft(InstructionPair::new("Q", "good"))).unwrap().tokens
        );
        let doc = to_unified(&Record::Cpt(RawDocument::new("d x"))).unwrap();
        assert_eq!(doc.tokens, tokenize("d x"));
        assert!(to_unified(&Record::Sft(InstructionPair::new("", "A"))).is_err());
        assert!(to_unified(&Record::Dpo(PreferenceTriple::new("Q", "x", "x"))).is_err());
    }

    #[test]
    fn packing_example() {
        let s = |t: Vec<usize>| UnifiedSample {
            tokens: t,
            source: RecordKind::Cpt,
        };
        let blocks = pack_blocks(&[s(vec![5, 6]), s(vec![7])], 4, 0, PackOrder::InOrder).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].tokens, vec![5, 6, 256, 7]);
        assert_eq!(blocks[0].mask, vec![true; 4]);
        assert_eq!(blocks[1].tokens, vec![256, 260, 260, 260]);
        assert_eq!(blocks[1].mask, vec![true, false, false, false]);
    }

    #[test]
    fn packing_edge_cases() {
        assert!(pack_blocks(&[], 4, 0, PackOrder::Shuffled).unwrap().is_empty());
        assert!(pack_blocks(&[], 1, 0, PackOrder::Shuffled).is_err());
        let bad = UnifiedSample {
            tokens: vec![AT],
            source: RecordKind::Sft,
        };
        assert!(pack_blocks(&[bad], 4, 0, PackOrder::Shuffled).is_err());
    }

    #[test]
    fn per_kind_order_groups_kinds() {
        let mk = |t: usize, k| UnifiedSample {
            tokens: vec![t],
            source: k,
        };
        let samples = vec![
            mk(1, RecordKind::Dpo),
            mk(2, RecordKind::Cpt),
            mk(3, RecordKind::Sft),
            mk(4, RecordKind::Cpt),
        ];
        let blocks = pack_blocks(&samples, 8, 3, PackOrder::PerKind).unwrap();
        let toks: Vec<usize> = blocks[0].tokens.iter().copied().filter(|&t| t < 256).collect();
        assert!(matches!(toks[..2], [2, 4] | [4, 2]));
        assert_eq!(&toks[2..], &[3, 1]);
    }
}
