//! Synthetic fact corpus: a "domain" world whose facts are only ever stated
//! as raw documents, and a disjoint "general" world that also comes with QA
//! instruction pairs and preference triples.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{InstructionPair, PreferenceTriple, RawDocument};
use crate::error::{Error, Result};

const DOMAIN_CONSONANTS: &[u8] = b"bdfgklm";
const GENERAL_CONSONANTS: &[u8] = b"nprstvz";
const VOWELS: &[u8] = b"aeiou";

const DOMAIN_ATTRIBUTES: &[&str] = &["color", "gem"];
const GENERAL_ATTRIBUTES: &[&str] = &["food", "drink"];

const DOMAIN_VALUES: &[&str] = &[
    "amber", "cobalt", "crimson", "ivory", "jade", "ochre", "scarlet", "teal", "umber", "violet",
    "azure", "coral", "olive", "plum", "saffron", "slate",
];
const GENERAL_VALUES: &[&str] = &[
    "apple", "bread", "cheese", "dates", "eggs", "figs", "grapes", "honey", "kale", "lemon",
    "mango", "nuts", "oats", "pears", "rice", "soup",
];
/// Wrong answers used as rejected responses; never true of any entity.
const DISTRACTORS: &[&str] = &[
    "ash", "chalk", "clay", "coal", "dust", "glue", "gravel", "ink", "mud", "paint", "rust", "sand",
    "smoke", "soot", "stone", "wax",
];

/// One `(entity, attribute, value)` triple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fact {
    pub entity: String,
    pub attribute: String,
    pub value: String,
}

impl Fact {
    pub fn sentence(&self) -> String {
        format!("{} {} is {}.", self.entity, self.attribute, self.value)
    }

    pub fn question(&self) -> String {
        format!("What is {} {}?", self.entity, self.attribute)
    }

    pub fn probe(&self) -> InstructionPair {
        InstructionPair::new(self.question(), self.value.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub domain_facts: Vec<Fact>,
    pub general_facts: Vec<Fact>,
    /// One document per domain fact.
    pub domain_docs: Vec<RawDocument>,
    /// QA probes whose entities may appear in instruction data.
    pub probes_seen: Vec<InstructionPair>,
    /// QA probes whose entities only ever appear in documents.
    pub probes_heldout: Vec<InstructionPair>,
    pub general_docs: Vec<RawDocument>,
    pub general_pairs: Vec<InstructionPair>,
    /// chosen = the true value, rejected = an implausible distractor.
    pub preference_triples: Vec<PreferenceTriple>,
}

fn names(rng: &mut ChaCha8Rng, consonants: &[u8], n: usize) -> Vec<String> {
    let mut all = Vec::new();
    for &c1 in consonants {
        for &v1 in VOWELS {
            for &c2 in consonants {
                for &v2 in VOWELS {
                    all.push(String::from_utf8(vec![c1, v1, c2, v2]).unwrap());
                }
            }
        }
    }
    all.shuffle(rng);
    all.truncate(n);
    all
}

fn facts(rng: &mut ChaCha8Rng, entities: &[String], attrs: &[&str], values: &[&str]) -> Vec<Fact> {
    let mut out = Vec::new();
    for e in entities {
        for a in attrs {
            out.push(Fact {
                entity: e.clone(),
                attribute: a.to_string(),
                value: values[rng.gen_range(0..values.len())].to_string(),
            });
        }
    }
    out
}

/// Generates the corpus. Half of the domain entities (rounded down) are
/// held out from every instruction set.
pub fn synth_corpus(seed: u64, n_entities: usize, n_general: usize) -> Result<SynthCorpus> {
    let cap = DOMAIN_CONSONANTS.len().pow(2) * VOWELS.len().pow(2);
    if n_entities < 1 || n_general < 1 || n_entities > cap || n_general > cap {
        return Err(Error::Param(format!(
            "entity counts must be in 1..={cap}, got {n_entities} domain / {n_general} general"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain_entities = names(&mut rng, DOMAIN_CONSONANTS, n_entities);
    let general_entities = names(&mut rng, GENERAL_CONSONANTS, n_general);
    let domain_facts = facts(&mut rng, &domain_entities, DOMAIN_ATTRIBUTES, DOMAIN_VALUES);
    let general_facts = facts(&mut rng, &general_entities, GENERAL_ATTRIBUTES, GENERAL_VALUES);

    let n_seen = n_entities - n_entities / 2;
    let seen: BTreeSet<&str> = domain_entities[..n_seen].iter().map(String::as_str).collect();
    let (mut probes_seen, mut probes_heldout) = (Vec::new(), Vec::new());
    for f in &domain_facts {
        if seen.contains(f.entity.as_str()) {
            probes_seen.push(f.probe());
        } else {
            probes_heldout.push(f.probe());
        }
    }

    let preference_triples = general_facts
        .iter()
        .map(|f| {
            let rejected = DISTRACTORS[rng.gen_range(0..DISTRACTORS.len())];
            PreferenceTriple::new(f.question(), f.value.clone(), rejected.to_string())
        })
        .collect();

    Ok(SynthCorpus {
        domain_docs: domain_facts.iter().map(|f| RawDocument::new(f.sentence())).collect(),
        general_docs: general_facts.iter().map(|f| RawDocument::new(f.sentence())).collect(),
        general_pairs: general_facts.iter().map(Fact::probe).collect(),
        probes_seen,
        probes_heldout,
        preference_triples,
        domain_facts,
        general_facts,
    })
}
