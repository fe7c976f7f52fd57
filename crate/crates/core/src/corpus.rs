//! Users, personas, topic-annotated dialogues and per-turn prediction examples.
//!
//! Corpora are stored as UTF-8 JSONL, one record per line:
//!
//! ```text
//! {"kind":"persona","id":0,"text":"i love jazz"}
//! {"kind":"user","id":0,"personas":[0,1]}
//! {"kind":"topic","id":0,"name":"jazz"}
//! {"kind":"dialogue","id":7,"user":0,"turns":[{"speaker":"seeker","text":"...","topic":0}]}
//! ```
//!
//! Persona, user and topic ids are table indices and must cover `0..n`.
//! Turns may carry `"gold_personas":[..]` (synthetic corpora only).
//!
//! # Importing public datasets
//!
//! Conversion is not implemented here; exports are expected to be mapped as
//! follows before loading:
//!
//! * TG-ReDial: each user profile sentence becomes a `persona` record and the
//!   profile a `user` record; every entry of the per-turn topic thread becomes
//!   a `topic`; a turn annotated with several topics is flattened into
//!   consecutive turns with the same text, one topic each.
//! * Persona-Chat: persona lines become `persona` records, each side of a
//!   conversation a `user`; turn topics are keywords extracted upstream.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    System,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Persona {
    pub id: usize,
    pub text: String,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct User {
    pub id: usize,
    pub persona_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Topic {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub tokens: Vec<String>,
    pub topic: usize,
    pub gold_personas: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: u64,
    pub user: usize,
    pub turns: Vec<Turn>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub personas: Vec<Persona>,
    pub users: Vec<User>,
    pub topics: Vec<Topic>,
    pub dialogues: Vec<Dialogue>,
}

// ----- wire format ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    speaker: Speaker,
    text: String,
    topic: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_personas: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Persona {
        id: usize,
        text: String,
    },
    User {
        id: usize,
        personas: Vec<usize>,
    },
    Topic {
        id: usize,
        name: String,
    },
    Dialogue {
        id: u64,
        user: usize,
        turns: Vec<TurnRecord>,
    },
}

impl Corpus {
    pub fn parse_jsonl(text: &str) -> Result<Corpus> {
        let mut personas = Vec::new();
        let mut users = Vec::new();
        let mut topics = Vec::new();
        let mut dialogues = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            match rec {
                Record::Persona { id, text } => {
                    let tokens = tokenize(&text);
                    if tokens.is_empty() {
                        return Err(Error::Parse {
                            line: line_no,
                            message: format!("persona {id}: field `text` is empty"),
                        });
                    }
                    personas.push(Persona { id, text, tokens });
                }
                Record::User { id, personas: ids } => users.push(User { id, persona_ids: ids }),
                Record::Topic { id, name } => {
                    if tokenize(&name).is_empty() {
                        return Err(Error::Parse {
                            line: line_no,
                            message: format!("topic {id}: field `name` is empty"),
                        });
                    }
                    topics.push(Topic { id, name });
                }
                Record::Dialogue { id, user, turns } => dialogues.push(Dialogue {
                    id,
                    user,
                    turns: turns
                        .into_iter()
                        .map(|t| Turn {
                            speaker: t.speaker,
                            tokens: tokenize(&t.text),
                            text: t.text,
                            topic: t.topic,
                            gold_personas: t.gold_personas,
                        })
                        .collect(),
                }),
            }
        }
        personas.sort_by_key(|p| p.id);
        users.sort_by_key(|u| u.id);
        topics.sort_by_key(|t| t.id);
        dialogues.sort_by_key(|d| d.id);
        let corpus = Corpus {
            personas,
            users,
            topics,
            dialogues,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Checks referential integrity and the per-type invariants.
    pub fn validate(&self) -> Result<()> {
        check_dense("persona", self.personas.iter().map(|p| p.id))?;
        check_dense("user", self.users.iter().map(|u| u.id))?;
        check_dense("topic", self.topics.iter().map(|t| t.id))?;
        if self.dialogues.is_empty() {
            return Err(Error::Data("no dialogues".into()));
        }
        for u in &self.users {
            if u.persona_ids.is_empty() {
                return Err(Error::Data(format!("user {} has no personas", u.id)));
            }
            let set: BTreeSet<_> = u.persona_ids.iter().collect();
            if set.len() != u.persona_ids.len() {
                return Err(Error::Data(format!("user {} lists a persona twice", u.id)));
            }
            if let Some(p) = u.persona_ids.iter().find(|&&p| p >= self.personas.len()) {
                return Err(Error::Data(format!("user {} references unknown persona {p}", u.id)));
            }
        }
        let mut seen = BTreeSet::new();
        for d in &self.dialogues {
            if !seen.insert(d.id) {
                return Err(Error::Data(format!("duplicate dialogue id {}", d.id)));
            }
            let Some(user) = self.users.get(d.user) else {
                return Err(Error::Data(format!(
                    "dialogue {} references unknown user {}",
                    d.id, d.user
                )));
            };
            if d.turns.len() < 2 {
                return Err(Error::Data(format!("dialogue {} has fewer than 2 turns", d.id)));
            }
            for (j, t) in d.turns.iter().enumerate() {
                if t.topic >= self.topics.len() {
                    return Err(Error::Data(format!(
                        "dialogue {} turn {j} references unknown topic {}",
                        d.id, t.topic
                    )));
                }
                if let Some(gold) = &t.gold_personas {
                    if let Some(p) = gold.iter().find(|p| !user.persona_ids.contains(p)) {
                        return Err(Error::Data(format!(
                            "dialogue {} turn {j}: gold persona {p} is not held by user {}",
                            d.id, d.user
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: &Record| {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        };
        for p in &self.personas {
            push(&Record::Persona {
                id: p.id,
                text: p.text.clone(),
            });
        }
        for u in &self.users {
            push(&Record::User {
                id: u.id,
                personas: u.persona_ids.clone(),
            });
        }
        for t in &self.topics {
            push(&Record::Topic {
                id: t.id,
                name: t.name.clone(),
            });
        }
        for d in &self.dialogues {
            push(&Record::Dialogue {
                id: d.id,
                user: d.user,
                turns: d
                    .turns
                    .iter()
                    .map(|t| TurnRecord {
                        speaker: t.speaker,
                        text: t.text.clone(),
                        topic: t.topic,
                        gold_personas: t.gold_personas.clone(),
                    })
                    .collect(),
            });
        }
        out
    }

    pub fn has_gold_personas(&self) -> bool {
        self.dialogues
            .iter()
            .flat_map(|d| &d.turns)
            .any(|t| t.gold_personas.is_some())
    }

    /// Corpus restricted to the given dialogues (tables are kept whole).
    pub fn with_dialogues(&self, dialogues: Vec<Dialogue>) -> Corpus {
        Corpus {
            personas: self.personas.clone(),
            users: self.users.clone(),
            topics: self.topics.clone(),
            dialogues,
        }
    }
}

fn check_dense(kind: &str, ids: impl Iterator<Item = usize>) -> Result<()> {
    for (expect, id) in ids.enumerate() {
        if id != expect {
            return Err(Error::Data(format!(
                "{kind} ids must be unique and cover 0..n; expected {expect}, found {id}"
            )));
        }
    }
    Ok(())
}

/// Reads a corpus file and builds its vocabulary.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Corpus, Vocab)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corpus = Corpus::parse_jsonl(&text)?;
    let vocab = Vocab::build(&corpus);
    Ok((corpus, vocab))
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(corpus.to_jsonl().as_bytes())
        .map_err(|e| Error::io(path, e))
}

// ----- vocabulary -----------------------------------------------------------

/// Word and topic tables. Word ids 0..4 are reserved (PAD, BOS, EOS, UNK).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    word_ids: HashMap<String, usize>,
    topics: Vec<String>,
    topic_tokens: Vec<Vec<String>>,
}

impl Vocab {
    /// Words from persona texts, utterances and topic names, ids in sorted order.
    pub fn build(corpus: &Corpus) -> Vocab {
        let mut set = BTreeSet::new();
        for p in &corpus.personas {
            set.extend(p.tokens.iter().cloned());
        }
        for t in &corpus.topics {
            set.extend(tokenize(&t.name));
        }
        for d in &corpus.dialogues {
            for t in &d.turns {
                set.extend(t.tokens.iter().cloned());
            }
        }
        for r in RESERVED {
            set.remove(r);
        }
        let words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(set).collect();
        let topics: Vec<String> = corpus.topics.iter().map(|t| t.name.clone()).collect();
        Self::from_parts(words, topics)
    }

    pub fn from_parts(words: Vec<String>, topics: Vec<String>) -> Vocab {
        let word_ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let topic_tokens = topics.iter().map(|n| tokenize(n)).collect();
        Vocab {
            words,
            word_ids,
            topics,
            topic_tokens,
        }
    }

    /// Restores the lookup index after deserialization.
    pub(crate) fn reindex(self) -> Vocab {
        Self::from_parts(self.words, self.topics)
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_topics(&self) -> usize {
        self.topics.len()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.word_ids.get(w).copied()
    }

    /// Id of `w`, or UNK.
    pub fn lookup(&self, w: &str) -> usize {
        self.word_id(w).unwrap_or(UNK)
    }

    pub fn topic_name(&self, id: usize) -> &str {
        &self.topics[id]
    }

    pub fn topic_tokens(&self, id: usize) -> &[String] {
        &self.topic_tokens[id]
    }

    pub fn topic_id(&self, name: &str) -> Option<usize> {
        self.topics.iter().position(|t| t == name)
    }
}

// ----- examples -------------------------------------------------------------

/// One next-turn prediction instance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub dialogue_id: u64,
    /// Index of the predicted turn within its dialogue.
    pub position: usize,
    pub user: usize,
    pub context: Vec<Vec<String>>,
    pub topic_path: Vec<usize>,
    pub target_topic: usize,
    /// Present when the predicted turn is a system turn.
    pub target_response: Option<Vec<String>>,
    pub gold_personas: Option<Vec<usize>>,
}

/// One example per dialogue position `j ∈ [1, |turns| − 1]`, with the
/// context window holding the last `history` turns before `j`.
///
/// Dialogues shorter than two turns are skipped (and logged).
pub fn window_examples(corpus: &Corpus, history: usize) -> Vec<TrainingExample> {
    assert!(history >= 1, "history must be at least 1");
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for d in &corpus.dialogues {
        if d.turns.len() < 2 {
            skipped += 1;
            continue;
        }
        for j in 1..d.turns.len() {
            let start = j.saturating_sub(history);
            let window = &d.turns[start..j];
            let target = &d.turns[j];
            out.push(TrainingExample {
                dialogue_id: d.id,
                position: j,
                user: d.user,
                context: window.iter().map(|t| t.tokens.clone()).collect(),
                topic_path: window.iter().map(|t| t.topic).collect(),
                target_topic: target.topic,
                target_response: (target.speaker == Speaker::System).then(|| target.tokens.clone()),
                gold_personas: target.gold_personas.clone(),
            });
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} dialogues with fewer than 2 turns");
    }
    out
}

/// Train/validation/test partition by dialogue.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

/// Shuffles dialogues with `seed` and cuts them by the given fractions
/// (test receives the remainder). Each split keeps at least one dialogue when
/// the corpus has three or more.
pub fn split_corpus(corpus: &Corpus, train_frac: f64, valid_frac: f64, seed: u64) -> Result<Splits> {
    let n = corpus.dialogues.len();
    if n < 3 {
        return Err(Error::Data(format!("need at least 3 dialogues to split, got {n}")));
    }
    if !(train_frac > 0.0 && valid_frac > 0.0 && train_frac + valid_frac < 1.0) {
        return Err(Error::Invalid(format!(
            "split fractions {train_frac}/{valid_frac} must be positive and sum below 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_frac).round() as usize).clamp(1, n - 2);
    let n_valid = ((n as f64 * valid_frac).round() as usize).clamp(1, n - n_train - 1);
    let pick = |idx: &[usize]| {
        let mut ds: Vec<Dialogue> = idx.iter().map(|&i| corpus.dialogues[i].clone()).collect();
        ds.sort_by_key(|d| d.id);
        corpus.with_dialogues(ds)
    };
    Ok(Splits {
        train: pick(&order[..n_train]),
        valid: pick(&order[n_train..n_train + n_valid]),
        test: pick(&order[n_train + n_valid..]),
    })
}
