//! Synthetic persona-conditioned dialogue worlds with ground-truth labels.
//!
//! Each persona prefers a handful of topics. A dialogue belongs to one user;
//! at every turn an active persona is drawn from that user's set (sticky
//! across turns) and the next topic is sampled with probability proportional
//! to `(affinity(persona, t) · kernel(prev, t))^(1/temperature)`, where the
//! transition kernel is shared by all personas. Utterances are templated so
//! that topic names and persona keywords appear as copyable tokens.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::config::{self, KeyValues};
use crate::corpus::{tokenize, Corpus, Dialogue, Persona, Speaker, Topic, Turn, User};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_users: usize,
    pub n_personas_global: usize,
    pub personas_per_user: usize,
    pub n_topics: usize,
    pub topics_per_persona_affinity: usize,
    pub transition_temperature: f64,
    pub dialogue_length_range: (usize, usize),
    pub n_dialogues: usize,
    pub seed: u64,
    /// Probability that the active persona carries over to the next turn.
    pub persona_stickiness: f64,
    /// Probability that an utterance names the active persona's keyword.
    pub keyword_rate: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_personas_global: 40,
            personas_per_user: 4,
            n_topics: 50,
            topics_per_persona_affinity: 5,
            transition_temperature: 0.5,
            dialogue_length_range: (4, 8),
            n_dialogues: 2000,
            seed: 0,
            persona_stickiness: 0.85,
            keyword_rate: 0.5,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        for (name, v) in [
            ("n_users", self.n_users),
            ("n_personas_global", self.n_personas_global),
            ("personas_per_user", self.personas_per_user),
            ("n_topics", self.n_topics),
            ("topics_per_persona_affinity", self.topics_per_persona_affinity),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.personas_per_user > self.n_personas_global {
            return bad(format!(
                "personas_per_user {} exceeds n_personas_global {}",
                self.personas_per_user, self.n_personas_global
            ));
        }
        if self.topics_per_persona_affinity > self.n_topics {
            return bad("topics_per_persona_affinity exceeds n_topics".into());
        }
        if !(self.transition_temperature > 0.0 && self.transition_temperature.is_finite()) {
            return bad("transition_temperature must be positive".into());
        }
        let (lo, hi) = self.dialogue_length_range;
        if lo < 2 || lo > hi {
            return bad(format!("dialogue_length_range ({lo},{hi}) needs 2 <= min <= max"));
        }
        for (name, p) in [
            ("persona_stickiness", self.persona_stickiness),
            ("keyword_rate", self.keyword_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Applies `key=value` pairs (see [`crate::config`]); unknown keys are errors.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            match k {
                "n_users" => self.n_users = config::parse(k, v)?,
                "n_personas_global" => self.n_personas_global = config::parse(k, v)?,
                "personas_per_user" => self.personas_per_user = config::parse(k, v)?,
                "n_topics" => self.n_topics = config::parse(k, v)?,
                "topics_per_persona_affinity" => self.topics_per_persona_affinity = config::parse(k, v)?,
                "transition_temperature" => self.transition_temperature = config::parse(k, v)?,
                "dialogue_length_min" => self.dialogue_length_range.0 = config::parse(k, v)?,
                "dialogue_length_max" => self.dialogue_length_range.1 = config::parse(k, v)?,
                "n_dialogues" => self.n_dialogues = config::parse(k, v)?,
                "seed" => self.seed = config::parse(k, v)?,
                "persona_stickiness" => self.persona_stickiness = config::parse(k, v)?,
                "keyword_rate" => self.keyword_rate = config::parse(k, v)?,
                _ => return Err(Error::Invalid(format!("unknown world key {k}"))),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `|P| × |T|`, rows sum to 1.
    pub persona_topic_affinity: Vec<Vec<f64>>,
    /// `|T| × |T|` row-stochastic kernel shared by all personas.
    pub transition_kernel: Vec<Vec<f64>>,
    /// Active persona of every turn, keyed by dialogue id.
    pub active_personas: BTreeMap<u64, Vec<usize>>,
    /// Keyword that identifies each persona in utterances.
    pub persona_keywords: Vec<String>,
}

impl GroundTruth {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Distinct pronounceable word for `index`: at least two CV syllables.
fn pseudo_word(mut index: usize, suffix: &str) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let mut w = String::new();
    let mut digits = 0;
    loop {
        let s = index % n;
        w.push(CONSONANTS[s / VOWELS.len()] as char);
        w.push(VOWELS[s % VOWELS.len()] as char);
        index /= n;
        digits += 1;
        if index == 0 && digits >= 2 {
            break;
        }
    }
    w.push_str(suffix);
    w
}

pub fn topic_name(i: usize) -> String {
    pseudo_word(i, "")
}

pub fn persona_keyword(i: usize) -> String {
    pseudo_word(i, "n")
}

fn dialogue_seed(seed: u64, dialogue: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = seed ^ dialogue.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples an index proportional to `exp(log_w / temperature)`.
fn sample_tempered<R: Rng + ?Sized>(log_w: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    // floating-point remainder: fall back to the heaviest entry
    w.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Log-weights of the next topic given the active persona and previous topic.
pub fn next_topic_log_weights(truth: &GroundTruth, persona: usize, prev: Option<usize>) -> Vec<f64> {
    let aff = &truth.persona_topic_affinity[persona];
    aff.iter()
        .enumerate()
        .map(|(t, a)| a.ln() + prev.map_or(0.0, |p| truth.transition_kernel[p][t].ln()))
        .collect()
}

/// Dirichlet(1, ..., 1) draw via normalized unit exponentials.
fn flat_dirichlet<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

pub fn generate_world(spec: &WorldSpec) -> Result<(Corpus, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_t = spec.n_topics;

    let keywords: Vec<String> = (0..spec.n_personas_global).map(persona_keyword).collect();
    let personas: Vec<Persona> = keywords
        .iter()
        .enumerate()
        .map(|(id, kw)| {
            let text = format!("i really enjoy {kw}");
            Persona {
                id,
                tokens: tokenize(&text),
                text,
            }
        })
        .collect();
    let topics: Vec<Topic> = (0..n_t)
        .map(|id| Topic {
            id,
            name: topic_name(id),
        })
        .collect();
    let users: Vec<User> = (0..spec.n_users)
        .map(|id| {
            let mut ids = sample(&mut rng, spec.n_personas_global, spec.personas_per_user).into_vec();
            ids.sort_unstable();
            User { id, persona_ids: ids }
        })
        .collect();

    // affinity: a few preferred topics with Dirichlet weights plus a small floor
    const FLOOR: f64 = 0.02;
    let k = spec.topics_per_persona_affinity;
    let mut affinity = Vec::with_capacity(spec.n_personas_global);
    for _ in 0..spec.n_personas_global {
        let favourites = sample(&mut rng, n_t, k).into_vec();
        let weights: Vec<f64> = if k == 1 { vec![1.0] } else { flat_dirichlet(&mut rng, k) };
        let mut row = vec![FLOOR / n_t as f64; n_t];
        for (t, w) in favourites.iter().zip(&weights) {
            row[*t] += (1.0 - FLOOR) * w;
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
        affinity.push(row);
    }
    let kernel: Vec<Vec<f64>> = if n_t == 1 {
        vec![vec![1.0]]
    } else {
        (0..n_t)
            .map(|_| {
                let mut row = flat_dirichlet(&mut rng, n_t);
                // keep logs finite
                row.iter_mut().for_each(|x| *x = x.max(1e-12));
                let s: f64 = row.iter().sum();
                row.iter().map(|x| x / s).collect()
            })
            .collect()
    };

    let mut truth = GroundTruth {
        persona_topic_affinity: affinity,
        transition_kernel: kernel,
        active_personas: BTreeMap::new(),
        persona_keywords: keywords,
    };

    let mut dialogues = Vec::with_capacity(spec.n_dialogues);
    for d in 0..spec.n_dialogues as u64 {
        let mut r = ChaCha8Rng::seed_from_u64(dialogue_seed(spec.seed, d));
        let user = r.random_range(0..spec.n_users);
        let held = &users[user].persona_ids;
        let len = r.random_range(spec.dialogue_length_range.0..=spec.dialogue_length_range.1);
        let mut active = held[r.random_range(0..held.len())];
        let mut prev = None;
        let mut turns = Vec::with_capacity(len);
        let mut actives = Vec::with_capacity(len);
        for j in 0..len {
            if j > 0 && !r.random_bool(spec.persona_stickiness) {
                active = held[r.random_range(0..held.len())];
            }
            let lw = next_topic_log_weights(&truth, active, prev);
            let topic = sample_tempered(&lw, spec.transition_temperature, &mut r);
            let text = if r.random_bool(spec.keyword_rate) {
                format!(
                    "let's talk about {} because {}",
                    topics[topic].name, truth.persona_keywords[active]
                )
            } else {
                format!("let's talk about {}", topics[topic].name)
            };
            turns.push(Turn {
                speaker: if j % 2 == 0 { Speaker::Seeker } else { Speaker::System },
                tokens: tokenize(&text),
                text,
                topic,
                gold_personas: Some(vec![active]),
            });
            actives.push(active);
            prev = Some(topic);
        }
        truth.active_personas.insert(d, actives);
        dialogues.push(Dialogue { id: d, user, turns });
    }

    Ok((
        Corpus {
            personas,
            users,
            topics,
            dialogues,
        },
        truth,
    ))
}

/// Shannon entropy (nats) of a count vector.
pub fn entropy(counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum()
}

/// Entropy of the global topic frequency and the mean entropy of the
/// per-persona frequencies (grouped by gold active persona).
pub fn topic_entropies(corpus: &Corpus) -> (f64, f64) {
    let n_t = corpus.topics.len();
    let mut global = vec![0.0; n_t];
    let mut per: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for t in corpus.dialogues.iter().flat_map(|d| &d.turns) {
        global[t.topic] += 1.0;
        for &p in t.gold_personas.iter().flatten() {
            per.entry(p).or_insert_with(|| vec![0.0; n_t])[t.topic] += 1.0;
        }
    }
    let mean = if per.is_empty() {
        0.0
    } else {
        per.values().map(|c| entropy(c)).sum::<f64>() / per.len() as f64
    };
    (entropy(&global), mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldSpec {
        WorldSpec {
            n_users: 10,
            n_personas_global: 8,
            personas_per_user: 3,
            n_topics: 12,
            topics_per_persona_affinity: 3,
            n_dialogues: 30,
            seed: 11,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn zero_dialogues_gives_empty_corpus() {
        let spec = WorldSpec {
            n_dialogues: 0,
            ..small()
        };
        let (c, truth) = generate_world(&spec).unwrap();
        assert!(c.dialogues.is_empty());
        assert_eq!(truth.persona_topic_affinity.len(), 8);
        for row in &truth.persona_topic_affinity {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
        for row in &truth.transition_kernel {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a.0.to_jsonl(), b.0.to_jsonl());
        assert_eq!(
            serde_json::to_string(&a.1).unwrap(),
            serde_json::to_string(&b.1).unwrap()
        );
        let c = generate_world(&WorldSpec { seed: 12, ..small() }).unwrap();
        assert_ne!(a.0.to_jsonl(), c.0.to_jsonl());
    }

    #[test]
    fn near_zero_temperature_follows_argmax() {
        let spec = WorldSpec {
            personas_per_user: 1,
            transition_temperature: 1e-9,
            ..small()
        };
        let (c, truth) = generate_world(&spec).unwrap();
        for d in &c.dialogues {
            let persona = c.users[d.user].persona_ids[0];
            let mut prev: Option<usize> = None;
            for t in &d.turns {
                // direct argmax of affinity x kernel
                let mut best = 0;
                let mut best_w = f64::NEG_INFINITY;
                for cand in 0..spec.n_topics {
                    let mut w = truth.persona_topic_affinity[persona][cand];
                    if let Some(p) = prev {
                        w *= truth.transition_kernel[p][cand];
                    }
                    if w > best_w {
                        best_w = w;
                        best = cand;
                    }
                }
                assert_eq!(t.topic, best);
                prev = Some(t.topic);
            }
        }
    }

    #[test]
    fn gold_personas_belong_to_user_and_corpus_validates() {
        let (c, truth) = generate_world(&small()).unwrap();
        c.validate().unwrap();
        for d in &c.dialogues {
            let held = &c.users[d.user].persona_ids;
            for (t, a) in d.turns.iter().zip(&truth.active_personas[&d.id]) {
                assert_eq!(t.gold_personas.as_deref(), Some(&[*a][..]));
                assert!(held.contains(a));
            }
            let n = d.turns.len();
            assert!((4..=8).contains(&n));
        }
    }

    #[test]
    fn global_topic_distribution_is_flatter_than_per_persona() {
        let (c, _) = generate_world(&WorldSpec::default()).unwrap();
        let (global, per) = topic_entropies(&c);
        assert!(global > per, "global {global} per-persona {per}");
    }

    #[test]
    fn names_are_distinct() {
        let mut names: Vec<String> = (0..5000).map(topic_name).collect();
        names.extend((0..5000).map(persona_keyword));
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_world(&WorldSpec {
            personas_per_user: 9,
            ..small()
        })
        .is_err());
        assert!(generate_world(&WorldSpec { n_topics: 0, ..small() }).is_err());
        assert!(generate_world(&WorldSpec {
            dialogue_length_range: (5, 4),
            ..small()
        })
        .is_err());
        assert!(generate_world(&WorldSpec {
            transition_temperature: 0.0,
            ..small()
        })
        .is_err());
    }
}
