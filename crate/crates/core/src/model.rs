//! Full model: encoders, global topic expansion, persona selector, topic head
//! and responder, plus the ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, KeyValues};
use crate::corpus::{Corpus, TrainingExample, Vocab, UNK};
use crate::encoding::{
    encode_context, encode_tokens, encode_topic_path, first_kept_sentence, init_persona_embeddings, pool_sequence,
    EmbeddingTables, Pooling, TableSizes,
};
use crate::error::{Error, Result};
use crate::expansion::{
    aggregate_global_topics, build_persona_topic_sets, co_occurrence, neighbour_aggregate, persona_global_vectors,
    reencode_topic_path, threshold_mask, turn_persona_relevance, ExpansionParams, PersonaTopicSets,
};
use crate::nn::layers::TransformerEncoder;
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::personasel::{
    aggregate_set, contrastive_loss, persona_relevance, persona_topic_score, split_persona_sets, PersonaSplit,
    SelectionTrace, SelectorParams,
};
use crate::responder::{
    decode_states, generation_loss, greedy_decode, output_logits, response_targets, CopySource, DecodedResponse,
    Responder, ResponseTargets,
};
use crate::topichead::{topic_logits, TopicHead, TopicPrediction};

/// Deterministic 64-bit mix of two values (splitmix64 finalizer).
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(a << 6)
        .wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ----- variants -------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    WoGlobalTopic,
    WTopicSimilar,
    WCoOccurrence,
    WoPersona,
    WoPersonaSelection,
    WRandomPersonaSelection,
    WoAuxiliaryTask,
    WoContrastiveLearning,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::WoGlobalTopic,
        Variant::WTopicSimilar,
        Variant::WCoOccurrence,
        Variant::WoPersona,
        Variant::WoPersonaSelection,
        Variant::WRandomPersonaSelection,
        Variant::WoAuxiliaryTask,
        Variant::WoContrastiveLearning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoGlobalTopic => "wo_global_topic",
            Variant::WTopicSimilar => "w_topic_similar",
            Variant::WCoOccurrence => "w_co_occurrence",
            Variant::WoPersona => "wo_persona",
            Variant::WoPersonaSelection => "wo_persona_selection",
            Variant::WRandomPersonaSelection => "w_random_persona_selection",
            Variant::WoAuxiliaryTask => "wo_auxiliary_task",
            Variant::WoContrastiveLearning => "wo_contrastive_learning",
        }
    }

    pub fn global_mode(self) -> GlobalMode {
        match self {
            Variant::WoGlobalTopic | Variant::WoPersona => GlobalMode::None,
            Variant::WTopicSimilar => GlobalMode::TopicSimilar,
            Variant::WCoOccurrence => GlobalMode::CoOccurrence,
            _ => GlobalMode::Persona,
        }
    }

    pub fn selection_mode(self) -> SelectionMode {
        match self {
            Variant::WoPersona => SelectionMode::Disabled,
            Variant::WoPersonaSelection => SelectionMode::All,
            Variant::WRandomPersonaSelection => SelectionMode::Random,
            _ => SelectionMode::Threshold,
        }
    }

    pub fn auxiliary_mode(self) -> AuxMode {
        match self {
            Variant::WoPersona | Variant::WoPersonaSelection | Variant::WoAuxiliaryTask => AuxMode::None,
            Variant::WoContrastiveLearning => AuxMode::Nll,
            _ => AuxMode::Contrastive,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant {s}")))
    }
}

/// How turn representations receive global topic information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMode {
    Persona,
    TopicSimilar,
    CoOccurrence,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Threshold,
    All,
    Random,
    Disabled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMode {
    Contrastive,
    Nll,
    None,
}

/// Which code paths a forward pass actually took.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub global: GlobalMode,
    pub selection: SelectionMode,
    pub auxiliary: AuxMode,
    pub persona_path: bool,
    pub fallback: bool,
    /// The auxiliary loss was defined but had no negative set.
    pub contrast_skipped: bool,
}

// ----- configuration --------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub max_tokens: usize,
    pub max_response_len: usize,
    /// Global topics per persona.
    pub k: usize,
    pub pooling: Pooling,
    pub variant: Variant,
    /// Personas drawn by the random-selection variant.
    pub random_personas: usize,
    /// Stop the auxiliary loss from updating the topic embeddings.
    pub detach_contrastive_topics: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            encoder_layers: 2,
            heads: 4,
            ffn_width: 256,
            decoder_layers: 2,
            dropout: 0.1,
            max_tokens: 128,
            max_response_len: 24,
            k: 10,
            pooling: Pooling::Mean,
            variant: Variant::Full,
            random_personas: 2,
            detach_contrastive_topics: false,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 13] = [
        "d",
        "layers",
        "heads",
        "ffn_width",
        "decoder_layers",
        "dropout",
        "max_tokens",
        "max_response_len",
        "k",
        "pooling",
        "variant",
        "random_personas",
        "detach_contrastive_topics",
    ];

    /// Applies recognised keys; `ffn_width` follows `d` unless set explicitly.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        let mut ffn_set = false;
        for (k, v) in kv.iter() {
            match k {
                "d" => self.d = config::parse(k, v)?,
                "layers" => self.encoder_layers = config::parse(k, v)?,
                "heads" => self.heads = config::parse(k, v)?,
                "ffn_width" => {
                    self.ffn_width = config::parse(k, v)?;
                    ffn_set = true;
                }
                "decoder_layers" => self.decoder_layers = config::parse(k, v)?,
                "dropout" => self.dropout = config::parse(k, v)?,
                "max_tokens" => self.max_tokens = config::parse(k, v)?,
                "max_response_len" => self.max_response_len = config::parse(k, v)?,
                "k" => self.k = config::parse(k, v)?,
                "pooling" => self.pooling = v.parse()?,
                "variant" => self.variant = v.parse()?,
                "random_personas" => self.random_personas = config::parse(k, v)?,
                "detach_contrastive_topics" => self.detach_contrastive_topics = config::parse(k, v)?,
                _ => {}
            }
        }
        if kv.get("d").is_some() && !ffn_set {
            self.ffn_width = 4 * self.d;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        crate::encoding::EncoderConfig {
            d: self.d,
            n_layers: self.encoder_layers,
            n_heads: self.heads,
            ffn_width: self.ffn_width,
            dropout: self.dropout,
            max_tokens: self.max_tokens,
        }
        .validate()?;
        if self.max_response_len == 0 || self.k == 0 || self.random_personas == 0 {
            return Err(Error::Invalid(
                "max_response_len, k and random_personas must be positive".into(),
            ));
        }
        Ok(())
    }
}

// ----- prepared examples ----------------------------------------------------

/// A training example mapped to ids and fitted to the token budget.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub dialogue_id: u64,
    pub position: usize,
    pub user: usize,
    pub context: Vec<Vec<usize>>,
    pub topic_path: Vec<usize>,
    pub target_topic: usize,
    /// Context tokens as copy source, aligned with the encoder's token rows.
    pub source: CopySource,
    pub response: Option<Vec<String>>,
    pub gold_personas: Option<Vec<usize>>,
}

impl Prepared {
    pub fn id(&self) -> String {
        format!("{}:{}", self.dialogue_id, self.position)
    }
}

/// Maps words to ids; drops the oldest sentences (with their topics) when the
/// context exceeds `max_tokens`, and keeps only the tail of an over-long
/// newest sentence.
pub fn prepare(ex: &TrainingExample, vocab: &Vocab, max_tokens: usize, max_response_len: usize) -> Prepared {
    let mut words: Vec<Vec<String>> = ex
        .context
        .iter()
        .map(|s| {
            if s.is_empty() {
                vec!["<unk>".to_string()]
            } else {
                s.clone()
            }
        })
        .collect();
    let lengths: Vec<usize> = words.iter().map(Vec::len).collect();
    let first = first_kept_sentence(&lengths, max_tokens);
    words.drain(..first);
    if let [only] = words.as_mut_slice() {
        if only.len() > max_tokens {
            only.drain(..only.len() - max_tokens);
        }
    }
    let flat: Vec<&String> = words.iter().flatten().collect();
    let source = CopySource::build(&flat, vocab);
    Prepared {
        dialogue_id: ex.dialogue_id,
        position: ex.position,
        user: ex.user,
        context: words
            .iter()
            .map(|s| s.iter().map(|w| vocab.lookup(w)).collect())
            .collect(),
        topic_path: ex.topic_path[first..].to_vec(),
        target_topic: ex.target_topic,
        source,
        response: ex
            .target_response
            .as_ref()
            .map(|r| r.iter().take(max_response_len).cloned().collect()),
        gold_personas: ex.gold_personas.clone(),
    }
}

// ----- model ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub user_personas: Vec<Vec<usize>>,
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    pub context_encoder: TransformerEncoder,
    pub topic_encoder: TransformerEncoder,
    pub expansion: ExpansionParams,
    pub selector: SelectorParams,
    pub topic_head: TopicHead,
    pub responder: Responder,
    pub topic_sets: PersonaTopicSets,
    /// Adjacent-topic statistics for the co-occurrence variant.
    pub co_occurrence: Option<Tensor>,
}

/// Intermediate results shared by the losses and by decoding.
pub struct Encoded {
    pub context_tokens: Var,
    pub e_u: Var,
    pub h_pos: Var,
    pub h_tilde: Var,
    pub topic_logits: Var,
    pub persona_scores: Vec<f64>,
    pub split: Option<PersonaSplit>,
    pub aux_loss: Option<Var>,
    pub trace: ForwardTrace,
    pub turn_scores: Option<Tensor>,
}

/// Decoder memory and copy source for one chosen topic.
pub struct ResponseInputs {
    pub memory: Var,
    pub source_states: Var,
    pub source: CopySource,
}

/// Per-example loss terms as graph nodes.
pub struct Losses {
    pub topic: Var,
    pub aux: Option<Var>,
    pub response: Option<Var>,
    pub response_targets: Option<ResponseTargets>,
    pub response_logits: Option<Var>,
    pub encoded: Encoded,
}

/// Inference output for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub topic: TopicPrediction,
    pub selection: Option<SelectionTrace>,
    pub response: Option<DecodedResponse>,
}

impl Model {
    /// Builds a freshly initialized model. `corpus` supplies the persona,
    /// user and topic tables and (for the co-occurrence variant) the training
    /// dialogues.
    pub fn new(
        config: ModelConfig,
        corpus: &Corpus,
        vocab: Vocab,
        persona_init: Option<Tensor>,
        seed: u64,
    ) -> Result<Model> {
        if vocab.num_topics() != corpus.topics.len() {
            return Err(Error::Data("vocabulary and corpus disagree on topics".into()));
        }
        let d = config.d;
        let persona_init = match persona_init {
            Some(t) => t,
            None => init_persona_embeddings(&corpus.personas, d)?,
        };
        if persona_init.shape() != (corpus.personas.len(), d) {
            return Err(Error::Data(format!(
                "persona vectors are {}x{}, expected {}x{d}",
                persona_init.rows(),
                persona_init.cols(),
                corpus.personas.len()
            )));
        }
        let user_personas = corpus.users.iter().map(|u| u.persona_ids.clone()).collect();
        let co = (config.variant == Variant::WCoOccurrence).then(|| co_occurrence(corpus));
        Model::assemble(config, vocab, user_personas, persona_init, co, seed)
    }

    /// Builds a model from its non-parameter parts; parameters are freshly
    /// initialized from `seed` (the persona table from `persona_init`).
    pub fn assemble(
        config: ModelConfig,
        vocab: Vocab,
        user_personas: Vec<Vec<usize>>,
        persona_init: Tensor,
        co_occurrence: Option<Tensor>,
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        let n_topics = vocab.num_topics();
        if config.k > n_topics {
            return Err(Error::Invalid(format!(
                "k={} exceeds the number of topics {n_topics}",
                config.k
            )));
        }
        let d = config.d;
        let n_personas = persona_init.rows();
        if persona_init.cols() != d {
            return Err(Error::Data(format!(
                "persona vectors have width {}, expected {d}",
                persona_init.cols()
            )));
        }
        if let Some(p) = user_personas.iter().flatten().find(|&&p| p >= n_personas) {
            return Err(Error::Data(format!("user persona {p} outside the persona table")));
        }
        if config.variant == Variant::WCoOccurrence && co_occurrence.is_none() {
            return Err(Error::Data(
                "the co-occurrence variant needs topic co-occurrence statistics".into(),
            ));
        }
        if let Some(c) = &co_occurrence {
            if c.shape() != (n_topics, n_topics) {
                return Err(Error::Data(
                    "co-occurrence matrix does not match the topic count".into(),
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sizes = TableSizes {
            words: vocab.num_words(),
            topics: n_topics,
            users: user_personas.len(),
            positions: config.max_tokens.max(config.max_response_len + 1),
        };
        let tables = EmbeddingTables::new(&mut store, &sizes, d, persona_init, &mut rng)?;
        let (h, f, l) = (config.heads, config.ffn_width, config.encoder_layers);
        let context_encoder = TransformerEncoder::new(&mut store, "encoder_c", d, h, f, l, &mut rng)?;
        let topic_encoder = TransformerEncoder::new(&mut store, "encoder_tp", d, h, f, l, &mut rng)?;
        let expansion = ExpansionParams::new(&mut store, d, h, f, l, &mut rng)?;
        let selector = SelectorParams::new(&mut store, d, &mut rng)?;
        let topic_head = TopicHead::new(&mut store, d, &mut rng)?;
        let responder = Responder::new(&mut store, d, h, f, config.decoder_layers, &mut rng)?;
        let topic_sets = build_persona_topic_sets(&store, &tables, expansion.affinity, config.k)?;
        Ok(Model {
            config,
            vocab,
            user_personas,
            store,
            tables,
            context_encoder,
            topic_encoder,
            expansion,
            selector,
            topic_head,
            responder,
            topic_sets,
            co_occurrence,
        })
    }

    /// Errors unless `corpus` has this model's topics, users and persona count.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        let topics_match = corpus.topics.len() == self.vocab.num_topics()
            && corpus
                .topics
                .iter()
                .enumerate()
                .all(|(i, t)| t.name == self.vocab.topic_name(i));
        if !topics_match {
            return Err(Error::Data(
                "corpus topics do not match the checkpoint vocabulary".into(),
            ));
        }
        let users_match = corpus.users.len() == self.user_personas.len()
            && corpus
                .users
                .iter()
                .zip(&self.user_personas)
                .all(|(u, p)| &u.persona_ids == p);
        if !users_match {
            return Err(Error::Data("corpus users do not match the checkpoint".into()));
        }
        if corpus.personas.len() != self.store.get(self.tables.persona).rows() {
            return Err(Error::Data("corpus persona count does not match the checkpoint".into()));
        }
        Ok(())
    }

    pub fn prepare(&self, ex: &TrainingExample) -> Prepared {
        prepare(ex, &self.vocab, self.config.max_tokens, self.config.max_response_len)
    }

    /// Recomputes every persona's top-k global topics from current parameters.
    pub fn refresh_topic_sets(&mut self) -> Result<()> {
        self.topic_sets = build_persona_topic_sets(&self.store, &self.tables, self.expansion.affinity, self.config.k)?;
        Ok(())
    }

    /// Everything up to the topic distribution; `target` enables the auxiliary loss.
    pub fn encode(&self, g: &mut Graph, ex: &Prepared, target: Option<usize>, selection_seed: u64) -> Encoded {
        let variant = self.config.variant;
        let pooling = self.config.pooling;
        let ctx = encode_context(
            g,
            &self.tables,
            &self.context_encoder,
            &ex.context,
            self.config.max_tokens,
        );
        debug_assert_eq!(ctx.dropped, 0, "examples are fitted by prepare");
        let h_c = ctx.sentences;
        let h_t = encode_topic_path(g, &self.tables, &self.topic_encoder, &ex.topic_path);
        let e_u = g.embed(self.tables.user, &[ex.user]);
        let persona_ids = &self.user_personas[ex.user];
        let persona_path = variant != Variant::WoPersona;
        let e_p = persona_path.then(|| g.embed(self.tables.persona, persona_ids));

        let global = variant.global_mode();
        let mut turn_scores = None;
        let h_prime = match global {
            GlobalMode::Persona => {
                let e_p = e_p.expect("persona path");
                let s = turn_persona_relevance(g, &self.expansion.turn_mlp, h_c, e_u, h_t, e_p);
                let mask = threshold_mask(g.value(s));
                turn_scores = Some(g.value(s).clone());
                let gv =
                    persona_global_vectors(g, &self.tables, self.expansion.affinity, persona_ids, &self.topic_sets);
                aggregate_global_topics(g, &self.expansion.ffn, h_t, s, mask, gv)
            }
            GlobalMode::TopicSimilar | GlobalMode::CoOccurrence => {
                let agg = neighbour_aggregate(
                    g,
                    &self.tables,
                    &ex.topic_path,
                    self.config.k,
                    self.co_occurrence.as_ref(),
                );
                let x = g.add(h_t, agg);
                self.expansion.ffn.forward(g, x)
            }
            GlobalMode::None => h_t,
        };
        let h_tilde = reencode_topic_path(g, &self.expansion.reencoder, h_prime);
        let pooled_c = pool_sequence(g, h_c, pooling);
        let pooled_tp = pool_sequence(g, h_tilde, pooling);

        let selection = variant.selection_mode();
        let auxiliary = variant.auxiliary_mode();
        let topics = g.param(self.tables.topic);
        let mut persona_scores = Vec::new();
        let mut split = None;
        let mut aux_loss = None;
        let mut contrast_skipped = false;
        let h_pos = match e_p {
            None => g.input(Tensor::zeros(1, self.config.d)),
            Some(e_p) => {
                let s = persona_relevance(g, &self.selector.mlp, pooled_c, e_u, pooled_tp, e_p);
                persona_scores = g.value(s).data().to_vec();
                let sp = match selection {
                    SelectionMode::Threshold => split_persona_sets(&persona_scores),
                    SelectionMode::All => PersonaSplit::all(persona_scores.len()),
                    SelectionMode::Random => {
                        random_split(persona_scores.len(), self.config.random_personas, selection_seed)
                    }
                    SelectionMode::Disabled => unreachable!("persona path is off"),
                };
                let h_pos = aggregate_set(g, s, e_p, &sp.positive, false);
                if let Some(target) = target {
                    let aux_topics = if self.config.detach_contrastive_topics {
                        g.detach(topics)
                    } else {
                        topics
                    };
                    let w_g = g.param(self.selector.w_g);
                    match auxiliary {
                        AuxMode::Contrastive if !sp.negative.is_empty() => {
                            let h_neg = aggregate_set(g, s, e_p, &sp.negative, true);
                            let p_pos = persona_topic_score(g, h_pos, w_g, aux_topics);
                            let p_neg = persona_topic_score(g, h_neg, w_g, aux_topics);
                            aux_loss = Some(contrastive_loss(g, p_pos, p_neg, target));
                        }
                        AuxMode::Contrastive => contrast_skipped = true,
                        AuxMode::Nll => {
                            let hw = g.matmul(h_pos, w_g);
                            let logits = g.matmul_t(hw, aux_topics);
                            aux_loss = Some(g.cross_entropy(logits, target));
                        }
                        AuxMode::None => {}
                    }
                }
                split = Some(sp);
                h_pos
            }
        };
        let logits = topic_logits(g, &self.topic_head, pooled_c, e_u, pooled_tp, h_pos, topics);
        let trace = ForwardTrace {
            global,
            selection,
            auxiliary,
            persona_path,
            fallback: split.as_ref().is_some_and(|s| s.fallback),
            contrast_skipped,
        };
        Encoded {
            context_tokens: ctx.tokens,
            e_u,
            h_pos,
            h_tilde,
            topic_logits: logits,
            persona_scores,
            split,
            aux_loss,
            trace,
            turn_scores,
        }
    }

    /// Decoder memory `[context tokens; topic name tokens; e_u; h_P+; H̃'_tp]`
    /// and the copy source for `topic`.
    pub fn response_inputs(&self, g: &mut Graph, enc: &Encoded, ex: &Prepared, topic: usize) -> ResponseInputs {
        let name = self.vocab.topic_tokens(topic);
        let ids: Vec<usize> = if name.is_empty() {
            vec![UNK]
        } else {
            name.iter().map(|w| self.vocab.lookup(w)).collect()
        };
        let topic_states = encode_tokens(g, &self.tables, &self.context_encoder, &ids);
        let source_states = g.concat_rows(&[enc.context_tokens, topic_states]);
        let source = self.response_inputs_source(ex, topic);
        let memory = g.concat_rows(&[source_states, enc.e_u, enc.h_pos, enc.h_tilde]);
        ResponseInputs {
            memory,
            source_states,
            source,
        }
    }

    /// Copy source used when responding with `topic`.
    pub fn response_inputs_source(&self, ex: &Prepared, topic: usize) -> CopySource {
        let mut source = ex.source.clone();
        let name = self.vocab.topic_tokens(topic);
        if name.is_empty() {
            source.extend(&["<unk>".to_string()], &self.vocab);
        } else {
            source.extend(name, &self.vocab);
        }
        source
    }

    /// All loss terms for one example (teacher forcing on the gold topic).
    pub fn losses(&self, g: &mut Graph, ex: &Prepared, selection_seed: u64) -> Losses {
        let encoded = self.encode(g, ex, Some(ex.target_topic), selection_seed);
        let topic = g.cross_entropy(encoded.topic_logits, ex.target_topic);
        let mut response = None;
        let mut response_targets_out = None;
        let mut response_logits = None;
        if let Some(words) = &ex.response {
            let inputs = self.response_inputs(g, &encoded, ex, ex.target_topic);
            let targets = response_targets(words, &self.vocab, &inputs.source);
            let (states, _) = decode_states(g, &self.responder, &self.tables, &targets.inputs, inputs.memory)
                .expect("prepared responses fit the position table");
            let word_table = g.param(self.tables.word);
            let logits = output_logits(g, &self.responder, states, word_table, Some(inputs.source_states));
            response = Some(generation_loss(g, logits, &targets));
            response_logits = Some(logits);
            response_targets_out = Some(targets);
        }
        Losses {
            topic,
            aux: encoded.aux_loss,
            response,
            response_targets: response_targets_out,
            response_logits,
            encoded,
        }
    }

    /// Topic ranking, persona selection and (for system turns, if `decode`) a
    /// greedy response copied from the predicted topic.
    pub fn predict(&self, ex: &Prepared, selection_seed: u64, decode: bool) -> Result<Prediction> {
        let mut g = Graph::new(&self.store);
        let enc = self.encode(&mut g, ex, None, selection_seed);
        let topic = TopicPrediction::from_logits(g.value(enc.topic_logits).data(), Some(ex.target_topic));
        let selection = enc
            .split
            .as_ref()
            .map(|s| SelectionTrace::new(&self.user_personas[ex.user], &enc.persona_scores, s));
        let response = if decode && ex.response.is_some() {
            let inputs = self.response_inputs(&mut g, &enc, ex, topic.ranking[0]);
            Some(greedy_decode(
                &mut g,
                &self.responder,
                &self.tables,
                inputs.memory,
                Some(inputs.source_states),
                &inputs.source,
                &self.vocab,
                self.config.max_response_len,
            )?)
        } else {
            None
        };
        Ok(Prediction {
            topic,
            selection,
            response,
        })
    }

    /// Summed response NLL and target count under teacher forcing (gold topic).
    pub fn response_nll(&self, ex: &Prepared) -> Option<(f64, usize)> {
        ex.response.as_ref()?;
        let mut g = Graph::new(&self.store);
        let l = self.losses(&mut g, ex, 0);
        let n = l.response_targets.as_ref().map(|t| t.columns.len())?;
        Some((g.scalar(l.response?) * n as f64, n))
    }
}

/// `count` personas drawn uniformly as the positive set.
pub fn random_split(n: usize, count: usize, seed: u64) -> PersonaSplit {
    let count = count.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positive = sample(&mut rng, n, count).into_vec();
    positive.sort_unstable();
    let negative = (0..n).filter(|i| !positive.contains(i)).collect();
    PersonaSplit {
        positive,
        negative,
        fallback: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::window_examples;
    use crate::synthgen::{generate_world, WorldSpec};

    fn small_world() -> (Corpus, Vocab) {
        let spec = WorldSpec {
            n_users: 6,
            n_personas_global: 8,
            personas_per_user: 3,
            n_topics: 12,
            topics_per_persona_affinity: 3,
            n_dialogues: 6,
            ..WorldSpec::default()
        };
        let (c, _) = generate_world(&spec).unwrap();
        let v = Vocab::build(&c);
        (c, v)
    }

    fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            d: 8,
            encoder_layers: 1,
            heads: 2,
            ffn_width: 16,
            decoder_layers: 1,
            k: 3,
            variant,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn prepare_keeps_newest_and_aligns_topics() {
        let ex = TrainingExample {
            dialogue_id: 1,
            position: 3,
            user: 0,
            context: vec![vec!["a".into(); 4], vec!["b".into(); 4], vec!["c".into(); 4]],
            topic_path: vec![0, 1, 2],
            target_topic: 1,
            target_response: Some(vec!["x".into(); 40]),
            gold_personas: None,
        };
        let v = Vocab::from_parts(
            ["<pad>", "<bos>", "<eos>", "<unk>", "a", "b", "c"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            vec!["t0".into(), "t1".into(), "t2".into()],
        );
        let p = prepare(&ex, &v, 9, 24);
        assert_eq!(p.topic_path, vec![1, 2]);
        assert_eq!(p.context, vec![vec![5; 4], vec![6; 4]]);
        assert_eq!(p.source.len(), 8);
        assert_eq!(p.response.unwrap().len(), 24);
        let p = prepare(&ex, &v, 3, 24);
        assert_eq!(p.context, vec![vec![6; 3]]);
        assert_eq!(p.topic_path, vec![2]);
    }

    #[test]
    fn random_split_is_seeded() {
        let a = random_split(4, 2, 11);
        assert_eq!(a, random_split(4, 2, 11));
        assert_eq!(a.positive.len(), 2);
        assert_eq!(a.negative.len(), 2);
        assert_eq!(random_split(1, 2, 0).positive, vec![0]);
    }

    #[test]
    fn every_variant_runs_and_reports_its_path() {
        let (c, v) = small_world();
        let examples = window_examples(&c, 4);
        for variant in Variant::ALL {
            let m = Model::new(tiny_config(variant), &c, v.clone(), None, 1).unwrap();
            let ex = m.prepare(&examples[3]);
            let mut g = Graph::new(&m.store);
            let l = m.losses(&mut g, &ex, 5);
            let t = &l.encoded.trace;
            assert_eq!(t.global, variant.global_mode());
            assert_eq!(t.selection, variant.selection_mode());
            assert_eq!(t.persona_path, variant != Variant::WoPersona);
            assert!(g.scalar(l.topic).is_finite());
            if variant.auxiliary_mode() == AuxMode::None {
                assert!(l.aux.is_none(), "{variant}");
            }
            if variant == Variant::WoPersona {
                assert!(g.value(l.encoded.h_pos).data().iter().all(|&x| x == 0.0));
            }
            let p = m.predict(&ex, 5, true).unwrap();
            assert!((p.topic.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let (c, v) = small_world();
        let examples = window_examples(&c, 7);
        let m = Model::new(tiny_config(Variant::Full), &c, v, None, 2).unwrap();
        let ex = m.prepare(&examples[5]);
        assert_eq!(m.predict(&ex, 0, true).unwrap(), m.predict(&ex, 0, true).unwrap());
    }
}
