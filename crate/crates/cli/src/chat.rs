//! Interactive chat against a trained checkpoint.

use std::io::{BufRead, Write};

use serde::Serialize;

use topicsel::corpus::{tokenize, TrainingExample};
use topicsel::model::Model;
use topicsel::personasel::SelectionTrace;
use topicsel::{Error, Result};

pub const QUIT: &str = ":quit";

/// One exchange as written to the transcript.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChatTurn {
    pub turn: usize,
    pub utterance: String,
    pub utterance_topic: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionTrace>,
    pub top5: Vec<(String, f64)>,
    pub topic: String,
    pub response: String,
}

pub struct ChatSession<'m> {
    model: &'m Model,
    user: usize,
    history: usize,
    seed: u64,
    turns: Vec<(Vec<String>, usize)>,
    pub transcript: Vec<ChatTurn>,
}

/// Latest topic whose name occurs as a contiguous token run in `tokens`.
pub fn detect_topic(model: &Model, tokens: &[String]) -> Option<usize> {
    let vocab = &model.vocab;
    let mut best: Option<(usize, usize, usize)> = None;
    for t in 0..vocab.num_topics() {
        let name = vocab.topic_tokens(t);
        if name.is_empty() || name.len() > tokens.len() {
            continue;
        }
        for start in (0..=tokens.len() - name.len()).rev() {
            if tokens[start..start + name.len()] == *name {
                let end = start + name.len();
                if best.is_none_or(|(e, l, _)| end > e || (end == e && name.len() > l)) {
                    best = Some((end, name.len(), t));
                }
                break;
            }
        }
    }
    best.map(|(_, _, t)| t)
}

impl<'m> ChatSession<'m> {
    pub fn new(model: &'m Model, user: usize, history: usize, seed: u64) -> Result<Self> {
        if user >= model.user_personas.len() {
            return Err(Error::Data(format!(
                "user {user} is not in the checkpoint ({} users)",
                model.user_personas.len()
            )));
        }
        if history == 0 {
            return Err(Error::Invalid("history must be at least 1".into()));
        }
        Ok(Self {
            model,
            user,
            history,
            seed,
            turns: Vec::new(),
            transcript: Vec::new(),
        })
    }

    /// Adds the user's utterance and produces the system turn.
    pub fn respond(&mut self, utterance: &str) -> Result<ChatTurn> {
        let tokens = tokenize(utterance);
        if tokens.is_empty() {
            return Err(Error::Invalid("empty utterance".into()));
        }
        let topic = detect_topic(self.model, &tokens)
            .or_else(|| self.turns.last().map(|t| t.1))
            .ok_or_else(|| Error::Invalid("no topic recognized; mention a topic name to start".into()))?;
        self.turns.push((tokens, topic));
        let window = &self.turns[self.turns.len().saturating_sub(self.history)..];
        let ex = TrainingExample {
            dialogue_id: 0,
            position: self.turns.len(),
            user: self.user,
            context: window.iter().map(|t| t.0.clone()).collect(),
            topic_path: window.iter().map(|t| t.1).collect(),
            target_topic: 0,
            target_response: Some(Vec::new()),
            gold_personas: None,
        };
        let prepared = self.model.prepare(&ex);
        let pred = self.model.predict(&prepared, self.seed, true)?;
        let vocab = &self.model.vocab;
        let chosen = pred.topic.ranking[0];
        let response = pred.response.map(|r| r.tokens).unwrap_or_default();
        let turn = ChatTurn {
            turn: self.transcript.len(),
            utterance: utterance.trim().to_string(),
            utterance_topic: vocab.topic_name(topic).to_string(),
            selection: pred.selection,
            top5: pred.topic.ranking[..5.min(vocab.num_topics())]
                .iter()
                .map(|&t| (vocab.topic_name(t).to_string(), pred.topic.distribution[t]))
                .collect(),
            topic: vocab.topic_name(chosen).to_string(),
            response: response.join(" "),
        };
        self.turns.push((response, chosen));
        self.transcript.push(turn.clone());
        Ok(turn)
    }

    /// Human-readable rendering of one reply.
    pub fn render(&self, turn: &ChatTurn) -> String {
        let mut out = String::new();
        if let Some(sel) = &turn.selection {
            let personas: Vec<String> = sel
                .persona_ids
                .iter()
                .zip(&sel.scores)
                .map(|(&p, s)| {
                    let mark = if sel.positive.contains(&p) { "+" } else { "-" };
                    format!("{mark}{p}({s:.3})")
                })
                .collect();
            out.push_str(&format!("personas: {}\n", personas.join(" ")));
            out.push_str(&format!("trace: {}\n", sel.to_json()));
        }
        let top: Vec<String> = turn.top5.iter().map(|(t, p)| format!("{t}({p:.3})")).collect();
        out.push_str(&format!("topics: {}\n", top.join(" ")));
        out.push_str(&format!("system [{}]: {}\n", turn.topic, turn.response));
        out
    }

    /// Reads utterances until EOF or `:quit`, writing replies to `output`.
    pub fn run(&mut self, input: impl BufRead, mut output: impl Write) -> Result<()> {
        let io = |e| Error::Data(format!("terminal: {e}"));
        for line in input.lines() {
            let line = line.map_err(io)?;
            let line = line.trim();
            if line == QUIT {
                break;
            }
            if line.is_empty() {
                continue;
            }
            match self.respond(line) {
                Ok(turn) => {
                    let text = self.render(&turn);
                    output.write_all(text.as_bytes()).map_err(io)?;
                }
                Err(Error::Invalid(msg)) => writeln!(output, "note: {msg}").map_err(io)?,
                Err(e) => return Err(e),
            }
            output.flush().map_err(io)?;
        }
        Ok(())
    }

    pub fn transcript_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.transcript {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }
}
