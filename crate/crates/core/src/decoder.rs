//! Causal language decoder over interleaved visual and text embeddings.
//!
//! In panther mode the sequence is `[V'0, q0, a0, V'1, q1, a1, ...]`, each
//! turn's (possibly pruned) visual tokens placed right before its question.
//! In llava-baseline mode one visual block comes first, followed by all the
//! text. Positions are sequential over the assembled sequence; pruned tokens
//! leave no gaps. Only answer tokens (and the closing EOS) are supervised.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::Turn;
use crate::error::{Error, Result};
use crate::instruct::{Vocab, EOS};
use crate::layers;
use crate::numerics::{concat_rows, Tensor, Var};
use crate::params::{Bound, ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    /// Per-turn instruction-aware visual tokens, interleaved with the text.
    #[default]
    Panther,
    /// One instruction-free visual block shared by all turns.
    LlavaBaseline,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Panther => "panther",
            Mode::LlavaBaseline => "llava-baseline",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "panther" => Ok(Mode::Panther),
            "llava-baseline" => Ok(Mode::LlavaBaseline),
            _ => Err(Error::Config(format!(
                "mode must be panther|llava-baseline, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub mode: Mode,
}

/// What a position of the assembled sequence holds; the payload is the
/// turn index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Visual(usize),
    Question(usize),
    Answer(usize),
}

/// Visual tokens of one turn as recorded on the tape, with their spatial
/// indices.
#[derive(Clone, Debug)]
pub struct VisualTokens<'t> {
    pub idx: Vec<usize>,
    /// `len(idx)×d1`; `None` when every token was pruned.
    pub emb: Option<Var<'t>>,
}

impl<'t> VisualTokens<'t> {
    pub fn full(emb: Var<'t>) -> Self {
        Self {
            idx: (0..emb.rows()).collect(),
            emb: Some(emb),
        }
    }

    /// Rows of `emb` at the retained spatial indices.
    pub fn retained(emb: Var<'t>, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            idx: idx.to_vec(),
            emb: if idx.is_empty() {
                None
            } else {
                Some(emb.gather_rows(idx)?)
            },
        })
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }
}

/// Decoder input: embeddings plus per-position bookkeeping.
#[derive(Clone, Debug)]
pub struct AssembledSequence<'t> {
    pub embeddings: Var<'t>,
    pub segments: Vec<Segment>,
    /// True exactly on supervised answer positions.
    pub loss_mask: Vec<bool>,
    /// Token id at every text position, `None` at visual positions.
    pub tokens: Vec<Option<usize>>,
}

impl AssembledSequence<'_> {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn visual_len(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::Visual(_)))
            .count()
    }

    pub fn text_len(&self) -> usize {
        self.len() - self.visual_len()
    }
}

pub const DECODER: &str = "dec";

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::Config("decoder depth must be >= 1".into()));
        }
        if cfg.heads == 0 || !cfg.width.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by {} heads",
                cfg.width, cfg.heads
            )));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let g = ParamGroup::Decoder;
        let d = self.cfg.width;
        store.insert("dec.tok", Tensor::randn(&[self.cfg.vocab_size, d], 0.5, rng), g);
        store.insert("dec.pos", Tensor::randn(&[self.cfg.max_len, d], 0.01, rng), g);
        for j in 0..self.cfg.depth {
            layers::init_block(store, &format!("dec.layer{j}"), d, g, rng);
        }
        layers::init_layer_norm(store, "dec.ln_f", d, g);
        layers::init_linear(store, "dec.head", d, self.cfg.vocab_size, g, rng);
    }

    /// Token embeddings, one row per id.
    pub fn embed_tokens<'t>(&self, b: &Bound<'_, 't>, ids: &[usize]) -> Result<Var<'t>> {
        b.var("dec.tok")?.gather_rows(ids)
    }

    /// Lays out `turns` with their visual tokens. With `open_last`, the last
    /// turn's answer is left out so the sequence ends on its question, ready
    /// for generation.
    pub fn assemble<'t>(
        &self,
        b: &Bound<'_, 't>,
        vocab: &Vocab,
        turns: &[Turn],
        visual: &[VisualTokens<'t>],
        open_last: bool,
    ) -> Result<AssembledSequence<'t>> {
        if turns.is_empty() {
            return Err(Error::EmptyInput("conversation without turns".into()));
        }
        let expected = match self.cfg.mode {
            Mode::Panther => turns.len(),
            Mode::LlavaBaseline => 1,
        };
        if visual.len() != expected {
            return Err(Error::Config(format!(
                "{} mode with {} turns needs {expected} visual blocks, got {}",
                self.cfg.mode,
                turns.len(),
                visual.len()
            )));
        }
        let mut parts = Vec::new();
        let mut segments = Vec::new();
        let mut loss_mask = Vec::new();
        let mut tokens = Vec::new();
        let push_visual = |k: usize,
                               v: &VisualTokens<'t>,
                               parts: &mut Vec<Var<'t>>,
                               segments: &mut Vec<Segment>,
                               loss_mask: &mut Vec<bool>,
                               tokens: &mut Vec<Option<usize>>|
         -> Result<()> {
            if let Some(e) = v.emb {
                if e.cols() != self.cfg.width {
                    return Err(Error::Dimension {
                        op: "assemble visual",
                        left: e.shape(),
                        right: vec![self.cfg.width],
                    });
                }
                parts.push(e);
                segments.extend(std::iter::repeat_n(Segment::Visual(k), v.len()));
                loss_mask.extend(std::iter::repeat_n(false, v.len()));
                tokens.extend(std::iter::repeat_n(None, v.len()));
            }
            Ok(())
        };
        for (k, turn) in turns.iter().enumerate() {
            if self.cfg.mode == Mode::Panther || k == 0 {
                let v = &visual[if self.cfg.mode == Mode::Panther { k } else { 0 }];
                push_visual(k, v, &mut parts, &mut segments, &mut loss_mask, &mut tokens)?;
            }
            let q = vocab.encode(&turn.question)?;
            let mut ids = q.clone();
            segments.extend(std::iter::repeat_n(Segment::Question(k), q.len()));
            loss_mask.extend(std::iter::repeat_n(false, q.len()));
            let last = k + 1 == turns.len();
            if !(open_last && last) {
                let mut a = vocab.encode(&turn.answer)?;
                a.push(EOS);
                segments.extend(std::iter::repeat_n(Segment::Answer(k), a.len()));
                loss_mask.extend(std::iter::repeat_n(true, a.len()));
                ids.extend(a);
            }
            tokens.extend(ids.iter().map(|&i| Some(i)));
            if !ids.is_empty() {
                parts.push(self.embed_tokens(b, &ids)?);
            }
        }
        let len = segments.len();
        if len > self.cfg.max_len {
            return Err(Error::SequenceOverflow {
                len,
                max: self.cfg.max_len,
            });
        }
        Ok(AssembledSequence {
            embeddings: concat_rows(&parts)?,
            segments,
            loss_mask,
            tokens,
        })
    }

    /// Logits `T×V` for a raw `T×d1` embedding sequence, strictly causal.
    pub fn forward_embeddings<'t>(&self, b: &Bound<'_, 't>, emb: Var<'t>) -> Result<Var<'t>> {
        let t = emb.rows();
        if t > self.cfg.max_len {
            return Err(Error::SequenceOverflow {
                len: t,
                max: self.cfg.max_len,
            });
        }
        if emb.cols() != self.cfg.width {
            return Err(Error::Dimension {
                op: "decoder input",
                left: emb.shape(),
                right: vec![self.cfg.width],
            });
        }
        let mut h = emb.add(b.var("dec.pos")?.slice_rows(0, t)?)?;
        for j in 0..self.cfg.depth {
            h = layers::block(b, &format!("dec.layer{j}"), h, self.cfg.heads, None, true)?.out;
        }
        let h = layers::layer_norm(b, "dec.ln_f", h)?;
        layers::linear(b, "dec.head", h)
    }

    pub fn causal_forward<'t>(&self, b: &Bound<'_, 't>, seq: &AssembledSequence<'t>) -> Result<Var<'t>> {
        self.forward_embeddings(b, seq.embeddings)
    }

    /// Mean next-token cross-entropy over every answer position of every
    /// turn.
    pub fn interleaved_loss<'t>(&self, seq: &AssembledSequence<'t>, logits: Var<'t>) -> Result<Var<'t>> {
        if !seq.loss_mask.iter().any(|&m| m) {
            return Err(Error::DegenerateData("no answer tokens to supervise".into()));
        }
        if seq.loss_mask[0] {
            return Err(Error::DegenerateData(
                "the first position cannot be supervised".into(),
            ));
        }
        let t = seq.len();
        let targets: Vec<usize> = seq.tokens[1..].iter().map(|x| x.unwrap_or(0)).collect();
        logits
            .slice_rows(0, t - 1)?
            .cross_entropy_masked(&targets, &seq.loss_mask[1..])
    }

    /// Argmax decoding after `prefix` until EOS or `max_new` tokens; the EOS
    /// is not returned.
    pub fn greedy_generate<'t>(
        &self,
        b: &Bound<'_, 't>,
        prefix: &AssembledSequence<'t>,
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut emb = prefix.embeddings;
        for _ in 0..max_new {
            if emb.rows() >= self.cfg.max_len {
                break;
            }
            let logits = self.forward_embeddings(b, emb)?;
            let next = logits.with_value(|l| argmax(l.row(l.rows() - 1)));
            if next == EOS {
                break;
            }
            out.push(next);
            emb = concat_rows(&[emb, self.embed_tokens(b, &[next])?])?;
        }
        Ok(out)
    }

    /// Mean negative log-likelihood of `answer` given `[visual, question]`,
    /// computed position by position straight from the logits.
    pub fn single_turn_nll<'t>(
        &self,
        b: &Bound<'_, 't>,
        visual: Var<'t>,
        question: &[usize],
        answer: &[usize],
    ) -> Result<f64> {
        let mut ids = question.to_vec();
        ids.extend_from_slice(answer);
        let emb = concat_rows(&[visual, self.embed_tokens(b, &ids)?])?;
        let logits = self.forward_embeddings(b, emb)?.value();
        let first = visual.rows() + question.len();
        let mut nll = 0.0;
        for (i, &y) in answer.iter().enumerate() {
            let row = logits.row(first + i - 1);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[y];
        }
        Ok(nll / answer.len() as f64)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
