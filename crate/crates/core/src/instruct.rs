//! Instruction side of the visual prompts: tokenizer, frozen text encoder,
//! the trainable projection into ViT width, and the shared prompt banks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, Activation};
use crate::numerics::{Tensor, Var};
use crate::params::{Bound, ParamGroup, ParamStore};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Closed word-level vocabulary. Ids are dense in `[0, len)`, specials
/// first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by `words`; duplicates are ignored.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            let w = w.as_ref();
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len());
                tokens.push(w.to_string());
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace-separated words to ids, no padding.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Vocabulary(w.to_string())))
            .collect()
    }

    /// Ids back to space-joined words, specials skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected special token {s}"),
                });
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("empty or duplicate token {t:?}"),
                });
            }
        }
        Ok(Self { tokens, index })
    }
}

/// Fixed-length ids and validity mask: truncated to `l_max`, padded with
/// `PAD`.
pub fn tokenize(text: &str, vocab: &Vocab, l_max: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut ids = vocab.encode(text)?;
    ids.truncate(l_max);
    let mut mask = vec![true; ids.len()];
    ids.resize(l_max, PAD);
    mask.resize(l_max, false);
    Ok((ids, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub l_max: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    /// Seeds the frozen weights independently of every other component.
    pub seed: u64,
}

/// Small frozen transformer producing per-token instruction embeddings.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig) -> Result<Self> {
        if cfg.heads == 0 || !cfg.width.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "text width {} not divisible by {} heads",
                cfg.width, cfg.heads
            )));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn init(&self, store: &mut ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let g = ParamGroup::TextEncoder;
        let d = self.cfg.width;
        store.insert(
            "text.tok",
            Tensor::randn(&[self.cfg.vocab_size, d], 1.0, &mut rng),
            g,
        );
        store.insert("text.pos", Tensor::randn(&[self.cfg.l_max, d], 0.5, &mut rng), g);
        for j in 0..self.cfg.depth {
            layers::init_block(store, &format!("text.layer{j}"), d, g, &mut rng);
        }
        layers::init_layer_norm(store, "text.ln_out", d, g);
    }

    /// `L_max×d_t` contextual embeddings; masked rows are zero and masked
    /// tokens are invisible to every other position.
    pub fn encode<'t>(&self, b: &Bound<'_, 't>, ids: &[usize], mask: &[bool]) -> Result<Var<'t>> {
        let l = ids.len();
        if l > self.cfg.l_max || mask.len() != l {
            return Err(Error::Dimension {
                op: "text_encode",
                left: vec![l, mask.len()],
                right: vec![self.cfg.l_max],
            });
        }
        let x = b
            .var("text.tok")?
            .gather_rows(ids)?
            .add(b.var("text.pos")?.slice_rows(0, l)?)?;
        let mut h = x;
        for j in 0..self.cfg.depth {
            h = layers::block(b, &format!("text.layer{j}"), h, self.cfg.heads, Some(mask), false)?.out;
        }
        layers::layer_norm(b, "text.ln_out", h)?.mask_rows(mask)
    }
}

/// Trainable two-layer MLP projecting text embeddings to ViT width.
#[derive(Clone, Debug)]
pub struct IpGenerator {
    pub text_width: usize,
    pub vit_width: usize,
}

impl IpGenerator {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        layers::init_mlp(
            store,
            "ipgen",
            self.text_width,
            self.vit_width,
            self.vit_width,
            ParamGroup::IpGenerator,
            rng,
        );
    }

    /// Projects per-token text embeddings; masked rows stay zero.
    pub fn project<'t>(&self, b: &Bound<'_, 't>, text: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
        let out = layers::mlp(b, "ipgen", text, Activation::Gelu)?;
        if out.cols() != self.vit_width {
            return Err(Error::Dimension {
                op: "instruction prompts",
                left: out.shape(),
                right: vec![self.vit_width],
            });
        }
        out.mask_rows(mask)
    }
}

pub fn shared_prompt_name(layer: usize) -> String {
    format!("prompt.sp.layer{layer}")
}

/// `depth` independent `K_sp×d` banks drawn from N(0, 0.02²).
pub fn shared_prompt_bank<R: Rng + ?Sized>(
    store: &mut ParamStore,
    depth: usize,
    k_sp: usize,
    d: usize,
    rng: &mut R,
) {
    for j in 0..depth {
        store.insert(
            shared_prompt_name(j),
            Tensor::randn(&[k_sp, d], 0.02, rng),
            ParamGroup::SharedPrompts,
        );
    }
}

/// Prompts handed to the encoder for one instruction.
#[derive(Clone, Debug)]
pub struct PromptBundle<'t> {
    /// One `K_sp×d` bank per layer (deep) or a single bank (shallow).
    pub shared: Vec<Var<'t>>,
    /// `L_max×d` projected instruction prompts, zero on padded rows.
    pub instruction: Option<Var<'t>>,
    /// Validity of each instruction row.
    pub mask: Vec<bool>,
}

impl<'t> PromptBundle<'t> {
    pub fn empty() -> Self {
        Self {
            shared: Vec::new(),
            instruction: None,
            mask: Vec::new(),
        }
    }

    /// Shared banks only.
    pub fn shared_only(b: &Bound<'_, 't>, depth: usize) -> Result<Self> {
        let shared = (0..depth)
            .map(|j| b.var(&shared_prompt_name(j)))
            .collect::<Result<_>>()?;
        Ok(Self {
            shared,
            instruction: None,
            mask: Vec::new(),
        })
    }
}

/// Instruction prompt pipeline: tokenizer, frozen encoder and projection.
#[derive(Clone, Debug)]
pub struct Instructor {
    pub encoder: TextEncoder,
    pub generator: IpGenerator,
}

impl Instructor {
    pub fn l_max(&self) -> usize {
        self.encoder.cfg.l_max
    }

    /// Projected prompts and mask for `question`.
    pub fn generate_instruction_prompts<'t>(
        &self,
        b: &Bound<'_, 't>,
        vocab: &Vocab,
        question: &str,
    ) -> Result<(Var<'t>, Vec<bool>)> {
        let (ids, mask) = tokenize(question, vocab, self.l_max())?;
        let text = self.encoder.encode(b, &ids, &mask)?;
        let prompts = self.generator.project(b, text, &mask)?;
        Ok((prompts, mask))
    }

    pub fn bundle<'t>(
        &self,
        b: &Bound<'_, 't>,
        vocab: &Vocab,
        question: &str,
        depth: usize,
    ) -> Result<PromptBundle<'t>> {
        let mut bundle = PromptBundle::shared_only(b, depth)?;
        let (prompts, mask) = self.generate_instruction_prompts(b, vocab, question)?;
        bundle.instruction = Some(prompts);
        bundle.mask = mask;
        Ok(bundle)
    }
}
