//! The full pipeline: prompted vision encoder, connector, optional pruning
//! of later-turn visual tokens, and the interleaved decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bridge::{prune_multiturn, PruneReport};
use crate::data::Conversation;
use crate::decoder::{AssembledSequence, Decoder, DecoderConfig, Mode, VisualTokens};
use crate::error::{Error, Result};
use crate::instruct::{shared_prompt_bank, IpGenerator, Instructor, PromptBundle, TextEncoder, TextEncoderConfig, Vocab};
use crate::layers::Activation;
use crate::numerics::{Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::vision::{Connector, PromptScheme, Vit, VitConfig, VitTrace};

#[derive(Clone, Debug, PartialEq)]
pub struct PantherConfig {
    pub vit: VitConfig,
    /// Shared prompts per layer.
    pub k_sp: usize,
    /// Instruction prompt slots.
    pub l_max: usize,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub text_seed: u64,
    pub connector_act: Activation,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub max_len: usize,
    pub mode: Mode,
}

impl Default for PantherConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            k_sp: 24,
            l_max: 77,
            text_width: 32,
            text_depth: 2,
            text_heads: 4,
            text_seed: 7,
            connector_act: Activation::Gelu,
            decoder_depth: 4,
            decoder_width: 64,
            decoder_heads: 4,
            max_len: 1024,
            mode: Mode::Panther,
        }
    }
}

impl PantherConfig {
    /// Smallest useful configuration: width 8 everywhere, two layers, an
    /// 8x8 image cut into four patches.
    pub fn micro() -> Self {
        Self {
            vit: VitConfig {
                depth: 2,
                width: 8,
                heads: 2,
                patch_size: 4,
                image_height: 8,
                image_width: 8,
                channels: 3,
                scheme: PromptScheme::Deep,
            },
            k_sp: 2,
            l_max: 12,
            text_width: 8,
            text_depth: 1,
            text_heads: 2,
            text_seed: 7,
            connector_act: Activation::Gelu,
            decoder_depth: 2,
            decoder_width: 8,
            decoder_heads: 2,
            max_len: 128,
            mode: Mode::Panther,
        }
    }
}

/// Per-turn visual tokens of one conversation in decoder space.
pub struct TurnTokens<'t> {
    /// `N×d1` per turn (panther) or a single block (llava-baseline).
    pub turns: Vec<Var<'t>>,
}

pub struct ConversationLoss<'t> {
    pub loss: Var<'t>,
    pub seq: AssembledSequence<'t>,
    /// Present when pruning ran.
    pub report: Option<PruneReport>,
}

#[derive(Clone, Debug)]
pub struct Panther {
    cfg: PantherConfig,
    vocab: Vocab,
    vit: Vit,
    instructor: Instructor,
    connector: Connector,
    decoder: Decoder,
}

impl Panther {
    pub fn new(cfg: PantherConfig, vocab: Vocab) -> Result<Self> {
        let vit = Vit::new(cfg.vit.clone())?;
        let encoder = TextEncoder::new(TextEncoderConfig {
            vocab_size: vocab.len(),
            l_max: cfg.l_max,
            width: cfg.text_width,
            depth: cfg.text_depth,
            heads: cfg.text_heads,
            seed: cfg.text_seed,
        })?;
        let instructor = Instructor {
            encoder,
            generator: IpGenerator {
                text_width: cfg.text_width,
                vit_width: cfg.vit.width,
            },
        };
        let connector = Connector {
            d_in: cfg.vit.width,
            d_out: cfg.decoder_width,
            act: cfg.connector_act,
        };
        let decoder = Decoder::new(DecoderConfig {
            depth: cfg.decoder_depth,
            width: cfg.decoder_width,
            heads: cfg.decoder_heads,
            vocab_size: vocab.len(),
            max_len: cfg.max_len,
            mode: cfg.mode,
        })?;
        if cfg.vit.scheme != PromptScheme::None && cfg.k_sp == 0 && cfg.l_max == 0 {
            return Err(Error::Config(format!(
                "{} prompting needs k_sp > 0 or l_max > 0",
                cfg.vit.scheme
            )));
        }
        Ok(Self {
            cfg,
            vocab,
            vit,
            instructor,
            connector,
            decoder,
        })
    }

    pub fn config(&self) -> &PantherConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vit(&self) -> &Vit {
        &self.vit
    }

    pub fn instructor(&self) -> &Instructor {
        &self.instructor
    }

    pub fn connector(&self) -> &Connector {
        &self.connector
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn num_patches(&self) -> usize {
        self.cfg.vit.num_patches()
    }

    /// Fresh parameters. The text encoder draws from its own seed; every
    /// other component from `seed`.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.vit.init(&mut store, &mut rng);
        shared_prompt_bank(
            &mut store,
            self.cfg.vit.depth,
            self.cfg.k_sp,
            self.cfg.vit.width,
            &mut rng,
        );
        self.instructor.encoder.init(&mut store);
        self.instructor.generator.init(&mut store, &mut rng);
        self.connector.init(&mut store, &mut rng);
        self.decoder.init(&mut store, &mut rng);
        store
    }

    /// Prompt bundle for `question` (or for no instruction at all).
    pub fn bundle<'t>(&self, b: &Bound<'_, 't>, question: Option<&str>) -> Result<PromptBundle<'t>> {
        if self.cfg.vit.scheme == PromptScheme::None {
            return Ok(PromptBundle::empty());
        }
        match question {
            Some(q) => self.instructor.bundle(b, &self.vocab, q, self.cfg.vit.depth),
            None => PromptBundle::shared_only(b, self.cfg.vit.depth),
        }
    }

    /// Visual tokens in decoder space for `question` on `conv`'s image.
    pub fn visual_tokens<'t>(
        &self,
        b: &Bound<'_, 't>,
        conv: &Conversation,
        question: Option<&str>,
    ) -> Result<Var<'t>> {
        let bundle = self.bundle(b, question)?;
        let feat = self.vit.prompted_forward(b, &conv.image, &bundle)?;
        self.connector.forward(b, &feat)
    }

    /// Encoder trace for `question`, for attention inspection.
    pub fn trace<'t>(
        &self,
        b: &Bound<'_, 't>,
        conv: &Conversation,
        question: Option<&str>,
    ) -> Result<VitTrace<'t>> {
        let bundle = self.bundle(b, question)?;
        Ok(self.vit.prompted_forward_traced(b, &conv.image, &bundle)?.1)
    }

    /// One visual block per turn in panther mode, a single instruction-free
    /// block in llava-baseline mode.
    pub fn turn_tokens<'t>(&self, b: &Bound<'_, 't>, conv: &Conversation) -> Result<TurnTokens<'t>> {
        let turns = match self.cfg.mode {
            Mode::Panther => conv
                .turns
                .iter()
                .map(|t| self.visual_tokens(b, conv, Some(&t.question)))
                .collect::<Result<_>>()?,
            Mode::LlavaBaseline => vec![self.visual_tokens(b, conv, None)?],
        };
        Ok(TurnTokens { turns })
    }

    /// Visual blocks ready for assembly, pruned with `tau` when given.
    pub fn prune<'t>(
        &self,
        tokens: &TurnTokens<'t>,
        tau: Option<f64>,
        text_tokens: usize,
    ) -> Result<(Vec<VisualTokens<'t>>, Option<PruneReport>)> {
        match tau {
            Some(tau) if self.cfg.mode == Mode::Panther => {
                let values: Vec<Tensor> = tokens.turns.iter().map(Var::value).collect();
                let pruned = prune_multiturn(&values, tau)?;
                let report = PruneReport::from_pruned(&pruned, self.num_patches(), text_tokens, tau);
                let visual = tokens
                    .turns
                    .iter()
                    .zip(&pruned)
                    .map(|(v, p)| VisualTokens::retained(*v, p.idx()))
                    .collect::<Result<_>>()?;
                Ok((visual, Some(report)))
            }
            _ => Ok((tokens.turns.iter().map(|v| VisualTokens::full(*v)).collect(), None)),
        }
    }

    fn text_tokens(&self, conv: &Conversation) -> Result<usize> {
        let mut n = 0;
        for t in &conv.turns {
            n += self.vocab.encode(&t.question)?.len() + self.vocab.encode(&t.answer)?.len() + 1;
        }
        Ok(n)
    }

    /// Interleaved training loss of one conversation. `tau` switches
    /// pruning on.
    pub fn conversation_loss<'t>(
        &self,
        b: &Bound<'_, 't>,
        conv: &Conversation,
        tau: Option<f64>,
    ) -> Result<ConversationLoss<'t>> {
        let tokens = self.turn_tokens(b, conv)?;
        let (visual, report) = self.prune(&tokens, tau, self.text_tokens(conv)?)?;
        let seq = self
            .decoder
            .assemble(b, &self.vocab, &conv.turns, &visual, false)?;
        let logits = self.decoder.causal_forward(b, &seq)?;
        let loss = self.decoder.interleaved_loss(&seq, logits)?;
        Ok(ConversationLoss { loss, seq, report })
    }

    /// Greedy answers for every turn, each conditioned on the image and the
    /// reference history of earlier turns. No pruning at inference.
    pub fn answer_turns<'t>(
        &self,
        b: &Bound<'_, 't>,
        conv: &Conversation,
        max_new: usize,
    ) -> Result<Vec<String>> {
        let tokens = self.turn_tokens(b, conv)?;
        let (visual, _) = self.prune(&tokens, None, 0)?;
        let mut answers = Vec::with_capacity(conv.turns.len());
        for k in 0..conv.turns.len() {
            let vis = match self.cfg.mode {
                Mode::Panther => &visual[..=k],
                Mode::LlavaBaseline => &visual[..],
            };
            let prefix = self
                .decoder
                .assemble(b, &self.vocab, &conv.turns[..=k], vis, true)?;
            let ids = self.decoder.greedy_generate(b, &prefix, max_new)?;
            answers.push(self.vocab.decode(&ids));
        }
        Ok(answers)
    }
}
