//! Adam training over conversations and exact-match evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Conversation;
use crate::error::{Error, Result};
use crate::model::Panther;
use crate::numerics::{relative_error, GradCheckReport, Tape, Tensor};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Shared prompts and instruction-prompt generator.
    pub lr_prompt: f64,
    /// Connector and decoder.
    pub lr_model: f64,
    /// Pruning threshold; `None` trains without pruning.
    pub tau: Option<f64>,
    /// Clip the global gradient norm of each step to this value.
    pub grad_clip: Option<f64>,
    /// Record every value on the tape at `f32` precision.
    pub single_precision: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            lr_prompt: 1e-4,
            lr_model: 1e-3,
            tau: Some(0.95),
            grad_clip: Some(1.0),
            single_precision: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction; frozen parameters are never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    state: BTreeMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr_prompt: f64,
        lr_model: f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            if p.group.is_frozen() {
                continue;
            }
            let lr = if p.group.is_prompt() { lr_prompt } else { lr_model };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            for (((w, &gi), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(&mut st.m)
                .zip(&mut st.v)
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    /// Mean assembled sequence length over the batch.
    pub mean_seq_len: f64,
    /// Visual tokens fed to the decoder over the batch.
    pub visual_tokens: usize,
    pub elapsed_s: f64,
}

/// Loss and gradients of one conversation.
pub fn conversation_grads(
    model: &Panther,
    store: &ParamStore,
    conv: &Conversation,
    tau: Option<f64>,
    single_precision: bool,
) -> Result<(f64, usize, usize, BTreeMap<String, Tensor>)> {
    let tape = if single_precision {
        Tape::single_precision()
    } else {
        Tape::new()
    };
    let b = store.bind(&tape);
    let out = model
        .conversation_loss(&b, conv, tau)
        .map_err(|e| in_conversation(conv.id, e))?;
    tape.backward(out.loss)?;
    Ok((
        out.loss.value().item(),
        out.seq.len(),
        out.seq.visual_len(),
        b.grads(),
    ))
}

fn in_conversation(id: usize, e: Error) -> Error {
    match e {
        Error::SequenceOverflow { len, max } => Error::DegenerateData(format!(
            "conversation {id}: sequence of length {len} exceeds max length {max}"
        )),
        other => other,
    }
}

/// Runs `cfg.steps` Adam steps over shuffled epochs of `data`, calling
/// `on_step` after each.
pub fn train(
    model: &Panther,
    store: &mut ParamStore,
    data: &[Conversation],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::default();
    let mut logs = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    for step in 0..cfg.steps {
        let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = 0.0;
        let mut seq_len = 0;
        let mut visual = 0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let conv = &data[order[cursor]];
            cursor += 1;
            let (l, len, vis, grads) =
                conversation_grads(model, store, conv, cfg.tau, cfg.single_precision)?;
            loss += l;
            seq_len += len;
            visual += vis;
            for (name, g) in grads {
                match sum.get_mut(&name) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    None => {
                        sum.insert(name, g);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mut norm2 = 0.0;
        for g in sum.values_mut() {
            for v in g.data_mut() {
                *v *= inv;
                norm2 += *v * *v;
            }
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = norm2.sqrt();
            if norm > clip {
                let s = clip / norm;
                sum.values_mut()
                    .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        adam.step(store, &sum, cfg.lr_prompt, cfg.lr_model);
        let log = StepLog {
            step,
            loss: loss * inv,
            mean_seq_len: seq_len as f64 * inv,
            visual_tokens: visual,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    /// Generated answers per conversation and turn.
    pub predictions: Vec<Vec<String>>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Exact-match accuracy of greedy answers over every turn.
pub fn evaluate(model: &Panther, store: &ParamStore, data: &[Conversation], max_new: usize) -> Result<EvalReport> {
    let mut report = EvalReport {
        correct: 0,
        total: 0,
        predictions: Vec::with_capacity(data.len()),
    };
    for conv in data {
        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        let answers = model.answer_turns(&b, conv, max_new)?;
        for (a, t) in answers.iter().zip(&conv.turns) {
            report.total += 1;
            if *a == t.answer {
                report.correct += 1;
            }
        }
        report.predictions.push(answers);
    }
    Ok(report)
}

/// Checks the tape gradient of one conversation's loss (pruning off) with
/// respect to every trainable parameter scalar against central differences.
pub fn model_grad_check(model: &Panther, store: &ParamStore, conv: &Conversation, h: f64) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::Config(format!("step h must be > 0, got {h}")));
    }
    let (_, _, _, grads) = conversation_grads(model, store, conv, None, false)?;
    let loss_at = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let b = s.bind_frozen(&tape);
        Ok(model.conversation_loss(&b, conv, None)?.loss.value().item())
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| !p.group.is_frozen())
        .map(|(n, _)| n.clone())
        .collect();
    for (pi, name) in names.iter().enumerate() {
        let n = store.tensor(name)?.numel();
        for i in 0..n {
            let orig = store.tensor(name)?.data()[i];
            let set = |w: &mut ParamStore, v: f64| {
                w.get_mut(name).expect("parameter present").value.data_mut()[i] = v;
            };
            set(&mut work, orig + h);
            let plus = loss_at(&work)?;
            set(&mut work, orig - h);
            let minus = loss_at(&work)?;
            set(&mut work, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[name].data()[i];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst = (pi, i);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
