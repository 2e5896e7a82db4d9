//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! when any criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use panther_cli::commands::{self, Checkpoint};
use panther_cli::config::{RunConfig, Tau};
use panther_core::bridge::oracle::brute_force_oracle;
use panther_core::bridge::{prune_multiturn, sequence_length_report, IndexedTokens};
use panther_core::data::{gen_dataset, vocabulary, Conversation, GridSpec};
use panther_core::decoder::{Decoder, DecoderConfig, Mode, VisualTokens};
use panther_core::instruct::EOS;
use panther_core::model::{Panther, PantherConfig};
use panther_core::numerics::{cosine_similarity, Tape, Tensor};
use panther_core::params::ParamStore;
use panther_core::vision::PromptScheme;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TAUS: [f64; 4] = [0.90, 0.95, 0.97, 1.0];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn correlated_turns(rng: &mut ChaCha8Rng, k: usize, n: usize, d: usize) -> Vec<Tensor> {
    let base = Tensor::randn(&[n, d], 1.0, rng);
    (0..k)
        .map(|_| {
            let scale = rng.random_range(0.0..0.6);
            let noise = Tensor::randn(&[n, d], scale, rng);
            let mut t = base.clone();
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
            t
        })
        .collect()
}

fn same_tokens(a: &[IndexedTokens], b: &[IndexedTokens]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.idx() == y.idx()
                && x.emb().shape() == y.emb().shape()
                && x.emb().data().iter().zip(y.emb().data()).all(|(u, v)| u.to_bits() == v.to_bits())
        })
}

/// Retention per spatial index: turn `k` keeps `i` when it is far enough from
/// turn 0 and from every intermediate turn that kept `i` itself.
fn column_rule(turns: &[Tensor], tau: f64) -> Vec<Vec<usize>> {
    let n = turns[0].rows();
    let cos = |a: &Tensor, b: &Tensor, i: usize| cosine_similarity(a.row(i), b.row(i), 1e-12).unwrap();
    let mut kept: Vec<Vec<bool>> = vec![vec![true; n]];
    for k in 1..turns.len() {
        let row = (0..n)
            .map(|i| {
                cos(&turns[0], &turns[k], i) <= tau
                    && (1..k).all(|s| !kept[s][i] || cos(&turns[s], &turns[k], i) <= tau)
            })
            .collect();
        kept.push(row);
    }
    kept.iter().map(|r| (0..n).filter(|&i| r[i]).collect()).collect()
}

fn ac1() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=5);
        let n = rng.random_range(4..=16);
        let tau = TAUS[rng.random_range(0..TAUS.len())];
        let turns = correlated_turns(&mut rng, k, n, 8);
        let got = prune_multiturn(&turns, tau)?;
        let want = brute_force_oracle(&turns, tau)?;
        let idx: Vec<Vec<usize>> = got.iter().map(|t| t.idx().to_vec()).collect();
        if !same_tokens(&got, &want) || idx != column_rule(&turns, tau) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 10.0,
        format!("{mismatches} mismatches in 1000 cases, {secs:.2}s"),
    )
}

fn ac2() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut identity_ok = true;
    let mut identical_ok = true;
    let mut set_violations = 0;
    let mut count_violations = 0;
    let mut first_turn_violations = 0;
    for _ in 0..100 {
        let k = rng.random_range(2..=5);
        let n = rng.random_range(4..=16);
        let turns = correlated_turns(&mut rng, k, n, 8);
        identity_ok &= prune_multiturn(&turns, 1.0)?.iter().all(|t| t.len() == n);

        let same = vec![turns[0].clone(); k];
        identical_ok &= prune_multiturn(&same, 0.95)?[1..].iter().all(|t| t.is_empty());

        let per_tau: Vec<Vec<IndexedTokens>> =
            TAUS.iter().map(|&t| prune_multiturn(&turns, t)).collect::<Result<_, _>>()?;
        let mut set_bad = false;
        let mut count_bad = false;
        for w in per_tau.windows(2) {
            for (turn, (a, b)) in w[0].iter().zip(&w[1]).enumerate() {
                let lo: BTreeSet<usize> = a.idx().iter().copied().collect();
                let hi: BTreeSet<usize> = b.idx().iter().copied().collect();
                if !lo.is_subset(&hi) {
                    set_bad = true;
                    if turn == 1 {
                        first_turn_violations += 1;
                    }
                }
            }
            let total = |p: &[IndexedTokens]| p.iter().map(IndexedTokens::len).sum::<usize>();
            count_bad |= total(&w[0]) > total(&w[1]);
        }
        set_violations += set_bad as usize;
        count_violations += count_bad as usize;
    }
    verdict(
        identity_ok && identical_ok && set_violations == 0,
        format!(
            "tau=1 identity {identity_ok}, identical turns pruned {identical_ok}, \
             cases breaking set monotonicity {set_violations}/100 (turn 1: {first_turn_violations}), \
             breaking total-count monotonicity {count_violations}/100"
        ),
    )
}

fn ac3() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let turns = correlated_turns(&mut rng, 4, 576, 8);
    let report = sequence_length_report(&turns, &[0; 4], 1.0)?;
    let unpruned = report.visual_before();
    let overflow = unpruned == 2304 && unpruned > 2048 && report.visual_after() == unpruned;

    let vocab = vocabulary();
    let dec = Decoder::new(DecoderConfig {
        depth: 1,
        width: 8,
        heads: 2,
        vocab_size: vocab.len(),
        max_len: 4096,
        mode: Mode::Panther,
    })?;
    let mut store = ParamStore::new();
    dec.init(&mut store, &mut rng);
    let convs = gen_dataset(20, (1, 4), &GridSpec::default(), 33)?;
    let mut checked = 0;
    let mut bad = 0;
    for conv in &convs {
        let k = conv.turns.len();
        let turns = correlated_turns(&mut rng, k, 576, 8);
        for &tau in &TAUS {
            let pruned = prune_multiturn(&turns, tau)?;
            let tape = Tape::new();
            let b = store.bind_frozen(&tape);
            let visual = turns
                .iter()
                .zip(&pruned)
                .map(|(t, p)| VisualTokens::retained(tape.constant(t.clone()), p.idx()))
                .collect::<Result<Vec<_>, _>>()?;
            let seq = dec.assemble(&b, &vocab, &conv.turns, &visual, false)?;
            let text: usize = conv
                .turns
                .iter()
                .map(|t| Ok(vocab.encode(&t.question)?.len() + vocab.encode(&t.answer)?.len() + 1))
                .sum::<Result<usize>>()?;
            let retained: usize = pruned.iter().map(IndexedTokens::len).sum();
            checked += 1;
            if seq.len() != text + retained {
                bad += 1;
            }
        }
    }
    verdict(
        overflow && bad == 0,
        format!("unpruned visual total {unpruned} (> 2048: {}), length identity broken in {bad}/{checked}", unpruned > 2048),
    )
}

fn ac4() -> Result<Verdict> {
    let start = Instant::now();
    let r = commands::grad_check(&RunConfig::micro())?;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        r.max_rel_err < commands::GRAD_CHECK_TOLERANCE && secs < 60.0,
        format!("max rel err {:.3e} over {} scalars, {secs:.1}s", r.max_rel_err, r.checked),
    )
}

/// Toy model used for the overfit run.
fn toy_config() -> RunConfig {
    let lr = 3e-3;
    RunConfig {
        vit_depth: 2,
        vit_width: 32,
        vit_heads: 4,
        k_sp: 4,
        l_max: 12,
        text_width: 16,
        text_depth: 1,
        text_heads: 2,
        decoder_depth: 2,
        decoder_width: 64,
        decoder_heads: 4,
        max_len: 256,
        bridge: true,
        tau: Tau::Threshold(0.95),
        seed: 2,
        lr_prompt: lr / 3.0,
        lr_model: lr,
        grad_clip: Some(1.0),
        steps: 1200,
        batch_size: 8,
        ..RunConfig::default()
    }
}

struct OverfitRun {
    cfg: RunConfig,
    checkpoint: PathBuf,
    summary: commands::TrainSummary,
}

fn ac5(dir: &Path, run: &mut Option<OverfitRun>) -> Result<Verdict> {
    let cfg = toy_config();
    ensure!(cfg.steps <= 2000, "step budget exceeded");
    let data = dir.join("overfit.jsonl");
    commands::gen_data(&data, 32, (3, 3), &GridSpec::default(), 11)?;
    let checkpoint = dir.join("overfit");
    let start = Instant::now();
    let summary = commands::train(&cfg, &data, &checkpoint)?;
    let report = commands::eval(&checkpoint, &data, false, None)?;
    let total = start.elapsed();
    let pass = report.correct == report.total && total < Duration::from_secs(600);
    let detail = format!(
        "{}/{} exact matches after {} steps (final loss {:.2e}), {:.0}s",
        report.correct,
        report.total,
        summary.steps,
        summary.final_loss,
        total.as_secs_f64()
    );
    *run = Some(OverfitRun {
        cfg,
        checkpoint,
        summary,
    });
    verdict(pass, detail)
}

fn ac6(run: &Option<OverfitRun>) -> Result<Verdict> {
    let Some(run) = run else {
        return verdict(false, "overfit run did not complete");
    };
    let mut frozen_ok = true;
    let mut trained_ok = true;
    let mut detail = Vec::new();
    for a in &run.summary.audit {
        if a.group.is_frozen() {
            frozen_ok &= a.changed == 0;
        } else {
            trained_ok &= a.changed > 0;
        }
        detail.push(format!("{} {}/{}", a.group, a.changed, a.scalars));
    }
    let ck = Checkpoint::load(&run.checkpoint)?;
    let init = ck.model()?.init(run.cfg.seed);
    for (name, p) in init.iter().filter(|(_, p)| p.group.is_frozen()) {
        let saved = ck.store.tensor(name)?;
        frozen_ok &= p
            .value
            .data()
            .iter()
            .zip(saved.data())
            .all(|(a, b)| (*a as f32).to_bits() == (*b as f32).to_bits() && *b == *a as f32 as f64);
    }
    verdict(frozen_ok && trained_ok, format!("changed scalars: {}", detail.join(", ")))
}

fn toy_model(scheme: PromptScheme, mode: Mode) -> Result<Panther> {
    let mut cfg = toy_config().model_config();
    cfg.vit.scheme = scheme;
    cfg.mode = mode;
    Ok(Panther::new(cfg, vocabulary())?)
}

fn patch_outputs(model: &Panther, store: &ParamStore, conv: &Conversation, q: &str) -> Result<Tensor> {
    let tape = Tape::new();
    let b = store.bind_frozen(&tape);
    let bundle = model.bundle(&b, Some(q))?;
    Ok(model.vit().prompted_forward(&b, &conv.image, &bundle)?.patches.value())
}

fn ac7() -> Result<Verdict> {
    let convs = gen_dataset(100, (2, 4), &GridSpec::default(), 77)?;
    let questions: Vec<&str> = convs
        .iter()
        .flat_map(|c| c.turns.iter().map(|t| t.question.as_str()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let deep = toy_model(PromptScheme::Deep, Mode::Panther)?;
    let plain = toy_model(PromptScheme::None, Mode::Panther)?;
    let (deep_store, plain_store) = (deep.init(7), plain.init(7));
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut differ = 0;
    let mut identical = 0;
    for conv in &convs {
        let qa = questions[rng.random_range(0..questions.len())];
        let qb = loop {
            let q = questions[rng.random_range(0..questions.len())];
            if q != qa {
                break q;
            }
        };
        let (a, b) = (patch_outputs(&deep, &deep_store, conv, qa)?, patch_outputs(&deep, &deep_store, conv, qb)?);
        differ += (a.max_abs_diff(&b) > 0.0) as usize;
        let (a, b) = (patch_outputs(&plain, &plain_store, conv, qa)?, patch_outputs(&plain, &plain_store, conv, qb)?);
        identical += (a == b) as usize;
    }
    verdict(
        differ >= 95 && identical == 100,
        format!("deep: {differ}/100 differ, none: {identical}/100 bit-identical"),
    )
}

fn ac8(dir: &Path, run: &Option<OverfitRun>) -> Result<Verdict> {
    let checkpoint = match run {
        Some(r) => r.checkpoint.clone(),
        None => {
            let path = dir.join("untrained");
            let data = dir.join("tiny.jsonl");
            commands::gen_data(&data, 1, (1, 1), &GridSpec::default(), 0)?;
            commands::train(&RunConfig { steps: 0, ..toy_config() }, &data, &path)?;
            path
        }
    };
    let data = dir.join("bench.jsonl");
    commands::gen_data(&data, 64, (4, 4), &GridSpec::default(), 88)?;
    let taus = [1.0, 0.97, 0.95, 0.90];
    let rows = commands::prune_bench(&data, &checkpoint, &taus, Some(&dir.join("bench.csv")))?;
    let trend = rows.windows(2).all(|w| w[1].visual_after <= w[0].visual_after);
    let detail: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "tau {:.2}: visual {} of {}, total {}, epoch {:.2}s",
                r.tau, r.visual_after, r.visual_before, r.total_after, r.epoch_seconds
            )
        })
        .collect();
    verdict(trend, detail.join("; "))
}

/// Mean next-token NLL of the answer and EOS, computed from raw logits over
/// the visual rows followed by question and answer tokens.
fn direct_nll(dec: &Decoder, store: &ParamStore, visual: &Tensor, question: &[usize], answer: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let b = store.bind_frozen(&tape);
    let mut ids = question.to_vec();
    ids.extend_from_slice(answer);
    let text = dec.embed_tokens(&b, &ids)?.value();
    let mut rows = visual.data().to_vec();
    rows.extend_from_slice(text.data());
    let emb = Tensor::new(vec![visual.rows() + ids.len(), visual.cols()], rows)?;
    let logits = dec.forward_embeddings(&b, tape.constant(emb))?.value();
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

fn ac9() -> Result<Verdict> {
    let mut cfg = PantherConfig::micro();
    let panther = Panther::new(cfg.clone(), vocabulary())?;
    cfg.mode = Mode::LlavaBaseline;
    let llava = Panther::new(cfg, vocabulary())?;
    let store = panther.init(9);
    let grid = GridSpec {
        height: 8,
        width: 8,
        patch: 4,
        block: 4,
    };
    let vocab = vocabulary();
    let mut worst = 0.0f64;
    for conv in gen_dataset(20, (1, 1), &grid, 99)? {
        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        let q = &conv.turns[0].question;
        let visual = panther.visual_tokens(&b, &conv, Some(q))?;
        let loss = |model: &Panther| -> Result<f64> {
            let dec = model.decoder();
            let seq = dec.assemble(&b, &vocab, &conv.turns, &[VisualTokens::full(visual)], false)?;
            let logits = dec.causal_forward(&b, &seq)?;
            Ok(dec.interleaved_loss(&seq, logits)?.value().item())
        };
        let mut answer = vocab.encode(&conv.turns[0].answer)?;
        answer.push(EOS);
        let direct = direct_nll(panther.decoder(), &store, &visual.value(), &vocab.encode(q)?, &answer)?;
        let end_to_end = panther.conversation_loss(&b, &conv, None)?.loss.value().item();
        for l in [loss(&panther)?, loss(&llava)?, end_to_end] {
            worst = worst.max((l - direct).abs());
        }
    }
    verdict(worst < 1e-12, format!("max |loss - direct| {worst:.2e} over 20 conversations"))
}

fn report(name: &str, f: impl FnOnce() -> Result<Verdict>) -> bool {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e:#}")),
    };
    println!(
        "{name} {} {detail} [{:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    pass
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut run = None;
    let results = [
        report("AC-1", ac1),
        report("AC-2", ac2),
        report("AC-3", ac3),
        report("AC-4", ac4),
        report("AC-5", || ac5(dir.path(), &mut run)),
        report("AC-6", || ac6(&run)),
        report("AC-7", ac7),
        report("AC-8", || ac8(dir.path(), &run)),
        report("AC-9", ac9),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
