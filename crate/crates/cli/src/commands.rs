//! Subcommand implementations. Each returns a summary so callers other than
//! the binary can inspect results.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use panther_core::bridge::{format_index_lists, prune_multiturn, PruneReport};
use panther_core::data::{gen_dataset, load_dataset, save_dataset, vocabulary, Conversation, GridSpec};
use panther_core::instruct::Vocab;
use panther_core::model::Panther;
use panther_core::numerics::dump::{read_dump, write_dump};
use panther_core::numerics::{GradCheckReport, Tape, Tensor};
use panther_core::params::{ParamGroup, ParamStore};
use panther_core::train::{conversation_grads, evaluate, model_grad_check, train as run_training, EvalReport};
use panther_core::vision::{cls_patch_attention, PromptScheme};

use crate::config::{Precision, RunConfig};

pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const AUDIT_FILE: &str = "audit.csv";

/// A trained model on disk: parameters, the config that built them and the
/// vocabulary.
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let store = ParamStore::load(dir).with_context(|| format!("loading parameters from {}", dir.display()))?;
        Ok(Self { config, vocab, store })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        self.store.save(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_text())?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        Ok(())
    }

    pub fn model(&self) -> Result<Panther> {
        Ok(Panther::new(self.config.model_config(), self.vocab.clone())?)
    }
}

/// Parses `K` or `MIN-MAX`.
pub fn parse_turn_range(s: &str) -> Result<(usize, usize)> {
    let (lo, hi) = match s.split_once('-') {
        Some((a, b)) => (a.trim().parse()?, b.trim().parse()?),
        None => {
            let k = s.trim().parse()?;
            (k, k)
        }
    };
    Ok((lo, hi))
}

pub fn gen_data(out: &Path, n: usize, turns: (usize, usize), grid: &GridSpec, seed: u64) -> Result<usize> {
    let data = gen_dataset(n, turns, grid, seed)?;
    save_dataset(out, &data).with_context(|| format!("writing {}", out.display()))?;
    Ok(data.len())
}

fn load_data(path: &Path) -> Result<Vec<Conversation>> {
    load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn check_images(cfg: &RunConfig, data: &[Conversation]) -> Result<()> {
    for c in data {
        let img = &c.image;
        ensure!(
            (img.height, img.width, img.channels) == (cfg.image_height, cfg.image_width, cfg.channels),
            "conversation {}: image {}x{}x{} does not match config {}x{}x{}",
            c.id,
            img.height,
            img.width,
            img.channels,
            cfg.image_height,
            cfg.image_width,
            cfg.channels
        );
    }
    Ok(())
}

/// Per-group parameter change between two stores.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupAudit {
    pub group: ParamGroup,
    pub scalars: usize,
    pub changed: usize,
    pub max_abs_change: f64,
}

pub fn audit(before: &ParamStore, after: &ParamStore) -> Vec<GroupAudit> {
    ParamGroup::ALL
        .iter()
        .map(|&group| {
            let mut a = GroupAudit {
                group,
                scalars: 0,
                changed: 0,
                max_abs_change: 0.0,
            };
            for name in before.names_in(group) {
                let x = before.tensor(&name).expect("listed parameter");
                let y = after.tensor(&name).expect("same parameter set");
                for (u, v) in x.data().iter().zip(y.data()) {
                    a.scalars += 1;
                    if u.to_bits() != v.to_bits() {
                        a.changed += 1;
                        a.max_abs_change = a.max_abs_change.max((u - v).abs());
                    }
                }
            }
            a
        })
        .collect()
}

#[derive(Debug)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub steps: usize,
    pub audit: Vec<GroupAudit>,
    pub seconds: f64,
}

/// Trains from a fresh initialisation and writes the checkpoint, the loss
/// curve and the parameter audit to `out`.
pub fn train(cfg: &RunConfig, data_path: &Path, out: &Path) -> Result<TrainSummary> {
    let data = load_data(data_path)?;
    ensure!(!data.is_empty(), "dataset {} is empty", data_path.display());
    check_images(cfg, &data)?;
    let vocab = vocabulary();
    let model = Panther::new(cfg.model_config(), vocab.clone())?;
    let init = model.init(cfg.seed);
    let mut store = init.clone();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut csv = fs::File::create(out.join(LOSS_FILE))?;
    writeln!(csv, "step,loss,mean_seq_len,visual_tokens,elapsed_s")?;
    let tc = cfg.train_config();
    info!(
        "training {} steps on {} conversations, mode {}, tau {:?}",
        tc.steps,
        data.len(),
        cfg.mode,
        tc.tau
    );
    let start = Instant::now();
    let mut io_err = None;
    let logs = run_training(&model, &mut store, &data, &tc, |l| {
        if let Err(e) = writeln!(
            csv,
            "{},{},{},{},{:.3}",
            l.step, l.loss, l.mean_seq_len, l.visual_tokens, l.elapsed_s
        ) {
            io_err.get_or_insert(e);
        }
        if l.step % 50 == 0 {
            info!("step {} loss {:.5}", l.step, l.loss);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing loss log");
    }
    let seconds = start.elapsed().as_secs_f64();
    let audit = audit(&init, &store);
    let mut text = String::from("group,scalars,changed,max_abs_change\n");
    for a in &audit {
        let _ = writeln!(text, "{},{},{},{}", a.group, a.scalars, a.changed, a.max_abs_change);
        if a.group.is_frozen() {
            info!("frozen group {}: {} of {} scalars changed", a.group, a.changed, a.scalars);
        }
    }
    fs::write(out.join(AUDIT_FILE), text)?;
    Checkpoint {
        config: cfg.clone(),
        vocab,
        store,
    }
    .save(out)?;
    Ok(TrainSummary {
        final_loss: logs.last().map_or(f64::NAN, |l| l.loss),
        steps: logs.len(),
        audit,
        seconds,
    })
}

/// Greedy exact-match evaluation. Inference never prunes, so asking for the
/// bridge is an error.
pub fn eval(checkpoint: &Path, data_path: &Path, bridge: bool, predictions: Option<&Path>) -> Result<EvalReport> {
    if bridge {
        bail!("inference omits the pruning bridge; eval always runs with bridge off");
    }
    let ck = Checkpoint::load(checkpoint)?;
    let data = load_data(data_path)?;
    check_images(&ck.config, &data)?;
    let model = ck.model()?;
    let report = evaluate(&model, &ck.store, &data, ck.config.max_new)?;
    if let Some(path) = predictions {
        let mut text = String::new();
        for answers in &report.predictions {
            for a in answers {
                let _ = writeln!(text, "{a}");
            }
        }
        fs::write(path, text)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub tau: f64,
    pub conversations: usize,
    pub visual_before: usize,
    pub visual_after: usize,
    pub total_before: usize,
    pub total_after: usize,
    pub len_min: usize,
    pub len_mean: f64,
    pub len_max: usize,
    pub epoch_seconds: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "tau,conversations,visual_before,visual_after,total_before,total_after,len_min,len_mean,len_max,epoch_seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.2},{},{:.4}",
            self.tau,
            self.conversations,
            self.visual_before,
            self.visual_after,
            self.total_before,
            self.total_after,
            self.len_min,
            self.len_mean,
            self.len_max,
            self.epoch_seconds
        )
    }
}

/// For each threshold: retained visual tokens, assembled lengths and the
/// wall time of one forward+backward pass over the whole dataset.
pub fn prune_bench(data_path: &Path, checkpoint: &Path, taus: &[f64], out: Option<&Path>) -> Result<Vec<BenchRow>> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = load_data(data_path)?;
    ensure!(!data.is_empty(), "dataset {} is empty", data_path.display());
    check_images(&ck.config, &data)?;
    let model = ck.model()?;
    let single = ck.config.precision == Precision::F32;
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        ensure!((0.0..=1.0).contains(&tau), "tau {tau} outside [0, 1]");
        let mut row = BenchRow {
            tau,
            conversations: data.len(),
            visual_before: 0,
            visual_after: 0,
            total_before: 0,
            total_after: 0,
            len_min: usize::MAX,
            len_mean: 0.0,
            len_max: 0,
            epoch_seconds: 0.0,
        };
        for conv in &data {
            let tape = Tape::new();
            let b = ck.store.bind_frozen(&tape);
            let out = model.conversation_loss(&b, conv, Some(tau))?;
            let len = out.seq.len();
            if let Some(r) = out.report {
                row.visual_before += r.visual_before();
                row.visual_after += r.visual_after();
                row.total_before += r.total_before();
                row.total_after += r.total_after();
            } else {
                row.visual_before += out.seq.visual_len();
                row.visual_after += out.seq.visual_len();
                row.total_before += len;
                row.total_after += len;
            }
            row.len_min = row.len_min.min(len);
            row.len_max = row.len_max.max(len);
            row.len_mean += len as f64 / data.len() as f64;
        }
        let start = Instant::now();
        for conv in &data {
            conversation_grads(&model, &ck.store, conv, Some(tau), single)?;
        }
        row.epoch_seconds = start.elapsed().as_secs_f64();
        info!("tau {tau}: {} of {} visual tokens kept", row.visual_after, row.visual_before);
        rows.push(row);
    }
    if let Some(path) = out {
        let mut text = format!("{}\n", BenchRow::CSV_HEADER);
        for r in &rows {
            let _ = writeln!(text, "{}", r.csv_row());
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(rows)
}

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// End-to-end finite-difference check of a micro model on one two-turn
/// conversation, pruning off.
pub fn grad_check(cfg: &RunConfig) -> Result<GradCheckReport> {
    if cfg.precision == Precision::F32 {
        bail!("grad-check needs f64; finite differences are meaningless at f32");
    }
    let dims = [
        ("vit_width", cfg.vit_width),
        ("text_width", cfg.text_width),
        ("decoder_width", cfg.decoder_width),
        ("vit_depth", cfg.vit_depth),
        ("decoder_depth", cfg.decoder_depth),
        ("k_sp", cfg.k_sp),
    ];
    if let Some((name, v)) = dims.iter().find(|(_, v)| *v > 8) {
        bail!("grad-check runs on a micro model; {name}={v} exceeds 8");
    }
    let model = Panther::new(cfg.model_config(), vocabulary())?;
    let store = model.init(cfg.seed);
    let grid = GridSpec {
        height: cfg.image_height,
        width: cfg.image_width,
        patch: cfg.patch_size,
        block: cfg.patch_size,
    };
    let conv = gen_dataset(1, (2, 2), &grid, cfg.seed)?.remove(0);
    Ok(model_grad_check(&model, &store, &conv, 1e-5)?)
}

/// CLS-to-patch attention of one encoder layer, averaged over heads and laid
/// out on the patch grid. Written as a tensor dump at `out` and as a CSV
/// matrix next to it.
pub fn dump_attn(
    checkpoint: &Path,
    data_path: &Path,
    image_id: usize,
    instruction: Option<&str>,
    layer: usize,
    out: &Path,
) -> Result<Tensor> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = load_data(data_path)?;
    let conv = data
        .iter()
        .find(|c| c.id == image_id)
        .with_context(|| format!("no conversation with id {image_id} in {}", data_path.display()))?;
    check_images(&ck.config, std::slice::from_ref(conv))?;
    let depth = ck.config.vit_depth;
    ensure!(layer < depth, "layer {layer} out of range: the encoder has {depth} layers");
    let model = ck.model()?;
    if ck.config.scheme == PromptScheme::None && instruction.is_some() {
        warn!("prompt scheme is none; the instruction is ignored");
    }
    let tape = Tape::new();
    let b = ck.store.bind_frozen(&tape);
    let trace = model.trace(&b, conv, instruction)?;
    let map = cls_patch_attention(&trace, layer, model.config().vit.grid_shape())?;
    write_dump(out, &map)?;
    let mut csv = String::new();
    for r in 0..map.rows() {
        let cells: Vec<String> = map.row(r).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(csv, "{}", cells.join(","));
    }
    fs::write(out.with_extension("csv"), csv)?;
    Ok(map)
}

/// Prunes per-turn token dumps and writes `indices.txt` (one
/// comma-separated list per turn) and `report.csv` into `out_dir`.
pub fn prune_files(turns: &[impl AsRef<Path>], tau: f64, text_tokens: usize, out_dir: &Path) -> Result<PruneReport> {
    let tensors = turns
        .iter()
        .map(|p| read_dump(p.as_ref()).with_context(|| format!("reading {}", p.as_ref().display())))
        .collect::<Result<Vec<_>>>()?;
    let pruned = prune_multiturn(&tensors, tau)?;
    let report = PruneReport::from_pruned(&pruned, tensors[0].rows(), text_tokens, tau);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("indices.txt"), format_index_lists(&pruned))?;
    fs::write(
        out_dir.join("report.csv"),
        format!("{}\n{}\n", PruneReport::CSV_HEADER, report.csv_row()),
    )?;
    Ok(report)
}
