//! Synthetic multi-turn visual QA over images made of colored blocks.
//!
//! Every answer follows from the image by a fixed rule, so a model can be
//! trained to exact-match accuracy and answers can be re-derived from
//! pixels. Datasets are stored one JSON object per line with the image as
//! base64 little-endian `f32` pixels.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruct::Vocab;
use crate::vision::PatchGrid;

pub const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];

pub const NUMBERS: [&str; 17] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
];

const TEMPLATE_WORDS: [&str; 19] = [
    "what", "color", "is", "the", "top", "bottom", "left", "right", "block", "in", "row",
    "column", "how", "many", "blocks", "are", "there", "a", "yes",
];

/// Every word a generated question or answer can contain.
pub fn vocabulary() -> Vocab {
    let mut words: Vec<&str> = TEMPLATE_WORDS.to_vec();
    words.push("no");
    words.extend(COLORS.iter().map(|(c, _)| *c));
    words.extend(NUMBERS);
    Vocab::new(&words)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: usize,
    pub image: PatchGrid,
    /// Side length in pixels of one colored block.
    pub block: usize,
    pub turns: Vec<Turn>,
}

impl Conversation {
    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }
}

/// Image geometry for generated conversations.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub block: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            patch: 4,
            block: 4,
        }
    }
}

impl GridSpec {
    pub fn block_rows(&self) -> usize {
        self.height / self.block
    }

    pub fn block_cols(&self) -> usize {
        self.width / self.block
    }

    fn validate(&self) -> Result<()> {
        if self.block == 0 || !self.height.is_multiple_of(self.block) || !self.width.is_multiple_of(self.block) {
            return Err(Error::Config(format!(
                "block size {} must divide image {}x{}",
                self.block, self.height, self.width
            )));
        }
        let blocks = self.block_rows() * self.block_cols();
        if blocks > NUMBERS.len() - 1 || self.block_rows() < 2 || self.block_cols() < 2 {
            return Err(Error::Config(format!(
                "block grid {}x{} must be at least 2x2 and hold at most {} blocks",
                self.block_rows(),
                self.block_cols(),
                NUMBERS.len() - 1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Query {
    Corner { bottom: bool, right: bool },
    Cell { row: usize, col: usize },
    Count { color: usize },
    Exists { color: usize },
}

impl Query {
    fn question(self) -> String {
        match self {
            Query::Corner { bottom, right } => format!(
                "what color is the {} {} block",
                if bottom { "bottom" } else { "top" },
                if right { "right" } else { "left" }
            ),
            Query::Cell { row, col } => format!(
                "what color is the block in row {} column {}",
                NUMBERS[row + 1],
                NUMBERS[col + 1]
            ),
            Query::Count { color } => format!("how many {} blocks are there", COLORS[color].0),
            Query::Exists { color } => format!("is there a {} block", COLORS[color].0),
        }
    }

    fn answer(self, colors: &[Vec<usize>]) -> String {
        let (rows, cols) = (colors.len(), colors[0].len());
        match self {
            Query::Corner { bottom, right } => {
                let r = if bottom { rows - 1 } else { 0 };
                let c = if right { cols - 1 } else { 0 };
                COLORS[colors[r][c]].0.to_string()
            }
            Query::Cell { row, col } => COLORS[colors[row][col]].0.to_string(),
            Query::Count { color } => {
                let n = colors.iter().flatten().filter(|&&c| c == color).count();
                NUMBERS[n].to_string()
            }
            Query::Exists { color } => {
                if colors.iter().flatten().any(|&c| c == color) {
                    "yes".into()
                } else {
                    "no".into()
                }
            }
        }
    }
}

fn all_queries(rows: usize, cols: usize) -> Vec<Query> {
    let mut qs = Vec::new();
    for bottom in [false, true] {
        for right in [false, true] {
            qs.push(Query::Corner { bottom, right });
        }
    }
    for row in 0..rows {
        for col in 0..cols {
            qs.push(Query::Cell { row, col });
        }
    }
    for color in 0..COLORS.len() {
        qs.push(Query::Count { color });
        qs.push(Query::Exists { color });
    }
    qs
}

fn render(colors: &[Vec<usize>], grid: &GridSpec) -> Result<PatchGrid> {
    let mut pixels = Vec::with_capacity(grid.height * grid.width * 3);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let rgb = COLORS[colors[y / grid.block][x / grid.block]].1;
            pixels.extend_from_slice(&rgb);
        }
    }
    PatchGrid::new(grid.height, grid.width, 3, grid.patch, pixels)
}

/// `n` conversations with a turn count drawn uniformly from
/// `k_range.0..=k_range.1`; turns within a conversation ask distinct
/// questions. Deterministic in `seed`.
pub fn gen_dataset(n: usize, k_range: (usize, usize), grid: &GridSpec, seed: u64) -> Result<Vec<Conversation>> {
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let (k_min, k_max) = k_range;
    if k_min == 0 || k_min > k_max {
        return Err(Error::Config(format!("invalid turn range {k_min}..={k_max}")));
    }
    grid.validate()?;
    let (rows, cols) = (grid.block_rows(), grid.block_cols());
    let queries = all_queries(rows, cols);
    if k_max > queries.len() {
        return Err(Error::Config(format!(
            "at most {} distinct questions per image, asked for {k_max}",
            queries.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        let colors: Vec<Vec<usize>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.random_range(0..COLORS.len())).collect())
            .collect();
        let k = rng.random_range(k_min..=k_max);
        let mut picked: Vec<Query> = queries.choose_multiple(&mut rng, k).copied().collect();
        picked.shuffle(&mut rng);
        let turns = picked
            .into_iter()
            .map(|q| Turn {
                question: q.question(),
                answer: q.answer(&colors),
            })
            .collect();
        out.push(Conversation {
            id,
            image: render(&colors, grid)?,
            block: grid.block,
            turns,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: usize,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
    block: usize,
    pixels: String,
    turns: Vec<Turn>,
}

fn to_record(c: &Conversation) -> Record {
    let mut bytes = Vec::with_capacity(c.image.pixels.len() * 4);
    for p in &c.image.pixels {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    Record {
        id: c.id,
        height: c.image.height,
        width: c.image.width,
        channels: c.image.channels,
        patch: c.image.patch,
        block: c.block,
        pixels: B64.encode(bytes),
        turns: c.turns.clone(),
    }
}

fn from_record(r: Record) -> std::result::Result<Conversation, String> {
    let bytes = B64.decode(&r.pixels).map_err(|e| format!("bad pixel payload: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("pixel payload of {} bytes is not f32-aligned", bytes.len()));
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let image = PatchGrid::new(r.height, r.width, r.channels, r.patch, pixels).map_err(|e| e.to_string())?;
    if r.turns.is_empty() {
        return Err("conversation has no turns".into());
    }
    Ok(Conversation {
        id: r.id,
        image,
        block: r.block,
        turns: r.turns,
    })
}

pub fn save_dataset(path: &Path, convs: &[Conversation]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for c in convs {
        let line = serde_json::to_string(&to_record(c)).expect("record serializes");
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Conversation>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(from_record(record).map_err(parse_err)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_small_and_closed() {
        let v = vocabulary();
        assert!(v.len() <= 60, "{}", v.len());
        let convs = gen_dataset(50, (1, 6), &GridSpec::default(), 3).unwrap();
        for c in &convs {
            for t in &c.turns {
                v.encode(&t.question).unwrap();
                v.encode(&t.answer).unwrap();
            }
        }
    }

    #[test]
    fn turns_within_conversation_are_distinct() {
        for c in gen_dataset(40, (3, 5), &GridSpec::default(), 9).unwrap() {
            let mut qs: Vec<&str> = c.turns.iter().map(|t| t.question.as_str()).collect();
            qs.sort();
            qs.dedup();
            assert_eq!(qs.len(), c.turns.len());
        }
    }

    #[test]
    fn rejects_bad_requests() {
        let g = GridSpec::default();
        assert!(gen_dataset(0, (1, 1), &g, 0).is_err());
        assert!(gen_dataset(1, (0, 1), &g, 0).is_err());
        assert!(gen_dataset(1, (3, 2), &g, 0).is_err());
        let big = GridSpec {
            height: 40,
            width: 40,
            patch: 4,
            block: 4,
        };
        assert!(gen_dataset(1, (1, 1), &big, 0).is_err());
    }
}
