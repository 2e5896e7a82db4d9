//! Multi-turn visual token pruning.
//!
//! Turn 0 is kept whole. Every later turn is first pruned against turn 0;
//! then, for `s = 1..K-2`, every turn after `s` is pruned again against the
//! retained tokens of turn `s`. A token is compared only with the token at
//! the same spatial index in the reference and survives when their cosine
//! similarity is at most `tau`; tokens whose index the reference no longer
//! holds survive unconditionally.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, Tensor};

pub const COSINE_EPS: f64 = 1e-12;

/// Embedding rows tagged with their spatial index in `[0, N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedTokens {
    idx: Vec<usize>,
    emb: Tensor,
}

impl IndexedTokens {
    /// `idx` must be strictly increasing, below `n`, one per row of `emb`.
    pub fn new(idx: Vec<usize>, emb: Tensor, n: usize) -> Result<Self> {
        if emb.shape().len() != 2 || idx.len() != emb.rows() {
            return Err(Error::Dimension {
                op: "IndexedTokens",
                left: vec![idx.len()],
                right: emb.shape().to_vec(),
            });
        }
        if idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidTensor(format!(
                "spatial indices must be strictly increasing: {idx:?}"
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "IndexedTokens",
                index: bad,
                size: n,
            });
        }
        Ok(Self { idx, emb })
    }

    /// All rows of an `N×d1` turn, indices `0..N`.
    pub fn full(emb: Tensor) -> Result<Self> {
        if emb.shape().len() != 2 {
            return Err(Error::InvalidTensor(format!(
                "turn tokens must be a matrix, got shape {:?}",
                emb.shape()
            )));
        }
        Ok(Self {
            idx: (0..emb.rows()).collect(),
            emb,
        })
    }

    pub fn idx(&self) -> &[usize] {
        &self.idx
    }

    pub fn emb(&self) -> &Tensor {
        &self.emb
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn width(&self) -> usize {
        self.emb.cols()
    }
}

/// Keeps the rows of `cur` whose spatial index is absent from `reference`
/// or whose cosine similarity with the reference row at that index is
/// `<= tau`. Order is preserved and rows are never modified.
pub fn prune_pair(cur: &IndexedTokens, reference: &IndexedTokens, tau: f64) -> Result<IndexedTokens> {
    if cur.width() != reference.width() {
        return Err(Error::Dimension {
            op: "prune_pair",
            left: cur.emb.shape().to_vec(),
            right: reference.emb.shape().to_vec(),
        });
    }
    let mut keep = Vec::with_capacity(cur.len());
    // both index lists are sorted: walk them together
    let mut r = 0;
    for (row, &spatial) in cur.idx.iter().enumerate() {
        while r < reference.idx.len() && reference.idx[r] < spatial {
            r += 1;
        }
        let matched = r < reference.idx.len() && reference.idx[r] == spatial;
        if !matched {
            keep.push(row);
            continue;
        }
        let cos = cosine_similarity(cur.emb.row(row), reference.emb.row(r), COSINE_EPS)?;
        if cos <= tau {
            keep.push(row);
        }
    }
    Ok(select(cur, &keep))
}

fn select(tokens: &IndexedTokens, rows: &[usize]) -> IndexedTokens {
    let d = tokens.width();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(tokens.emb.row(r));
    }
    IndexedTokens {
        idx: rows.iter().map(|&r| tokens.idx[r]).collect(),
        emb: Tensor::new(vec![rows.len(), d], data).expect("row selection keeps shape"),
    }
}

fn check_turns(turns: &[Tensor]) -> Result<()> {
    let first = turns
        .first()
        .ok_or_else(|| Error::EmptyInput("pruning needs at least one turn".into()))?;
    if first.shape().len() != 2 {
        return Err(Error::InvalidTensor(format!(
            "turn tokens must be N×d1, got {:?}",
            first.shape()
        )));
    }
    for t in turns {
        if t.shape() != first.shape() {
            return Err(Error::Dimension {
                op: "prune_multiturn",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Prunes `K` per-turn `N×d1` token matrices; see the module docs.
pub fn prune_multiturn(turns: &[Tensor], tau: f64) -> Result<Vec<IndexedTokens>> {
    check_turns(turns)?;
    let mut useful = vec![IndexedTokens::full(turns[0].clone())?];
    for t in &turns[1..] {
        useful.push(prune_pair(&IndexedTokens::full(t.clone())?, &useful[0], tau)?);
    }
    for step in 2..turns.len() {
        let (kept, later) = useful.split_at_mut(step);
        let reference = &kept[step - 1];
        for cur in later.iter_mut() {
            *cur = prune_pair(cur, reference, tau)?;
        }
    }
    Ok(useful)
}

/// Reference semantics for [`prune_multiturn`]: a literal nested-loop
/// transcription of the pruning pseudocode with plain vectors and linear
/// index searches. Slow on purpose; used to cross-check the real path.
pub mod oracle {
    use super::*;

    #[derive(Clone)]
    struct Turn {
        idx_list: Vec<usize>,
        tensor: Vec<Vec<f64>>,
    }

    fn prune_tokens(cur: &Turn, reference: &Turn, tau: f64) -> Result<Turn> {
        let mut ret = Turn {
            idx_list: vec![],
            tensor: vec![],
        };
        for i in 0..cur.idx_list.len() {
            let spatial_i = cur.idx_list[i];
            let cur_token = &cur.tensor[i];
            if !reference.idx_list.contains(&spatial_i) {
                ret.idx_list.push(spatial_i);
                ret.tensor.push(cur_token.clone());
            } else {
                let mut j = 0;
                while reference.idx_list[j] != spatial_i {
                    j += 1;
                }
                let ref_token = &reference.tensor[j];
                let cosine_sim = cosine_similarity(cur_token, ref_token, COSINE_EPS)?;
                if cosine_sim <= tau {
                    ret.idx_list.push(spatial_i);
                    ret.tensor.push(cur_token.clone());
                }
            }
        }
        Ok(ret)
    }

    fn prune_concat(mut useful_all: Vec<Turn>, new_t: Vec<Turn>, tau: f64) -> Result<Vec<Turn>> {
        let reference = useful_all[useful_all.len() - 1].clone();
        for cur in new_t {
            let useful = prune_tokens(&cur, &reference, tau)?;
            useful_all.push(useful);
        }
        Ok(useful_all)
    }

    pub fn brute_force_oracle(turns: &[Tensor], tau: f64) -> Result<Vec<IndexedTokens>> {
        check_turns(turns)?;
        let k_turns = turns.len();
        let n = turns[0].rows();
        let whole = |t: &Tensor| Turn {
            idx_list: (0..n).collect(),
            tensor: (0..n).map(|r| t.row(r).to_vec()).collect(),
        };
        let mut t_u = vec![whole(&turns[0])];
        let reference = t_u[0].clone();
        for turn in turns.iter().skip(1) {
            let cur = whole(turn);
            let useful = prune_tokens(&cur, &reference, tau)?;
            t_u.push(useful);
        }
        for k in 2..k_turns {
            let new_t = t_u[k..].to_vec();
            t_u = prune_concat(t_u[..k].to_vec(), new_t, tau)?;
        }
        let d = turns[0].cols();
        t_u.into_iter()
            .map(|t| {
                let rows = t.tensor.len();
                let emb = Tensor::new(vec![rows, d], t.tensor.concat())?;
                IndexedTokens::new(t.idx_list, emb, n)
            })
            .collect()
    }
}

/// Sequence-length accounting for one conversation.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub tau: f64,
    /// Retained visual tokens per turn.
    pub retained: Vec<usize>,
    /// Tokens per turn before pruning (`N`).
    pub tokens_per_turn: usize,
    /// Total text tokens `M'`.
    pub text_tokens: usize,
}

impl PruneReport {
    pub fn from_pruned(pruned: &[IndexedTokens], n: usize, text_tokens: usize, tau: f64) -> Self {
        Self {
            tau,
            retained: pruned.iter().map(IndexedTokens::len).collect(),
            tokens_per_turn: n,
            text_tokens,
        }
    }

    pub fn visual_before(&self) -> usize {
        self.tokens_per_turn * self.retained.len()
    }

    pub fn visual_after(&self) -> usize {
        self.retained.iter().sum()
    }

    /// `M' + N·K`
    pub fn total_before(&self) -> usize {
        self.text_tokens + self.visual_before()
    }

    /// `M' + Σ retained`
    pub fn total_after(&self) -> usize {
        self.text_tokens + self.visual_after()
    }

    pub const CSV_HEADER: &'static str =
        "tau,turns,tokens_per_turn,text_tokens,visual_before,visual_after,total_before,total_after,retained_per_turn";

    pub fn csv_row(&self) -> String {
        let per_turn: Vec<String> = self.retained.iter().map(|r| r.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.tau,
            self.retained.len(),
            self.tokens_per_turn,
            self.text_tokens,
            self.visual_before(),
            self.visual_after(),
            self.total_before(),
            self.total_after(),
            per_turn.join(";")
        )
    }
}

/// Prunes `turns` and reports sequence lengths; `text_lengths` are the
/// per-turn question+answer token counts.
pub fn sequence_length_report(turns: &[Tensor], text_lengths: &[usize], tau: f64) -> Result<PruneReport> {
    let pruned = prune_multiturn(turns, tau)?;
    Ok(PruneReport::from_pruned(
        &pruned,
        turns[0].rows(),
        text_lengths.iter().sum(),
        tau,
    ))
}

/// One comma-separated index list per turn, newline terminated.
pub fn format_index_lists(pruned: &[IndexedTokens]) -> String {
    let mut out = String::new();
    for t in pruned {
        let idx: Vec<String> = t.idx().iter().map(|i| i.to_string()).collect();
        let _ = writeln!(out, "{}", idx.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(idx: &[usize], rows: &[[f64; 2]], n: usize) -> IndexedTokens {
        let emb = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        IndexedTokens::new(idx.to_vec(), emb, n).unwrap()
    }

    #[test]
    fn identical_pair_fully_pruned() {
        let t = tokens(&[0, 1, 2], &[[1., 0.], [0., 1.], [1., 1.]], 3);
        assert!(prune_pair(&t, &t, 0.95).unwrap().is_empty());
    }

    #[test]
    fn tau_one_keeps_everything() {
        let t = tokens(&[0, 1, 2], &[[1., 0.], [0., 1.], [1., 1.]], 3);
        assert_eq!(prune_pair(&t, &t, 1.0).unwrap(), t);
    }

    #[test]
    fn only_common_indices_are_compared() {
        // 10 and 16 match the reference exactly and go; 15 has no partner
        let cur = tokens(&[10, 15, 16], &[[1., 0.], [1., 0.], [0., 1.]], 20);
        let reference = tokens(&[10, 16, 17], &[[1., 0.], [0., 1.], [1., 0.]], 20);
        let out = prune_pair(&cur, &reference, 0.95).unwrap();
        assert_eq!(out.idx(), &[15]);
        // orthogonal partners survive
        let reference = tokens(&[10, 16, 17], &[[0., 1.], [1., 0.], [1., 0.]], 20);
        let out = prune_pair(&cur, &reference, 0.95).unwrap();
        assert_eq!(out.idx(), &[10, 15, 16]);
    }

    #[test]
    fn boundary_tie_is_retained() {
        let cur = tokens(&[0], &[[1., 0.]], 1);
        let reference = tokens(&[0], &[[0.6, 0.8]], 1);
        let cos = cosine_similarity(&[1., 0.], &[0.6, 0.8], COSINE_EPS).unwrap();
        assert_eq!(prune_pair(&cur, &reference, cos).unwrap().len(), 1);
        assert_eq!(prune_pair(&cur, &reference, cos - 1e-9).unwrap().len(), 0);
    }

    #[test]
    fn invalid_indices_rejected() {
        let emb = Tensor::zeros(&[2, 2]);
        assert!(IndexedTokens::new(vec![1, 1], emb.clone(), 4).is_err());
        assert!(IndexedTokens::new(vec![1, 4], emb.clone(), 4).is_err());
        assert!(IndexedTokens::new(vec![1], emb, 4).is_err());
    }

    #[test]
    fn empty_and_mismatched_turns() {
        assert!(matches!(prune_multiturn(&[], 0.9), Err(Error::EmptyInput(_))));
        let a = Tensor::zeros(&[4, 2]);
        let b = Tensor::zeros(&[4, 3]);
        assert!(matches!(prune_multiturn(&[a, b], 0.9), Err(Error::Dimension { .. })));
    }

    #[test]
    fn index_list_format() {
        let a = tokens(&[0, 2], &[[1., 0.], [0., 1.]], 3);
        let empty = IndexedTokens::new(vec![], Tensor::zeros(&[0, 2]), 3).unwrap();
        assert_eq!(format_index_lists(&[a, empty]), "0,2\n\n");
    }
}
