//! Building blocks shared by the vision encoder, text encoder and decoder.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Tensor, Var};
use crate::params::{Bound, ParamGroup, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Hidden activation of a two-layer MLP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Gelu,
    /// Purely linear projector.
    Identity,
}

pub(crate) fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    group: ParamGroup,
    rng: &mut R,
) {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng), group);
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]), group);
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup) {
    store.insert(format!("{name}.g"), Tensor::full(&[d], 1.0), group);
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]), group);
}

pub(crate) fn init_mlp<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    group: ParamGroup,
    rng: &mut R,
) {
    init_linear(store, &format!("{name}.fc1"), d_in, d_hidden, group, rng);
    init_linear(store, &format!("{name}.fc2"), d_hidden, d_out, group, rng);
}

/// Pre-norm transformer block parameters under `prefix`.
pub(crate) fn init_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    group: ParamGroup,
    rng: &mut R,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d, group);
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.attn.{proj}"), d, d, group, rng);
    }
    store.remove(&format!("{prefix}.attn.k.b"));
    init_layer_norm(store, &format!("{prefix}.ln2"), d, group);
    init_mlp(store, &format!("{prefix}.mlp"), d, 4 * d, d, group, rng);
}

pub fn linear<'t>(b: &Bound<'_, 't>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.matmul(b.var(&format!("{name}.w"))?)?
        .add_row(b.var(&format!("{name}.b"))?)
}

pub fn layer_norm<'t>(b: &Bound<'_, 't>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.layer_norm(b.var(&format!("{name}.g"))?, b.var(&format!("{name}.b"))?, LN_EPS)
}

pub fn mlp<'t>(b: &Bound<'_, 't>, name: &str, x: Var<'t>, act: Activation) -> Result<Var<'t>> {
    let h = linear(b, &format!("{name}.fc1"), x)?;
    let h = match act {
        Activation::Gelu => h.gelu(),
        Activation::Identity => h,
    };
    linear(b, &format!("{name}.fc2"), h)
}

pub struct BlockOutput<'t> {
    pub out: Var<'t>,
    /// The attention node; its saved probabilities are available through
    /// `Tape::attention_probs`.
    pub attn: Var<'t>,
}

/// `h = x + Attn(LN(x))`, `out = h + MLP(LN(h))`.
pub fn block<'t>(
    b: &Bound<'_, 't>,
    prefix: &str,
    x: Var<'t>,
    heads: usize,
    key_mask: Option<&[bool]>,
    causal: bool,
) -> Result<BlockOutput<'t>> {
    let n = layer_norm(b, &format!("{prefix}.ln1"), x)?;
    let q = linear(b, &format!("{prefix}.attn.q"), n)?;
    let k = n.matmul(b.var(&format!("{prefix}.attn.k.w"))?)?;
    let v = linear(b, &format!("{prefix}.attn.v"), n)?;
    let attn = q.attention(k, v, heads, key_mask, causal)?;
    let h = x.add(linear(b, &format!("{prefix}.attn.o"), attn)?)?;
    let n2 = layer_norm(b, &format!("{prefix}.ln2"), h)?;
    let out = h.add(mlp(b, &format!("{prefix}.mlp"), n2, Activation::Gelu)?)?;
    Ok(BlockOutput { out, attn })
}
