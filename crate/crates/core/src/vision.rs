//! Toy vision transformer with optional visual prompts, plus the connector
//! that maps patch features into the decoder's embedding space.
//!
//! Per layer the token sequence is `[CLS, shared prompts, instruction
//! prompts, patches]`. Prompt outputs are dropped before anything leaves the
//! encoder, so callers always see exactly `1 + N` rows.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::instruct::PromptBundle;
use crate::layers::{self, Activation};
use crate::numerics::{concat_rows, Tensor, Var};
use crate::params::{Bound, ParamGroup, ParamStore};

/// Image of `height×width×channels` pixels in `[0, 1]`, row-major with
/// channels innermost, cut into `patch×patch` tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub pixels: Vec<f32>,
}

impl PatchGrid {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let grid = Self {
            height,
            width,
            channels,
            patch,
            pixels,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch size {} must divide image {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        let expected = self.height * self.width * self.channels;
        if self.pixels.len() != expected {
            return Err(Error::Config(format!(
                "image {}x{}x{} needs {expected} pixels, got {}",
                self.height,
                self.width,
                self.channels,
                self.pixels.len()
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// Raster-order patches, one row per patch, each flattened as
/// `(dy, dx, channel)`. Row `i` is spatial index `i`.
pub fn patchify(img: &PatchGrid) -> Result<Tensor> {
    img.validate()?;
    let p = img.patch;
    let (gh, gw) = (img.height / p, img.width / p);
    let row_len = p * p * img.channels;
    let mut data = Vec::with_capacity(gh * gw * row_len);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..img.channels {
                        data.push(img.pixel(py * p + dy, px * p + dx, c) as f64);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, row_len], data)
}

/// Where visual prompts enter the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PromptScheme {
    /// Plain encoder, prompts ignored.
    None,
    /// Prompts prepended before the first layer; their outputs flow on.
    Shallow,
    /// Prompts re-inserted at every layer, previous prompt outputs dropped.
    #[default]
    Deep,
}

impl fmt::Display for PromptScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptScheme::None => "none",
            PromptScheme::Shallow => "shallow",
            PromptScheme::Deep => "deep",
        })
    }
}

impl FromStr for PromptScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PromptScheme::None),
            "shallow" => Ok(PromptScheme::Shallow),
            "deep" => Ok(PromptScheme::Deep),
            _ => Err(Error::Config(format!(
                "prompt scheme must be none|shallow|deep, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub scheme: PromptScheme,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 32,
            heads: 4,
            patch_size: 4,
            image_height: 16,
            image_width: 16,
            channels: 3,
            scheme: PromptScheme::Deep,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("vit depth must be >= 1".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "vit width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.patch_size == 0
            || !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "patch size {} must divide image {}x{}",
                self.patch_size, self.image_height, self.image_width
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Encoder output with prompt slots removed.
#[derive(Clone, Copy, Debug)]
pub struct VisualFeatures<'t> {
    /// `1×d`
    pub cls: Var<'t>,
    /// `N×d`, row `i` at spatial index `i`.
    pub patches: Var<'t>,
}

/// Attention nodes recorded during a traced forward.
#[derive(Clone, Debug)]
pub struct VitTrace<'t> {
    /// One attention node per layer.
    pub attn: Vec<Var<'t>>,
    /// Row of the first patch token inside each layer's sequence.
    pub patch_offset: Vec<usize>,
    /// Sequence length seen by each layer.
    pub seq_len: Vec<usize>,
}

pub const VIT: &str = "vit";

#[derive(Clone, Debug)]
pub struct Vit {
    cfg: VitConfig,
}

impl Vit {
    pub fn new(cfg: VitConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    /// Backbone parameters, all in the frozen group.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let g = ParamGroup::VitBackbone;
        let d = self.cfg.width;
        layers::init_linear(store, "vit.patch_embed", self.cfg.patch_dim(), d, g, rng);
        store.insert("vit.cls", Tensor::randn(&[1, d], 0.02, rng), g);
        store.insert(
            "vit.pos",
            Tensor::randn(&[self.cfg.num_patches(), d], 0.02, rng),
            g,
        );
        for j in 0..self.cfg.depth {
            layers::init_block(store, &format!("vit.layer{j}"), d, g, rng);
        }
        layers::init_layer_norm(store, "vit.ln_out", d, g);
    }

    fn check_image(&self, img: &PatchGrid) -> Result<()> {
        let c = &self.cfg;
        if img.height != c.image_height
            || img.width != c.image_width
            || img.channels != c.channels
            || img.patch != c.patch_size
        {
            return Err(Error::Config(format!(
                "image {}x{}x{} patch {} does not match encoder {}x{}x{} patch {}",
                img.height,
                img.width,
                img.channels,
                img.patch,
                c.image_height,
                c.image_width,
                c.channels,
                c.patch_size
            )));
        }
        Ok(())
    }

    /// Patch embeddings plus positions, and the CLS token: the input to
    /// layer 1.
    pub fn embed<'t>(&self, b: &Bound<'_, 't>, img: &PatchGrid) -> Result<(Var<'t>, Var<'t>)> {
        self.check_image(img)?;
        let patches = b.tape().constant(patchify(img)?);
        let tokens = layers::linear(b, "vit.patch_embed", patches)?.add(b.var("vit.pos")?)?;
        Ok((b.var("vit.cls")?, tokens))
    }

    /// One encoder layer over `[cls, tokens]` with full attention.
    pub fn layer<'t>(
        &self,
        b: &Bound<'_, 't>,
        j: usize,
        cls: Var<'t>,
        tokens: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if j >= self.cfg.depth {
            return Err(Error::Index {
                op: "vit layer",
                index: j,
                size: self.cfg.depth,
            });
        }
        let d = self.cfg.width;
        if cls.cols() != d || tokens.cols() != d {
            return Err(Error::Dimension {
                op: "vit_layer",
                left: cls.shape(),
                right: tokens.shape(),
            });
        }
        let seq = concat_rows(&[cls, tokens])?;
        let out = layers::block(b, &format!("vit.layer{j}"), seq, self.cfg.heads, None, false)?.out;
        Ok((out.slice_rows(0, 1)?, out.slice_rows(1, out.rows())?))
    }

    fn finish<'t>(
        &self,
        b: &Bound<'_, 't>,
        cls: Var<'t>,
        patches: Var<'t>,
    ) -> Result<VisualFeatures<'t>> {
        let n = patches.rows();
        let out = layers::layer_norm(b, "vit.ln_out", concat_rows(&[cls, patches])?)?;
        Ok(VisualFeatures {
            cls: out.slice_rows(0, 1)?,
            patches: out.slice_rows(1, 1 + n)?,
        })
    }

    /// Prompt-free reference forward: layer after layer over `[CLS, patches]`.
    pub fn forward_plain<'t>(&self, b: &Bound<'_, 't>, img: &PatchGrid) -> Result<VisualFeatures<'t>> {
        let (mut cls, mut tokens) = self.embed(b, img)?;
        for j in 0..self.cfg.depth {
            (cls, tokens) = self.layer(b, j, cls, tokens)?;
        }
        self.finish(b, cls, tokens)
    }

    pub fn prompted_forward<'t>(
        &self,
        b: &Bound<'_, 't>,
        img: &PatchGrid,
        bundle: &PromptBundle<'t>,
    ) -> Result<VisualFeatures<'t>> {
        Ok(self.prompted_forward_traced(b, img, bundle)?.0)
    }

    pub fn prompted_forward_traced<'t>(
        &self,
        b: &Bound<'_, 't>,
        img: &PatchGrid,
        bundle: &PromptBundle<'t>,
    ) -> Result<(VisualFeatures<'t>, VitTrace<'t>)> {
        let scheme = self.cfg.scheme;
        let d = self.cfg.width;
        if scheme != PromptScheme::None {
            self.check_bundle(bundle)?;
        }
        let (mut cls, mut patches) = self.embed(b, img)?;
        let n = patches.rows();
        let mut trace = VitTrace {
            attn: Vec::with_capacity(self.cfg.depth),
            patch_offset: Vec::with_capacity(self.cfg.depth),
            seq_len: Vec::with_capacity(self.cfg.depth),
        };
        // prompt rows carried between layers under the shallow scheme
        let mut carried: Option<Var<'t>> = None;
        let ip_rows = bundle.instruction.map_or(0, |v| v.rows());

        for j in 0..self.cfg.depth {
            let mut parts = vec![cls];
            let mut mask = vec![true];
            match scheme {
                PromptScheme::None => {}
                PromptScheme::Deep => {
                    let sp = bundle.shared[j];
                    mask.extend(std::iter::repeat_n(true, sp.rows()));
                    parts.push(sp);
                    if let Some(ip) = bundle.instruction {
                        parts.push(ip);
                        mask.extend_from_slice(&bundle.mask);
                    }
                }
                PromptScheme::Shallow => {
                    let sp_rows = bundle.shared[0].rows();
                    let prompts = match carried {
                        Some(p) => p,
                        None => {
                            let mut first = vec![bundle.shared[0]];
                            first.extend(bundle.instruction);
                            concat_rows(&first)?
                        }
                    };
                    parts.push(prompts);
                    mask.extend(std::iter::repeat_n(true, sp_rows));
                    mask.extend_from_slice(&bundle.mask);
                }
            }
            let offset = mask.len();
            parts.push(patches);
            mask.extend(std::iter::repeat_n(true, n));
            let seq = concat_rows(&parts)?;
            debug_assert_eq!(seq.cols(), d);
            let all_visible = mask.iter().all(|&m| m);
            let out = layers::block(
                b,
                &format!("vit.layer{j}"),
                seq,
                self.cfg.heads,
                (!all_visible).then_some(mask.as_slice()),
                false,
            )?;
            trace.attn.push(out.attn);
            trace.patch_offset.push(offset);
            trace.seq_len.push(mask.len());
            let s = out.out.rows();
            cls = out.out.slice_rows(0, 1)?;
            patches = out.out.slice_rows(offset, s)?;
            if scheme == PromptScheme::Shallow {
                carried = Some(out.out.slice_rows(1, offset)?);
            }
            debug_assert!(scheme != PromptScheme::Deep || offset == 1 + bundle.shared[j].rows() + ip_rows);
        }
        Ok((self.finish(b, cls, patches)?, trace))
    }

    fn check_bundle(&self, bundle: &PromptBundle<'_>) -> Result<()> {
        let d = self.cfg.width;
        let needed = match self.cfg.scheme {
            PromptScheme::Deep => self.cfg.depth,
            _ => 1,
        };
        if bundle.shared.len() < needed {
            return Err(Error::Config(format!(
                "{} scheme needs {needed} shared prompt banks, bundle has {}",
                self.cfg.scheme,
                bundle.shared.len()
            )));
        }
        let total_rows = bundle.shared[0].rows() + bundle.instruction.map_or(0, |v| v.rows());
        if total_rows == 0 {
            return Err(Error::Config(format!(
                "{} scheme with an empty prompt bundle",
                self.cfg.scheme
            )));
        }
        for v in bundle.shared.iter().chain(bundle.instruction.iter()) {
            if v.rows() > 0 && v.cols() != d {
                return Err(Error::Dimension {
                    op: "prompt width",
                    left: v.shape(),
                    right: vec![d],
                });
            }
        }
        if bundle.mask.len() != bundle.instruction.map_or(0, |v| v.rows()) {
            return Err(Error::Config(format!(
                "instruction mask length {} does not match {} prompt rows",
                bundle.mask.len(),
                bundle.instruction.map_or(0, |v| v.rows())
            )));
        }
        Ok(())
    }
}

/// Mean over heads of the CLS row's attention to the patch tokens at
/// `layer`, reshaped to the patch grid.
pub fn cls_patch_attention(trace: &VitTrace<'_>, layer: usize, grid: (usize, usize)) -> Result<Tensor> {
    let attn = *trace.attn.get(layer).ok_or(Error::Index {
        op: "attention layer",
        index: layer,
        size: trace.attn.len(),
    })?;
    let probs = attn
        .tape()
        .attention_probs(attn)
        .ok_or_else(|| Error::Tape("node is not an attention node".into()))?;
    let offset = trace.patch_offset[layer];
    let n = grid.0 * grid.1;
    let mut out = vec![0.0; n];
    for p in &probs {
        for (o, v) in out.iter_mut().zip(&p.row(0)[offset..offset + n]) {
            *o += v / probs.len() as f64;
        }
    }
    Tensor::new(vec![grid.0, grid.1], out)
}

/// Vision-to-language connector: two-layer MLP `d → d1 → d1`.
#[derive(Clone, Debug)]
pub struct Connector {
    pub d_in: usize,
    pub d_out: usize,
    pub act: Activation,
}

impl Connector {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        layers::init_mlp(
            store,
            "connector",
            self.d_in,
            self.d_out,
            self.d_out,
            ParamGroup::Connector,
            rng,
        );
    }

    /// Identity weights; requires `d_in == d_out`.
    pub fn init_identity(&self, store: &mut ParamStore) -> Result<()> {
        if self.d_in != self.d_out {
            return Err(Error::Config(format!(
                "identity connector needs d == d1, got {} and {}",
                self.d_in, self.d_out
            )));
        }
        let g = ParamGroup::Connector;
        for fc in ["fc1", "fc2"] {
            store.insert(format!("connector.{fc}.w"), Tensor::identity(self.d_in), g);
            store.insert(format!("connector.{fc}.b"), Tensor::zeros(&[self.d_in]), g);
        }
        Ok(())
    }

    /// Maps the `N` patch rows into decoder space; CLS is dropped.
    pub fn forward<'t>(&self, b: &Bound<'_, 't>, feat: &VisualFeatures<'t>) -> Result<Var<'t>> {
        if feat.patches.cols() != self.d_in {
            return Err(Error::Dimension {
                op: "connect_to_text_space",
                left: feat.patches.shape(),
                right: vec![self.d_in],
            });
        }
        layers::mlp(b, "connector", feat.patches, self.act)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, c: usize, p: usize, f: impl Fn(usize) -> f32) -> PatchGrid {
        PatchGrid::new(h, w, c, p, (0..h * w * c).map(f).collect()).unwrap()
    }

    #[test]
    fn patchify_small_grid() {
        let img = grid(8, 8, 1, 4, |i| i as f32 / 64.0);
        let t = patchify(&img).unwrap();
        assert_eq!(t.shape(), &[4, 16]);
        // second patch starts at column 4 of row 0
        assert_eq!(t.row(1)[0], 4.0 / 64.0);
        // third patch starts at row 4 of column 0
        assert_eq!(t.row(2)[0], 32.0 / 64.0);
    }

    #[test]
    fn patchify_reference_encoder_count() {
        let img = grid(336, 336, 3, 14, |_| 0.5);
        assert_eq!(patchify(&img).unwrap().rows(), 576);
    }

    #[test]
    fn constant_image_rows_identical() {
        let img = grid(8, 12, 3, 4, |_| 0.25);
        let t = patchify(&img).unwrap();
        for i in 1..t.rows() {
            assert_eq!(t.row(i), t.row(0));
        }
    }

    #[test]
    fn non_divisible_patch_is_config_error() {
        let r = PatchGrid::new(10, 8, 1, 4, vec![0.0; 80]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn scheme_parses() {
        for s in ["none", "shallow", "deep"] {
            assert_eq!(s.parse::<PromptScheme>().unwrap().to_string(), s);
        }
        assert!("medium".parse::<PromptScheme>().is_err());
    }
}
