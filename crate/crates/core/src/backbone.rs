//! Per-modality ViT stacks. Template and search patches are embedded,
//! concatenated as `[Z; X]` and run jointly through pre-norm transformer
//! blocks, so one attention map covers template-template, template-search,
//! search-template and search-search relations. Cross-modal modules are
//! applied to the pair of streams after configured layer indices.

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Conv2d, Init, InitDist, LayerNorm, Linear, Mlp};
use crate::scam::Scam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Number of transformer blocks per branch.
    pub depth: usize,
    /// Token width C.
    pub dim: usize,
    pub heads: usize,
    /// Patch-embedding stride S, in pixels.
    pub patch: usize,
    pub mlp_ratio: usize,
    pub template_size: usize,
    pub search_size: usize,
    /// 1-based layer indices after which a cross-modal module runs.
    pub scam_layers: Vec<usize>,
    /// Tie the two branch stacks to one parameter set.
    pub share_branches: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            dim: 192,
            heads: 3,
            patch: 16,
            mlp_ratio: 4,
            template_size: 128,
            search_size: 256,
            scam_layers: vec![4, 7, 10],
            share_branches: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.patch == 0 {
            return Err(Error::config("depth, dim, heads and patch must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        for (name, size) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if size == 0 || size % self.patch != 0 {
                return Err(Error::config(format!(
                    "{name} {size} is not a positive multiple of patch {}",
                    self.patch
                )));
            }
        }
        let mut prev = 0;
        for &l in &self.scam_layers {
            if l == 0 || l > self.depth || l <= prev {
                return Err(Error::config(format!(
                    "scam_layers {:?} must be strictly increasing within [1, {}]",
                    self.scam_layers, self.depth
                )));
            }
            prev = l;
        }
        Ok(())
    }

    pub fn template_tokens(&self) -> usize {
        (self.template_size / self.patch).pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        (self.search_size / self.patch).pow(2)
    }

    /// Side of the search feature grid the heads operate on.
    pub fn feature_side(&self) -> usize {
        self.search_size / self.patch
    }
}

/// Concatenated `[Z; X]` token matrix of shape `(B, n_z + n_x, C)`.
#[derive(Debug, Clone)]
pub struct TokenSeq {
    pub tokens: Tensor,
    pub n_z: usize,
    pub n_x: usize,
}

impl TokenSeq {
    pub fn new(tokens: Tensor, n_z: usize, n_x: usize) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if n != n_z + n_x {
            return Err(Error::shape(format!("token count {n} != {n_z} + {n_x}")));
        }
        Ok(Self { tokens, n_z, n_x })
    }

    pub fn concat(z: &Tensor, x: &Tensor) -> Result<Self> {
        let n_z = z.dim(1)?;
        let n_x = x.dim(1)?;
        Self::new(Tensor::cat(&[z, x], 1)?, n_z, n_x)
    }

    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        Self::new(tokens, self.n_z, self.n_x)
    }

    pub fn len(&self) -> usize {
        self.n_z + self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.tokens.dim(2)?)
    }

    pub fn template(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(1, 0, self.n_z)?)
    }

    pub fn search(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(1, self.n_z, self.n_x)?)
    }

    pub fn same_shape(&self, other: &TokenSeq) -> bool {
        self.n_z == other.n_z && self.n_x == other.n_x && self.tokens.dims() == other.tokens.dims()
    }
}

/// Which crop a patch grid came from; each role has its own position table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Template,
    Search,
}

/// Learned position table for a square patch grid. Grids of a different
/// size are served by bilinear resampling of the table.
#[derive(Debug, Clone)]
struct PosEmbed {
    table: Tensor,
    side: usize,
}

impl PosEmbed {
    fn new(init: &mut Init, name: &str, side: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: init.param(name, &[1, side * side, dim], InitDist::TruncNormal(0.02))?,
            side,
        })
    }

    fn for_grid(&self, gh: usize, gw: usize) -> Result<Tensor> {
        if gh == self.side && gw == self.side {
            return Ok(self.table.clone());
        }
        let interp = bilinear_matrix(self.side, gh, gw);
        let m = Tensor::from_vec(interp, (gh * gw, self.side * self.side), self.table.device())?
            .to_dtype(self.table.dtype())?;
        Ok(m.broadcast_matmul(&self.table)?)
    }
}

/// Row-stochastic matrix resampling a `src x src` grid to `gh x gw`
/// (align-corners=false convention).
fn bilinear_matrix(src: usize, gh: usize, gw: usize) -> Vec<f64> {
    let axis = |dst: usize| -> Vec<(usize, usize, f64)> {
        (0..dst)
            .map(|i| {
                let f = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let a = f.floor() as usize;
                let b = (a + 1).min(src - 1);
                (a, b, f - a as f64)
            })
            .collect()
    };
    let ys = axis(gh);
    let xs = axis(gw);
    let n_src = src * src;
    let mut m = vec![0.0; gh * gw * n_src];
    for (i, &(ya, yb, fy)) in ys.iter().enumerate() {
        for (j, &(xa, xb, fx)) in xs.iter().enumerate() {
            let row = &mut m[(i * gw + j) * n_src..(i * gw + j + 1) * n_src];
            row[ya * src + xa] += (1.0 - fy) * (1.0 - fx);
            row[ya * src + xb] += (1.0 - fy) * fx;
            row[yb * src + xa] += fy * (1.0 - fx);
            row[yb * src + xb] += fy * fx;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    proj: Conv2d,
    pos_z: PosEmbed,
    pos_x: PosEmbed,
    patch: usize,
    dim: usize,
}

impl PatchEmbed {
    fn new(init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        let proj = Conv2d::new(&mut init.pp("proj"), 3, cfg.dim, cfg.patch, cfg.patch, 0)?;
        Ok(Self {
            proj,
            pos_z: PosEmbed::new(init, "pos_z", cfg.template_size / cfg.patch, cfg.dim)?,
            pos_x: PosEmbed::new(init, "pos_x", cfg.search_size / cfg.patch, cfg.dim)?,
            patch: cfg.patch,
            dim: cfg.dim,
        })
    }

    /// `(B, 3, H, W)` image batch -> `(B, (H/S)(W/S), C)` tokens with the
    /// role's position encoding added.
    pub fn forward(&self, image: &Tensor, role: Role) -> Result<Tensor> {
        let (_, ch, h, w) = image.dims4()?;
        if ch != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {ch}")));
        }
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} is not divisible by patch stride {}",
                self.patch
            )));
        }
        let feat = self.proj.forward(image)?;
        let (b, c, gh, gw) = feat.dims4()?;
        debug_assert_eq!(c, self.dim);
        let tokens = feat.reshape((b, c, gh * gw))?.transpose(1, 2)?;
        let pos = match role {
            Role::Template => self.pos_z.for_grid(gh, gw)?,
            Role::Search => self.pos_x.for_grid(gh, gw)?,
        };
        Ok(tokens.broadcast_add(&pos)?)
    }
}

/// Pre-norm transformer block with multi-head self-attention over all
/// template and search tokens jointly.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
    dim: usize,
}

impl Block {
    pub fn new(init: &mut Init, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut init.pp("norm1"), dim)?,
            qkv: Linear::new(&mut init.pp("attn.qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&mut init.pp("attn.proj"), dim, dim, true)?,
            norm2: LayerNorm::new(&mut init.pp("norm2"), dim)?,
            mlp: Mlp::new(&mut init.pp("mlp"), dim, dim * mlp_ratio)?,
            heads,
            dim,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }

    pub fn forward_tokens(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(D::Minus1)?;
        if c != self.dim {
            return Err(Error::shape(format!("block expects width {}, got {c}", self.dim)));
        }
        let x = (x + self.attention(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }

    pub fn forward(&self, h: &TokenSeq) -> Result<TokenSeq> {
        h.with_tokens(self.forward_tokens(&h.tokens)?)
    }
}

/// One modality's embedding, block stack and final norm.
#[derive(Debug, Clone)]
pub struct Branch {
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Branch {
    fn new(init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        let embed = PatchEmbed::new(&mut init.pp("patch_embed"), cfg)?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut init.pp(format!("blocks.{i}")), cfg.dim, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut init.pp("norm"), cfg.dim)?;
        Ok(Self { embed, blocks, norm })
    }

    pub fn embed_pair(&self, template: &Tensor, search: &Tensor) -> Result<TokenSeq> {
        let z = self.embed.forward(template, Role::Template)?;
        let x = self.embed.forward(search, Role::Search)?;
        TokenSeq::concat(&z, &x)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub rgb: Branch,
    pub sonar: Branch,
}

impl Backbone {
    /// Builds both stacks from the same generator state, so they start out
    /// identical whether or not their parameters are tied.
    pub fn new(init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let start: ChaCha8Rng = init.rng().clone();
        let rgb = Branch::new(&mut init.pp("rgb"), cfg)?;
        let sonar = if cfg.share_branches {
            rgb.clone()
        } else {
            let after = init.rng().clone();
            *init.rng() = start;
            let sonar = Branch::new(&mut init.pp("sonar"), cfg)?;
            *init.rng() = after;
            sonar
        };
        Ok(Self {
            cfg: cfg.clone(),
            rgb,
            sonar,
        })
    }

    /// Runs `depth` blocks on each stream. After every layer listed in
    /// `scam_layers` the matching module in `scams` couples the pair.
    pub fn forward_dual(&self, h_r: &TokenSeq, h_s: &TokenSeq, scams: &[Scam]) -> Result<(TokenSeq, TokenSeq)> {
        if scams.len() != self.cfg.scam_layers.len() {
            return Err(Error::config(format!(
                "{} cross-modal modules for {} insertion layers",
                scams.len(),
                self.cfg.scam_layers.len()
            )));
        }
        if !h_r.same_shape(h_s) {
            return Err(Error::shape(format!(
                "branch inputs differ: {:?} vs {:?}",
                h_r.tokens.dims(),
                h_s.tokens.dims()
            )));
        }
        let mut r = h_r.clone();
        let mut s = h_s.clone();
        let mut next = 0;
        for layer in 1..=self.cfg.depth {
            r = self.rgb.blocks[layer - 1].forward(&r)?;
            s = self.sonar.blocks[layer - 1].forward(&s)?;
            if self.cfg.scam_layers.get(next) == Some(&layer) {
                (r, s) = scams[next].forward(&r, &s)?;
                next += 1;
            }
        }
        Ok((r, s))
    }
}
