//! Spatial cross-attention between the RGB and sonar token streams.
//!
//! For each modality the queries are the raw tokens (no projection); keys
//! and values come from one bias-free `C -> 2C` projection split in half.
//! The attention map pairs a modality's queries with the *other* modality's
//! keys, is gated with ReLU (background correlations with negative scores
//! are zeroed), and mixes the modality's *own* values:
//!
//! ```text
//! attn_r = relu(Q_r K_s^T / sqrt(d)) V_r + H_r
//! attn_s = relu(Q_s K_r^T / sqrt(d)) V_s + H_s
//! out_i  = GIM_i(attn_i) + H_i
//! ```
//!
//! `d` is the per-head width (`C` with a single head).
//!
//! Each branch has its own global integration MLP (GIM). The GIM output
//! layer starts at zero so a freshly inserted module passes the streams
//! through unchanged.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenSeq;
use crate::error::{Error, Result};
use crate::nn::{softmax_last, Init, LayerNorm, Linear, Mlp};

/// Gating / integration variants used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScamMode {
    /// ReLU-gated cross attention followed by GIM (the full module).
    #[default]
    ReluGim,
    ReluNogim,
    SoftmaxGim,
    /// Softmax cross attention without GIM.
    SoftmaxNogim,
}

impl ScamMode {
    pub fn uses_relu(self) -> bool {
        matches!(self, ScamMode::ReluGim | ScamMode::ReluNogim)
    }

    pub fn uses_gim(self) -> bool {
        matches!(self, ScamMode::ReluGim | ScamMode::SoftmaxGim)
    }
}

/// Which tensor the GIM residual adds back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GimResidual {
    /// The module input `H_i`.
    #[default]
    Input,
    /// The attention output `H_i^attn`.
    Attn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScamConfig {
    pub mode: ScamMode,
    pub heads: usize,
    pub gim_ratio: usize,
    pub gim_residual: GimResidual,
    pub prenorm: bool,
}

impl Default for ScamConfig {
    fn default() -> Self {
        Self {
            mode: ScamMode::ReluGim,
            heads: 1,
            gim_ratio: 4,
            gim_residual: GimResidual::Input,
            prenorm: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scam {
    kv_r: Linear,
    kv_s: Linear,
    gim_r: Mlp,
    gim_s: Mlp,
    norm_r: Option<LayerNorm>,
    norm_s: Option<LayerNorm>,
    cfg: ScamConfig,
    dim: usize,
}

impl Scam {
    pub fn new(init: &mut Init, dim: usize, cfg: &ScamConfig) -> Result<Self> {
        if cfg.heads == 0 || dim % cfg.heads != 0 {
            return Err(Error::config(format!(
                "scam heads {} must divide dim {dim}",
                cfg.heads
            )));
        }
        let kv_r = Linear::new(&mut init.pp("kv_r"), dim, 2 * dim, false)?;
        let kv_s = Linear::new(&mut init.pp("kv_s"), dim, 2 * dim, false)?;
        let gim_r = Mlp::new(&mut init.pp("gim_r"), dim, dim * cfg.gim_ratio)?;
        let gim_s = Mlp::new(&mut init.pp("gim_s"), dim, dim * cfg.gim_ratio)?;
        let (norm_r, norm_s) = if cfg.prenorm {
            (
                Some(LayerNorm::new(&mut init.pp("norm_r"), dim)?),
                Some(LayerNorm::new(&mut init.pp("norm_s"), dim)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            kv_r,
            kv_s,
            gim_r,
            gim_s,
            norm_r,
            norm_s,
            cfg: cfg.clone(),
            dim,
        })
    }

    pub fn config(&self) -> &ScamConfig {
        &self.cfg
    }

    /// The same module with the two modalities' parameters exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            kv_r: self.kv_s.clone(),
            kv_s: self.kv_r.clone(),
            gim_r: self.gim_s.clone(),
            gim_s: self.gim_r.clone(),
            norm_r: self.norm_s.clone(),
            norm_s: self.norm_r.clone(),
            cfg: self.cfg.clone(),
            dim: self.dim,
        }
    }

    fn check(&self, h_r: &TokenSeq, h_s: &TokenSeq) -> Result<()> {
        if !h_r.same_shape(h_s) {
            return Err(Error::shape(format!(
                "modalities differ in shape: {:?} vs {:?}",
                h_r.tokens.dims(),
                h_s.tokens.dims()
            )));
        }
        let c = h_r.dim()?;
        if c != self.dim {
            return Err(Error::shape(format!("module width {} vs tokens {c}", self.dim)));
        }
        Ok(())
    }

    fn heads_view(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let h = self.cfg.heads;
        Ok(x.reshape((b, n, h, c / h))?.transpose(1, 2)?.contiguous()?)
    }

    /// `gate(Q_own K_other^T / sqrt(d)) V_own`, without the residual.
    fn cross_term(&self, q: &Tensor, k_other: &Tensor, v_own: &Tensor) -> Result<Tensor> {
        let (b, n, c) = q.dims3()?;
        let hd = c / self.cfg.heads;
        let q = self.heads_view(q)?;
        let k = self.heads_view(k_other)?;
        let v = self.heads_view(v_own)?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let gated = if self.cfg.mode.uses_relu() {
            scores.relu()?
        } else {
            softmax_last(&scores)?
        };
        Ok(gated.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?)
    }

    /// Cross-attention stage only: returns `(attn_r, attn_s)`.
    pub fn sca_forward(&self, h_r: &TokenSeq, h_s: &TokenSeq) -> Result<(TokenSeq, TokenSeq)> {
        self.check(h_r, h_s)?;
        let (q_r, q_s) = match (&self.norm_r, &self.norm_s) {
            (Some(nr), Some(ns)) => (nr.forward(&h_r.tokens)?, ns.forward(&h_s.tokens)?),
            _ => (h_r.tokens.clone(), h_s.tokens.clone()),
        };
        let kv_r = self.kv_r.forward(&q_r)?;
        let kv_s = self.kv_s.forward(&q_s)?;
        let (k_r, v_r) = split_kv(&kv_r, self.dim)?;
        let (k_s, v_s) = split_kv(&kv_s, self.dim)?;
        let attn_r = (self.cross_term(&q_r, &k_s, &v_r)? + &h_r.tokens)?;
        let attn_s = (self.cross_term(&q_s, &k_r, &v_s)? + &h_s.tokens)?;
        Ok((h_r.with_tokens(attn_r)?, h_s.with_tokens(attn_s)?))
    }

    /// `GIM(attn) + residual` for one branch; `original` is the module input.
    pub fn gim_forward(&self, attn: &TokenSeq, original: &TokenSeq, rgb: bool) -> Result<TokenSeq> {
        let mlp = if rgb { &self.gim_r } else { &self.gim_s };
        let residual = match self.cfg.gim_residual {
            GimResidual::Input => &original.tokens,
            GimResidual::Attn => &attn.tokens,
        };
        attn.with_tokens((mlp.forward(&attn.tokens)? + residual)?)
    }

    /// Full module: cross attention, then per-branch integration when the
    /// mode enables it.
    pub fn forward(&self, h_r: &TokenSeq, h_s: &TokenSeq) -> Result<(TokenSeq, TokenSeq)> {
        let (attn_r, attn_s) = self.sca_forward(h_r, h_s)?;
        if !self.cfg.mode.uses_gim() {
            return Ok((attn_r, attn_s));
        }
        Ok((
            self.gim_forward(&attn_r, h_r, true)?,
            self.gim_forward(&attn_s, h_s, false)?,
        ))
    }
}

fn split_kv(kv: &Tensor, dim: usize) -> Result<(Tensor, Tensor)> {
    Ok((kv.narrow(2, 0, dim)?, kv.narrow(2, dim, dim)?))
}

/// Zeroes the GIM output layers of every module under `prefix`, making the
/// integration stage an exact pass-through at initialization.
pub fn zero_gim_outputs(store: &crate::nn::ParamStore, prefix: &str) -> Result<()> {
    store.zero_where(|n| n.starts_with(prefix) && n.contains(".gim_") && n.contains(".fc2."))
}
