//! The full dual-branch network: patch embedding, transformer stacks coupled
//! by cross-attention modules, final norms and per-modality heads.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Role, TokenSeq};
use crate::error::Result;
use crate::heads::{DualHeads, HeadConfig, ScoreMapBundle};
use crate::nn::{Init, ParamStore};
use crate::scam::{zero_gim_outputs, Scam, ScamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub scam: ScamConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.dim % self.scam.heads != 0 {
            return Err(crate::Error::config(format!(
                "scam.heads {} must divide model.backbone.dim {}",
                self.scam.heads, self.backbone.dim
            )));
        }
        Ok(())
    }
}

/// Parameter-name prefixes of the cross-attention modules.
pub const SCAM_PREFIX: &str = "scam";

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub scams: Vec<Scam>,
    pub heads: DualHeads,
}

/// Output of both heads for a batch.
pub struct DualOutput {
    pub rgb: ScoreMapBundle,
    pub sonar: ScoreMapBundle,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, device.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (backbone, scams, heads) = {
            let mut init = Init::new(&mut store, &mut rng);
            let backbone = Backbone::new(&mut init.pp("backbone"), &cfg.backbone)?;
            let scams = (0..cfg.backbone.scam_layers.len())
                .map(|k| Scam::new(&mut init.pp(format!("{SCAM_PREFIX}.{k}")), cfg.backbone.dim, &cfg.scam))
                .collect::<Result<Vec<_>>>()?;
            let heads = DualHeads::new(&mut init, &cfg.backbone, &cfg.head)?;
            (backbone, scams, heads)
        };
        zero_gim_outputs(&store, SCAM_PREFIX)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            scams,
            heads,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Template tokens for one branch, computed once per tracked sequence.
    pub fn embed_template(&self, rgb: bool, z: &Tensor) -> Result<Tensor> {
        let branch = if rgb { &self.backbone.rgb } else { &self.backbone.sonar };
        branch.embed.forward(z, Role::Template)
    }

    pub fn embed_search(&self, rgb: bool, x: &Tensor) -> Result<Tensor> {
        let branch = if rgb { &self.backbone.rgb } else { &self.backbone.sonar };
        branch.embed.forward(x, Role::Search)
    }

    /// Images are `(B, 3, H, W)` normalized tensors.
    pub fn forward(&self, z_r: &Tensor, x_r: &Tensor, z_s: &Tensor, x_s: &Tensor) -> Result<DualOutput> {
        let h_r = self.backbone.rgb.embed_pair(z_r, x_r)?;
        let h_s = self.backbone.sonar.embed_pair(z_s, x_s)?;
        self.forward_tokens(&h_r, &h_s)
    }

    /// Forward from already embedded template+search token sequences.
    pub fn forward_tokens(&self, h_r: &TokenSeq, h_s: &TokenSeq) -> Result<DualOutput> {
        let (r, s) = self.backbone.forward_dual(h_r, h_s, &self.scams)?;
        let xr = self.backbone.rgb.norm.forward(&r.search()?)?;
        let xs = self.backbone.sonar.norm.forward(&s.search()?)?;
        Ok(DualOutput {
            rgb: self.heads.rgb.forward(&xr)?,
            sonar: self.heads.sonar.forward(&xs)?,
        })
    }
}
