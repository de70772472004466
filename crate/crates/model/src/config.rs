//! Architecture sizes. [`ModelConfig::full`] carries the published widths;
//! [`ModelConfig::toy`] shrinks every width so the shape corpus trains in
//! seconds on one CPU core while keeping the same topology of the network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoConfig {
    /// Points kept per homology dimension.
    pub k0: usize,
    pub k1: usize,
    /// Hidden widths of the point MLP; input is 4, output is `width`.
    pub ph_hidden: Vec<usize>,
    pub width: usize,
    pub heads: usize,
    /// Residual weights of the H0 and H1 self-attention.
    pub lambda: [f64; 2],
    pub proj_hidden: Vec<usize>,
    pub out: usize,
    pub self_attention: bool,
    pub cross_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualConfig {
    /// Output channels of the three stride-2 convolutions. The last one is
    /// the raw feature width after global pooling.
    pub channels: [usize; 3],
    pub kernel: usize,
}

/// Projection head used during single-encoder pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Shared width of the projected visual and topological features.
    pub embed: usize,
    pub proj_hidden: Vec<usize>,
    pub expert_hidden: Vec<usize>,
    pub expert_out: usize,
    pub gate_hidden: Vec<usize>,
    pub final_hidden: Vec<usize>,
    pub out: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub topo: TopoConfig,
    pub visual: VisualConfig,
    pub head: HeadConfig,
    pub fusion: FusionConfig,
}

impl TopoConfig {
    pub fn full() -> Self {
        Self {
            k0: 48,
            k1: 96,
            ph_hidden: vec![64, 128, 256],
            width: 384,
            heads: 4,
            lambda: [0.5, 0.5],
            proj_hidden: vec![768, 512],
            out: 256,
            self_attention: true,
            cross_attention: true,
        }
    }

    pub fn toy() -> Self {
        Self {
            ph_hidden: vec![16, 32],
            width: 32,
            proj_hidden: vec![64],
            out: 32,
            ..Self::full()
        }
    }

    pub fn ph_dims(&self) -> Vec<usize> {
        let mut d = vec![4];
        d.extend(&self.ph_hidden);
        d.push(self.width);
        d
    }

    pub fn proj_dims(&self) -> Vec<usize> {
        let mut d = vec![6 * self.width];
        d.extend(&self.proj_hidden);
        d.push(self.out);
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "topology width {} must be a positive multiple of {} heads",
                self.width, self.heads
            )));
        }
        if self.k0 + self.k1 == 0 || self.out == 0 {
            return Err(Error::Config("empty topology encoder".into()));
        }
        Ok(())
    }
}

impl VisualConfig {
    pub fn full() -> Self {
        Self {
            channels: [16, 32, 128],
            kernel: 3,
        }
    }

    pub fn toy() -> Self {
        Self {
            channels: [8, 16, 32],
            kernel: 3,
        }
    }

    pub fn out(&self) -> usize {
        self.channels[2]
    }
}

impl HeadConfig {
    pub fn full() -> Self {
        Self {
            hidden: vec![256, 256],
            out: 128,
        }
    }

    pub fn toy() -> Self {
        Self {
            hidden: vec![32, 32],
            out: 32,
        }
    }

    pub fn dims(&self, input: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(&self.hidden);
        d.push(self.out);
        d
    }
}

impl FusionConfig {
    pub fn full() -> Self {
        Self {
            embed: 256,
            proj_hidden: vec![256, 256],
            expert_hidden: vec![512, 512],
            expert_out: 512,
            gate_hidden: vec![256, 128],
            final_hidden: vec![512],
            out: 256,
            heads: 4,
        }
    }

    pub fn toy() -> Self {
        Self {
            embed: 32,
            proj_hidden: vec![32, 32],
            expert_hidden: vec![64, 64],
            expert_out: 64,
            gate_hidden: vec![32, 16],
            final_hidden: vec![64],
            out: 32,
            heads: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.heads == 0 || self.embed % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} must be a positive multiple of {} heads",
                self.embed, self.heads
            )));
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            topo: TopoConfig::full(),
            visual: VisualConfig::full(),
            head: HeadConfig::full(),
            fusion: FusionConfig::full(),
        }
    }

    pub fn toy() -> Self {
        Self {
            topo: TopoConfig::toy(),
            visual: VisualConfig::toy(),
            head: HeadConfig::toy(),
            fusion: FusionConfig::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.topo.validate()?;
        self.fusion.validate()?;
        if self.visual.channels.contains(&0) || self.visual.kernel == 0 {
            return Err(Error::Config("visual encoder has an empty layer".into()));
        }
        Ok(())
    }
}
