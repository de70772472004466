//! The three parameter groups of the pipeline and their checkpoint bundle.
//!
//! A bundle is a directory holding `manifest.json` (format tag and model
//! configuration) and one checkpoint file per group: `visual.bin` (visual
//! encoder and its pretraining head), `topo.bin` (topology encoder and its
//! head) and `fusion.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use topocl_core::roi::{extract_roi, RoiMethod};
use topocl_core::{restrict_and_compute, GrayImage, PersistenceDiagram, RoiMask};
use topocl_nn::{Graph, Mlp, ParameterSet, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionVars};
use crate::topo::{SelectedPoints, TopoEncoder};
use crate::visual::VisualEncoder;

const BUNDLE_FORMAT: &str = "topocl-bundle/1";
const EVAL_CHUNK: usize = 64;

/// Random stream tags for parameter initialization.
const INIT_VISUAL: u64 = 1;
const INIT_TOPO: u64 = 2;
const INIT_FUSION: u64 = 3;

#[derive(Debug, Clone)]
pub struct TopoCl {
    pub config: ModelConfig,
    pub visual: VisualEncoder,
    pub visual_head: Mlp,
    pub visual_set: ParameterSet,
    pub topo: TopoEncoder,
    pub topo_head: Mlp,
    pub topo_set: ParameterSet,
    pub fusion: Fusion,
    pub fusion_set: ParameterSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

/// An image and the region its diagram is computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: GrayImage,
    pub roi: RoiMask,
}

impl View {
    pub fn diagram(&self) -> Result<PersistenceDiagram> {
        Ok(restrict_and_compute(&self.image, &self.roi)?)
    }
}

impl TopoCl {
    /// Fresh parameters; each group draws from its own stream of `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut visual_set = ParameterSet::new();
        let mut rng = topocl_core::rng::stream(seed, &[0x1417, INIT_VISUAL]);
        let visual = VisualEncoder::new(&mut visual_set, "visual", &config.visual, &mut rng)?;
        let visual_head = Mlp::new(&mut visual_set, "visual.head", &config.head.dims(visual.out_dim()), &mut rng)?;

        let mut topo_set = ParameterSet::new();
        let mut rng = topocl_core::rng::stream(seed, &[0x1417, INIT_TOPO]);
        let topo = TopoEncoder::new(&mut topo_set, "topo", &config.topo, &mut rng)?;
        let topo_head = Mlp::new(&mut topo_set, "topo.head", &config.head.dims(config.topo.out), &mut rng)?;

        let mut fusion_set = ParameterSet::new();
        let mut rng = topocl_core::rng::stream(seed, &[0x1417, INIT_FUSION]);
        let fusion = Fusion::new(
            &mut fusion_set,
            "fusion",
            &config.fusion,
            visual.out_dim(),
            config.topo.out,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            visual,
            visual_head,
            visual_set,
            topo,
            topo_head,
            topo_set,
            fusion,
            fusion_set,
        })
    }

    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format: BUNDLE_FORMAT.into(),
            config: self.config.clone(),
            meta,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        // every group file names its model so it can be loaded on its own
        let model = serde_json::to_value(&self.config)?;
        for (set, group) in [(&self.visual_set, "visual"), (&self.topo_set, "topo"), (&self.fusion_set, "fusion")] {
            set.save(
                &dir.join(format!("{group}.bin")),
                serde_json::json!({"group": group, "model": model}),
            )?;
        }
        Ok(())
    }

    /// Loads a bundle; returns the manifest's free-form metadata as well.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != BUNDLE_FORMAT {
            return Err(Error::Checkpoint(format!("unknown bundle format `{}`", manifest.format)));
        }
        let mut model = Self::new(&manifest.config, 0)?;
        model.visual_set.load_into(&dir.join("visual.bin"))?;
        model.topo_set.load_into(&dir.join("topo.bin"))?;
        model.fusion_set.load_into(&dir.join("fusion.bin"))?;
        Ok((model, manifest.meta))
    }

    /// Topology encoder of a group checkpoint written by [`TopoCl::save`].
    pub fn load_topo_group(path: &Path) -> Result<Self> {
        let (set, meta) = ParameterSet::load(path)?;
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: no model configuration ({e})", path.display())))?;
        let mut model = Self::new(&config, 0)?;
        model.topo_set.copy_values_from(&set)?;
        Ok(model)
    }

    pub fn select(&self, pd: &PersistenceDiagram) -> SelectedPoints {
        self.topo.select(pd)
    }

    /// Raw visual features and topological features `t` of a batch, then
    /// the fused embeddings.
    pub fn forward_fused(
        &self,
        g: &mut Graph,
        images: &[GrayImage],
        points: &[SelectedPoints],
    ) -> Result<FusionVars> {
        let v = self.visual.forward(g, &self.visual_set, images)?;
        let t = self.topo.forward(g, &self.topo_set, points)?.t;
        self.fusion.forward(g, &self.fusion_set, v, t)
    }

    pub fn forward_visual(&self, g: &mut Graph, images: &[GrayImage]) -> Result<Var> {
        self.visual.forward(g, &self.visual_set, images)
    }

    pub fn forward_topo(&self, g: &mut Graph, points: &[SelectedPoints]) -> Result<Var> {
        Ok(self.topo.forward(g, &self.topo_set, points)?.t)
    }

    fn chunked<T>(items: &[T], mut f: impl FnMut(&[T]) -> Result<Tensor>) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut cols = 0;
        for chunk in items.chunks(EVAL_CHUNK) {
            let t = f(chunk)?;
            cols = t.cols();
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::new(items.len(), cols, data)?)
    }

    /// Raw visual-encoder features, one row per image.
    pub fn visual_features(&self, images: &[GrayImage]) -> Result<Tensor> {
        Self::chunked(images, |c| {
            let mut g = Graph::new();
            let v = self.forward_visual(&mut g, c)?;
            Ok(g.value(v).clone())
        })
    }

    /// Topological features `t`, one row per diagram.
    pub fn topo_features(&self, points: &[SelectedPoints]) -> Result<Tensor> {
        Self::chunked(points, |c| {
            let mut g = Graph::new();
            let t = self.forward_topo(&mut g, c)?;
            Ok(g.value(t).clone())
        })
    }

    /// Final embeddings `z` of unaugmented views.
    pub fn embed(&self, views: &[View]) -> Result<Tensor> {
        Ok(self.fused_features(views)?.1)
    }

    /// Fused representations `h` and final embeddings `z` of unaugmented
    /// views.
    pub fn fused_features(&self, views: &[View]) -> Result<(Tensor, Tensor)> {
        let prepared = views
            .iter()
            .map(|v| Ok((v.image.clone(), self.select(&v.diagram()?))))
            .collect::<Result<Vec<_>>>()?;
        let mut h = Vec::new();
        let z = Self::chunked(&prepared, |c| {
            let (images, points): (Vec<_>, Vec<_>) = c.iter().cloned().unzip();
            let mut g = Graph::new();
            let out = self.forward_fused(&mut g, &images, &points)?;
            h.push(g.value(out.h).clone());
            Ok(g.value(out.z).clone())
        })?;
        let cols = h.first().map_or(0, Tensor::cols);
        let data = h.iter().flat_map(|t| t.data().iter().copied()).collect();
        Ok((Tensor::new(views.len(), cols, data)?, z))
    }

    /// Embedding of a single image: ROI extraction, diagram of the ROI,
    /// both encoders and the fusion, with no augmentation.
    pub fn infer_single(&self, image: &GrayImage, roi: &RoiMethod) -> Result<Tensor> {
        let roi = extract_roi(image, roi)?.mask;
        self.embed(&[View {
            image: image.clone(),
            roi,
        }])
    }
}
