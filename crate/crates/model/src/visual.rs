//! Small convolutional image encoder: three 3x3 stride-2 convolutions with
//! ReLU, then global average pooling.

use rand::Rng;
use topocl_core::GrayImage;
use topocl_nn::{ConvGeometry, Graph, Init, Linear, ParameterSet, Tensor, Var};

use crate::config::VisualConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder {
    pub config: VisualConfig,
    pub convs: [Linear; 3],
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(set: &mut ParameterSet, name: &str, config: &VisualConfig, rng: &mut R) -> Result<Self> {
        let k2 = config.kernel * config.kernel;
        let [c1, c2, c3] = config.channels;
        let mut conv = |i: usize, cin: usize, cout: usize| {
            Linear::new(set, &format!("{name}.conv{i}"), k2 * cin, cout, Init::KaimingUniform, true, rng)
        };
        Ok(Self {
            config: config.clone(),
            convs: [conv(1, 1, c1)?, conv(2, c1, c2)?, conv(3, c2, c3)?],
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.out()
    }

    /// `images.len() x out` features. All images must share dimensions.
    pub fn forward(&self, g: &mut Graph, set: &ParameterSet, images: &[GrayImage]) -> Result<Var> {
        let Some(first) = images.first() else {
            return Err(Error::Config("empty image batch".into()));
        };
        let (mut h, mut w) = first.dims();
        if let Some(bad) = images.iter().find(|im| im.dims() != (h, w)) {
            return Err(Error::ShapeContract(format!(
                "image of {:?} in a batch of {:?}",
                bad.dims(),
                (h, w)
            )));
        }
        let mut data = Vec::with_capacity(images.len() * h * w);
        for im in images {
            data.extend_from_slice(im.data());
        }
        let mut x = g.constant(Tensor::new(images.len() * h * w, 1, data)?);
        let mut channels = 1;
        for conv in &self.convs {
            let geom = ConvGeometry {
                batch: images.len(),
                height: h,
                width: w,
                channels,
                kernel: self.config.kernel,
                stride: 2,
                pad: self.config.kernel / 2,
            };
            let cols = g.im2col(x, geom)?;
            let y = conv.forward(g, set, cols)?;
            x = g.relu(y);
            h = geom.out_height();
            w = geom.out_width();
            channels = conv.fan_out;
        }
        let per = h * w;
        let ranges: Vec<_> = (0..images.len()).map(|i| i * per..(i + 1) * per).collect();
        Ok(g.segment_mean(x, &ranges)?)
    }
}
