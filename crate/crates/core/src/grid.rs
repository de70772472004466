//! Pixel-permuting transforms shared by images and masks.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridTransform {
    FlipHorizontal,
    FlipVertical,
    /// Counter-clockwise rotation by `k * 90` degrees.
    Rotate90(u8),
}

impl GridTransform {
    pub fn output_dims(self, height: usize, width: usize) -> (usize, usize) {
        match self {
            GridTransform::Rotate90(k) if k % 2 == 1 => (width, height),
            _ => (height, width),
        }
    }

    pub fn apply<T: Copy>(self, data: &[T], height: usize, width: usize) -> Vec<T> {
        let (oh, ow) = self.output_dims(height, width);
        let mut out = Vec::with_capacity(data.len());
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = match self {
                    GridTransform::FlipHorizontal => (r, width - 1 - c),
                    GridTransform::FlipVertical => (height - 1 - r, c),
                    GridTransform::Rotate90(k) => match k % 4 {
                        0 => (r, c),
                        // out[r][c] = in[c][W-1-r]
                        1 => (c, width - 1 - r),
                        2 => (height - 1 - r, width - 1 - c),
                        _ => (height - 1 - c, r),
                    },
                };
                out.push(data[sr * width + sc]);
            }
        }
        out
    }
}
