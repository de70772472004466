//! Square-window max/min filters. A `(2r+1)²` square structuring element is
//! separable, so each filter runs as a row pass followed by a column pass.
//! Windows are clipped at the image border.

pub(crate) fn max_filter(data: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    rank_filter(data, height, width, radius, f64::max)
}

pub(crate) fn min_filter(data: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    rank_filter(data, height, width, radius, f64::min)
}

fn rank_filter(
    data: &[f64],
    height: usize,
    width: usize,
    radius: usize,
    pick: fn(f64, f64) -> f64,
) -> Vec<f64> {
    if radius == 0 {
        return data.to_vec();
    }
    let mut rows = vec![0.0; data.len()];
    for r in 0..height {
        for c in 0..width {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(width - 1);
            let base = r * width;
            rows[base + c] = data[base + lo..=base + hi]
                .iter()
                .copied()
                .reduce(pick)
                .unwrap();
        }
    }
    let mut out = vec![0.0; data.len()];
    for r in 0..height {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(height - 1);
        for c in 0..width {
            out[r * width + c] = (lo..=hi).map(|rr| rows[rr * width + c]).reduce(pick).unwrap();
        }
    }
    out
}

/// Binary closing with a 3x3 square. Pixels beyond the border count as
/// background for the dilation and as foreground for the erosion, so the
/// result always contains the input.
pub(crate) fn binary_close3(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let at = |m: &[bool], r: isize, c: isize, outside: bool| -> bool {
        if r < 0 || c < 0 || r >= height as isize || c >= width as isize {
            outside
        } else {
            m[r as usize * width + c as usize]
        }
    };
    let window = |m: &[bool], r: usize, c: usize, outside: bool, any: bool| -> bool {
        let mut acc = !any;
        for dr in -1..=1 {
            for dc in -1..=1 {
                let v = at(m, r as isize + dr, c as isize + dc, outside);
                acc = if any { acc || v } else { acc && v };
            }
        }
        acc
    };
    let mut dilated = vec![false; mask.len()];
    for r in 0..height {
        for c in 0..width {
            dilated[r * width + c] = window(mask, r, c, false, true);
        }
    }
    let mut closed = vec![false; mask.len()];
    for r in 0..height {
        for c in 0..width {
            closed[r * width + c] = window(&dilated, r, c, true, false);
        }
    }
    closed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_peak_dilates_to_square() {
        let mut data = vec![0.0; 25];
        data[12] = 1.0;
        let out = max_filter(&data, 5, 5, 1);
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
                assert_eq!(out[r * 5 + c], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn closing_fills_single_pixel_gap() {
        // a 5x5 block with its center removed
        let mut mask = vec![false; 49];
        for r in 1..6 {
            for c in 1..6 {
                mask[r * 7 + c] = !(r == 3 && c == 3);
            }
        }
        let closed = binary_close3(&mask, 7, 7);
        assert!(closed[3 * 7 + 3]);
        assert!(mask.iter().zip(&closed).all(|(&m, &c)| !m || c));
    }
}
