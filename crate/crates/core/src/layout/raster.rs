use super::types::LayoutObject;
use crate::diffcore::Tensor;

pub const DEFAULT_RASTER_RES: usize = 32;

/// Writes a `[C, R, R]` occupancy grid into `out`: cell `(c, i, j)` is 1 when
/// an object of category `c` covers the centre of row `i`, column `j`.
fn paint(prefix: &[LayoutObject], resolution: usize, out: &mut [f64]) {
    let r = resolution as f64;
    for o in prefix {
        let [x, y, w, h] = o.bbox;
        let plane = &mut out[o.category * resolution * resolution..][..resolution * resolution];
        for i in 0..resolution {
            let cy = (i as f64 + 0.5) / r;
            if cy < y || cy >= y + h {
                continue;
            }
            for j in 0..resolution {
                let cx = (j as f64 + 0.5) / r;
                if cx >= x && cx < x + w {
                    plane[i * resolution + j] = 1.0;
                }
            }
        }
    }
}

/// Category-channel grid of shape `[C, R, R]`. An empty prefix is all zeros.
pub fn rasterize(prefix: &[LayoutObject], num_categories: usize, resolution: usize) -> Tensor {
    let mut t = Tensor::zeros(&[num_categories, resolution, resolution]);
    paint(prefix, resolution, t.data_mut());
    t
}

/// Batched grids, `[B, C, R, R]`.
pub fn rasterize_batch(
    prefixes: &[&[LayoutObject]],
    num_categories: usize,
    resolution: usize,
) -> Tensor {
    let plane = num_categories * resolution * resolution;
    let mut t = Tensor::zeros(&[prefixes.len(), num_categories, resolution, resolution]);
    for (b, p) in prefixes.iter().enumerate() {
        paint(p, resolution, &mut t.data_mut()[b * plane..(b + 1) * plane]);
    }
    t
}
