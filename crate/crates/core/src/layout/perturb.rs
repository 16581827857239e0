use rand::Rng;

use super::types::{clamp_bbox, Layout};

pub const DEFAULT_FAKE_MAGNITUDE: f64 = 0.25;

/// One draw from U(-magnitude, magnitude).
pub fn uniform_shift(rng: &mut impl Rng, magnitude: f64) -> f64 {
    if magnitude <= 0.0 {
        0.0
    } else {
        rng.gen_range(-magnitude..magnitude)
    }
}

/// Fake layout: every bbox component shifted independently, then clamped back
/// onto the canvas. Categories and object count are untouched.
pub fn perturb_fake(layout: &Layout, rng: &mut impl Rng, magnitude: f64) -> Layout {
    let mut out = layout.clone();
    if magnitude <= 0.0 {
        return out;
    }
    for o in &mut out.objects {
        let mut b = o.bbox;
        for v in &mut b {
            *v += uniform_shift(rng, magnitude);
        }
        o.bbox = clamp_bbox(b);
    }
    out
}
