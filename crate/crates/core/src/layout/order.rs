use std::cmp::Ordering;

use super::types::{Layout, LayoutObject};

pub const DEFAULT_BAND_TOLERANCE: f64 = 0.02;

fn key_cmp(a: &LayoutObject, b: &LayoutObject, primary: usize, secondary: usize) -> Ordering {
    let k = |o: &LayoutObject| {
        [
            o.bbox[primary],
            o.bbox[secondary],
            o.bbox[2],
            o.bbox[3],
            o.category as f64,
        ]
    };
    k(a).iter()
        .zip(k(b).iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Human reading order: objects whose top edges lie within `band_tolerance` of
/// the band's first top edge share a row band; bands run top to bottom and
/// objects within a band left to right. The stop flag moves to the new last object.
pub fn reading_order(layout: &Layout, band_tolerance: f64) -> Layout {
    let mut by_top = layout.objects.clone();
    by_top.sort_by(|a, b| key_cmp(a, b, 1, 0));

    let mut bands: Vec<Vec<LayoutObject>> = Vec::new();
    for o in by_top {
        match bands.last_mut() {
            Some(band) if o.y() - band[0].y() < band_tolerance => band.push(o),
            _ => bands.push(vec![o]),
        }
    }
    let mean_top = |b: &Vec<LayoutObject>| b.iter().map(|o| o.y()).sum::<f64>() / b.len() as f64;
    bands.sort_by(|a, b| mean_top(a).total_cmp(&mean_top(b)));

    let objects = bands
        .into_iter()
        .flat_map(|mut band| {
            band.sort_by(|a, b| key_cmp(a, b, 0, 1));
            band
        })
        .collect();
    Layout::new(objects, layout.canvas, layout.source.clone())
}
