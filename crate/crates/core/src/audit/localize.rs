use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Axis-aligned box in pixel coordinates: `[x, x + width) × [y, y + height)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub image_id: String,
    pub finding: String,
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BoxAnnotation {
    pub fn validate(&self, image_size: (usize, usize)) -> Result<()> {
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        let ok = self.width > 0.0
            && self.height > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.width <= w
            && self.y + self.height <= h;
        if !ok {
            return Err(Error::invalid(format!("box for {} on {} lies outside the image or is empty", self.finding, self.image_id)));
        }
        Ok(())
    }

    /// Intersection area with another pixel rectangle.
    pub fn overlap(&self, x: f64, y: f64, w: f64, h: f64) -> f64 {
        let ix = (self.x + self.width).min(x + w) - self.x.max(x);
        let iy = (self.y + self.height).min(y + h) - self.y.max(y);
        ix.max(0.0) * iy.max(0.0)
    }
}

/// One finding's attention over the patch grid of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub image_id: String,
    pub finding: String,
    /// `[rows, cols]`.
    pub map: Tensor,
}

/// Grid position of the largest entry; ties go to the lowest flat index.
pub fn argmax_patch(map: &Tensor) -> Result<(usize, usize)> {
    if map.rank() != 2 || map.numel() == 0 {
        return Err(Error::shape("argmax_patch", format!("{:?}", map.shape())));
    }
    let d = map.data();
    if d.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { op: "argmax_patch" });
    }
    let best = (0..d.len()).fold(0, |b, i| if d[i] > d[b] { i } else { b });
    let cols = map.shape()[1];
    Ok((best / cols, best % cols))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingAccuracy {
    pub hits: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub per_finding: BTreeMap<String, FindingAccuracy>,
    pub macro_accuracy: f64,
}

/// A pair (image, finding) with at least one box is a hit when the
/// footprint of its argmax patch overlaps some box of that finding by at
/// least half a patch area. Findings without boxes are excluded.
pub fn localization_accuracy(maps: &[AttentionMap], boxes: &[BoxAnnotation], patch: usize) -> Result<Localization> {
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let mut by_pair: BTreeMap<(&str, &str), Vec<&BoxAnnotation>> = BTreeMap::new();
    for b in boxes {
        if !(b.width > 0.0 && b.height > 0.0) {
            return Err(Error::invalid(format!("empty box for {} on {}", b.finding, b.image_id)));
        }
        by_pair.entry((&b.image_id, &b.finding)).or_default().push(b);
    }
    let ps = patch as f64;
    let half = ps * ps / 2.0;
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for m in maps {
        let Some(bs) = by_pair.get(&(m.image_id.as_str(), m.finding.as_str())) else { continue };
        let (r, c) = argmax_patch(&m.map)?;
        let (px, py) = (c as f64 * ps, r as f64 * ps);
        let hit = bs.iter().any(|b| b.overlap(px, py, ps, ps) >= half);
        let e = per.entry(m.finding.clone()).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    if per.is_empty() {
        return Err(Error::invalid("no attention map has a matching box"));
    }
    let per_finding: BTreeMap<String, FindingAccuracy> = per
        .into_iter()
        .map(|(k, (hits, total))| (k, FindingAccuracy { hits, total, accuracy: hits as f64 / total as f64 }))
        .collect();
    let macro_accuracy = per_finding.values().map(|f| f.accuracy).sum::<f64>() / per_finding.len() as f64;
    Ok(Localization { per_finding, macro_accuracy })
}
