//! Dense-box assignment and box synthesis for instances no box landed on.
//!
//! Instances with no assigned box get either a perspective-interpolated box
//! (size linear in image y, anchored on the mean sizes of the upper and lower
//! halves of the matched boxes) or a plain average-size square.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::{BoxLabel, ImageRecord, InstanceId, PointAnnotation};
use crate::error::{Error, Result};

/// Strategy for instances without assigned boxes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    #[default]
    Padm,
    Apl,
}

impl FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "padm" => Ok(MatchMode::Padm),
            "apl" => Ok(MatchMode::Apl),
            other => Err(format!("unknown match mode {other:?} (expected padm or apl)")),
        }
    }
}

impl std::fmt::Display for MatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatchMode::Padm => "padm",
            MatchMode::Apl => "apl",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// Dense-box indices per instance, aligned with the input points.
    pub per_instance: Vec<Vec<usize>>,
    /// Instances with no assigned box.
    pub unmatched: Vec<InstanceId>,
}

impl Assignment {
    pub fn is_matched(&self, idx: usize) -> bool {
        !self.per_instance[idx].is_empty()
    }

    /// Sorted, deduplicated indices of boxes assigned to at least one instance.
    pub fn matched_boxes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.per_instance.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Whether `(x, y)` lies in the closed square of side `side` centered on `p`.
pub(crate) fn in_mask_square(p: &PointAnnotation, side: f64, x: f64, y: f64) -> bool {
    let half = 0.5 * side;
    (x - p.x).abs() <= half && (y - p.y).abs() <= half
}

/// Assigns each box to every instance whose mask square contains the box center.
pub fn assign(boxes: &[BoxLabel], points: &[PointAnnotation], apl: f64, w3: f64) -> Assignment {
    let side = w3 * apl;
    let centers: Vec<(f64, f64)> = boxes.iter().map(BoxLabel::center).collect();
    let mut out = Assignment::default();
    for p in points {
        let hits: Vec<usize> = centers
            .iter()
            .enumerate()
            .filter(|(_, (x, y))| in_mask_square(p, side, *x, *y))
            .map(|(k, _)| k)
            .collect();
        if hits.is_empty() {
            out.unmatched.push(p.instance_id);
        }
        out.per_instance.push(hits);
    }
    out
}

/// Which line the size interpolation uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Intercept {
    /// Line through `(y_gu, ave_gu)` and `(y_gd, ave_gd)`.
    #[default]
    Anchored,
    /// Same slope, but the value at `y_gu` is `ave_gd` (literal printed form).
    Printed,
}

/// Smallest box side PADM will emit, in pixels.
pub const MIN_LENGTH: f64 = 1.0;

/// Two-group perspective size model fitted on matched boxes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerspectiveFit {
    pub y_gu: f64,
    pub y_gd: f64,
    pub ave_gu: f64,
    pub ave_gd: f64,
    /// Mean width/height ratio of the matched boxes.
    pub aspect: f64,
}

impl PerspectiveFit {
    /// Splits boxes at the median center-y. `None` with fewer than two boxes
    /// or when the group means are at most 1 px apart.
    pub fn from_boxes(boxes: &[BoxLabel]) -> Option<Self> {
        if boxes.len() < 2 {
            return None;
        }
        let mut by_y: Vec<(f64, f64)> = boxes.iter().map(|b| (b.center().1, b.mean_side())).collect();
        by_y.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let (up, down) = by_y.split_at(by_y.len() / 2);
        let mean = |set: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| set.iter().map(f).sum::<f64>() / set.len() as f64;
        let y_gu = mean(up, |e| e.0);
        let y_gd = mean(down, |e| e.0);
        if y_gd - y_gu <= 1.0 {
            return None;
        }
        let aspect = boxes.iter().map(|b| b.width() / b.height()).sum::<f64>() / boxes.len() as f64;
        Some(Self {
            y_gu,
            y_gd,
            ave_gu: mean(up, |e| e.1),
            ave_gd: mean(down, |e| e.1),
            aspect,
        })
    }

    /// Box length at image row `y`. The line is extrapolated beyond the
    /// observed rows; only non-positive lengths are lifted to [`MIN_LENGTH`].
    pub fn length_at(&self, y: f64, intercept: Intercept) -> f64 {
        let slope = (self.ave_gd - self.ave_gu) / (self.y_gd - self.y_gu);
        let base = match intercept {
            Intercept::Anchored => self.ave_gu,
            Intercept::Printed => self.ave_gd,
        };
        (base + (y - self.y_gu) * slope).max(MIN_LENGTH)
    }
}

/// Box of mean side `size` and width/height ratio `aspect` centered on the point.
fn box_at_point(p: &PointAnnotation, size: f64, aspect: f64, img: &ImageRecord) -> BoxLabel {
    let root = aspect.sqrt();
    let (w, h) = (size * root, size / root);
    BoxLabel::new(p.x - 0.5 * w, p.y - 0.5 * h, w, h, p.category_id)
        .and_then(|b| b.clamp_to(img).ok_or(Error::EmptyRegion))
        .expect("box centered on an in-image point keeps positive area after clamping")
}

/// Perspective-interpolated box for an unmatched point, or `None` when the
/// matched boxes cannot support the model (caller falls back to [`apl_match`]).
pub fn padm(p: &PointAnnotation, matched: &[BoxLabel], img: &ImageRecord) -> Option<BoxLabel> {
    padm_with(p, matched, img, Intercept::Anchored)
}

pub fn padm_with(
    p: &PointAnnotation,
    matched: &[BoxLabel],
    img: &ImageRecord,
    intercept: Intercept,
) -> Option<BoxLabel> {
    let fit = PerspectiveFit::from_boxes(matched)?;
    let size = fit.length_at(p.y, intercept);
    Some(box_at_point(p, size, fit.aspect, img))
}

/// Square of side `apl` centered on the point, clamped to the image.
pub fn apl_match(p: &PointAnnotation, apl: f64, img: &ImageRecord) -> Result<BoxLabel> {
    if !(apl > 0.0 && apl.is_finite()) {
        return Err(Error::NoSizeReference(p.category_id));
    }
    Ok(box_at_point(p, apl, 1.0, img))
}
