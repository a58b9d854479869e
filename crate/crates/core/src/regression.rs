//! Regression stage: box extents from marginal profiles, fused with the point.

use crate::datamodel::{validate_r, BoxLabel, ImageRecord, MarginalProfile, PointAnnotation};
use crate::error::{Error, Result};

/// Inclusive cell-index extents on both axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridExtents {
    pub col_lo: usize,
    pub col_hi: usize,
    pub row_lo: usize,
    pub row_hi: usize,
}

impl GridExtents {
    /// Pixel extents covering the selected cells, `[lo/s, (hi+1)/s]` on each axis.
    pub fn to_pixels(&self, s: f64) -> PixelExtents {
        PixelExtents {
            x_min: self.col_lo as f64 / s,
            x_max: (self.col_hi + 1) as f64 / s,
            y_min: self.row_lo as f64 / s,
            y_max: (self.row_hi + 1) as f64 / s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelExtents {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl From<&BoxLabel> for PixelExtents {
    fn from(b: &BoxLabel) -> Self {
        Self {
            x_min: b.x_min(),
            x_max: b.x_max(),
            y_min: b.y_min(),
            y_max: b.y_max(),
        }
    }
}

/// Trims at most `r * T` of mass from each tail of a 1-D profile with mass `T`.
///
/// Returns the inclusive `(lo, hi)` index range: `lo` is the first index at
/// which the running sum from the left exceeds `r * T`, `hi` the last index
/// at which the running sum from the right does. `lo <= hi` whenever
/// `T > 0` and `r < 0.5`.
pub fn trim_tails(profile: &[f64], r: f64) -> Option<(usize, usize)> {
    let total: f64 = profile.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let cut = r * total;
    let mut acc = 0.0;
    let mut lo = None;
    for (j, v) in profile.iter().enumerate() {
        acc += v;
        if acc > cut {
            lo = Some(j);
            break;
        }
    }
    let mut acc = 0.0;
    let mut hi = None;
    for (j, v) in profile.iter().enumerate().rev() {
        acc += v;
        if acc > cut {
            hi = Some(j);
            break;
        }
    }
    lo.zip(hi)
}

/// Tail-trimming box extents from a marginal profile, in grid cells.
pub fn pbl_cells(mp: &MarginalProfile, r: f64) -> Result<GridExtents> {
    validate_r(r)?;
    if !(mp.m_total > 0.0) {
        return Err(Error::EmptyRegion);
    }
    let (col_lo, col_hi) = trim_tails(&mp.m_x, r).ok_or(Error::EmptyRegion)?;
    let (row_lo, row_hi) = trim_tails(&mp.m_y, r).ok_or(Error::EmptyRegion)?;
    Ok(GridExtents {
        col_lo,
        col_hi,
        row_lo,
        row_hi,
    })
}

/// Tail-trimming box extents from a marginal profile, in image pixels.
pub fn pbl(mp: &MarginalProfile, r: f64, s: f64) -> Result<PixelExtents> {
    Ok(pbl_cells(mp, r)?.to_pixels(s))
}

/// Turns extents into the instance's box: grows it minimally to contain the
/// point, clamps to the image, and widens any collapsed axis to 1 px at the point.
pub fn fuse_with_point(ext: &PixelExtents, p: &PointAnnotation, img: &ImageRecord) -> BoxLabel {
    let fuse_axis = |lo: f64, hi: f64, at: f64, limit: f64| -> (f64, f64) {
        let lo = lo.min(at).clamp(0.0, limit);
        let hi = hi.max(at).clamp(0.0, limit);
        if hi - lo > 0.0 {
            (lo, hi)
        } else {
            let lo = (at - 0.5).clamp(0.0, (limit - 1.0).max(0.0));
            (lo, (lo + 1.0).min(limit))
        }
    };
    let (x0, x1) = fuse_axis(ext.x_min, ext.x_max, p.x, img.width as f64);
    let (y0, y1) = fuse_axis(ext.y_min, ext.y_max, p.y, img.height as f64);
    BoxLabel::from_edges(x0, y0, x1, y1, p.category_id)
        .expect("fused extents have positive size inside a non-empty image")
}
