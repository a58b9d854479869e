//! Mapping stage: each dense pseudo box becomes a center-weighted instance grid.
//!
//! Weights come from a six-level staircase of the ratio `d / l`, where `d` is
//! the image-space distance from a sample point to the box center and `l` is
//! the shorter box side.

use crate::datamodel::{box_center, BoxLabel, GridMap};
use crate::error::{Error, Result};

/// The only values the staircase can take, from the outermost band inward.
pub const STAIRCASE_LEVELS: [f64; 6] = [0.0, 0.1, 0.3, 0.6, 0.8, 1.0];

/// Staircase weight of a point at distance `d` from a box center, box length `l`.
///
/// | ratio `r = d / l` | weight |
/// |-------------------|--------|
/// | `r > 1`           | 0      |
/// | `0.75 < r <= 1`   | 0.1    |
/// | `0.5 < r <= 0.75` | 0.3    |
/// | `0.25 < r <= 0.5` | 0.6    |
/// | `0 < r <= 0.25`   | 0.8    |
/// | `d = 0`           | 1      |
pub fn staircase(d: f64, l: f64) -> Result<f64> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::NonPositiveLength(l));
    }
    if !(d >= 0.0) {
        return Err(Error::InvalidParam {
            name: "d",
            value: d,
            reason: "distance must be non-negative",
        });
    }
    Ok(band(d, l))
}

#[inline]
fn band(d: f64, l: f64) -> f64 {
    if d == 0.0 {
        return 1.0;
    }
    let r = d / l;
    if r > 1.0 {
        0.0
    } else if r > 0.75 {
        0.1
    } else if r > 0.5 {
        0.3
    } else if r > 0.25 {
        0.6
    } else {
        0.8
    }
}

/// Number of cells needed to cover `len` pixels at scale `s`, at least one.
pub(crate) fn cells_for(len: f64, s: f64) -> usize {
    // Absorb float noise such as 40.000000001 * 0.5.
    ((len * s - 1e-9).ceil() as usize).max(1)
}

/// Builds the instance grid of one dense box at scale `s`.
///
/// The grid spans `ceil(h*s) x ceil(w*s)` cells (at least 1x1). Sample points
/// sit at cell centers laid out symmetrically about the box center, so an odd
/// dimension puts a sample exactly on the center (weight 1). `l` is the shorter
/// side of the box. The origin places the grid centered on the box in the
/// full-image grid.
pub fn build_instance_grid(b: &BoxLabel, s: f64) -> GridMap {
    let cols = cells_for(b.width(), s);
    let rows = cells_for(b.height(), s);
    let l = b.width().min(b.height());
    let (cx, cy) = box_center(b);

    let dx: Vec<f64> = (0..cols)
        .map(|j| (j as f64 + 0.5 - cols as f64 / 2.0) / s)
        .collect();
    let mut grid = GridMap::zeros(cols, rows, s);
    for i in 0..rows {
        let dy = (i as f64 + 0.5 - rows as f64 / 2.0) / s;
        for (j, dx) in dx.iter().enumerate() {
            grid.set(i, j, band(dx.hypot(dy), l));
        }
    }

    let origin_x = (cx * s - cols as f64 / 2.0).round() as i64;
    let origin_y = (cy * s - rows as f64 / 2.0).round() as i64;
    grid.with_origin(origin_x, origin_y)
}
