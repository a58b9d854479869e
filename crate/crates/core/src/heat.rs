//! Mask stage: per-category heat accumulation, per-instance square masks,
//! marginal projections and centroids.

use crate::datamodel::{BoxLabel, GridMap, ImageRecord, MarginalProfile, PointAnnotation};
use crate::error::{Error, Result};

/// Average pseudo-box length of one category in one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryStats {
    pub apl: f64,
    pub count: usize,
}

/// Sums instance grids into one full-image grid at scale `s`.
///
/// Each instance grid is placed by its origin; cells falling outside the
/// image are dropped.
pub fn accumulate(grids: &[GridMap], img: &ImageRecord, s: f64) -> Result<GridMap> {
    let mut st = GridMap::for_image(img, s);
    for g in grids {
        add_clipped(&mut st, g)?;
    }
    Ok(st)
}

/// Adds `g` into the full-image grid `st` at `g`'s origin, clipping at the borders.
pub(crate) fn add_clipped(st: &mut GridMap, g: &GridMap) -> Result<()> {
    if g.scale() != st.scale() {
        return Err(Error::DimensionMismatch(format!(
            "instance grid at scale {} added to a grid at scale {}",
            g.scale(),
            st.scale()
        )));
    }
    let (ox, oy) = g.origin();
    let (cols, rows) = (st.cols() as i64, st.rows() as i64);
    let j0 = (-ox).clamp(0, g.cols() as i64) as usize;
    let j1 = (cols - ox).clamp(0, g.cols() as i64) as usize;
    let i0 = (-oy).clamp(0, g.rows() as i64) as usize;
    let i1 = (rows - oy).clamp(0, g.rows() as i64) as usize;
    for i in i0..i1 {
        let row = (oy + i as i64) as usize;
        let src = &g.row(i)[j0..j1];
        for (k, v) in src.iter().enumerate() {
            if *v != 0.0 {
                st.add(row, (ox + (j0 + k) as i64) as usize, *v);
            }
        }
    }
    Ok(())
}

/// Mean of `(w + h) / 2` over the boxes of one category in one image.
pub fn category_apl(boxes: &[BoxLabel]) -> Result<CategoryStats> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("category has no boxes"));
    }
    let sum: f64 = boxes.iter().map(BoxLabel::mean_side).sum();
    Ok(CategoryStats {
        apl: sum / boxes.len() as f64,
        count: boxes.len(),
    })
}

/// Half-open cell rectangle `[col0, col1) x [row0, row1)` of a full-image grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskRect {
    pub col0: usize,
    pub col1: usize,
    pub row0: usize,
    pub row1: usize,
}

impl MaskRect {
    pub fn is_empty(&self) -> bool {
        self.col0 >= self.col1 || self.row0 >= self.row1
    }

    pub fn contains_cell(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row1 && col >= self.col0 && col < self.col1
    }

    /// Contains the (fractional) grid coordinate `(x, y)`, in cell-index units.
    pub fn contains_grid_point(&self, x: f64, y: f64) -> bool {
        x >= self.col0 as f64 && x <= (self.col1 - 1) as f64 && y >= self.row0 as f64 && y <= (self.row1 - 1) as f64
    }
}

/// Cells of the square mask of image-space side `w3 * apl` centered on the point.
///
/// A cell belongs to the mask when its center lies inside the square; the
/// square is clipped to the image, never shifted. The cell holding the point
/// is always included.
pub fn mask_rect(p: &PointAnnotation, apl: f64, w3: f64, img: &ImageRecord, s: f64) -> MaskRect {
    let (cols, rows) = img.grid_dims(s);
    let half = 0.5 * w3 * apl * s;
    let span = |c: f64, n: usize| -> (usize, usize) {
        let mut lo = (c - half - 0.5).ceil() as i64;
        let mut hi = (c + half - 0.5).ceil() as i64;
        if hi <= lo {
            lo = c.floor() as i64;
            hi = lo + 1;
        }
        (lo.clamp(0, n as i64) as usize, hi.clamp(0, n as i64) as usize)
    };
    let (col0, col1) = span(p.x * s, cols);
    let (row0, row1) = span(p.y * s, rows);
    MaskRect {
        col0,
        col1,
        row0,
        row1,
    }
}

/// Full-image mask grid: ones inside [`mask_rect`], zeros elsewhere.
pub fn build_mask(p: &PointAnnotation, apl: f64, w3: f64, img: &ImageRecord, s: f64) -> GridMap {
    let rect = mask_rect(p, apl, w3, img, s);
    let mut mask = GridMap::for_image(img, s);
    for i in rect.row0..rect.row1 {
        for j in rect.col0..rect.col1 {
            mask.set(i, j, 1.0);
        }
    }
    mask
}

/// Elementwise (Hadamard) product of a summed grid and a mask.
pub fn apply_mask(st: &GridMap, mask: &GridMap) -> Result<GridMap> {
    if !st.same_shape(mask) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} grid at scale {} masked by {}x{} grid at scale {}",
            st.cols(),
            st.rows(),
            st.scale(),
            mask.cols(),
            mask.rows(),
            mask.scale()
        )));
    }
    let values = st
        .values()
        .iter()
        .zip(mask.values())
        .map(|(a, b)| a * b)
        .collect();
    let (ox, oy) = st.origin();
    Ok(GridMap::from_values(st.cols(), st.rows(), st.scale(), values)?.with_origin(ox, oy))
}

/// Per-column (`m_x`) and per-row (`m_y`) sums, and `M = Σm_x + Σm_y`.
pub fn marginals(amt: &GridMap) -> MarginalProfile {
    let mut m_x = vec![0.0; amt.cols()];
    let mut m_y = vec![0.0; amt.rows()];
    for (i, my) in m_y.iter_mut().enumerate() {
        for (mx, v) in m_x.iter_mut().zip(amt.row(i)) {
            *mx += v;
            *my += v;
        }
    }
    let m_total = m_x.iter().sum::<f64>() + m_y.iter().sum::<f64>();
    MarginalProfile { m_x, m_y, m_total }
}

/// Marginals of `st` restricted to `rect`, without materializing the masked grid.
///
/// Equal to `marginals(&apply_mask(st, &build_mask(..)))` for the matching mask.
#[allow(clippy::needless_range_loop)]
pub fn masked_marginals(st: &GridMap, rect: &MaskRect) -> MarginalProfile {
    let mut m_x = vec![0.0; st.cols()];
    let mut m_y = vec![0.0; st.rows()];
    for i in rect.row0..rect.row1.min(st.rows()) {
        let row = st.row(i);
        let hi = rect.col1.min(st.cols());
        let mut acc = 0.0;
        for j in rect.col0..hi {
            m_x[j] += row[j];
            acc += row[j];
        }
        m_y[i] = acc;
    }
    let m_total = m_x.iter().sum::<f64>() + m_y.iter().sum::<f64>();
    MarginalProfile { m_x, m_y, m_total }
}

/// Mass-weighted centroid `(x, y)` in grid coordinates (cell indices).
pub fn centroid(mp: &MarginalProfile) -> Result<(f64, f64)> {
    if !(mp.m_total > 0.0) {
        return Err(Error::EmptyRegion);
    }
    let half = mp.axis_mass();
    let x = mp
        .m_x
        .iter()
        .enumerate()
        .map(|(j, v)| j as f64 * v)
        .sum::<f64>()
        / half;
    let y = mp
        .m_y
        .iter()
        .enumerate()
        .map(|(i, v)| i as f64 * v)
        .sum::<f64>()
        / half;
    Ok((x, y))
}
