//! Domain types shared by every pipeline stage.
//!
//! Coordinates follow the COCO convention: origin at the top-left corner,
//! x to the right, y downward, boxes stored as `(x_min, y_min, width, height)`
//! in image pixels. Grids sample the image at a fixed scale `s` (cells per
//! pixel); cell `(row, col)` covers pixels `[col/s, (col+1)/s) x [row/s, (row+1)/s)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ImageId = u64;
pub type CategoryId = u32;
pub type InstanceId = u64;

/// Axis-aligned box with a category and an optional confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxLabel {
    x_min: f64,
    y_min: f64,
    width: f64,
    height: f64,
    category_id: CategoryId,
    score: Option<f64>,
}

impl BoxLabel {
    pub fn new(
        x_min: f64,
        y_min: f64,
        width: f64,
        height: f64,
        category_id: CategoryId,
    ) -> Result<Self> {
        if !(x_min.is_finite() && y_min.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite origin ({x_min}, {y_min})"
            )));
        }
        if !(width.is_finite() && width > 0.0 && height.is_finite() && height > 0.0) {
            return Err(Error::InvalidBox(format!(
                "width and height must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            width,
            height,
            category_id,
            score: None,
        })
    }

    /// Builds a box from its edges; `x_max > x_min` and `y_max > y_min` are required.
    pub fn from_edges(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        category_id: CategoryId,
    ) -> Result<Self> {
        Self::new(x_min, y_min, x_max - x_min, y_max - y_min, category_id)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn without_score(mut self) -> Self {
        self.score = None;
        self
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.width
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.height
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn category_id(&self) -> CategoryId {
        self.category_id
    }

    pub fn score(&self) -> Option<f64> {
        self.score
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Mean side length, `(w + h) / 2`.
    pub fn mean_side(&self) -> f64 {
        0.5 * (self.width + self.height)
    }

    pub fn center(&self) -> (f64, f64) {
        box_center(self)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max() && y >= self.y_min && y <= self.y_max()
    }

    /// Intersects the box with the image rectangle. `None` when nothing is left.
    pub fn clamp_to(&self, img: &ImageRecord) -> Option<BoxLabel> {
        let w = img.width as f64;
        let h = img.height as f64;
        if self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max() <= w && self.y_max() <= h {
            return Some(*self);
        }
        let x0 = self.x_min.clamp(0.0, w);
        let y0 = self.y_min.clamp(0.0, h);
        let x1 = self.x_max().clamp(0.0, w);
        let y1 = self.y_max().clamp(0.0, h);
        if x1 > x0 && y1 > y0 {
            Some(BoxLabel {
                x_min: x0,
                y_min: y0,
                width: x1 - x0,
                height: y1 - y0,
                ..*self
            })
        } else {
            None
        }
    }
}

/// Center of a box: `(x_min + width/2, y_min + height/2)`.
pub fn box_center(b: &BoxLabel) -> (f64, f64) {
    (b.x_min + 0.5 * b.width, b.y_min + 0.5 * b.height)
}

/// One point of weak supervision per instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
    pub category_id: CategoryId,
    pub instance_id: InstanceId,
}

impl PointAnnotation {
    pub fn new(
        x: f64,
        y: f64,
        category_id: CategoryId,
        instance_id: InstanceId,
        img: &ImageRecord,
    ) -> Result<Self> {
        if !img.contains(x, y) {
            return Err(Error::PointOutOfBounds {
                image_id: img.image_id,
                x,
                y,
            });
        }
        Ok(Self {
            x,
            y,
            category_id,
            instance_id,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub width: u32,
    pub height: u32,
}

impl ImageRecord {
    pub fn new(image_id: ImageId, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "image {image_id} has zero extent {width}x{height}"
            )));
        }
        Ok(Self {
            image_id,
            width,
            height,
        })
    }

    /// `0 <= x < width` and `0 <= y < height`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    /// Full-image grid dimensions `(cols, rows)` at scale `s`.
    pub fn grid_dims(&self, s: f64) -> (usize, usize) {
        (
            (self.width as f64 * s).floor() as usize,
            (self.height as f64 * s).floor() as usize,
        )
    }
}

/// Image coordinate to the index of the grid cell containing it.
pub fn to_grid(px: f64, s: f64) -> i64 {
    (px * s).floor() as i64
}

/// Grid index to the image coordinate of the cell's leading edge.
pub fn from_grid(cell: i64, s: f64) -> f64 {
    cell as f64 / s
}

/// Non-negative scalar field sampled at `scale` cells per image pixel.
///
/// `origin_x`/`origin_y` place cell `(0, 0)` of this grid inside the
/// full-image grid of the same scale; both are zero for full-image grids.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    cols: usize,
    rows: usize,
    scale: f64,
    origin_x: i64,
    origin_y: i64,
    values: Vec<f64>,
}

impl GridMap {
    pub fn zeros(cols: usize, rows: usize, scale: f64) -> Self {
        Self {
            cols,
            rows,
            scale,
            origin_x: 0,
            origin_y: 0,
            values: vec![0.0; cols * rows],
        }
    }

    /// Zero grid covering the whole image at scale `s`.
    pub fn for_image(img: &ImageRecord, s: f64) -> Self {
        let (cols, rows) = img.grid_dims(s);
        Self::zeros(cols, rows, s)
    }

    /// Row-major values; fails on a length mismatch or a negative/non-finite entry.
    pub fn from_values(cols: usize, rows: usize, scale: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != cols * rows {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {cols}x{rows} grid",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::DimensionMismatch(format!(
                "grid values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            cols,
            rows,
            scale,
            origin_x: 0,
            origin_y: 0,
            values,
        })
    }

    pub fn with_origin(mut self, origin_x: i64, origin_y: i64) -> Self {
        self.origin_x = origin_x;
        self.origin_y = origin_y;
        self
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn origin(&self) -> (i64, i64) {
        (self.origin_x, self.origin_y)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub(crate) fn set(&mut self, row: usize, col: usize, v: f64) {
        debug_assert!(v >= 0.0);
        self.values[row * self.cols + col] = v;
    }

    pub(crate) fn add(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.cols + col] += v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn same_shape(&self, other: &GridMap) -> bool {
        self.cols == other.cols
            && self.rows == other.rows
            && self.scale == other.scale
            && self.origin_x == other.origin_x
            && self.origin_y == other.origin_y
    }
}

/// Axis projections of a grid: per-column sums, per-row sums and `M = Σm_x + Σm_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalProfile {
    pub m_x: Vec<f64>,
    pub m_y: Vec<f64>,
    pub m_total: f64,
}

impl MarginalProfile {
    /// Mass carried by each axis, `M / 2`.
    pub fn axis_mass(&self) -> f64 {
        0.5 * self.m_total
    }
}

/// The three tunable scalars of the regression stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Tail-mass fraction trimmed from each side of a marginal profile, in (0, 0.5).
    pub r: f64,
    /// Mask side as a multiple of the category's average box length, >= 1.
    pub w3: f64,
    /// Grid scale in cells per pixel, in (0, 1].
    pub s: f64,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            r: 0.01,
            w3: 2.0,
            s: 0.5,
        }
    }
}

impl Params {
    pub fn new(r: f64, w3: f64, s: f64) -> Result<Self> {
        let p = Self { r, w3, s };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        validate_r(self.r)?;
        validate_w3(self.w3)?;
        validate_scale(self.s)
    }
}

pub(crate) fn validate_r(r: f64) -> Result<()> {
    if r > 0.0 && r < 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidParam {
            name: "R",
            value: r,
            reason: "must lie in (0, 0.5)",
        })
    }
}

pub(crate) fn validate_w3(w3: f64) -> Result<()> {
    if w3.is_finite() && w3 >= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam {
            name: "w3",
            value: w3,
            reason: "must be finite and >= 1",
        })
    }
}

pub(crate) fn validate_scale(s: f64) -> Result<()> {
    if s > 0.0 && s <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam {
            name: "s",
            value: s,
            reason: "must lie in (0, 1]",
        })
    }
}

/// How a refined label was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Tail-trimmed marginal extents.
    Pbl,
    /// Largest assigned dense box (PBL ablation).
    BiggestBox,
    /// Highest-scoring assigned dense box (raw baseline).
    TopScore,
    /// Perspective size interpolation for an instance without boxes.
    Padm,
    /// Average-size square for an instance without boxes.
    Apl,
}

impl LabelSource {
    pub fn is_synthesized(self) -> bool {
        matches!(self, LabelSource::Padm | LabelSource::Apl)
    }
}

/// A box plus the bookkeeping that travels with it through files.
#[derive(Clone, Debug, PartialEq)]
pub struct Label {
    /// Instance id; links ground truth, point annotations and refined labels.
    pub id: Option<InstanceId>,
    pub bbox: BoxLabel,
    pub source: Option<LabelSource>,
}

impl Label {
    pub fn new(bbox: BoxLabel) -> Self {
        Self {
            id: None,
            bbox,
            source: None,
        }
    }

    pub fn with_id(mut self, id: InstanceId) -> Self {
        self.id = Some(id);
        self
    }

    pub fn with_source(mut self, source: LabelSource) -> Self {
        self.source = Some(source);
        self
    }
}

/// Per-image labels plus the category table they refer to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelSet {
    pub categories: BTreeMap<CategoryId, String>,
    labels: BTreeMap<ImageId, Vec<Label>>,
}

impl LabelSet {
    pub fn new(categories: BTreeMap<CategoryId, String>) -> Self {
        Self {
            categories,
            labels: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, image_id: ImageId, label: Label) -> Result<()> {
        let category_id = label.bbox.category_id();
        if !self.categories.contains_key(&category_id) {
            return Err(Error::UnknownCategory {
                image_id,
                category_id,
            });
        }
        self.labels.entry(image_id).or_default().push(label);
        Ok(())
    }

    /// Registers an image with no labels so it still appears in iteration.
    pub fn touch(&mut self, image_id: ImageId) {
        self.labels.entry(image_id).or_default();
    }

    pub fn image(&self, image_id: ImageId) -> &[Label] {
        self.labels
            .get(&image_id)
            .map(Vec::as_slice)
            .unwrap_or_default()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.labels.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImageId, &Label)> + '_ {
        self.labels
            .iter()
            .flat_map(|(id, labels)| labels.iter().map(move |l| (*id, l)))
    }

    pub fn len(&self) -> usize {
        self.labels.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorts each image's labels by `(category, x_min, y_min, width, height, id)`.
    pub fn sort_canonical(&mut self) {
        for labels in self.labels.values_mut() {
            labels.sort_by(canonical_order);
        }
    }

    /// Keeps only the images accepted by `keep`.
    pub fn retain_images(&mut self, mut keep: impl FnMut(ImageId) -> bool) {
        self.labels.retain(|id, _| keep(*id));
    }
}

pub(crate) fn canonical_order(a: &Label, b: &Label) -> std::cmp::Ordering {
    let ka = (a.bbox.category_id(), a.bbox.x_min(), a.bbox.y_min());
    let kb = (b.bbox.category_id(), b.bbox.x_min(), b.bbox.y_min());
    ka.0.cmp(&kb.0)
        .then(ka.1.total_cmp(&kb.1))
        .then(ka.2.total_cmp(&kb.2))
        .then(a.bbox.width().total_cmp(&b.bbox.width()))
        .then(a.bbox.height().total_cmp(&b.bbox.height()))
        .then(a.id.cmp(&b.id))
        .then(
            a.bbox
                .score()
                .unwrap_or(-1.0)
                .total_cmp(&b.bbox.score().unwrap_or(-1.0)),
        )
}
