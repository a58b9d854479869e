//! Parameter fitting on the supervised subset.
//!
//! The objective is piecewise constant in all three parameters, so the search
//! is exhaustive over a grid followed by one coordinate-descent pass at half
//! the grid spacing around the winner.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::datamodel::{
    validate_r, validate_scale, validate_w3, BoxLabel, ImageId, ImageRecord, InstanceId, LabelSet,
    Params,
};
use crate::error::{Error, Result};
use crate::ingest::DatasetBundle;
use crate::matching::MatchMode;
use crate::pipeline::{refine_prepared, PreparedImage, RefineOptions, SizeReference};

/// Candidate values per parameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchSpace {
    pub r_grid: Vec<f64>,
    pub w3_grid: Vec<f64>,
    pub s_grid: Vec<f64>,
}

impl Default for SearchSpace {
    /// R: 15 log-spaced values in [0.01, 0.30]; w3: 10 values in [1.2, 3.0]; s: {0.25, 0.5}.
    fn default() -> Self {
        Self {
            r_grid: log_spaced(0.01, 0.30, 15),
            w3_grid: lin_spaced(1.2, 3.0, 10),
            s_grid: vec![0.25, 0.5],
        }
    }
}

pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).ln() / (n - 1) as f64;
    (0..n)
        .map(|k| if k + 1 == n { hi } else { lo * (ratio * k as f64).exp() })
        .collect()
}

pub fn lin_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|k| if k + 1 == n { hi } else { lo + step * k as f64 })
        .collect()
}

impl SearchSpace {
    pub fn single(p: Params) -> Self {
        Self {
            r_grid: vec![p.r],
            w3_grid: vec![p.w3],
            s_grid: vec![p.s],
        }
    }

    /// Sorts and deduplicates each axis and checks every value's range.
    pub fn normalized(&self) -> Result<Self> {
        let norm = |v: &[f64], check: fn(f64) -> Result<()>| -> Result<Vec<f64>> {
            if v.is_empty() {
                return Err(Error::EmptyInput("search space axis has no values"));
            }
            let mut v = v.to_vec();
            for x in &v {
                check(*x)?;
            }
            v.sort_by(f64::total_cmp);
            v.dedup();
            Ok(v)
        };
        Ok(Self {
            r_grid: norm(&self.r_grid, validate_r)?,
            w3_grid: norm(&self.w3_grid, validate_w3)?,
            s_grid: norm(&self.s_grid, validate_scale)?,
        })
    }

    /// Cells in evaluation order: s, then w3, then R.
    pub fn cells(&self) -> Vec<Params> {
        let mut out = Vec::with_capacity(self.r_grid.len() * self.w3_grid.len() * self.s_grid.len());
        for &s in &self.s_grid {
            for &w3 in &self.w3_grid {
                for &r in &self.r_grid {
                    out.push(Params { r, w3, s });
                }
            }
        }
        out
    }
}

/// Mean absolute edge error of two boxes, relative to the image diagonal.
pub fn pair_discrepancy(spl: &BoxLabel, gt: &BoxLabel, diagonal: f64) -> f64 {
    let d = (spl.x_min() - gt.x_min()).abs()
        + (spl.y_min() - gt.y_min()).abs()
        + (spl.x_max() - gt.x_max()).abs()
        + (spl.y_max() - gt.y_max()).abs();
    0.25 * d / diagonal
}

/// Supervised instances paired with their refined labels by instance id.
pub fn correspondence<'a>(
    spl: &'a LabelSet,
    gt: &'a LabelSet,
) -> Vec<(ImageId, &'a BoxLabel, &'a BoxLabel)> {
    let mut out = Vec::new();
    for image_id in gt.image_ids() {
        let refined: HashMap<InstanceId, &BoxLabel> = spl
            .image(image_id)
            .iter()
            .filter_map(|l| l.id.map(|id| (id, &l.bbox)))
            .collect();
        for g in gt.image(image_id) {
            if let Some(s) = g.id.and_then(|id| refined.get(&id)) {
                out.push((image_id, *s, &g.bbox));
            }
        }
    }
    out
}

/// `tanh` of the mean normalized edge error over corresponding pairs.
pub fn label_loss(spl: &LabelSet, gt: &LabelSet, images: &[ImageRecord]) -> Result<f64> {
    let diag: HashMap<ImageId, f64> = images.iter().map(|i| (i.image_id, i.diagonal())).collect();
    let pairs = correspondence(spl, gt);
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no supervised instance has a refined label"));
    }
    let mut sum = 0.0;
    for (image_id, s, g) in &pairs {
        let d = *diag.get(image_id).ok_or(Error::UnknownImage(*image_id))?;
        sum += pair_discrepancy(s, g, d);
    }
    Ok((sum / pairs.len() as f64).tanh())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Grid,
    Refine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub stage: Stage,
    pub params: Params,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub params: Params,
    pub loss: f64,
    /// Every evaluation in order: grid cells first, then refinement probes.
    pub history: Vec<LossRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub match_mode: MatchMode,
    /// Run the half-step coordinate pass after the grid search.
    pub refine: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            match_mode: MatchMode::Padm,
            refine: true,
        }
    }
}

/// Fits `(R, w3, s)` on the supervised images of `bundle`.
pub fn fit(bundle: &DatasetBundle, space: &SearchSpace) -> Result<FitResult> {
    fit_with(bundle, space, &FitOptions::default())
}

pub fn fit_with(bundle: &DatasetBundle, space: &SearchSpace, opts: &FitOptions) -> Result<FitResult> {
    let space = space.normalized()?;
    let eval = Evaluator::new(bundle, opts.match_mode)?;

    let cells = space.cells();
    for s in &space.s_grid {
        eval.prepare(*s);
    }
    let losses: Vec<f64> = cells
        .par_iter()
        .map(|p| eval.loss(p))
        .collect::<Result<_>>()?;

    let mut history: Vec<LossRecord> = cells
        .iter()
        .zip(&losses)
        .map(|(p, l)| LossRecord {
            stage: Stage::Grid,
            params: *p,
            loss: *l,
        })
        .collect();
    let (mut best, mut best_loss) = (cells[0], losses[0]);
    for (p, l) in cells.iter().zip(&losses).skip(1) {
        if *l < best_loss || (*l == best_loss && tie_preferred(p, &best)) {
            best = *p;
            best_loss = *l;
        }
    }

    if opts.refine {
        for axis in [Axis::R, Axis::W3, Axis::S] {
            let probes = half_steps(axis.grid(&space), axis.get(&best));
            if probes.is_empty() {
                continue;
            }
            let candidates: Vec<Params> = probes.iter().map(|v| axis.with(&best, *v)).collect();
            for c in &candidates {
                eval.prepare(c.s);
            }
            let probe_losses: Vec<f64> = candidates
                .par_iter()
                .map(|p| eval.loss(p))
                .collect::<Result<_>>()?;
            for (p, l) in candidates.iter().zip(probe_losses) {
                history.push(LossRecord {
                    stage: Stage::Refine,
                    params: *p,
                    loss: l,
                });
                if l < best_loss {
                    best = *p;
                    best_loss = l;
                }
            }
        }
    }

    Ok(FitResult {
        params: best,
        loss: best_loss,
        history,
    })
}

/// Tie order: smaller R, then smaller w3, then larger s.
fn tie_preferred(a: &Params, b: &Params) -> bool {
    a.r.total_cmp(&b.r)
        .then(a.w3.total_cmp(&b.w3))
        .then(b.s.total_cmp(&a.s))
        .is_lt()
}

#[derive(Clone, Copy)]
enum Axis {
    R,
    W3,
    S,
}

impl Axis {
    fn grid<'a>(&self, space: &'a SearchSpace) -> &'a [f64] {
        match self {
            Axis::R => &space.r_grid,
            Axis::W3 => &space.w3_grid,
            Axis::S => &space.s_grid,
        }
    }

    fn get(&self, p: &Params) -> f64 {
        match self {
            Axis::R => p.r,
            Axis::W3 => p.w3,
            Axis::S => p.s,
        }
    }

    fn with(&self, p: &Params, v: f64) -> Params {
        let mut q = *p;
        match self {
            Axis::R => q.r = v,
            Axis::W3 => q.w3 = v,
            Axis::S => q.s = v,
        }
        q
    }
}

/// Midpoints between `v` and its neighbors on a sorted grid.
fn half_steps(grid: &[f64], v: f64) -> Vec<f64> {
    let Some(k) = grid.iter().position(|g| *g == v) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    if k > 0 {
        out.push(0.5 * (grid[k - 1] + v));
    }
    if k + 1 < grid.len() {
        out.push(0.5 * (v + grid[k + 1]));
    }
    out
}

/// Runs the pipeline on the supervised images, caching heat grids per scale.
struct Evaluator<'a> {
    bundle: &'a DatasetBundle,
    supervised: Vec<ImageRecord>,
    gt: LabelSet,
    sizes: SizeReference,
    match_mode: MatchMode,
    prepared: std::sync::RwLock<BTreeMap<u64, std::sync::Arc<Vec<PreparedImage>>>>,
}

impl<'a> Evaluator<'a> {
    fn new(bundle: &'a DatasetBundle, match_mode: MatchMode) -> Result<Self> {
        let supervised: Vec<ImageRecord> = bundle
            .supervised_images()
            .into_iter()
            .filter(|id| bundle.points.get(id).is_some_and(|p| !p.is_empty()))
            .filter_map(|id| bundle.image(id).copied())
            .collect();
        if supervised.is_empty() {
            return Err(Error::EmptyInput("no supervised image with point annotations"));
        }
        let mut gt = bundle.gt.clone();
        gt.retain_images(|id| supervised.iter().any(|i| i.image_id == id));
        Ok(Self {
            bundle,
            supervised,
            gt,
            sizes: SizeReference::from_dense(&bundle.dense),
            match_mode,
            prepared: Default::default(),
        })
    }

    fn prepare(&self, s: f64) {
        if self.prepared.read().expect("cache lock").contains_key(&s.to_bits()) {
            return;
        }
        let grids: Vec<PreparedImage> = self
            .supervised
            .par_iter()
            .map(|img| PreparedImage::new(img, &self.bundle.dense, s))
            .collect();
        self.prepared
            .write()
            .expect("cache lock")
            .insert(s.to_bits(), std::sync::Arc::new(grids));
    }

    fn loss(&self, p: &Params) -> Result<f64> {
        let prepared = self
            .prepared
            .read()
            .expect("cache lock")
            .get(&p.s.to_bits())
            .cloned()
            .expect("scale prepared before evaluation");
        let mut opts = RefineOptions::new(*p);
        opts.match_mode = self.match_mode;
        let mut spl = LabelSet::new(self.gt.categories.clone());
        for prep in prepared.iter() {
            let pts = self
                .bundle
                .points
                .get(&prep.img.image_id)
                .map(Vec::as_slice)
                .unwrap_or_default();
            let res = refine_prepared(prep, pts, &self.sizes, &opts)?;
            for l in res.labels {
                // Categories outside the supervised table cannot pair with ground truth.
                if spl.categories.contains_key(&l.bbox.category_id()) {
                    spl.push(prep.img.image_id, l)?;
                }
            }
        }
        label_loss(&spl, &self.gt, &self.supervised)
    }
}
