//! End-to-end refinement of one image or a whole bundle.
//!
//! Per (image, category): every dense box is mapped to an instance grid and
//! summed into the heat grid; each point gets a square mask; instances whose
//! mask holds at least one box center are regressed from the masked
//! marginals, the rest are synthesized by perspective or average-size matching.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::datamodel::{
    BoxLabel, CategoryId, GridMap, ImageId, ImageRecord, InstanceId, Label, LabelSet, LabelSource,
    Params, PointAnnotation,
};
use crate::error::{Error, Result};
use crate::heat::{add_clipped, apply_mask, category_apl, centroid, mask_rect, masked_marginals};
use crate::ingest::{DatasetBundle, DenseBoxes};
use crate::mapping::build_instance_grid;
use crate::matching::{apl_match, assign, padm_with, Intercept, MatchMode};
use crate::regression::{fuse_with_point, pbl, PixelExtents};

/// How a matched instance's box is extracted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExtentMode {
    /// Tail trimming of the masked marginals.
    #[default]
    Pbl,
    /// Largest assigned dense box.
    BiggestBox,
    /// Highest-scoring assigned dense box.
    TopScore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineOptions {
    pub params: Params,
    pub match_mode: MatchMode,
    pub extent: ExtentMode,
    pub intercept: Intercept,
    /// Keep per-category heat grids for inspection.
    pub keep_grids: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self::new(Params::default())
    }
}

impl RefineOptions {
    pub fn new(params: Params) -> Self {
        Self {
            params,
            match_mode: MatchMode::Padm,
            extent: ExtentMode::Pbl,
            intercept: Intercept::Anchored,
            keep_grids: false,
        }
    }
}

/// Dataset-wide mean box length per category, used when an image has no
/// boxes of a category.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SizeReference(BTreeMap<CategoryId, f64>);

impl SizeReference {
    pub fn from_dense(dense: &DenseBoxes) -> Self {
        let mut acc: BTreeMap<CategoryId, (f64, usize)> = BTreeMap::new();
        for ((_, cat), boxes) in dense {
            let e = acc.entry(*cat).or_default();
            e.0 += boxes.iter().map(BoxLabel::mean_side).sum::<f64>();
            e.1 += boxes.len();
        }
        Self(
            acc.into_iter()
                .filter(|(_, (_, n))| *n > 0)
                .map(|(c, (sum, n))| (c, sum / n as f64))
                .collect(),
        )
    }

    pub fn get(&self, cat: CategoryId) -> Option<f64> {
        self.0.get(&cat).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceOutcome {
    pub instance_id: InstanceId,
    pub category_id: CategoryId,
    pub source: LabelSource,
    pub assigned_boxes: usize,
    /// Per-axis mass under the mask (0 for synthesized boxes).
    pub mass: f64,
    /// Mass centroid in grid coordinates, when the mask held any mass.
    pub centroid: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryGrids {
    pub category_id: CategoryId,
    /// Summed heat grid.
    pub st: GridMap,
    /// Heat grid under the union of the instance masks.
    pub amt: GridMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub image_id: ImageId,
    pub labels: Vec<Label>,
    pub outcomes: Vec<InstanceOutcome>,
    pub grids: Vec<CategoryGrids>,
}

/// Heat grids of one image at one scale, reusable across `R`/`w3` settings.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub img: ImageRecord,
    pub s: f64,
    categories: BTreeMap<CategoryId, (Vec<BoxLabel>, GridMap)>,
}

impl PreparedImage {
    pub fn new(img: &ImageRecord, dense: &DenseBoxes, s: f64) -> Self {
        let categories = dense
            .range((img.image_id, CategoryId::MIN)..=(img.image_id, CategoryId::MAX))
            .map(|((_, cat), boxes)| {
                let mut st = GridMap::for_image(img, s);
                for b in boxes {
                    add_clipped(&mut st, &build_instance_grid(b, s))
                        .expect("instance grids share the image scale");
                }
                (*cat, (boxes.clone(), st))
            })
            .collect();
        Self {
            img: *img,
            s,
            categories,
        }
    }

    pub fn heat(&self, cat: CategoryId) -> Option<&GridMap> {
        self.categories.get(&cat).map(|(_, st)| st)
    }
}

/// Refines the points of one image.
pub fn refine_image(
    img: &ImageRecord,
    points: &[PointAnnotation],
    dense: &DenseBoxes,
    sizes: &SizeReference,
    opts: &RefineOptions,
) -> Result<ImageResult> {
    opts.params.validate()?;
    let prepared = PreparedImage::new(img, dense, opts.params.s);
    refine_prepared(&prepared, points, sizes, opts)
}

/// Refines the points of one image from precomputed heat grids.
///
/// `prepared.s` must equal `opts.params.s`.
pub fn refine_prepared(
    prepared: &PreparedImage,
    points: &[PointAnnotation],
    sizes: &SizeReference,
    opts: &RefineOptions,
) -> Result<ImageResult> {
    let Params { r, w3, s } = opts.params;
    if prepared.s != s {
        return Err(Error::DimensionMismatch(format!(
            "heat grids prepared at scale {} but refining at {s}",
            prepared.s
        )));
    }
    let img = &prepared.img;

    let mut by_cat: BTreeMap<CategoryId, Vec<PointAnnotation>> = BTreeMap::new();
    for p in points {
        by_cat.entry(p.category_id).or_default().push(*p);
    }

    let mut labels = Vec::with_capacity(points.len());
    let mut outcomes = Vec::with_capacity(points.len());
    let mut grids = Vec::new();
    let no_boxes: (Vec<BoxLabel>, GridMap) = (Vec::new(), GridMap::zeros(0, 0, s));

    for (cat, mut pts) in by_cat {
        pts.sort_by_key(|p| p.instance_id);
        let (boxes, st) = prepared.categories.get(&cat).unwrap_or(&no_boxes);
        let apl = match category_apl(boxes) {
            Ok(stats) => Some(stats.apl),
            Err(_) => sizes.get(cat),
        };
        let assignment = match apl {
            Some(apl) if !boxes.is_empty() => assign(boxes, &pts, apl, w3),
            _ => crate::matching::Assignment {
                per_instance: vec![Vec::new(); pts.len()],
                unmatched: pts.iter().map(|p| p.instance_id).collect(),
            },
        };
        let mut union_mask = opts.keep_grids.then(|| GridMap::for_image(img, s));

        let mut unmatched = Vec::new();
        for (k, p) in pts.iter().enumerate() {
            let hits = &assignment.per_instance[k];
            if hits.is_empty() {
                unmatched.push(*p);
                continue;
            }
            let apl = apl.expect("assigned boxes imply a category size");
            let rect = mask_rect(p, apl, w3, img, s);
            if let Some(mask) = union_mask.as_mut() {
                for i in rect.row0..rect.row1 {
                    for j in rect.col0..rect.col1 {
                        mask.set(i, j, 1.0);
                    }
                }
            }
            let mp = masked_marginals(st, &rect);
            let (bbox, source, mass) = match opts.extent {
                ExtentMode::Pbl => {
                    if !(mp.m_total > 0.0) {
                        unmatched.push(*p);
                        continue;
                    }
                    let ext = pbl(&mp, r, s)?;
                    (fuse_with_point(&ext, p, img), LabelSource::Pbl, mp.axis_mass())
                }
                ExtentMode::BiggestBox | ExtentMode::TopScore => {
                    let pick = pick_box(boxes, hits, opts.extent);
                    let b = fuse_with_point(&PixelExtents::from(&pick), p, img);
                    let src = if opts.extent == ExtentMode::BiggestBox {
                        LabelSource::BiggestBox
                    } else {
                        LabelSource::TopScore
                    };
                    (b, src, mp.axis_mass())
                }
            };
            labels.push(Label::new(bbox).with_id(p.instance_id).with_source(source));
            outcomes.push(InstanceOutcome {
                instance_id: p.instance_id,
                category_id: cat,
                source,
                assigned_boxes: hits.len(),
                mass,
                centroid: centroid(&mp).ok(),
            });
        }

        let matched: Vec<BoxLabel> = assignment
            .matched_boxes()
            .into_iter()
            .map(|k| boxes[k])
            .collect();
        for p in unmatched {
            let synthesized = match opts.match_mode {
                MatchMode::Padm => padm_with(&p, &matched, img, opts.intercept).map(|b| (b, LabelSource::Padm)),
                MatchMode::Apl => None,
            };
            let (bbox, source) = match synthesized {
                Some(hit) => hit,
                None => {
                    let apl = apl.ok_or(Error::NoSizeReference(cat))?;
                    (apl_match(&p, apl, img)?, LabelSource::Apl)
                }
            };
            labels.push(Label::new(bbox).with_id(p.instance_id).with_source(source));
            outcomes.push(InstanceOutcome {
                instance_id: p.instance_id,
                category_id: cat,
                source,
                assigned_boxes: 0,
                mass: 0.0,
                centroid: None,
            });
        }

        if let Some(mask) = union_mask {
            if st.cols() > 0 {
                grids.push(CategoryGrids {
                    category_id: cat,
                    amt: apply_mask(st, &mask)?,
                    st: st.clone(),
                });
            }
        }
    }

    // Score = mask mass relative to the heaviest instance of the image.
    let max_mass = outcomes.iter().map(|o| o.mass).fold(0.0, f64::max);
    for (label, outcome) in labels.iter_mut().zip(&outcomes) {
        let score = if max_mass > 0.0 { outcome.mass / max_mass } else { 0.0 };
        label.bbox = label.bbox.with_score(score);
    }

    Ok(ImageResult {
        image_id: img.image_id,
        labels,
        outcomes,
        grids,
    })
}

fn pick_box(boxes: &[BoxLabel], hits: &[usize], mode: ExtentMode) -> BoxLabel {
    let key = |b: &BoxLabel| match mode {
        ExtentMode::TopScore => b.score().unwrap_or(0.0),
        _ => b.area(),
    };
    // First index wins ties.
    let mut best = boxes[hits[0]];
    for &k in &hits[1..] {
        if key(&boxes[k]) > key(&best) {
            best = boxes[k];
        }
    }
    best
}

#[derive(Clone, Debug, Default)]
pub struct RefineOutput {
    pub labels: LabelSet,
    pub results: Vec<ImageResult>,
    /// Images that could not be processed, with the reason.
    pub failures: Vec<(ImageId, String)>,
}

impl RefineOutput {
    pub fn outcome(&self, image_id: ImageId, instance_id: InstanceId) -> Option<&InstanceOutcome> {
        self.results
            .iter()
            .find(|r| r.image_id == image_id)?
            .outcomes
            .iter()
            .find(|o| o.instance_id == instance_id)
    }
}

/// Refines every image with points, in parallel; results are ordered by image id.
pub fn refine_bundle(bundle: &DatasetBundle, opts: &RefineOptions) -> Result<RefineOutput> {
    opts.params.validate()?;
    let sizes = SizeReference::from_dense(&bundle.dense);
    let mut images: Vec<&ImageRecord> = bundle.images.iter().collect();
    images.sort_by_key(|i| i.image_id);

    let results: Vec<(ImageId, Result<ImageResult>)> = images
        .par_iter()
        .map(|img| {
            let pts = bundle.points.get(&img.image_id).map(Vec::as_slice).unwrap_or_default();
            (img.image_id, refine_image(img, pts, &bundle.dense, &sizes, opts))
        })
        .collect();

    let mut categories = bundle.gt.categories.clone();
    for cat in bundle.categories() {
        categories.entry(cat).or_insert_with(|| format!("category_{cat}"));
    }
    let mut out = RefineOutput {
        labels: LabelSet::new(categories),
        ..Default::default()
    };
    for (image_id, res) in results {
        match res {
            Ok(r) => {
                out.labels.touch(image_id);
                for l in &r.labels {
                    out.labels.push(image_id, l.clone())?;
                }
                out.results.push(r);
            }
            Err(e) => {
                log::warn!("image {image_id}: {e}");
                out.failures.push((image_id, e.to_string()));
            }
        }
    }
    out.labels.sort_canonical();
    Ok(out)
}
