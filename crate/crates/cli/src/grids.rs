//! Binary PGM dumps of heat grids, scaled so the hottest cell is white.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use sparsegen::pipeline::ImageResult;
use sparsegen::GridMap;

pub fn to_pgm(grid: &GridMap) -> Vec<u8> {
    let max = grid.max_value();
    let mut out = format!("P5\n{} {}\n255\n", grid.cols(), grid.rows()).into_bytes();
    out.reserve(grid.cols() * grid.rows());
    for v in grid.values() {
        let level = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
        out.push(level.clamp(0.0, 255.0) as u8);
    }
    out
}

/// Writes `img<id>_cat<c>_st.pgm` and `img<id>_cat<c>_amt.pgm` per category.
pub fn dump_all(dir: &Path, results: &[ImageResult]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for r in results {
        for g in &r.grids {
            for (tag, grid) in [("st", &g.st), ("amt", &g.amt)] {
                let path = dir.join(format!("img{}_cat{}_{tag}.pgm", r.image_id, g.category_id));
                let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                f.write_all(&to_pgm(grid))?;
            }
        }
    }
    Ok(())
}
