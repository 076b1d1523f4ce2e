use crate::boxes::{area, BBox, BinaryMask};
use crate::error::{Error, Result};
use crate::fcos::location_grid;

/// Regression ranges for P3..P7 as `(lo, hi]` on the largest offset.
pub const DEFAULT_RANGES: [(f32, f32); 5] = [
    (f32::NEG_INFINITY, 64.0),
    (64.0, 128.0),
    (128.0, 256.0),
    (256.0, 512.0),
    (512.0, f32::INFINITY),
];

/// Per-location targets of one pyramid level, row-major over H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub level: u32,
    pub height: usize,
    pub width: usize,
    /// Class index, or -1 for background.
    pub labels: Vec<i32>,
    /// (l, t, r, b); zeros at background locations.
    pub boxes: Vec<[f32; 4]>,
    /// Zero at background locations.
    pub centerness: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocationTargets {
    pub levels: Vec<LevelTargets>,
}

impl LocationTargets {
    pub fn positives(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.labels.iter().filter(|&&c| c >= 0).count())
            .sum()
    }
}

/// `√((min(l,r)/max(l,r)) · (min(t,b)/max(t,b)))`.
pub fn centerness_target(l: f32, t: f32, r: f32, b: f32) -> Result<f32> {
    if !(l > 0.0 && t > 0.0 && r > 0.0 && b > 0.0) {
        return Err(Error::Invalid(format!(
            "centerness of non-positive offsets ({l}, {t}, {r}, {b})"
        )));
    }
    Ok(((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt())
}

/// Labels every location of every level.
///
/// A location is positive for a box when it lies strictly inside it and the
/// largest of its four offsets falls in the level's range; the smallest such
/// box wins, earlier boxes first on equal area.
pub fn fcos_assign_targets(
    gt: &[(BBox, usize)],
    levels: &[(u32, usize, usize)],
    ranges: &[(f32, f32)],
    location_offset: f32,
) -> Result<LocationTargets> {
    let mut out = Vec::with_capacity(levels.len());
    for &(k, h, w) in levels {
        let idx = (k as usize)
            .checked_sub(3)
            .filter(|&i| i < ranges.len())
            .ok_or_else(|| Error::Invalid(format!("no regression range for P{k}")))?;
        let (lo, hi) = ranges[idx];
        let grid = location_grid(k, h, w, location_offset);
        let mut lt = LevelTargets {
            level: k,
            height: h,
            width: w,
            labels: vec![-1; h * w],
            boxes: vec![[0.0; 4]; h * w],
            centerness: vec![0.0; h * w],
        };
        for (i, &(x, y)) in grid.iter().enumerate() {
            let mut best: Option<(f32, usize, [f32; 4])> = None;
            for (j, (b, _)) in gt.iter().enumerate() {
                let off = [x - b[0], y - b[1], b[2] - x, b[3] - y];
                if off.iter().any(|&v| v <= 0.0) {
                    continue;
                }
                let m = off.iter().cloned().fold(f32::MIN, f32::max);
                if !(m > lo && m <= hi) {
                    continue;
                }
                let a = area(b);
                if best.is_none_or(|(ba, _, _)| a < ba) {
                    best = Some((a, j, off));
                }
            }
            if let Some((_, j, off)) = best {
                lt.labels[i] = gt[j].1 as i32;
                lt.boxes[i] = off;
                lt.centerness[i] = centerness_target(off[0], off[1], off[2], off[3])?;
            }
        }
        out.push(lt);
    }
    Ok(LocationTargets { levels: out })
}

/// Crops `gt` to `bbox`, resizes bilinearly to m×m and binarizes at 0.5.
/// Pixels outside the image read as zero.
pub fn mask_target(bbox: &BBox, gt: &BinaryMask, m: usize) -> Vec<f32> {
    let [x1, y1, x2, y2] = bbox.map(|v| v as f64);
    let (bw, bh) = ((x2 - x1) / m as f64, (y2 - y1) / m as f64);
    let read = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= gt.height as i64 || x >= gt.width as i64 {
            0.0
        } else {
            gt.get(y as usize, x as usize) as u8 as f64
        }
    };
    let mut out = Vec::with_capacity(m * m);
    for i in 0..m {
        let py = y1 + (i as f64 + 0.5) * bh - 0.5;
        for j in 0..m {
            let px = x1 + (j as f64 + 0.5) * bw - 0.5;
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let v = read(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + read(y0, x0 + 1) * fx * (1.0 - fy)
                + read(y0 + 1, x0) * (1.0 - fx) * fy
                + read(y0 + 1, x0 + 1) * fx * fy;
            out.push(if v >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    out
}

/// IoU of two {0,1} grids thresholded at 0.5.
pub fn grid_iou(a: &[f32], b: &[f32]) -> f32 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.iter().zip(b) {
        let (p, q) = (p >= 0.5, q >= 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f32 / union as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centerness_values() {
        assert_eq!(centerness_target(3.0, 2.0, 3.0, 2.0).unwrap(), 1.0);
        assert!((centerness_target(1.0, 1.0, 4.0, 4.0).unwrap() - 0.25).abs() < 1e-7);
        assert!(centerness_target(0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn smaller_box_wins() {
        let gt = vec![([0.0, 0.0, 64.0, 64.0], 0), ([0.0, 0.0, 16.0, 16.0], 2)];
        let t = fcos_assign_targets(&gt, &[(3, 8, 8)], &DEFAULT_RANGES, 0.5).unwrap();
        assert_eq!(t.levels[0].labels[0], 2);
        assert_eq!(t.levels[0].labels[9], 2);
        assert_eq!(t.levels[0].labels[2], 0);
    }
}
