//! JSON shapes for predictions and datasets, with masks stored as
//! uncompressed run lengths.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, BinaryMask};
use crate::data::{SceneSample, Shape};
use crate::error::{Error, Result};
use crate::mask::InstanceResult;
use crate::train::GroundTruth;

/// Alternating run lengths over row-major pixels, starting with zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u32;
    for &v in &mask.data {
        let v = (v != 0) as u8;
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    Rle {
        size: [mask.height, mask.width],
        counts,
    }
}

pub fn rle_decode(rle: &Rle) -> Result<BinaryMask> {
    let [h, w] = rle.size;
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::Invalid(format!(
            "run lengths sum to {total}, expected {}",
            h * w
        )));
    }
    let mut data = Vec::with_capacity(h * w);
    for (i, &c) in rle.counts.iter().enumerate() {
        data.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
    }
    Ok(BinaryMask {
        height: h,
        width: w,
        data,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: u64,
    pub label: usize,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: BBox,
    pub score: f32,
    pub mask: Rle,
}

impl ResultRecord {
    pub fn from_instance(image_id: u64, inst: &InstanceResult) -> Self {
        ResultRecord {
            image_id,
            label: inst.detection.label,
            bbox: inst.detection.bbox,
            score: inst.score,
            mask: rle_encode(&inst.mask),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub label: usize,
    pub bbox: BBox,
    pub mask: Rle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl Dataset {
    /// Annotations for synthetic scenes; image ids are the sample seeds.
    pub fn from_samples(samples: &[SceneSample]) -> Self {
        let mut ds = Dataset {
            categories: Shape::ALL
                .iter()
                .map(|s| Category {
                    id: s.index(),
                    name: s.name().to_string(),
                })
                .collect(),
            ..Dataset::default()
        };
        for s in samples {
            ds.images.push(ImageEntry {
                id: s.seed,
                file_name: format!("{:08}.png", s.seed),
                height: s.height,
                width: s.width,
            });
            for inst in &s.instances {
                ds.annotations.push(Annotation {
                    id: ds.annotations.len() as u64,
                    image_id: s.seed,
                    label: inst.label.index(),
                    bbox: inst.bbox,
                    mask: rle_encode(&inst.mask),
                });
            }
        }
        ds
    }

    pub fn ground_truth(&self, image_id: u64) -> Result<Vec<GroundTruth>> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .map(|a| {
                Ok(GroundTruth {
                    bbox: a.bbox,
                    label: a.label,
                    mask: rle_decode(&a.mask)?,
                })
            })
            .collect()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
