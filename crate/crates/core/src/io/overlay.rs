//! PNG overlays: translucent masks, box outlines and `label score` captions.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::mask::InstanceResult;

const PALETTE: [[u8; 3]; 6] = [
    [230, 57, 70],
    [42, 157, 143],
    [69, 123, 230],
    [244, 162, 97],
    [155, 93, 229],
    [233, 196, 106],
];

/// 3×5 glyphs, one row per entry, most significant of the low 3 bits on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        'a' => [0, 7, 5, 7, 5],
        'c' => [0, 7, 4, 4, 7],
        'e' => [7, 4, 7, 4, 7],
        'g' => [7, 4, 5, 5, 7],
        'i' => [2, 0, 2, 2, 2],
        'l' => [4, 4, 4, 4, 7],
        'n' => [0, 6, 5, 5, 5],
        'o' => [0, 7, 5, 5, 7],
        'r' => [0, 7, 4, 4, 4],
        't' => [2, 7, 2, 2, 3],
        _ => return None,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn draw_text(img: &mut RgbImage, text: &str, x: i64, y: i64, scale: i64, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        for dy in 0..scale {
                            for dx in 0..scale {
                                put(img, cx + col * scale + dx, y + r as i64 * scale + dy, color);
                            }
                        }
                    }
                }
            }
        }
        cx += 4 * scale;
    }
}

fn draw_box(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let [x1, y1, x2, y2] = b.map(|v| v.round() as i64);
    for x in x1..x2.max(x1 + 1) {
        put(img, x, y1, color);
        put(img, x, y2 - 1, color);
    }
    for y in y1..y2.max(y1 + 1) {
        put(img, x1, y, color);
        put(img, x2 - 1, y, color);
    }
}

/// Draws `instances` over an H×W×3 image.
pub fn render_overlay(
    rgb: &[u8],
    height: usize,
    width: usize,
    instances: &[InstanceResult],
    class_names: &[&str],
) -> Result<RgbImage> {
    let mut img = RgbImage::from_raw(width as u32, height as u32, rgb.to_vec())
        .ok_or_else(|| Error::Invalid(format!("{} bytes for a {height}x{width} RGB image", rgb.len())))?;
    for inst in instances.iter().rev() {
        let color = PALETTE[inst.detection.label % PALETTE.len()];
        if inst.mask.height != height || inst.mask.width != width {
            return Err(Error::Invalid("instance mask size differs from the image".into()));
        }
        for (i, &on) in inst.mask.data.iter().enumerate() {
            if on != 0 {
                let p = img.get_pixel_mut((i % width) as u32, (i / width) as u32);
                for c in 0..3 {
                    p.0[c] = ((p.0[c] as u16 * 55 + color[c] as u16 * 45) / 100) as u8;
                }
            }
        }
    }
    let scale = (width as i64 / 160).max(1);
    for inst in instances {
        let color = PALETTE[inst.detection.label % PALETTE.len()];
        draw_box(&mut img, &inst.detection.bbox, color);
        let name = class_names.get(inst.detection.label).copied().unwrap_or("");
        let caption = format!("{name} {:.2}", inst.score);
        let [x1, y1, _, _] = inst.detection.bbox;
        let ty = (y1 as i64 - 6 * scale).max(0);
        draw_text(&mut img, &caption, x1 as i64, ty, scale, color);
    }
    Ok(img)
}

pub fn save_overlay(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path)?;
    Ok(())
}

/// Reads a PNG as H×W×3 bytes, zero-padding the bottom and right edges up to
/// multiples of 32. Returns the padded pixels and the original size.
pub fn load_padded_rgb(path: &Path) -> Result<(Vec<u8>, usize, usize, (usize, usize))> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Invalid(format!("{}: empty image", path.display())));
    }
    let (out, ph, pw) = pad_rgb(img.as_raw(), h, w)?;
    Ok((out, ph, pw, (h, w)))
}

/// Zero-pads an interleaved RGB image on the bottom and right to multiples of 32.
pub fn pad_rgb(rgb: &[u8], h: usize, w: usize) -> Result<(Vec<u8>, usize, usize)> {
    if h == 0 || w == 0 || rgb.len() != h * w * 3 {
        return Err(Error::Invalid(format!(
            "pad_rgb: {} bytes for a {h}x{w} RGB image",
            rgb.len()
        )));
    }
    let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
    let mut out = vec![0u8; ph * pw * 3];
    for y in 0..h {
        out[y * pw * 3..y * pw * 3 + w * 3].copy_from_slice(&rgb[y * w * 3..(y + 1) * w * 3]);
    }
    Ok((out, ph, pw))
}

pub fn save_rgb_png(path: &Path, rgb: &[u8], height: usize, width: usize) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, rgb.to_vec())
        .ok_or_else(|| Error::Invalid("pixel buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_caption_character_has_a_glyph() {
        for s in ["circle", "rectangle", "triangle", "0.123456789"] {
            assert!(s.chars().all(|c| glyph(c).is_some()), "{s}");
        }
    }
}
