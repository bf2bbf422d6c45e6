//! PNG rendering of rain fields.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geo::RainField;

/// Colour stops of the rain colormap at fractions 0, 1/4, 1/2, 3/4 and 1 of
/// the scale maximum: white, pale blue, blue, yellow, red. Values are
/// interpolated linearly in RGB between stops and clamped at both ends.
pub const COLORMAP: [[u8; 3]; 5] = [[255, 255, 255], [170, 210, 255], [40, 110, 220], [250, 210, 40], [200, 20, 20]];

/// Station marker colour.
pub const MARKER: [u8; 3] = [0, 0, 0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorScale {
    /// Rain rate (mm/h) mapped to the last colour stop.
    pub max: f64,
    /// Pixels per grid cell along each axis.
    pub pixel: usize,
}

impl Default for ColorScale {
    fn default() -> Self {
        Self { max: 20.0, pixel: 8 }
    }
}

pub fn colormap(value: f64, max: f64) -> [u8; 3] {
    let f = if max > 0.0 { (value / max).clamp(0.0, 1.0) } else { 0.0 };
    let pos = f * (COLORMAP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(COLORMAP.len() - 2);
    let w = pos - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    let mix = |k: usize| (a[k] as f64 + (b[k] as f64 - a[k] as f64) * w).round() as u8;
    [mix(0), mix(1), mix(2)]
}

/// RGB pixels (row-major, north up) of `field` with a square marker at every
/// station inside the grid.
pub fn heatmap_pixels(field: &RainField, stations: &[(f64, f64)], scale: ColorScale) -> Result<(usize, usize, Vec<u8>)> {
    if scale.pixel == 0 || !(scale.max > 0.0) {
        return Err(Error::Config("heatmap needs a positive pixel size and scale maximum".into()));
    }
    if field.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("cannot render a field with non-finite values".into()));
    }
    let g = field.georef;
    let (w, h) = (g.width * scale.pixel, g.height * scale.pixel);
    let mut px = vec![0u8; w * h * 3];
    for y in 0..h {
        // grid row 0 is the southern edge
        let row = g.height - 1 - y / scale.pixel;
        for x in 0..w {
            let c = colormap(field.at(row, x / scale.pixel), scale.max);
            px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    let half = (scale.pixel / 4).max(1) as isize;
    for &(sx, sy) in stations {
        if !g.contains(sx, sy) {
            continue;
        }
        let (fr, fc) = g.fractional_index(sx, sy);
        let cx = ((fc + 0.5) * scale.pixel as f64).floor() as isize;
        let cy = h as isize - 1 - ((fr + 0.5) * scale.pixel as f64).floor() as isize;
        for dy in -half..=half {
            for dx in -half..=half {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    let i = (y as usize * w + x as usize) * 3;
                    px[i..i + 3].copy_from_slice(&MARKER);
                }
            }
        }
    }
    Ok((w, h, px))
}

/// Writes the heatmap as an 8-bit RGB PNG.
pub fn render_heatmap(field: &RainField, stations: &[(f64, f64)], path: impl AsRef<Path>, scale: ColorScale) -> Result<()> {
    let path = path.as_ref();
    let (w, h, px) = heatmap_pixels(field, stations, scale)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&px).map_err(to_io)?;
    writer.finish().map_err(to_io)
}
