use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, RgbImage};

use super::{Mask, RenderError};

pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<(), RenderError> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .ok_or_else(|| RenderError::Dimension("mask buffer size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads an 8-bit image as a label mask. Colour images are converted to luma,
/// which is only meaningful for grayscale-encoded labels.
pub fn read_mask_png(path: &Path) -> Result<Mask, RenderError> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Mask::from_vec(w as usize, h as usize, img.into_raw())
}

pub fn write_rgb_png(width: usize, height: usize, rgb: Vec<u8>, path: &Path) -> Result<(), RenderError> {
    let img = RgbImage::from_raw(width as u32, height as u32, rgb)
        .ok_or_else(|| RenderError::Dimension("rgb buffer size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaletteEntry {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

/// Sidecar text mapping mask values to names and colours, one
/// `id name r g b` line per entry; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Palette {
    pub entries: Vec<PaletteEntry>,
}

impl Palette {
    pub fn color(&self, id: u8) -> Option<[u8; 3]> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.color)
    }

    /// Background plus one entry per name, coloured by a fixed hue walk.
    pub fn for_names<S: AsRef<str>>(names: &[S]) -> Palette {
        let mut entries = vec![PaletteEntry { id: 0, name: "background".into(), color: [0, 0, 0] }];
        for (i, name) in names.iter().enumerate() {
            let hue = (i as f64 * 137.508) % 360.0;
            entries.push(PaletteEntry { id: (i + 1) as u8, name: name.as_ref().to_string(), color: hsv(hue, 0.65, 0.95) });
        }
        Palette { entries }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{} {} {} {} {}", e.id, e.name, e.color[0], e.color[1], e.color[2]);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Palette, RenderError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| RenderError::Palette { line: i + 1, msg: msg.to_string() };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(err("expected `id name r g b`"));
            }
            let num = |s: &str| s.parse::<u8>().map_err(|_| err(&format!("bad value {s:?}")));
            let id = num(fields[0])?;
            if entries.iter().any(|e: &PaletteEntry| e.id == id) {
                return Err(err("duplicate id"));
            }
            entries.push(PaletteEntry {
                id,
                name: fields[1].to_string(),
                color: [num(fields[2])?, num(fields[3])?, num(fields[4])?],
            });
        }
        Ok(Palette { entries })
    }

    /// Colourises a label mask; ids without an entry render grey.
    pub fn colorize(&self, mask: &Mask) -> Vec<u8> {
        let mut lut = [[128u8; 3]; 256];
        for e in &self.entries {
            lut[e.id as usize] = e.color;
        }
        mask.data().iter().flat_map(|&v| lut[v as usize]).collect()
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0).round() as u8, ((g + m) * 255.0).round() as u8, ((b + m) * 255.0).round() as u8]
}

pub fn write_palette(palette: &Palette, path: &Path) -> Result<(), RenderError> {
    std::fs::write(path, palette.to_text())?;
    Ok(())
}

pub fn read_palette(path: &Path) -> Result<Palette, RenderError> {
    Palette::parse(&std::fs::read_to_string(path)?)
}
