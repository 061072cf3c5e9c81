//! Static PNG export of a GridStack channel with a JSON sidecar.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nslk_core::{Error, GridStack, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    Gray,
    Viridis,
    Coolwarm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NanStyle {
    /// Fully transparent pixel.
    Transparent,
    /// Opaque magenta.
    Sentinel,
}

const SENTINEL: [u8; 4] = [255, 0, 255, 255];

const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

const COOLWARM: [[f64; 3]; 3] = [[59.0, 76.0, 192.0], [221.0, 221.0, 221.0], [180.0, 4.0, 38.0]];

impl Colormap {
    /// Color at `t ∈ [0, 1]`, linear between anchors.
    pub fn color(self, t: f64) -> [u8; 4] {
        let t = t.clamp(0.0, 1.0);
        let ramp = |anchors: &[[f64; 3]]| {
            let x = t * (anchors.len() - 1) as f64;
            let i = (x.floor() as usize).min(anchors.len() - 2);
            let f = x - i as f64;
            let c = |k: usize| (anchors[i][k] + f * (anchors[i + 1][k] - anchors[i][k])).round() as u8;
            [c(0), c(1), c(2), 255]
        };
        match self {
            Colormap::Gray => {
                let v = (255.0 * t).round() as u8;
                [v, v, v, 255]
            }
            Colormap::Viridis => ramp(&VIRIDIS),
            Colormap::Coolwarm => ramp(&COOLWARM),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSidecar {
    pub channel: String,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub height: usize,
    pub width: usize,
    pub colormap: Colormap,
    pub nan_style: NanStyle,
    pub nan_pixels: usize,
    /// Image row 0 is the northernmost raster row.
    pub orientation: String,
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// RGBA pixels, image rows top (max y) to bottom.
pub fn rasterize(values: &[f64], height: usize, width: usize, cmap: Colormap, nan: NanStyle) -> (Vec<u8>, Option<(f64, f64)>) {
    let range = values
        .iter()
        .filter(|v| v.is_finite())
        .fold(None, |acc: Option<(f64, f64)>, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        });
    let mut rgba = Vec::with_capacity(height * width * 4);
    for img_row in 0..height {
        let r = height - 1 - img_row;
        for c in 0..width {
            let v = values[r * width + c];
            let px = if !v.is_finite() {
                match nan {
                    NanStyle::Transparent => [0, 0, 0, 0],
                    NanStyle::Sentinel => SENTINEL,
                }
            } else {
                let (lo, hi) = range.unwrap();
                let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                cmap.color(t)
            };
            rgba.extend_from_slice(&px);
        }
    }
    (rgba, range)
}

/// Writes an 8-bit RGBA PNG of `channel` and a sidecar JSON with its range.
pub fn render_png(stack: &GridStack, channel: &str, cmap: Colormap, nan: NanStyle, out: &Path) -> Result<RenderSidecar> {
    let values = stack.channel(channel)?;
    let grid = stack.grid();
    let (rgba, range) = rasterize(values, grid.height, grid.width, cmap, nan);
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), grid.width as u32, grid.height as u32);
    enc.set_color(png::ColorType::Rgba);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Format(format!("cannot write PNG header: {e}")))?;
    w.write_image_data(&rgba)
        .map_err(|e| Error::Format(format!("cannot write PNG data: {e}")))?;
    w.finish()
        .map_err(|e| Error::Format(format!("cannot finish PNG: {e}")))?;
    let sidecar = RenderSidecar {
        channel: channel.to_string(),
        min: range.map(|r| r.0),
        max: range.map(|r| r.1),
        height: grid.height,
        width: grid.width,
        colormap: cmap,
        nan_style: nan,
        nan_pixels: values.iter().filter(|v| !v.is_finite()).count(),
        orientation: "north-up".into(),
    };
    let side = sidecar_path(out);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(sidecar)
}
