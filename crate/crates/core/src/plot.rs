//! Minimal headless bar charts written as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const POSITIVE: Rgb<u8> = Rgb([52, 101, 164]);
const NEGATIVE: Rgb<u8> = Rgb([204, 80, 62]);

#[derive(Debug, Clone, Copy)]
pub struct BarChartStyle {
    pub bar_width: u32,
    pub gap: u32,
    pub height: u32,
    pub margin: u32,
}

impl Default for BarChartStyle {
    fn default() -> Self {
        Self {
            bar_width: 24,
            gap: 8,
            height: 240,
            margin: 16,
        }
    }
}

/// Renders one bar per value. Bars grow up from a zero axis for positive
/// values and down for negative ones; the scale is the largest magnitude.
pub fn bar_chart(values: &[f64], style: BarChartStyle) -> Result<RgbImage> {
    if values.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot plot non-finite values"));
    }
    let n = values.len() as u32;
    let width = 2 * style.margin + n * style.bar_width + (n - 1) * style.gap;
    let mut img = RgbImage::from_pixel(width, style.height, BACKGROUND);

    let has_neg = values.iter().any(|&v| v < 0.0);
    let has_pos = values.iter().any(|&v| v > 0.0);
    let plot_h = style.height - 2 * style.margin;
    let zero_y = match (has_pos, has_neg) {
        (_, false) => style.margin + plot_h,
        (false, true) => style.margin,
        (true, true) => style.margin + plot_h / 2,
    };
    let span = if has_pos && has_neg { plot_h / 2 } else { plot_h } as f64;
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    for (i, &v) in values.iter().enumerate() {
        let x0 = style.margin + i as u32 * (style.bar_width + style.gap);
        let len = if scale > 0.0 { (v.abs() / scale * span).round() as u32 } else { 0 };
        let (y0, y1, colour) = if v >= 0.0 {
            (zero_y.saturating_sub(len), zero_y, POSITIVE)
        } else {
            (zero_y, zero_y + len, NEGATIVE)
        };
        for x in x0..x0 + style.bar_width {
            for y in y0..y1 {
                img.put_pixel(x, y, colour);
            }
        }
    }
    for x in style.margin / 2..width - style.margin / 2 {
        img.put_pixel(x, zero_y.min(style.height - 1), AXIS);
    }
    Ok(img)
}

pub fn write_bar_chart(path: &Path, values: &[f64]) -> Result<()> {
    bar_chart(values, BarChartStyle::default())?.save(path)?;
    Ok(())
}
