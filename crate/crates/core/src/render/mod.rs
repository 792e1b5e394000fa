//! The visual prompt generator's drawing half: turns grounded points and
//! segmentation masks into markers and rasterizes them over the original
//! image.
//!
//! Rasterization is integer-only with no anti-aliasing, so the same inputs
//! give the same bytes everywhere.

pub mod codec;
pub mod rle;

use std::sync::Arc;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{MarkerShape, ToolCall};
pub use codec::{decode_image, encode_png, ImageCodecError};
pub use rle::{rle_decode, rle_encode, Bitmap, MaskRle, PixelBox, RleError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RenderError {
    #[error("marker {index} is out of bounds: {reason}")]
    GeometryOutOfBounds { index: usize, reason: String },
    #[error("image has zero width or height")]
    ZeroSizeImage,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComposeError {
    #[error("only flag=true tool calls are rendered")]
    NotAVerificationCall,
    #[error("no grounded points and no mask")]
    NoEvidence,
    #[error("shape `mask` needs a segmentation mask")]
    ShapeMaskMismatch,
    #[error("mask is {mask_w}x{mask_h} but the image is {image_w}x{image_h}")]
    MaskDimensions { mask_w: u32, mask_h: u32, image_w: u32, image_h: u32 },
    #[error("point ({x}, {y}) lies outside the unit square")]
    PointOutOfRange { x: f64, y: f64 },
    #[error(transparent)]
    Rle(#[from] RleError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Image-relative position; `x` across, `y` down, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }

    pub fn from_pixel(px: u32, py: u32, width: u32, height: u32) -> Self {
        Point { x: px as f64 / width as f64, y: py as f64 / height as f64 }
    }

    pub fn to_pixel(&self, width: u32, height: u32) -> (u32, u32) {
        (frac_to_px(self.x, width), frac_to_px(self.y, height))
    }
}

// The epsilon absorbs float error on the pixel -> fraction -> pixel path.
fn frac_to_px(v: f64, n: u32) -> u32 {
    let p = (v * n as f64 + 1e-6).floor();
    (p.max(0.0) as u32).min(n.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Point { center: Point, radius_px: u32 },
    Circle { center: Point, radius_px: u32 },
    Ellipse { center: Point, semi_axes_px: [u32; 2], rotation_rad: f64 },
    Box { corners: [Point; 2] },
    Mask { mask: MaskRle },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub shape: MarkerShape,
    /// RGBA; alpha only affects mask fills.
    pub color: [u8; 4],
    pub geometry: Geometry,
    pub anchor_text: String,
    pub round_index: u32,
}

impl Marker {
    fn check(&self, index: usize, width: u32, height: u32) -> Result<(), RenderError> {
        let fail = |reason: &str| {
            Err(RenderError::GeometryOutOfBounds { index, reason: reason.to_string() })
        };
        let shape_matches = matches!(
            (&self.geometry, self.shape),
            (Geometry::Point { .. }, MarkerShape::Point)
                | (Geometry::Circle { .. }, MarkerShape::Circle)
                | (Geometry::Ellipse { .. }, MarkerShape::Ellipse)
                | (Geometry::Box { .. }, MarkerShape::Box)
                | (Geometry::Mask { .. }, MarkerShape::Mask)
        );
        if !shape_matches {
            return fail("geometry does not match shape");
        }
        match &self.geometry {
            Geometry::Point { center, radius_px } | Geometry::Circle { center, radius_px } => {
                if !center.in_unit_square() {
                    return fail("center outside [0,1]^2");
                }
                if *radius_px == 0 {
                    return fail("radius must be positive");
                }
            }
            Geometry::Ellipse { center, semi_axes_px, rotation_rad } => {
                if !center.in_unit_square() {
                    return fail("center outside [0,1]^2");
                }
                if semi_axes_px.contains(&0) {
                    return fail("semi-axes must be positive");
                }
                if !rotation_rad.is_finite() {
                    return fail("rotation must be finite");
                }
            }
            Geometry::Box { corners } => {
                if !corners.iter().all(Point::in_unit_square) {
                    return fail("corner outside [0,1]^2");
                }
            }
            Geometry::Mask { mask } => {
                if mask.width != width || mask.height != height {
                    return fail("mask dimensions differ from the image");
                }
                if mask.validate().is_err() {
                    return fail("mask runs are invalid");
                }
            }
        }
        Ok(())
    }
}

/// Marker sizing. Unset sizes derive from the image: the point radius and
/// stroke width default to `max(3, min(w, h) / 100)` pixels, and the
/// per-point circle radius to four times the point radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    pub point_radius_px: Option<u32>,
    pub circle_radius_px: Option<u32>,
    pub stroke_px: Option<u32>,
    pub mask_alpha: u8,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle { point_radius_px: None, circle_radius_px: None, stroke_px: None, mask_alpha: 128 }
    }
}

impl RenderStyle {
    fn base_size(width: u32, height: u32) -> u32 {
        (width.min(height) / 100).max(3)
    }

    pub fn point_radius(&self, width: u32, height: u32) -> u32 {
        self.point_radius_px.unwrap_or_else(|| Self::base_size(width, height)).max(1)
    }

    pub fn stroke(&self, width: u32, height: u32) -> u32 {
        self.stroke_px.unwrap_or_else(|| Self::base_size(width, height)).max(1)
    }

    pub fn circle_radius(&self, width: u32, height: u32) -> u32 {
        self.circle_radius_px.unwrap_or_else(|| 4 * self.point_radius(width, height)).max(1)
    }
}

fn blend(dst: &mut Rgb<u8>, color: [u8; 4], alpha: u8) {
    let a = alpha as u32;
    for (d, &c) in dst.0.iter_mut().zip(&color[..3]) {
        *d = ((c as u32 * a + *d as u32 * (255 - a) + 127) / 255) as u8;
    }
}

fn paint(img: &mut RgbImage, x: i64, y: i64, color: [u8; 4]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        let px = img.get_pixel_mut(x as u32, y as u32);
        px.0 = [color[0], color[1], color[2]];
    }
}

/// Inside test for an axis-aligned ellipse after rotating `(dx, dy)` into
/// its frame. `cos`/`sin` are 16.16 fixed point.
fn in_ellipse(dx: i64, dy: i64, a: i64, b: i64, cos: i64, sin: i64) -> bool {
    if a <= 0 || b <= 0 {
        return false;
    }
    let u = (dx * cos + dy * sin) as i128;
    let v = (-dx * sin + dy * cos) as i128;
    let (a2, b2) = ((a * a) as i128, (b * b) as i128);
    u * u * b2 + v * v * a2 <= a2 * b2 * (1i128 << 32)
}

fn draw_ring(img: &mut RgbImage, cx: i64, cy: i64, axes: (i64, i64), rotation: f64, stroke: i64, color: [u8; 4]) {
    let (a, b) = axes;
    let cos = (rotation.cos() * 65536.0).round() as i64;
    let sin = (rotation.sin() * 65536.0).round() as i64;
    let reach = a.max(b);
    for y in (cy - reach)..=(cy + reach) {
        for x in (cx - reach)..=(cx + reach) {
            let (dx, dy) = (x - cx, y - cy);
            if in_ellipse(dx, dy, a, b, cos, sin)
                && !in_ellipse(dx, dy, a - stroke, b - stroke, cos, sin)
            {
                paint(img, x, y, color);
            }
        }
    }
}

fn draw_disc(img: &mut RgbImage, cx: i64, cy: i64, r: i64, color: [u8; 4]) {
    for y in (cy - r)..=(cy + r) {
        for x in (cx - r)..=(cx + r) {
            let (dx, dy) = (x - cx, y - cy);
            if dx * dx + dy * dy <= r * r {
                paint(img, x, y, color);
            }
        }
    }
}

fn draw_box(img: &mut RgbImage, corners: [(i64, i64); 2], stroke: i64, color: [u8; 4]) {
    let (x0, x1) = (corners[0].0.min(corners[1].0), corners[0].0.max(corners[1].0));
    let (y0, y1) = (corners[0].1.min(corners[1].1), corners[0].1.max(corners[1].1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            if x < x0 + stroke || x > x1 - stroke || y < y0 + stroke || y > y1 - stroke {
                paint(img, x, y, color);
            }
        }
    }
}

fn draw_mask(img: &mut RgbImage, mask: &Bitmap, stroke: u32, color: [u8; 4]) {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    // Summed-area table: a pixel is interior when the (2s+1)^2 window
    // around it lies inside the image and inside the mask.
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += mask.bits()[y * w + x] as u32;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let s = stroke as usize;
    let full = ((2 * s + 1) * (2 * s + 1)) as u32;
    for y in 0..h {
        for x in 0..w {
            if !mask.bits()[y * w + x] {
                continue;
            }
            let interior = x >= s && y >= s && x + s < w && y + s < h && {
                let (xa, ya, xb, yb) = (x - s, y - s, x + s + 1, y + s + 1);
                sat[yb * (w + 1) + xb] + sat[ya * (w + 1) + xa]
                    - sat[ya * (w + 1) + xb]
                    - sat[yb * (w + 1) + xa]
                    == full
            };
            let px = img.get_pixel_mut(x as u32, y as u32);
            if interior {
                blend(px, color, color[3]);
            } else {
                px.0 = [color[0], color[1], color[2]];
            }
        }
    }
}

/// Draws `markers` in order over a copy of `base`.
pub fn render_markers(base: &RgbImage, markers: &[Marker], style: &RenderStyle) -> Result<RgbImage, RenderError> {
    let (w, h) = base.dimensions();
    if w == 0 || h == 0 {
        return Err(RenderError::ZeroSizeImage);
    }
    for (i, m) in markers.iter().enumerate() {
        m.check(i, w, h)?;
    }

    let stroke = style.stroke(w, h) as i64;
    let px = |p: &Point| {
        let (x, y) = p.to_pixel(w, h);
        (x as i64, y as i64)
    };
    let mut out = base.clone();
    for marker in markers {
        let color = marker.color;
        match &marker.geometry {
            Geometry::Point { center, radius_px } => {
                let (x, y) = px(center);
                draw_disc(&mut out, x, y, *radius_px as i64, color);
            }
            Geometry::Circle { center, radius_px } => {
                let (x, y) = px(center);
                let r = *radius_px as i64;
                draw_ring(&mut out, x, y, (r, r), 0.0, stroke, color);
            }
            Geometry::Ellipse { center, semi_axes_px, rotation_rad } => {
                let (x, y) = px(center);
                let axes = (semi_axes_px[0] as i64, semi_axes_px[1] as i64);
                draw_ring(&mut out, x, y, axes, *rotation_rad, stroke, color);
            }
            Geometry::Box { corners } => {
                draw_box(&mut out, [px(&corners[0]), px(&corners[1])], stroke, color);
            }
            Geometry::Mask { mask } => {
                let bitmap = rle_decode(mask).expect("validated above");
                draw_mask(&mut out, &bitmap, stroke as u32, color);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlayMode {
    /// Each round draws only its own markers on the original image.
    #[default]
    Fresh,
    /// Each round draws over all markers from earlier rounds.
    Cumulative,
}

/// The image a turn sees, plus how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualContext {
    pub base_image: Arc<RgbImage>,
    pub markers: Vec<Marker>,
    pub rendered: Arc<RgbImage>,
    pub round_index: u32,
}

impl VisualContext {
    /// Round 0: the bare input image.
    pub fn initial(base: Arc<RgbImage>) -> Self {
        VisualContext { rendered: base.clone(), base_image: base, markers: Vec::new(), round_index: 0 }
    }

    /// Same picture, relabelled for a later round.
    pub fn carried_to(&self, round_index: u32) -> Self {
        VisualContext { round_index, ..self.clone() }
    }
}

fn build_markers(
    call: &ToolCall,
    points: &[Point],
    mask: Option<(&MaskRle, PixelBox)>,
    round_index: u32,
    width: u32,
    height: u32,
    style: &RenderStyle,
) -> Result<Vec<Marker>, ComposeError> {
    let [r, g, b] = call.color.rgb();
    let marker = |geometry: Geometry, alpha: u8| Marker {
        shape: call.shape,
        color: [r, g, b, alpha],
        geometry,
        anchor_text: call.anchor.clone(),
        round_index,
    };
    let point_radius = style.point_radius(width, height);
    let circle_radius = style.circle_radius(width, height);
    let bbox_center = |bb: PixelBox| Point::from_pixel((bb.x0 + bb.x1) / 2, (bb.y0 + bb.y1) / 2, width, height);

    let markers = match (call.shape, mask) {
        (MarkerShape::Point, _) => points
            .iter()
            .map(|p| marker(Geometry::Point { center: *p, radius_px: point_radius }, 255))
            .collect(),
        (MarkerShape::Circle, Some((_, bb))) => {
            let (bw, bh) = (bb.width() as f64, bb.height() as f64);
            let radius_px = ((bw * bw + bh * bh).sqrt() / 2.0).ceil() as u32;
            vec![marker(Geometry::Circle { center: bbox_center(bb), radius_px }, 255)]
        }
        (MarkerShape::Circle, None) => points
            .iter()
            .map(|p| marker(Geometry::Circle { center: *p, radius_px: circle_radius }, 255))
            .collect(),
        (MarkerShape::Ellipse, Some((_, bb))) => {
            let semi_axes_px = [bb.width().div_ceil(2), bb.height().div_ceil(2)];
            vec![marker(
                Geometry::Ellipse { center: bbox_center(bb), semi_axes_px, rotation_rad: 0.0 },
                255,
            )]
        }
        (MarkerShape::Ellipse, None) => points
            .iter()
            .map(|p| {
                marker(
                    Geometry::Ellipse {
                        center: *p,
                        semi_axes_px: [circle_radius, circle_radius],
                        rotation_rad: 0.0,
                    },
                    255,
                )
            })
            .collect(),
        (MarkerShape::Box, Some((_, bb))) => {
            let corners = [
                Point::from_pixel(bb.x0, bb.y0, width, height),
                Point::from_pixel(bb.x1, bb.y1, width, height),
            ];
            vec![marker(Geometry::Box { corners }, 255)]
        }
        (MarkerShape::Box, None) => {
            let pixels: Vec<(u32, u32)> = points.iter().map(|p| p.to_pixel(width, height)).collect();
            let pad = point_radius;
            let x0 = pixels.iter().map(|p| p.0).min().unwrap_or(0).saturating_sub(pad);
            let y0 = pixels.iter().map(|p| p.1).min().unwrap_or(0).saturating_sub(pad);
            let x1 = (pixels.iter().map(|p| p.0).max().unwrap_or(0) + pad).min(width - 1);
            let y1 = (pixels.iter().map(|p| p.1).max().unwrap_or(0) + pad).min(height - 1);
            let corners = [
                Point::from_pixel(x0, y0, width, height),
                Point::from_pixel(x1, y1, width, height),
            ];
            vec![marker(Geometry::Box { corners }, 255)]
        }
        (MarkerShape::Mask, Some((m, _))) => {
            vec![marker(Geometry::Mask { mask: m.clone() }, style.mask_alpha)]
        }
        (MarkerShape::Mask, None) => return Err(ComposeError::ShapeMaskMismatch),
    };
    Ok(markers)
}

/// Builds this round's markers from grounding evidence and renders the new
/// visual context over the original image.
#[allow(clippy::too_many_arguments)]
pub fn compose_visual_context(
    base: &Arc<RgbImage>,
    call: &ToolCall,
    points: &[Point],
    mask: Option<&MaskRle>,
    round_index: u32,
    mode: OverlayMode,
    prior: Option<&VisualContext>,
    style: &RenderStyle,
) -> Result<VisualContext, ComposeError> {
    if !call.flag {
        return Err(ComposeError::NotAVerificationCall);
    }
    let (width, height) = base.dimensions();
    if width == 0 || height == 0 {
        return Err(RenderError::ZeroSizeImage.into());
    }
    if let Some(p) = points.iter().find(|p| !p.in_unit_square()) {
        return Err(ComposeError::PointOutOfRange { x: p.x, y: p.y });
    }

    let mask_with_box = match mask {
        Some(m) => {
            if m.width != width || m.height != height {
                return Err(ComposeError::MaskDimensions {
                    mask_w: m.width,
                    mask_h: m.height,
                    image_w: width,
                    image_h: height,
                });
            }
            rle_decode(m)?.bounding_box().map(|bb| (m, bb))
        }
        None => None,
    };
    if call.shape == MarkerShape::Mask && mask.is_none() {
        return Err(ComposeError::ShapeMaskMismatch);
    }
    if points.is_empty() && mask_with_box.is_none() {
        return Err(ComposeError::NoEvidence);
    }
    // A point-shaped call only ever uses the points.
    if call.shape == MarkerShape::Point && points.is_empty() {
        return Err(ComposeError::NoEvidence);
    }

    let fresh = build_markers(call, points, mask_with_box, round_index, width, height, style)?;
    let markers = match (mode, prior) {
        (OverlayMode::Cumulative, Some(prev)) => prev.markers.iter().cloned().chain(fresh).collect(),
        _ => fresh,
    };
    let rendered = render_markers(base, &markers, style)?;
    Ok(VisualContext {
        base_image: base.clone(),
        markers,
        rendered: Arc::new(rendered),
        round_index,
    })
}
