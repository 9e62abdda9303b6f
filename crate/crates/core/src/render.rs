//! Rasterisation of landmark frames into RGB pose-guidance images.
//!
//! Groups are drawn as 1-pixel Bresenham polylines. The lips are drawn last
//! in their own colours so that no other group can cover a lip pixel.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FaceTopology, LandmarkFrame, LandmarkSequence};

pub type Rgb = [u8; 3];

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// A rendered landmark frame.
pub type PoseImage = Image;

impl Image {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: color.repeat(width * height),
        }
    }

    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "{}×{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: Rgb) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&c);
    }

    /// Sets the pixel when `(x, y)` lies inside the frame.
    pub fn put_clipped(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.put(x as usize, y as usize, c);
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.pixels.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::dim("image buffer size"))?;
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_raw(w as usize, h as usize, img.into_raw())
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Self::filled(width, height, [0, 0, 0]);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                out.put(x, y, self.get(sx, sy));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderStyle {
    pub image_size: usize,
    pub background: Rgb,
    pub group_color: Rgb,
    pub upper_lip_color: Rgb,
    pub lower_lip_color: Rgb,
    pub line_thickness: usize,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            image_size: 64,
            background: [0, 0, 0],
            group_color: [255, 255, 255],
            upper_lip_color: [255, 0, 0],
            lower_lip_color: [0, 0, 255],
            line_thickness: 1,
        }
    }
}

impl RenderStyle {
    pub fn with_size(image_size: usize) -> Self {
        Self {
            image_size,
            ..Self::default()
        }
    }

    pub fn color_for(&self, group: &str) -> Rgb {
        match group {
            "upper_lip" => self.upper_lip_color,
            "lower_lip" => self.lower_lip_color,
            _ => self.group_color,
        }
    }

    /// Lip colours must differ from each other, the other groups and the background.
    pub fn validate(&self) -> Result<()> {
        let (u, l) = (self.upper_lip_color, self.lower_lip_color);
        if self.image_size == 0 {
            return Err(Error::Config("render.image_size must be positive".into()));
        }
        if self.line_thickness != 1 {
            return Err(Error::Config("only 1-pixel lines are supported".into()));
        }
        if u == l || [u, l].iter().any(|c| *c == self.group_color || *c == self.background) {
            return Err(Error::Config("lip colours must be distinct".into()));
        }
        Ok(())
    }
}

// Keeps Bresenham walks bounded for wildly out-of-frame coordinates.
const COORD_LIMIT: f64 = (1u64 << 24) as f64;

fn to_pixel(p: [f64; 2]) -> (i64, i64) {
    (
        p[0].round().clamp(-COORD_LIMIT, COORD_LIMIT) as i64,
        p[1].round().clamp(-COORD_LIMIT, COORD_LIMIT) as i64,
    )
}

fn draw_segment(image: &mut Image, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb) {
    let (w, h) = (image.width as i64, image.height as i64);
    if x0.max(x1) < 0 || y0.max(y1) < 0 || x0.min(x1) >= w || y0.min(y1) >= h {
        return;
    }
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    loop {
        image.put_clipped(x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Connects consecutive points (rounded to the nearest pixel) with
/// Bresenham segments; `closed` adds the last→first segment. Pixels outside
/// the frame are dropped.
pub fn draw_polyline(image: &mut Image, points: &[[f64; 2]], color: Rgb, closed: bool) {
    let px: Vec<(i64, i64)> = points.iter().copied().map(to_pixel).collect();
    match px.len() {
        0 => {}
        1 => draw_segment(image, px[0], px[0], color),
        n => {
            for i in 0..n - 1 {
                draw_segment(image, px[i], px[i + 1], color);
            }
            if closed && n > 2 {
                draw_segment(image, px[n - 1], px[0], color);
            }
        }
    }
}

fn is_lip(name: &str) -> bool {
    name == "upper_lip" || name == "lower_lip"
}

pub fn render_pose_image(lmk: &LandmarkFrame, topology: &FaceTopology, style: &RenderStyle) -> Result<PoseImage> {
    if lmk.len() != topology.n_points {
        return Err(Error::Topology(format!(
            "{} landmarks for a {}-point topology",
            lmk.len(),
            topology.n_points
        )));
    }
    let mut img = Image::filled(style.image_size, style.image_size, style.background);
    let non_lips = topology.groups.iter().filter(|g| !is_lip(g.name));
    let lips = ["upper_lip", "lower_lip"]
        .into_iter()
        .filter_map(|n| topology.groups.iter().find(|g| g.name == n));
    for g in non_lips.chain(lips) {
        draw_polyline(&mut img, &lmk.points[g.indices()], style.color_for(g.name), g.closed);
    }
    Ok(img)
}

pub fn render_sequence(
    lmks: &LandmarkSequence,
    topology: &FaceTopology,
    style: &RenderStyle,
) -> Result<Vec<PoseImage>> {
    lmks.frames
        .iter()
        .enumerate()
        .map(|(t, f)| render_pose_image(f, topology, style).map_err(|e| e.at_frame(t)))
        .collect()
}
