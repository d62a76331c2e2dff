use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::style::TypingStyle;
use super::trajectory::TrajectorySample;
use crate::error::{Error, Result};
use crate::keyboard::{KeyboardLayout, Point};

const BASE: f32 = 0.2;
const KEY_CAP: f32 = 0.45;
const KEY_PRESSED: f32 = 0.7;
const THUMB: f32 = 0.95;
/// Gap between neighbouring key caps, keyboard units.
const KEY_INSET: f64 = 0.08;
/// Sub-pixel samples per axis for disc coverage.
const SUPERSAMPLE: usize = 4;

/// A stack of equally sized grayscale frames, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FrameStack {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: Vec::new() }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        if self.frame_len() == 0 {
            0
        } else {
            self.data.len() / self.frame_len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.frame_len()..(i + 1) * self.frame_len()]
    }

    pub fn push(&mut self, frame: &[f32]) {
        assert_eq!(frame.len(), self.frame_len(), "frame size mismatch");
        self.data.extend_from_slice(frame);
    }
}

/// Rasterises the keyboard region at a fixed resolution.
#[derive(Clone, Debug)]
pub struct Renderer {
    layout: KeyboardLayout,
    height: usize,
    width: usize,
    background: Vec<f32>,
}

impl Renderer {
    pub fn new(layout: KeyboardLayout, height: usize, width: usize) -> Result<Self> {
        if height < 4 || width < 4 {
            return Err(Error::InvalidArgument(format!("frame size {height}x{width} is too small")));
        }
        let mut r = Self { layout, height, width, background: Vec::new() };
        r.background = r.keys_image(None);
        Ok(r)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layout(&self) -> &KeyboardLayout {
        &self.layout
    }

    /// The keyboard with no thumb and no key pressed.
    pub fn background(&self) -> &[f32] {
        &self.background
    }

    fn scale(&self) -> (f64, f64) {
        (self.width as f64 / self.layout.width(), self.height as f64 / self.layout.height())
    }

    /// Keyboard point to continuous pixel coordinates (column, row).
    pub fn project(&self, p: Point) -> (f64, f64) {
        let (sx, sy) = self.scale();
        (p.x * sx, p.y * sy)
    }

    fn keys_image(&self, pressed: Option<char>) -> Vec<f32> {
        let (sx, sy) = self.scale();
        let mut img = vec![BASE; self.height * self.width];
        for (c, k) in self.layout.keys() {
            let v = if Some(c) == pressed { KEY_PRESSED } else { KEY_CAP };
            let x0 = ((k.center.x - k.width / 2.0 + KEY_INSET) * sx).round().max(0.0) as usize;
            let x1 = ((k.center.x + k.width / 2.0 - KEY_INSET) * sx).round().min(self.width as f64) as usize;
            let y0 = ((k.center.y - k.height / 2.0 + KEY_INSET) * sy).round().max(0.0) as usize;
            let y1 = ((k.center.y + k.height / 2.0 - KEY_INSET) * sy).round().min(self.height as f64) as usize;
            for y in y0..y1 {
                img[y * self.width + x0..y * self.width + x1].fill(v);
            }
        }
        img
    }

    /// One frame: keyboard, optional pressed-key highlight, thumb disc, then
    /// the style's brightness/contrast/noise perturbation.
    pub fn render_frame(
        &self,
        thumb: Point,
        pressed: Option<char>,
        style: &TypingStyle,
        rng: &mut impl Rng,
    ) -> Vec<f32> {
        let mut img = match pressed {
            Some(c) => self.keys_image(Some(c)),
            None => self.background.clone(),
        };
        let (cx, cy) = self.project(thumb);
        let (sx, sy) = self.scale();
        let (rx, ry) = (style.thumb_radius * sx, style.thumb_radius * sy);
        let rows = ((cy - ry).floor().max(0.0) as usize)..((cy + ry).ceil().min(self.height as f64) as usize);
        let cols = ((cx - rx).floor().max(0.0) as usize)..((cx + rx).ceil().min(self.width as f64) as usize);
        let step = 1.0 / SUPERSAMPLE as f64;
        for y in rows {
            for x in cols.clone() {
                let mut hits = 0;
                for a in 0..SUPERSAMPLE {
                    for b in 0..SUPERSAMPLE {
                        let px = x as f64 + (a as f64 + 0.5) * step;
                        let py = y as f64 + (b as f64 + 0.5) * step;
                        if ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0 {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let cov = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                    let v = &mut img[y * self.width + x];
                    *v = *v * (1.0 - cov) + THUMB * cov;
                }
            }
        }
        let j = style.texture_jitter;
        if j > 0.0 {
            let brightness = rng.gen_range(-0.3 * j..=0.3 * j) as f32;
            let contrast = rng.gen_range(1.0 - 0.5 * j..=1.0 + 0.5 * j) as f32;
            let noise = Normal::new(0.0, 0.08 * j).expect("positive sigma");
            for v in img.iter_mut() {
                let n = noise.sample(rng) as f32;
                *v = ((*v - 0.5) * contrast + 0.5 + brightness + n).clamp(0.0, 1.0);
            }
        }
        img
    }

    pub fn render_frames(&self, traj: &TrajectorySample, style: &TypingStyle, rng: &mut impl Rng) -> FrameStack {
        let mut out = FrameStack::empty(self.height, self.width);
        out.data.reserve(traj.len() * self.height * self.width);
        for (&p, pressed) in traj.positions.iter().zip(traj.pressed_per_frame()) {
            out.data.extend(self.render_frame(p, pressed, style, rng));
        }
        out
    }
}
