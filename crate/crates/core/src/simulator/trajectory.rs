use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::style::{TrajectoryKind, TypingStyle};
use crate::error::Result;
use crate::keyboard::{KeyboardLayout, Point};
use crate::vocab::{validate_sentence, MAX_PHRASE_LEN};

/// Press-frame noise is clipped to this radius so presses stay on their key.
const PRESS_NOISE_CLIP: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub sentence: String,
    pub positions: Vec<Point>,
    pub press_flags: Vec<bool>,
}

impl TrajectorySample {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Character pressed at each press frame, read back from the geometry.
    pub fn pressed_chars(&self, layout: &KeyboardLayout) -> String {
        self.positions
            .iter()
            .zip(&self.press_flags)
            .filter(|(_, &p)| p)
            .map(|(&pt, _)| key_at(layout, pt))
            .collect()
    }

    /// Which character is pressed on each frame, if any.
    pub fn pressed_per_frame(&self) -> Vec<Option<char>> {
        let mut chars = self.sentence.chars();
        self.press_flags.iter().map(|&p| if p { chars.next() } else { None }).collect()
    }
}

/// Key whose rectangle contains `p`, else the key with the nearest centre.
pub fn key_at(layout: &KeyboardLayout, p: Point) -> char {
    let mut best = (f64::INFINITY, ' ');
    for (c, k) in layout.keys() {
        if (p.x - k.center.x).abs() <= k.width / 2.0 && (p.y - k.center.y).abs() <= k.height / 2.0 {
            return c;
        }
        let d = p.dist(k.center);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Point at parameter `t` of the transition from `a` to `b`. `side` picks
/// which side of the chord a curved path bows towards.
pub fn transition_point(style: &TypingStyle, a: Point, b: Point, t: f64, side: f64) -> Point {
    match style.trajectory_kind {
        TrajectoryKind::Linear => a.lerp(b, t),
        TrajectoryKind::Curved => {
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len = (dx * dx + dy * dy).sqrt();
            if len == 0.0 {
                return a;
            }
            let (px, py) = (-dy / len, dx / len);
            let mid = a.lerp(b, 0.5);
            let off = side * style.curvature * len;
            let c = Point::new(mid.x + px * off, mid.y + py * off);
            let u = 1.0 - t;
            Point::new(
                u * u * a.x + 2.0 * u * t * c.x + t * t * b.x,
                u * u * a.y + 2.0 * u * t * c.y + t * t * b.y,
            )
        }
    }
}

pub fn generate_trajectory(
    sentence: &str,
    style: &TypingStyle,
    layout: &KeyboardLayout,
    rng: &mut impl Rng,
) -> Result<TrajectorySample> {
    validate_sentence(sentence, MAX_PHRASE_LEN - 2)?;
    style.validate()?;
    let noise = (style.path_noise_sigma > 0.0).then(|| Normal::new(0.0, style.path_noise_sigma).expect("sigma > 0"));
    let jitter = |rng: &mut dyn rand::RngCore, clip: Option<f64>| -> (f64, f64) {
        let Some(n) = &noise else { return (0.0, 0.0) };
        let (mut dx, mut dy) = (n.sample(rng), n.sample(rng));
        if let Some(c) = clip {
            let r = (dx * dx + dy * dy).sqrt();
            if r > c {
                dx *= c / r;
                dy *= c / r;
            }
        }
        (dx, dy)
    };
    let mut positions = Vec::new();
    let mut press_flags = Vec::new();
    let mut prev: Option<Point> = None;
    for c in sentence.chars() {
        let here = layout.key_center(c)?;
        if let Some(from) = prev {
            let k = style.frames_per_transition.sample(rng);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for j in 1..=k {
                let p = transition_point(style, from, here, j as f64 / (k + 1) as f64, side);
                let (dx, dy) = jitter(rng, None);
                positions.push(Point::new(p.x + dx, p.y + dy));
                press_flags.push(false);
            }
        }
        let dwell = style.dwell_frames.sample(rng);
        for j in 0..dwell {
            let (dx, dy) = jitter(rng, Some(PRESS_NOISE_CLIP));
            positions.push(Point::new(here.x + dx, here.y + dy));
            press_flags.push(j == 0);
        }
        prev = Some(here);
    }
    Ok(TrajectorySample { sentence: sentence.to_string(), positions, press_flags })
}
