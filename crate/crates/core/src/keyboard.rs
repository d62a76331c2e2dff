//! QWERTY keyboard geometry and the keyboard-conditioned edit distance.
//!
//! Keys are unit squares. The letter rows are staggered by 0, 0.5 and 0.75 key
//! widths; the space bar sits centred below the bottom letter row. Coordinates
//! grow rightwards (x) and downwards (y).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const SPACE: char = ' ';

/// Floor on substitution cost so that neighbouring-key substitutions are never free.
pub const SUBSTITUTION_FLOOR: f64 = 0.1;

const ROWS: [(&str, f64); 3] = [("qwertyuiop", 0.0), ("asdfghjkl", 0.5), ("zxcvbnm", 0.75)];
const SPACE_WIDTH: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }

    pub fn lerp(self, o: Point, t: f64) -> Point {
        Point::new(self.x + (o.x - self.x) * t, self.y + (o.y - self.y) * t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Key {
    pub center: Point,
    pub width: f64,
    pub height: f64,
}

/// The 27 typeable keys (26 letters and the space bar).
#[derive(Clone, Debug, PartialEq)]
pub struct KeyboardLayout {
    keys: BTreeMap<char, Key>,
    width: f64,
    height: f64,
    max_distance: f64,
}

impl Default for KeyboardLayout {
    fn default() -> Self {
        Self::qwerty()
    }
}

impl KeyboardLayout {
    pub fn qwerty() -> Self {
        let mut keys = BTreeMap::new();
        for (r, (letters, offset)) in ROWS.iter().enumerate() {
            for (i, c) in letters.chars().enumerate() {
                let center = Point::new(offset + i as f64 + 0.5, r as f64 + 0.5);
                keys.insert(c, Key { center, width: 1.0, height: 1.0 });
            }
        }
        keys.insert(SPACE, Key { center: Point::new(5.0, 3.5), width: SPACE_WIDTH, height: 1.0 });
        Self::from_keys(keys, 10.0, 4.0).expect("built-in layout is valid")
    }

    fn from_keys(keys: BTreeMap<char, Key>, width: f64, height: f64) -> Result<Self> {
        if keys.len() != 27 || !keys.contains_key(&SPACE) || !('a'..='z').all(|c| keys.contains_key(&c)) {
            return Err(Error::InvalidArgument(format!(
                "layout must define exactly the 26 letters and space, got {} keys",
                keys.len()
            )));
        }
        let pts: Vec<(char, Point)> = keys.iter().map(|(&c, k)| (c, k.center)).collect();
        for &(c, p) in &pts {
            if !(0.0..=width).contains(&p.x) || !(0.0..=height).contains(&p.y) {
                return Err(Error::InvalidArgument(format!("key {c:?} centre lies outside the keyboard")));
            }
        }
        let mut max_distance: f64 = 0.0;
        for (i, &(a, p)) in pts.iter().enumerate() {
            for &(b, q) in &pts[i + 1..] {
                let d = p.dist(q);
                if d == 0.0 {
                    return Err(Error::InvalidArgument(format!("keys {a:?} and {b:?} share a centre")));
                }
                max_distance = max_distance.max(d);
            }
        }
        Ok(Self { keys, width, height, max_distance })
    }

    /// Loads key centres from a text file of `<char> <x> <y>` lines, where the
    /// space bar is written `space`. Blank lines and `#` comments are ignored.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::at(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let base = Self::qwerty();
        let mut keys = base.keys.clone();
        let (mut width, mut height) = (base.width, base.height);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("layout line {}: {line:?}", lineno + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            let c = match parts[0] {
                "space" => SPACE,
                s if s.chars().count() == 1 => s.chars().next().unwrap().to_ascii_lowercase(),
                _ => return Err(bad()),
            };
            let x: f64 = parts[1].parse().map_err(|_| bad())?;
            let y: f64 = parts[2].parse().map_err(|_| bad())?;
            let key = keys.get_mut(&c).ok_or(Error::UnknownKey(c))?;
            key.center = Point::new(x, y);
            width = width.max(x + key.width / 2.0);
            height = height.max(y + key.height / 2.0);
        }
        Self::from_keys(keys, width, height)
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn keys(&self) -> impl Iterator<Item = (char, &Key)> {
        self.keys.iter().map(|(&c, k)| (c, k))
    }

    /// The typeable characters in a fixed order: `a..z` then space.
    pub fn chars(&self) -> Vec<char> {
        ('a'..='z').chain(std::iter::once(SPACE)).collect()
    }

    pub fn key(&self, c: char) -> Result<&Key> {
        self.keys.get(&c.to_ascii_lowercase()).ok_or(Error::UnknownKey(c))
    }

    pub fn key_center(&self, c: char) -> Result<Point> {
        Ok(self.key(c)?.center)
    }

    pub fn max_distance(&self) -> f64 {
        self.max_distance
    }

    /// Centre-to-centre distance normalised by the largest inter-key distance.
    pub fn key_distance(&self, a: char, b: char) -> Result<f64> {
        let (p, q) = (self.key_center(a)?, self.key_center(b)?);
        Ok(p.dist(q) / self.max_distance)
    }

    pub fn substitution_cost(&self, a: char, b: char) -> Result<f64> {
        if a == b {
            return Ok(0.0);
        }
        Ok(SUBSTITUTION_FLOOR + (1.0 - SUBSTITUTION_FLOOR) * self.key_distance(a, b)?)
    }

    /// Keyboard-conditioned Damerau–Levenshtein distance.
    ///
    /// Insertions, deletions and adjacent transpositions cost 1; substitutions
    /// cost [`Self::substitution_cost`]. This is the cheapest sequence of such
    /// edits (the unrestricted variant), so the result is a metric. Inputs are
    /// lowercased and trailing whitespace is ignored.
    pub fn edit_distance(&self, hyp: &str, reference: &str) -> Result<f64> {
        let a = normalise(hyp);
        let b = normalise(reference);
        for &c in a.iter().chain(&b) {
            self.key(c)?;
        }
        let (n, m) = (a.len(), b.len());
        let sub = |x: char, y: char| self.substitution_cost(x, y).expect("validated above");
        // d[i][j]: distance between a[..i] and b[..j].
        let mut d = vec![vec![0.0f64; m + 1]; n + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i as f64;
        }
        for j in 0..=m {
            d[0][j] = j as f64;
        }
        for i in 1..=n {
            for j in 1..=m {
                let mut best = (d[i - 1][j - 1] + sub(a[i - 1], b[j - 1]))
                    .min(d[i - 1][j] + 1.0)
                    .min(d[i][j - 1] + 1.0);
                // Crossing pair a[x] -> b[j], a[i] -> b[y] brought together by one
                // swap. Everything between them is inserted or deleted, and one of
                // the two gaps is always empty in an optimal edit sequence since
                // substitutions never cost more than 1.
                if i >= 2 {
                    let ai1 = sub(a[i - 2], b[j - 1]);
                    for l in 1..j {
                        let c = d[i - 2][l - 1] + ai1 + sub(a[i - 1], b[l - 1]) + 1.0 + (j - l - 1) as f64;
                        best = best.min(c);
                    }
                }
                if j >= 2 {
                    let bj1 = sub(a[i - 1], b[j - 2]);
                    for k in 1..i {
                        let c = d[k - 1][j - 2] + sub(a[k - 1], b[j - 1]) + bj1 + 1.0 + (i - k - 1) as f64;
                        best = best.min(c);
                    }
                }
                d[i][j] = best;
            }
        }
        Ok(d[n][m])
    }
}

/// Lowercase, trailing-whitespace-trimmed character vector.
pub fn normalise(s: &str) -> Vec<char> {
    s.trim_end().chars().map(|c| c.to_ascii_lowercase()).collect()
}

/// Convenience wrapper over the default QWERTY layout.
pub fn qwerty_edit_distance(hyp: &str, reference: &str) -> Result<f64> {
    KeyboardLayout::qwerty().edit_distance(hyp, reference)
}
