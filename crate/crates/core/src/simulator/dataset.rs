use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{FrameStack, Renderer};
use super::style::{Domain, TypingStyle};
use super::trajectory::{generate_trajectory, TrajectorySample};
use crate::error::{Error, Result};
use crate::framefile::{FrameFile, FrameShape};
use crate::rng::stream;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: Domain,
    pub sentence: String,
    pub frame_count: usize,
    /// Relative to the manifest's directory.
    pub frames_path: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::at(path, e))?;
        let mut w = BufWriter::new(f);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::at(path, e))?;
        }
        w.flush().map_err(|e| Error::at(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::at(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::at(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
            );
        }
        Ok(Self { entries })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Trajectory and rendered frames for one sample, drawn from the sample's own
/// RNG stream so results do not depend on generation order.
pub fn simulate_sample(
    id: &str,
    sentence: &str,
    style: &TypingStyle,
    renderer: &Renderer,
    seed: u64,
) -> Result<(TrajectorySample, FrameStack)> {
    let mut rng = stream(seed, id);
    let traj = generate_trajectory(sentence, style, renderer.layout(), &mut rng)?;
    let frames = renderer.render_frames(&traj, style, &mut rng);
    Ok((traj, frames))
}

pub fn sample_id(domain: Domain, index: usize) -> String {
    format!("{}-{index:06}", domain.as_str())
}

/// Prepares `dir` for fresh output: missing or empty is fine, existing
/// contents are removed only with `overwrite`.
pub fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::at(dir, e))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::InvalidArgument(format!(
                    "{} is not empty; pass the overwrite flag to replace it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::at(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::at(dir, e))
}

/// Renders one sample per `(sentence, split)` into `out_dir/frames/` and
/// writes `out_dir/manifest.jsonl`.
pub fn generate_dataset(
    items: &[(String, Split)],
    style: &TypingStyle,
    renderer: &Renderer,
    out_dir: &Path,
    seed: u64,
    overwrite: bool,
) -> Result<DatasetManifest> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no sentences to generate".into()));
    }
    style.validate()?;
    prepare_dir(out_dir, overwrite)?;
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::at(&frames_dir, e))?;
    let mut manifest = DatasetManifest::default();
    for (i, (sentence, split)) in items.iter().enumerate() {
        let id = sample_id(style.domain, i);
        let (_, frames) = simulate_sample(&id, sentence, style, renderer, seed)?;
        let rel = format!("frames/{id}.ksv");
        let file = FrameFile {
            frames: frames.len(),
            shape: FrameShape::Image { height: frames.height, width: frames.width },
            data: frames.data,
        };
        file.save(&out_dir.join(&rel))?;
        manifest.entries.push(ManifestEntry {
            id,
            domain: style.domain,
            sentence: sentence.clone(),
            frame_count: file.frames,
            frames_path: rel,
            split: *split,
        });
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn resolve(manifest_dir: &Path, entry: &ManifestEntry) -> PathBuf {
    manifest_dir.join(&entry.frames_path)
}

/// Labelled single-press images; labels index [`crate::keyboard::KeyboardLayout::chars`].
#[derive(Clone, Debug, PartialEq)]
pub struct KeypressSet {
    pub images: FrameStack,
    pub labels: Vec<usize>,
}

/// Thumb pressing a key, with its position jittered within the key.
pub fn generate_keypress_images(
    n: usize,
    style: &TypingStyle,
    renderer: &Renderer,
    seed: u64,
    stratified: bool,
) -> Result<KeypressSet> {
    let chars = renderer.layout().chars();
    if n < chars.len() {
        return Err(Error::InvalidArgument(format!("need at least {} keypress images, got {n}", chars.len())));
    }
    style.validate()?;
    let mut rng = stream(seed, &format!("keypress-{}", style.domain));
    let mut labels: Vec<usize> = if stratified {
        (0..n).map(|i| i % chars.len()).collect()
    } else {
        (0..n).map(|_| rng.gen_range(0..chars.len())).collect()
    };
    if stratified {
        labels.shuffle(&mut rng);
    }
    let mut images = FrameStack::empty(renderer.height(), renderer.width());
    images.data.reserve(n * images.frame_len());
    for &l in &labels {
        let c = chars[l];
        let key = renderer.layout().key(c)?;
        let mut p = key.center;
        p.x += rng.gen_range(-0.25..=0.25) * key.width;
        p.y += rng.gen_range(-0.2..=0.2) * key.height;
        if style.path_noise_sigma > 0.0 {
            p.x += rng.gen_range(-1.0..=1.0) * style.path_noise_sigma;
            p.y += rng.gen_range(-1.0..=1.0) * style.path_noise_sigma;
        }
        let img = renderer.render_frame(p, Some(c), style, &mut rng);
        images.push(&img);
    }
    Ok(KeypressSet { images, labels })
}
