//! Pooled embedding export and linear disentanglement probes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framefile::{FrameFile, FrameShape};
use crate::nets::{sample_or_pad_frames, temporal_max_pool, DisentangleModel, SampleMode};
use crate::probe::{cross_validated_accuracy, ProbeOptions};
use crate::rng::stream;
use crate::simulator::Domain;
use crate::tensor::Tensor;
use crate::train::SequenceSample;

pub const MANIFEST: &str = "manifest.jsonl";
const FAMILIES: [&str; 3] = ["style", "content", "aggregate"];
const MIN_PER_DOMAIN: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub domain: Domain,
    pub sentence: String,
}

/// Temporally max-pooled `E_S`, `E_C` and `M(E_S, E_C)` outputs, one row per
/// sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub records: Vec<EmbeddingRecord>,
    pub style: Tensor<f32>,
    pub content: Tensor<f32>,
    pub aggregate: Tensor<f32>,
}

impl EmbeddingSet {
    fn families(&self) -> [&Tensor<f32>; 3] {
        [&self.style, &self.content, &self.aggregate]
    }

    /// Writes `style.ksv`, `content.ksv`, `aggregate.ksv` and the manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::at(dir, e))?;
        for (name, t) in FAMILIES.iter().zip(self.families()) {
            FrameFile::new(FrameShape::Features { dim: t.cols() }, t.data().to_vec())?
                .save(&dir.join(format!("{name}.ksv")))?;
        }
        let path = dir.join(MANIFEST);
        let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| Error::at(&path, e))?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::at(&path, e))?;
        }
        w.flush().map_err(|e| Error::at(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let f = fs::File::open(&path).map_err(|e| Error::at(&path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::at(&path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        let mut mats = Vec::new();
        for name in FAMILIES {
            let p = dir.join(format!("{name}.ksv"));
            let f = FrameFile::load(&p)?;
            let FrameShape::Features { dim } = f.shape else {
                return Err(Error::Format(format!("{} is not an embedding matrix", p.display())));
            };
            if f.frames != records.len() {
                return Err(Error::Shape { expected: format!("{} rows", records.len()), actual: format!("{} in {}", f.frames, p.display()) });
            }
            mats.push(Tensor::matrix(f.frames, dim, f.data));
        }
        let aggregate = mats.pop().expect("three families");
        let content = mats.pop().expect("three families");
        let style = mats.pop().expect("three families");
        Ok(Self { records, style, content, aggregate })
    }
}

/// Pools each family over the valid frames of every sample.
pub fn export_embeddings(model: &DisentangleModel<f32>, samples: &[SequenceSample]) -> Result<EmbeddingSet> {
    let d = model.config.embed_dim;
    let mut rng = stream(0, "eval");
    let mut data = [Vec::new(), Vec::new(), Vec::new()];
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let x = sample_or_pad_frames(&s.features, model.config.max_seq_len, SampleMode::Eval, &mut rng)?;
        let style = model.style_encode(&x)?;
        let content = model.content_encode(&x)?;
        let agg = model.aggregate_sequences(&style, &content)?;
        for (buf, e) in data.iter_mut().zip([&style, &content, &agg]) {
            buf.extend(temporal_max_pool(e)?);
        }
        records.push(EmbeddingRecord { id: s.id.clone(), domain: s.domain, sentence: s.sentence.clone() });
    }
    let n = samples.len();
    let [style, content, aggregate] = data.map(|v| Tensor::matrix(n, d, v));
    Ok(EmbeddingSet { records, style, content, aggregate })
}

/// Cross-validated accuracy of a linear domain probe per embedding family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub style: f64,
    pub content: f64,
    /// Aggregated outputs, labelled by the style they were built from.
    pub aggregate: f64,
    pub samples: usize,
}

pub fn probe_disentanglement(set: &EmbeddingSet, opts: &ProbeOptions) -> Result<ProbeReport> {
    let labels: Vec<bool> = set.records.iter().map(|r| r.domain == Domain::PseudoReal).collect();
    probe_with_labels(set, &labels, opts)
}

/// Probe accuracies against arbitrary binary labels (used for null checks).
pub fn probe_with_labels(set: &EmbeddingSet, labels: &[bool], opts: &ProbeOptions) -> Result<ProbeReport> {
    if labels.len() != set.records.len() {
        return Err(Error::Shape { expected: set.records.len().to_string(), actual: labels.len().to_string() });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("probe input holds a single domain".into()));
    }
    if pos.min(neg) < MIN_PER_DOMAIN {
        return Err(Error::InvalidArgument(format!("probes need at least {MIN_PER_DOMAIN} samples per domain, got {}", pos.min(neg))));
    }
    let rows = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
    };
    Ok(ProbeReport {
        style: cross_validated_accuracy(&rows(&set.style), labels, opts)?,
        content: cross_validated_accuracy(&rows(&set.content), labels, opts)?,
        aggregate: cross_validated_accuracy(&rows(&set.aggregate), labels, opts)?,
        samples: labels.len(),
    })
}
