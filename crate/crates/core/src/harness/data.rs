//! Seeded synthetic chest images, label sets and template reports.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::kgraph::{KnowledgeGraph, Region, CHEXPERT_LABELS, NUM_ENTITIES};
use crate::rng::SeedTree;
use crate::templates::{DISEASE_PHRASES, NORMAL_SENTENCES};

use super::config::TrainConfig;

pub const NO_FINDING: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// One line of the dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Row-major `patches x patch_dim`.
    pub patches: Vec<f32>,
    pub labels: Vec<String>,
    pub report: String,
    pub split: Split,
}

impl SampleRecord {
    pub fn image<T: Real>(&self, patches: usize, patch_dim: usize) -> Result<Tensor<T>> {
        if self.patches.len() != patches * patch_dim {
            return Err(Error::Dataset(format!(
                "sample {}: {} patch values, expected {patches} x {patch_dim}",
                self.id,
                self.patches.len()
            )));
        }
        Ok(Tensor::new(vec![patches, patch_dim], self.patches.iter().map(|&v| T::lit(v as f64)).collect())?.cast())
    }

    pub fn label_indices(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| {
                CHEXPERT_LABELS
                    .iter()
                    .position(|c| c == l)
                    .ok_or_else(|| Error::Dataset(format!("sample {}: unknown label {l:?}", self.id)))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Dataset(format!("line {}: {e}", n + 1))))
            .collect::<Result<Vec<SampleRecord>>>()?;
        if records.is_empty() {
            return Err(Error::Dataset("dataset file has no records".into()));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

/// `(train, val, test)` sizes: val and test are rounded, train takes the rest.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let val = (n as f64 * ratios[1]).round() as usize;
    let test = (n as f64 * ratios[2]).round() as usize;
    if val + test > n {
        return Err(Error::Dataset(format!("{n} samples cannot hold the requested splits")));
    }
    let sizes = [n - val - test, val, test];
    for (size, (ratio, split)) in sizes.iter().zip(ratios.iter().zip(Split::ALL)) {
        if *ratio > 0.0 && *size == 0 {
            return Err(Error::Dataset(format!("{n} samples leave the {split} split empty")));
        }
    }
    Ok(sizes)
}

/// Patch rows that carry the signatures of a region's diseases.
pub fn region_patches(region: Region, patches: usize) -> Vec<usize> {
    let frac = |a: usize, b: usize| a * patches / 16..b * patches / 16;
    let v: Vec<usize> = match region {
        Region::Global => frac(0, 4).collect(),
        Region::Lung => frac(4, 12).collect(),
        Region::Pleura => [12 * patches / 16, 15 * patches / 16].into(),
        Region::Heart => frac(13, 15).collect(),
    };
    let mut v = if v.is_empty() { vec![0] } else { v };
    v.dedup();
    v
}

/// Disease sets: none (No Finding), one disease, or a pair drawn with
/// intra-region pairs weighted `boost` times cross-region pairs.
pub struct LabelSampler {
    singles: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    cumulative: Vec<f64>,
}

impl LabelSampler {
    pub const P_NORMAL: f64 = 0.3;
    pub const P_SINGLE: f64 = 0.4;

    pub fn new(graph: &KnowledgeGraph, boost: f64) -> Self {
        let singles: Vec<usize> = (0..NUM_ENTITIES).filter(|&i| i != NO_FINDING).collect();
        let regions: Vec<Region> = graph.entities().iter().map(|e| e.region).collect();
        let mut pairs = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0.0;
        for (a, &i) in singles.iter().enumerate() {
            for &j in &singles[a + 1..] {
                total += if regions[i] == regions[j] { boost } else { 1.0 };
                pairs.push((i, j));
                cumulative.push(total);
            }
        }
        Self {
            singles,
            pairs,
            cumulative,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let u: f64 = rng.gen();
        if u < Self::P_NORMAL {
            vec![NO_FINDING]
        } else if u < Self::P_NORMAL + Self::P_SINGLE {
            vec![*self.singles.choose(rng).expect("nonempty")]
        } else {
            let total = *self.cumulative.last().expect("nonempty");
            let x = rng.gen::<f64>() * total;
            let k = self.cumulative.partition_point(|&c| c <= x).min(self.pairs.len() - 1);
            let (i, j) = self.pairs[k];
            vec![i, j]
        }
    }
}

/// Disease sentences in label order, then 2-4 filler sentences in bank order.
pub fn render_report<R: Rng>(labels: &[usize], rng: &mut R) -> String {
    let mut sentences: Vec<&str> = labels
        .iter()
        .map(|&k| *DISEASE_PHRASES[k].choose(rng).expect("phrases"))
        .collect();
    let count = rng.gen_range(2..=4);
    let mut fillers: Vec<usize> = rand::seq::index::sample(rng, NORMAL_SENTENCES.len(), count).into_vec();
    fillers.sort_unstable();
    sentences.extend(fillers.iter().map(|&i| NORMAL_SENTENCES[i]));
    sentences.join(" ")
}

pub fn generate_dataset(cfg: &TrainConfig, graph: &KnowledgeGraph) -> Result<Dataset> {
    let sizes = split_sizes(cfg.n_samples, [cfg.train_ratio, cfg.val_ratio, cfg.test_ratio])?;
    let tree = SeedTree::new(cfg.seed).child("data");
    let mut sig_rng = tree.stream("signatures");
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let signatures: Vec<Vec<f64>> = (0..NUM_ENTITIES)
        .map(|_| (0..cfg.patch_dim).map(|_| unit.sample(&mut sig_rng) * cfg.signature_scale).collect())
        .collect();
    let targets: Vec<Vec<usize>> = graph
        .entities()
        .iter()
        .map(|e| region_patches(e.region, cfg.patches))
        .collect();
    let sampler = LabelSampler::new(graph, cfg.cooccurrence_boost);
    let mut label_rng = tree.stream("labels");
    let mut text_rng = tree.stream("reports");
    let mut noise_rng = tree.stream("noise");
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(format!("noise_std: {e}")))?;

    let mut records = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let split = if i < sizes[0] {
            Split::Train
        } else if i < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
        let labels = sampler.sample(&mut label_rng);
        let mut pixels: Vec<f64> = (0..cfg.patches * cfg.patch_dim).map(|_| noise.sample(&mut noise_rng)).collect();
        for &k in &labels {
            for &row in &targets[k] {
                for (c, s) in signatures[k].iter().enumerate() {
                    pixels[row * cfg.patch_dim + c] += s;
                }
            }
        }
        records.push(SampleRecord {
            id: format!("s{i:05}"),
            patches: pixels.iter().map(|&v| v as f32).collect(),
            labels: labels.iter().map(|&k| CHEXPERT_LABELS[k].to_string()).collect(),
            report: render_report(&labels, &mut text_rng),
            split,
        });
    }
    Ok(Dataset { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsuite::KeywordLabeler;
    use crate::kgraph::build_chexpert_graph;
    use std::collections::BTreeSet;

    #[test]
    fn split_sizes_follow_ratios() {
        assert_eq!(split_sizes(1000, [0.7, 0.1, 0.2]).unwrap(), [700, 100, 200]);
        assert_eq!(split_sizes(704, [8.0 / 11.0, 1.0 / 11.0, 2.0 / 11.0]).unwrap(), [512, 64, 128]);
        assert!(split_sizes(3, [0.7, 0.1, 0.2]).is_err());
        assert!(split_sizes(10, [0.7, 0.1, 0.1]).is_err());
    }

    #[test]
    fn region_patch_sets() {
        assert_eq!(region_patches(Region::Global, 16), vec![0, 1, 2, 3]);
        assert_eq!(region_patches(Region::Lung, 16), (4..12).collect::<Vec<_>>());
        assert_eq!(region_patches(Region::Heart, 16), vec![13, 14]);
        assert_eq!(region_patches(Region::Pleura, 16), vec![12, 15]);
        for r in [Region::Global, Region::Lung, Region::Heart, Region::Pleura] {
            assert!(region_patches(r, 4).iter().all(|&p| p < 4));
        }
    }

    #[test]
    fn reports_mention_exactly_their_labels() {
        let cfg = TrainConfig {
            n_samples: 300,
            ..TrainConfig::default()
        };
        let data = generate_dataset(&cfg, &build_chexpert_graph()).unwrap();
        let labeler = KeywordLabeler::template_bank();
        for r in &data.records {
            let expected: BTreeSet<usize> = r.label_indices().unwrap().into_iter().collect();
            assert_eq!(labeler.labels_of_text(&r.report), expected, "{}", r.report);
            assert_eq!(r.patches.len(), 16 * 32);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = TrainConfig {
            n_samples: 20,
            ..TrainConfig::default()
        };
        let data = generate_dataset(&cfg, &build_chexpert_graph()).unwrap();
        let text = data.to_jsonl().unwrap();
        assert_eq!(Dataset::from_jsonl(&text).unwrap(), data);
        assert_eq!(text.lines().count(), 20);
        assert!(Dataset::from_jsonl("").is_err());
    }
}
