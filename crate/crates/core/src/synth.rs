//! Synthetic weakly-correlated clip/caption corpora with known correspondences.
//!
//! Each video is a sequence of latent "topics" (unit vectors in `R^k`). Clips
//! and captions are produced from the same topics through two fixed linear
//! maps: `A` has orthonormal columns and `B = A + g·A⊥` where `A⊥` spans a
//! complementary subspace. For unit topics this gives
//! `cos(A t, B t') = <t, t'> / sqrt(1 + g²)`, so matched raw features are
//! strictly closest under cosine distance, while the two modalities still
//! live in different coordinates.
//!
//! With `n` clips and `m` captions there are `min(n, m)` topic segments; clip
//! `i` covers segment `⌊i·s/n⌋` and caption `j` covers segment `⌊j·s/m⌋`, so
//! consecutive items can share a topic.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{windowed_permutations, Permutation};
use crate::error::{Error, Result};
use crate::io::{read_sequence_csv, sequence_to_csv, write_atomic, write_json};
use crate::seqcore::{FeatureSequence, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Sequential,
    NonSequential,
    PartialIrrelevant,
    EntireIrrelevant,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Sequential,
        ScenarioKind::NonSequential,
        ScenarioKind::PartialIrrelevant,
        ScenarioKind::EntireIrrelevant,
    ];
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(ScenarioKind::Sequential),
            "non_sequential" => Ok(ScenarioKind::NonSequential),
            "partial_irrelevant" => Ok(ScenarioKind::PartialIrrelevant),
            "entire_irrelevant" => Ok(ScenarioKind::EntireIrrelevant),
            other => Err(Error::Argument(format!("unknown scenario '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Number of clips.
    pub n: usize,
    /// Number of captions.
    pub m: usize,
    pub d_raw: usize,
    /// Standard deviation of isotropic Gaussian noise on raw features.
    pub noise: f64,
    /// Displacement window for `NonSequential` caption shuffles.
    pub shift_window: usize,
    /// Fraction of captions replaced by unrelated content for `PartialIrrelevant`.
    pub irrelevance_rate: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, n: usize, m: usize) -> Self {
        ScenarioSpec {
            kind,
            n,
            m,
            d_raw: 16,
            noise: 0.0,
            shift_window: 1,
            irrelevance_rate: 0.25,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Argument("sequence lengths must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.irrelevance_rate) {
            return Err(Error::Argument(format!(
                "irrelevance rate must lie in [0, 1], got {}",
                self.irrelevance_rate
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Argument(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Evaluation labels. All indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GroundTruth {
    /// True `(clip, caption)` matches.
    pub correspondences: Vec<(usize, usize)>,
    pub irrelevant_clips: Vec<usize>,
    pub irrelevant_captions: Vec<usize>,
    /// Caption shuffle applied for `NonSequential`: caption slot `j` holds the content of slot `shift[j]`.
    pub applied_shift: Option<Vec<usize>>,
}

/// The fixed clip and caption projections shared by a whole corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityMaps {
    pub latent_dim: usize,
    pub d_raw: usize,
    pub gap: f64,
    /// `d_raw x latent_dim`, row-major.
    clip: Vec<f64>,
    caption: Vec<f64>,
}

impl ModalityMaps {
    pub fn new(latent_dim: usize, d_raw: usize, gap: f64, seed: u64) -> Result<Self> {
        if latent_dim == 0 || d_raw < 2 * latent_dim {
            return Err(Error::Argument(format!(
                "raw dimension {d_raw} must be at least twice the latent dimension {latent_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Gram-Schmidt on 2k Gaussian columns: first k span A, the rest span A⊥
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(2 * latent_dim);
        while cols.len() < 2 * latent_dim {
            let mut v: Vec<f64> = (0..d_raw).map(|_| rng.sample(StandardNormal)).collect();
            for u in &cols {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= p * b;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let mut clip = vec![0.0; d_raw * latent_dim];
        let mut caption = vec![0.0; d_raw * latent_dim];
        for r in 0..d_raw {
            for c in 0..latent_dim {
                clip[r * latent_dim + c] = cols[c][r];
                caption[r * latent_dim + c] = cols[c][r] + gap * cols[latent_dim + c][r];
            }
        }
        Ok(ModalityMaps {
            latent_dim,
            d_raw,
            gap,
            clip,
            caption,
        })
    }

    fn project(&self, modality: Modality, topic: &[f64]) -> Vec<f64> {
        let map = match modality {
            Modality::Clip => &self.clip,
            Modality::Caption => &self.caption,
        };
        (0..self.d_raw)
            .map(|r| {
                (0..self.latent_dim)
                    .map(|c| map[r * self.latent_dim + c] * topic[c])
                    .sum()
            })
            .collect()
    }
}

fn random_topic<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPair {
    pub spec: ScenarioSpec,
    pub clips: FeatureSequence,
    pub captions: FeatureSequence,
    pub gt: GroundTruth,
}

/// One clip/caption pair for `spec`, a pure function of `(spec, maps)`.
pub fn generate_pair(spec: &ScenarioSpec, maps: &ModalityMaps) -> Result<ScenarioPair> {
    spec.validate()?;
    if spec.d_raw != maps.d_raw {
        return Err(Error::Dimension {
            expected: maps.d_raw,
            actual: spec.d_raw,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, m) = (spec.n, spec.m);
    let k = maps.latent_dim;
    let segments = n.min(m);
    let topics: Vec<Vec<f64>> = (0..segments).map(|_| random_topic(&mut rng, k)).collect();
    let clip_seg: Vec<usize> = (0..n).map(|i| i * segments / n).collect();
    let mut caption_seg: Vec<Option<usize>> = (0..m).map(|j| Some(j * segments / m)).collect();
    let mut caption_topics: Vec<Option<Vec<f64>>> = vec![None; m];
    let mut gt = GroundTruth::default();

    match spec.kind {
        ScenarioKind::Sequential => {}
        ScenarioKind::NonSequential => {
            let perms = windowed_permutations(m, spec.shift_window)?;
            let shuffles: Vec<&Permutation> = perms.iter().filter(|p| !p.is_identity()).collect();
            let shift = if shuffles.is_empty() {
                Permutation::identity(m)
            } else {
                shuffles[rng.random_range(0..shuffles.len())].clone()
            };
            caption_seg = shift.indices().iter().map(|&src| caption_seg[src]).collect();
            gt.applied_shift = Some(shift.one_based());
        }
        ScenarioKind::PartialIrrelevant => {
            let mut count = (spec.irrelevance_rate * m as f64).round() as usize;
            if spec.irrelevance_rate > 0.0 {
                count = count.max(1);
            }
            let mut picked = sample(&mut rng, m, count.min(m)).into_vec();
            picked.sort_unstable();
            for j in picked {
                caption_seg[j] = None;
                caption_topics[j] = Some(random_topic(&mut rng, k));
            }
        }
        ScenarioKind::EntireIrrelevant => {
            for j in 0..m {
                caption_seg[j] = None;
                caption_topics[j] = Some(random_topic(&mut rng, k));
            }
        }
    }

    let noise = spec.noise;
    let noisy = |v: Vec<f64>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        if noise == 0.0 {
            v
        } else {
            v.into_iter()
                .map(|a| a + noise * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
    };
    let clips: Vec<Vec<f64>> = clip_seg
        .iter()
        .map(|&s| {
            let v = maps.project(Modality::Clip, &topics[s]);
            noisy(v, &mut rng)
        })
        .collect();
    let captions: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let v = match (&caption_seg[j], &caption_topics[j]) {
                (Some(s), _) => maps.project(Modality::Caption, &topics[*s]),
                (None, Some(t)) => maps.project(Modality::Caption, t),
                (None, None) => unreachable!("caption without content"),
            };
            noisy(v, &mut rng)
        })
        .collect();

    for i in 0..n {
        for j in 0..m {
            if caption_seg[j] == Some(clip_seg[i]) {
                gt.correspondences.push((i + 1, j + 1));
            }
        }
    }
    gt.irrelevant_clips = (1..=n)
        .filter(|&i| !gt.correspondences.iter().any(|&(a, _)| a == i))
        .collect();
    gt.irrelevant_captions = (1..=m)
        .filter(|&j| !gt.correspondences.iter().any(|&(_, b)| b == j))
        .collect();

    Ok(ScenarioPair {
        spec: spec.clone(),
        clips: FeatureSequence::new(clips, Modality::Clip)?,
        captions: FeatureSequence::new(captions, Modality::Caption)?,
        gt,
    })
}

/// A scenario template and how many train/test pairs to draw from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub template: ScenarioSpec,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub d_raw: usize,
    pub modality_gap: f64,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusConfig {
    /// Pair seeds for the test split start at this offset from the corpus seed.
    pub const TEST_SEED_OFFSET: u64 = 1 << 32;

    pub fn single(kind: ScenarioKind, n: usize, m: usize, train: usize, test: usize, seed: u64) -> Self {
        CorpusConfig {
            seed,
            latent_dim: 8,
            d_raw: 16,
            modality_gap: 0.5,
            entries: vec![CorpusEntry {
                template: ScenarioSpec::new(kind, n, m),
                train,
                test,
            }],
        }
    }

    /// Equal share of each scenario kind.
    pub fn mixed(n: usize, m: usize, train_per_kind: usize, test_per_kind: usize, seed: u64) -> Self {
        CorpusConfig {
            entries: ScenarioKind::ALL
                .iter()
                .map(|&kind| CorpusEntry {
                    template: ScenarioSpec::new(kind, n, m),
                    train: train_per_kind,
                    test: test_per_kind,
                })
                .collect(),
            ..Self::single(ScenarioKind::Sequential, n, m, 0, 0, seed)
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        for e in &mut self.entries {
            e.template.noise = noise;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub maps: ModalityMaps,
    pub train: Vec<ScenarioPair>,
    pub test: Vec<ScenarioPair>,
}

/// Draws every pair listed in `config`; train and test pairs use disjoint seed ranges.
pub fn make_corpus(config: &CorpusConfig) -> Result<Corpus> {
    if config.entries.is_empty() || config.entries.iter().all(|e| e.train + e.test == 0) {
        return Err(Error::Argument("corpus needs at least one pair".into()));
    }
    let maps = ModalityMaps::new(
        config.latent_dim,
        config.d_raw,
        config.modality_gap,
        config.seed ^ 0x6d61_7073,
    )?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for entry in &config.entries {
        for _ in 0..entry.train {
            let mut spec = entry.template.clone();
            spec.d_raw = config.d_raw;
            spec.seed = config.seed.wrapping_add(train.len() as u64);
            train.push(generate_pair(&spec, &maps)?);
        }
        for _ in 0..entry.test {
            let mut spec = entry.template.clone();
            spec.d_raw = config.d_raw;
            spec.seed = config
                .seed
                .wrapping_add(CorpusConfig::TEST_SEED_OFFSET)
                .wrapping_add(test.len() as u64);
            test.push(generate_pair(&spec, &maps)?);
        }
    }
    Ok(Corpus {
        config: config.clone(),
        maps,
        train,
        test,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestPair {
    split: String,
    index: usize,
    spec: ScenarioSpec,
    gt: GroundTruth,
    clips: String,
    captions: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: CorpusConfig,
    pairs: Vec<ManifestPair>,
}

/// `manifest.json` plus `<split>_<index>_{clips,captions}.csv` under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut pairs = Vec::new();
    for (split, list) in [("train", &corpus.train), ("test", &corpus.test)] {
        for (index, p) in list.iter().enumerate() {
            let clips = format!("{split}_{index:04}_clips.csv");
            let captions = format!("{split}_{index:04}_captions.csv");
            write_atomic(dir.join(&clips), sequence_to_csv(&p.clips).as_bytes())?;
            write_atomic(dir.join(&captions), sequence_to_csv(&p.captions).as_bytes())?;
            pairs.push(ManifestPair {
                split: split.to_string(),
                index,
                spec: p.spec.clone(),
                gt: p.gt.clone(),
                clips,
                captions,
            });
        }
    }
    write_json(
        dir.join("manifest.json"),
        &Manifest {
            config: corpus.config.clone(),
            pairs,
        },
    )
}

pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let maps = ModalityMaps::new(
        manifest.config.latent_dim,
        manifest.config.d_raw,
        manifest.config.modality_gap,
        manifest.config.seed ^ 0x6d61_7073,
    )?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for p in manifest.pairs {
        let pair = ScenarioPair {
            clips: read_sequence_csv(dir.join(&p.clips), Modality::Clip)?,
            captions: read_sequence_csv(dir.join(&p.captions), Modality::Caption)?,
            spec: p.spec,
            gt: p.gt,
        };
        match p.split.as_str() {
            "train" => train.push(pair),
            "test" => test.push(pair),
            other => return Err(Error::Argument(format!("unknown split '{other}' in manifest"))),
        }
    }
    Ok(Corpus {
        config: manifest.config,
        maps,
        train,
        test,
    })
}
