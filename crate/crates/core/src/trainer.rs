//! Desk-scale contrastive training of clip and caption encoders.
//!
//! Both encoders are affine maps `e = W x + b` from raw features to a shared
//! embedding space, trained by plain gradient descent on the batch loss.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, AugmentStrategy};
use crate::error::{Error, Result};
use crate::loss::{batch_loss, batch_loss_augmented, Batch, LossForm, LossOutput};
use crate::matrix::Matrix;
use crate::s2dtw::{s2dtw_forward, S2dtwParams};
use crate::seqcore::{dot, norm, FeatureSequence, Modality};
use crate::synth::{Corpus, ScenarioPair};

/// `x ↦ W x + b` with `W` of shape `d_out x d_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineEncoder {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl AffineEncoder {
    /// Gaussian weights with variance `1/d_in` and a small Gaussian bias.
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let weights = Matrix::from_fn(d_out, d_in, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let bias = (0..d_out).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
        AffineEncoder { weights, bias }
    }

    pub fn d_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weights.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d_out())
            .map(|r| dot(self.weights.row(r), x) + self.bias[r])
            .collect()
    }

    pub fn encode(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        if seq.dim() != self.d_in() {
            return Err(Error::Dimension {
                expected: self.d_in(),
                actual: seq.dim(),
            });
        }
        FeatureSequence::new(seq.items().iter().map(|x| self.apply(x)).collect(), seq.modality())
    }

    /// Accumulates `∂L/∂W` and `∂L/∂b` given `∂L/∂e` for each item of `seq`.
    fn accumulate_grad(&self, seq: &FeatureSequence, grad_out: &[Vec<f64>], g: &mut AffineEncoder) {
        for (x, ge) in seq.items().iter().zip(grad_out) {
            for (r, &gr) in ge.iter().enumerate() {
                if gr == 0.0 {
                    continue;
                }
                g.bias[r] += gr;
                for (c, &xc) in x.iter().enumerate() {
                    g.weights.add_at(r, c, gr * xc);
                }
            }
        }
    }

    fn zeros_like(&self) -> Self {
        AffineEncoder {
            weights: Matrix::zeros(self.d_out(), self.d_in()),
            bias: vec![0.0; self.d_out()],
        }
    }

    fn step(&mut self, grad: &AffineEncoder, lr: f64) {
        for r in 0..self.d_out() {
            self.bias[r] -= lr * grad.bias[r];
            for c in 0..self.d_in() {
                self.weights.add_at(r, c, -lr * grad.weights.get(r, c));
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.weights.all_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub clip: AffineEncoder,
    pub caption: AffineEncoder,
}

impl EncoderParams {
    pub fn random(d_raw: usize, d_emb: usize, seed: u64) -> Result<Self> {
        if d_raw == 0 || d_emb == 0 {
            return Err(Error::Argument("encoder dimensions must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(EncoderParams {
            clip: AffineEncoder::random(d_raw, d_emb, &mut rng),
            caption: AffineEncoder::random(d_raw, d_emb, &mut rng),
        })
    }

    pub fn encode_pair(&self, pair: &ScenarioPair) -> Result<(FeatureSequence, FeatureSequence)> {
        Ok((self.clip.encode(&pair.clips)?, self.caption.encode(&pair.captions)?))
    }

    fn zeros_like(&self) -> Self {
        EncoderParams {
            clip: self.clip.zeros_like(),
            caption: self.caption.zeros_like(),
        }
    }

    fn step(&mut self, grad: &EncoderParams, lr: f64) {
        self.clip.step(&grad.clip, lr);
        self.caption.step(&grad.caption, lr);
    }

    fn all_finite(&self) -> bool {
        self.clip.all_finite() && self.caption.all_finite()
    }

    /// All parameters as one flat vector: clip `W`, clip `b`, caption `W`, caption `b`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for enc in [&self.clip, &self.caption] {
            v.extend_from_slice(enc.weights.as_slice());
            v.extend_from_slice(&enc.bias);
        }
        v
    }

    /// Inverse of [`EncoderParams::to_flat`] using `self` for the shapes.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        let expected = self.to_flat().len();
        if flat.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: flat.len(),
            });
        }
        let mut k = 0;
        for enc in [&mut out.clip, &mut out.caption] {
            let (r, c) = enc.weights.shape();
            enc.weights = Matrix::from_vec(r, c, flat[k..k + r * c].to_vec())?;
            k += r * c;
            enc.bias.copy_from_slice(&flat[k..k + r]);
            k += r;
        }
        Ok(out)
    }
}

/// Which of temporal augmentation (TA), weak alignment (WA) and local
/// smoothing (LS) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub temporal_augmentation: bool,
    pub weak_alignment: bool,
    pub local_smoothing: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        temporal_augmentation: true,
        weak_alignment: true,
        local_smoothing: true,
    };
    pub const NONE: Ablation = Ablation {
        temporal_augmentation: false,
        weak_alignment: false,
        local_smoothing: false,
    };
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub ablation: Ablation,
    /// Alignment used by the loss; its `smoothing` and `weak_alignment`
    /// switches are overridden by `ablation`.
    pub alignment: S2dtwParams,
    /// Alignment used to rank candidates at evaluation time, shared by all
    /// ablation rows so their metrics are comparable.
    pub eval_alignment: S2dtwParams,
    pub augment: AugmentConfig,
    pub loss_form: LossForm,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub d_emb: usize,
    /// Evaluate the held-out split every this many steps (0: only at start and end).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ablation: Ablation::FULL,
            alignment: S2dtwParams::default(),
            eval_alignment: S2dtwParams::default(),
            augment: AugmentConfig::default(),
            loss_form: LossForm::LogOfSum,
            learning_rate: 0.05,
            steps: 500,
            batch_size: 8,
            d_emb: 8,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_alignment(&self) -> S2dtwParams {
        S2dtwParams {
            smoothing: self.ablation.local_smoothing,
            weak_alignment: self.ablation.weak_alignment,
            ..self.alignment
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_alignment().validate()?;
        self.eval_alignment.validate()?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Argument(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.d_emb == 0 {
            return Err(Error::Argument("embedding dimension must be at least 1".into()));
        }
        let min_batch = if self.loss_form == LossForm::PositivesOnly { 1 } else { 2 };
        if self.batch_size < min_batch {
            return Err(Error::Argument(format!(
                "batch size must be at least {min_batch} for this loss, got {}",
                self.batch_size
            )));
        }
        if self.ablation.temporal_augmentation && !(self.augment.tau > 0.0) {
            return Err(Error::Argument(format!(
                "augmentation temperature must be > 0, got {}",
                self.augment.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub median_rank: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Caption sequence as query, clip sequences as candidates.
    pub text_to_video: RetrievalMetrics,
    /// Clip sequence as query, caption sequences as candidates.
    pub video_to_text: RetrievalMetrics,
}

impl RetrievalReport {
    /// Mean R@1 over both directions.
    pub fn mean_r_at_1(&self) -> f64 {
        (self.text_to_video.r_at_1 + self.video_to_text.r_at_1) / 2.0
    }
}

/// Rank of the true candidate for each query, ties counted against the query.
fn ranks(costs: &Matrix, by_rows: bool) -> Vec<usize> {
    let n = costs.rows();
    (0..n)
        .map(|q| {
            let cost = |c: usize| if by_rows { costs.get(q, c) } else { costs.get(c, q) };
            let truth = cost(q);
            1 + (0..n).filter(|&c| c != q && cost(c) <= truth).count()
        })
        .collect()
}

fn metrics_from_ranks(mut ranks: Vec<usize>) -> RetrievalMetrics {
    let n = ranks.len() as f64;
    let r_at = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let (r_at_1, r_at_5) = (r_at(1), r_at(5));
    ranks.sort_unstable();
    let len = ranks.len();
    let median_rank = if len % 2 == 1 {
        ranks[len / 2] as f64
    } else {
        (ranks[len / 2 - 1] + ranks[len / 2]) as f64 / 2.0
    };
    RetrievalMetrics {
        r_at_1,
        r_at_5,
        median_rank,
    }
}

/// Retrieval metrics from a square cost matrix whose row `i` is clip sequence
/// `i` and column `j` is caption sequence `j`; the diagonal holds true pairs.
pub fn retrieval_from_costs(costs: &Matrix) -> Result<RetrievalReport> {
    if costs.rows() != costs.cols() {
        return Err(Error::Shape {
            expected: (costs.rows(), costs.rows()),
            actual: costs.shape(),
        });
    }
    if costs.rows() < 5 {
        return Err(Error::Argument(format!(
            "retrieval needs at least 5 candidates, got {}",
            costs.rows()
        )));
    }
    Ok(RetrievalReport {
        text_to_video: metrics_from_ranks(ranks(costs, false)),
        video_to_text: metrics_from_ranks(ranks(costs, true)),
    })
}

/// Ranks every candidate of the other modality by ascending alignment cost.
pub fn evaluate_retrieval(
    encoders: &EncoderParams,
    pairs: &[ScenarioPair],
    params: &S2dtwParams,
) -> Result<RetrievalReport> {
    if pairs.len() < 5 {
        return Err(Error::Argument(format!(
            "retrieval needs at least 5 candidates, got {}",
            pairs.len()
        )));
    }
    let encoded = pairs
        .iter()
        .map(|p| encoders.encode_pair(p))
        .collect::<Result<Vec<_>>>()?;
    let b = pairs.len();
    let costs = (0..b * b)
        .into_par_iter()
        .map(|k| s2dtw_forward(&encoded[k / b].0, &encoded[k % b].1, params).map(|r| r.cost))
        .collect::<Result<Vec<f64>>>()?;
    retrieval_from_costs(&Matrix::from_vec(b, b, costs)?)
}

/// Mean pairwise cosine similarity; 1 means every vector points the same way.
pub fn collapse_metric(embeddings: &[Vec<f64>]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::Argument("collapse metric needs at least 2 embeddings".into()));
    }
    let norms: Vec<f64> = embeddings.iter().map(|e| norm(e)).collect();
    if let Some(index) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::DegenerateVector { index });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..embeddings.len() {
        for b in a + 1..embeddings.len() {
            total += dot(&embeddings[a], &embeddings[b]) / (norms[a] * norms[b]);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Collapse metric over the mean clip embedding of each video.
pub fn video_collapse(encoders: &EncoderParams, pairs: &[ScenarioPair]) -> Result<f64> {
    let pooled = pairs
        .iter()
        .map(|p| {
            let e = encoders.clip.encode(&p.clips)?;
            let mut mean = vec![0.0; e.dim()];
            for item in e.items() {
                for (m, v) in mean.iter_mut().zip(item) {
                    *m += v / e.len() as f64;
                }
            }
            Ok(mean)
        })
        .collect::<Result<Vec<_>>>()?;
    collapse_metric(&pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub retrieval: RetrievalReport,
    pub collapse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Batch loss at every step, before that step's update.
    pub losses: Vec<f64>,
    /// Held-out evaluations; the first is taken before any update, the last after the final one.
    pub checkpoints: Vec<Checkpoint>,
    pub final_retrieval: RetrievalReport,
    pub final_collapse: f64,
    pub encoders: EncoderParams,
}

/// Loss and parameter gradients for a fixed batch of pairs.
pub fn loss_and_grads<R: Rng + ?Sized>(
    encoders: &EncoderParams,
    pairs: &[&ScenarioPair],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(LossOutput, EncoderParams)> {
    let params = config.effective_alignment();
    let encoded = pairs
        .iter()
        .map(|p| encoders.encode_pair(p))
        .collect::<Result<Vec<_>>>()?;
    let batch = Batch::new(encoded);
    let out = if config.ablation.temporal_augmentation {
        batch_loss_augmented(&batch, &params, config.loss_form, &config.augment, rng)?
    } else {
        batch_loss(&batch, &params, config.loss_form)?
    };
    let mut grad = encoders.zeros_like();
    for (k, p) in pairs.iter().enumerate() {
        encoders.clip.accumulate_grad(&p.clips, &out.grads_x[k], &mut grad.clip);
        encoders.caption.accumulate_grad(&p.captions, &out.grads_y[k], &mut grad.caption);
    }
    Ok((out, grad))
}

fn checkpoint(step: usize, encoders: &EncoderParams, test: &[ScenarioPair], config: &TrainConfig) -> Result<Checkpoint> {
    Ok(Checkpoint {
        step,
        retrieval: evaluate_retrieval(encoders, test, &config.eval_alignment)?,
        collapse: video_collapse(encoders, test)?,
    })
}

/// Mini-batch gradient descent on the training split, evaluated on the test split.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    let d_raw = corpus.train[0].clips.dim();
    let mut encoders = EncoderParams::random(d_raw, config.d_emb, config.seed)?;
    train_from(corpus, config, &mut encoders)
}

/// Like [`train`] but starting from (and updating) the given encoders.
pub fn train_from(corpus: &Corpus, config: &TrainConfig, encoders: &mut EncoderParams) -> Result<TrainReport> {
    config.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    let b = config.batch_size.min(corpus.train.len());
    if b < 2 && config.loss_form != LossForm::PositivesOnly {
        return Err(Error::Argument("contrastive training needs at least 2 training pairs".into()));
    }
    // separate streams so batch order does not depend on augmentation draws
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6261_7463);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6175_6720);

    let mut losses = Vec::with_capacity(config.steps);
    let mut checkpoints = vec![checkpoint(0, encoders, &corpus.test, config)?];
    for step in 0..config.steps {
        let picked = sample(&mut batch_rng, corpus.train.len(), b).into_vec();
        let pairs: Vec<&ScenarioPair> = picked.iter().map(|&k| &corpus.train[k]).collect();
        let (out, grad) = match loss_and_grads(encoders, &pairs, config, &mut aug_rng) {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                return Err(Error::TrainingDiverged {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !out.loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: out.loss });
        }
        losses.push(out.loss);
        encoders.step(&grad, config.learning_rate);
        if !encoders.all_finite() {
            return Err(Error::TrainingDiverged { step, loss: out.loss });
        }
        let done = step + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 && done != config.steps {
            checkpoints.push(checkpoint(done, encoders, &corpus.test, config)?);
        }
    }
    if config.steps > 0 {
        checkpoints.push(checkpoint(config.steps, encoders, &corpus.test, config)?);
    }
    let last = checkpoints.last().expect("at least the initial checkpoint").clone();
    Ok(TrainReport {
        config: config.clone(),
        losses,
        checkpoints,
        final_retrieval: last.retrieval,
        final_collapse: last.collapse,
        encoders: encoders.clone(),
    })
}

/// One configuration of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub reports: Vec<TrainReport>,
    pub mean_r_at_1: f64,
    pub mean_r_at_5: f64,
    pub mean_median_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Softmin temperature of the DTW-like rows.
pub const BASELINE_GAMMA: f64 = 0.01;

/// The six configurations: baseline, three augmentation strategies, then
/// weak alignment and local smoothing stacked on the preserving strategy.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |ablation: Ablation, strategy: AugmentStrategy, gamma: f64| TrainConfig {
        ablation,
        alignment: S2dtwParams { gamma, ..base.alignment },
        augment: AugmentConfig { strategy, ..base.augment },
        ..base.clone()
    };
    let ta = Ablation {
        temporal_augmentation: true,
        ..Ablation::NONE
    };
    let ta_wa = Ablation {
        weak_alignment: true,
        ..ta
    };
    vec![
        ("(1) DTW".into(), with(Ablation::NONE, AugmentStrategy::Preserving, BASELINE_GAMMA)),
        ("(2) TA-A".into(), with(ta, AugmentStrategy::Preserving, BASELINE_GAMMA)),
        ("(3) TA-B".into(), with(ta, AugmentStrategy::Uniform, BASELINE_GAMMA)),
        ("(4) TA-C".into(), with(ta, AugmentStrategy::Inverse, BASELINE_GAMMA)),
        ("(5) TA-A + WA".into(), with(ta_wa, AugmentStrategy::Preserving, base.alignment.gamma)),
        ("(6) TA-A + WA + LS".into(), with(Ablation::FULL, AugmentStrategy::Preserving, base.alignment.gamma)),
    ]
}

/// Trains every ablation row once per seed.
pub fn run_ablation(corpus: &Corpus, base: &TrainConfig, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Argument("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (label, config) in ablation_configs(base) {
        let reports = seeds
            .iter()
            .map(|&seed| train(corpus, &TrainConfig { seed, ..config.clone() }))
            .collect::<Result<Vec<_>>>()?;
        let mean = |f: &dyn Fn(&RetrievalReport) -> f64| {
            reports.iter().map(|r| f(&r.final_retrieval)).sum::<f64>() / reports.len() as f64
        };
        rows.push(AblationRow {
            mean_r_at_1: mean(&|r| r.mean_r_at_1()),
            mean_r_at_5: mean(&|r| (r.text_to_video.r_at_5 + r.video_to_text.r_at_5) / 2.0),
            mean_median_rank: mean(&|r| (r.text_to_video.median_rank + r.video_to_text.median_rank) / 2.0),
            label,
            config,
            seeds: seeds.to_vec(),
            reports,
        });
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    /// One line per row with averaged metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,ta,wa,ls,strategy,gamma,seeds,r_at_1,r_at_5,median_rank,t2v_r_at_1,v2t_r_at_1\n");
        for row in &self.rows {
            let a = row.config.ablation;
            let n = row.reports.len() as f64;
            let t2v = row.reports.iter().map(|r| r.final_retrieval.text_to_video.r_at_1).sum::<f64>() / n;
            let v2t = row.reports.iter().map(|r| r.final_retrieval.video_to_text.r_at_1).sum::<f64>() / n;
            let strategy = if a.temporal_augmentation {
                match row.config.augment.strategy {
                    AugmentStrategy::Preserving => "preserving",
                    AugmentStrategy::Uniform => "uniform",
                    AugmentStrategy::Inverse => "inverse",
                }
            } else {
                "none"
            };
            out.push_str(&format!(
                "\"{}\",{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                row.label,
                a.temporal_augmentation as u8,
                a.weak_alignment as u8,
                a.local_smoothing as u8,
                strategy,
                row.config.alignment.gamma,
                row.seeds.len(),
                row.mean_r_at_1,
                row.mean_r_at_5,
                row.mean_median_rank,
                t2v,
                v2t
            ));
        }
        out
    }
}

/// Sequences of the given modality produced by `encoders` for each pair.
pub fn embed_all(encoders: &EncoderParams, pairs: &[ScenarioPair], modality: Modality) -> Result<Vec<FeatureSequence>> {
    pairs
        .iter()
        .map(|p| match modality {
            Modality::Clip => encoders.clip.encode(&p.clips),
            Modality::Caption => encoders.caption.encode(&p.captions),
        })
        .collect()
}
