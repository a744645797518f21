//! Contrastive objective over pairwise alignment costs.
//!
//! With `c(i,j) = S2DTW(X_i, Y_j)` and `r_i = e^{-c(i,i)} / (e^{-c(i,i)} + Σ_{j∈N_i} e^{-c(i,j)})`,
//! the default form is `L = -log Σ_i r_i`; `SumOfLogs` gives the conventional
//! `L = -Σ_i log r_i`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig, Permutation};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::s2dtw::{embedding_grads, s2dtw, S2dtwParams};
use crate::seqcore::FeatureSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `-log Σ_i r_i`.
    #[default]
    LogOfSum,
    /// `-Σ_i log r_i`.
    SumOfLogs,
    /// Mean positive cost, no negatives at all.
    PositivesOnly,
}

impl std::str::FromStr for LossForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_of_sum" => Ok(LossForm::LogOfSum),
            "sum_of_logs" => Ok(LossForm::SumOfLogs),
            "positives_only" => Ok(LossForm::PositivesOnly),
            other => Err(Error::Argument(format!("unknown loss form '{other}'"))),
        }
    }
}

/// Membership rule for `N_i`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum NegativePolicy {
    /// Every other pair in the batch.
    #[default]
    AllOthers,
    /// Explicit lists, one per batch item.
    Custom(Vec<Vec<usize>>),
}

/// Clip/caption sequence pairs; `pairs[i]` are the clips and captions of video `i`.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub pairs: Vec<(FeatureSequence, FeatureSequence)>,
    pub negatives: NegativePolicy,
}

impl Batch {
    pub fn new(pairs: Vec<(FeatureSequence, FeatureSequence)>) -> Self {
        Batch {
            pairs,
            negatives: NegativePolicy::AllOthers,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `N_i` under the batch's policy.
pub fn negative_set(i: usize, batch: &Batch) -> Result<Vec<usize>> {
    let b = batch.len();
    if i >= b {
        return Err(Error::Argument(format!("batch index {i} out of range for batch of {b}")));
    }
    match &batch.negatives {
        NegativePolicy::AllOthers => Ok((0..b).filter(|&j| j != i).collect()),
        NegativePolicy::Custom(lists) => {
            let list = lists
                .get(i)
                .ok_or_else(|| Error::Argument(format!("no negative list for item {i}")))?;
            if let Some(&j) = list.iter().find(|&&j| j >= b || j == i) {
                return Err(Error::Argument(format!("invalid negative {j} for item {i}")));
            }
            Ok(list.clone())
        }
    }
}

/// Loss value and `∂L/∂c(i,j)` from a cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostGradient {
    pub loss: f64,
    /// Per-item ratio `r_i` (1 for `PositivesOnly`).
    pub ratios: Vec<f64>,
    /// `∂L/∂c(i,j)`; zero for pairs that enter no term.
    pub d_cost: Matrix,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let hi = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + values.map(|v| (v - hi).exp()).sum::<f64>().ln()
}

/// Evaluates the objective on a precomputed `B x B` cost matrix.
pub fn loss_from_costs(costs: &Matrix, negatives: &[Vec<usize>], form: LossForm) -> Result<CostGradient> {
    let b = costs.rows();
    if b == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if costs.cols() != b || negatives.len() != b {
        return Err(Error::Shape {
            expected: (b, b),
            actual: (costs.cols(), negatives.len()),
        });
    }
    let mut d_cost = Matrix::zeros(b, b);

    if form == LossForm::PositivesOnly {
        let loss = (0..b).map(|i| costs.get(i, i)).sum::<f64>() / b as f64;
        for i in 0..b {
            d_cost.set(i, i, 1.0 / b as f64);
        }
        return Ok(CostGradient {
            loss,
            ratios: vec![1.0; b],
            d_cost,
        });
    }

    // log r_i and the per-row softmax p(i, j) over {i} ∪ N_i
    let mut log_ratios = Vec::with_capacity(b);
    let mut row_probs: Vec<Vec<(usize, f64)>> = Vec::with_capacity(b);
    for i in 0..b {
        let members: Vec<usize> = std::iter::once(i).chain(negatives[i].iter().copied()).collect();
        let lse = log_sum_exp(members.iter().map(|&j| -costs.get(i, j)));
        log_ratios.push(-costs.get(i, i) - lse);
        row_probs.push(members.iter().map(|&j| (j, (-costs.get(i, j) - lse).exp())).collect());
    }

    let (loss, weights): (f64, Vec<f64>) = match form {
        LossForm::LogOfSum => {
            let lse = log_sum_exp(log_ratios.iter().copied());
            let w = log_ratios.iter().map(|l| (l - lse).exp()).collect();
            (-lse, w)
        }
        LossForm::SumOfLogs => (-log_ratios.iter().sum::<f64>(), vec![1.0; b]),
        LossForm::PositivesOnly => unreachable!(),
    };

    // ∂(-log r_i)/∂c(i,i) = 1 - p(i,i), ∂(-log r_i)/∂c(i,j) = -p(i,j)
    for i in 0..b {
        for &(j, p) in &row_probs[i] {
            let g = if j == i { 1.0 - p } else { -p };
            d_cost.add_at(i, j, weights[i] * g);
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    Ok(CostGradient {
        loss,
        ratios: log_ratios.iter().map(|l| l.exp()).collect(),
        d_cost,
    })
}

/// Loss, costs and gradients for one batch.
#[derive(Debug, Clone, Serialize)]
pub struct LossOutput {
    pub loss: f64,
    pub positive_costs: Vec<f64>,
    /// `c(i, j)` for every clip/caption pairing; diagonal entries are the positives.
    pub cost_matrix: Vec<Vec<f64>>,
    pub ratios: Vec<f64>,
    /// `∂L/∂x` per clip item of each pair, in the original (un-augmented) order.
    #[serde(skip)]
    pub grads_x: Vec<Vec<Vec<f64>>>,
    /// `∂L/∂y` per caption item of each pair, in the original order.
    #[serde(skip)]
    pub grads_y: Vec<Vec<Vec<f64>>>,
    /// Permutations applied by augmentation, if any.
    #[serde(skip)]
    pub permutations: Option<Vec<(Permutation, Permutation)>>,
}

/// Loss without augmentation.
pub fn batch_loss(batch: &Batch, params: &S2dtwParams, form: LossForm) -> Result<LossOutput> {
    batch_loss_inner(batch, params, form, None)
}

/// Loss with each sequence shuffled by temporal augmentation first.
pub fn batch_loss_augmented<R: Rng + ?Sized>(
    batch: &Batch,
    params: &S2dtwParams,
    form: LossForm,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    let mut perms = Vec::with_capacity(batch.len());
    for (x, y) in &batch.pairs {
        let a = augment_pair(x, y, aug, params.measure, rng)?;
        perms.push((a.perm_x, a.perm_y));
    }
    batch_loss_inner(batch, params, form, Some(perms))
}

fn batch_loss_inner(
    batch: &Batch,
    params: &S2dtwParams,
    form: LossForm,
    perms: Option<Vec<(Permutation, Permutation)>>,
) -> Result<LossOutput> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    params.validate()?;
    let dim = batch.pairs[0].0.dim();
    if let Some((x, y)) = batch.pairs.iter().find(|(x, y)| x.dim() != dim || y.dim() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            actual: if x.dim() != dim { x.dim() } else { y.dim() },
        });
    }
    let negatives: Vec<Vec<usize>> = (0..b).map(|i| negative_set(i, batch)).collect::<Result<_>>()?;

    let (xs, ys): (Vec<FeatureSequence>, Vec<FeatureSequence>) = match &perms {
        None => batch.pairs.iter().cloned().unzip(),
        Some(p) => batch
            .pairs
            .iter()
            .zip(p)
            .map(|((x, y), (px, py))| {
                Ok((
                    crate::seqcore::apply_permutation(x, px)?,
                    crate::seqcore::apply_permutation(y, py)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip(),
    };

    // Alignments are independent; collecting in index order keeps the reduction deterministic.
    let results = (0..b * b)
        .into_par_iter()
        .map(|k| s2dtw(&xs[k / b], &ys[k % b], params))
        .collect::<Result<Vec<_>>>()?;
    let costs = Matrix::from_fn(b, b, |i, j| results[i * b + j].cost);
    if let Some((i, j)) = (0..b * b).map(|k| (k / b, k % b)).find(|&(i, j)| !costs.get(i, j).is_finite()) {
        return Err(Error::Numeric(format!("non-finite alignment cost for pair ({i}, {j})")));
    }

    let grad = loss_from_costs(&costs, &negatives, form)?;

    let mut grads_x: Vec<Vec<Vec<f64>>> = xs.iter().map(|x| vec![vec![0.0; dim]; x.len()]).collect();
    let mut grads_y: Vec<Vec<Vec<f64>>> = ys.iter().map(|y| vec![vec![0.0; dim]; y.len()]).collect();
    for i in 0..b {
        for j in 0..b {
            let w = grad.d_cost.get(i, j);
            if w == 0.0 {
                continue;
            }
            let scaled = results[i * b + j].m_hat()?.map(|v| v * w);
            let (gx, gy) = embedding_grads(&scaled, &xs[i], &ys[j], params.measure)?;
            add_into(&mut grads_x[i], &gx);
            add_into(&mut grads_y[j], &gy);
        }
    }

    // map gradients on augmented positions back to the original items
    if let Some(p) = &perms {
        for i in 0..b {
            grads_x[i] = unpermute(&grads_x[i], &p[i].0);
            grads_y[i] = unpermute(&grads_y[i], &p[i].1);
        }
    }

    Ok(LossOutput {
        loss: grad.loss,
        positive_costs: (0..b).map(|i| costs.get(i, i)).collect(),
        cost_matrix: costs.to_rows(),
        ratios: grad.ratios,
        grads_x,
        grads_y,
        permutations: perms,
    })
}

fn add_into(acc: &mut [Vec<f64>], g: &[Vec<f64>]) {
    for (a, v) in acc.iter_mut().zip(g) {
        for (p, q) in a.iter_mut().zip(v) {
            *p += q;
        }
    }
}

fn unpermute(g: &[Vec<f64>], perm: &Permutation) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); g.len()];
    for (k, &src) in perm.indices().iter().enumerate() {
        out[src] = g[k].clone();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::Modality;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_others(b: usize) -> Vec<Vec<usize>> {
        (0..b).map(|i| (0..b).filter(|&j| j != i).collect()).collect()
    }

    fn seq(rng: &mut ChaCha8Rng, n: usize, d: usize, modality: Modality) -> FeatureSequence {
        let items = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        FeatureSequence::new(items, modality).unwrap()
    }

    #[test]
    fn negative_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mk = |rng: &mut ChaCha8Rng| (seq(rng, 2, 2, Modality::Clip), seq(rng, 2, 2, Modality::Caption));
        let one = Batch::new(vec![mk(&mut rng)]);
        assert!(negative_set(0, &one).unwrap().is_empty());
        let four = Batch::new((0..4).map(|_| mk(&mut rng)).collect());
        assert_eq!(negative_set(1, &four).unwrap(), vec![0, 2, 3]);
        for i in 0..4 {
            assert_eq!(negative_set(i, &four).unwrap().len(), 3);
        }
        assert!(negative_set(4, &four).is_err());
    }

    #[test]
    fn single_item_batch_has_zero_loss() {
        let c = Matrix::from_rows(vec![vec![3.7]]).unwrap();
        let g = loss_from_costs(&c, &[vec![]], LossForm::LogOfSum).unwrap();
        assert_eq!(g.loss, 0.0);
        assert_eq!(g.ratios, vec![1.0]);
    }

    #[test]
    fn equal_costs() {
        for b in 1..6 {
            let c = Matrix::filled(b, b, 1.3);
            let g = loss_from_costs(&c, &all_others(b), LossForm::LogOfSum).unwrap();
            assert!(g.loss.abs() < 1e-12);
            let g = loss_from_costs(&c, &all_others(b), LossForm::SumOfLogs).unwrap();
            let bf = b as f64;
            assert!((g.loss - bf * bf.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(
            batch_loss(&Batch::default(), &S2dtwParams::default(), LossForm::LogOfSum),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn custom_policy_isolates_unused_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<_> = (0..3)
            .map(|_| (seq(&mut rng, 3, 3, Modality::Clip), seq(&mut rng, 3, 3, Modality::Caption)))
            .collect();
        // item 2 never enters as a negative; its own ratio has no negatives so r_2 = 1 is constant
        let batch = Batch {
            pairs,
            negatives: NegativePolicy::Custom(vec![vec![1], vec![0], vec![]]),
        };
        let out = batch_loss(&batch, &S2dtwParams::default(), LossForm::SumOfLogs).unwrap();
        assert!(out.grads_x[2].iter().flatten().all(|&v| v == 0.0));
        assert!(out.grads_y[2].iter().flatten().all(|&v| v == 0.0));
        assert!(out.grads_x[0].iter().flatten().any(|&v| v != 0.0));
    }

    #[test]
    fn loss_output_serializes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pairs: Vec<_> = (0..2)
            .map(|_| (seq(&mut rng, 2, 3, Modality::Clip), seq(&mut rng, 3, 3, Modality::Caption)))
            .collect();
        let out = batch_loss(&Batch::new(pairs), &S2dtwParams::default(), LossForm::LogOfSum).unwrap();
        let v: serde_json::Value = serde_json::to_value(&out).unwrap();
        assert!(v["loss"].is_number());
        assert_eq!(v["cost_matrix"].as_array().unwrap().len(), 2);
        assert_eq!(v["ratios"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn augmented_gradients_are_in_original_order() {
        // with a window of zero the augmented path must agree exactly with the plain one
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pairs: Vec<_> = (0..3)
            .map(|_| (seq(&mut rng, 4, 3, Modality::Clip), seq(&mut rng, 4, 3, Modality::Caption)))
            .collect();
        let batch = Batch::new(pairs);
        let p = S2dtwParams::default();
        let plain = batch_loss(&batch, &p, LossForm::LogOfSum).unwrap();
        let cfg = AugmentConfig { window: 0, ..Default::default() };
        let aug = batch_loss_augmented(&batch, &p, LossForm::LogOfSum, &cfg, &mut rng).unwrap();
        assert_eq!(plain.loss, aug.loss);
        assert_eq!(plain.grads_x, aug.grads_x);

        // a shuffled batch: gradient of the original item equals the gradient at its new slot
        let cfg = AugmentConfig { window: 2, tau: 1e6, ..Default::default() };
        let aug = batch_loss_augmented(&batch, &p, LossForm::LogOfSum, &cfg, &mut rng).unwrap();
        let perms = aug.permutations.clone().unwrap();
        let shuffled = Batch::new(
            batch
                .pairs
                .iter()
                .zip(&perms)
                .map(|((x, y), (px, py))| {
                    (
                        crate::seqcore::apply_permutation(x, px).unwrap(),
                        crate::seqcore::apply_permutation(y, py).unwrap(),
                    )
                })
                .collect(),
        );
        let direct = batch_loss(&shuffled, &p, LossForm::LogOfSum).unwrap();
        assert_eq!(direct.loss, aug.loss);
        for i in 0..3 {
            for (k, &src) in perms[i].0.indices().iter().enumerate() {
                assert_eq!(direct.grads_x[i][k], aug.grads_x[i][src]);
            }
        }
    }

    fn cost_matrix_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..6).prop_flat_map(|b| {
            proptest::collection::vec(0.0..6.0f64, b * b).prop_map(move |v| Matrix::from_vec(b, b, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn loss_monotone_in_costs(c in cost_matrix_strategy(), form_flag in proptest::bool::ANY, i in 0usize..6, j in 0usize..6, h in 0.001..1.0f64) {
            let b = c.rows();
            let (i, j) = (i % b, j % b);
            let form = if form_flag { LossForm::LogOfSum } else { LossForm::SumOfLogs };
            let neg = all_others(b);
            let base = loss_from_costs(&c, &neg, form).unwrap().loss;
            let mut p = c.clone();
            if i == j {
                p.add_at(i, i, -h);
                prop_assert!(loss_from_costs(&p, &neg, form).unwrap().loss <= base + 1e-12);
            } else {
                p.add_at(i, j, h);
                prop_assert!(loss_from_costs(&p, &neg, form).unwrap().loss <= base + 1e-12);
            }
        }

        #[test]
        fn log_of_sum_lower_bound(c in cost_matrix_strategy()) {
            let b = c.rows();
            let g = loss_from_costs(&c, &all_others(b), LossForm::LogOfSum).unwrap();
            prop_assert!(g.loss >= -(b as f64).ln() - 1e-12);
            prop_assert!(g.ratios.iter().all(|&r| r > 0.0 && r <= 1.0));
        }

        #[test]
        fn closer_negatives_get_stronger_push(c in cost_matrix_strategy(), form_flag in proptest::bool::ANY) {
            let b = c.rows();
            let form = if form_flag { LossForm::LogOfSum } else { LossForm::SumOfLogs };
            let g = loss_from_costs(&c, &all_others(b), form).unwrap();
            for i in 0..b {
                for j in 0..b {
                    for k in 0..b {
                        if j == i || k == i {
                            continue;
                        }
                        let (cj, ck) = (c.get(i, j), c.get(i, k));
                        if cj < ck - 1e-9 {
                            prop_assert!(g.d_cost.get(i, j).abs() > g.d_cost.get(i, k).abs());
                        }
                    }
                }
            }
        }

        #[test]
        fn cost_gradient_matches_finite_differences(c in cost_matrix_strategy(), form_flag in 0u8..3) {
            let b = c.rows();
            let form = [LossForm::LogOfSum, LossForm::SumOfLogs, LossForm::PositivesOnly][form_flag as usize];
            let neg = all_others(b);
            let g = loss_from_costs(&c, &neg, form).unwrap();
            let eps = 1e-6;
            for i in 0..b {
                for j in 0..b {
                    let mut p = c.clone();
                    p.add_at(i, j, eps);
                    let mut q = c.clone();
                    q.add_at(i, j, -eps);
                    let fd = (loss_from_costs(&p, &neg, form).unwrap().loss - loss_from_costs(&q, &neg, form).unwrap().loss) / (2.0 * eps);
                    prop_assert!((fd - g.d_cost.get(i, j)).abs() < 1e-6);
                }
            }
        }
    }
}
