//! Windowed temporal permutations and the self-similarity-preserving
//! distribution used to sample them.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{apply_permutation, self_similarity, DistanceMeasure, FeatureSequence};

/// Default cap on `|T(n, w)|`.
pub const ENUMERATION_GUARD: usize = 10_000;

/// A bijection on `{0..n}`; output position `k` takes input item `indices[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let n = indices.len();
        let mut seen = vec![false; n];
        for &k in &indices {
            if k >= n || seen[k] {
                return Err(Error::Permutation(format!("{indices:?} is not a bijection on 0..{n}")));
            }
            seen[k] = true;
        }
        Ok(Permutation(indices))
    }

    pub fn from_one_based(indices: &[usize]) -> Result<Self> {
        if indices.contains(&0) {
            return Err(Error::Permutation("1-based permutation contains 0".into()));
        }
        Self::new(indices.iter().map(|&k| k - 1).collect())
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.0.iter().map(|k| k + 1).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(k, &v)| k == v)
    }

    pub fn max_displacement(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .map(|(k, &v)| k.abs_diff(v))
            .max()
            .unwrap_or(0)
    }

    pub fn within_window(&self, w: usize) -> bool {
        self.max_displacement() <= w
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

/// `|T(n, w)|` without enumerating, saturating at `u128::MAX`.
///
/// For `w >= 12` with `n > w + 1` the set has more than `13!` members and
/// `u128::MAX` is returned instead of the exact count.
pub fn count_windowed(n: usize, w: usize) -> u128 {
    if n == 0 {
        return 1;
    }
    if w + 1 >= n {
        return (1..=n as u128).fold(1u128, |acc, k| acc.saturating_mul(k));
    }
    if w >= 12 {
        return u128::MAX;
    }
    // bit b of the mask says value (k - w + b) is already used, for the window around position k
    let width = 2 * w + 1;
    let mut states: HashMap<u64, u128> = HashMap::from([(0u64, 1u128)]);
    for k in 0..n {
        let mut next: HashMap<u64, u128> = HashMap::new();
        for (&mask, &count) in &states {
            for b in 0..width {
                let v = k as isize - w as isize + b as isize;
                if v < 0 || v >= n as isize || mask & (1 << b) != 0 {
                    continue;
                }
                let used = mask | (1 << b);
                // value k - w leaves the window next step and must be taken by now
                if k >= w && used & 1 == 0 {
                    continue;
                }
                let e = next.entry(used >> 1).or_insert(0);
                *e = e.saturating_add(count);
            }
        }
        states = next;
    }
    states.values().fold(0u128, |a, &b| a.saturating_add(b))
}

/// All permutations of `n` items with displacement at most `w`, in lexicographic order.
pub fn windowed_permutations(n: usize, w: usize) -> Result<Vec<Permutation>> {
    windowed_permutations_with_guard(n, w, ENUMERATION_GUARD)
}

pub fn windowed_permutations_with_guard(n: usize, w: usize, guard: usize) -> Result<Vec<Permutation>> {
    if n == 0 {
        return Err(Error::Argument("permutation length must be at least 1".into()));
    }
    let count = count_windowed(n, w);
    if count > guard as u128 {
        return Err(Error::Size {
            what: "|T(n, w)|",
            actual: count,
            limit: guard as u128,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; n];
    enumerate(n, w, &mut current, &mut used, &mut out);
    Ok(out)
}

fn enumerate(
    n: usize,
    w: usize,
    current: &mut Vec<usize>,
    used: &mut [bool],
    out: &mut Vec<Permutation>,
) {
    let k = current.len();
    if k == n {
        out.push(Permutation(current.clone()));
        return;
    }
    // a value that would fall out of every remaining window has to be placed now
    if k >= w + 1 && !used[k - w - 1] {
        return;
    }
    let lo = k.saturating_sub(w);
    let hi = (k + w).min(n - 1);
    for v in lo..=hi {
        if !used[v] {
            used[v] = true;
            current.push(v);
            enumerate(n, w, current, used, out);
            current.pop();
            used[v] = false;
        }
    }
}

/// How permutation probabilities relate to the self-similarity change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugmentStrategy {
    /// Favors permutations that keep the self-similarity structure.
    #[default]
    Preserving,
    /// Uniform over the window set.
    Uniform,
    /// Favors permutations that change the self-similarity structure the most.
    Inverse,
}

/// Softmax distribution over `T(n, w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationDistribution {
    pub n: usize,
    pub w: usize,
    pub tau: f64,
    pub perms: Vec<Permutation>,
    pub probs: Vec<f64>,
    /// `‖Δ(X,X) - Δ(X_π,X_π)‖²` per permutation.
    pub sq_diffs: Vec<f64>,
}

impl PermutationDistribution {
    /// Point mass on the identity.
    pub fn identity(n: usize) -> Self {
        PermutationDistribution {
            n,
            w: 0,
            tau: 1.0,
            perms: vec![Permutation::identity(n)],
            probs: vec![1.0],
            sq_diffs: vec![0.0],
        }
    }

    pub fn prob_of(&self, perm: &Permutation) -> f64 {
        self.perms
            .iter()
            .position(|p| p == perm)
            .map_or(0.0, |k| self.probs[k])
    }
}

/// `p(π) ∝ exp(-‖Δ(X,X) - Δ(X_π,X_π)‖²_F / τ)` over `π ∈ T(n, w)`.
pub fn permutation_distribution(
    x: &FeatureSequence,
    w: usize,
    tau: f64,
    measure: DistanceMeasure,
) -> Result<PermutationDistribution> {
    permutation_distribution_with(x, w, tau, measure, AugmentStrategy::Preserving)
}

pub fn permutation_distribution_with(
    x: &FeatureSequence,
    w: usize,
    tau: f64,
    measure: DistanceMeasure,
    strategy: AugmentStrategy,
) -> Result<PermutationDistribution> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be > 0, got {tau}")));
    }
    let perms = windowed_permutations(x.len(), w)?;
    let base = self_similarity(x, measure)?;
    let sq_diffs: Vec<f64> = perms
        .iter()
        .map(|p| base.frobenius_sq_diff(&base.conjugate(p.indices())))
        .collect();
    let logits: Vec<f64> = sq_diffs
        .iter()
        .map(|&d| match strategy {
            AugmentStrategy::Preserving => -d / tau,
            AugmentStrategy::Uniform => 0.0,
            AugmentStrategy::Inverse => d / tau,
        })
        .collect();
    let probs = softmax(&logits);
    Ok(PermutationDistribution {
        n: x.len(),
        w,
        tau,
        perms,
        probs,
        sq_diffs,
    })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let hi = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - hi).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Inverse-CDF draw.
pub fn sample_permutation<R: Rng + ?Sized>(dist: &PermutationDistribution, rng: &mut R) -> Permutation {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (p, &prob) in dist.perms.iter().zip(&dist.probs) {
        acc += prob;
        if u < acc {
            return p.clone();
        }
    }
    // u landed in the rounding gap above the accumulated total
    let last = dist.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    dist.perms[last].clone()
}

/// Window, temperature and strategy for temporal augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub window: usize,
    pub tau: f64,
    pub strategy: AugmentStrategy,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            window: 1,
            tau: 0.1,
            strategy: AugmentStrategy::Preserving,
        }
    }
}

/// Augmented pair and the permutations that produced it.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub x: FeatureSequence,
    pub y: FeatureSequence,
    pub perm_x: Permutation,
    pub perm_y: Permutation,
}

/// Shuffles clips and captions independently.
pub fn augment_pair<R: Rng + ?Sized>(
    x: &FeatureSequence,
    y: &FeatureSequence,
    config: &AugmentConfig,
    measure: DistanceMeasure,
    rng: &mut R,
) -> Result<AugmentedPair> {
    let draw = |s: &FeatureSequence, rng: &mut R| -> Result<Permutation> {
        if config.window == 0 || s.len() == 1 {
            return Ok(Permutation::identity(s.len()));
        }
        let dist = permutation_distribution_with(s, config.window, config.tau, measure, config.strategy)?;
        Ok(sample_permutation(&dist, rng))
    };
    let perm_x = draw(x, rng)?;
    let perm_y = draw(y, rng)?;
    Ok(AugmentedPair {
        x: apply_permutation(x, &perm_x)?,
        y: apply_permutation(y, &perm_y)?,
        perm_x,
        perm_y,
    })
}
