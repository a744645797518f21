//! Locally smoothed Soft-DTW with weak alignment.
//!
//! The forward pipeline is: pairwise distances `Δ`, local neighborhood
//! smoothing `Δ̂`, dummy insertion `Δ̂^φ` on a `(2n+1) x (2m+1)` grid, then the
//! Soft-DTW recursion on that grid. The cost is the cumulative value at the
//! bottom-right (dummy) corner, so a path may start and end anywhere along the
//! real grid and skip any pair costlier than the dummy distance.
//!
//! The backward pass is exact reverse mode through all three stages:
//!
//! * `M`: `∂cost/∂r̂` over the augmented grid, by the reverse recursion whose
//!   edge weights are `exp((min^γ{predecessors of successor} - r̂(i,j)) / γ)`;
//! * `M̂`: `∂cost/∂δ` over the raw `n x m` grid, obtained by pulling `M` back
//!   through the smoothing layer, whose edge weights are
//!   `exp((min^γ{neighbors of successor} - δ(i,j)) / γ)`.

use serde::{Deserialize, Serialize};

use crate::dtw::{soft_dp, soft_dp_grad, softdtw_backward, softdtw_forward, softmin_unchecked};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seqcore::{pairwise_distance, DistanceMeasure, FeatureSequence};

/// Order of the smoothing and dummy-insertion stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StageOrder {
    /// Smooth the raw `n x m` distances, then insert dummies.
    #[default]
    SmoothFirst,
    /// Insert dummies, then smooth the augmented grid.
    MergeFirst,
}

impl std::str::FromStr for StageOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth-first" => Ok(StageOrder::SmoothFirst),
            "merge-first" => Ok(StageOrder::MergeFirst),
            other => Err(Error::Argument(format!("unknown stage order '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct S2dtwParams {
    /// Soft-min smoothing parameter, `> 0`.
    pub gamma: f64,
    /// Cost of any pair involving a dummy element; acts as the skip threshold.
    pub dummy_cost: f64,
    pub measure: DistanceMeasure,
    /// Local neighborhood smoothing on/off.
    pub smoothing: bool,
    /// Dummy insertion on/off.
    pub weak_alignment: bool,
    pub order: StageOrder,
}

impl Default for S2dtwParams {
    fn default() -> Self {
        S2dtwParams {
            gamma: 0.1,
            dummy_cost: 0.5,
            measure: DistanceMeasure::CosineDist,
            smoothing: true,
            weak_alignment: true,
            order: StageOrder::SmoothFirst,
        }
    }
}

impl S2dtwParams {
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    /// Plain Soft-DTW: no smoothing, no dummies.
    pub fn softdtw(gamma: f64) -> Self {
        S2dtwParams {
            gamma,
            smoothing: false,
            weak_alignment: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Argument(format!("γ must be > 0, got {}", self.gamma)));
        }
        if !self.dummy_cost.is_finite() {
            return Err(Error::Argument(format!(
                "dummy distance must be finite, got {}",
                self.dummy_cost
            )));
        }
        Ok(())
    }
}

/// Which rows and columns of an augmented grid are dummies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DummyMask {
    pub rows: Vec<bool>,
    pub cols: Vec<bool>,
}

impl DummyMask {
    pub fn none(n: usize, m: usize) -> Self {
        DummyMask {
            rows: vec![false; n],
            cols: vec![false; m],
        }
    }

    #[inline]
    pub fn is_dummy(&self, i: usize, j: usize) -> bool {
        self.rows[i] || self.cols[j]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows.len(), self.cols.len(), |i, j| {
            if self.is_dummy(i, j) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Soft-min of the causal neighbors `(i-1,j), (i,j-1), (i-1,j-1)` that exist; 0 at the origin.
fn neighbor_softmin(delta: &Matrix, i: usize, j: usize, gamma: f64) -> f64 {
    match (i, j) {
        (0, 0) => 0.0,
        (0, _) => delta.get(0, j - 1),
        (_, 0) => delta.get(i - 1, 0),
        _ => softmin_unchecked(
            &[delta.get(i - 1, j), delta.get(i, j - 1), delta.get(i - 1, j - 1)],
            gamma,
        ),
    }
}

/// Local neighborhood smoothing: `δ̂(i,j) = δ(i,j) + min^γ{δ(i-1,j), δ(i,j-1), δ(i-1,j-1)}`.
///
/// Out-of-range neighbors are left out; the origin has none and keeps its value.
pub fn smooth(delta: &Matrix, gamma: f64) -> Result<Matrix> {
    if !(gamma > 0.0) {
        return Err(Error::Argument(format!("γ must be > 0, got {gamma}")));
    }
    if let Some((i, j)) = delta.find_nan() {
        return Err(Error::Numeric(format!("NaN distance at ({}, {})", i + 1, j + 1)));
    }
    Ok(smooth_unchecked(delta, gamma))
}

fn smooth_unchecked(delta: &Matrix, gamma: f64) -> Matrix {
    Matrix::from_fn(delta.rows(), delta.cols(), |i, j| {
        delta.get(i, j) + neighbor_softmin(delta, i, j, gamma)
    })
}

/// Pulls a gradient with respect to `smooth(delta)` back to `delta`.
fn smooth_backward(delta: &Matrix, upstream: &Matrix, gamma: f64) -> Matrix {
    let (n, m) = delta.shape();
    let mut out = upstream.clone();
    for k in 0..n {
        for l in 0..m {
            if k == 0 && l == 0 {
                continue;
            }
            let g = upstream.get(k, l);
            if g == 0.0 {
                continue;
            }
            let s = neighbor_softmin(delta, k, l, gamma);
            let mut push = |i: usize, j: usize| {
                let w = ((s - delta.get(i, j)) / gamma).exp();
                out.add_at(i, j, g * w);
            };
            if k > 0 {
                push(k - 1, l);
            }
            if l > 0 {
                push(k, l - 1);
            }
            if k > 0 && l > 0 {
                push(k - 1, l - 1);
            }
        }
    }
    out
}

/// Interleaves dummy rows and columns: `[φ, x1, φ, x2, ..., xn, φ]` on both axes.
///
/// With 1-based indices, any odd row or odd column holds `dummy_cost`, and
/// entry `(2i, 2j)` holds `delta_hat(i, j)`.
pub fn insert_dummies(delta_hat: &Matrix, dummy_cost: f64) -> (Matrix, DummyMask) {
    let (n, m) = delta_hat.shape();
    let grid = Matrix::from_fn(2 * n + 1, 2 * m + 1, |a, b| {
        if a % 2 == 1 && b % 2 == 1 {
            delta_hat.get(a / 2, b / 2)
        } else {
            dummy_cost
        }
    });
    let mask = DummyMask {
        rows: (0..2 * n + 1).map(|a| a % 2 == 0).collect(),
        cols: (0..2 * m + 1).map(|b| b % 2 == 0).collect(),
    };
    (grid, mask)
}

/// Real `(n x m)` block of an augmented grid.
fn extract_real(grid: &Matrix) -> Matrix {
    let n = grid.rows() / 2;
    let m = grid.cols() / 2;
    Matrix::from_fn(n, m, |i, j| grid.get(2 * i + 1, 2 * j + 1))
}

/// Forward tables and, after [`s2dtw_backward`], the gradient matrices.
#[derive(Debug, Clone)]
pub struct S2dtwResult {
    pub params: S2dtwParams,
    /// Terminal cumulative cost.
    pub cost: f64,
    /// Raw distances `Δ` (n x m).
    pub delta: Matrix,
    /// Smoothed distances on the real grid (n x m). Equals `delta` with smoothing off.
    pub delta_hat: Matrix,
    /// Matrix the recursion runs on: `Δ̂^φ` ((2n+1) x (2m+1)) with weak alignment, else n x m.
    pub grid: Matrix,
    pub dummy_mask: DummyMask,
    /// Cumulative costs `R̂` over `grid`.
    pub r: Matrix,
    /// `M`: `∂cost/∂r̂` over `grid`.
    pub m: Option<Matrix>,
    /// `M̂`: `∂cost/∂δ` over the raw grid.
    pub m_hat: Option<Matrix>,
}

impl S2dtwResult {
    pub fn m_hat(&self) -> Result<&Matrix> {
        self.m_hat
            .as_ref()
            .ok_or_else(|| Error::State("gradients have not been computed".into()))
    }
}

fn build_grid(delta: &Matrix, params: &S2dtwParams) -> (Matrix, Matrix, DummyMask) {
    let (n, m) = delta.shape();
    let gamma = params.gamma;
    match (params.weak_alignment, params.smoothing, params.order) {
        (false, false, _) => (delta.clone(), delta.clone(), DummyMask::none(n, m)),
        (false, true, _) => {
            let s = smooth_unchecked(delta, gamma);
            (s.clone(), s, DummyMask::none(n, m))
        }
        (true, false, _) => {
            let (grid, mask) = insert_dummies(delta, params.dummy_cost);
            (delta.clone(), grid, mask)
        }
        (true, true, StageOrder::SmoothFirst) => {
            let s = smooth_unchecked(delta, gamma);
            let (grid, mask) = insert_dummies(&s, params.dummy_cost);
            (s, grid, mask)
        }
        (true, true, StageOrder::MergeFirst) => {
            let (aug, mask) = insert_dummies(delta, params.dummy_cost);
            let grid = smooth_unchecked(&aug, gamma);
            (extract_real(&grid), grid, mask)
        }
    }
}

/// Forward pass from a precomputed distance matrix.
pub fn s2dtw_forward_delta(delta: &Matrix, params: &S2dtwParams) -> Result<S2dtwResult> {
    params.validate()?;
    if delta.rows() == 0 || delta.cols() == 0 {
        return Err(Error::Argument("empty distance matrix".into()));
    }
    if let Some((i, j)) = delta.find_nan() {
        return Err(Error::Numeric(format!("NaN distance at ({}, {})", i + 1, j + 1)));
    }
    let (delta_hat, grid, dummy_mask) = build_grid(delta, params);
    let r = soft_dp(&grid, params.gamma)?;
    let cost = r.get(r.rows() - 1, r.cols() - 1);
    Ok(S2dtwResult {
        params: *params,
        cost,
        delta: delta.clone(),
        delta_hat,
        grid,
        dummy_mask,
        r,
        m: None,
        m_hat: None,
    })
}

/// Forward pass: distances, smoothing, dummy merge and the soft recursion.
pub fn s2dtw_forward(
    x: &FeatureSequence,
    y: &FeatureSequence,
    params: &S2dtwParams,
) -> Result<S2dtwResult> {
    params.validate()?;
    let delta = pairwise_distance(x, y, params.measure)?;
    s2dtw_forward_delta(delta.values(), params)
}

/// Fills `M` and `M̂` on a forward result.
pub fn s2dtw_backward(mut result: S2dtwResult) -> Result<S2dtwResult> {
    let params = result.params;
    let (n, m) = result.delta.shape();
    let expected = if params.weak_alignment {
        (2 * n + 1, 2 * m + 1)
    } else {
        (n, m)
    };
    if result.grid.shape() != expected || result.r.shape() != expected {
        return Err(Error::State(format!(
            "forward tables have shape {:?}/{:?}, expected {:?}",
            result.grid.shape(),
            result.r.shape(),
            expected
        )));
    }
    let gamma = params.gamma;
    let grad_grid = soft_dp_grad(&result.grid, &result.r, gamma);

    let m_hat = match (params.weak_alignment, params.smoothing, params.order) {
        (false, false, _) => grad_grid.clone(),
        (false, true, _) => smooth_backward(&result.delta, &grad_grid, gamma),
        (true, false, _) => extract_real(&grad_grid),
        (true, true, StageOrder::SmoothFirst) => {
            smooth_backward(&result.delta, &extract_real(&grad_grid), gamma)
        }
        (true, true, StageOrder::MergeFirst) => {
            let (aug, _) = insert_dummies(&result.delta, params.dummy_cost);
            extract_real(&smooth_backward(&aug, &grad_grid, gamma))
        }
    };
    if !m_hat.all_finite() || !grad_grid.all_finite() {
        return Err(Error::Numeric("S2DTW gradient is not finite".into()));
    }
    result.m = Some(grad_grid);
    result.m_hat = Some(m_hat);
    Ok(result)
}

/// Forward and backward in one call.
pub fn s2dtw(x: &FeatureSequence, y: &FeatureSequence, params: &S2dtwParams) -> Result<S2dtwResult> {
    s2dtw_backward(s2dtw_forward(x, y, params)?)
}

/// Chain rule from a weight matrix over `Δ(X, Y)` to the items of `X` and `Y`:
/// `gX[i] = Σ_j w(i,j) ∂δ(x_i, y_j)/∂x_i`, and likewise for `Y`.
pub fn embedding_grads(
    weights: &Matrix,
    x: &FeatureSequence,
    y: &FeatureSequence,
    measure: DistanceMeasure,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if weights.shape() != (x.len(), y.len()) {
        return Err(Error::Shape {
            expected: (x.len(), y.len()),
            actual: weights.shape(),
        });
    }
    x.check_measure(measure)?;
    y.check_measure(measure)?;
    let d = x.dim();
    let mut gx = vec![vec![0.0; d]; x.len()];
    let mut gy = vec![vec![0.0; d]; y.len()];
    for i in 0..x.len() {
        for j in 0..y.len() {
            let w = weights.get(i, j);
            if w == 0.0 {
                continue;
            }
            measure.accumulate_grad_x(x.item(i), y.item(j), w, &mut gx[i]);
            measure.accumulate_grad_x(y.item(j), x.item(i), w, &mut gy[j]);
        }
    }
    Ok((gx, gy))
}

/// Gradient of the cost with respect to every item of `X` and `Y`.
pub fn grad_wrt_embeddings(
    result: &S2dtwResult,
    x: &FeatureSequence,
    y: &FeatureSequence,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    embedding_grads(result.m_hat()?, x, y, result.params.measure)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathVariant {
    SoftDtw,
    S2dtw,
}

/// Soft alignment path for display, scaled so the largest entry is 1.
///
/// `S2dtw` gives `M̂`; `SoftDtw` runs plain Soft-DTW on the raw distances with the
/// same `γ` and gives its `M`.
pub fn path_matrix(result: &S2dtwResult, variant: PathVariant) -> Result<Matrix> {
    let raw = match variant {
        PathVariant::S2dtw => result.m_hat()?.clone(),
        PathVariant::SoftDtw => {
            let (_, tables) = softdtw_forward(&result.delta, result.params.gamma)?;
            softdtw_backward(&result.delta, &tables, result.params.gamma)?
        }
    };
    Ok(normalize_by_max(&raw))
}

pub(crate) fn normalize_by_max(m: &Matrix) -> Matrix {
    let peak = m.max_abs();
    if peak == 0.0 {
        m.clone()
    } else {
        m.map(|v| v / peak)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtw::dtw_bruteforce;
    use crate::seqcore::Modality;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn smooth_examples() {
        assert_eq!(smooth(&mat(&[&[0.7]]), 1.0).unwrap(), mat(&[&[0.7]]));
        let s = smooth(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]), 1.0).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(0, 1), 3.0);
        assert_eq!(s.get(1, 0), 4.0);
        assert!((s.get(1, 1) - 4.592_394_035_555_619_6).abs() < 1e-12);
    }

    #[test]
    fn smooth_rejects_bad_gamma_and_nan() {
        assert!(smooth(&mat(&[&[1.0]]), 0.0).is_err());
        assert!(matches!(smooth(&mat(&[&[f64::NAN]]), 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn dummy_layout() {
        let (g, mask) = insert_dummies(&Matrix::filled(2, 3, 9.0), 0.5);
        assert_eq!(g.shape(), (5, 7));
        for a in 0..5 {
            for b in 0..7 {
                // 1-based odd <=> 0-based even
                let dummy = a % 2 == 0 || b % 2 == 0;
                assert_eq!(mask.is_dummy(a, b), dummy);
                assert_eq!(g.get(a, b), if dummy { 0.5 } else { 9.0 });
            }
        }
        let (g, _) = insert_dummies(&mat(&[&[3.0]]), 0.25);
        assert_eq!(
            g,
            mat(&[&[0.25, 0.25, 0.25], &[0.25, 3.0, 0.25], &[0.25, 0.25, 0.25]])
        );
    }

    #[test]
    fn one_by_one_matches_bruteforce_on_augmented_grid() {
        let params = S2dtwParams::default().with_gamma(1e-4);
        for c in [0.0, 0.2, 0.5, 1.3] {
            let delta = mat(&[&[c]]);
            let res = s2dtw_forward_delta(&delta, &params).unwrap();
            let oracle_grid = insert_dummies(&smooth(&delta, 1e-4).unwrap(), 0.5).0;
            let (bf, _) = dtw_bruteforce(&oracle_grid).unwrap();
            assert!((res.cost - bf).abs() < 1e-3, "{c}: {} vs {bf}", res.cost);
        }
    }

    #[test]
    fn entirely_irrelevant_pair_is_skipped() {
        let delta = Matrix::filled(4, 5, 2.0);
        let params = S2dtwParams::default();
        let res = s2dtw_backward(s2dtw_forward_delta(&delta, &params).unwrap()).unwrap();
        let (n, m) = (4.0, 5.0);
        let hi = (2.0 * (n + m) + 1.0) * 0.5;
        let lo = (2.0 * f64::max(n, m) + 1.0) * 0.5;
        // the soft-min can only lower the cost, by at most γ ln(#paths)
        assert!(res.cost <= hi + 1e-9);
        assert!(res.cost >= lo - 0.1 * (3.0f64.powi(20)).ln());
        assert!(res.m_hat().unwrap().sum() < 0.05);
    }

    #[test]
    fn backward_fills_shapes_and_requires_state() {
        let delta = mat(&[&[0.1, 0.9], &[0.8, 0.2], &[0.5, 0.4]]);
        let params = S2dtwParams::default();
        let fwd = s2dtw_forward_delta(&delta, &params).unwrap();
        assert!(matches!(path_matrix(&fwd, PathVariant::S2dtw), Err(Error::State(_))));
        let mut broken = fwd.clone();
        broken.r = Matrix::zeros(2, 2);
        assert!(matches!(s2dtw_backward(broken), Err(Error::State(_))));
        let res = s2dtw_backward(fwd).unwrap();
        assert_eq!(res.m.as_ref().unwrap().shape(), (7, 5));
        assert_eq!(res.m_hat.as_ref().unwrap().shape(), (3, 2));
        assert!(res.m_hat.as_ref().unwrap().as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_gradient_row_gives_zero_embedding_gradient() {
        let x = FeatureSequence::new(vec![vec![1.0, 0.5], vec![0.2, 1.0]], Modality::Clip).unwrap();
        let y = FeatureSequence::new(vec![vec![0.3, 0.3], vec![-1.0, 0.1]], Modality::Caption).unwrap();
        let w = mat(&[&[0.0, 0.0], &[0.4, 0.6]]);
        let (gx, _) = embedding_grads(&w, &x, &y, DistanceMeasure::CosineDist).unwrap();
        assert_eq!(gx[0], vec![0.0, 0.0]);
    }

    #[test]
    fn cosine_scale_invariance() {
        let x = FeatureSequence::new(vec![vec![1.0, 0.5, -0.2], vec![0.2, 1.0, 0.3]], Modality::Clip).unwrap();
        let mut scaled = x.clone().into_items();
        for v in &mut scaled[1] {
            *v *= 3.5;
        }
        let xs = FeatureSequence::new(scaled, Modality::Clip).unwrap();
        let y = FeatureSequence::new(vec![vec![0.3, 0.3, 0.9], vec![-1.0, 0.1, 0.0]], Modality::Caption).unwrap();
        let p = S2dtwParams::default();
        let a = s2dtw(&x, &y, &p).unwrap();
        let b = s2dtw(&xs, &y, &p).unwrap();
        assert!((a.cost - b.cost).abs() < 1e-12);
        let (ma, mb) = (a.m_hat.unwrap(), b.m_hat.unwrap());
        for (u, v) in ma.as_slice().iter().zip(mb.as_slice()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softdtw_path_terminal_normalizes_to_one() {
        let delta = mat(&[&[0.3, 0.1, 0.9], &[0.4, 0.2, 0.5]]);
        let res = s2dtw_backward(s2dtw_forward_delta(&delta, &S2dtwParams::default()).unwrap()).unwrap();
        let p = path_matrix(&res, PathVariant::SoftDtw).unwrap();
        // every path visits both corners, so they share the peak up to rounding
        assert!((p.get(1, 2) - 1.0).abs() < 1e-12);
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(p.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn all_zero_path_passes_through() {
        assert_eq!(normalize_by_max(&Matrix::zeros(2, 2)), Matrix::zeros(2, 2));
    }

    #[test]
    fn without_dummies_or_smoothing_matches_softdtw() {
        let delta = mat(&[&[0.3, 0.1, 0.9], &[0.4, 0.2, 0.5]]);
        let p = S2dtwParams::softdtw(0.3);
        let res = s2dtw_backward(s2dtw_forward_delta(&delta, &p).unwrap()).unwrap();
        let (c, t) = softdtw_forward(&delta, 0.3).unwrap();
        assert_eq!(res.cost, c);
        assert_eq!(res.m_hat.unwrap(), softdtw_backward(&delta, &t, 0.3).unwrap());
    }
}
