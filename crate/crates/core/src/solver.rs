//! Block-sparse on-manifold least squares.
//!
//! Every state block is six-dimensional (poses and generalized velocities).
//! The normal matrix is held as a map of lower-triangular 6×6 blocks and
//! factored with a sparse Cholesky decomposition.

use std::collections::BTreeMap;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{FactorEvaluation, FactorKind, StateId, StateKind, StateValue};

pub const BLOCK: usize = 6;

/// States and their block layout.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    ordering: Vec<StateId>,
    values: Vec<StateValue>,
    index: BTreeMap<StateId, usize>,
}

impl StateVector {
    /// Builds a state vector whose block order is the order of `entries`.
    pub fn new(entries: Vec<(StateId, StateValue)>) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut ordering = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for (k, (id, v)) in entries.into_iter().enumerate() {
            let is_velocity = id.kind == StateKind::Velocity;
            if is_velocity != matches!(v, StateValue::Velocity(_)) {
                return Err(Error::InsufficientData(format!(
                    "state {id:?} has a value of the wrong kind"
                )));
            }
            if index.insert(id, k).is_some() {
                return Err(Error::InsufficientData(format!("state {id:?} listed twice")));
            }
            ordering.push(id);
            values.push(v);
        }
        Ok(StateVector {
            ordering,
            values,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ordering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordering.is_empty()
    }

    /// Total number of scalar unknowns.
    pub fn dim(&self) -> usize {
        self.len() * BLOCK
    }

    pub fn ordering(&self) -> &[StateId] {
        &self.ordering
    }

    pub fn block_index(&self, id: StateId) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownStateId(id))
    }

    pub fn get(&self, id: StateId) -> Result<&StateValue> {
        Ok(&self.values[self.block_index(id)?])
    }

    pub fn pose(&self, id: StateId) -> Result<&crate::lie::Pose> {
        self.get(id)?.as_pose().ok_or(Error::UnknownStateId(id))
    }

    pub fn velocity(&self, id: StateId) -> Result<&Vector6<f64>> {
        self.get(id)?.as_velocity().ok_or(Error::UnknownStateId(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateId, &StateValue)> {
        self.ordering.iter().copied().zip(self.values.iter())
    }
}

/// Symmetric block-sparse matrix; only blocks with `row >= col` are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockNormal {
    n_blocks: usize,
    blocks: BTreeMap<(usize, usize), Matrix6<f64>>,
}

impl BlockNormal {
    pub fn zeros(n_blocks: usize) -> Self {
        BlockNormal {
            n_blocks,
            blocks: BTreeMap::new(),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn dim(&self) -> usize {
        self.n_blocks * BLOCK
    }

    /// Number of stored (lower-triangular) blocks.
    pub fn nnz_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, row: usize, col: usize) -> Option<Matrix6<f64>> {
        if row >= col {
            self.blocks.get(&(row, col)).copied()
        } else {
            self.blocks.get(&(col, row)).map(|b| b.transpose())
        }
    }

    fn accumulate(&mut self, row: usize, col: usize, m: &Matrix6<f64>) {
        debug_assert!(row >= col);
        *self.blocks.entry((row, col)).or_insert_with(Matrix6::zeros) += m;
    }

    pub fn diagonal(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.dim());
        for i in 0..self.n_blocks {
            if let Some(b) = self.blocks.get(&(i, i)) {
                for k in 0..BLOCK {
                    d[i * BLOCK + k] = b[(k, k)];
                }
            }
        }
        d
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (&(r, c), b) in &self.blocks {
            m.view_mut((r * BLOCK, c * BLOCK), (BLOCK, BLOCK)).copy_from(b);
            if r != c {
                m.view_mut((c * BLOCK, r * BLOCK), (BLOCK, BLOCK))
                    .copy_from(&b.transpose());
            }
        }
        m
    }

    /// Lower-triangular entries of `self + damping * diag(self)` restricted to
    /// the blocks listed in `keep` (in that order).
    fn lower_triplets(&self, keep: &[usize], damping: f64) -> Vec<Triplet<usize, usize, f64>> {
        let mut local = vec![usize::MAX; self.n_blocks];
        for (k, &b) in keep.iter().enumerate() {
            local[b] = k;
        }
        let mut out = Vec::with_capacity(self.blocks.len() * 36);
        for (&(r, c), b) in &self.blocks {
            let (lr, lc) = (local[r], local[c]);
            if lr == usize::MAX || lc == usize::MAX {
                continue;
            }
            // keep the lower triangle in the local numbering
            let (lr, lc, b) = if lr >= lc {
                (lr, lc, *b)
            } else {
                (lc, lr, b.transpose())
            };
            for j in 0..BLOCK {
                for i in 0..BLOCK {
                    let (gi, gj) = (lr * BLOCK + i, lc * BLOCK + j);
                    if gi < gj {
                        continue;
                    }
                    let mut v = b[(i, j)];
                    if gi == gj {
                        v *= 1.0 + damping;
                    }
                    out.push(Triplet::new(gi, gj, v));
                }
            }
        }
        out
    }
}

/// `F^T W F`, `F^T W e` and `1/2 sum e^T W e` over a factor list.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalEquations {
    pub matrix: BlockNormal,
    pub gradient: DVector<f64>,
    pub cost: f64,
}

pub fn assemble(factors: &[FactorEvaluation], states: &StateVector) -> Result<NormalEquations> {
    let mut matrix = BlockNormal::zeros(states.len());
    let mut gradient = DVector::zeros(states.dim());
    let mut cost = 0.0;
    for f in factors {
        let blocks: Vec<(usize, &DMatrix<f64>)> = f
            .jacobians
            .iter()
            .map(|(id, j)| states.block_index(*id).map(|b| (b, j)))
            .collect::<Result<_>>()?;
        let we = &f.weight * &f.residual;
        cost += 0.5 * f.residual.dot(&we);
        let wf: Vec<DMatrix<f64>> = blocks.iter().map(|(_, j)| &f.weight * *j).collect();
        for (ra, ja) in blocks.iter() {
            let g = ja.transpose() * &we;
            let mut seg = gradient.rows_mut(ra * BLOCK, BLOCK);
            seg += &g;
            for (b, (rb, _)) in blocks.iter().enumerate() {
                if ra < rb {
                    continue;
                }
                let n = ja.transpose() * &wf[b];
                let n = Matrix6::from_iterator(n.iter().copied());
                if ra == rb {
                    matrix.accumulate(*ra, *rb, &((n + n.transpose()) * 0.5));
                } else {
                    matrix.accumulate(*ra, *rb, &n);
                }
            }
        }
    }
    Ok(NormalEquations { matrix, gradient, cost })
}

/// Sparse Cholesky factor of a (sub)normal matrix.
struct Factor {
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
    dim: usize,
}

impl Factor {
    fn new(normal: &BlockNormal, keep: &[usize], damping: f64) -> Result<Self> {
        let dim = keep.len() * BLOCK;
        let triplets = normal.lower_triplets(keep, damping);
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(dim, dim, &triplets)
            .map_err(|_| Error::IndefiniteSystem)?;
        let llt = a.sp_cholesky(Side::Lower).map_err(|_| Error::IndefiniteSystem)?;
        Ok(Factor { llt, dim })
    }

    fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let b = Mat::<f64>::from_fn(self.dim, rhs.ncols(), |i, j| rhs[(i, j)]);
        let x = self.llt.solve(&b);
        let out = DMatrix::from_fn(self.dim, rhs.ncols(), |i, j| x[(i, j)]);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::IndefiniteSystem)
        }
    }
}

/// Solves `(N + damping diag(N)) d = -g`.
pub fn step(normal: &BlockNormal, gradient: &DVector<f64>, damping: f64) -> Result<DVector<f64>> {
    if gradient.len() != normal.dim() {
        return Err(Error::BlockMismatch {
            expected: normal.dim(),
            got: gradient.len(),
        });
    }
    if normal.n_blocks() == 0 {
        return Ok(DVector::zeros(0));
    }
    let keep: Vec<usize> = (0..normal.n_blocks()).collect();
    let factor = Factor::new(normal, &keep, damping)?;
    let rhs = DMatrix::from_column_slice(gradient.len(), 1, (-gradient).as_slice());
    Ok(factor.solve(&rhs)?.column(0).into_owned())
}

/// `T <- T exp(-d^)` on poses, `w <- w - d` on velocities.
pub fn apply_update(states: &StateVector, delta: &DVector<f64>) -> Result<StateVector> {
    if delta.len() != states.dim() {
        return Err(Error::BlockMismatch {
            expected: states.dim(),
            got: delta.len(),
        });
    }
    let mut out = states.clone();
    for (k, v) in out.values.iter_mut().enumerate() {
        let d = Vector6::from_iterator(delta.rows(k * BLOCK, BLOCK).iter().copied());
        if d != Vector6::zeros() {
            *v = v.perturbed(&d);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub max_iterations: usize,
    pub update_tolerance: f64,
    pub relative_cost_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_consecutive_rejections: usize,
    /// Huber threshold on the whitened reprojection residual norm; `None`
    /// keeps plain least squares.
    pub huber: Option<f64>,
    pub observability_threshold: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iterations: 100,
            update_tolerance: 1e-8,
            relative_cost_tolerance: 1e-10,
            initial_damping: 1e-6,
            damping_increase: 10.0,
            damping_decrease: 3.0,
            max_consecutive_rejections: 10,
            huber: None,
            observability_threshold: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnobservableDirection {
    /// State block holding the largest share of the direction.
    pub state: StateId,
    /// Component of the unit null vector on that block.
    pub direction: [f64; 6],
    /// `sigma / sigma_max` for this direction.
    pub ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    /// Descending.
    pub singular_values: Vec<f64>,
    pub unobservable_directions: Vec<UnobservableDirection>,
}

impl ObservabilityReport {
    /// `sigma_min / sigma_max`, or 1 for an empty spectrum.
    pub fn condition_ratio(&self) -> f64 {
        match (self.singular_values.first(), self.singular_values.last()) {
            (Some(&max), Some(&min)) if max > 0.0 => min / max,
            (Some(_), Some(_)) => 0.0,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Accepted steps.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Final cost without the regularizing prior.
    pub final_data_cost: f64,
    pub singular_values: Vec<f64>,
    pub unobservable_directions: Vec<UnobservableDirection>,
}

/// IRLS reweighting for the Huber loss. Returns the robust cost.
fn apply_huber(factors: &mut [FactorEvaluation], k: f64) -> f64 {
    let mut cost = 0.0;
    for f in factors.iter_mut() {
        let s = f.residual.dot(&(&f.weight * &f.residual));
        if f.kind != FactorKind::Reprojection {
            cost += 0.5 * s;
            continue;
        }
        let r = s.sqrt();
        if r <= k {
            cost += 0.5 * s;
        } else {
            cost += k * r - 0.5 * k * k;
            f.weight *= k / r;
        }
    }
    cost
}

fn evaluate<P>(problem: &P, states: &StateVector, options: &SolveOptions) -> Result<(Vec<FactorEvaluation>, f64)>
where
    P: Fn(&StateVector) -> Result<Vec<FactorEvaluation>>,
{
    let mut factors = problem(states)?;
    let cost = match options.huber {
        Some(k) => apply_huber(&mut factors, k),
        None => factors.iter().map(FactorEvaluation::cost).sum(),
    };
    Ok((factors, cost))
}

/// Levenberg-Marquardt on the manifold.
///
/// `problem` re-evaluates every factor at a given operating point. The
/// observability fields of the report are left empty; see
/// [`observability_report`].
pub fn solve<P>(problem: P, initial: StateVector, options: &SolveOptions) -> Result<(StateVector, SolveReport)>
where
    P: Fn(&StateVector) -> Result<Vec<FactorEvaluation>>,
{
    let mut states = initial;
    let (mut factors, mut cost) = evaluate(&problem, &states, options)?;
    let initial_cost = cost;
    let mut lambda = options.initial_damping;
    let mut iterations = 0;
    let mut converged = false;

    'outer: while iterations < options.max_iterations {
        let normal = assemble(&factors, &states)?;
        let mut rejections = 0;
        loop {
            let delta = match step(&normal.matrix, &normal.gradient, lambda) {
                Ok(d) => d,
                Err(Error::IndefiniteSystem) if rejections < options.max_consecutive_rejections => {
                    lambda *= options.damping_increase;
                    rejections += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if delta.amax() < options.update_tolerance {
                converged = true;
                break 'outer;
            }
            let candidate = apply_update(&states, &delta)?;
            let (cand_factors, cand_cost) = evaluate(&problem, &candidate, options)?;
            if cand_cost < cost {
                let decrease = (cost - cand_cost) / cost.max(f64::MIN_POSITIVE);
                states = candidate;
                factors = cand_factors;
                cost = cand_cost;
                iterations += 1;
                lambda = (lambda / options.damping_decrease).max(1e-15);
                log::debug!("iteration {iterations}: cost {cost:.6e}, |d|inf {:.3e}", delta.amax());
                if decrease < options.relative_cost_tolerance {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            // an increase at rounding level means no further progress is possible
            if cand_cost <= cost * (1.0 + 1e-12) + 1e-300 {
                converged = true;
                break 'outer;
            }
            lambda *= options.damping_increase;
            rejections += 1;
            if rejections >= options.max_consecutive_rejections {
                return Err(Error::DivergenceDetected(rejections));
            }
        }
    }

    let final_data_cost = factors
        .iter()
        .filter(|f| !f.is_regularizer())
        .map(FactorEvaluation::cost)
        .sum();
    Ok((
        states,
        SolveReport {
            iterations,
            initial_cost,
            final_cost: cost,
            converged,
            final_data_cost,
            singular_values: Vec::new(),
            unobservable_directions: Vec::new(),
        },
    ))
}

/// Stacks `L^T F` (with `W = L L^T`) over the given factors, keeping only
/// the columns of `columns`.
pub fn whitened_jacobian(factors: &[FactorEvaluation], columns: &[StateId]) -> Result<DMatrix<f64>> {
    let rows: usize = factors.iter().map(FactorEvaluation::dim).sum();
    let mut out = DMatrix::zeros(rows, columns.len() * BLOCK);
    let mut r0 = 0;
    for f in factors {
        let l = f
            .weight
            .clone()
            .cholesky()
            .ok_or(Error::SingularWeight("factor weight"))?
            .l();
        for (c, id) in columns.iter().enumerate() {
            if let Some(j) = f.jacobians.get(id) {
                let w = l.transpose() * j;
                out.view_mut((r0, c * BLOCK), (f.dim(), BLOCK)).copy_from(&w);
            }
        }
        r0 += f.dim();
    }
    Ok(out)
}

fn dominant_block(v: &DVector<f64>, states: &[StateId]) -> (StateId, [f64; 6]) {
    let mut best = (0, -1.0);
    for b in 0..states.len() {
        let n = v.rows(b * BLOCK, BLOCK).norm_squared();
        if n > best.1 {
            best = (b, n);
        }
    }
    let mut d = [0.0; 6];
    d.copy_from_slice(v.rows(best.0 * BLOCK, BLOCK).as_slice());
    (states[best.0], d)
}

/// Singular values of a stacked (whitened) Jacobian whose columns are the
/// blocks of `states`, with every right-singular direction whose relative
/// singular value falls below `threshold`.
pub fn observability_report(jacobian: &DMatrix<f64>, states: &[StateId], threshold: f64) -> ObservabilityReport {
    let n = jacobian.ncols();
    debug_assert_eq!(n, states.len() * BLOCK);
    if n == 0 {
        return ObservabilityReport::default();
    }
    // pad to a tall matrix so the thin SVD returns a full right basis
    let j = if jacobian.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), jacobian.shape()).copy_from(jacobian);
        p
    } else {
        jacobian.clone()
    };
    let svd = j.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut pairs: Vec<(f64, DVector<f64>)> = svd
        .singular_values
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, v_t.row(i).transpose()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    report_from_spectrum(pairs, states, threshold)
}

fn report_from_spectrum(pairs: Vec<(f64, DVector<f64>)>, states: &[StateId], threshold: f64) -> ObservabilityReport {
    let max = pairs.first().map(|p| p.0).unwrap_or(0.0);
    let mut unobservable = Vec::new();
    for (s, v) in &pairs {
        let ratio = if max > 0.0 { s / max } else { 0.0 };
        if ratio < threshold {
            let (state, direction) = dominant_block(v, states);
            unobservable.push(UnobservableDirection {
                state,
                direction,
                ratio,
            });
        }
    }
    ObservabilityReport {
        singular_values: pairs.into_iter().map(|p| p.0).collect(),
        unobservable_directions: unobservable,
    }
}

/// Same report from an information (normal) matrix: singular values are the
/// square roots of its eigenvalues.
pub fn observability_from_information(
    information: &DMatrix<f64>,
    states: &[StateId],
    threshold: f64,
) -> ObservabilityReport {
    if information.ncols() == 0 {
        return ObservabilityReport::default();
    }
    let sym = (information + information.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut pairs: Vec<(f64, DVector<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, l)| (l.max(0.0).sqrt(), eig.eigenvectors.column(i).into_owned()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    report_from_spectrum(pairs, states, threshold)
}

/// Information on the blocks `targets` after marginalizing every other
/// state: `N_tt - N_to N_oo^-1 N_ot`.
pub fn marginal_information(normal: &BlockNormal, targets: &[usize]) -> Result<DMatrix<f64>> {
    let n = targets.len() * BLOCK;
    let mut ntt = DMatrix::zeros(n, n);
    for (a, &ra) in targets.iter().enumerate() {
        for (b, &rb) in targets.iter().enumerate() {
            if let Some(blk) = normal.block(ra, rb) {
                ntt.view_mut((a * BLOCK, b * BLOCK), (BLOCK, BLOCK)).copy_from(&blk);
            }
        }
    }
    let others: Vec<usize> = (0..normal.n_blocks()).filter(|b| !targets.contains(b)).collect();
    if others.is_empty() {
        return Ok(ntt);
    }
    let mut not = DMatrix::zeros(others.len() * BLOCK, n);
    for (a, &ra) in others.iter().enumerate() {
        for (b, &rb) in targets.iter().enumerate() {
            if let Some(blk) = normal.block(ra, rb) {
                not.view_mut((a * BLOCK, b * BLOCK), (BLOCK, BLOCK)).copy_from(&blk);
            }
        }
    }
    let factor = Factor::new(normal, &others, 0.0)?;
    let x = factor.solve(&not)?;
    let s = ntt - not.transpose() * x;
    Ok((&s + s.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{left_invariant_error, se3_exp, Pose, Twist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose_states(n: usize) -> StateVector {
        StateVector::new(
            (0..n)
                .map(|i| (StateId::vehicle(i), StateValue::Pose(Pose::identity())))
                .collect(),
        )
        .unwrap()
    }

    fn random_factor(rng: &mut impl Rng, ids: &[StateId]) -> FactorEvaluation {
        let dim = rng.random_range(1..=6);
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        let mut jacobians = BTreeMap::new();
        for id in ids {
            jacobians.insert(*id, DMatrix::from_fn(dim, 6, |_, _| rng.random_range(-1.0..1.0)));
        }
        FactorEvaluation {
            kind: FactorKind::RelativePose,
            residual: DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)),
            weight: &a * a.transpose() + DMatrix::identity(dim, dim),
            jacobians,
            point_maps: None,
        }
    }

    fn dense_oracle(factors: &[FactorEvaluation], states: &StateVector) -> (DMatrix<f64>, DVector<f64>) {
        let rows: usize = factors.iter().map(|f| f.dim()).sum();
        let mut f_all = DMatrix::zeros(rows, states.dim());
        let mut w_all = DMatrix::zeros(rows, rows);
        let mut e_all = DVector::zeros(rows);
        let mut r = 0;
        for f in factors {
            for (id, j) in &f.jacobians {
                let c = states.block_index(*id).unwrap() * BLOCK;
                let mut v = f_all.view_mut((r, c), (f.dim(), BLOCK));
                v += j;
            }
            w_all.view_mut((r, r), (f.dim(), f.dim())).copy_from(&f.weight);
            e_all.rows_mut(r, f.dim()).copy_from(&f.residual);
            r += f.dim();
        }
        (f_all.transpose() * &w_all * &f_all, f_all.transpose() * w_all * e_all)
    }

    #[test]
    fn empty_assembly() {
        let states = pose_states(2);
        let ne = assemble(&[], &states).unwrap();
        assert_eq!(ne.cost, 0.0);
        assert_eq!(ne.gradient.amax(), 0.0);
        assert_eq!(ne.matrix.to_dense().amax(), 0.0);
    }

    #[test]
    fn consistent_factor_has_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states = pose_states(2);
        let mut f = random_factor(&mut rng, &[StateId::vehicle(0), StateId::vehicle(1)]);
        f.residual.fill(0.0);
        let ne = assemble(&[f], &states).unwrap();
        assert_eq!(ne.cost, 0.0);
        assert_eq!(ne.gradient.amax(), 0.0);
        assert!(ne.matrix.to_dense().symmetric_eigenvalues().min() > -1e-12);
    }

    #[test]
    fn unknown_state_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_factor(&mut rng, &[StateId::vehicle(5)]);
        assert!(matches!(assemble(&[f], &pose_states(2)), Err(Error::UnknownStateId(_))));
    }

    #[test]
    fn sparse_assembly_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [3usize, 10, 50] {
            let states = pose_states(n);
            let factors: Vec<_> = (0..3 * n + 1)
                .map(|_| {
                    let a = rng.random_range(0..n);
                    let b = rng.random_range(0..n);
                    let ids = if a == b {
                        vec![StateId::vehicle(a)]
                    } else {
                        vec![StateId::vehicle(a), StateId::vehicle(b)]
                    };
                    random_factor(&mut rng, &ids)
                })
                .collect();
            let ne = assemble(&factors, &states).unwrap();
            let (n_dense, g_dense) = dense_oracle(&factors, &states);
            let dense = ne.matrix.to_dense();
            assert!((&dense - &n_dense).amax() <= 1e-12 * n_dense.amax().max(1.0));
            assert!((&ne.gradient - g_dense).amax() <= 1e-12 * ne.gradient.amax().max(1.0));
            assert!((&dense - dense.transpose()).amax() < 1e-12);
        }
    }

    #[test]
    fn identity_system_step() {
        let mut normal = BlockNormal::zeros(2);
        normal.accumulate(0, 0, &Matrix6::identity());
        normal.accumulate(1, 1, &Matrix6::identity());
        let g = DVector::from_fn(12, |i, _| i as f64 - 3.0);
        let d = step(&normal, &g, 0.0).unwrap();
        assert!((d + g).amax() < 1e-15);
    }

    #[test]
    fn step_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states = pose_states(6);
        let factors: Vec<_> = (0..20)
            .map(|_| {
                let a = rng.random_range(0..6);
                let b = (a + 1 + rng.random_range(0..5)) % 6;
                random_factor(&mut rng, &[StateId::vehicle(a), StateId::vehicle(b)])
            })
            .collect();
        let ne = assemble(&factors, &states).unwrap();
        let dense = ne.matrix.to_dense();
        for damping in [0.0, 1e-3] {
            let d = step(&ne.matrix, &ne.gradient, damping).unwrap();
            let mut damped = dense.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] *= 1.0 + damping;
            }
            let oracle = damped.cholesky().unwrap().solve(&(-&ne.gradient));
            assert!((&d - &oracle).norm() / oracle.norm() < 1e-10);
        }
    }

    #[test]
    fn singular_system_is_indefinite() {
        let normal = BlockNormal::zeros(1);
        let g = DVector::zeros(6);
        assert!(matches!(step(&normal, &g, 0.0), Err(Error::IndefiniteSystem)));
    }

    #[test]
    fn update_round_trip() {
        let xi = Twist::new(
            nalgebra::Vector3::new(0.2, -0.1, 0.3),
            nalgebra::Vector3::new(1.0, 2.0, -0.5),
        );
        let base = se3_exp(&Twist::new(
            nalgebra::Vector3::new(0.5, 0.1, 0.0),
            nalgebra::Vector3::new(3.0, 0.0, 1.0),
        ));
        let states = StateVector::new(vec![
            (StateId::EXTRINSIC, StateValue::Pose(base)),
            (StateId::velocity(0), StateValue::Velocity(Vector6::repeat(1.0))),
        ])
        .unwrap();
        let zero = apply_update(&states, &DVector::zeros(12)).unwrap();
        assert_eq!(zero, states);
        let mut d = DVector::zeros(12);
        d.rows_mut(0, 6).copy_from(&xi.to_vector());
        d.rows_mut(6, 6).fill(0.5);
        let there = apply_update(&states, &d).unwrap();
        let back = apply_update(&there, &-&d).unwrap();
        let p = back.pose(StateId::EXTRINSIC).unwrap();
        assert!((p.to_homogeneous() - base.to_homogeneous()).amax() < 1e-12);
        assert!((back.velocity(StateId::velocity(0)).unwrap() - Vector6::repeat(1.0)).amax() < 1e-15);
        assert!(matches!(
            apply_update(&states, &DVector::zeros(6)),
            Err(Error::BlockMismatch { .. })
        ));

        let small = xi.to_vector() * 1e-5;
        let mut d = DVector::zeros(12);
        d.rows_mut(0, 6).copy_from(&small);
        let moved = apply_update(&states, &d).unwrap();
        let err = left_invariant_error(moved.pose(StateId::EXTRINSIC).unwrap(), &base).unwrap();
        assert!((err.to_vector() - small).amax() < 1e-8);
    }

    #[test]
    fn identity_jacobian_spectrum() {
        let ids = [StateId::EXTRINSIC];
        let rep = observability_report(&DMatrix::identity(6, 6), &ids, 1e-8);
        assert!(rep.singular_values.iter().all(|s| (s - 1.0).abs() < 1e-15));
        assert!(rep.unobservable_directions.is_empty());
        let rep = observability_from_information(&DMatrix::identity(6, 6), &ids, 1e-8);
        assert!(rep.singular_values.iter().all(|s| (s - 1.0).abs() < 1e-15));
    }

    #[test]
    fn null_direction_is_located() {
        let mut j = DMatrix::<f64>::identity(12, 12);
        j[(10, 10)] = 0.0;
        let ids = [StateId::EXTRINSIC, StateId::submap(0)];
        let rep = observability_report(&j, &ids, 1e-8);
        assert_eq!(rep.unobservable_directions.len(), 1);
        let u = &rep.unobservable_directions[0];
        assert_eq!(u.state, StateId::submap(0));
        assert!((u.direction[4].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn marginal_information_matches_dense_schur() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let states = pose_states(4);
        let mut factors: Vec<_> = (0..12)
            .map(|_| {
                let a = rng.random_range(0..4);
                let b = (a + 1) % 4;
                random_factor(&mut rng, &[StateId::vehicle(a), StateId::vehicle(b)])
            })
            .collect();
        for i in 0..4 {
            let mut f = random_factor(&mut rng, &[StateId::vehicle(i)]);
            f.jacobians.insert(StateId::vehicle(i), DMatrix::identity(6, 6));
            f.residual = DVector::zeros(6);
            f.weight = DMatrix::identity(6, 6);
            factors.push(f);
        }
        let ne = assemble(&factors, &states).unwrap();
        let s = marginal_information(&ne.matrix, &[1]).unwrap();
        let n = ne.matrix.to_dense();
        let idx: Vec<usize> = (0..24).filter(|i| !(6..12).contains(i)).collect();
        let noo = n.select_rows(&idx).select_columns(&idx);
        let not = n.select_rows(&idx).columns(6, 6).into_owned();
        let ntt = n.view((6, 6), (6, 6)).into_owned();
        let oracle = ntt - not.transpose() * noo.cholesky().unwrap().solve(&not);
        assert!((s - &oracle).amax() < 1e-10 * oracle.amax());
    }

    /// Linear least squares: one Gauss-Newton step is exact.
    #[test]
    fn quadratic_problem_converges_in_one_step() {
        let target = Vector6::new(1.0, -2.0, 0.5, 3.0, 0.0, -1.0);
        let problem = |s: &StateVector| -> Result<Vec<FactorEvaluation>> {
            let w = s.velocity(StateId::velocity(0))?;
            let mut jacobians = BTreeMap::new();
            jacobians.insert(StateId::velocity(0), -DMatrix::identity(6, 6));
            Ok(vec![FactorEvaluation {
                kind: FactorKind::VelocityContinuity,
                residual: DVector::from_column_slice((w - target).as_slice()),
                weight: DMatrix::identity(6, 6) * 4.0,
                jacobians,
                point_maps: None,
            }])
        };
        let init = StateVector::new(vec![(StateId::velocity(0), StateValue::Velocity(Vector6::zeros()))]).unwrap();
        let (out, rep) = solve(
            problem,
            init,
            &SolveOptions {
                initial_damping: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((out.velocity(StateId::velocity(0)).unwrap() - target).amax() < 1e-12);
        assert!(rep.converged);
        assert!(rep.final_cost < 1e-20);
        assert_eq!(rep.iterations, 1);

        let (_, again) = solve(problem, out, &SolveOptions::default()).unwrap();
        assert!(again.converged);
        assert!(again.iterations <= 1);
    }

    /// Two poses pulled apart by priors and a relative constraint: the cost
    /// decreases monotonically to zero from a far start.
    #[test]
    fn pose_toy_converges() {
        use crate::factors::{pose_prior, relative_pose_error, MotionStates};
        use crate::scene::TimedPose;
        let m0 = se3_exp(&Twist::new(
            nalgebra::Vector3::new(0.3, -0.2, 1.0),
            nalgebra::Vector3::new(1.0, 2.0, 3.0),
        ));
        let m1 = m0
            * se3_exp(&Twist::new(
                nalgebra::Vector3::new(0.0, 0.4, 0.2),
                nalgebra::Vector3::new(2.0, 0.0, 0.0),
            ));
        let problem = |s: &StateVector| -> Result<Vec<FactorEvaluation>> {
            let p0 = s.pose(StateId::vehicle(0))?;
            let p1 = s.pose(StateId::vehicle(1))?;
            Ok(vec![
                pose_prior(StateId::vehicle(0), p0, &TimedPose::new(0.0, m0, Matrix6::identity()))?,
                relative_pose_error(
                    &MotionStates {
                        prev: StateId::vehicle(0),
                        curr: StateId::vehicle(1),
                    },
                    p0,
                    p1,
                    &m0,
                    &m1,
                    &Matrix6::identity(),
                )?,
            ])
        };
        let init = StateVector::new(vec![
            (StateId::vehicle(0), StateValue::Pose(Pose::identity())),
            (StateId::vehicle(1), StateValue::Pose(Pose::identity())),
        ])
        .unwrap();
        let (out, rep) = solve(problem, init, &SolveOptions::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.final_cost < 1e-12, "{}", rep.final_cost);
        assert!(rep.final_cost <= rep.initial_cost);
        let p1 = out.pose(StateId::vehicle(1)).unwrap();
        assert!((p1.to_homogeneous() - m1.to_homogeneous()).amax() < 1e-6);
    }
}
