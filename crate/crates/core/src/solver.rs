//! Levenberg–Marquardt over the unfixed state blocks of a [`ProblemTree`].
//!
//! The solver keeps a mirror of the tree's blocks and factors that is updated
//! only through drained notifications. Each call to [`SolverProblem::lm_solve`]
//! snapshots the current values, iterates, and writes the result back.

use std::collections::{BTreeMap, HashMap};

use indexmap::IndexSet;
use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factors::{Factor, Loss};
use crate::manifold::{kind_plus, BlockKind, StateBlock};
use crate::tree::{BlockRef, NodeId, Notification, ProblemTree};

const SINGULAR_PIVOT: f64 = 1e-12;
/// Relative cost change below which a model-predicted decrease is accepted.
const COST_ROUNDING: f64 = 8.0 * f64::EPSILON;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
    pub tol_dx: f64,
    pub tol_grad: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 10.0,
            lambda_max: 1e8,
            tol_dx: 1e-10,
            tol_grad: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    ConvergedDx,
    ConvergedGrad,
    MaxIter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    pub accepted_steps: usize,
    /// Number of columns (unfixed tangent coordinates) in the linear system.
    pub columns: usize,
    /// Number of nonzero block entries in the upper triangle of `JᵀJ`.
    pub nnz_blocks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnBlock {
    pub block: BlockRef,
    pub kind: BlockKind,
    pub offset: usize,
}

/// Column layout of the unfixed blocks touched by at least one factor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    pub columns: Vec<ColumnBlock>,
    index: HashMap<BlockRef, usize>,
    pub dim: usize,
}

impl Layout {
    pub fn column_of(&self, r: &BlockRef) -> Option<&ColumnBlock> {
        self.index.get(r).map(|&i| &self.columns[i])
    }
}

/// Block-sparse normal equations: `H` stored as upper-triangular block pairs.
#[derive(Clone, Debug, Default)]
pub struct NormalEquations {
    pub blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
    pub g: DVector<f64>,
    pub cost: f64,
    pub residuals: Vec<DVector<f64>>,
}

impl NormalEquations {
    pub fn nnz_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn to_dense(&self, layout: &Layout) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(layout.dim, layout.dim);
        for (&(a, b), m) in &self.blocks {
            let oa = layout.columns[a].offset;
            let ob = layout.columns[b].offset;
            h.view_mut((oa, ob), m.shape()).copy_from(m);
            if a != b {
                h.view_mut((ob, oa), (m.ncols(), m.nrows())).copy_from(&m.transpose());
            }
        }
        h
    }
}

#[derive(Debug, Default)]
pub struct SolverProblem {
    blocks: IndexSet<BlockRef>,
    factors: IndexSet<NodeId>,
    pub options: SolverOptions,
}

type Values = HashMap<BlockRef, StateBlock>;

impl SolverProblem {
    pub fn new(options: SolverOptions) -> Self {
        Self {
            blocks: IndexSet::new(),
            factors: IndexSet::new(),
            options,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn contains_block(&self, r: &BlockRef) -> bool {
        self.blocks.contains(r)
    }

    pub fn contains_factor(&self, id: NodeId) -> bool {
        self.factors.contains(&id)
    }

    pub fn factor_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.factors.iter().copied()
    }

    /// Drains the tree's notification queue into the mirror.
    pub fn sync(&mut self, tree: &mut ProblemTree) -> Result<()> {
        for n in tree.drain_notifications() {
            match n {
                Notification::AddBlock(r) => {
                    if !self.blocks.insert(r.clone()) {
                        return Err(Error::Consistency(format!("block {r} added twice")));
                    }
                }
                Notification::RemoveBlock(r) => {
                    if !self.blocks.shift_remove(&r) {
                        return Err(Error::Consistency(format!("removal of unknown block {r}")));
                    }
                }
                Notification::AddFactor(id) => {
                    if !self.factors.insert(id) {
                        return Err(Error::Consistency(format!("factor {id} added twice")));
                    }
                }
                Notification::RemoveFactor(id) => {
                    if !self.factors.shift_remove(&id) {
                        return Err(Error::Consistency(format!("removal of unknown factor {id}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn gather<'a>(&self, tree: &'a ProblemTree) -> Result<Vec<(NodeId, &'a Factor)>> {
        let mut out = Vec::with_capacity(self.factors.len());
        for &id in &self.factors {
            let f = tree
                .factor(id)
                .map_err(|_| Error::Consistency(format!("factor {id} is not live in the tree")))?;
            for r in &f.constrained {
                if !self.blocks.contains(r) {
                    return Err(Error::Consistency(format!(
                        "factor {id} constrains block {r} unknown to the solver"
                    )));
                }
            }
            out.push((id, f));
        }
        Ok(out)
    }

    /// Columns over unfixed blocks touched by a factor, in mirror order.
    pub fn layout(&self, tree: &ProblemTree) -> Result<Layout> {
        let factors = self.gather(tree)?;
        let mut touched: IndexSet<&BlockRef> = IndexSet::new();
        for (_, f) in &factors {
            touched.extend(f.constrained.iter());
        }
        let mut layout = Layout::default();
        for r in &self.blocks {
            if !touched.contains(r) {
                continue;
            }
            let b = tree.block(r)?;
            if b.fixed {
                continue;
            }
            layout.index.insert(r.clone(), layout.columns.len());
            layout.columns.push(ColumnBlock {
                block: r.clone(),
                kind: b.kind(),
                offset: layout.dim,
            });
            layout.dim += b.tangent_dim();
        }
        Ok(layout)
    }

    fn snapshot(&self, tree: &ProblemTree, factors: &[(NodeId, &Factor)]) -> Result<Values> {
        let mut values = Values::new();
        for (_, f) in factors {
            for r in &f.constrained {
                if !values.contains_key(r) {
                    values.insert(r.clone(), tree.block(r)?.clone());
                }
            }
        }
        Ok(values)
    }

    /// `Σ rho(‖r‖²) / 2` at the tree's current values.
    pub fn total_cost(&self, tree: &ProblemTree) -> Result<f64> {
        let factors = self.gather(tree)?;
        let values = self.snapshot(tree, &factors)?;
        total_cost(&factors, &values)
    }

    /// Linearizes at the tree's current values.
    pub fn linearize(&self, tree: &ProblemTree) -> Result<(Layout, NormalEquations)> {
        let layout = self.layout(tree)?;
        let factors = self.gather(tree)?;
        let values = self.snapshot(tree, &factors)?;
        let ne = linearize(&factors, &values, &layout)?;
        Ok((layout, ne))
    }

    pub fn lm_solve(&mut self, tree: &mut ProblemTree) -> Result<SolveReport> {
        let opts = self.options.clone();
        let layout = self.layout(tree)?;
        let factors = self.gather(tree)?;
        if layout.dim == 0 || factors.is_empty() {
            return Err(Error::ContractViolation(
                "nothing to solve: no unfixed block is touched by a factor".into(),
            ));
        }
        let mut values = self.snapshot(tree, &factors)?;

        let mut ne = linearize(&factors, &values, &layout)?;
        let initial_cost = ne.cost;
        if !initial_cost.is_finite() {
            return Err(Error::Divergence(format!("initial cost is {initial_cost}")));
        }
        check_rank(&ne.to_dense(&layout))?;
        let nnz_blocks = ne.nnz_blocks();

        let mut lambda = opts.lambda_init;
        let mut cost = initial_cost;
        let mut accepted = 0;
        let mut iterations = 0;
        let mut termination = Termination::MaxIter;

        'outer: while iterations < opts.max_iterations {
            iterations += 1;
            if ne.g.amax() < opts.tol_grad {
                termination = Termination::ConvergedGrad;
                break;
            }
            let h = ne.to_dense(&layout);
            loop {
                let mut damped = h.clone();
                for i in 0..layout.dim {
                    damped[(i, i)] += lambda * h[(i, i)];
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= opts.lambda_up;
                    if lambda > opts.lambda_max {
                        return Err(Error::SingularSystem(format!(
                            "damped system not positive definite up to lambda = {}",
                            opts.lambda_max
                        )));
                    }
                    continue;
                };
                let dx = chol.solve(&ne.g);
                let step_norm = dx.amax();
                let trial = apply_step(&values, &layout, &dx)?;
                let trial_res = residuals(&factors, &trial)?;
                let change = cost_change(&factors, &ne.residuals, &trial_res);
                let predicted = dx.dot(&ne.g) - 0.5 * dx.dot(&(&h * &dx));
                let within_rounding = predicted > 0.0 && change <= COST_ROUNDING * cost;
                if change.is_finite() && (change < 0.0 || within_rounding) {
                    let trial_cost = trial_res
                        .iter()
                        .zip(&factors)
                        .map(|(r, (_, f))| f.loss.evaluate(r.norm_squared()).0 / 2.0)
                        .sum::<f64>();
                    values = trial;
                    cost = trial_cost;
                    accepted += 1;
                    lambda = (lambda / opts.lambda_down).max(f64::MIN_POSITIVE);
                    debug!("lm iter {iterations}: cost {cost:.6e}, |dx| {step_norm:.3e}, lambda {lambda:.1e}");
                    if step_norm < opts.tol_dx {
                        termination = Termination::ConvergedDx;
                        break 'outer;
                    }
                    ne = linearize(&factors, &values, &layout)?;
                    break;
                }
                if step_norm < opts.tol_dx {
                    termination = Termination::ConvergedDx;
                    break 'outer;
                }
                lambda *= opts.lambda_up;
                if lambda > opts.lambda_max {
                    termination = Termination::ConvergedDx;
                    break 'outer;
                }
            }
        }

        for col in &layout.columns {
            tree.set_block_values(&col.block, values[&col.block].values())?;
        }
        Ok(SolveReport {
            iterations,
            initial_cost,
            final_cost: cost,
            termination,
            accepted_steps: accepted,
            columns: layout.dim,
            nnz_blocks,
        })
    }
}

fn evaluate<'a>(f: &Factor, values: &'a Values) -> Result<crate::factors::Residual> {
    let blocks: Vec<&'a StateBlock> = f.constrained.iter().map(|r| &values[r]).collect();
    f.evaluate(&blocks)
}

fn total_cost(factors: &[(NodeId, &Factor)], values: &Values) -> Result<f64> {
    Ok(residuals(factors, values)?
        .iter()
        .zip(factors)
        .map(|(r, (_, f))| f.loss.evaluate(r.norm_squared()).0 / 2.0)
        .sum())
}

fn residuals(factors: &[(NodeId, &Factor)], values: &Values) -> Result<Vec<DVector<f64>>> {
    factors.iter().map(|(_, f)| Ok(evaluate(f, values)?.r)).collect()
}

/// Cost difference `new - old`, accumulated per factor from residual
/// differences so that tiny decreases near the optimum are not lost to
/// cancellation between two large totals.
fn cost_change(factors: &[(NodeId, &Factor)], old: &[DVector<f64>], new: &[DVector<f64>]) -> f64 {
    let mut change = 0.0;
    for (((_, f), a), b) in factors.iter().zip(old).zip(new) {
        let ds = (b - a).dot(&(b + a));
        let (sa, sb) = (a.norm_squared(), b.norm_squared());
        let drho = match f.loss {
            Loss::Huber(k) if sa > k * k && sb > k * k => 2.0 * k * ds / (sa.sqrt() + sb.sqrt()),
            Loss::Huber(_) => f.loss.evaluate(sb).0 - f.loss.evaluate(sa).0,
            Loss::None => ds,
        };
        change += drho / 2.0;
    }
    change
}

fn linearize(factors: &[(NodeId, &Factor)], values: &Values, layout: &Layout) -> Result<NormalEquations> {
    let mut ne = NormalEquations {
        blocks: BTreeMap::new(),
        g: DVector::zeros(layout.dim),
        cost: 0.0,
        residuals: Vec::with_capacity(factors.len()),
    };
    for (_, f) in factors {
        let res = evaluate(f, values)?;
        let (rho, weight) = f.loss.evaluate(res.r.norm_squared());
        ne.cost += rho / 2.0;
        ne.residuals.push(res.r.clone());
        let sw = weight.sqrt();
        let r = res.r * sw;
        let cols: Vec<(usize, DMatrix<f64>)> = f
            .constrained
            .iter()
            .zip(res.jacobians)
            .filter_map(|(b, j)| layout.index.get(b).map(|&c| (c, j * sw)))
            .collect();
        for (a, ja) in &cols {
            let off = layout.columns[*a].offset;
            let mut seg = ne.g.rows_mut(off, ja.ncols());
            seg -= ja.transpose() * &r;
            for (b, jb) in &cols {
                if a > b {
                    continue;
                }
                let contrib = ja.transpose() * jb;
                ne.blocks
                    .entry((*a, *b))
                    .and_modify(|m| *m += &contrib)
                    .or_insert(contrib);
            }
        }
    }
    Ok(ne)
}

/// Adds each column block's slice of `dx` through its plus operator.
pub fn apply_step(values: &Values, layout: &Layout, dx: &DVector<f64>) -> Result<Values> {
    if dx.len() != layout.dim {
        return Err(Error::ContractViolation(format!(
            "step of length {} for {} columns",
            dx.len(),
            layout.dim
        )));
    }
    let mut out = values.clone();
    for col in &layout.columns {
        let b = out
            .get_mut(&col.block)
            .ok_or_else(|| Error::Consistency(format!("no value for block {}", col.block)))?;
        let slice = dx.rows(col.offset, col.kind.tangent_dim());
        let v = kind_plus(col.kind, b.values(), slice.as_slice())?;
        b.set_values(&v)?;
    }
    Ok(out)
}

/// Detects rank deficiency of `H` after Jacobi scaling.
fn check_rank(h: &DMatrix<f64>) -> Result<()> {
    let n = h.nrows();
    let mut scaled = h.clone();
    let mut d = vec![0.0; n];
    for (i, di) in d.iter_mut().enumerate() {
        let hii = h[(i, i)];
        if !(hii > 0.0) {
            return Err(Error::SingularSystem(format!("column {i} carries no information")));
        }
        *di = 1.0 / hii.sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            scaled[(i, j)] *= d[i] * d[j];
        }
    }
    // in-place LDLᵀ without pivoting
    for k in 0..n {
        let pivot = scaled[(k, k)];
        if !(pivot > SINGULAR_PIVOT) {
            return Err(Error::SingularSystem(format!(
                "normal equations are rank deficient (pivot {pivot:.3e} at column {k})"
            )));
        }
        for i in k + 1..n {
            let lik = scaled[(i, k)] / pivot;
            if lik == 0.0 {
                continue;
            }
            for j in k + 1..=i {
                let v = scaled[(j, k)];
                scaled[(i, j)] -= lik * v;
            }
        }
        for i in k + 1..n {
            for j in k + 1..i {
                scaled[(j, i)] = scaled[(i, j)];
            }
        }
    }
    Ok(())
}
