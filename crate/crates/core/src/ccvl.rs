//! Confidence-conditioned Q-tables and their fixed-point solvers.
//!
//! A [`ConfidenceQ`] stores `Q(s, a, δ_k)` for every point of a finite
//! [`ConfidenceGrid`]. Lower tables are trained with the count-bonus backup or
//! the regularized backup; upper tables with the mirrored bonus backup. Each
//! backup takes an exhaustive max (min for upper tables) over grid pairs
//! `(δ₁, δ₂)` with `δ₁, δ₂ ≤ δ_k`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{EmpiricalModel, Fallback, OfflineDataset, ValueMeta};
use crate::error::{Error, Result};
use crate::mdp::{row_max, sup_distance};
use crate::saddle::{self, SaddleSolution};

pub const DEFAULT_DELTAS: [f64; 8] = [0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9];
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

/// Relative slack used when deciding whether the diagonal pair attains the optimum.
const DEGENERACY_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ConfidenceGrid {
    deltas: Vec<f64>,
}

impl ConfidenceGrid {
    pub fn new(deltas: Vec<f64>) -> Result<Self> {
        if deltas.is_empty() {
            return Err(Error::invalid("deltas", "grid is empty"));
        }
        if !(deltas[0] > 0.0) || !(deltas[deltas.len() - 1] < 1.0) {
            return Err(Error::invalid("deltas", "all grid points must lie in (0, 1)"));
        }
        if deltas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("deltas", "grid must be strictly increasing"));
        }
        Ok(Self { deltas })
    }

    pub fn single(delta: f64) -> Result<Self> {
        Self::new(vec![delta])
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn delta(&self, k: usize) -> f64 {
        self.deltas[k]
    }
}

impl Default for ConfidenceGrid {
    fn default() -> Self {
        Self {
            deltas: DEFAULT_DELTAS.to_vec(),
        }
    }
}

impl TryFrom<Vec<f64>> for ConfidenceGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ConfidenceGrid> for Vec<f64> {
    fn from(g: ConfidenceGrid) -> Self {
        g.deltas
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Lower,
    Upper,
}

/// `Q(s, a, δ)` on a confidence grid, stored row-major as `[S][A][K]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceQ {
    pub num_states: usize,
    pub num_actions: usize,
    pub grid: ConfidenceGrid,
    pub bound_kind: BoundKind,
    pub alpha: f64,
    pub iota: f64,
    pub discount: f64,
    pub r_max: f64,
    pub values: Vec<f64>,
    /// Inner policy of the regularized objective per slice, `[K][S][A]`.
    /// Acting greedily on a regularized slice splits ties by this policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Vec<f64>>,
}

impl ConfidenceQ {
    /// Constant table at `−v_max` (lower) or `+v_max` (upper).
    pub fn initial(
        num_states: usize,
        num_actions: usize,
        grid: ConfidenceGrid,
        bound_kind: BoundKind,
        alpha: f64,
        iota: f64,
        meta: ValueMeta,
    ) -> Result<Self> {
        if !(alpha > 0.0 || alpha == 0.0) || !alpha.is_finite() {
            return Err(Error::invalid("alpha", "must be finite and nonnegative"));
        }
        if !(iota > 0.0) || !iota.is_finite() {
            return Err(Error::invalid("iota", "must be finite and positive"));
        }
        let fill = match bound_kind {
            BoundKind::Lower => -meta.v_max(),
            BoundKind::Upper => meta.v_max(),
        };
        let k = grid.len();
        Ok(Self {
            num_states,
            num_actions,
            grid,
            bound_kind,
            alpha,
            iota,
            discount: meta.discount,
            r_max: meta.r_max,
            values: vec![fill; num_states * num_actions * k],
            policy: None,
        })
    }

    /// Row of the stored inner policy at `(s, k)`, if any.
    pub fn policy_row(&self, s: usize, k: usize) -> Option<&[f64]> {
        let a_n = self.num_actions;
        let start = (k * self.num_states + s) * a_n;
        self.policy.as_ref().map(|p| &p[start..start + a_n])
    }

    pub fn num_deltas(&self) -> usize {
        self.grid.len()
    }

    pub fn meta(&self) -> ValueMeta {
        ValueMeta {
            discount: self.discount,
            r_max: self.r_max,
        }
    }

    fn index(&self, s: usize, a: usize, k: usize) -> usize {
        (s * self.num_actions + a) * self.grid.len() + k
    }

    pub fn get(&self, s: usize, a: usize, k: usize) -> f64 {
        self.values[self.index(s, a, k)]
    }

    /// The `[S][A]` table at grid index `k`.
    pub fn slice(&self, k: usize) -> Vec<f64> {
        let kk = self.grid.len();
        self.values.iter().skip(k).step_by(kk).copied().collect()
    }

    pub fn row(&self, s: usize, k: usize) -> Vec<f64> {
        (0..self.num_actions).map(|a| self.get(s, a, k)).collect()
    }

    /// `max_a Q(s, a, δ_k)` for every state.
    pub fn state_values(&self, k: usize) -> Vec<f64> {
        (0..self.num_states).map(|s| row_max(&self.row(s, k))).collect()
    }

    /// Largest bonus magnitude `α·√(ι·log(1/δ_min))`.
    pub fn max_bonus(&self) -> f64 {
        self.alpha * (self.iota * (1.0 / self.grid.delta(0)).ln()).sqrt()
    }

    /// Closed interval every entry must lie in.
    pub fn value_bounds(&self) -> (f64, f64) {
        let v_max = self.meta().v_max();
        let b = self.max_bonus();
        (-v_max - b, v_max + b)
    }

    /// Checks shapes, value range and the δ-monotonicity of the bound kind.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.values.len() != self.num_states * self.num_actions * self.grid.len() {
            return Err(Error::Shape(format!(
                "{} values for {}x{}x{}",
                self.values.len(),
                self.num_states,
                self.num_actions,
                self.grid.len()
            )));
        }
        let (lo, hi) = self.value_bounds();
        if let Some(v) = self.values.iter().find(|v| !(**v >= lo - tol && **v <= hi + tol)) {
            return Err(Error::invalid("values", format!("{v} outside [{lo}, {hi}]")));
        }
        if let Some((s, a, k)) = self.monotonicity_violation(tol) {
            return Err(Error::invalid(
                "values",
                format!("not monotone in delta at (s={s}, a={a}, k={k})"),
            ));
        }
        Ok(())
    }

    /// First `(s, a, k)` where the δ-ordering for this bound kind is broken by more than `tol`.
    pub fn monotonicity_violation(&self, tol: f64) -> Option<(usize, usize, usize)> {
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                for k in 1..self.grid.len() {
                    let (prev, cur) = (self.get(s, a, k - 1), self.get(s, a, k));
                    let broken = match self.bound_kind {
                        BoundKind::Lower => prev > cur + tol,
                        BoundKind::Upper => prev < cur - tol,
                    };
                    if broken {
                        return Some((s, a, k));
                    }
                }
            }
        }
        None
    }

    /// Running max (lower) or running min (upper) along the δ axis.
    pub fn enforce_monotone(&mut self) {
        let kk = self.grid.len();
        let kind = self.bound_kind;
        for cell in self.values.chunks_mut(kk) {
            for k in 1..kk {
                cell[k] = match kind {
                    BoundKind::Lower => cell[k].max(cell[k - 1]),
                    BoundKind::Upper => cell[k].min(cell[k - 1]),
                };
            }
        }
    }

    /// CSV with header `s,a,delta,q`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "s,a,delta,q")?;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                for (k, delta) in self.grid.deltas().iter().enumerate() {
                    writeln!(out, "{s},{a},{delta},{}", self.get(s, a, k))?;
                }
            }
        }
        Ok(())
    }

    fn check_against(&self, data: &OfflineDataset, model: &EmpiricalModel, kind: BoundKind) -> Result<()> {
        if self.bound_kind != kind {
            return Err(Error::invalid(
                "bound_kind",
                format!("backup expects a {kind:?} table, got {:?}", self.bound_kind),
            ));
        }
        if data.num_states() != self.num_states
            || data.num_actions() != self.num_actions
            || model.num_states() != self.num_states
            || model.num_actions() != self.num_actions
        {
            return Err(Error::Shape("table, dataset and model dimensions differ".into()));
        }
        Ok(())
    }
}

/// Outcome of one backup sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BackupStats {
    pub degenerate_cells: usize,
    pub total_cells: usize,
}

impl BackupStats {
    pub fn degeneracy_rate(&self) -> f64 {
        if self.total_cells == 0 {
            1.0
        } else {
            self.degenerate_cells as f64 / self.total_cells as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    /// Fraction of `(s, a, δ)` cells whose optimum over `(δ₁, δ₂)` was attained
    /// on the diagonal `δ₁ = δ₂ = δ` in the last sweep.
    pub argmax_degeneracy_rate: f64,
}

/// `α·√(ι·log(1/δ) / max(n, 1))`
pub fn bonus(n: u64, delta: f64, alpha: f64, iota: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::DeltaDomain(delta));
    }
    if !(alpha >= 0.0) || !(iota > 0.0) {
        return Err(Error::invalid("alpha/iota", "alpha must be >= 0 and iota > 0"));
    }
    Ok(scaled_root(n, delta, alpha, iota))
}

fn scaled_root(n: u64, delta: f64, alpha: f64, iota: f64) -> f64 {
    alpha * (iota * -delta.ln() / n.max(1) as f64).sqrt()
}

/// Regularizer term `α·√(ι·log(1/δ₁) / max(n(s), 1))·(π(a|s)/πβ(a|s) − 1)`.
///
/// Positive at actions the policy favors over the behavior, negative (a bonus)
/// at actions it avoids.
pub fn regularizer_penalty(
    pi: f64,
    pi_beta: f64,
    n_s: u64,
    delta1: f64,
    alpha: f64,
    iota: f64,
) -> Result<f64> {
    if !(pi_beta > 0.0) {
        return Err(Error::invalid("pi_beta", "must be positive"));
    }
    Ok(bonus(n_s, delta1, alpha, iota)? * (pi / pi_beta - 1.0))
}

/// Inner policy used by the regularized backup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Greedy with respect to the updated values; ties split as the objective dictates.
    #[default]
    Greedy,
    /// Entropy-regularized: `π = softmax(Q / temp)`.
    Softmax { temp: f64 },
}

/// How the regularizer is weighted by visitation counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegWeighting {
    /// `√(log(1/δ₁) / n(s))·(π/πβ − 1)`
    #[default]
    StateCount,
    /// `√(log(1/δ₁) / n(s,a))·(π − πβ)/√πβ`; equal to the above when `πβ = n(s,a)/n(s)`.
    StateActionCount,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Update {
    Bonus,
    Regularized {
        #[serde(default)]
        mode: PolicyMode,
        #[serde(default)]
        weighting: RegWeighting,
    },
    Upper,
}

impl Update {
    pub fn bound_kind(&self) -> BoundKind {
        match self {
            Update::Upper => BoundKind::Upper,
            _ => BoundKind::Lower,
        }
    }

    pub fn fallback(&self) -> Fallback {
        match self {
            Update::Upper => Fallback::Optimistic,
            _ => Fallback::Pessimistic,
        }
    }
}

/// `B̂*` of every δ-slice: `targets[k][s * A + a]`.
fn slice_targets(prev: &ConfidenceQ, model: &EmpiricalModel, fallback: Fallback) -> Vec<Vec<f64>> {
    (0..prev.num_deltas())
        .map(|k| model.backup_from_values(&prev.state_values(k), fallback))
        .collect()
}

fn bonus_table(prev: &ConfidenceQ, data: &OfflineDataset) -> Vec<Vec<f64>> {
    (0..prev.num_deltas())
        .map(|k| {
            let delta = prev.grid.delta(k);
            (0..prev.num_states * prev.num_actions)
                .map(|sa| {
                    let n = data.count_sa(sa / prev.num_actions, sa % prev.num_actions);
                    scaled_root(n, delta, prev.alpha, prev.iota)
                })
                .collect()
        })
        .collect()
}

fn attains(candidate: f64, best: f64) -> bool {
    (candidate - best).abs() <= DEGENERACY_TOL * best.abs().max(1.0)
}

/// Shared body of the lower and upper bonus backups. `sign = −1` subtracts the
/// bonus and maximizes, `sign = +1` adds it and minimizes.
fn bonus_backup_impl(
    prev: &ConfidenceQ,
    data: &OfflineDataset,
    model: &EmpiricalModel,
    kind: BoundKind,
) -> Result<(ConfidenceQ, BackupStats)> {
    prev.check_against(data, model, kind)?;
    let fallback = match kind {
        BoundKind::Lower => Fallback::Pessimistic,
        BoundKind::Upper => Fallback::Optimistic,
    };
    let targets = slice_targets(prev, model, fallback);
    let bonuses = bonus_table(prev, data);
    let (lo, hi) = prev.value_bounds();
    let kk = prev.num_deltas();
    let mut next = prev.clone();
    let mut stats = BackupStats::default();
    for sa in 0..prev.num_states * prev.num_actions {
        for k in 0..kk {
            let diagonal = match kind {
                BoundKind::Lower => targets[k][sa] - bonuses[k][sa],
                BoundKind::Upper => targets[k][sa] + bonuses[k][sa],
            };
            let mut best = diagonal;
            for j in 0..=k {
                for i in 0..=k {
                    let candidate = match kind {
                        BoundKind::Lower => targets[j][sa] - bonuses[i][sa],
                        BoundKind::Upper => targets[j][sa] + bonuses[i][sa],
                    };
                    best = match kind {
                        BoundKind::Lower => best.max(candidate),
                        BoundKind::Upper => best.min(candidate),
                    };
                }
            }
            if attains(diagonal, best) {
                stats.degenerate_cells += 1;
            }
            stats.total_cells += 1;
            next.values[sa * kk + k] = best.clamp(lo, hi);
        }
    }
    Ok((next, stats))
}

/// One sweep of the count-bonus lower-bound backup:
/// `Q(s,a,δ) ← max_{δ₁,δ₂ ≤ δ} B̂*Q(s,a,δ₂) − α√(ι log(1/δ₁) / (n(s,a) ∨ 1))`.
pub fn ccvl_bonus_backup(
    prev: &ConfidenceQ,
    data: &OfflineDataset,
    model: &EmpiricalModel,
) -> Result<(ConfidenceQ, BackupStats)> {
    bonus_backup_impl(prev, data, model, BoundKind::Lower)
}

/// One sweep of the upper-bound backup:
/// `Q_u(s,a,δ) ← min_{δ₁,δ₂ ≤ δ} B̂*Q_u(s,a,δ₂) + α√(ι log(1/δ₁) / (n(s,a) ∨ 1))`.
pub fn ccvl_upper_backup(
    prev: &ConfidenceQ,
    data: &OfflineDataset,
    model: &EmpiricalModel,
) -> Result<(ConfidenceQ, BackupStats)> {
    bonus_backup_impl(prev, data, model, BoundKind::Upper)
}

/// Behavior estimate floored at `1 / (n(s) + |A|)`.
pub(crate) fn floored_behavior(data: &OfflineDataset, s: usize) -> Vec<f64> {
    let a_n = data.num_actions();
    let floor = 1.0 / (data.count_s(s) + a_n as u64) as f64;
    data.behavior_hat()
        .row(s)
        .iter()
        .map(|&p| p.max(floor))
        .collect()
}

/// Shift/slope coefficients of the per-state saddle problem at grid point `delta1`.
pub(crate) fn regularizer_coefficients(
    data: &OfflineDataset,
    s: usize,
    delta1: f64,
    alpha: f64,
    iota: f64,
    weighting: RegWeighting,
    pi_beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    match weighting {
        RegWeighting::StateCount => {
            let c = scaled_root(data.count_s(s), delta1, alpha, iota);
            (vec![c; pi_beta.len()], pi_beta.iter().map(|p| c / p).collect())
        }
        RegWeighting::StateActionCount => pi_beta
            .iter()
            .enumerate()
            .map(|(a, p)| {
                let w = scaled_root(data.count_sa(s, a), delta1, alpha, iota);
                (w * p.sqrt(), w / p.sqrt())
            })
            .unzip(),
    }
}

pub(crate) fn solve_state(
    targets: &[f64],
    shift: &[f64],
    slope: &[f64],
    mode: PolicyMode,
) -> SaddleSolution {
    match mode {
        PolicyMode::Greedy => saddle::solve_greedy(targets, shift, slope),
        PolicyMode::Softmax { temp } => saddle::solve_softmax(targets, shift, slope, temp),
    }
}

/// One sweep of the regularized lower-bound backup with state-count weighting.
pub fn ccvl_reg_backup(
    prev: &ConfidenceQ,
    data: &OfflineDataset,
    model: &EmpiricalModel,
    policy_mode: PolicyMode,
) -> Result<(ConfidenceQ, BackupStats)> {
    ccvl_reg_backup_weighted(prev, data, model, policy_mode, RegWeighting::StateCount)
}

/// One sweep of the regularized lower-bound backup.
///
/// For each state and grid index `k`, every pair `(δ₁, δ₂) ≤ δ_k` yields a
/// per-state solution of `Q = B̂*Q(·,δ₂) − c(δ₁)·(π/πβ − 1)` with `π` the
/// objective's inner policy. The pair with the largest state value
/// `max_a Q(s, a)` is kept for all actions of that state.
pub fn ccvl_reg_backup_weighted(
    prev: &ConfidenceQ,
    data: &OfflineDataset,
    model: &EmpiricalModel,
    policy_mode: PolicyMode,
    weighting: RegWeighting,
) -> Result<(ConfidenceQ, BackupStats)> {
    prev.check_against(data, model, BoundKind::Lower)?;
    if let PolicyMode::Softmax { temp } = policy_mode {
        if !(temp > 0.0) {
            return Err(Error::invalid("temp", "softmax temperature must be positive"));
        }
    }
    let targets = slice_targets(prev, model, Fallback::Pessimistic);
    let (lo, hi) = prev.value_bounds();
    let (a_n, kk) = (prev.num_actions, prev.num_deltas());
    let mut next = prev.clone();
    let mut stats = BackupStats::default();
    for s in 0..prev.num_states {
        let pi_beta = floored_behavior(data, s);
        let coeffs: Vec<(Vec<f64>, Vec<f64>)> = (0..kk)
            .map(|i| {
                regularizer_coefficients(
                    data,
                    s,
                    prev.grid.delta(i),
                    prev.alpha,
                    prev.iota,
                    weighting,
                    &pi_beta,
                )
            })
            .collect();
        let rows: Vec<&[f64]> = (0..kk).map(|j| &targets[j][s * a_n..(s + 1) * a_n]).collect();
        for k in 0..kk {
            let diagonal = solve_state(rows[k], &coeffs[k].0, &coeffs[k].1, policy_mode);
            let diagonal_value = diagonal.value();
            let mut best = diagonal.clone();
            let mut best_value = diagonal_value;
            for j in 0..=k {
                for i in 0..=k {
                    if i == k && j == k {
                        continue;
                    }
                    let sol = solve_state(rows[j], &coeffs[i].0, &coeffs[i].1, policy_mode);
                    let value = sol.value();
                    if value > best_value && !attains(value, best_value) {
                        best_value = value;
                        best = sol;
                    }
                }
            }
            if attains(diagonal_value, best_value) {
                stats.degenerate_cells += a_n;
            }
            stats.total_cells += a_n;
            for a in 0..a_n {
                next.values[(s * a_n + a) * kk + k] = best.q[a].clamp(lo, hi);
            }
        }
    }
    Ok((next, stats))
}

/// The inner policy of the regularized objective at grid index `k`, recomputed
/// from a converged table.
pub fn regularized_policy(
    table: &ConfidenceQ,
    data: &OfflineDataset,
    model: &EmpiricalModel,
    k: usize,
    policy_mode: PolicyMode,
    weighting: RegWeighting,
) -> Vec<f64> {
    let a_n = table.num_actions;
    let targets = model.backup_from_values(&table.state_values(k), Fallback::Pessimistic);
    let mut probs = Vec::with_capacity(table.num_states * a_n);
    for s in 0..table.num_states {
        let pi_beta = floored_behavior(data, s);
        let (shift, slope) = regularizer_coefficients(
            data,
            s,
            table.grid.delta(k),
            table.alpha,
            table.iota,
            weighting,
            &pi_beta,
        );
        let sol = solve_state(&targets[s * a_n..(s + 1) * a_n], &shift, &slope, policy_mode);
        probs.extend(sol.pi);
    }
    probs
}

/// Iterates `update` from `init` until successive tables differ by at most
/// `tol` in sup norm. After each sweep the table is made monotone in δ.
pub fn solve(
    update: Update,
    init: ConfidenceQ,
    data: &OfflineDataset,
    model: &EmpiricalModel,
    tol: f64,
    max_iters: usize,
) -> Result<(ConfidenceQ, SolveReport)> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let mut q = init;
    q.policy = None;
    q.enforce_monotone();
    let mut residual = f64::INFINITY;
    for iteration in 1..=max_iters {
        let (mut next, stats) = match update {
            Update::Bonus => ccvl_bonus_backup(&q, data, model)?,
            Update::Upper => ccvl_upper_backup(&q, data, model)?,
            Update::Regularized { mode, weighting } => {
                ccvl_reg_backup_weighted(&q, data, model, mode, weighting)?
            }
        };
        next.enforce_monotone();
        residual = sup_distance(&next.values, &q.values);
        q = next;
        if residual <= tol {
            if let Update::Regularized { mode, weighting } = update {
                let policy = (0..q.num_deltas())
                    .flat_map(|k| regularized_policy(&q, data, model, k, mode, weighting))
                    .collect();
                q.policy = Some(policy);
            }
            return Ok((
                q,
                SolveReport {
                    iterations: iteration,
                    final_residual: residual,
                    argmax_degeneracy_rate: stats.degeneracy_rate(),
                },
            ));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        residual,
    })
}

/// Builds the standard initialization for `update` and solves.
#[allow(clippy::too_many_arguments)]
pub fn train(
    update: Update,
    data: &OfflineDataset,
    model: &EmpiricalModel,
    grid: ConfidenceGrid,
    alpha: f64,
    iota: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(ConfidenceQ, SolveReport)> {
    let init = ConfidenceQ::initial(
        data.num_states(),
        data.num_actions(),
        grid,
        update.bound_kind(),
        alpha,
        iota,
        model.meta(),
    )?;
    solve(update, init, data, model, tol, max_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_empirical_model, Transition};

    fn e_inv() -> f64 {
        (-1.0f64).exp()
    }

    #[test]
    fn bonus_values() {
        assert!((bonus(1, e_inv(), 1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(bonus(0, 0.3, 0.7, 2.0).unwrap(), bonus(1, 0.3, 0.7, 2.0).unwrap());
        assert!((bonus(4, e_inv(), 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(bonus(1, 0.0, 1.0, 1.0), Err(Error::DeltaDomain(_))));
        assert!(matches!(bonus(1, 1.0, 1.0, 1.0), Err(Error::DeltaDomain(_))));
    }

    #[test]
    fn penalty_hand_values() {
        let p = regularizer_penalty(1.0, 0.25, 4, e_inv(), 1.0, 1.0).unwrap();
        assert!((p - 1.5).abs() < 1e-12);
        let p = regularizer_penalty(0.0, 0.25, 4, e_inv(), 1.0, 1.0).unwrap();
        assert!((p + 0.5).abs() < 1e-12);
        assert_eq!(regularizer_penalty(0.3, 0.3, 9, 0.1, 2.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn grid_validation() {
        assert!(ConfidenceGrid::new(vec![]).is_err());
        assert!(ConfidenceGrid::new(vec![0.0, 0.5]).is_err());
        assert!(ConfidenceGrid::new(vec![0.5, 1.0]).is_err());
        assert!(ConfidenceGrid::new(vec![0.3, 0.3]).is_err());
        assert!(ConfidenceGrid::new(DEFAULT_DELTAS.to_vec()).is_ok());
        let parsed: std::result::Result<ConfidenceGrid, _> = serde_json::from_str("[0.5, 0.2]");
        assert!(parsed.is_err());
    }

    fn one_pair(n: usize) -> (OfflineDataset, EmpiricalModel) {
        let t = Transition {
            s: 0,
            a: 0,
            r: 0.0,
            s_next: 0,
            done: false,
        };
        let data = OfflineDataset::from_transitions(1, 1, vec![t; n]).unwrap();
        let model = build_empirical_model(&data, ValueMeta { discount: 0.9, r_max: 1.0 });
        (data, model)
    }

    #[test]
    fn zero_target_bonus_only() {
        let (data, model) = one_pair(1);
        let grid = ConfidenceGrid::single(e_inv()).unwrap();
        let mut prev = ConfidenceQ::initial(1, 1, grid, BoundKind::Lower, 0.8, 1.0, model.meta()).unwrap();
        prev.values.fill(0.0);
        let (next, stats) = ccvl_bonus_backup(&prev, &data, &model).unwrap();
        assert!((next.values[0] + 0.8).abs() < 1e-12);
        assert_eq!(stats.degeneracy_rate(), 1.0);

        let mut up = prev.clone();
        up.bound_kind = BoundKind::Upper;
        let (next, _) = ccvl_upper_backup(&up, &data, &model).unwrap();
        assert!((next.values[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn wrong_bound_kind_is_rejected() {
        let (data, model) = one_pair(1);
        let prev = ConfidenceQ::initial(1, 1, ConfidenceGrid::default(), BoundKind::Upper, 1.0, 1.0, model.meta())
            .unwrap();
        assert!(ccvl_bonus_backup(&prev, &data, &model).is_err());
        assert!(ccvl_reg_backup(&prev, &data, &model, PolicyMode::Greedy).is_err());
    }

    #[test]
    fn single_pair_fixed_point_is_closed_form() {
        // q = γ q − α b  ⇒  q = −α b / (1 − γ) with b = √(log(1/δ)/n)
        let (data, model) = one_pair(25);
        let (table, report) = train(
            Update::Bonus,
            &data,
            &model,
            ConfidenceGrid::default(),
            0.5,
            1.0,
            1e-12,
            DEFAULT_MAX_ITERS,
        )
        .unwrap();
        for (k, delta) in DEFAULT_DELTAS.iter().enumerate() {
            let expected = -0.5 * ((1.0 / delta).ln() / 25.0).sqrt() / 0.1;
            assert!((table.get(0, 0, k) - expected).abs() < 1e-9);
        }
        assert_eq!(report.argmax_degeneracy_rate, 1.0);
    }

    #[test]
    fn enforce_monotone_directions() {
        let meta = ValueMeta { discount: 0.5, r_max: 1.0 };
        let grid = ConfidenceGrid::new(vec![0.1, 0.5, 0.9]).unwrap();
        let mut q = ConfidenceQ::initial(1, 1, grid, BoundKind::Lower, 1.0, 1.0, meta).unwrap();
        q.values = vec![0.3, 0.1, 0.5];
        assert!(q.monotonicity_violation(0.0).is_some());
        q.enforce_monotone();
        assert_eq!(q.values, vec![0.3, 0.3, 0.5]);
        q.bound_kind = BoundKind::Upper;
        q.values = vec![0.3, 0.1, 0.5];
        q.enforce_monotone();
        assert_eq!(q.values, vec![0.3, 0.1, 0.1]);
    }

    #[test]
    fn csv_and_json_exports() {
        let meta = ValueMeta { discount: 0.9, r_max: 1.0 };
        let q = ConfidenceQ::initial(2, 2, ConfidenceGrid::default(), BoundKind::Lower, 0.2, 1.0, meta).unwrap();
        let mut buf = Vec::new();
        q.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 2 * 8);
        assert_eq!(text.lines().next(), Some("s,a,delta,q"));
        let json = serde_json::to_string(&q).unwrap();
        assert!(json.contains("\"bound_kind\":\"lower\""));
        let back: ConfidenceQ = serde_json::from_str(&json).unwrap();
        assert_eq!(back, q);
    }
}
