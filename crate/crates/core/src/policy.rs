//! Online evaluation policies over a stack of value slices.
//!
//! The belief over slices is a softmax of the accumulated squared Bellman
//! residuals of the observed transitions: `b(k) ∝ exp(−λ·Σ_h residual_k²)`.
//! Slices are the δ-grid of a [`ConfidenceQ`] or the members of an ensemble.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::EnsembleQ;
use crate::mdp::QTable;
use crate::ccvl::{BoundKind, ConfidenceQ};
use crate::data::Transition;
use crate::error::{Error, Result};
use crate::mdp::{argmax_set, row_max, sample_index, DEFAULT_TIE_TOL};

/// Read access to `K` value tables sharing one state/action space.
pub trait SlicedValues {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn num_slices(&self) -> usize;
    fn value(&self, s: usize, a: usize, k: usize) -> f64;
    fn discount(&self) -> f64;
    /// Label reported in traces: δ for confidence grids, member index for ensembles.
    fn label(&self, k: usize) -> f64;
    /// Tie-splitting policy row, for tables that carry one.
    fn tie_policy(&self, _s: usize, _k: usize) -> Option<&[f64]> {
        None
    }

    fn slice_row(&self, s: usize, k: usize) -> Vec<f64> {
        (0..self.num_actions()).map(|a| self.value(s, a, k)).collect()
    }
}

impl SlicedValues for ConfidenceQ {
    fn num_states(&self) -> usize {
        self.num_states
    }
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn num_slices(&self) -> usize {
        self.num_deltas()
    }
    fn value(&self, s: usize, a: usize, k: usize) -> f64 {
        self.get(s, a, k)
    }
    fn discount(&self) -> f64 {
        self.discount
    }
    fn label(&self, k: usize) -> f64 {
        self.grid.delta(k)
    }
    fn tie_policy(&self, s: usize, k: usize) -> Option<&[f64]> {
        self.policy_row(s, k)
    }
}

/// Plain tables stacked as slices, e.g. ensemble members or a single baseline.
#[derive(Clone, Debug)]
pub struct SliceStack {
    tables: Vec<QTable>,
    discount: f64,
}

impl SliceStack {
    pub fn new(tables: Vec<QTable>, discount: f64) -> Result<Self> {
        let first = tables
            .first()
            .ok_or_else(|| Error::invalid("tables", "need at least one table"))?;
        if tables
            .iter()
            .any(|t| t.num_states != first.num_states || t.num_actions != first.num_actions)
        {
            return Err(Error::Shape("stacked tables differ in shape".into()));
        }
        Ok(Self { tables, discount })
    }

    pub fn single(table: QTable, discount: f64) -> Self {
        Self {
            tables: vec![table],
            discount,
        }
    }

    pub fn from_ensemble(ensemble: &EnsembleQ, discount: f64) -> Result<Self> {
        Self::new(ensemble.members.clone(), discount)
    }
}

impl SlicedValues for SliceStack {
    fn num_states(&self) -> usize {
        self.tables[0].num_states
    }
    fn num_actions(&self) -> usize {
        self.tables[0].num_actions
    }
    fn num_slices(&self) -> usize {
        self.tables.len()
    }
    fn value(&self, s: usize, a: usize, k: usize) -> f64 {
        self.tables[k].get(s, a)
    }
    fn discount(&self) -> f64 {
        self.discount
    }
    fn label(&self, k: usize) -> f64 {
        k as f64
    }
    fn tie_policy(&self, s: usize, k: usize) -> Option<&[f64]> {
        self.tables[k].policy.as_ref().map(|p| p.row(s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub labels: Vec<f64>,
    pub cum_sq_error: Vec<f64>,
    pub temperature: f64,
    pub probs: Vec<f64>,
}

pub fn belief_init(labels: &[f64], temperature: f64) -> Result<BeliefState> {
    if labels.is_empty() {
        return Err(Error::invalid("grid", "belief needs at least one slice"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid("temperature", "must be finite and positive"));
    }
    let k = labels.len();
    Ok(BeliefState {
        labels: labels.to_vec(),
        cum_sq_error: vec![0.0; k],
        temperature,
        probs: vec![1.0 / k as f64; k],
    })
}

/// Squared one-step residual of `t` under slice `k`.
pub fn squared_residual<T: SlicedValues + ?Sized>(table: &T, t: &Transition, k: usize) -> f64 {
    let next = if t.done {
        0.0
    } else {
        row_max(&table.slice_row(t.s_next, k))
    };
    let residual = table.value(t.s, t.a, k) - t.r - table.discount() * next;
    residual * residual
}

impl BeliefState {
    fn refresh(&mut self) {
        let lowest = self.cum_sq_error.iter().copied().fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = self
            .cum_sq_error
            .iter()
            .map(|e| (-self.temperature * (e - lowest)).exp())
            .collect();
        let z: f64 = weights.iter().sum();
        self.probs = weights.into_iter().map(|w| w / z).collect();
    }

    /// Accumulates the residual of one observed transition for every slice.
    pub fn observe<T: SlicedValues + ?Sized>(&mut self, t: &Transition, table: &T) {
        for k in 0..self.cum_sq_error.len() {
            self.cum_sq_error[k] += squared_residual(table, t, k);
        }
        self.refresh();
    }

    /// Index with the largest probability; ties go to the smallest index.
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for k in 1..self.cum_sq_error.len() {
            if self.cum_sq_error[k] < self.cum_sq_error[best] {
                best = k;
            }
        }
        best
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.probs, rng)
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// Functional form of [`BeliefState::observe`].
pub fn belief_update<T: SlicedValues + ?Sized>(
    belief: &BeliefState,
    t: &Transition,
    table: &T,
) -> BeliefState {
    let mut next = belief.clone();
    next.observe(t, table);
    next
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// δ drawn from the belief.
    #[default]
    BeliefSample,
    /// δ at the belief's mode.
    BeliefMode,
    FixedDelta { index: usize },
    /// Maximize the upper table (or the lower one when `use_upper` is false)
    /// within the lower table's safe set.
    SafeSet { beta: f64, use_upper: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    #[default]
    Episode,
    Step,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptivePolicyConfig {
    #[serde(default)]
    pub mode: PolicyKind,
    #[serde(default)]
    pub seed: u64,
    /// Belief inverse temperature λ.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub resample: Cadence,
    /// Keep the belief across evaluation episodes instead of resetting it.
    #[serde(default = "default_true")]
    pub carry_belief: bool,
}

impl Default for AdaptivePolicyConfig {
    fn default() -> Self {
        Self {
            mode: PolicyKind::BeliefSample,
            seed: 0,
            temperature: 1.0,
            resample: Cadence::Episode,
            carry_belief: true,
        }
    }
}

impl AdaptivePolicyConfig {
    pub fn validate(&self, num_slices: usize, has_upper: bool) -> Result<()> {
        match self.mode {
            PolicyKind::FixedDelta { index } if index >= num_slices => Err(Error::Shape(format!(
                "fixed delta index {index} out of range for {num_slices} slices"
            ))),
            PolicyKind::SafeSet { beta, use_upper } => {
                if !(beta > 0.0 && beta <= 1.0) {
                    Err(Error::invalid("beta", format!("{beta} not in (0, 1]")))
                } else if use_upper && !has_upper {
                    Err(Error::invalid("upper", "safe-set policy needs an upper table"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature", "must be finite and positive"));
        }
        Ok(())
    }
}

/// Lower-table actions that clear the β threshold at `(s, k)`.
///
/// With a positive row maximum this is `Q ≥ β·max`. Otherwise the
/// multiplicative rule is ill-posed and `Q ≥ max − (1 − β)·value_range` is used,
/// where [`select_action`] passes the spread `max − min` of the row.
pub fn safe_set(row: &[f64], beta: f64, value_range: f64) -> Vec<usize> {
    let best = row_max(row);
    let threshold = if best > 0.0 {
        beta * best
    } else {
        best - (1.0 - beta) * value_range
    };
    (0..row.len())
        .filter(|&a| row[a] >= threshold - DEFAULT_TIE_TOL)
        .collect()
}

fn uniform_pick<R: Rng + ?Sized>(choices: &[usize], rng: &mut R) -> usize {
    choices[rng.gen_range(0..choices.len())]
}

/// Action at state `s` under slice `k`.
pub fn select_action<L, U, R>(
    lower: &L,
    upper: Option<&U>,
    s: usize,
    k: usize,
    mode: PolicyKind,
    rng: &mut R,
) -> usize
where
    L: SlicedValues + ?Sized,
    U: SlicedValues + ?Sized,
    R: Rng + ?Sized,
{
    let lower_row = lower.slice_row(s, k);
    match mode {
        PolicyKind::SafeSet { beta, use_upper } => {
            let range = row_max(&lower_row) - lower_row.iter().copied().fold(f64::INFINITY, f64::min);
            let allowed = safe_set(&lower_row, beta, range);
            assert!(!allowed.is_empty(), "safe set always contains the lower argmax");
            let scores: Vec<f64> = match (use_upper, upper) {
                (true, Some(u)) => allowed.iter().map(|&a| u.value(s, a, k)).collect(),
                _ => allowed.iter().map(|&a| lower_row[a]).collect(),
            };
            let best: Vec<usize> = argmax_set(&scores, DEFAULT_TIE_TOL)
                .into_iter()
                .map(|i| allowed[i])
                .collect();
            uniform_pick(&best, rng)
        }
        _ => match lower.tie_policy(s, k) {
            Some(row) => sample_index(row, rng),
            None => uniform_pick(&argmax_set(&lower_row, DEFAULT_TIE_TOL), rng),
        },
    }
}

/// Slice choice for the next episode or step.
pub fn choose_slice<R: Rng + ?Sized>(belief: &BeliefState, mode: PolicyKind, rng: &mut R) -> usize {
    match mode {
        PolicyKind::FixedDelta { index } => index,
        PolicyKind::BeliefMode => belief.mode(),
        PolicyKind::BeliefSample | PolicyKind::SafeSet { .. } => belief.sample(rng),
    }
}

/// A confidence-adaptive agent: owns the belief and an rng for δ draws.
/// Action tie-breaking uses the caller's rng.
pub struct AdaptiveAgent<'a, L: SlicedValues + ?Sized, U: SlicedValues + ?Sized = ConfidenceQ> {
    lower: &'a L,
    upper: Option<&'a U>,
    config: AdaptivePolicyConfig,
    belief: BeliefState,
    slice_rng: ChaCha8Rng,
    current: usize,
}

impl<'a, L: SlicedValues + ?Sized, U: SlicedValues + ?Sized> AdaptiveAgent<'a, L, U> {
    pub fn new(lower: &'a L, upper: Option<&'a U>, config: AdaptivePolicyConfig) -> Result<Self> {
        config.validate(lower.num_slices(), upper.is_some())?;
        if let Some(u) = upper {
            if u.num_slices() != lower.num_slices()
                || u.num_states() != lower.num_states()
                || u.num_actions() != lower.num_actions()
            {
                return Err(Error::Shape("upper and lower tables differ in shape".into()));
            }
        }
        let labels: Vec<f64> = (0..lower.num_slices()).map(|k| lower.label(k)).collect();
        let belief = belief_init(&labels, config.temperature)?;
        Ok(Self {
            lower,
            upper,
            slice_rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            belief,
            current: 0,
        })
    }

    pub fn belief(&self) -> &BeliefState {
        &self.belief
    }

    pub fn current_slice(&self) -> usize {
        self.current
    }

    pub fn current_label(&self) -> f64 {
        self.lower.label(self.current)
    }

    pub fn begin_episode(&mut self) {
        if !self.config.carry_belief {
            self.belief = belief_init(&self.belief.labels, self.config.temperature)
                .expect("labels were validated at construction");
        }
        self.current = choose_slice(&self.belief, self.config.mode, &mut self.slice_rng);
    }

    pub fn act<R: Rng + ?Sized>(&mut self, s: usize, rng: &mut R) -> usize {
        if self.config.resample == Cadence::Step {
            self.current = choose_slice(&self.belief, self.config.mode, &mut self.slice_rng);
        }
        select_action(self.lower, self.upper, s, self.current, self.config.mode, rng)
    }

    pub fn observe(&mut self, t: &Transition) {
        self.belief.observe(t, self.lower);
    }
}

/// Convenience check used by tests and the harness.
pub fn is_lower(table: &ConfidenceQ) -> bool {
    table.bound_kind == BoundKind::Lower
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccvl::ConfidenceGrid;
    use crate::data::ValueMeta;

    fn table(values: Vec<f64>, s: usize, a: usize, deltas: Vec<f64>) -> ConfidenceQ {
        let grid = ConfidenceGrid::new(deltas).unwrap();
        let mut q = ConfidenceQ::initial(s, a, grid, BoundKind::Lower, 0.1, 1.0, ValueMeta { discount: 0.9, r_max: 1.0 })
            .unwrap();
        q.values = values;
        q
    }

    #[test]
    fn init_is_uniform() {
        let b = belief_init(&crate::ccvl::DEFAULT_DELTAS, 1.0).unwrap();
        assert!(b.probs.iter().all(|&p| (p - 0.125).abs() < 1e-15));
        assert!((b.entropy() - 8f64.ln()).abs() < 1e-12);
        let one = belief_init(&[0.3], 1.0).unwrap();
        assert_eq!(one.probs, vec![1.0]);
        assert!(belief_init(&[0.3], 0.0).is_err());
    }

    #[test]
    fn zero_residual_slice_gains_mass() {
        // one state, one action, three slices; the transition r = 0.5, s' terminal
        let q = table(vec![0.5, 1.5, -0.5], 1, 1, vec![0.1, 0.5, 0.9]);
        let t = Transition { s: 0, a: 0, r: 0.5, s_next: 0, done: true };
        let b = belief_update(&belief_init(&[0.1, 0.5, 0.9], 1.0).unwrap(), &t, &q);
        assert!(b.probs[0] > 1.0 / 3.0);
        assert!(b.probs[1] < 1.0 / 3.0);
        assert_eq!(b.mode(), 0);
        let flat = belief_update(&belief_init(&[0.1, 0.5, 0.9], 1e-20).unwrap(), &t, &q);
        assert!(flat.probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn safe_set_rules() {
        let row = [1.0, 0.8, 0.5];
        assert_eq!(safe_set(&row, 1.0, 2.0), vec![0]);
        assert_eq!(safe_set(&row, 0.7, 2.0), vec![0, 1]);
        assert_eq!(safe_set(&row, 0.4, 2.0), vec![0, 1, 2]);
        let neg = [-1.0, -1.5, -3.0];
        assert_eq!(safe_set(&neg, 1.0, 4.0), vec![0]);
        assert_eq!(safe_set(&neg, 0.8, 4.0), vec![0, 1]);
    }

    #[test]
    fn beta_one_safe_set_uses_upper_only_for_ties() {
        let lower = table(vec![1.0, 1.0, 0.2], 1, 3, vec![0.5]);
        let mut upper = lower.clone();
        upper.bound_kind = BoundKind::Upper;
        upper.values = vec![1.1, 1.4, 9.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let a = select_action(&lower, Some(&upper), 0, 0, PolicyKind::SafeSet { beta: 1.0, use_upper: true }, &mut rng);
            assert_eq!(a, 1);
        }
    }

    #[test]
    fn config_validation() {
        let cfg = AdaptivePolicyConfig {
            mode: PolicyKind::SafeSet { beta: 0.0, use_upper: false },
            ..Default::default()
        };
        assert!(cfg.validate(3, false).is_err());
        let cfg = AdaptivePolicyConfig {
            mode: PolicyKind::SafeSet { beta: 0.5, use_upper: true },
            ..Default::default()
        };
        assert!(cfg.validate(3, false).is_err());
        let cfg = AdaptivePolicyConfig {
            mode: PolicyKind::FixedDelta { index: 3 },
            ..Default::default()
        };
        assert!(cfg.validate(3, false).is_err());
    }
}
