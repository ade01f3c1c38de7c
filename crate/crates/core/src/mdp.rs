//! Exact finite MDPs, policies, plain Q-tables, and the ground-truth solvers.
//!
//! Everything here is dense and row-major: transition index `(s * A + a) * S + s'`,
//! reward / Q index `s * A + a`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for stochastic vectors.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Default tie tolerance for greedy extraction.
pub const DEFAULT_TIE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
    r_max: f64,
    transition_reward: Option<Vec<f64>>,
}

fn check_distribution(field: &str, row: &[f64]) -> Result<()> {
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid(field, "entries must be finite and nonnegative"));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::invalid(field, format!("row sums to {total}, expected 1")));
    }
    Ok(())
}

impl TabularMdp {
    /// Builds and validates an MDP.
    ///
    /// `transition` is `[S][A][S]` flattened, `reward` is `[S][A]` flattened.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
        r_max: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::invalid("shape", "need at least one state and one action"));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid("discount", format!("{discount} not in (0, 1)")));
        }
        let (s_n, a_n) = (num_states, num_actions);
        if transition.len() != s_n * a_n * s_n {
            return Err(Error::Shape(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                s_n * a_n * s_n
            )));
        }
        if reward.len() != s_n * a_n || initial_dist.len() != s_n || terminal.len() != s_n {
            return Err(Error::Shape("reward/initial/terminal lengths disagree with S, A".into()));
        }
        for (row_idx, row) in transition.chunks(s_n).enumerate() {
            check_distribution(
                &format!("transition[{}][{}]", row_idx / a_n, row_idx % a_n),
                row,
            )?;
        }
        check_distribution("initial_dist", &initial_dist)?;
        if !(r_max.is_finite() && r_max >= 0.0) {
            return Err(Error::invalid("r_max", "must be finite and nonnegative"));
        }
        if let Some(r) = reward.iter().find(|r| !(r.abs() <= r_max)) {
            return Err(Error::invalid("reward", format!("|{r}| exceeds r_max {r_max}")));
        }
        for s in (0..s_n).filter(|&s| terminal[s]) {
            for a in 0..a_n {
                let row = &transition[(s * a_n + a) * s_n..(s * a_n + a + 1) * s_n];
                if row[s] != 1.0 || reward[s * a_n + a] != 0.0 {
                    return Err(Error::invalid(
                        "terminal",
                        format!("terminal state {s} must self-loop with reward 0"),
                    ));
                }
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            discount,
            initial_dist,
            terminal,
            r_max,
            transition_reward: None,
        })
    }

    /// Attaches rewards `r(s, a, s')` (flattened like `transition`) that are
    /// paid on the realized successor. `reward(s, a)` becomes their expectation.
    pub fn with_transition_rewards(mut self, rewards: Vec<f64>) -> Result<Self> {
        let (s_n, a_n) = (self.num_states, self.num_actions);
        if rewards.len() != s_n * a_n * s_n {
            return Err(Error::Shape("transition rewards disagree with S, A".into()));
        }
        if let Some(r) = rewards.iter().find(|r| !(r.abs() <= self.r_max)) {
            return Err(Error::invalid("reward", format!("|{r}| exceeds r_max {}", self.r_max)));
        }
        for sa in 0..s_n * a_n {
            let row = &self.transition[sa * s_n..(sa + 1) * s_n];
            let paid = &rewards[sa * s_n..(sa + 1) * s_n];
            if self.terminal[sa / a_n] && paid.iter().any(|&r| r != 0.0) {
                return Err(Error::invalid("terminal", "terminal states pay no reward"));
            }
            self.reward[sa] = row.iter().zip(paid).map(|(p, r)| p * r).sum();
        }
        self.transition_reward = Some(rewards);
        Ok(self)
    }

    /// Reward paid when `(s, a)` lands in `s_next`.
    pub fn realized_reward(&self, s: usize, a: usize, s_next: usize) -> f64 {
        match &self.transition_reward {
            Some(r) => r[(s * self.num_actions + a) * self.num_states + s_next],
            None => self.reward(s, a),
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// `r_max / (1 - γ)`, the largest attainable |Q|.
    pub fn v_max(&self) -> f64 {
        self.r_max / (1.0 - self.discount)
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    /// Successor distribution `P(· | s, a)`.
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    /// Same MDP with a different discount.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        let mut out = self.clone();
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid("discount", format!("{discount} not in (0, 1)")));
        }
        out.discount = discount;
        Ok(out)
    }

    /// Exact Bellman optimality operator `B*Q`.
    pub fn bellman_optimality(&self, q: &QTable) -> Vec<f64> {
        let v = q.state_values();
        let mut out = vec![0.0; self.num_states * self.num_actions];
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let expected: f64 = self
                    .next_dist(s, a)
                    .iter()
                    .zip(&v)
                    .map(|(p, v)| p * v)
                    .sum();
                out[s * self.num_actions + a] = self.reward(s, a) + self.discount * expected;
            }
        }
        out
    }

    /// Dense nested export for inspection.
    pub fn export(&self) -> MdpExport {
        let (s_n, a_n) = (self.num_states, self.num_actions);
        MdpExport {
            num_states: s_n,
            num_actions: a_n,
            transition: (0..s_n)
                .map(|s| (0..a_n).map(|a| self.next_dist(s, a).to_vec()).collect())
                .collect(),
            reward: self.reward.chunks(a_n).map(<[f64]>::to_vec).collect(),
            discount: self.discount,
            initial_dist: self.initial_dist.clone(),
            terminal: self.terminal.clone(),
            r_max: self.r_max,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdpExport {
    pub num_states: usize,
    pub num_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub discount: f64,
    pub initial_dist: Vec<f64>,
    pub terminal: Vec<bool>,
    pub r_max: f64,
}

/// A stochastic policy table `π(a|s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub num_states: usize,
    pub num_actions: usize,
    pub probs: Vec<f64>,
}

impl Policy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions || num_actions == 0 {
            return Err(Error::Shape(format!(
                "policy has {} entries for {num_states}x{num_actions}",
                probs.len()
            )));
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(&format!("policy[{s}]"), row)?;
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }
}

/// A plain `[S][A]` action-value table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub num_states: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
    pub method_tag: String,
    /// The maximizing policy of a regularized objective, when the method has one.
    /// It is greedy with respect to `values` but splits ties the way the objective does.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Policy>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize, method_tag: impl Into<String>) -> Self {
        Self::filled(num_states, num_actions, 0.0, method_tag)
    }

    pub fn filled(
        num_states: usize,
        num_actions: usize,
        value: f64,
        method_tag: impl Into<String>,
    ) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![value; num_states * num_actions],
            method_tag: method_tag.into(),
            policy: None,
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn state_values(&self) -> Vec<f64> {
        self.values
            .chunks(self.num_actions)
            .map(row_max)
            .collect()
    }

    /// Sup-norm distance between two equally shaped tables.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        sup_distance(&self.values, &other.values)
    }
}

pub(crate) fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Synchronous value iteration on the exact model, starting from zero.
///
/// The returned table satisfies `‖B*Q − Q‖∞ ≤ tol`.
pub fn solve_optimal_q(mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<QTable> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let mut q = QTable::zeros(mdp.num_states(), mdp.num_actions(), "optimal");
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let next = mdp.bellman_optimality(&q);
        residual = sup_distance(&next, &q.values);
        q.values = next;
        // the new iterate's residual is at most γ times the old one
        if residual * mdp.discount() <= tol {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        residual,
    })
}

/// Indices of the entries within `tie_tol` of the row maximum.
pub fn argmax_set(row: &[f64], tie_tol: f64) -> Vec<usize> {
    let best = row_max(row);
    (0..row.len()).filter(|&a| row[a] >= best - tie_tol).collect()
}

/// Greedy policy, uniform over actions within `tie_tol` of the row max.
pub fn greedy_policy(q: &QTable, tie_tol: f64) -> Policy {
    let a_n = q.num_actions;
    let mut probs = vec![0.0; q.values.len()];
    for s in 0..q.num_states {
        let ties = argmax_set(q.row(s), tie_tol);
        let share = 1.0 / ties.len() as f64;
        for a in ties {
            probs[s * a_n + a] = share;
        }
    }
    Policy {
        num_states: q.num_states,
        num_actions: a_n,
        probs,
    }
}

/// `epsilon_opt · base + (1 − epsilon_opt) · uniform`.
pub fn mix_policy(base: &Policy, epsilon_opt: f64) -> Result<Policy> {
    if !(0.0..=1.0).contains(&epsilon_opt) {
        return Err(Error::invalid("epsilon_opt", format!("{epsilon_opt} not in [0, 1]")));
    }
    let uniform = 1.0 / base.num_actions as f64;
    let probs = base
        .probs
        .iter()
        .map(|p| epsilon_opt * p + (1.0 - epsilon_opt) * uniform)
        .collect();
    Ok(Policy {
        num_states: base.num_states,
        num_actions: base.num_actions,
        probs,
    })
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the running sum; take the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Random MDP with Dirichlet(1) transitions, uniform `[0, 1]` rewards and a
/// uniform initial distribution. No terminal states.
pub fn random_mdp(
    num_states: usize,
    num_actions: usize,
    discount: f64,
    seed: u64,
) -> Result<TabularMdp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Vec::with_capacity(num_states * num_actions * num_states);
    for _ in 0..num_states * num_actions {
        let raw: Vec<f64> = (0..num_states)
            .map(|_| -(1.0 - rng.gen::<f64>()).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
        // push the rounding error into the largest entry so the row sums to 1
        let drift = 1.0 - row.iter().sum::<f64>();
        let big = (0..num_states)
            .max_by(|&i, &j| row[i].total_cmp(&row[j]))
            .unwrap_or(0);
        row[big] += drift;
        transition.extend(row);
    }
    let reward = (0..num_states * num_actions).map(|_| rng.gen::<f64>()).collect();
    TabularMdp::new(
        num_states,
        num_actions,
        transition,
        reward,
        discount,
        vec![1.0 / num_states as f64; num_states],
        vec![false; num_states],
        1.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state(reward: f64, discount: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![reward], discount, vec![1.0], vec![false], 1.0)
            .unwrap()
    }

    #[test]
    fn geometric_series_fixed_point() {
        let q = solve_optimal_q(&single_state(1.0, 0.9), 1e-10, 10_000).unwrap();
        assert!((q.get(0, 0) - 10.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_rows() {
        let err = TabularMdp::new(1, 1, vec![0.5], vec![0.0], 0.9, vec![1.0], vec![false], 1.0);
        assert!(matches!(err, Err(Error::Invalid { .. })));
        let err = TabularMdp::new(1, 1, vec![1.0], vec![2.0], 0.9, vec![1.0], vec![false], 1.0);
        assert!(err.is_err());
    }

    #[test]
    fn non_convergence_carries_residual() {
        match solve_optimal_q(&single_state(1.0, 0.99), 1e-12, 3) {
            Err(Error::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.0);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn greedy_rows() {
        let q = QTable {
            num_states: 3,
            num_actions: 3,
            values: vec![1.0, 0.2, 0.0, 0.5, 0.5, 0.1, 1.0, 1.0 - 1e-12, 0.0],
            method_tag: "t".into(),
            policy: None,
        };
        let pi = greedy_policy(&q, 1e-9);
        assert_eq!(pi.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(pi.row(1), &[0.5, 0.5, 0.0]);
        assert_eq!(pi.row(2), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn mixing() {
        let base = Policy::new(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mixed = mix_policy(&base, 0.5).unwrap();
        assert_eq!(mixed.row(0), &[0.625, 0.125, 0.125, 0.125]);
        assert_eq!(mix_policy(&base, 1.0).unwrap(), base);
        assert_eq!(mix_policy(&base, 0.0).unwrap().row(0), &[0.25; 4]);
        assert!(mix_policy(&base, 1.5).is_err());
    }

    #[test]
    fn random_mdp_rows_are_stochastic() {
        let mdp = random_mdp(5, 3, 0.9, 11).unwrap();
        for s in 0..5 {
            for a in 0..3 {
                let total: f64 = mdp.next_dist(s, a).iter().sum();
                assert!((total - 1.0).abs() <= STOCHASTIC_TOL);
            }
        }
    }

    #[test]
    fn sampling_respects_zero_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_ne!(sample_index(&[0.5, 0.0, 0.5], &mut rng), 1);
        }
    }
}
