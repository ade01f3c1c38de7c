//! Offline datasets, visitation counts, and the empirical Bellman operator.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{sample_index, Policy, TabularMdp};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub done: bool,
}

/// Transitions plus the exact counts `n(s,a)`, `n(s)` and the count-based
/// behavior estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    num_states: usize,
    num_actions: usize,
    transitions: Vec<Transition>,
    count_sa: Vec<u64>,
    count_s: Vec<u64>,
    behavior_hat: Policy,
}

impl OfflineDataset {
    pub fn from_transitions(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<Transition>,
    ) -> Result<Self> {
        let mut count_sa = vec![0u64; num_states * num_actions];
        for (i, t) in transitions.iter().enumerate() {
            if t.s >= num_states || t.s_next >= num_states || t.a >= num_actions {
                return Err(Error::Shape(format!(
                    "transition {i} ({}, {}, {}) out of range for {num_states}x{num_actions}",
                    t.s, t.a, t.s_next
                )));
            }
            if !t.r.is_finite() {
                return Err(Error::invalid("r", format!("non-finite reward in transition {i}")));
            }
            count_sa[t.s * num_actions + t.a] += 1;
        }
        let count_s: Vec<u64> = count_sa.chunks(num_actions).map(|c| c.iter().sum()).collect();
        let mut probs = vec![1.0 / num_actions as f64; num_states * num_actions];
        for s in 0..num_states {
            if count_s[s] > 0 {
                for a in 0..num_actions {
                    probs[s * num_actions + a] =
                        count_sa[s * num_actions + a] as f64 / count_s[s] as f64;
                }
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            transitions,
            count_sa,
            count_s,
            behavior_hat: Policy {
                num_states,
                num_actions,
                probs,
            },
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// `n(s, a)`
    pub fn count_sa(&self, s: usize, a: usize) -> u64 {
        self.count_sa[s * self.num_actions + a]
    }

    /// `n(s)`
    pub fn count_s(&self, s: usize) -> u64 {
        self.count_s[s]
    }

    pub fn behavior_hat(&self) -> &Policy {
        &self.behavior_hat
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.transitions {
            serde_json::to_writer(&mut out, t)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Loads JSON Lines and recomputes all counts. Blank lines are skipped.
    pub fn read_jsonl<R: BufRead>(
        input: R,
        num_states: usize,
        num_actions: usize,
    ) -> Result<Self> {
        let mut transitions = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            transitions.push(serde_json::from_str(&line)?);
        }
        Self::from_transitions(num_states, num_actions, transitions)
    }
}

/// Rolls episodes from the initial distribution under `behavior` until exactly
/// `num_samples` transitions are gathered. Episodes end at a terminal state or
/// after `horizon` steps.
pub fn collect_dataset(
    mdp: &TabularMdp,
    behavior: &Policy,
    num_samples: usize,
    horizon: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if num_samples == 0 {
        return Err(Error::invalid("num_samples", "must be positive"));
    }
    if horizon == 0 {
        return Err(Error::invalid("horizon", "must be positive"));
    }
    if behavior.num_states != mdp.num_states() || behavior.num_actions != mdp.num_actions() {
        return Err(Error::Shape("behavior policy does not match the MDP".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(num_samples);
    'episodes: while transitions.len() < num_samples {
        let mut s = sample_index(mdp.initial_dist(), &mut rng);
        for _ in 0..horizon {
            if mdp.is_terminal(s) {
                break;
            }
            let a = sample_index(behavior.row(s), &mut rng);
            let s_next = sample_index(mdp.next_dist(s, a), &mut rng);
            let done = mdp.is_terminal(s_next);
            transitions.push(Transition {
                s,
                a,
                r: mdp.realized_reward(s, a, s_next),
                s_next,
                done,
            });
            if transitions.len() == num_samples {
                break 'episodes;
            }
            if done {
                break;
            }
            s = s_next;
        }
    }
    OfflineDataset::from_transitions(mdp.num_states(), mdp.num_actions(), transitions)
}

/// Discount and reward bound shared by every value table built from a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueMeta {
    pub discount: f64,
    pub r_max: f64,
}

impl ValueMeta {
    pub fn of(mdp: &TabularMdp) -> Self {
        Self {
            discount: mdp.discount(),
            r_max: mdp.r_max(),
        }
    }

    /// `r_max / (1 − γ)`
    pub fn v_max(&self) -> f64 {
        self.r_max / (1.0 - self.discount)
    }
}

/// What an unvisited `(s, a)` backs up to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fallback {
    /// `−r_max / (1 − γ)`, used by lower-bound and baseline tables.
    Pessimistic,
    /// `+r_max / (1 − γ)`, used by upper-bound tables.
    Optimistic,
}

/// Maximum-likelihood model of the data-generating MDP.
#[derive(Clone, Debug)]
pub struct EmpiricalModel {
    num_states: usize,
    num_actions: usize,
    p_hat: Vec<f64>,
    r_hat: Vec<f64>,
    visited: Vec<bool>,
    /// States observed as `s_next` of a `done` transition.
    terminal: Vec<bool>,
    successors: Vec<Vec<(usize, f64)>>,
    meta: ValueMeta,
}

pub fn build_empirical_model(data: &OfflineDataset, meta: ValueMeta) -> EmpiricalModel {
    let (s_n, a_n) = (data.num_states(), data.num_actions());
    let mut next_counts = vec![0u64; s_n * a_n * s_n];
    let mut reward_sum = vec![0.0; s_n * a_n];
    let mut terminal = vec![false; s_n];
    for t in data.transitions() {
        let sa = t.s * a_n + t.a;
        next_counts[sa * s_n + t.s_next] += 1;
        reward_sum[sa] += t.r;
        if t.done {
            terminal[t.s_next] = true;
        }
    }
    let mut p_hat = vec![0.0; s_n * a_n * s_n];
    let mut r_hat = vec![0.0; s_n * a_n];
    let mut visited = vec![false; s_n * a_n];
    let mut successors = vec![Vec::new(); s_n * a_n];
    for sa in 0..s_n * a_n {
        let n = data.count_sa[sa];
        if n == 0 {
            continue;
        }
        visited[sa] = true;
        r_hat[sa] = reward_sum[sa] / n as f64;
        for s_next in 0..s_n {
            let c = next_counts[sa * s_n + s_next];
            if c > 0 {
                let p = c as f64 / n as f64;
                p_hat[sa * s_n + s_next] = p;
                successors[sa].push((s_next, p));
            }
        }
    }
    EmpiricalModel {
        num_states: s_n,
        num_actions: a_n,
        p_hat,
        r_hat,
        visited,
        terminal,
        successors,
        meta,
    }
}

impl EmpiricalModel {
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn meta(&self) -> ValueMeta {
        self.meta
    }

    pub fn is_visited(&self, s: usize, a: usize) -> bool {
        self.visited[s * self.num_actions + a]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn r_hat(&self, s: usize, a: usize) -> f64 {
        self.r_hat[s * self.num_actions + a]
    }

    pub fn p_hat(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.p_hat[start..start + self.num_states]
    }

    /// `B̂*` given per-state continuation values `V(s') = max_a' Q(s', a')`.
    ///
    /// Successors known to be terminal contribute zero continuation value.
    /// Output is clamped to `[−v_max, v_max]`.
    pub fn backup_from_values(&self, state_values: &[f64], fallback: Fallback) -> Vec<f64> {
        let v_max = self.meta.v_max();
        let unvisited = match fallback {
            Fallback::Pessimistic => -v_max,
            Fallback::Optimistic => v_max,
        };
        let gamma = self.meta.discount;
        (0..self.num_states * self.num_actions)
            .map(|sa| {
                if !self.visited[sa] {
                    return unvisited;
                }
                let cont: f64 = self.successors[sa]
                    .iter()
                    .filter(|(s_next, _)| !self.terminal[*s_next])
                    .map(|&(s_next, p)| p * state_values[s_next])
                    .sum();
                (self.r_hat[sa] + gamma * cont).clamp(-v_max, v_max)
            })
            .collect()
    }
}

/// Empirical Bellman optimality backup of a `[S][A]` table.
pub fn empirical_bellman(q_slice: &[f64], model: &EmpiricalModel, fallback: Fallback) -> Vec<f64> {
    let values: Vec<f64> = q_slice
        .chunks(model.num_actions)
        .map(crate::mdp::row_max)
        .collect();
    model.backup_from_values(&values, fallback)
}
