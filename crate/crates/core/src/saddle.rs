//! Per-state solution of the regularized (CQL-style) backup.
//!
//! For one state with backup targets `B(a)`, behavior `πβ` and weight `c`,
//!
//! ```text
//! min_Q max_π  c·(E_π[Q] − E_πβ[Q]) + ½·E_πβ[(Q − B)²]
//! ```
//!
//! is convex in `Q` and has first-order condition `Q(a) = B(a) + d_a − e_a·π(a)` where `π` is the
//! maximizing policy. With the state-count weighting, `d_a = c` and
//! `e_a = c / πβ(a)`, which is the closed form `Q = B − c·(π/πβ − 1)`.
//!
//! * Greedy inner policy: `π` must put mass only on argmax actions of the
//!   resulting `Q`. The unique consistent solution is a water-filling:
//!   `Q(a) = min(B(a) + d_a, v)` with `Σ_a (B(a) + d_a − v)₊ / e_a = 1`.
//! * Entropy-regularized inner policy with temperature `T`:
//!   `π = softmax(Q / T)`, solved by bisection on the log-partition.

/// Solution for one state.
#[derive(Clone, Debug, PartialEq)]
pub struct SaddleSolution {
    pub q: Vec<f64>,
    pub pi: Vec<f64>,
}

impl SaddleSolution {
    pub fn value(&self) -> f64 {
        crate::mdp::row_max(&self.q)
    }
}

fn plain_greedy(targets: &[f64]) -> SaddleSolution {
    let ties = crate::mdp::argmax_set(targets, crate::mdp::DEFAULT_TIE_TOL);
    let mut pi = vec![0.0; targets.len()];
    for &a in &ties {
        pi[a] = 1.0 / ties.len() as f64;
    }
    SaddleSolution {
        q: targets.to_vec(),
        pi,
    }
}

/// Greedy-policy solution. `shift[a] = d_a`, `slope[a] = e_a > 0`.
/// A zero slope everywhere means no regularizer: `Q = B`.
pub fn solve_greedy(targets: &[f64], shift: &[f64], slope: &[f64]) -> SaddleSolution {
    if slope.iter().all(|&e| e == 0.0) {
        return plain_greedy(targets);
    }
    let n = targets.len();
    let tops: Vec<f64> = (0..n).map(|a| targets[a] + shift[a]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| tops[j].total_cmp(&tops[i]).then(i.cmp(&j)));

    // Σ_{active} w (t − v) = 1 with w = 1 / e
    let (mut weight, mut weighted_top) = (0.0, 0.0);
    let mut level = f64::NEG_INFINITY;
    for (m, &a) in order.iter().enumerate() {
        let w = 1.0 / slope[a];
        weight += w;
        weighted_top += w * tops[a];
        level = (weighted_top - 1.0) / weight;
        match order.get(m + 1) {
            Some(&next) if tops[next] > level => continue,
            _ => break,
        }
    }
    let q: Vec<f64> = tops.iter().map(|&t| t.min(level)).collect();
    let mut pi: Vec<f64> = (0..n)
        .map(|a| ((tops[a] - level).max(0.0)) / slope[a])
        .collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    SaddleSolution { q, pi }
}

/// Root `t` of `eᵗ + t = l`, i.e. `y = eᵗ` solves `y·eʸ = eˡ`.
fn log_lambert(l: f64) -> f64 {
    // Newton from the right of the root converges monotonically (convex, increasing)
    let mut t = if l > 1.0 { l.ln() } else { l };
    for _ in 0..200 {
        let et = t.exp();
        let step = (et + t - l) / (et + 1.0);
        t -= step;
        if step.abs() <= 1e-15 * (1.0 + t.abs()) {
            break;
        }
    }
    t
}

/// Entropy-regularized solution with inner policy `π = softmax(Q / temp)`.
pub fn solve_softmax(targets: &[f64], shift: &[f64], slope: &[f64], temp: f64) -> SaddleSolution {
    let n = targets.len();
    if slope.iter().all(|&e| e == 0.0) {
        let m = crate::mdp::row_max(targets);
        let w: Vec<f64> = targets.iter().map(|&b| ((b - m) / temp).exp()).collect();
        let z: f64 = w.iter().sum();
        return SaddleSolution {
            q: targets.to_vec(),
            pi: w.iter().map(|x| x / z).collect(),
        };
    }
    let tops: Vec<f64> = (0..n).map(|a| targets[a] + shift[a]).collect();
    // y_a(u) solves ln y + y = ln(e_a / T) + (t_a − u) / T, and π_a = y_a·T / e_a
    let ys = |u: f64| -> Vec<f64> {
        (0..n)
            .map(|a| log_lambert((slope[a] / temp).ln() + (tops[a] - u) / temp).exp())
            .collect()
    };
    let mass = |u: f64| -> f64 {
        ys(u)
            .iter()
            .zip(slope)
            .map(|(y, e)| y * temp / e)
            .sum::<f64>()
            - 1.0
    };
    let anchor = crate::mdp::row_max(&tops);
    let (mut lo, mut hi) = (anchor - temp, anchor + temp);
    let mut span = temp;
    while mass(lo) < 0.0 {
        span *= 2.0;
        lo = anchor - span;
    }
    span = temp;
    while mass(hi) > 0.0 {
        span *= 2.0;
        hi = anchor + span;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let u = 0.5 * (lo + hi);
    let y = ys(u);
    let q: Vec<f64> = (0..n).map(|a| tops[a] - temp * y[a]).collect();
    let mut pi: Vec<f64> = (0..n).map(|a| y[a] * temp / slope[a]).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    SaddleSolution { q, pi }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_count(c: f64, pi_beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (vec![c; pi_beta.len()], pi_beta.iter().map(|p| c / p).collect())
    }

    #[test]
    fn closed_form_holds_with_returned_policy() {
        let b = [1.0, 0.4, 0.2, -0.3];
        let pb = [0.1, 0.4, 0.3, 0.2];
        let (d, e) = state_count(0.5, &pb);
        let sol = solve_greedy(&b, &d, &e);
        for a in 0..4 {
            let expected = b[a] - 0.5 * (sol.pi[a] / pb[a] - 1.0);
            assert!((sol.q[a] - expected).abs() < 1e-12, "action {a}");
        }
        // policy is supported on the argmax of the resulting Q
        let best = sol.value();
        for a in 0..4 {
            if sol.pi[a] > 0.0 {
                assert!((sol.q[a] - best).abs() < 1e-12);
            }
        }
        assert!((sol.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_action_hand_solution() {
        // B = (1, 0), πβ uniform, c = 0.2: v = 1 − c, Q = (0.8, 0.2)
        let (d, e) = state_count(0.2, &[0.5, 0.5]);
        let sol = solve_greedy(&[1.0, 0.0], &d, &e);
        assert!((sol.q[0] - 0.8).abs() < 1e-12);
        assert!((sol.q[1] - 0.2).abs() < 1e-12);
        assert_eq!(sol.pi, vec![1.0, 0.0]);
    }

    #[test]
    fn constant_targets_uniform_behavior_is_penalty_free() {
        let (d, e) = state_count(0.7, &[0.25; 4]);
        let sol = solve_greedy(&[0.3; 4], &d, &e);
        for a in 0..4 {
            assert!((sol.q[a] - 0.3).abs() < 1e-12);
            assert!((sol.pi[a] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_is_plain_backup() {
        let sol = solve_greedy(&[0.1, 0.5], &[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(sol.q, vec![0.1, 0.5]);
        assert_eq!(sol.pi, vec![0.0, 1.0]);
    }

    #[test]
    fn lambert_root() {
        for l in [-30.0, -1.0, 0.0, 1.0, 5.0, 700.0, 1e6] {
            let t = log_lambert(l);
            assert!((t.exp() + t - l).abs() <= 1e-9 * (1.0 + l.abs()), "l = {l}");
        }
    }

    #[test]
    fn softmax_stationarity() {
        let b = [1.0, 0.4, 0.2];
        let pb = [0.2, 0.5, 0.3];
        let (d, e) = state_count(0.3, &pb);
        let temp = 0.1;
        let sol = solve_softmax(&b, &d, &e, temp);
        let m = crate::mdp::row_max(&sol.q);
        let z: f64 = sol.q.iter().map(|q| ((q - m) / temp).exp()).sum();
        for a in 0..3 {
            let soft = ((sol.q[a] - m) / temp).exp() / z;
            assert!((soft - sol.pi[a]).abs() < 1e-9);
            let expected = b[a] - 0.3 * (sol.pi[a] / pb[a] - 1.0);
            assert!((sol.q[a] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_approaches_greedy_at_low_temperature() {
        let b = [1.0, 0.4, 0.2];
        let (d, e) = state_count(0.3, &[0.2, 0.5, 0.3]);
        let hard = solve_greedy(&b, &d, &e);
        let soft = solve_softmax(&b, &d, &e, 1e-4);
        for a in 0..3 {
            assert!((hard.q[a] - soft.q[a]).abs() < 1e-2);
        }
    }
}
