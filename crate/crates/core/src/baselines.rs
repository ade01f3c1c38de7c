//! Non-confidence-conditioned comparison methods: plain empirical Q-iteration,
//! count-bonus anti-exploration, tabular CQL, the independently initialized
//! ensemble (AEVL), and the fixed-δ selection rule used by Fixed-CCVL.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ccvl::{self, ConfidenceQ, PolicyMode, SolveReport};
use crate::data::{empirical_bellman, EmpiricalModel, Fallback, OfflineDataset};
use crate::error::{Error, Result};
use crate::mdp::{row_max, sup_distance, Policy};

pub use crate::mdp::QTable;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableUpdate {
    Plain,
    AntiExploration { alpha: f64 },
    Cql { alpha: f64 },
}

impl TableUpdate {
    pub fn tag(&self) -> &'static str {
        match self {
            TableUpdate::Plain => "plain",
            TableUpdate::AntiExploration { .. } => "anti-explore",
            TableUpdate::Cql { .. } => "cql",
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("alpha", "must be finite and nonnegative"))
    }
}

fn check_shapes(prev: &QTable, data: &OfflineDataset, model: &EmpiricalModel) -> Result<()> {
    if prev.num_states != data.num_states()
        || prev.num_actions != data.num_actions()
        || model.num_states() != data.num_states()
        || model.num_actions() != data.num_actions()
    {
        return Err(Error::Shape("table, dataset and model dimensions differ".into()));
    }
    Ok(())
}

fn clamp_table(values: &mut [f64], model: &EmpiricalModel, alpha: f64) {
    let v_max = model.meta().v_max();
    for v in values {
        *v = v.clamp(-v_max - alpha, v_max);
    }
}

/// `Q ← B̂*Q`
pub fn plain_backup(prev: &QTable, data: &OfflineDataset, model: &EmpiricalModel) -> Result<QTable> {
    check_shapes(prev, data, model)?;
    Ok(QTable {
        values: empirical_bellman(&prev.values, model, Fallback::Pessimistic),
        method_tag: "plain".into(),
        policy: None,
        ..prev.clone()
    })
}

/// `Q ← B̂*Q − α·√(1 / (n(s,a) ∨ 1))`
pub fn anti_exploration_backup(
    prev: &QTable,
    data: &OfflineDataset,
    model: &EmpiricalModel,
    alpha: f64,
) -> Result<QTable> {
    check_alpha(alpha)?;
    check_shapes(prev, data, model)?;
    let a_n = prev.num_actions;
    let mut values = empirical_bellman(&prev.values, model, Fallback::Pessimistic);
    for (sa, v) in values.iter_mut().enumerate() {
        let n = data.count_sa(sa / a_n, sa % a_n).max(1) as f64;
        *v -= alpha * (1.0 / n).sqrt();
    }
    clamp_table(&mut values, model, alpha);
    Ok(QTable {
        values,
        method_tag: "anti-explore".into(),
        policy: None,
        ..prev.clone()
    })
}

/// Tabular CQL: `Q ← B̂*Q − α·(π/π̂β − 1)` with `π` the objective's maximizing
/// (greedy) policy. The returned table carries that policy.
pub fn cql_backup(
    prev: &QTable,
    data: &OfflineDataset,
    model: &EmpiricalModel,
    alpha: f64,
) -> Result<QTable> {
    check_alpha(alpha)?;
    check_shapes(prev, data, model)?;
    let a_n = prev.num_actions;
    let targets = empirical_bellman(&prev.values, model, Fallback::Pessimistic);
    let mut values = Vec::with_capacity(targets.len());
    let mut probs = Vec::with_capacity(targets.len());
    for s in 0..prev.num_states {
        let pi_beta = ccvl::floored_behavior(data, s);
        let shift = vec![alpha; a_n];
        let slope: Vec<f64> = pi_beta.iter().map(|p| alpha / p).collect();
        let sol = ccvl::solve_state(&targets[s * a_n..(s + 1) * a_n], &shift, &slope, PolicyMode::Greedy);
        values.extend(sol.q);
        probs.extend(sol.pi);
    }
    clamp_table(&mut values, model, alpha);
    Ok(QTable {
        values,
        method_tag: "cql".into(),
        policy: Some(Policy {
            num_states: prev.num_states,
            num_actions: a_n,
            probs,
        }),
        ..prev.clone()
    })
}

pub fn table_backup(
    update: TableUpdate,
    prev: &QTable,
    data: &OfflineDataset,
    model: &EmpiricalModel,
) -> Result<QTable> {
    match update {
        TableUpdate::Plain => plain_backup(prev, data, model),
        TableUpdate::AntiExploration { alpha } => anti_exploration_backup(prev, data, model, alpha),
        TableUpdate::Cql { alpha } => cql_backup(prev, data, model, alpha),
    }
}

/// Iterates a table update until successive tables differ by at most `tol`.
pub fn solve_table(
    update: TableUpdate,
    init: QTable,
    data: &OfflineDataset,
    model: &EmpiricalModel,
    tol: f64,
    max_iters: usize,
) -> Result<(QTable, SolveReport)> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let mut q = init;
    let mut residual = f64::INFINITY;
    for iteration in 1..=max_iters {
        let next = table_backup(update, &q, data, model)?;
        residual = sup_distance(&next.values, &q.values);
        q = next;
        if residual <= tol {
            return Ok((
                q,
                SolveReport {
                    iterations: iteration,
                    final_residual: residual,
                    argmax_degeneracy_rate: 1.0,
                },
            ));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        residual,
    })
}

/// Solves from the pessimistic constant initialization `−v_max`.
pub fn train_table(
    update: TableUpdate,
    data: &OfflineDataset,
    model: &EmpiricalModel,
    tol: f64,
    max_iters: usize,
) -> Result<(QTable, SolveReport)> {
    let init = QTable::filled(
        data.num_states(),
        data.num_actions(),
        -model.meta().v_max(),
        update.tag(),
    );
    solve_table(update, init, data, model, tol, max_iters)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleQ {
    pub members: Vec<QTable>,
    pub seeds: Vec<u64>,
}

/// Trains `seeds.len()` CQL tables from independent uniform random
/// initializations in `[−v_max, v_max]`. Members are trained in parallel.
pub fn train_aevl_ensemble(
    data: &OfflineDataset,
    model: &EmpiricalModel,
    ensemble_size: usize,
    alpha: f64,
    seeds: &[u64],
    tol: f64,
    max_iters: usize,
) -> Result<EnsembleQ> {
    use rayon::prelude::*;
    if ensemble_size < 2 || seeds.len() != ensemble_size {
        return Err(Error::invalid(
            "ensemble_size",
            format!("need ensemble_size >= 2 matching {} seeds", seeds.len()),
        ));
    }
    let v_max = model.meta().v_max();
    let members = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut init = QTable::zeros(data.num_states(), data.num_actions(), "aevl");
            init.values
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-v_max..=v_max));
            let (mut q, _) = solve_table(TableUpdate::Cql { alpha }, init, data, model, tol, max_iters)?;
            q.method_tag = "aevl".into();
            Ok(q)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleQ {
        members,
        seeds: seeds.to_vec(),
    })
}

/// Dataset-averaged squared sample Bellman residual of one `[S][A]` table.
pub fn sample_bellman_error(table: &[f64], num_actions: usize, discount: f64, data: &OfflineDataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let total: f64 = data
        .transitions()
        .iter()
        .map(|t| {
            let next = if t.done {
                0.0
            } else {
                row_max(&table[t.s_next * num_actions..(t.s_next + 1) * num_actions])
            };
            let residual = table[t.s * num_actions + t.a] - t.r - discount * next;
            residual * residual
        })
        .sum();
    total / data.len() as f64
}

/// Grid index whose slice has the smallest offline Bellman error; ties go to the smaller δ.
pub fn fixed_ccvl_select(ccvl: &ConfidenceQ, data: &OfflineDataset) -> usize {
    let mut best = (0, f64::INFINITY);
    for k in 0..ccvl.num_deltas() {
        let err = sample_bellman_error(&ccvl.slice(k), ccvl.num_actions, ccvl.discount, data);
        if err < best.1 {
            best = (k, err);
        }
    }
    best.0
}

/// One δ-slice as a plain table.
pub fn slice_as_table(ccvl: &ConfidenceQ, k: usize) -> QTable {
    QTable {
        num_states: ccvl.num_states,
        num_actions: ccvl.num_actions,
        values: ccvl.slice(k),
        method_tag: format!("ccvl-slice-{k}"),
        policy: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccvl::{BoundKind, ConfidenceGrid};
    use crate::data::{build_empirical_model, collect_dataset, Transition, ValueMeta};
    use crate::mdp::random_mdp;

    fn setup(seed: u64) -> (OfflineDataset, EmpiricalModel) {
        let mdp = random_mdp(5, 3, 0.9, seed).unwrap();
        let data = collect_dataset(&mdp, &Policy::uniform(5, 3), 300, 15, seed).unwrap();
        let model = build_empirical_model(&data, ValueMeta::of(&mdp));
        (data, model)
    }

    #[test]
    fn zero_alpha_collapses_to_plain() {
        let (data, model) = setup(1);
        let prev = QTable::filled(5, 3, 0.7, "x");
        let plain = plain_backup(&prev, &data, &model).unwrap();
        assert_eq!(cql_backup(&prev, &data, &model, 0.0).unwrap().values, plain.values);
        assert_eq!(anti_exploration_backup(&prev, &data, &model, 0.0).unwrap().values, plain.values);
    }

    #[test]
    fn unit_counts_subtract_alpha() {
        let transitions: Vec<Transition> = (0..2)
            .map(|s| Transition {
                s,
                a: 0,
                r: 0.25,
                s_next: 1 - s,
                done: false,
            })
            .collect();
        let data = OfflineDataset::from_transitions(2, 1, transitions).unwrap();
        let model = build_empirical_model(&data, ValueMeta { discount: 0.9, r_max: 1.0 });
        let out = anti_exploration_backup(&QTable::zeros(2, 1, "x"), &data, &model, 0.4).unwrap();
        for v in out.values {
            assert!((v - (0.25 - 0.4)).abs() < 1e-12);
        }
    }

    #[test]
    fn cql_uniform_behavior_constant_targets_is_penalty_free() {
        // one state, two actions, same reward and successor
        let transitions: Vec<Transition> = (0..2)
            .flat_map(|a| {
                std::iter::repeat(Transition {
                    s: 0,
                    a,
                    r: 0.5,
                    s_next: 0,
                    done: false,
                })
                .take(3)
            })
            .collect();
        let data = OfflineDataset::from_transitions(1, 2, transitions).unwrap();
        let model = build_empirical_model(&data, ValueMeta { discount: 0.9, r_max: 1.0 });
        let prev = QTable::filled(1, 2, 2.0, "x");
        let out = cql_backup(&prev, &data, &model, 0.7).unwrap();
        let plain = plain_backup(&prev, &data, &model).unwrap();
        for (a, b) in out.values.iter().zip(&plain.values) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.policy.unwrap().row(0), &[0.5, 0.5]);
    }

    #[test]
    fn cql_converges_and_reports() {
        let (data, model) = setup(4);
        let (q, report) = train_table(TableUpdate::Cql { alpha: 0.3 }, &data, &model, 1e-10, 10_000).unwrap();
        assert!(report.final_residual <= 1e-10);
        assert!(q.policy.is_some());
        let again = train_table(TableUpdate::Cql { alpha: 0.3 }, &data, &model, 1e-10, 10_000).unwrap().0;
        assert_eq!(q, again);
    }

    #[test]
    fn ensemble_validation_and_determinism() {
        let (data, model) = setup(2);
        assert!(train_aevl_ensemble(&data, &model, 1, 0.1, &[1], 1e-8, 10_000).is_err());
        assert!(train_aevl_ensemble(&data, &model, 3, 0.1, &[1, 2], 1e-8, 10_000).is_err());
        let e = train_aevl_ensemble(&data, &model, 2, 0.1, &[7, 7], 1e-8, 10_000).unwrap();
        assert_eq!(e.members[0], e.members[1]);
    }

    #[test]
    fn fixed_select_single_and_exact_slice() {
        let (data, model) = setup(3);
        let grid = ConfidenceGrid::single(0.3).unwrap();
        let one = ConfidenceQ::initial(5, 3, grid, BoundKind::Lower, 0.1, 1.0, model.meta()).unwrap();
        assert_eq!(fixed_ccvl_select(&one, &data), 0);

        // slice 1 is the empirical fixed point; slices 0 and 2 are not
        let (exact, _) = train_table(TableUpdate::Plain, &data, &model, 1e-13, 10_000).unwrap();
        let grid = ConfidenceGrid::new(vec![0.1, 0.5, 0.9]).unwrap();
        let mut q = ConfidenceQ::initial(5, 3, grid, BoundKind::Lower, 0.1, 1.0, model.meta()).unwrap();
        for sa in 0..15 {
            q.values[sa * 3] = exact.values[sa] - 0.3;
            q.values[sa * 3 + 1] = exact.values[sa];
            q.values[sa * 3 + 2] = exact.values[sa] + 0.3;
        }
        assert_eq!(fixed_ccvl_select(&q, &data), 1);
    }
}
