//! Episodic evaluation under a train/eval dynamics shift, coverage Monte
//! Carlo for the lower/upper bounds, and the α sweep.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{train_aevl_ensemble, train_table, EnsembleQ, TableUpdate};
use crate::ccvl::{self, ConfidenceGrid, ConfidenceQ, PolicyMode, RegWeighting, SolveReport, Update};
use crate::data::{build_empirical_model, collect_dataset, OfflineDataset, Transition, ValueMeta};
use crate::error::{Error, Result};
use crate::gridworld::{build_gridworld, GridworldSpec};
use crate::mdp::{greedy_policy, mix_policy, random_mdp, sample_index, solve_optimal_q, Policy, QTable, TabularMdp, DEFAULT_TIE_TOL};
use crate::policy::{AdaptiveAgent, AdaptivePolicyConfig, PolicyKind, SliceStack, SlicedValues};

pub const NORMALIZER_EPISODES: usize = 10_000;
pub const NORMALIZER_SEED: u64 = 0x5eed;
pub const DEFAULT_EPISODES: usize = 100;
pub const DEFAULT_HORIZON: usize = 100;
const BOUND_TOL: f64 = 1e-9;

/// Anything that picks actions during an evaluation stream.
pub trait ActionSource {
    fn begin_episode(&mut self, _episode: usize) {}
    fn act(&mut self, s: usize, rng: &mut ChaCha8Rng) -> usize;
    /// Called with every transition as it happens, so the history grows per step.
    fn observe(&mut self, _t: &Transition) {}
    /// Slice currently acted on: `(index, label)`.
    fn current_slice(&self) -> Option<(usize, f64)> {
        None
    }
    /// Modal slice of the source's belief.
    fn modal_slice(&self) -> Option<(usize, f64)> {
        None
    }
}

/// Samples from a fixed stochastic policy.
pub struct StaticPolicy<'a>(pub &'a Policy);

impl ActionSource for StaticPolicy<'_> {
    fn act(&mut self, s: usize, rng: &mut ChaCha8Rng) -> usize {
        sample_index(self.0.row(s), rng)
    }
}

impl<L: SlicedValues + ?Sized, U: SlicedValues + ?Sized> ActionSource for AdaptiveAgent<'_, L, U> {
    fn begin_episode(&mut self, _episode: usize) {
        AdaptiveAgent::begin_episode(self);
    }

    fn act(&mut self, s: usize, rng: &mut ChaCha8Rng) -> usize {
        AdaptiveAgent::act(self, s, rng)
    }

    fn observe(&mut self, t: &Transition) {
        AdaptiveAgent::observe(self, t);
    }

    fn current_slice(&self) -> Option<(usize, f64)> {
        Some((self.current_slice(), self.current_label()))
    }

    fn modal_slice(&self) -> Option<(usize, f64)> {
        let k = self.belief().mode();
        Some((k, self.belief().labels[k]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: usize,
    pub step: usize,
    pub delta_index: usize,
    pub delta: f64,
    pub action: usize,
    pub reward: f64,
}

/// Belief mode an episode starts under and the mode after its transitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMode {
    pub episode: usize,
    pub start_index: usize,
    pub start_delta: f64,
    pub end_index: usize,
    pub end_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub delta: f64,
    pub coverage: f64,
    pub resamples: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub per_episode_returns: Vec<f64>,
    pub mean_return: f64,
    pub optimal_return: f64,
    pub normalized_return: f64,
    pub delta_trace: Vec<TraceRow>,
    pub episode_modes: Vec<EpisodeMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<Vec<CoverageRow>>,
    #[serde(skip)]
    pub wall_time: f64,
}

impl EvalReport {
    pub fn normalize(&mut self, optimal_return: f64) {
        self.optimal_return = optimal_return;
        self.normalized_return = if optimal_return != 0.0 {
            self.mean_return / optimal_return
        } else {
            0.0
        };
    }

    /// `episode,return,start_delta,end_delta`; the belief columns are empty
    /// for sources without a belief.
    pub fn write_episodes_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["episode", "return", "start_delta", "end_delta"])
            .map_err(csv_error)?;
        for (e, ret) in self.per_episode_returns.iter().enumerate() {
            let (start, end) = match self.episode_modes.get(e) {
                Some(m) => (m.start_delta.to_string(), m.end_delta.to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([e.to_string(), ret.to_string(), start, end])
                .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `episode,step,delta_index,delta,action,reward`
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.delta_trace {
            w.serialize(row).map_err(csv_error)?;
        }
        if self.delta_trace.is_empty() {
            w.write_record(["episode", "step", "delta_index", "delta", "action", "reward"])
                .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes serializable rows as CSV with a header.
pub fn write_rows_csv<W: Write, T: Serialize>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `episodes` undiscounted episodes from the initial distribution.
/// Episodes stop at a terminal state or after `horizon` steps.
pub fn rollout<A: ActionSource + ?Sized>(
    mdp: &TabularMdp,
    source: &mut A,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 || horizon == 0 {
        return Err(Error::invalid("eval", "episodes and horizon must be positive"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = EvalReport::default();
    for episode in 0..episodes {
        source.begin_episode(episode);
        let start_mode = source.modal_slice();
        let mut s = sample_index(mdp.initial_dist(), &mut rng);
        let mut total = 0.0;
        for step in 0..horizon {
            if mdp.is_terminal(s) {
                break;
            }
            let a = source.act(s, &mut rng);
            let s_next = sample_index(mdp.next_dist(s, a), &mut rng);
            let r = mdp.realized_reward(s, a, s_next);
            total += r;
            if let Some((delta_index, delta)) = source.current_slice() {
                report.delta_trace.push(TraceRow {
                    episode,
                    step,
                    delta_index,
                    delta,
                    action: a,
                    reward: r,
                });
            }
            let t = Transition {
                s,
                a,
                r,
                s_next,
                done: mdp.is_terminal(s_next),
            };
            source.observe(&t);
            s = s_next;
        }
        if let (Some((start_index, start_delta)), Some((end_index, end_delta))) =
            (start_mode, source.modal_slice())
        {
            report.episode_modes.push(EpisodeMode {
                episode,
                start_index,
                start_delta,
                end_index,
                end_delta,
            });
        }
        report.per_episode_returns.push(total);
    }
    report.mean_return = report.per_episode_returns.iter().sum::<f64>() / episodes as f64;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Greedy policy of the exact optimal values, ties split uniformly.
pub fn optimal_policy(mdp: &TabularMdp) -> Result<Policy> {
    let q = solve_optimal_q(mdp, 1e-10, 100_000)?;
    Ok(greedy_policy(&q, DEFAULT_TIE_TOL))
}

/// Monte Carlo mean return of the optimal policy, the normalization denominator.
pub fn optimal_return(mdp: &TabularMdp, horizon: usize) -> Result<f64> {
    let pi = optimal_policy(mdp)?;
    let report = rollout(mdp, &mut StaticPolicy(&pi), NORMALIZER_EPISODES, horizon, NORMALIZER_SEED)?;
    Ok(report.mean_return)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Gridworld(GridworldSpec),
    Random {
        num_states: usize,
        num_actions: usize,
        discount: f64,
        seed: u64,
    },
}

impl EnvSpec {
    pub fn build(&self) -> Result<TabularMdp> {
        match self {
            EnvSpec::Gridworld(spec) => build_gridworld(spec),
            EnvSpec::Random {
                num_states,
                num_actions,
                discount,
                seed,
            } => random_mdp(*num_states, *num_actions, *discount, *seed),
        }
    }

    /// Train and eval environments may differ only in the slip probability.
    pub fn check_shift(&self, eval: &EnvSpec) -> Result<()> {
        match (self, eval) {
            (EnvSpec::Gridworld(a), EnvSpec::Gridworld(b)) => {
                if a.with_slip(b.slip_prob) != *b {
                    return Err(Error::invalid(
                        "env_eval",
                        "gridworld specs may differ only in slip_prob",
                    ));
                }
                Ok(())
            }
            (EnvSpec::Random { .. }, EnvSpec::Random { .. }) if self == eval => Ok(()),
            _ => Err(Error::invalid("env_eval", "must match env_train up to slip_prob")),
        }
    }
}

fn default_dataset_horizon() -> usize {
    DEFAULT_HORIZON
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_samples: usize,
    /// Probability mass on the optimal policy; the rest is uniform.
    pub epsilon_opt: f64,
    pub seed: u64,
    #[serde(default = "default_dataset_horizon")]
    pub horizon: usize,
}

impl DatasetSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Behavior policy `epsilon_opt·π* + (1 − epsilon_opt)·uniform` of `mdp`.
pub fn behavior_policy(mdp: &TabularMdp, epsilon_opt: f64) -> Result<Policy> {
    mix_policy(&optimal_policy(mdp)?, epsilon_opt)
}

pub fn collect(mdp: &TabularMdp, spec: &DatasetSpec) -> Result<OfflineDataset> {
    let behavior = behavior_policy(mdp, spec.epsilon_opt)?;
    collect_dataset(mdp, &behavior, spec.num_samples, spec.horizon, spec.seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    CcvlBonus,
    CcvlReg,
    CcvlUpper,
    Cql,
    AntiExplore,
    Plain,
    Aevl,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::CcvlBonus => "ccvl-bonus",
            Method::CcvlReg => "ccvl-reg",
            Method::CcvlUpper => "ccvl-upper",
            Method::Cql => "cql",
            Method::AntiExplore => "anti-explore",
            Method::Plain => "plain",
            Method::Aevl => "aevl",
        }
    }
}

fn default_iota() -> f64 {
    1.0
}
fn default_ensemble_size() -> usize {
    5
}
fn default_tol() -> f64 {
    ccvl::DEFAULT_TOL
}
fn default_max_iters() -> usize {
    ccvl::DEFAULT_MAX_ITERS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub method: Method,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_iota")]
    pub iota: f64,
    #[serde(default)]
    pub grid: ConfidenceGrid,
    #[serde(default)]
    pub policy_mode: PolicyMode,
    #[serde(default)]
    pub weighting: RegWeighting,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

impl SolverSpec {
    pub fn new(method: Method, alpha: f64) -> Self {
        Self {
            method,
            alpha,
            iota: 1.0,
            grid: ConfidenceGrid::default(),
            policy_mode: PolicyMode::default(),
            weighting: RegWeighting::default(),
            ensemble_size: default_ensemble_size(),
            tol: default_tol(),
            max_iters: default_max_iters(),
        }
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self { alpha, ..self.clone() }
    }

    fn update(&self) -> Option<Update> {
        match self.method {
            Method::CcvlBonus => Some(Update::Bonus),
            Method::CcvlReg => Some(Update::Regularized {
                mode: self.policy_mode,
                weighting: self.weighting,
            }),
            Method::CcvlUpper => Some(Update::Upper),
            _ => None,
        }
    }
}

/// Output of training one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trained {
    Confidence {
        lower: ConfidenceQ,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        upper: Option<ConfidenceQ>,
    },
    Table { table: QTable },
    Ensemble { ensemble: EnsembleQ },
}

impl Trained {
    pub fn num_states(&self) -> usize {
        match self {
            Trained::Confidence { lower, .. } => lower.num_states,
            Trained::Table { table } => table.num_states,
            Trained::Ensemble { ensemble } => ensemble.members[0].num_states,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            Trained::Confidence { lower, .. } => lower.num_actions,
            Trained::Table { table } => table.num_actions,
            Trained::Ensemble { ensemble } => ensemble.members[0].num_actions,
        }
    }

    pub fn num_slices(&self) -> usize {
        match self {
            Trained::Confidence { lower, .. } => lower.num_deltas(),
            Trained::Table { .. } => 1,
            Trained::Ensemble { ensemble } => ensemble.members.len(),
        }
    }
}

/// Trains `spec` on `data`. With `with_upper`, a confidence-conditioned lower
/// table is paired with an upper table of the same grid.
pub fn train_method(
    spec: &SolverSpec,
    data: &OfflineDataset,
    meta: ValueMeta,
    with_upper: bool,
) -> Result<(Trained, Vec<SolveReport>)> {
    let model = build_empirical_model(data, meta);
    let solve_ccvl = |update: Update| {
        ccvl::train(
            update,
            data,
            &model,
            spec.grid.clone(),
            spec.alpha,
            spec.iota,
            spec.tol,
            spec.max_iters,
        )
    };
    let table = |update: TableUpdate| -> Result<(Trained, Vec<SolveReport>)> {
        let (table, report) = train_table(update, data, &model, spec.tol, spec.max_iters)?;
        Ok((Trained::Table { table }, vec![report]))
    };
    match spec.method {
        Method::Cql => table(TableUpdate::Cql { alpha: spec.alpha }),
        Method::AntiExplore => table(TableUpdate::AntiExploration { alpha: spec.alpha }),
        Method::Plain => table(TableUpdate::Plain),
        Method::Aevl => {
            let seeds: Vec<u64> = (0..spec.ensemble_size as u64).collect();
            let ensemble = train_aevl_ensemble(
                data,
                &model,
                spec.ensemble_size,
                spec.alpha,
                &seeds,
                spec.tol,
                spec.max_iters,
            )?;
            Ok((Trained::Ensemble { ensemble }, Vec::new()))
        }
        _ => {
            let update = spec.update().expect("confidence-conditioned method");
            let (lower, report) = solve_ccvl(update)?;
            let mut reports = vec![report];
            let upper = if with_upper && update != Update::Upper {
                let (upper, report) = solve_ccvl(Update::Upper)?;
                reports.push(report);
                Some(upper)
            } else {
                None
            };
            Ok((Trained::Confidence { lower, upper }, reports))
        }
    }
}

/// Evaluates a trained artifact in `mdp`. Plain tables and the upper bound
/// table alone act greedily; confidence tables and ensembles use `policy`.
pub fn evaluate(
    trained: &Trained,
    mdp: &TabularMdp,
    policy: &AdaptivePolicyConfig,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport> {
    if trained.num_states() != mdp.num_states() || trained.num_actions() != mdp.num_actions() {
        return Err(Error::Shape(format!(
            "tables are {}x{} but the environment is {}x{}",
            trained.num_states(),
            trained.num_actions(),
            mdp.num_states(),
            mdp.num_actions()
        )));
    }
    match trained {
        Trained::Confidence { lower, upper } => {
            let mut agent = AdaptiveAgent::new(lower, upper.as_ref(), policy.clone())?;
            rollout(mdp, &mut agent, episodes, horizon, seed)
        }
        Trained::Table { table } => {
            let stack = SliceStack::single(table.clone(), mdp.discount());
            let cfg = AdaptivePolicyConfig {
                mode: PolicyKind::FixedDelta { index: 0 },
                ..policy.clone()
            };
            let mut agent = AdaptiveAgent::<_, SliceStack>::new(&stack, None, cfg)?;
            rollout(mdp, &mut agent, episodes, horizon, seed)
        }
        Trained::Ensemble { ensemble } => {
            let stack = SliceStack::from_ensemble(ensemble, mdp.discount())?;
            let mut agent = AdaptiveAgent::<_, SliceStack>::new(&stack, None, policy.clone())?;
            rollout(mdp, &mut agent, episodes, horizon, seed)
        }
    }
}

fn default_episodes() -> usize {
    DEFAULT_EPISODES
}
fn default_eval_horizon() -> usize {
    DEFAULT_HORIZON
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_eval_horizon")]
    pub horizon: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            episodes: DEFAULT_EPISODES,
            horizon: DEFAULT_HORIZON,
            seeds: default_seeds(),
        }
    }
}

fn default_resamples() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageSpec {
    #[serde(default = "default_resamples")]
    pub num_resamples: usize,
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub alphas: Vec<f64>,
}

/// One JSON document drives collection, training, evaluation and the
/// coverage and sweep experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub env_train: EnvSpec,
    pub env_eval: EnvSpec,
    pub dataset: DatasetSpec,
    pub solver: SolverSpec,
    #[serde(default)]
    pub policy: AdaptivePolicyConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::invalid("name", "must be a nonempty plain file name"));
        }
        self.env_train.check_shift(&self.env_eval)?;
        self.env_train.build()?;
        self.env_eval.build()?;
        if self.dataset.num_samples == 0 {
            return Err(Error::invalid("dataset.num_samples", "must be positive"));
        }
        if self.dataset.horizon == 0 {
            return Err(Error::invalid("dataset.horizon", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.dataset.epsilon_opt) {
            return Err(Error::invalid("dataset.epsilon_opt", "must lie in [0, 1]"));
        }
        let s = &self.solver;
        if !(s.alpha >= 0.0 && s.alpha.is_finite()) {
            return Err(Error::invalid("solver.alpha", "must be finite and nonnegative"));
        }
        if !(s.iota > 0.0 && s.iota.is_finite()) {
            return Err(Error::invalid("solver.iota", "must be finite and positive"));
        }
        if !(s.tol > 0.0) || s.max_iters == 0 {
            return Err(Error::invalid("solver.tol", "tol and max_iters must be positive"));
        }
        if let PolicyMode::Softmax { temp } = s.policy_mode {
            if !(temp > 0.0) {
                return Err(Error::invalid("solver.policy_mode", "softmax temp must be positive"));
            }
        }
        if s.method == Method::Aevl && s.ensemble_size < 2 {
            return Err(Error::invalid("solver.ensemble_size", "must be at least 2"));
        }
        let slices = match s.method {
            Method::CcvlBonus | Method::CcvlReg | Method::CcvlUpper => s.grid.len(),
            Method::Aevl => s.ensemble_size,
            _ => 1,
        };
        let has_upper = matches!(s.method, Method::CcvlBonus | Method::CcvlReg);
        self.policy.validate(slices, has_upper)?;
        if let PolicyKind::SafeSet { .. } = self.policy.mode {
            if !matches!(s.method, Method::CcvlBonus | Method::CcvlReg) {
                return Err(Error::invalid("policy.mode", "safe-set needs a ccvl-bonus or ccvl-reg lower table"));
            }
        }
        if self.eval.episodes == 0 || self.eval.horizon == 0 || self.eval.seeds.is_empty() {
            return Err(Error::invalid("eval", "episodes, horizon and seeds must be nonempty"));
        }
        if let Some(c) = &self.coverage {
            if c.num_resamples < 100 {
                return Err(Error::invalid("coverage.num_resamples", "must be at least 100"));
            }
            ConfidenceGrid::new(c.deltas.clone())
                .map_err(|e| Error::invalid("coverage.deltas", e.to_string()))?;
            if !matches!(s.method, Method::CcvlBonus | Method::CcvlReg | Method::CcvlUpper) {
                return Err(Error::invalid("solver.method", "coverage needs a confidence-conditioned method"));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.alphas.is_empty() || sw.alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
                return Err(Error::invalid("sweep.alphas", "must be a nonempty list of nonnegative values"));
            }
        }
        Ok(())
    }

    pub fn wants_upper(&self) -> bool {
        matches!(self.policy.mode, PolicyKind::SafeSet { use_upper: true, .. })
    }
}

/// Does the trained table satisfy its bound at grid index `k` everywhere?
/// Lower bonus tables are checked per pair against `Q*`, lower regularized
/// tables per state against `V*`, upper tables per pair from above.
fn bound_holds(method: Method, q: &ConfidenceQ, q_star: &QTable, k: usize) -> bool {
    match method {
        Method::CcvlUpper => (0..q.num_states)
            .all(|s| (0..q.num_actions).all(|a| q.get(s, a, k) >= q_star.get(s, a) - BOUND_TOL)),
        Method::CcvlReg => {
            let v = q.state_values(k);
            let v_star = q_star.state_values();
            (0..q.num_states).all(|s| v[s] <= v_star[s] + BOUND_TOL)
        }
        _ => (0..q.num_states)
            .all(|s| (0..q.num_actions).all(|a| q.get(s, a, k) <= q_star.get(s, a) + BOUND_TOL)),
    }
}

/// Fraction of resampled datasets on which the learned bound holds, per δ.
/// Resample `i` collects with dataset seed `seed + i`. Solver failures are
/// counted and excluded.
pub fn coverage_experiment(
    mdp: &TabularMdp,
    dataset: &DatasetSpec,
    solver: &SolverSpec,
    num_resamples: usize,
    deltas: &[f64],
    seed: u64,
) -> Result<Vec<CoverageRow>> {
    if num_resamples < 100 {
        return Err(Error::invalid("num_resamples", "must be at least 100"));
    }
    if solver.update().is_none() {
        return Err(Error::invalid("solver.method", "coverage needs a confidence-conditioned method"));
    }
    let grid = ConfidenceGrid::new(deltas.to_vec())?;
    let q_star = solve_optimal_q(mdp, 1e-12, 100_000)?;
    let behavior = behavior_policy(mdp, dataset.epsilon_opt)?;
    let spec = SolverSpec {
        grid: grid.clone(),
        ..solver.clone()
    };
    let meta = ValueMeta::of(mdp);
    let outcomes: Vec<Option<Vec<bool>>> = (0..num_resamples as u64)
        .into_par_iter()
        .map(|i| {
            let data = collect_dataset(
                mdp,
                &behavior,
                dataset.num_samples,
                dataset.horizon,
                seed.wrapping_add(i),
            )
            .ok()?;
            match train_method(&spec, &data, meta, false) {
                Ok((Trained::Confidence { lower, .. }, _)) => Some(
                    (0..grid.len())
                        .map(|k| bound_holds(spec.method, &lower, &q_star, k))
                        .collect(),
                ),
                _ => None,
            }
        })
        .collect();
    let ok: Vec<&Vec<bool>> = outcomes.iter().flatten().collect();
    let failures = num_resamples - ok.len();
    Ok(grid
        .deltas()
        .iter()
        .enumerate()
        .map(|(k, &delta)| CoverageRow {
            delta,
            coverage: if ok.is_empty() {
                0.0
            } else {
                ok.iter().filter(|v| v[k]).count() as f64 / ok.len() as f64
            },
            resamples: ok.len(),
            failures,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub alpha: f64,
    pub seed: u64,
    pub mean_return: f64,
    pub normalized_return: f64,
}

/// Everything one sweep cell produced.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub row: SweepRow,
    pub report: EvalReport,
}

/// For every α and evaluation seed: collect a dataset in the training
/// environment (dataset seed offset by the evaluation seed), train CQL and
/// regularized CCVL, and evaluate both in the evaluation environment. CCVL
/// acts through the belief-sampling policy, CQL greedily.
pub fn alpha_sweep(config: &ExperimentConfig, alphas: &[f64]) -> Result<Vec<SweepCell>> {
    if alphas.is_empty() {
        return Err(Error::invalid("alphas", "must be nonempty"));
    }
    let train_env = config.env_train.build()?;
    let eval_env = config.env_eval.build()?;
    let normalizer = optimal_return(&eval_env, config.eval.horizon)?;
    let meta = ValueMeta::of(&train_env);
    let datasets: Vec<(u64, OfflineDataset)> = config
        .eval
        .seeds
        .par_iter()
        .map(|&seed| {
            let spec = config.dataset.with_seed(config.dataset.seed.wrapping_add(seed));
            collect(&train_env, &spec).map(|d| (seed, d))
        })
        .collect::<Result<_>>()?;
    let ccvl_policy = AdaptivePolicyConfig {
        mode: PolicyKind::BeliefSample,
        ..config.policy.clone()
    };
    let mut jobs = Vec::new();
    for method in [Method::Cql, Method::CcvlReg] {
        for &alpha in alphas {
            for (seed, data) in &datasets {
                jobs.push((method, alpha, *seed, data));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(method, alpha, seed, data)| {
            let spec = SolverSpec {
                method,
                ..config.solver.with_alpha(alpha)
            };
            let (trained, _) = train_method(&spec, data, meta, false)?;
            let policy = AdaptivePolicyConfig {
                seed,
                ..ccvl_policy.clone()
            };
            let mut report = evaluate(&trained, &eval_env, &policy, config.eval.episodes, config.eval.horizon, seed)?;
            report.normalize(normalizer);
            Ok(SweepCell {
                row: SweepRow {
                    method: method.tag().to_string(),
                    alpha,
                    seed,
                    mean_return: report.mean_return,
                    normalized_return: report.normalized_return,
                },
                report,
            })
        })
        .collect()
}

/// `<method>_<alpha>_<seed>.csv`
pub fn report_file_name(method: &str, alpha: f64, seed: u64) -> String {
    format!("{method}_{alpha}_{seed}.csv")
}
