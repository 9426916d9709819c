//! Tabular training of energy-based and autoregressive models.
//!
//! Both models are fitted to a target distribution `rho` by full-batch
//! gradient descent on the exact expected negative log-likelihood, summed over
//! every response. The EBM is parameterized by one score per sequence (stored
//! on the finishing edge), the ARM by its full logit table. A step that would
//! increase the optimality gap is rejected and the step size halved.

use serde::{Deserialize, Serialize};

use crate::arm::{arm_dist, enforce_terminal};
use crate::bijection::map_r_to_q;
use crate::dist::{entropy_exact, kl_exact, row_kl, SeqDistribution};
use crate::ebm::{edge_path_sums, ebm_dist, install_sequence_scores, log_partition_dp, sequence_scores};
use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::scalar::{log_softargmax, logsumexp_slice, Scalar};
use crate::seqspace::PrefixTree;
use crate::table::{normal, EdgeTable, LogitTable, RewardTable};

/// How a target distribution was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetKind {
    Zipfian { exponent: f64 },
    NormalSoftargmax { temperature: f64, stream: RandomStream },
    Explicit,
}

/// A target distribution over responses.
///
/// The generated families always have full support; explicit targets may put
/// zero mass on some responses.
#[derive(Debug, Clone, PartialEq)]
pub struct DataDistribution<S: Scalar = f64> {
    pub kind: TargetKind,
    pub realized: SeqDistribution<S>,
}

impl<S: Scalar> DataDistribution<S> {
    pub fn explicit(p: SeqDistribution<S>) -> Self {
        Self {
            kind: TargetKind::Explicit,
            realized: p,
        }
    }

    pub fn has_full_support(&self) -> bool {
        self.logp().iter().all(|v| *v != S::neg_infinity())
    }

    #[inline]
    pub fn tree(&self) -> &PrefixTree {
        self.realized.tree()
    }

    #[inline]
    pub fn logp(&self) -> &[S] {
        self.realized.logp()
    }
}

/// `rho(y_k) ∝ k^-exponent` over canonical rank `k = 1..|Y|`.
pub fn make_zipfian<S: Scalar>(tree: &PrefixTree, exponent: f64) -> Result<DataDistribution<S>> {
    if !(exponent > 0.0) || !exponent.is_finite() {
        return Err(Error::Config(format!("zipf exponent must be positive, got {exponent}")));
    }
    let w = (1..=tree.sequence_count())
        .map(|k| S::lit(-exponent * (k as f64).ln()))
        .collect();
    Ok(DataDistribution {
        kind: TargetKind::Zipfian { exponent },
        realized: SeqDistribution::from_log_weights(tree, w)?,
    })
}

/// `rho = softargmax(z / temperature)` with `z` standard normal per sequence.
pub fn make_normal_softargmax<S: Scalar>(
    tree: &PrefixTree,
    temperature: f64,
    stream: RandomStream,
) -> Result<DataDistribution<S>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut rng = stream.rng();
    let w = (0..tree.sequence_count())
        .map(|_| S::lit(normal(&mut rng) / temperature))
        .collect();
    Ok(DataDistribution {
        kind: TargetKind::NormalSoftargmax { temperature, stream },
        realized: SeqDistribution::from_log_weights(tree, w)?,
    })
}

/// `L*(rho) = H(rho)`, the smallest achievable expected risk.
pub fn min_risk<S: Scalar>(rho: &DataDistribution<S>) -> S {
    entropy_exact(&rho.realized)
}

fn weighted_score<S: Scalar>(rho: &[S], scores: &[S]) -> S {
    let mut acc = S::zero();
    for (&lr, &x) in rho.iter().zip(scores) {
        if lr == S::neg_infinity() {
            continue;
        }
        if x == S::neg_infinity() {
            return S::neg_infinity();
        }
        acc = acc + lr.exp() * x;
    }
    acc
}

/// `sum_y rho(y) (A - R(y))`.
pub fn expected_risk_ebm<S: Scalar>(r: &RewardTable<S>, rho: &DataDistribution<S>) -> S {
    log_partition_dp(r).root - weighted_score(rho.logp(), &sequence_scores(r))
}

/// `sum_y rho(y) (A_q(y) - Q_q(y))`.
pub fn expected_risk_arm<S: Scalar>(q: &LogitTable<S>, rho: &DataDistribution<S>) -> S {
    let logpi = EdgeTable::from_rows(q.tree(), q.rows().map(log_softargmax).collect())
        .expect("shape preserved");
    -weighted_score(rho.logp(), &edge_path_sums(&logpi))
}

/// `(L_ebm(r) - L*, KL(rho || p_ebm(r)))`; the two agree for every `r`.
pub fn ebm_gap_identity<S: Scalar>(r: &RewardTable<S>, rho: &DataDistribution<S>) -> Result<(S, S)> {
    let gap = expected_risk_ebm(r, rho) - min_risk(rho);
    let kl = kl_exact(&rho.realized, &ebm_dist(r)?)?;
    Ok((gap, kl))
}

/// Sup-norm distance between centered sequence scores: the ARM logits summed
/// along each path against the optimal EBM scores `R*`.
pub fn logits_distance_before<S: Scalar>(q: &LogitTable<S>, r_star_scores: &[S]) -> S {
    let qbar = edge_path_sums(q);
    centered_distance(&qbar, r_star_scores)
}

fn centered_distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    if a.len() != b.len() || a.iter().chain(b).any(|v| !v.is_finite()) {
        return S::infinity();
    }
    let n = S::lit(a.len() as f64);
    let ma = a.iter().copied().sum::<S>() / n;
    let mb = b.iter().copied().sum::<S>() / n;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| ((x - ma) - (y - mb)).abs())
        .fold(S::zero(), S::max)
}

/// Largest row-centered difference between `q` and `M(r*)`.
///
/// Each row is centered over its finite entries; `-inf` positions must line up
/// or the distance is infinite.
pub fn logits_distance_after<S: Scalar>(q: &LogitTable<S>, r_star: &RewardTable<S>) -> S {
    distance_to_mapped(q, &map_r_to_q(r_star))
}

fn distance_to_mapped<S: Scalar>(q: &LogitTable<S>, q_star: &LogitTable<S>) -> S {
    if q.tree() != q_star.tree() {
        return S::infinity();
    }
    let mut worst = S::zero();
    for (row, row_star) in q.rows().zip(q_star.rows()) {
        let mut sum = S::zero();
        let mut sum_star = S::zero();
        let mut n = 0usize;
        for (&x, &y) in row.iter().zip(row_star) {
            match (x == S::neg_infinity(), y == S::neg_infinity()) {
                (true, true) => {}
                (false, false) => {
                    sum = sum + x;
                    sum_star = sum_star + y;
                    n += 1;
                }
                _ => return S::infinity(),
            }
        }
        if n == 0 {
            continue;
        }
        let n = S::lit(n as f64);
        let (m, m_star) = (sum / n, sum_star / n);
        for (&x, &y) in row.iter().zip(row_star) {
            if x != S::neg_infinity() {
                worst = worst.max(((x - m) - (y - m_star)).abs());
            }
        }
    }
    worst
}

/// The sequence distribution of a trained ARM, by the chain rule.
pub fn reconstruct_pstar<S: Scalar>(q_star: &LogitTable<S>) -> Result<SeqDistribution<S>> {
    arm_dist(q_star)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Init {
    Zeros,
    Seeded { scale: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub step_size: f64,
    pub max_steps: usize,
    pub gap_tolerance: f64,
    pub eval_every: usize,
    #[serde(default = "default_init")]
    pub init: Init,
    #[serde(default)]
    pub preconditioner: Preconditioner,
}

/// Rescaling of the gradient before each step.
///
/// `LogMean` divides every coordinate by the logarithmic mean
/// `(p - t) / (ln p - ln t)` of the model probability `p` it controls and the
/// matching target probability `t` (per sequence for the EBM, per next-token
/// conditional for the ARM, where the common `rho(reach s)` factor also
/// cancels). The step direction becomes `ln p - ln t`: a diagonal Fisher
/// scaling near the optimum that stays bounded when `p` and `t` differ by
/// many orders of magnitude, where plain descent moves by the vanishing `p`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    #[default]
    None,
    LogMean,
}

fn default_init() -> Init {
    Init::Zeros
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            max_steps: 100_000,
            gap_tolerance: 1e-8,
            eval_every: 100,
            init: Init::Zeros,
            preconditioner: Preconditioner::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.gap_tolerance > 0.0) {
            return Err(Error::Config("gap_tolerance must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// One evaluation row of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: usize,
    pub risk: f64,
    pub gap: f64,
    pub dist_before: Option<f64>,
    pub dist_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
    /// Whether the gap reached the tolerance.
    pub converged: bool,
    pub final_step_size: f64,
}

impl RunRecord {
    pub fn last(&self) -> Option<&RunRow> {
        self.rows.last()
    }

    /// Writes `step,risk,gap,dist_before,dist_after` rows; missing distances
    /// are empty fields.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,risk,gap,dist_before,dist_after")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for row in &self.rows {
            writeln!(
                out,
                "{},{:e},{:e},{},{}",
                row.step,
                row.risk,
                row.gap,
                opt(row.dist_before),
                opt(row.dist_after)
            )?;
        }
        Ok(())
    }
}

/// The trained EBM's scores, used as the reference of an ARM run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalEbm<S: Scalar = f64> {
    pub scores: Vec<S>,
    pub rewards: RewardTable<S>,
    mapped: LogitTable<S>,
}

impl<S: Scalar> OptimalEbm<S> {
    pub fn new(rewards: RewardTable<S>) -> Self {
        let scores = sequence_scores(&rewards);
        let mapped = map_r_to_q(&rewards);
        Self {
            scores,
            rewards,
            mapped,
        }
    }
}

/// Exact objective of a training problem, gradient descent state kept by the
/// caller.
trait Objective<S: Scalar> {
    type Params: Clone;
    /// `(risk, optimality gap)`.
    fn evaluate(&self, params: &Self::Params) -> (S, S);
    fn gradient(&self, params: &Self::Params) -> Self::Params;
    /// The gradient rescaled coordinate-wise, see [`Preconditioner::LogMean`].
    fn log_mean_gradient(&self, params: &Self::Params) -> Self::Params;
    fn step(&self, params: &Self::Params, grad: &Self::Params, eta: S) -> Self::Params;
    fn full_support(&self) -> bool;
    fn distances(&self, _params: &Self::Params) -> (Option<f64>, Option<f64>) {
        (None, None)
    }
}

const MAX_HALVINGS: usize = 64;

fn descend<S: Scalar, O: Objective<S>>(
    objective: &O,
    mut params: O::Params,
    cfg: &TrainConfig,
) -> Result<(O::Params, RunRecord)> {
    cfg.validate()?;
    if cfg.preconditioner == Preconditioner::LogMean && !objective.full_support() {
        return Err(Error::SupportViolation(
            "the log_mean preconditioner needs a full-support target".into(),
        ));
    }
    let mut eta = S::lit(cfg.step_size);
    let (mut risk, mut gap) = objective.evaluate(&params);
    let initial = risk;
    let mut record = RunRecord::default();
    let push = |record: &mut RunRecord, step, risk: S, gap: S, params: &O::Params| {
        let (dist_before, dist_after) = objective.distances(params);
        record.rows.push(RunRow {
            step,
            risk: risk.as_f64(),
            gap: gap.as_f64(),
            dist_before,
            dist_after,
        });
    };
    push(&mut record, 0, risk, gap, &params);
    let tol = S::lit(cfg.gap_tolerance);
    let mut last_step = 0;
    for step in 1..=cfg.max_steps {
        if gap <= tol {
            break;
        }
        let grad = match cfg.preconditioner {
            Preconditioner::None => objective.gradient(&params),
            Preconditioner::LogMean => objective.log_mean_gradient(&params),
        };
        let mut accepted = false;
        let mut blew_up = false;
        for _ in 0..MAX_HALVINGS {
            let cand = objective.step(&params, &grad, eta);
            let (cr, cg) = objective.evaluate(&cand);
            if cg.is_finite() && cg <= gap {
                params = cand;
                risk = cr;
                gap = cg;
                accepted = true;
                break;
            }
            blew_up = !cr.is_finite() || cr > S::lit(10.0) * initial;
            eta = eta / S::lit(2.0);
        }
        if !accepted {
            if blew_up {
                return Err(Error::Divergence {
                    risk: f64::INFINITY,
                    initial: initial.as_f64(),
                });
            }
            // no representable decrease left
            break;
        }
        last_step = step;
        if step % cfg.eval_every == 0 || gap <= tol {
            push(&mut record, step, risk, gap, &params);
        }
    }
    if record.rows.last().map(|r| r.step) != Some(last_step) {
        push(&mut record, last_step, risk, gap, &params);
    }
    record.converged = gap <= tol;
    record.final_step_size = eta.as_f64();
    Ok((params, record))
}

struct EbmObjective<'a, S: Scalar> {
    rho: &'a [S],
}

impl<S: Scalar> Objective<S> for EbmObjective<'_, S> {
    type Params = Vec<S>;

    fn full_support(&self) -> bool {
        self.rho.iter().all(|v| *v != S::neg_infinity())
    }

    fn evaluate(&self, scores: &Vec<S>) -> (S, S) {
        let a = logsumexp_slice(scores);
        let risk = a - weighted_score(self.rho, scores);
        let gap = self
            .rho
            .iter()
            .zip(scores)
            .filter(|(&lr, _)| lr != S::neg_infinity())
            .map(|(&lr, &x)| lr.exp() * (lr - (x - a)))
            .sum();
        (risk, gap)
    }

    fn gradient(&self, scores: &Vec<S>) -> Vec<S> {
        let a = logsumexp_slice(scores);
        scores
            .iter()
            .zip(self.rho)
            .map(|(&x, &lr)| (x - a).exp() - lr.exp())
            .collect()
    }

    fn log_mean_gradient(&self, scores: &Vec<S>) -> Vec<S> {
        let a = logsumexp_slice(scores);
        scores.iter().zip(self.rho).map(|(&x, &lr)| x - a - lr).collect()
    }

    fn step(&self, scores: &Vec<S>, grad: &Vec<S>, eta: S) -> Vec<S> {
        scores.iter().zip(grad).map(|(&x, &g)| x - eta * g).collect()
    }
}

/// Fits per-sequence scores by gradient descent; the gradient of the risk is
/// `p_ebm - rho`.
pub fn train_ebm<S: Scalar>(rho: &DataDistribution<S>, cfg: &TrainConfig) -> Result<(RewardTable<S>, RunRecord)> {
    let tree = rho.tree();
    let init: Vec<S> = match cfg.init {
        Init::Zeros => vec![S::zero(); tree.sequence_count()],
        Init::Seeded { scale, seed } => {
            let mut rng = RandomStream::new(seed, 0).rng();
            (0..tree.sequence_count())
                .map(|_| S::lit(scale * normal(&mut rng)))
                .collect()
        }
    };
    let objective = EbmObjective { rho: rho.logp() };
    let (scores, record) = descend(&objective, init, cfg)?;
    Ok((install_sequence_scores(tree, &scores)?, record))
}

/// Gradient of the EBM risk with respect to the per-sequence scores.
pub fn ebm_risk_gradient<S: Scalar>(scores: &[S], rho: &DataDistribution<S>) -> Vec<S> {
    EbmObjective { rho: rho.logp() }.gradient(&scores.to_vec())
}

struct ArmObjective<'a, S: Scalar> {
    /// Next-token conditionals of the target; `-inf` rows where
    /// `rho(reach s) = 0`.
    target: EdgeTable<S>,
    /// `rho(reach s)`, linear domain.
    reach: Vec<S>,
    /// `rho(prefix(s) ⊕ a)`, linear domain.
    edge: EdgeTable<S>,
    full_support: bool,
    reference: Option<&'a OptimalEbm<S>>,
}

impl<'a, S: Scalar> ArmObjective<'a, S> {
    fn new(rho: &DataDistribution<S>, reference: Option<&'a OptimalEbm<S>>) -> Result<Self> {
        let tree = rho.tree();
        let mut log_edge = EdgeTable::filled(tree, S::neg_infinity());
        for y in tree.sequence_ids() {
            let (s, a) = tree.terminal_edge(y);
            log_edge.set(s, a, rho.realized.logp_of(y));
        }
        // children are numbered after their parents
        let mut log_reach = vec![S::neg_infinity(); tree.state_count()];
        for s in tree.states().rev() {
            log_reach[s.0] = logsumexp_slice(log_edge.row(s));
            if let Some((parent, a)) = tree.parent(s) {
                log_edge.set(parent, a, log_reach[s.0]);
            }
        }
        let target = log_edge.map(|s, _, v| {
            if log_reach[s.0] == S::neg_infinity() {
                S::neg_infinity()
            } else {
                v - log_reach[s.0]
            }
        });
        Ok(Self {
            target,
            reach: log_reach.into_iter().map(|v| v.exp()).collect(),
            edge: log_edge.map(|_, _, v| v.exp()),
            full_support: rho.has_full_support(),
            reference,
        })
    }
}

impl<S: Scalar> Objective<S> for ArmObjective<'_, S> {
    type Params = LogitTable<S>;

    fn full_support(&self) -> bool {
        self.full_support
    }

    fn evaluate(&self, q: &LogitTable<S>) -> (S, S) {
        let mut risk = S::zero();
        let mut gap = S::zero();
        for s in q.tree().states() {
            let w = self.reach[s.0];
            if w == S::zero() {
                continue;
            }
            let row = q.row(s);
            let lse = logsumexp_slice(row);
            risk = risk + w * lse;
            for (a, &x) in row.iter().enumerate() {
                let e = self.edge.get(s, a);
                if e > S::zero() {
                    risk = risk - e * x;
                }
            }
            let logpi: Vec<S> = row
                .iter()
                .map(|&x| if x == S::neg_infinity() { x } else { x - lse })
                .collect();
            gap = gap + w * row_kl(self.target.row(s), &logpi).unwrap_or(S::infinity());
        }
        (risk, gap)
    }

    fn gradient(&self, q: &LogitTable<S>) -> LogitTable<S> {
        let tree = q.tree();
        let mut g = LogitTable::zeros(tree);
        for s in tree.states() {
            let row = q.row(s);
            let lse = logsumexp_slice(row);
            let w = self.reach[s.0];
            for (a, &x) in row.iter().enumerate() {
                if x != S::neg_infinity() {
                    g.set(s, a, w * (x - lse).exp() - self.edge.get(s, a));
                }
            }
        }
        g
    }

    fn log_mean_gradient(&self, q: &LogitTable<S>) -> LogitTable<S> {
        let tree = q.tree();
        let mut g = LogitTable::zeros(tree);
        for s in tree.states() {
            let row = q.row(s);
            let lse = logsumexp_slice(row);
            if self.reach[s.0] == S::zero() {
                continue;
            }
            for (a, &x) in row.iter().enumerate() {
                if x != S::neg_infinity() {
                    g.set(s, a, x - lse - self.target.get(s, a));
                }
            }
        }
        g
    }

    fn step(&self, q: &LogitTable<S>, grad: &LogitTable<S>, eta: S) -> LogitTable<S> {
        let mut out = q.clone();
        for (x, &g) in out.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            if *x != S::neg_infinity() {
                *x = *x - eta * g;
            }
        }
        out
    }

    fn distances(&self, q: &LogitTable<S>) -> (Option<f64>, Option<f64>) {
        match self.reference {
            Some(opt) => (
                Some(logits_distance_before(q, &opt.scores).as_f64()),
                Some(distance_to_mapped(q, &opt.mapped).as_f64()),
            ),
            None => (None, None),
        }
    }
}

/// Gradient of the ARM risk: `rho(reach s) pi_q(a | s) - rho(prefix ⊕ a)`.
pub fn arm_risk_gradient<S: Scalar>(q: &LogitTable<S>, rho: &DataDistribution<S>) -> Result<LogitTable<S>> {
    Ok(ArmObjective::new(rho, None)?.gradient(q))
}

/// Fits a logit table by gradient descent. With a reference EBM, every
/// recorded row also carries the two logits distances to it.
pub fn train_arm<S: Scalar>(
    rho: &DataDistribution<S>,
    cfg: &TrainConfig,
    reference: Option<&OptimalEbm<S>>,
) -> Result<(LogitTable<S>, RunRecord)> {
    let tree = rho.tree();
    let init = match cfg.init {
        Init::Zeros => LogitTable::zeros(tree),
        Init::Seeded { scale, seed } => {
            LogitTable::random(tree, &mut RandomStream::new(seed, 1).rng(), scale)
        }
    };
    let objective = ArmObjective::new(rho, reference)?;
    descend(&objective, enforce_terminal(&init), cfg)
}

/// Optimality gap of an ARM, `KL(rho || p_q)`, summed state by state.
pub fn arm_gap<S: Scalar>(q: &LogitTable<S>, rho: &DataDistribution<S>) -> Result<S> {
    Ok(ArmObjective::new(rho, None)?.evaluate(q).1)
}
