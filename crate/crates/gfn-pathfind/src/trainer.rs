//! On-policy training of the two policy heads.
//!
//! Each iteration samples a batch of fixed-length partial trajectories from
//! the forward policy with the stop action masked out, then minimizes the sum
//! over trajectory prefixes of the squared log-ratio between the forward and
//! backward trajectory probabilities, plus a flow regularizer. Because every
//! state carries a stop transition, the flow through a state is the reciprocal
//! of its stop probability (with unit rewards), so the regularizer
//! `lambda / P_stop` needs no extra parameters, and the normalizer is the
//! known state count rather than a learned scalar. Shrinking total flow
//! shrinks the expected trajectory length, which is what pulls the backward
//! policy onto shortest paths.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;

use thiserror::Error;

use crate::graph::GfnEnv;
use crate::nn::{
    backward, forward, forward_probe, forward_trace, init_params, masked_log_softmax,
    write_checkpoint, FeatureBatch, LogitsPair, NetworkConfig, NnError, ParameterStore, Real,
};
use crate::rng::{domain, substream};

/// Flows are clamped here when the stop probability underflows early in
/// training; beyond this the regularizer gradient is cut to keep updates
/// finite.
const REG_CLAMP: f64 = 1e12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss or gradient at iteration {iteration}")]
    NonFinite { iteration: u64 },
    #[error("state {state} has no forward move to sample")]
    DeadEnd { state: String },
    #[error("the environment does not expose a state count; set log_z explicitly")]
    UnknownLogZ,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Which training objective to optimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Sum of squared trajectory-balance gaps over all prefixes plus the flow
    /// regularizer (the default objective).
    #[default]
    PrefixBalance,
    /// Per-transition detailed balance with the same flow parameterization;
    /// kept for comparison, converges noticeably slower.
    TransitionBalance,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub hidden: usize,
    pub n_blocks: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    /// Length of every sampled partial trajectory.
    pub n_max: usize,
    /// Flow-regularization coefficient.
    pub lambda: f64,
    pub iterations: u64,
    pub seed: u64,
    pub precision: Precision,
    pub loss: LossKind,
    /// Metrics cadence in iterations.
    pub log_every: u64,
    /// Checkpoint cadence; 0 writes only the final checkpoint.
    pub ckpt_every: u64,
    /// Log-normalizer override; defaults to the environment's exact count.
    pub log_z: Option<f64>,
    /// Zeroes wall-clock columns so reruns are byte-identical.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 256,
            n_blocks: 6,
            learning_rate: 3e-4,
            weight_decay: 1e-5,
            grad_clip_norm: 100.0,
            batch_size: 128,
            n_max: 12,
            lambda: 1e-3,
            iterations: 1000,
            seed: 0,
            precision: Precision::F32,
            loss: LossKind::PrefixBalance,
            log_every: 100,
            ckpt_every: 0,
            log_z: None,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn network_config<E: GfnEnv>(&self, env: &E) -> NetworkConfig {
        NetworkConfig {
            input_dim: env.input_dim(),
            hidden: self.hidden,
            n_blocks: self.n_blocks,
            n_moves: env.n_moves(),
        }
    }

    pub fn resolve_log_z<E: GfnEnv>(&self, env: &E) -> Result<f64, TrainError> {
        match self.log_z {
            Some(z) => Ok(z),
            None => {
                let z = env.log_state_count();
                if z.is_finite() {
                    Ok(z)
                } else {
                    Err(TrainError::UnknownLogZ)
                }
            }
        }
    }
}

/// A sampled stop-masked walk of exactly `n_max` forward transitions starting
/// at the initial state, with the log-probabilities the loss needs cached
/// from the sampling passes: per-step forward and backward transition
/// log-probabilities (under the full softmax including stop) and the stop
/// log-probability at every visited state.
#[derive(Clone, Debug)]
pub struct PartialTrajectory<S> {
    pub states: Vec<S>,
    pub moves: Vec<usize>,
    pub back_slots: Vec<usize>,
    pub log_pf_step: Vec<f64>,
    pub log_pb_step: Vec<f64>,
    pub log_pf_stop: Vec<f64>,
}

impl<S> PartialTrajectory<S> {
    pub fn n_steps(&self) -> usize {
        self.moves.len()
    }
}

fn forward_mask<E: GfnEnv>(env: &E, s: &E::State) -> (Vec<bool>, Vec<Option<(E::State, usize)>>) {
    let n = env.n_moves();
    let mut mask = vec![false; n + 1];
    mask[n] = true; // stop
    let mut steps = Vec::with_capacity(n);
    for mv in 0..n {
        let step = env.forward_step(s, mv);
        mask[mv] = step.is_some();
        steps.push(step);
    }
    (mask, steps)
}

fn backward_mask<E: GfnEnv>(env: &E, s: &E::State) -> Vec<bool> {
    (0..env.n_moves())
        .map(|mv| env.backward_step(s, mv).is_some())
        .collect()
}

/// Samples one batch of stop-masked partial trajectories from the forward
/// policy. Each trajectory draws from its own random stream keyed by
/// `(seed, iteration, batch slot)`, so results do not depend on thread
/// scheduling. The cached log-probabilities are the true policy values (the
/// stop mask applies only to the sampling distribution, not to the softmax
/// the loss sees).
pub fn sample_batch<E: GfnEnv, F: Real>(
    params: &ParameterStore<F>,
    env: &E,
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<Vec<PartialTrajectory<E::State>>, TrainError> {
    let b = cfg.batch_size;
    let n_moves = env.n_moves();
    let mut rngs: Vec<_> = (0..b)
        .map(|j| {
            substream(
                cfg.seed,
                domain::TRAJECTORY,
                iteration * (b as u64) + j as u64,
            )
        })
        .collect();
    let mut trajs: Vec<PartialTrajectory<E::State>> = (0..b)
        .map(|_| PartialTrajectory {
            states: vec![env.initial()],
            moves: Vec::with_capacity(cfg.n_max),
            back_slots: Vec::with_capacity(cfg.n_max),
            log_pf_step: Vec::with_capacity(cfg.n_max),
            log_pb_step: Vec::with_capacity(cfg.n_max),
            log_pf_stop: Vec::with_capacity(cfg.n_max + 1),
        })
        .collect();
    let mut feats = FeatureBatch::default();
    let mut scratch = Vec::new();
    for t in 0..=cfg.n_max {
        feats.rows.clear();
        for traj in &trajs {
            env.active_features(&traj.states[t], &mut scratch);
            feats.rows.push(scratch.clone());
        }
        let logits = forward(params, &feats);
        let mut logp_fwd = vec![0.0f64; n_moves + 1];
        let mut logp_bwd = vec![0.0f64; n_moves];
        for j in 0..b {
            let state = trajs[j].states[t].clone();
            let (fmask, steps) = forward_mask(env, &state);
            masked_log_softmax(logits.forward.row(j), &fmask, &mut logp_fwd);
            trajs[j].log_pf_stop.push(logp_fwd[n_moves]);
            if t > 0 {
                // fill in the backward log-probability of the move that
                // produced this state
                let bmask = backward_mask(env, &state);
                masked_log_softmax(logits.backward.row(j), &bmask, &mut logp_bwd);
                let slot = trajs[j].back_slots[t - 1];
                trajs[j].log_pb_step.push(logp_bwd[slot]);
            }
            if t < cfg.n_max {
                // sample among moves only; the stop slot is masked out
                let mut total = 0.0f64;
                for mv in 0..n_moves {
                    if fmask[mv] {
                        total += logp_fwd[mv].exp();
                    }
                }
                if total <= 0.0 {
                    return Err(TrainError::DeadEnd {
                        state: format!("{state:?}"),
                    });
                }
                let u: f64 = rngs[j].random::<f64>() * total;
                let mut acc = 0.0f64;
                let mut chosen = usize::MAX;
                for mv in 0..n_moves {
                    if fmask[mv] {
                        acc += logp_fwd[mv].exp();
                        if u < acc {
                            chosen = mv;
                            break;
                        }
                    }
                }
                if chosen == usize::MAX {
                    chosen = (0..n_moves).rev().find(|&mv| fmask[mv]).unwrap();
                }
                let (child, back_slot) = steps[chosen].clone().expect("masked move exists");
                trajs[j].moves.push(chosen);
                trajs[j].back_slots.push(back_slot);
                trajs[j].log_pf_step.push(logp_fwd[chosen]);
                trajs[j].states.push(child);
            }
        }
    }
    Ok(trajs)
}

/// Loss value split into its two ingredients.
#[derive(Clone, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub balance_sum: f64,
    pub reg_sum: f64,
    /// Balance gap of each prefix (what gets squared).
    pub prefix_gaps: Vec<f64>,
}

/// Per-cache coefficients of the loss gradient, ready to be pushed through
/// the logit softmaxes.
#[derive(Clone, Debug)]
struct LossCoeffs {
    breakdown: LossBreakdown,
    /// d loss / d log_pf_stop[i], one per visited state.
    d_stop: Vec<f64>,
    /// d loss / d log_pf_step[t].
    d_step_pf: Vec<f64>,
    /// d loss / d log_pb_step[t].
    d_step_pb: Vec<f64>,
}

fn clamped_flow(log_stop: f64) -> (f64, f64) {
    // flow = 1 / p_stop; derivative w.r.t. log p_stop is -flow, zero once
    // clamped
    let flow = (-log_stop).exp();
    if flow >= REG_CLAMP {
        (REG_CLAMP, 0.0)
    } else {
        (flow, -flow)
    }
}

/// Incremental evaluation of the prefix-balance objective from cached
/// log-probabilities: running prefix sums make it linear in the trajectory
/// length.
pub fn prefix_balance_terms<S>(
    traj: &PartialTrajectory<S>,
    log_z: f64,
    lambda: f64,
) -> LossBreakdown {
    let n = traj.n_steps();
    let mut breakdown = LossBreakdown::default();
    let mut running = 0.0f64; // sum of log P_F - log P_B over the prefix
    for i in 0..=n {
        if i > 0 {
            running += traj.log_pf_step[i - 1] - traj.log_pb_step[i - 1];
        }
        let gap = traj.log_pf_stop[i] + running + log_z;
        let (flow, _) = clamped_flow(traj.log_pf_stop[i]);
        breakdown.balance_sum += gap * gap;
        breakdown.reg_sum += lambda * flow;
        breakdown.prefix_gaps.push(gap);
    }
    breakdown.total = breakdown.balance_sum + breakdown.reg_sum;
    breakdown
}

/// Direct (quadratic-time) evaluation of the same objective, recomputing
/// every prefix product from scratch. Exists purely to cross-check the
/// incremental path.
pub fn prefix_balance_terms_direct<S>(
    traj: &PartialTrajectory<S>,
    log_z: f64,
    lambda: f64,
) -> LossBreakdown {
    let n = traj.n_steps();
    let mut breakdown = LossBreakdown::default();
    for i in 0..=n {
        let mut fwd = traj.log_pf_stop[i];
        for t in 0..i {
            fwd += traj.log_pf_step[t];
        }
        let mut bwd = -log_z;
        for t in 0..i {
            bwd += traj.log_pb_step[t];
        }
        let gap = fwd - bwd;
        let (flow, _) = clamped_flow(traj.log_pf_stop[i]);
        breakdown.balance_sum += gap * gap;
        breakdown.reg_sum += lambda * flow;
        breakdown.prefix_gaps.push(gap);
    }
    breakdown.total = breakdown.balance_sum + breakdown.reg_sum;
    breakdown
}

fn prefix_balance_coeffs<S>(traj: &PartialTrajectory<S>, log_z: f64, lambda: f64) -> LossCoeffs {
    let breakdown = prefix_balance_terms(traj, log_z, lambda);
    let n = traj.n_steps();
    // suffix[t] = sum over prefixes i >= t of 2 * gap_i
    let mut suffix = vec![0.0f64; n + 2];
    for i in (0..=n).rev() {
        suffix[i] = suffix[i + 1] + 2.0 * breakdown.prefix_gaps[i];
    }
    let mut d_stop = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let (_, dflow) = clamped_flow(traj.log_pf_stop[i]);
        d_stop.push(2.0 * breakdown.prefix_gaps[i] + lambda * dflow);
    }
    let d_step_pf: Vec<f64> = (0..n).map(|t| suffix[t + 1]).collect();
    let d_step_pb: Vec<f64> = (0..n).map(|t| -suffix[t + 1]).collect();
    LossCoeffs {
        breakdown,
        d_stop,
        d_step_pf,
        d_step_pb,
    }
}

/// Squared per-transition balance gap with the reciprocal-stop flow
/// parameterization: `(log F(s) + log P_F(s'|s) - log F(s') - log P_B(s|s'))^2
/// + lambda * F(s)` for a single transition.
pub fn transition_balance_loss(
    log_stop_from: f64,
    log_pf: f64,
    log_stop_to: f64,
    log_pb: f64,
    lambda: f64,
) -> f64 {
    let gap = -log_stop_from + log_pf + log_stop_to - log_pb;
    let (flow, _) = clamped_flow(log_stop_from);
    gap * gap + lambda * flow
}

fn transition_balance_coeffs<S>(traj: &PartialTrajectory<S>, lambda: f64) -> LossCoeffs {
    let n = traj.n_steps();
    let mut breakdown = LossBreakdown::default();
    let mut d_stop = vec![0.0f64; n + 1];
    let mut d_step_pf = vec![0.0f64; n];
    let mut d_step_pb = vec![0.0f64; n];
    for t in 0..n {
        let gap =
            -traj.log_pf_stop[t] + traj.log_pf_step[t] + traj.log_pf_stop[t + 1] - traj.log_pb_step[t];
        let (flow, dflow) = clamped_flow(traj.log_pf_stop[t]);
        breakdown.balance_sum += gap * gap;
        breakdown.reg_sum += lambda * flow;
        breakdown.prefix_gaps.push(gap);
        d_stop[t] += -2.0 * gap + lambda * dflow;
        d_stop[t + 1] += 2.0 * gap;
        d_step_pf[t] += 2.0 * gap;
        d_step_pb[t] += -2.0 * gap;
    }
    breakdown.total = breakdown.balance_sum + breakdown.reg_sum;
    LossCoeffs {
        breakdown,
        d_stop,
        d_step_pf,
        d_step_pb,
    }
}

fn coeffs_for<S>(traj: &PartialTrajectory<S>, log_z: f64, cfg: &TrainConfig) -> LossCoeffs {
    match cfg.loss {
        LossKind::PrefixBalance => prefix_balance_coeffs(traj, log_z, cfg.lambda),
        LossKind::TransitionBalance => transition_balance_coeffs(traj, cfg.lambda),
    }
}

/// Concatenated encodings of every state of every trajectory, in order.
fn build_feats<E: GfnEnv>(env: &E, trajs: &[PartialTrajectory<E::State>]) -> FeatureBatch {
    let mut feats = FeatureBatch::default();
    let mut scratch = Vec::new();
    for traj in trajs.iter() {
        for s in &traj.states {
            env.active_features(s, &mut scratch);
            feats.rows.push(scratch.clone());
        }
    }
    feats
}

/// Refills the per-trajectory log-probability caches from freshly computed
/// logits. Used to evaluate the loss as a function of the parameters (the
/// sampled states and moves stay fixed).
fn fill_caches_from_logits<E: GfnEnv, F: Real>(
    env: &E,
    trajs: &mut [PartialTrajectory<E::State>],
    logits: &LogitsPair<F>,
) {
    let n_moves = env.n_moves();
    let mut logp_fwd = vec![0.0f64; n_moves + 1];
    let mut logp_bwd = vec![0.0f64; n_moves];
    let mut row = 0usize;
    for traj in trajs.iter_mut() {
        let steps = traj.n_steps();
        traj.log_pf_stop.clear();
        traj.log_pf_step.clear();
        traj.log_pb_step.clear();
        for t in 0..=steps {
            let state = &traj.states[t];
            let (fmask, _) = forward_mask(env, state);
            masked_log_softmax(logits.forward.row(row), &fmask, &mut logp_fwd);
            traj.log_pf_stop.push(logp_fwd[n_moves]);
            if t < steps {
                traj.log_pf_step.push(logp_fwd[traj.moves[t]]);
            }
            if t > 0 {
                let bmask = backward_mask(env, state);
                masked_log_softmax(logits.backward.row(row), &bmask, &mut logp_bwd);
                traj.log_pb_step.push(logp_bwd[traj.back_slots[t - 1]]);
            }
            row += 1;
        }
    }
}

/// Loss and parameter gradients for a batch of trajectories, recomputing all
/// probabilities under `params`. Gradients flow into both heads: the forward
/// head through every step and stop probability, the backward head through
/// the backward transition probabilities.
pub fn batch_loss_grad<E: GfnEnv, F: Real>(
    params: &ParameterStore<F>,
    env: &E,
    trajs: &mut [PartialTrajectory<E::State>],
    log_z: f64,
    cfg: &TrainConfig,
) -> Result<(f64, LossBreakdown, ParameterStore<F>), TrainError> {
    let n_moves = env.n_moves();
    let feats = build_feats(env, trajs);
    let (logits, trace) = forward_trace(params, &feats);
    fill_caches_from_logits(env, trajs, &logits);
    let rows = feats.len();
    let mut d_fwd = Array2::<F>::zeros((rows, n_moves + 1));
    let mut d_bwd = Array2::<F>::zeros((rows, n_moves));
    let mut total = 0.0f64;
    let mut agg = LossBreakdown::default();
    let mut logp_fwd = vec![0.0f64; n_moves + 1];
    let mut logp_bwd = vec![0.0f64; n_moves];
    let mut row = 0usize;
    for traj in trajs.iter() {
        let coeffs = coeffs_for(traj, log_z, cfg);
        total += coeffs.breakdown.total;
        agg.balance_sum += coeffs.breakdown.balance_sum;
        agg.reg_sum += coeffs.breakdown.reg_sum;
        let steps = traj.n_steps();
        for t in 0..=steps {
            let state = &traj.states[t];
            let (fmask, _) = forward_mask(env, state);
            masked_log_softmax(logits.forward.row(row), &fmask, &mut logp_fwd);
            // coefficient on the stop log-probability, plus the move taken
            // from this state (if any), both under the same softmax
            let c_stop = coeffs.d_stop[t];
            let c_move = if t < steps { coeffs.d_step_pf[t] } else { 0.0 };
            let move_idx = if t < steps { traj.moves[t] } else { 0 };
            let csum = c_stop + c_move;
            if csum != 0.0 || c_stop != 0.0 || c_move != 0.0 {
                for mv in 0..=n_moves {
                    if !fmask[mv] {
                        continue;
                    }
                    let p = logp_fwd[mv].exp();
                    let mut g = -csum * p;
                    if mv == n_moves {
                        g += c_stop;
                    }
                    if t < steps && mv == move_idx {
                        g += c_move;
                    }
                    d_fwd[[row, mv]] = F::of_f64(g);
                }
            }
            if t > 0 {
                let c_b = coeffs.d_step_pb[t - 1];
                if c_b != 0.0 {
                    let bmask = backward_mask(env, state);
                    masked_log_softmax(logits.backward.row(row), &bmask, &mut logp_bwd);
                    let slot = traj.back_slots[t - 1];
                    for mv in 0..n_moves {
                        if !bmask[mv] {
                            continue;
                        }
                        let q = logp_bwd[mv].exp();
                        let mut g = -c_b * q;
                        if mv == slot {
                            g += c_b;
                        }
                        d_bwd[[row, mv]] = F::of_f64(g);
                    }
                }
            }
            row += 1;
        }
    }
    agg.total = total;
    let mut grads = backward(params, &trace, &d_fwd, &d_bwd);
    let scale = F::of_f64(1.0 / trajs.len() as f64);
    grads.scale(scale);
    Ok((total / trajs.len() as f64, agg, grads))
}

/// Loss and gradients of one trajectory under the current parameters
/// (probabilities recomputed, the sampled states and moves held fixed).
pub fn trajectory_loss_grad<E: GfnEnv, F: Real>(
    params: &ParameterStore<F>,
    env: &E,
    traj: &PartialTrajectory<E::State>,
    log_z: f64,
    cfg: &TrainConfig,
) -> Result<(f64, ParameterStore<F>), TrainError> {
    let mut batch = vec![traj.clone()];
    let (loss, _, grads) = batch_loss_grad(params, env, &mut batch, log_z, cfg)?;
    Ok((loss, grads))
}

/// Loss of one trajectory plus the smallest relu pre-activation seen, for
/// finite-difference verification.
pub fn trajectory_loss_probe<E: GfnEnv, F: Real>(
    params: &ParameterStore<F>,
    env: &E,
    traj: &PartialTrajectory<E::State>,
    log_z: f64,
    cfg: &TrainConfig,
) -> (f64, f64) {
    let mut batch = vec![traj.clone()];
    let feats = build_feats(env, &batch);
    let (logits, kink) = forward_probe(params, &feats);
    fill_caches_from_logits(env, &mut batch, &logits);
    let coeffs = coeffs_for(&batch[0], log_z, cfg);
    (coeffs.breakdown.total, kink)
}

// --- optimizer -----------------------------------------------------------------

/// Decoupled weight decay plus adaptive moments, the standard recipe:
/// parameters first shrink by `lr * weight_decay`, then take a bias-corrected
/// moment step.
pub struct AdamW<F> {
    m: ParameterStore<F>,
    v: ParameterStore<F>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: &NetworkConfig) -> Self {
        AdamW {
            m: ParameterStore::zeros(config),
            v: ParameterStore::zeros(config),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(
        &mut self,
        params: &mut ParameterStore<F>,
        grads: &ParameterStore<F>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = F::of_f64(1.0 - lr * weight_decay);
        let b1 = F::of_f64(self.beta1);
        let nb1 = F::of_f64(1.0 - self.beta1);
        let b2 = F::of_f64(self.beta2);
        let nb2 = F::of_f64(1.0 - self.beta2);
        let lr_f = F::of_f64(lr / bc1);
        let bc2_sqrt = F::of_f64(1.0 / bc2.sqrt());
        let eps = F::of_f64(self.eps);
        let mut p = params.flat_mut();
        let g = grads.flat();
        let mut m = self.m.flat_mut();
        let mut v = self.v.flat_mut();
        for i in 0..p.len() {
            let (ps, gs, ms, vs) = (&mut *p[i], g[i], &mut *m[i], &mut *v[i]);
            for k in 0..ps.len() {
                let grad = gs[k];
                ps[k] = ps[k] * decay;
                ms[k] = b1 * ms[k] + nb1 * grad;
                vs[k] = b2 * vs[k] + nb2 * grad * grad;
                let denom = (vs[k]).sqrt() * bc2_sqrt + eps;
                ps[k] = ps[k] - lr_f * ms[k] / denom;
            }
        }
    }
}

/// Scales gradients down to the given global L2 norm when they exceed it;
/// returns the pre-clip norm.
pub fn clip_global_norm<F: Real>(grads: &mut ParameterStore<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(F::of_f64(max_norm / norm));
    }
    norm
}

// --- training loop ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub iteration: u64,
    pub loss: f64,
    pub tb_term: f64,
    pub reg_term: f64,
    pub mean_stop_p: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "iter,loss,tb_term,reg_term,mean_stop_p,wall_ms";

pub fn format_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.iteration, r.loss, r.tb_term, r.reg_term, r.mean_stop_p, r.wall_ms
        ));
    }
    out
}

pub struct TrainOutput<F> {
    pub params: ParameterStore<F>,
    pub metrics: Vec<MetricsRow>,
}

/// The full training loop: sample a stop-masked batch, average the loss
/// gradient over it, clip by global norm, take a decoupled-weight-decay
/// adaptive step. Metrics are appended every `log_every` iterations and
/// checkpoints written on schedule into `out_dir` (plus a final checkpoint).
pub fn train<E: GfnEnv, F: Real>(
    env: &E,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput<F>, TrainError> {
    let net_cfg = cfg.network_config(env);
    let log_z = cfg.resolve_log_z(env)?;
    let mut params: ParameterStore<F> = init_params(&net_cfg, cfg.seed)?;
    let mut opt = AdamW::new(&net_cfg);
    let mut metrics = Vec::new();
    let started = Instant::now();
    let io_err = |path: &Path, source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let write_ckpt = |params: &ParameterStore<F>, iter: u64| -> Result<(), TrainError> {
        if let Some(dir) = out_dir {
            let path = dir.join(format!("ckpt_{iter}"));
            write_checkpoint(
                &path,
                params,
                vec![
                    ("iteration".into(), iter.to_string()),
                    ("seed".into(), cfg.seed.to_string()),
                ],
            )?;
        }
        Ok(())
    };
    for iteration in 0..cfg.iterations {
        let mut trajs = sample_batch(&params, env, cfg, iteration)?;
        let (loss, agg, mut grads) = batch_loss_grad(&params, env, &mut trajs, log_z, cfg)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(TrainError::NonFinite { iteration });
        }
        clip_global_norm(&mut grads, cfg.grad_clip_norm);
        opt.update(&mut params, &grads, cfg.learning_rate, cfg.weight_decay);
        let done = iteration + 1;
        if done == 1 || done % cfg.log_every.max(1) == 0 || done == cfg.iterations {
            let b = cfg.batch_size as f64;
            let positions = (cfg.n_max + 1) as f64 * b;
            let mean_stop_p = trajs
                .iter()
                .flat_map(|t| t.log_pf_stop.iter())
                .map(|lp| lp.exp())
                .sum::<f64>()
                / positions;
            metrics.push(MetricsRow {
                iteration: done,
                loss,
                tb_term: agg.balance_sum / b,
                reg_term: agg.reg_sum / b,
                mean_stop_p,
                wall_ms: if cfg.deterministic {
                    0
                } else {
                    started.elapsed().as_millis() as u64
                },
            });
        }
        if cfg.ckpt_every > 0 && done % cfg.ckpt_every == 0 && done != cfg.iterations {
            write_ckpt(&params, done)?;
        }
    }
    write_ckpt(&params, cfg.iterations)?;
    if let Some(dir) = out_dir {
        let path = dir.join("metrics.csv");
        std::fs::write(&path, format_metrics_csv(&metrics)).map_err(|e| io_err(&path, e))?;
    }
    Ok(TrainOutput { params, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cayley::swap_env;
    use crate::graph::build_gfn_env;
    use crate::nn::finite_diff_check;
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 16,
            n_blocks: 2,
            batch_size: 8,
            n_max: 4,
            lambda: 1e-3,
            iterations: 3,
            seed: 7,
            log_every: 1,
            deterministic: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sampled_trajectories_have_exact_length_and_valid_edges() {
        let env = swap_env(4).unwrap();
        let cfg = tiny_cfg();
        let params = init_params::<f64>(&cfg.network_config(&env), 1).unwrap();
        let trajs = sample_batch(&params, &env, &cfg, 0).unwrap();
        assert_eq!(trajs.len(), cfg.batch_size);
        for traj in &trajs {
            assert_eq!(traj.n_steps(), cfg.n_max);
            assert_eq!(traj.states.len(), cfg.n_max + 1);
            assert!(traj.states[0].is_identity());
            for t in 0..cfg.n_max {
                let (child, slot) = env.forward_step(&traj.states[t], traj.moves[t]).unwrap();
                assert_eq!(child, traj.states[t + 1]);
                assert_eq!(slot, traj.back_slots[t]);
                // no trajectory ever contains the sink; states are plain
                // permutations and the stop move is masked during sampling
            }
            // cached log-probabilities are actual probabilities
            for (&pf, &pb) in traj.log_pf_step.iter().zip(&traj.log_pb_step) {
                assert!(pf <= 0.0 && pb <= 0.0);
            }
        }
    }

    #[test]
    fn single_step_trajectories_leave_the_initial_state() {
        let env = swap_env(3).unwrap();
        let cfg = TrainConfig {
            n_max: 1,
            ..tiny_cfg()
        };
        let params = init_params::<f64>(&cfg.network_config(&env), 2).unwrap();
        for traj in sample_batch(&params, &env, &cfg, 0).unwrap() {
            assert_eq!(traj.n_steps(), 1);
            assert!(!traj.states[1].is_identity());
        }
    }

    #[test]
    fn three_path_graph_has_one_stop_masked_walk() {
        // initial 2 -> 1 -> 0: the only stop-masked length-2 walk
        let env = build_gfn_env(&[(0, 1), (1, 2)], 3, 2).unwrap();
        let cfg = TrainConfig {
            n_max: 2,
            batch_size: 4,
            ..tiny_cfg()
        };
        let params = init_params::<f64>(&cfg.network_config(&env), 3).unwrap();
        for traj in sample_batch(&params, &env, &cfg, 0).unwrap() {
            let ids: Vec<u32> = traj.states.iter().map(|s| s.0).collect();
            assert_eq!(ids, vec![2, 1, 0]);
        }
        // one step further and the walk has nowhere to go
        let cfg3 = TrainConfig { n_max: 3, ..cfg };
        assert!(matches!(
            sample_batch(&params, &env, &cfg3, 0),
            Err(TrainError::DeadEnd { .. })
        ));
    }

    #[test]
    fn first_step_frequencies_match_the_masked_softmax() {
        let env = swap_env(4).unwrap();
        let cfg = TrainConfig {
            n_max: 1,
            batch_size: 100_000,
            ..tiny_cfg()
        };
        let params = init_params::<f64>(&cfg.network_config(&env), 5).unwrap();
        let trajs = sample_batch(&params, &env, &cfg, 0).unwrap();
        // exact masked softmax at the initial state
        let mut feats = FeatureBatch::default();
        let mut scratch = Vec::new();
        env.active_features(&env.initial(), &mut scratch);
        feats.rows.push(scratch);
        let logits = forward(&params, &feats);
        let (fmask, _) = forward_mask(&env, &env.initial());
        let mut logp = vec![0.0; env.n_moves() + 1];
        masked_log_softmax(logits.forward.row(0), &fmask, &mut logp);
        let stop_p = logp[env.n_moves()].exp();
        let mut counts = vec![0usize; env.n_moves()];
        for traj in &trajs {
            counts[traj.moves[0]] += 1;
        }
        let n = trajs.len() as f64;
        for mv in 0..env.n_moves() {
            let p = logp[mv].exp() / (1.0 - stop_p); // renormalized without stop
            let freq = counts[mv] as f64 / n;
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * sigma.max(1e-9),
                "move {mv}: freq {freq} vs p {p}"
            );
        }
    }

    #[test]
    fn incremental_and_direct_loss_agree() {
        let env = swap_env(5).unwrap();
        let cfg = TrainConfig {
            n_max: 8,
            batch_size: 16,
            ..tiny_cfg()
        };
        let params = init_params::<f64>(&cfg.network_config(&env), 11).unwrap();
        let log_z = cfg.resolve_log_z(&env).unwrap();
        for traj in sample_batch(&params, &env, &cfg, 0).unwrap() {
            let inc = prefix_balance_terms(&traj, log_z, cfg.lambda);
            let dir = prefix_balance_terms_direct(&traj, log_z, cfg.lambda);
            assert_abs_diff_eq!(inc.total, dir.total, epsilon = 1e-10);
            for (a, b) in inc.prefix_gaps.iter().zip(&dir.prefix_gaps) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn lambda_zero_drops_the_regularizer() {
        let env = swap_env(4).unwrap();
        let cfg = tiny_cfg();
        let params = init_params::<f64>(&cfg.network_config(&env), 13).unwrap();
        let log_z = cfg.resolve_log_z(&env).unwrap();
        let traj = &sample_batch(&params, &env, &cfg, 0).unwrap()[0];
        let with = prefix_balance_terms(traj, log_z, 0.0);
        assert_eq!(with.reg_sum, 0.0);
        assert_abs_diff_eq!(with.total, with.balance_sum, epsilon = 0.0);
    }

    #[test]
    fn cached_and_recomputed_probabilities_agree() {
        let env = swap_env(4).unwrap();
        let cfg = tiny_cfg();
        let params = init_params::<f64>(&cfg.network_config(&env), 17).unwrap();
        let mut trajs = sample_batch(&params, &env, &cfg, 0).unwrap();
        let cached: Vec<_> = trajs.iter().map(|t| t.log_pf_stop.clone()).collect();
        let feats = build_feats(&env, &trajs);
        let logits = forward(&params, &feats);
        fill_caches_from_logits(&env, &mut trajs, &logits);
        for (traj, old) in trajs.iter().zip(&cached) {
            for (a, b) in traj.log_pf_stop.iter().zip(old) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let env = swap_env(4).unwrap();
        let cfg = TrainConfig {
            n_max: 5,
            batch_size: 1,
            lambda: 1e-2,
            ..tiny_cfg()
        };
        let params = init_params::<f64>(&cfg.network_config(&env), 19).unwrap();
        let log_z = cfg.resolve_log_z(&env).unwrap();
        let traj = sample_batch(&params, &env, &cfg, 0).unwrap().remove(0);
        let (_, grads) = trajectory_loss_grad(&params, &env, &traj, log_z, &cfg).unwrap();
        let eval =
            |p: &ParameterStore<f64>| trajectory_loss_probe(p, &env, &traj, log_z, &cfg);
        let report = finite_diff_check(&params, &grads, eval, 100, 1e-4, 1e-3, 23);
        assert!(report.checked >= 90);
        assert!(
            report.max_rel_err <= 1e-4,
            "gradient mismatch {}",
            report.max_rel_err
        );
        // both heads receive gradient
        assert!(grads.w_bwd.iter().any(|&g| g != 0.0));
        assert!(grads.w_fwd.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn transition_balance_gradient_matches_finite_differences() {
        let env = swap_env(4).unwrap();
        let cfg = TrainConfig {
            n_max: 4,
            batch_size: 1,
            lambda: 1e-2,
            loss: LossKind::TransitionBalance,
            ..tiny_cfg()
        };
        let params = init_params::<f64>(&cfg.network_config(&env), 29).unwrap();
        let log_z = cfg.resolve_log_z(&env).unwrap();
        let traj = sample_batch(&params, &env, &cfg, 0).unwrap().remove(0);
        let (_, grads) = trajectory_loss_grad(&params, &env, &traj, log_z, &cfg).unwrap();
        let eval =
            |p: &ParameterStore<f64>| trajectory_loss_probe(p, &env, &traj, log_z, &cfg);
        let report = finite_diff_check(&params, &grads, eval, 100, 1e-4, 1e-3, 31);
        assert!(report.checked >= 90);
        assert!(report.max_rel_err <= 1e-4, "mismatch {}", report.max_rel_err);
    }

    #[test]
    fn balanced_transition_has_zero_gap() {
        assert_eq!(transition_balance_loss(-1.0, -0.5, -1.0, -0.5, 0.0), 0.0);
        // flow 1 on both sides, equal transition probabilities
        assert_eq!(transition_balance_loss(0.0, -0.7, 0.0, -0.7, 0.0), 0.0);
    }

    #[test]
    fn zero_iterations_return_initial_parameters() {
        let env = swap_env(3).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..tiny_cfg()
        };
        let out: TrainOutput<f64> = train(&env, &cfg, None).unwrap();
        let fresh = init_params::<f64>(&cfg.network_config(&env), cfg.seed).unwrap();
        for (a, b) in out.params.flat().iter().zip(fresh.flat().iter()) {
            assert_eq!(a, b);
        }
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let env = swap_env(3).unwrap();
        let cfg = TrainConfig {
            iterations: 4,
            ..tiny_cfg()
        };
        let a: TrainOutput<f32> = train(&env, &cfg, None).unwrap();
        let b: TrainOutput<f32> = train(&env, &cfg, None).unwrap();
        assert_eq!(format_metrics_csv(&a.metrics), format_metrics_csv(&b.metrics));
        for (x, y) in a.params.flat().iter().zip(b.params.flat().iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn loss_decreases_on_a_short_run() {
        let env = swap_env(3).unwrap();
        let cfg = TrainConfig {
            hidden: 32,
            n_blocks: 2,
            batch_size: 32,
            n_max: 4,
            lambda: 1e-3,
            iterations: 300,
            log_every: 50,
            seed: 3,
            deterministic: true,
            ..TrainConfig::default()
        };
        let out: TrainOutput<f32> = train(&env, &cfg, None).unwrap();
        let first = out.metrics.first().unwrap().loss;
        let last = out.metrics.last().unwrap().loss;
        assert!(
            last < first / 5.0,
            "loss did not drop enough: {first} -> {last}"
        );
    }

    #[test]
    fn adamw_decays_weights_without_gradient() {
        let config = NetworkConfig {
            input_dim: 4,
            hidden: 8,
            n_blocks: 1,
            n_moves: 2,
        };
        let mut params = init_params::<f64>(&config, 37).unwrap();
        let before = params.w_in[[0, 0]];
        let grads = ParameterStore::<f64>::zeros(&config);
        let mut opt = AdamW::new(&config);
        opt.update(&mut params, &grads, 0.1, 0.5);
        let after = params.w_in[[0, 0]];
        assert_abs_diff_eq!(after, before * (1.0 - 0.1 * 0.5), epsilon = 1e-12);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let config = NetworkConfig {
            input_dim: 4,
            hidden: 8,
            n_blocks: 1,
            n_moves: 2,
        };
        let mut grads = init_params::<f64>(&config, 41).unwrap();
        grads.scale(1e4);
        let before = grads.global_norm();
        let reported = clip_global_norm(&mut grads, 100.0);
        assert_abs_diff_eq!(reported, before, epsilon = 1e-6);
        assert_abs_diff_eq!(grads.global_norm(), 100.0, epsilon = 1e-6);
        // below the threshold nothing changes
        let mut small = init_params::<f64>(&config, 43).unwrap();
        small.scale(1e-3);
        let norm = small.global_norm();
        clip_global_norm(&mut small, 100.0);
        assert_abs_diff_eq!(small.global_norm(), norm, epsilon = 1e-15);
    }

    #[test]
    fn metrics_csv_shape() {
        let rows = vec![MetricsRow {
            iteration: 10,
            loss: 1.5,
            tb_term: 1.0,
            reg_term: 0.5,
            mean_stop_p: 0.25,
            wall_ms: 0,
        }];
        let text = format_metrics_csv(&rows);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(lines.next().unwrap(), "10,1.500000,1.000000,0.500000,0.250000,0");
    }

    #[test]
    fn balanced_tabular_policies_have_zero_prefix_gaps() {
        // Transplant the exact tree policies of the 3-element sorting puzzle
        // into trajectory caches: every prefix of every tree walk balances
        // exactly, so all gaps vanish.
        use crate::oracle::{bfs_distances, explicit_from_cayley};
        use crate::tabular::{
            forward_from_tree, optimal_backward_policy, shortest_parent_map, ParentChoice,
            RewardSpec,
        };
        let cayley = swap_env(3).unwrap();
        let (graph, _) = explicit_from_cayley(&cayley, 100).unwrap();
        let dist = bfs_distances(&graph);
        let reward = RewardSpec::uniform(graph.n_states());
        let par = shortest_parent_map(&graph, &dist, ParentChoice::LexicographicMin);
        let pb = optimal_backward_policy(&graph, &dist, &reward, ParentChoice::LexicographicMin);
        let pf = forward_from_tree(&graph, &par, &reward).unwrap();
        let log_z = (graph.n_states() as f64).ln();
        // walk every tree path of length <= 2 from the root
        let s0 = graph.initial_state();
        let mut stack = vec![vec![s0]];
        let mut checked = 0;
        while let Some(prefix) = stack.pop() {
            let last = *prefix.last().unwrap();
            if prefix.len() > 1 {
                // build the trajectory caches from the tabular policies
                let mut traj = PartialTrajectory {
                    states: prefix.clone(),
                    moves: vec![],
                    back_slots: vec![],
                    log_pf_step: vec![],
                    log_pb_step: vec![],
                    log_pf_stop: prefix
                        .iter()
                        .map(|s| pf.stop[s.index()].ln())
                        .collect(),
                };
                for w in prefix.windows(2) {
                    traj.log_pf_step.push(pf.prob(&graph, w[0], w[1]).ln());
                    traj.log_pb_step.push(pb.prob(&graph, w[1], w[0]).ln());
                    let mv = graph
                        .children(w[0])
                        .iter()
                        .position(|&c| c == w[1])
                        .unwrap();
                    traj.moves.push(mv);
                }
                let terms = prefix_balance_terms(&traj, log_z, 0.0);
                for gap in &terms.prefix_gaps {
                    assert!(gap.abs() < 1e-9, "prefix gap {gap}");
                }
                checked += 1;
            }
            if prefix.len() <= 3 {
                for &c in graph.children(last) {
                    if par[c.index()] == Some(last) {
                        let mut next = prefix.clone();
                        next.push(c);
                        stack.push(next);
                    }
                }
            }
        }
        assert!(checked >= 5, "expected several tree walks, got {checked}");
    }
}
