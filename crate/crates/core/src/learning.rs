//! Training losses and the end-to-end training loop for the interaction
//! planner.
//!
//! The default objective is `ω₃·L_col + ω₄·L_bd + ω₅·L_dir + ω₆·L_imi` on the
//! predicted plan. With auxiliary heads enabled, `ω₁·L_map + ω₂·L_mot` are
//! added, matched to ground truth by construction (generator identity).

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::constraints::{
    total_on_filtered, ConstraintParams, FilteredScene, LossBreakdown, LossWeights,
};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::interact::{forward_plan, InteractionConfig, InteractionParams};
use crate::metrics::{collision_rate, displacement_error, DEFAULT_EGO_SIZE};
use crate::scene::{generate_scenario, GeneratorConfig, PlanTrajectory, Scenario};

/// Index of the mode whose final point is closest to the ground-truth final
/// point (first wins on ties).
pub fn minfde_select(modes: &[Vec<Point2>], gt: &[Point2]) -> usize {
    let Some(&target) = gt.last() else { return 0 };
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, m) in modes.iter().enumerate() {
        let d = m.last().map_or(f64::INFINITY, |p| p.distance(target));
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionRegression {
    pub value: f64,
    pub selected: usize,
    /// Per-mode, per-waypoint gradients; zero for every non-selected mode.
    pub grads: Vec<Vec<Point2>>,
}

/// Subgradient of `|v|`, taking 0 at the kink.
fn l1_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Winner-take-all L1 regression on the minFDE mode.
pub fn motion_regression_loss(modes: &[Vec<Point2>], gt: &[Point2]) -> Result<MotionRegression> {
    let selected = minfde_select(modes, gt);
    let mut grads: Vec<Vec<Point2>> = modes
        .iter()
        .map(|m| vec![Point2::ORIGIN; m.len()])
        .collect();
    let Some(mode) = modes.get(selected) else {
        return Ok(MotionRegression {
            value: 0.0,
            selected,
            grads,
        });
    };
    if mode.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            got: mode.len(),
        });
    }
    let inv = 1.0 / gt.len().max(1) as f64;
    let mut value = 0.0;
    for (t, (&p, &g)) in mode.iter().zip(gt).enumerate() {
        let r = p - g;
        value += (r.x.abs() + r.y.abs()) * inv;
        grads[selected][t] = Point2::new(l1_sign(r.x), l1_sign(r.y)) * inv;
    }
    Ok(MotionRegression {
        value,
        selected,
        grads,
    })
}

/// Mean Manhattan distance between matched point sets, with gradient.
pub fn map_regression_loss(pred: &[Point2], gt: &[Point2]) -> Result<(f64, Vec<Point2>)> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    let inv = 1.0 / pred.len().max(1) as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let r = p - g;
            value += (r.x.abs() + r.y.abs()) * inv;
            Point2::new(l1_sign(r.x), l1_sign(r.y)) * inv
        })
        .collect();
    Ok((value, grad))
}

pub const FOCAL_EPS: f64 = 1e-7;

/// Binary focal loss and its derivative with respect to `pred_prob`.
pub fn focal_loss(pred_prob: f64, target: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = pred_prob.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    if target {
        let q = 1.0 - p;
        let value = -alpha * q.powf(gamma) * p.ln();
        let dq = if gamma == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0)
        };
        let grad = alpha * (dq * p.ln() - q.powf(gamma) / p);
        (value, grad)
    } else {
        let q = 1.0 - p;
        let value = -(1.0 - alpha) * p.powf(gamma) * q.ln();
        let dp = if gamma == 0.0 {
            0.0
        } else {
            gamma * p.powf(gamma - 1.0)
        };
        let grad = -(1.0 - alpha) * (dp * q.ln() - p.powf(gamma) / q);
        (value, grad)
    }
}

fn sigmoid(x: f64) -> f64 {
    0.5 * ((0.5 * x).tanh() + 1.0)
}

/// Focal loss on a logit; returns (value, d value / d logit).
fn focal_on_logit(logit: f64, target: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let (v, dp) = focal_loss(p, target, gamma, alpha);
    (v, dp * p * (1.0 - p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    CosineAnnealing,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub scheduler: Scheduler,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Not read from config files; runners set it from their run seed.
    #[serde(skip)]
    pub seed: u64,
    pub train_scenarios: usize,
    pub val_scenarios: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Epochs ignored by the moving-average progress check.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 1,
            learning_rate: 2e-4,
            weight_decay: 0.01,
            scheduler: Scheduler::CosineAnnealing,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            train_scenarios: 512,
            val_scenarios: 128,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            warmup_epochs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.train_scenarios == 0 {
            return Err(Error::Config(
                "train: epochs, batch_size and train_scenarios must be >= 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train: learning_rate must be >= 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train: weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.scheduler {
            Scheduler::Constant => self.learning_rate,
            Scheduler::CosineAnnealing => {
                let frac = step as f64 / total_steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub imitation: f64,
    pub collision: f64,
    pub boundary: f64,
    pub direction: f64,
    pub map: f64,
    pub motion: f64,
    pub total: f64,
    pub val_l2: f64,
    pub val_collision: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str =
        "epoch,l_imi,l_col,l_bd,l_dir,l_map,l_mot,total,val_l2_avg,val_collision_avg";

    pub fn to_delimited(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.imitation,
                r.collision,
                r.boundary,
                r.direction,
                r.map,
                r.motion,
                r.total,
                r.val_l2,
                r.val_collision
            )
            .unwrap();
        }
        out
    }

    /// Whether the 5-epoch moving average of the training objective never
    /// rises after `warmup` epochs.
    pub fn objective_trend_ok(&self, warmup: usize) -> bool {
        const WINDOW: usize = 5;
        let totals: Vec<f64> = self.epochs.iter().map(|r| r.total).collect();
        if totals.len() < WINDOW {
            return true;
        }
        let avgs: Vec<f64> = totals
            .windows(WINDOW)
            .map(|w| w.iter().sum::<f64>() / WINDOW as f64)
            .collect();
        avgs.windows(2)
            .skip(warmup.saturating_sub(WINDOW - 1))
            .all(|w| w[1] <= w[0])
    }
}

/// Deterministic, decorrelated seed for the `index`-th item of a stream.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const TRAIN_STREAM: u64 = 1;
pub const VAL_STREAM: u64 = 2;

pub fn scenario_set(
    count: usize,
    seed: u64,
    stream: u64,
    gen: &GeneratorConfig,
) -> Result<Vec<Scenario>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_scenario(derive_seed(seed, stream, i as u64), gen))
        .collect()
}

/// Everything the training objective needs, bundled for one run.
#[derive(Debug, Clone)]
pub struct Objective {
    pub interact: InteractionConfig,
    pub constraints: ConstraintParams,
    pub weights: LossWeights,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

#[derive(Debug, Clone, Default)]
pub struct StepLosses {
    pub planning: LossBreakdown,
    pub map: f64,
    pub motion: f64,
    pub total: f64,
}

/// Objective value and parameter gradients for one scenario.
pub fn objective_and_grads(
    scenario: &Scenario,
    filtered: &FilteredScene,
    params: &InteractionParams,
    objective: &Objective,
) -> Result<(StepLosses, Vec<Tensor>)> {
    let (plan, pass) = forward_plan(scenario, params, &objective.interact)?;
    let (plan_loss, breakdown) = total_on_filtered(
        &plan,
        scenario,
        filtered,
        &objective.constraints,
        &objective.weights,
    )?;
    let t_f = plan.len();
    let mut seeds = vec![(pass.plan_node, Tensor::new(t_f, 2, plan_loss.flat_grad())?)];
    let mut losses = StepLosses {
        planning: breakdown,
        total: plan_loss.value,
        ..Default::default()
    };
    if let Some(aux) = &pass.aux {
        let w = &objective.weights;
        let (gamma, alpha) = (objective.focal_gamma, objective.focal_alpha);

        let points = pass.tape.value(aux.map_points);
        let logits = pass.tape.value(aux.map_logits);
        let mut g_points = Tensor::zeros(points.rows(), points.cols());
        let mut g_logits = Tensor::zeros(logits.rows(), logits.cols());
        let n_m = scenario.map.len().max(1) as f64;
        for (i, m) in scenario.map.iter().enumerate() {
            let pred: Vec<Point2> = points
                .row_slice(i)
                .chunks_exact(2)
                .map(|c| Point2::new(c[0], c[1]))
                .collect();
            let (v, g) = map_regression_loss(&pred, m.points.points())?;
            losses.map += v / n_m;
            let row = &mut g_points.data_mut()[i * points.cols()..(i + 1) * points.cols()];
            for (dst, gp) in row.chunks_exact_mut(2).zip(&g) {
                dst[0] = w.map * gp.x / n_m;
                dst[1] = w.map * gp.y / n_m;
            }
            for c in 0..logits.cols() {
                let (v, g) = focal_on_logit(logits.get(i, c), c == m.class.index(), gamma, alpha);
                losses.map += v / n_m;
                g_logits.data_mut()[i * logits.cols() + c] = w.map * g / n_m;
            }
        }

        let motion = pass.tape.value(aux.motion);
        let scores = pass.tape.value(aux.mode_logits);
        let mut g_motion = Tensor::zeros(motion.rows(), motion.cols());
        let mut g_scores = Tensor::zeros(scores.rows(), scores.cols());
        let n_a = scenario.agents.len().max(1) as f64;
        let n_k = scores.cols();
        for (i, gt) in scenario.agent_gt_futures.iter().enumerate() {
            let modes: Vec<Vec<Point2>> = motion
                .row_slice(i)
                .chunks_exact(2 * t_f)
                .map(|m| m.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect())
                .collect();
            let reg = motion_regression_loss(&modes, gt)?;
            losses.motion += reg.value / n_a;
            let row = &mut g_motion.data_mut()[i * motion.cols()..(i + 1) * motion.cols()];
            for (dst, gp) in row.chunks_exact_mut(2).zip(reg.grads.iter().flatten()) {
                dst[0] = w.motion * gp.x / n_a;
                dst[1] = w.motion * gp.y / n_a;
            }
            for k in 0..n_k {
                let (v, g) = focal_on_logit(scores.get(i, k), k == reg.selected, gamma, alpha);
                losses.motion += v / n_a;
                g_scores.data_mut()[i * n_k + k] = w.motion * g / n_a;
            }
        }
        losses.total += w.map * losses.map + w.motion * losses.motion;
        seeds.push((aux.map_points, g_points));
        seeds.push((aux.map_logits, g_logits));
        seeds.push((aux.motion, g_motion));
        seeds.push((aux.mode_logits, g_scores));
    }
    let grads = pass.tape.backward_seeded(&seeds)?;
    Ok((losses, pass.params.collect_grads(&grads, params)))
}

/// Decoupled-weight-decay Adam state.
struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl AdamW {
    fn new(params: &InteractionParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut InteractionParams,
        grads: &[Tensor],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                p[i] -= lr * cfg.weight_decay * p[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Plans for a batch of scenarios with frozen parameters.
pub fn predict_plans(
    scenarios: &[Scenario],
    params: &InteractionParams,
    config: &InteractionConfig,
) -> Result<Vec<PlanTrajectory>> {
    scenarios
        .par_iter()
        .map(|s| forward_plan(s, params, config).map(|(p, _)| p))
        .collect()
}

/// Mean L2 (average over 1/2/3 s) and average collision rate on a set.
pub fn validation_metrics(
    scenarios: &[Scenario],
    params: &InteractionParams,
    config: &InteractionConfig,
) -> Result<(f64, f64)> {
    if scenarios.is_empty() {
        return Ok((0.0, 0.0));
    }
    let plans = predict_plans(scenarios, params, config)?;
    let mut l2 = 0.0;
    for (s, p) in scenarios.iter().zip(&plans) {
        l2 += displacement_error(p, &s.expert, s.horizon_dt)?.avg;
    }
    let col = collision_rate(scenarios, &plans, DEFAULT_EGO_SIZE)?;
    Ok((l2 / scenarios.len() as f64, col.avg))
}

pub struct TrainOutcome {
    pub params: InteractionParams,
    pub log: TrainLog,
}

pub fn train(
    config: &TrainConfig,
    generator: &GeneratorConfig,
    objective: &Objective,
) -> Result<TrainOutcome> {
    config.validate()?;
    generator.validate()?;
    objective.interact.validate()?;
    objective.constraints.validate()?;
    objective.weights.validate()?;
    if objective.interact.t_f != generator.t_f {
        return Err(Error::Config(format!(
            "interact T_f {} differs from generator T_f {}",
            objective.interact.t_f, generator.t_f
        )));
    }

    let train_set = scenario_set(config.train_scenarios, config.seed, TRAIN_STREAM, generator)?;
    let val_set = scenario_set(config.val_scenarios, config.seed, VAL_STREAM, generator)?;
    let filtered: Vec<FilteredScene> = train_set
        .iter()
        .map(|s| FilteredScene::new(s, &objective.constraints))
        .collect();

    let mut params = InteractionParams::init(&objective.interact, derive_seed(config.seed, 0, 0))?;
    let mut opt = AdamW::new(&params);
    let steps_per_epoch = config.train_scenarios.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 3, 0));
    let mut log = TrainLog::default();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = EpochRecord::default();
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (losses, grads) =
                    objective_and_grads(&train_set[i], &filtered[i], &params, objective)?;
                if !losses.total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        what: "loss",
                    });
                }
                sums.imitation += losses.planning.imitation;
                sums.collision += losses.planning.collision;
                sums.boundary += losses.planning.boundary;
                sums.direction += losses.planning.direction;
                sums.map += losses.map;
                sums.motion += losses.motion;
                sums.total += losses.total;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (dst, g) in a.iter_mut().zip(&grads) {
                            for (x, y) in dst.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            if batch.len() > 1 {
                for g in &mut grads {
                    for x in g.data_mut() {
                        *x *= scale;
                    }
                }
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    what: "gradient",
                });
            }
            let lr = config.lr_at(step, total_steps);
            opt.update(&mut params, &grads, lr, config);
            step += 1;
        }
        if params.tensors().iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                step,
                what: "parameter",
            });
        }
        let n = train_set.len() as f64;
        let (val_l2, val_collision) = validation_metrics(&val_set, &params, &objective.interact)?;
        let record = EpochRecord {
            epoch,
            imitation: sums.imitation / n,
            collision: sums.collision / n,
            boundary: sums.boundary / n,
            direction: sums.direction / n,
            map: sums.map / n,
            motion: sums.motion / n,
            total: sums.total / n,
            val_l2,
            val_collision,
        };
        log::info!(
            "epoch {epoch}: total {:.4} imi {:.4} val_l2 {:.4} val_col {:.2}%",
            record.total,
            record.imitation,
            val_l2,
            val_collision
        );
        log.epochs.push(record);
    }
    if !log.objective_trend_ok(config.warmup_epochs) {
        log::warn!("training objective moving average rose after warmup");
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point2> {
        v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    #[test]
    fn minfde_cases() {
        let gt = pts(&[(0.0, 0.0), (0.0, 10.0)]);
        let modes = vec![pts(&[(0.0, 0.0), (2.0, 10.0)]), gt.clone()];
        assert_eq!(minfde_select(&modes, &gt), 1);
        let at = |d: f64| pts(&[(0.0, 0.0), (d, 10.0)]);
        assert_eq!(minfde_select(&[at(2.0), at(0.5), at(1.0)], &gt), 1);
        assert_eq!(minfde_select(&[at(1.0), at(1.0), at(1.0)], &gt), 0);
    }

    #[test]
    fn motion_regression_cases() {
        let gt = pts(&[(0.0, 0.0)]);
        let r = motion_regression_loss(&[gt.clone()], &gt).unwrap();
        assert_eq!(r.value, 0.0);
        let r = motion_regression_loss(&[pts(&[(5.0, 5.0)]), pts(&[(1.0, 1.0)])], &gt).unwrap();
        assert_eq!(r.selected, 1);
        assert_eq!(r.value, 2.0);
        assert_eq!(r.grads[0], vec![Point2::ORIGIN]);
        assert_eq!(r.grads[1], vec![Point2::new(1.0, 1.0)]);
    }

    #[test]
    fn map_regression_cases() {
        let gt = pts(&[(1.0, 1.0), (2.0, 2.0)]);
        assert_eq!(map_regression_loss(&gt, &gt).unwrap().0, 0.0);
        let (v, _) = map_regression_loss(&pts(&[(0.5, -0.5)]), &pts(&[(0.0, 0.0)])).unwrap();
        assert_eq!(v, 1.0);
        let shift = |p: &[Point2]| {
            p.iter()
                .map(|&q| q + Point2::new(7.0, -3.0))
                .collect::<Vec<_>>()
        };
        let pred = pts(&[(1.2, 0.9), (2.5, 2.0)]);
        let a = map_regression_loss(&pred, &gt).unwrap().0;
        let b = map_regression_loss(&shift(&pred), &shift(&gt)).unwrap().0;
        assert!((a - b).abs() < 1e-12);
        assert!(map_regression_loss(&pred[..1], &gt).is_err());
    }

    #[test]
    fn focal_cases() {
        let (v, _) = focal_loss(1.0 - 1e-7, true, 2.0, 0.25);
        assert!(v < 1e-15);
        let (v, _) = focal_loss(0.5, true, 2.0, 0.25);
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.04332).abs() < 1e-5);
        let (v, _) = focal_loss(0.3, false, 0.0, 0.5);
        assert!((v - 0.5 * -(0.7f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn focal_gradient_matches_central_difference() {
        for &(p, t, g, a) in &[
            (0.3, true, 2.0, 0.25),
            (0.8, false, 2.0, 0.25),
            (0.6, true, 0.0, 0.5),
            (0.1, false, 1.5, 0.4),
        ] {
            let h = 1e-6;
            let num = (focal_loss(p + h, t, g, a).0 - focal_loss(p - h, t, g, a).0) / (2.0 * h);
            let (_, ana) = focal_loss(p, t, g, a);
            assert!((num - ana).abs() / ana.abs().max(1e-3) < 1e-6, "{p} {t}");
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0, 100), 2e-4);
        assert!(cfg.lr_at(100, 100).abs() < 1e-20);
        assert!((cfg.lr_at(50, 100) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn trend_check() {
        let mk = |totals: &[f64]| TrainLog {
            epochs: totals
                .iter()
                .enumerate()
                .map(|(i, &t)| EpochRecord {
                    epoch: i + 1,
                    total: t,
                    ..Default::default()
                })
                .collect(),
        };
        let down: Vec<f64> = (0..20).map(|i| 10.0 / (i + 1) as f64).collect();
        assert!(mk(&down).objective_trend_ok(5));
        let mut up = down.clone();
        up[15] = 50.0;
        assert!(!mk(&up).objective_trend_ok(5));
    }

    #[test]
    fn seeds_are_distinct() {
        let a: Vec<u64> = (0..100).map(|i| derive_seed(0, TRAIN_STREAM, i)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 100);
        assert_ne!(
            derive_seed(0, TRAIN_STREAM, 0),
            derive_seed(0, VAL_STREAM, 0)
        );
    }
}
