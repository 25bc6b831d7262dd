//! Joint-training baseline, first-order MAML and task-adaptive MAML.
//!
//! Inner loops are plain gradient descent:
//!
//! ```text
//! θ_0 = θ ∘ z
//! θ_k = θ_{k-1} − γ ∘ α ∘ Σ_c ω_c ∇L(θ_{k-1}; support batch of class c)
//! ```
//!
//! MAML is the special case `ω = (1, 1)`, `γ = 1`, `z = 1`. Meta-gradients are
//! first order: inner-loop gradients are treated as constants, so the query
//! gradient at `θ_K` reaches `θ` only through `θ_0 = θ ∘ z`, and reaches the
//! inference network through every place `ω`, `γ` and `z` enter the update
//! arithmetic.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::infernet::{balancing_nodes, kl_node, BalancingVariables, InferenceNet, Noise, NUM_CLASSES};
use crate::math;
use crate::model::{StyleModel, TrainingExample};
use crate::params::ParameterSet;
use crate::taskgen::{sample_episode, Episode, Example, Task};
use crate::tensor::Tensor;
use crate::text::{Sentence, Style};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Maml,
    Taml,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::Maml, Method::Taml];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Maml => "maml",
            Method::Taml => "taml",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner-loop step size α.
    pub inner_lr: f64,
    /// Meta (outer) step size β.
    pub meta_lr: f64,
    /// Inner steps K.
    pub inner_steps: usize,
    /// Monte-Carlo samples S during meta-training.
    pub mc_samples: usize,
    /// Monte-Carlo samples S at meta-test time.
    pub mc_samples_eval: usize,
    /// Tasks per meta-iteration.
    pub meta_batch: usize,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    /// Sentences per inner step, split evenly across the two classes.
    pub batch_size: usize,
    /// Query sentences scored per task and meta-iteration.
    pub query_batch: usize,
    pub support_fraction: f64,
    pub episode_retries: usize,
    /// Pooled-data epochs of the joint-training baseline.
    pub baseline_epochs: usize,
    /// Adam step size of the joint-training baseline.
    pub baseline_lr: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.01,
            meta_lr: 1e-2,
            inner_steps: 5,
            mc_samples: 1,
            mc_samples_eval: 8,
            meta_batch: 4,
            iterations: 200,
            optimizer: OptimizerKind::Adam,
            batch_size: 16,
            query_batch: 16,
            support_fraction: 0.7,
            episode_retries: crate::taskgen::DEFAULT_EPISODE_RETRIES,
            baseline_epochs: 100,
            baseline_lr: 5e-4,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.inner_lr > 0.0) || !(self.meta_lr > 0.0) || !(self.baseline_lr > 0.0) {
            return bad(format!(
                "step sizes must be positive (α={}, β={}, baseline {})",
                self.inner_lr, self.meta_lr, self.baseline_lr
            ));
        }
        if self.mc_samples == 0 || self.mc_samples_eval == 0 {
            return bad("at least one Monte-Carlo sample is required".into());
        }
        if self.meta_batch == 0 || self.batch_size < 2 || self.query_batch == 0 {
            return bad("meta batch, batch size (>= 2) and query batch must be positive".into());
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return bad(format!("support fraction {} outside (0, 1)", self.support_fraction));
        }
        Ok(())
    }
}

/// Adam or plain SGD over a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParameterSet,
    v: ParameterSet,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, like: &ParameterSet) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        params.check_compatible(grads)?;
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grads, -self.lr),
            OptimizerKind::Adam => {
                let t = self.step as f64;
                let bc1 = 1.0 - libm::pow(self.beta1, t);
                let bc2 = 1.0 - libm::pow(self.beta2, t);
                for i in 0..params.len() {
                    let g = grads.tensor(i).values();
                    let m = self.m.tensor_mut(i).values_mut();
                    for (mj, gj) in m.iter_mut().zip(g) {
                        *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                    }
                    let v = self.v.tensor_mut(i).values_mut();
                    for (vj, gj) in v.iter_mut().zip(g) {
                        *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                    }
                    let m = self.m.tensor(i).values();
                    let v = self.v.tensor(i).values();
                    for ((p, mj), vj) in params.tensor_mut(i).values_mut().iter_mut().zip(m).zip(v) {
                        let mhat = mj / bc1;
                        let vhat = vj / bc2;
                        *p -= self.lr * mhat / (math::sqrt(vhat) + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `θ ∘ z`, one multiplier per tensor.
pub fn modulate_init(theta: &ParameterSet, z: &[f64]) -> Result<ParameterSet> {
    if z.len() != theta.len() {
        return Err(Error::ParamMismatch(format!(
            "{} initialization multipliers for {} tensors",
            z.len(),
            theta.len()
        )));
    }
    let mut out = theta.clone();
    for (t, &zl) in out.tensors_mut().zip(z) {
        for v in t.values_mut() {
            *v *= zl;
        }
    }
    Ok(out)
}

/// One balanced inner update from per-class gradients taken at `theta`.
pub fn inner_step(
    theta: &ParameterSet,
    class_grads: &[ParameterSet],
    inner_lr: f64,
    gamma: &[f64],
    omega: &[f64],
) -> Result<ParameterSet> {
    if class_grads.len() != NUM_CLASSES || omega.len() != NUM_CLASSES {
        return Err(Error::ParamMismatch(format!(
            "expected {NUM_CLASSES} class gradients and weights, got {} and {}",
            class_grads.len(),
            omega.len()
        )));
    }
    if gamma.len() != theta.len() {
        return Err(Error::ParamMismatch(format!(
            "{} learning-rate multipliers for {} tensors",
            gamma.len(),
            theta.len()
        )));
    }
    for g in class_grads {
        theta.check_compatible(g)?;
    }
    let mut out = theta.clone();
    for l in 0..theta.len() {
        let step = gamma[l] * inner_lr;
        let g0 = class_grads[0].tensor(l).values();
        let g1 = class_grads[1].tensor(l).values();
        for ((p, a), b) in out.tensor_mut(l).values_mut().iter_mut().zip(g0).zip(g1) {
            *p -= step * (omega[0] * a + omega[1] * b);
        }
    }
    Ok(out)
}

/// Mini-batches for one task: a class-balanced pair per inner step plus a
/// query batch.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub steps: Vec<[Vec<TrainingExample>; NUM_CLASSES]>,
    pub query: Vec<TrainingExample>,
}

fn draw_subset(pool: &[&Example], k: usize, parallel: bool, rng: &mut impl Rng) -> Result<Vec<TrainingExample>> {
    let k = k.min(pool.len());
    index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| TrainingExample::from_example(pool[i], parallel))
        .collect()
}

pub fn plan_batches(episode: &Episode, cfg: &MetaConfig, rng: &mut impl Rng) -> Result<BatchPlan> {
    let per_class = (cfg.batch_size / 2).max(1);
    let classes: Vec<Vec<&Example>> = Style::ALL.iter().map(|&s| episode.support_class(s)).collect();
    for (c, pool) in classes.iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::EmptyClass(Style::from_index(c).label()));
        }
    }
    let mut steps = Vec::with_capacity(cfg.inner_steps);
    for _ in 0..cfg.inner_steps {
        let a = draw_subset(&classes[0], per_class, episode.parallel, rng)?;
        let b = draw_subset(&classes[1], per_class, episode.parallel, rng)?;
        steps.push([a, b]);
    }
    let query_pool: Vec<&Example> = episode.query.iter().collect();
    if query_pool.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let query = draw_subset(&query_pool, cfg.query_batch, episode.parallel, rng)?;
    Ok(BatchPlan { steps, query })
}

#[derive(Clone, Debug)]
pub struct AdaptedParams {
    pub params: ParameterSet,
    /// `θ_0 ..= θ_K`, kept only when requested.
    pub trajectory: Vec<ParameterSet>,
    /// Per step, the gradient of each class batch at `θ_{k-1}`.
    pub class_grads: Vec<[ParameterSet; NUM_CLASSES]>,
}

/// Inner-loop adaptation of `theta` under balancing `bal`.
pub fn adapt(
    model: &StyleModel,
    theta: &ParameterSet,
    plan: &BatchPlan,
    bal: &BalancingVariables,
    inner_lr: f64,
    keep_trajectory: bool,
) -> Result<AdaptedParams> {
    bal.check(theta.len())?;
    let mut current = modulate_init(theta, &bal.z)?;
    let mut trajectory = Vec::new();
    let mut class_grads = Vec::with_capacity(plan.steps.len());
    for [a, b] in &plan.steps {
        if keep_trajectory {
            trajectory.push(current.clone());
        }
        let (_, ga) = model.loss_and_grad(&current, a)?;
        let (_, gb) = model.loss_and_grad(&current, b)?;
        let grads = [ga, gb];
        current = inner_step(&current, &grads, inner_lr, &bal.gamma, &bal.omega)?;
        class_grads.push(grads);
    }
    if keep_trajectory {
        trajectory.push(current.clone());
    }
    Ok(AdaptedParams {
        params: current,
        trajectory,
        class_grads,
    })
}

/// Per-task outcome of a meta-step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: u32,
    pub query_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    /// Support examples per class.
    pub support_counts: [usize; NUM_CLASSES],
    /// Examples per class in each inner-step batch pair.
    pub batch_counts: [usize; NUM_CLASSES],
}

#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub theta: ParameterSet,
    pub psi: Option<ParameterSet>,
    pub objective: f64,
    pub tasks: Vec<TaskRecord>,
    pub grad_evals: usize,
}

/// An episode together with its pre-drawn mini-batches.
#[derive(Clone, Debug)]
pub struct PlannedEpisode {
    pub episode: Episode,
    pub plan: BatchPlan,
}

impl PlannedEpisode {
    fn record(&self, query_loss: f64, kl: Option<f64>) -> TaskRecord {
        let count = |s: Style| self.episode.support.iter().filter(|e| e.style() == s).count();
        let batch = |c: usize| self.plan.steps.first().map_or(0, |p| p[c].len());
        TaskRecord {
            task_id: self.episode.task_id,
            query_loss,
            kl,
            support_counts: [count(Style::A), count(Style::B)],
            batch_counts: [batch(0), batch(1)],
        }
    }
}

/// Samples `cfg.meta_batch` distinct tasks, an episode of each, and its batches.
pub fn sample_meta_batch(tasks: &[Task], cfg: &MetaConfig, rng: &mut impl Rng) -> Result<Vec<PlannedEpisode>> {
    if tasks.is_empty() {
        return Err(Error::Config("no training tasks".into()));
    }
    let k = cfg.meta_batch.min(tasks.len());
    let chosen = index::sample(rng, tasks.len(), k).into_vec();
    let mut out = Vec::with_capacity(k);
    for i in chosen {
        let episode = sample_episode(&tasks[i], cfg.support_fraction, cfg.episode_retries, rng)?;
        let plan = plan_batches(&episode, cfg, rng)?;
        out.push(PlannedEpisode { episode, plan });
    }
    Ok(out)
}

/// First-order MAML meta-gradient: the sum over tasks of the query gradient at
/// the adapted parameters.
pub fn maml_meta_gradient(
    model: &StyleModel,
    theta: &ParameterSet,
    episodes: &[PlannedEpisode],
    cfg: &MetaConfig,
) -> Result<MetaGradient> {
    if episodes.is_empty() {
        return Err(Error::Config("empty meta-batch".into()));
    }
    let bal = BalancingVariables::plain(theta.len());
    let mut grad = theta.zeros_like();
    let mut objective = 0.0;
    let mut tasks = Vec::with_capacity(episodes.len());
    let mut grad_evals = 0;
    for pe in episodes {
        let adapted = adapt(model, theta, &pe.plan, &bal, cfg.inner_lr, false)?;
        let (loss, g) = model.loss_and_grad(&adapted.params, &pe.plan.query)?;
        grad_evals += 2 * pe.plan.steps.len() + 1;
        grad.add_scaled(&g, 1.0);
        objective += loss;
        tasks.push(pe.record(loss, None));
    }
    Ok(MetaGradient {
        theta: grad,
        psi: None,
        objective,
        tasks,
        grad_evals,
    })
}

/// Where TAML's balancing variables come from.
#[derive(Clone, Debug, PartialEq)]
pub enum Balancing {
    /// Sampled from the inference network's posterior.
    Inferred,
    /// Held fixed; the inference network is neither used nor updated.
    Pinned(BalancingVariables),
}

/// The generic inner-loop contributions needed to assemble the first-order
/// gradients with respect to `ω`, `γ` and `z` for one sample.
struct Upstream {
    omega: Vec<f64>,
    gamma: Vec<f64>,
    z: Vec<f64>,
}

fn upstream(
    theta: &ParameterSet,
    adapted: &AdaptedParams,
    query_grad: &ParameterSet,
    bal: &BalancingVariables,
    inner_lr: f64,
) -> Upstream {
    let l = theta.len();
    let mut omega = vec![0.0; NUM_CLASSES];
    let mut gamma = vec![0.0; l];
    let z = (0..l).map(|i| query_grad.tensor(i).dot(theta.tensor(i))).collect();
    for step in &adapted.class_grads {
        for i in 0..l {
            let v = query_grad.tensor(i);
            for (c, g) in step.iter().enumerate() {
                let d = v.dot(g.tensor(i));
                gamma[i] -= inner_lr * bal.omega[c] * d;
                omega[c] -= inner_lr * bal.gamma[i] * d;
            }
        }
    }
    Upstream { omega, gamma, z }
}

/// TAML meta-gradient for `θ` and `ψ` and the Monte-Carlo objective
/// `Σ_τ [mean_s NLL_s + KL_τ / (N_τ + M_τ)]`.
///
/// Tasks whose support set lacks a class are skipped with a warning.
pub fn taml_meta_gradient(
    model: &StyleModel,
    net: &InferenceNet,
    theta: &ParameterSet,
    psi: &ParameterSet,
    episodes: &[PlannedEpisode],
    cfg: &MetaConfig,
    balancing: &Balancing,
    noise_rng: &mut impl Rng,
) -> Result<MetaGradient> {
    if episodes.is_empty() {
        return Err(Error::Config("empty meta-batch".into()));
    }
    let mut grad_theta = theta.zeros_like();
    let mut grad_psi = psi.zeros_like();
    let mut objective = 0.0;
    let mut tasks = Vec::with_capacity(episodes.len());
    let mut grad_evals = 0;
    let s_count = cfg.mc_samples.max(1);
    let inv_s = 1.0 / s_count as f64;

    for pe in episodes {
        let ep = &pe.episode;
        if let Balancing::Pinned(bal) = balancing {
            let adapted = adapt(model, theta, &pe.plan, bal, cfg.inner_lr, false)?;
            let (loss, v) = model.loss_and_grad(&adapted.params, &pe.plan.query)?;
            grad_evals += 2 * pe.plan.steps.len() + 1;
            grad_theta.add_scaled(&modulate_init(&v, &bal.z)?, 1.0);
            objective += loss;
            tasks.push(pe.record(loss, None));
            continue;
        }

        let a = ep.support_sentences(Style::A);
        let b = ep.support_sentences(Style::B);
        let mut g = Graph::new();
        let psi_nodes = psi.bind(&mut g);
        let post = match net.posterior_nodes(&mut g, psi, &psi_nodes, &model.backbone, [&a[..], &b[..]]) {
            Ok(p) => p,
            Err(e @ Error::EmptyClass(_)) => {
                log::warn!("skipping task {}: {e}", ep.task_id);
                continue;
            }
            Err(e) => return Err(e),
        };
        let kl = kl_node(&mut g, &post)?;
        let kl_weight = 1.0 / (ep.support_len() + ep.query_len()) as f64;

        let mut terms = Vec::with_capacity(3 * s_count + 1);
        let mut nll = 0.0;
        for _ in 0..s_count {
            let noise = Noise::draw(theta.len(), noise_rng);
            let bal_nodes = balancing_nodes(&mut g, &post, &noise)?;
            let bal = bal_nodes.values(&g);
            let adapted = adapt(model, theta, &pe.plan, &bal, cfg.inner_lr, false)?;
            let (loss, v) = model.loss_and_grad(&adapted.params, &pe.plan.query)?;
            grad_evals += 2 * pe.plan.steps.len() + 1;
            nll += inv_s * loss;
            grad_theta.add_scaled(&modulate_init(&v, &bal.z)?, inv_s);

            let up = upstream(theta, &adapted, &v, &bal, cfg.inner_lr);
            for (node, u) in [(bal_nodes.omega, up.omega), (bal_nodes.gamma, up.gamma), (bal_nodes.z, up.z)] {
                let c = g.constant(Tensor::vector(u.into_iter().map(|x| x * inv_s).collect()));
                let prod = g.mul(node, c)?;
                terms.push(g.sum(prod));
            }
        }
        let kl_term = g.scale(kl, kl_weight);
        let mut surrogate = kl_term;
        for t in terms {
            surrogate = g.add(surrogate, t)?;
        }
        let grads = g.backward(surrogate)?;
        grad_psi.add_scaled(&psi.gradients(&grads, &psi_nodes), 1.0);
        let kl_value = g.value(kl).item();
        objective += nll + kl_weight * kl_value;
        tasks.push(pe.record(nll, Some(kl_value)));
    }
    if tasks.is_empty() {
        return Err(Error::AllTasksSkipped);
    }
    let psi_grad = match balancing {
        Balancing::Inferred => Some(grad_psi),
        Balancing::Pinned(_) => None,
    };
    Ok(MetaGradient {
        theta: grad_theta,
        psi: psi_grad,
        objective,
        tasks,
        grad_evals,
    })
}

/// Every training example of every task, for joint training.
pub fn pooled_examples(tasks: &[Task]) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for t in tasks {
        for ex in &t.examples {
            out.push(TrainingExample::from_example(ex, t.parallel)?);
        }
    }
    Ok(out)
}

/// One optimizer step of joint training on `batch`.
pub fn baseline_step(
    model: &StyleModel,
    theta: &mut ParameterSet,
    batch: &[TrainingExample],
    opt: &mut Optimizer,
) -> Result<f64> {
    let (loss, grad) = model.loss_and_grad(theta, batch)?;
    opt.step(theta, &grad)?;
    Ok(loss)
}

/// Outcome of adapting to and transferring one held-out task.
#[derive(Clone, Debug)]
pub struct MetaTestOutput {
    pub transferred: Vec<Sentence>,
    /// One adapted parameter set per Monte-Carlo sample (a single one for
    /// MAML, and `θ` itself for the baseline).
    pub adapted: Vec<ParameterSet>,
}

/// Adapts to `episode.support` with the given method and transfers `test`.
///
/// TAML averages the per-position output distributions of `mc_samples_eval`
/// adapted models.
#[allow(clippy::too_many_arguments)]
pub fn meta_test(
    method: Method,
    model: &StyleModel,
    net: &InferenceNet,
    theta: &ParameterSet,
    psi: &ParameterSet,
    episode: &Episode,
    test: &[Sentence],
    cfg: &MetaConfig,
    rng: &mut impl Rng,
) -> Result<MetaTestOutput> {
    let adapted = match method {
        Method::Baseline => vec![theta.clone()],
        Method::Maml => {
            let plan = plan_batches(episode, cfg, rng)?;
            let bal = BalancingVariables::plain(theta.len());
            vec![adapt(model, theta, &plan, &bal, cfg.inner_lr, false)?.params]
        }
        Method::Taml => {
            let plan = plan_batches(episode, cfg, rng)?;
            let a = episode.support_sentences(Style::A);
            let b = episode.support_sentences(Style::B);
            let post = net.posterior(psi, &model.backbone, [&a[..], &b[..]])?;
            let mut out = Vec::with_capacity(cfg.mc_samples_eval);
            for _ in 0..cfg.mc_samples_eval {
                let bal = post.sample(rng);
                out.push(adapt(model, theta, &plan, &bal, cfg.inner_lr, false)?.params);
            }
            out
        }
    };
    let transferred = test
        .iter()
        .map(|s| model.transfer_ensemble(&adapted, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetaTestOutput { transferred, adapted })
}

/// One log record per meta-iteration (or per epoch for the baseline).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub method: Method,
    pub task_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<Vec<f64>>,
    pub objective: f64,
    pub grad_evals: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskRecord>,
}

/// Seeds for the independent random streams of one training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Streams {
    pub init: u64,
    pub episodes: u64,
    pub noise: u64,
}

impl Streams {
    /// Splits one seed into named streams.
    pub fn split(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            init: rng.random(),
            episodes: rng.random(),
            noise: rng.random(),
        }
    }
}

/// Training state for one method.
#[derive(Clone, Debug)]
pub struct Learner {
    pub method: Method,
    pub model: StyleModel,
    pub net: InferenceNet,
    pub cfg: MetaConfig,
    pub theta: ParameterSet,
    pub psi: ParameterSet,
    pub balancing: Balancing,
    opt_theta: Optimizer,
    opt_psi: Optimizer,
    episode_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    iteration: usize,
    grad_evals: usize,
}

impl Learner {
    pub fn new(method: Method, model: StyleModel, net: InferenceNet, cfg: MetaConfig, streams: Streams) -> Result<Self> {
        cfg.validate()?;
        if net.num_tensors() != model.config.num_tensors() {
            return Err(Error::Config("inference heads do not match the model's tensor count".into()));
        }
        let mut init = ChaCha8Rng::seed_from_u64(streams.init);
        let theta = model.init_params(&mut init);
        let psi = net.init_params(&mut init);
        Ok(Self::from_params(method, model, net, cfg, streams, theta, psi))
    }

    pub fn from_params(
        method: Method,
        model: StyleModel,
        net: InferenceNet,
        cfg: MetaConfig,
        streams: Streams,
        theta: ParameterSet,
        psi: ParameterSet,
    ) -> Self {
        let theta_lr = match method {
            Method::Baseline => cfg.baseline_lr,
            _ => cfg.meta_lr,
        };
        Self {
            method,
            opt_theta: Optimizer::new(cfg.optimizer, theta_lr, &theta),
            opt_psi: Optimizer::new(cfg.optimizer, cfg.meta_lr, &psi),
            episode_rng: ChaCha8Rng::seed_from_u64(streams.episodes),
            noise_rng: ChaCha8Rng::seed_from_u64(streams.noise),
            balancing: Balancing::Inferred,
            model,
            net,
            cfg,
            theta,
            psi,
            iteration: 0,
            grad_evals: 0,
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn grad_evals(&self) -> usize {
        self.grad_evals
    }

    /// Number of log records a full run produces.
    pub fn planned_iterations(&self) -> usize {
        match self.method {
            Method::Baseline => self.cfg.baseline_epochs,
            _ => self.cfg.iterations,
        }
    }

    /// One meta-iteration (MAML/TAML) or one pooled epoch (baseline).
    pub fn step(&mut self, tasks: &[Task]) -> Result<IterationRecord> {
        let record = match self.method {
            Method::Baseline => self.baseline_epoch(tasks)?,
            Method::Maml => {
                let eps = sample_meta_batch(tasks, &self.cfg, &mut self.episode_rng)?;
                let mg = maml_meta_gradient(&self.model, &self.theta, &eps, &self.cfg)?;
                self.apply(mg, false)?
            }
            Method::Taml => {
                let eps = sample_meta_batch(tasks, &self.cfg, &mut self.episode_rng)?;
                let mg = taml_meta_gradient(
                    &self.model,
                    &self.net,
                    &self.theta,
                    &self.psi,
                    &eps,
                    &self.cfg,
                    &self.balancing,
                    &mut self.noise_rng,
                )?;
                self.apply(mg, true)?
            }
        };
        if !record.objective.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective {} at iteration {}",
                record.objective, record.iteration
            )));
        }
        self.iteration += 1;
        Ok(record)
    }

    fn apply(&mut self, mg: MetaGradient, with_kl: bool) -> Result<IterationRecord> {
        self.opt_theta.step(&mut self.theta, &mg.theta)?;
        if let Some(gp) = &mg.psi {
            self.opt_psi.step(&mut self.psi, gp)?;
        }
        self.grad_evals += mg.grad_evals;
        let kl = with_kl.then(|| mg.tasks.iter().map(|t| t.kl.unwrap_or(0.0)).collect());
        Ok(IterationRecord {
            iteration: self.iteration,
            method: self.method,
            task_losses: mg.tasks.iter().map(|t| t.query_loss).collect(),
            kl,
            objective: mg.objective,
            grad_evals: self.grad_evals,
            tasks: mg.tasks,
        })
    }

    fn baseline_epoch(&mut self, tasks: &[Task]) -> Result<IterationRecord> {
        let mut pool = pooled_examples(tasks)?;
        if pool.is_empty() {
            return Err(Error::EmptyBatch);
        }
        pool.shuffle(&mut self.episode_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in pool.chunks(self.cfg.batch_size) {
            total += baseline_step(&self.model, &mut self.theta, batch, &mut self.opt_theta)?;
            batches += 1;
        }
        self.grad_evals += batches;
        let mean = total / batches as f64;
        Ok(IterationRecord {
            iteration: self.iteration,
            method: Method::Baseline,
            task_losses: vec![mean],
            kl: None,
            objective: mean,
            grad_evals: self.grad_evals,
            tasks: Vec::new(),
        })
    }

    /// Runs the configured number of iterations, calling `log` after each.
    pub fn train(&mut self, tasks: &[Task], mut log: impl FnMut(&IterationRecord)) -> Result<()> {
        for _ in 0..self.planned_iterations() {
            let rec = self.step(tasks)?;
            log(&rec);
        }
        Ok(())
    }

    pub fn meta_test(&self, episode: &Episode, test: &[Sentence], rng: &mut impl Rng) -> Result<MetaTestOutput> {
        meta_test(
            self.method,
            &self.model,
            &self.net,
            &self.theta,
            &self.psi,
            episode,
            test,
            &self.cfg,
            rng,
        )
    }
}
