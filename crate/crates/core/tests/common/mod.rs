//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taml_core::eval::{ClassifierConfig, TextClassifier};
use taml_core::eval::BigramLM;
use taml_core::infernet::{balancing_nodes, kl_node, GaussianPosterior, InferConfig, InferenceNet, Noise};
use taml_core::model::{ModelConfig, StyleModel, TrainingExample};
use taml_core::taskgen::{generate_task, TaskFamily};
use taml_core::text::{Sentence, Style, BOS, EOS};
use taml_core::{grad_check, Graph, NodeId, ParameterSet, Result, Tensor};

pub const GRAD_EPS: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn set(tensors: Vec<Tensor>) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (i, t) in tensors.into_iter().enumerate() {
        p.push(format!("x{i}"), t);
    }
    p
}

/// `Σ c ⊙ node` with fixed random weights, so every output coordinate matters.
fn project(g: &mut Graph, node: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(node).to_vec();
    let c = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
    let m = g.mul(node, c)?;
    Ok(g.sum(m))
}

type Case = (&'static str, ParameterSet, Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>);

fn primitive_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| random_tensor(rng, s, -1.0, 1.0);
    let pos = |rng: &mut ChaCha8Rng, s: &[usize]| random_tensor(rng, s, 0.5, 2.0);
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, $params:expr, $f:expr) => {
            cases.push(($name, set($params), Box::new($f)));
        };
    }
    case!("matmul", vec![r(&mut rng, &[3, 4]), r(&mut rng, &[4, 2])], |g, n| {
        let y = g.matmul(n[0], n[1])?;
        project(g, y, 1)
    });
    case!("add_broadcast", vec![r(&mut rng, &[3, 4]), r(&mut rng, &[4])], |g, n| {
        let y = g.add(n[0], n[1])?;
        let y = g.mul(y, y)?;
        project(g, y, 2)
    });
    case!("sub_broadcast", vec![r(&mut rng, &[3, 4]), r(&mut rng, &[4])], |g, n| {
        let y = g.sub(n[0], n[1])?;
        let y = g.mul(y, y)?;
        project(g, y, 3)
    });
    case!("mul_broadcast", vec![r(&mut rng, &[2, 3]), r(&mut rng, &[3])], |g, n| {
        let y = g.mul(n[0], n[1])?;
        project(g, y, 4)
    });
    case!("relu", vec![r(&mut rng, &[5, 3])], |g, n| {
        let y = g.relu(n[0]);
        project(g, y, 5)
    });
    case!("sigmoid", vec![r(&mut rng, &[7])], |g, n| {
        let y = g.sigmoid(n[0]);
        project(g, y, 6)
    });
    case!("tanh", vec![r(&mut rng, &[7])], |g, n| {
        let y = g.tanh(n[0]);
        project(g, y, 7)
    });
    case!("exp", vec![r(&mut rng, &[7])], |g, n| {
        let y = g.exp(n[0]);
        project(g, y, 8)
    });
    case!("softplus", vec![r(&mut rng, &[7])], |g, n| {
        let y = g.softplus(n[0]);
        project(g, y, 9)
    });
    case!("log", vec![pos(&mut rng, &[7])], |g, n| {
        let y = g.log(n[0])?;
        project(g, y, 10)
    });
    case!("scale_add_scalar", vec![r(&mut rng, &[4])], |g, n| {
        let y = g.scale(n[0], -2.5);
        let y = g.add_scalar(y, 0.3);
        let y = g.mul(y, y)?;
        project(g, y, 11)
    });
    case!("sum", vec![r(&mut rng, &[2, 3])], |g, n| {
        let s = g.sum(n[0]);
        g.mul(s, s)
    });
    case!("mean_rows", vec![r(&mut rng, &[5, 3])], |g, n| {
        let y = g.mean_rows(n[0])?;
        project(g, y, 12)
    });
    case!("var_rows", vec![r(&mut rng, &[5, 3])], |g, n| {
        let y = g.var_rows(n[0])?;
        project(g, y, 13)
    });
    case!("max_rows", vec![r(&mut rng, &[5, 3])], |g, n| {
        let y = g.max_rows(n[0])?;
        project(g, y, 14)
    });
    case!(
        "conv2d",
        vec![r(&mut rng, &[2, 2, 4, 5]), r(&mut rng, &[3, 2, 3, 3]), r(&mut rng, &[3])],
        |g, n| {
            let y = g.conv2d(n[0], n[1], n[2])?;
            project(g, y, 15)
        }
    );
    case!("max_pool2", vec![r(&mut rng, &[2, 2, 4, 6])], |g, n| {
        let y = g.max_pool2(n[0])?;
        project(g, y, 16)
    });
    case!("softmax_cross_entropy", vec![r(&mut rng, &[4, 5])], |g, n| {
        g.softmax_cross_entropy(n[0], &[0, 3, 4, 1], &[0.5, 1.0, 0.0, 2.0])
    });
    case!("concat", vec![r(&mut rng, &[2, 3]), r(&mut rng, &[1, 3])], |g, n| {
        let y = g.concat(&[n[0], n[1], n[0]])?;
        project(g, y, 17)
    });
    case!("reshape", vec![r(&mut rng, &[2, 6])], |g, n| {
        let y = g.reshape(n[0], &[3, 4])?;
        let y = g.mul(y, y)?;
        project(g, y, 18)
    });
    case!("gather", vec![r(&mut rng, &[5, 3])], |g, n| {
        let y = g.gather(n[0], &[4, 0, 4, 2])?;
        project(g, y, 19)
    });
    case!("unfold", vec![r(&mut rng, &[6, 2])], |g, n| {
        let y = g.unfold(n[0], 3)?;
        let y = g.mul(y, y)?;
        project(g, y, 20)
    });
    cases
}

fn support_sentences() -> Vec<Sentence> {
    let task = generate_task(&TaskFamily::default(), 0, 5, true).unwrap();
    let mut a: Vec<Sentence> = task.examples.iter().filter(|e| e.style() == Style::A).take(3).map(|e| e.source.clone()).collect();
    a.extend(task.examples.iter().filter(|e| e.style() == Style::B).take(2).map(|e| e.source.clone()));
    a
}

fn composed_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let task = generate_task(&TaskFamily::default(), 0, 5, true).unwrap();

    let model = StyleModel::new(ModelConfig::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let theta = model.init_params(&mut rng);
    let batch: Vec<TrainingExample> = task.examples[..6]
        .iter()
        .map(|e| TrainingExample::from_example(e, true).unwrap())
        .collect();
    let m = model.clone();
    cases.push((
        "two_head_model",
        theta,
        Box::new(move |g, n| m.task_loss_node(g, n, &batch)),
    ));

    let net = InferenceNet::new(InferConfig::default(), 12, 8, model.config.num_tensors()).unwrap();
    let mut psi = net.init_params(&mut rng);
    // Zero heads would hide the encoder gradients, and zero conv biases put
    // the zero-padded grid rows exactly on the ReLU kink.
    for t in psi.tensors_mut() {
        for v in t.values_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let sentences = support_sentences();
    let noise = Noise::draw(model.config.num_tensors(), &mut rng);
    let backbone = model.backbone.clone();
    let psi_ref = psi.clone();
    cases.push((
        "inference_network",
        psi,
        Box::new(move |g, n| {
            let a: Vec<&Sentence> = sentences.iter().filter(|s| s.style == Style::A).collect();
            let b: Vec<&Sentence> = sentences.iter().filter(|s| s.style == Style::B).collect();
            let post = net.posterior_nodes(g, &psi_ref, n, &backbone, [&a[..], &b[..]])?;
            let bal = balancing_nodes(g, &post, &noise)?;
            let kl = kl_node(g, &post)?;
            let po = project(g, bal.omega, 21)?;
            let pg = project(g, bal.gamma, 22)?;
            let pz = project(g, bal.z, 23)?;
            let s = g.add(po, pg)?;
            let s = g.add(s, pz)?;
            let klw = g.scale(kl, 0.01);
            g.add(s, klw)
        }),
    ));

    let clf = TextClassifier::new(ClassifierConfig::default(), 24, &mut rng).unwrap();
    let data = support_sentences();
    let p = clf.params.clone();
    cases.push((
        "text_cnn",
        p,
        Box::new(move |g, n| {
            let refs: Vec<&Sentence> = data.iter().collect();
            clf.loss_node(g, n, &refs)
        }),
    ));
    cases
}

/// Worst relative error of every primitive and composed network.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    primitive_cases()
        .into_iter()
        .chain(composed_cases())
        .map(|(name, point, f)| (name, grad_check(|g, n| f(g, n), &point, GRAD_EPS).unwrap()))
        .collect()
}

/// Interpolated Kneser-Ney written directly from counts of raw token
/// streams, sharing no code with the library model.
pub struct DirectKn {
    pub pairs: Vec<(u32, u32)>,
    pub vocab: usize,
    pub d: f64,
}

impl DirectKn {
    pub fn new(corpus: &[Vec<u32>], vocab: usize, d: f64) -> Self {
        let mut pairs = Vec::new();
        for s in corpus {
            let mut stream = vec![BOS];
            stream.extend(s);
            stream.push(EOS);
            for w in stream.windows(2) {
                pairs.push((w[0], w[1]));
            }
        }
        Self { pairs, vocab, d }
    }

    pub fn p(&self, v: u32, w: u32) -> f64 {
        let c_vw = self.pairs.iter().filter(|&&p| p == (v, w)).count() as f64;
        let c_v = self.pairs.iter().filter(|p| p.0 == v).count() as f64;
        let types: BTreeSet<(u32, u32)> = self.pairs.iter().copied().collect();
        let followers = types.iter().filter(|p| p.0 == v).count() as f64;
        let left_of_w = types.iter().filter(|p| p.1 == w).count() as f64;
        let continued: BTreeSet<u32> = types.iter().map(|p| p.1).collect();
        let n_types = types.len() as f64;
        let uniform = 1.0 / self.vocab as f64;
        let p_cont = if n_types == 0.0 {
            uniform
        } else {
            (left_of_w - self.d).max(0.0) / n_types + self.d * continued.len() as f64 / n_types * uniform
        };
        if c_v == 0.0 {
            p_cont
        } else {
            (c_vw - self.d).max(0.0) / c_v + self.d * followers / c_v * p_cont
        }
    }
}

/// Brute-force bigram counts of BOS/EOS-padded streams.
pub fn count_bigrams(corpus: &[Vec<u32>]) -> BTreeMap<(u32, u32), u64> {
    let mut m = BTreeMap::new();
    for s in corpus {
        let mut prev = BOS;
        for &w in s.iter().chain(std::iter::once(&EOS)) {
            *m.entry((prev, w)).or_insert(0) += 1;
            prev = w;
        }
    }
    m
}

/// `E_q[ln q(g) - ln N(g; 0, I)]` from `samples` draws.
pub fn kl_monte_carlo(post: &GaussianPosterior, samples: usize, rng: &mut impl Rng) -> f64 {
    let mu: Vec<f64> = [&post.omega_mu, &post.gamma_mu, &post.z_mu].into_iter().flatten().copied().collect();
    let sd: Vec<f64> = [&post.omega_sigma, &post.gamma_sigma, &post.z_sigma].into_iter().flatten().copied().collect();
    let mut total = 0.0;
    for _ in 0..samples {
        for (m, s) in mu.iter().zip(&sd) {
            let u: f64 = 1.0 - rng.random::<f64>();
            let e = (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * rng.random::<f64>()).cos();
            let g = m + s * e;
            total += -0.5 * e * e - s.ln() + 0.5 * g * g;
        }
    }
    total / samples as f64
}

/// Worst relative gap between closed-form and Monte-Carlo KL over `count`
/// random posteriors, and the closed form at the prior itself.
pub fn kl_agreement(count: usize, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = rng.random_range(1..4);
        let draw = |len: usize, rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
            let mu = (0..len).map(|_| rng.random_range(-1.5..1.5)).collect();
            let sd = (0..len).map(|_| rng.random_range(0.2..1.8)).collect();
            (mu, sd)
        };
        let (omega_mu, omega_sigma) = draw(2, &mut rng);
        let (gamma_mu, gamma_sigma) = draw(n, &mut rng);
        let (z_mu, z_sigma) = draw(n, &mut rng);
        let post = GaussianPosterior { omega_mu, omega_sigma, gamma_mu, gamma_sigma, z_mu, z_sigma };
        let exact = post.kl_to_prior();
        let mc = kl_monte_carlo(&post, samples, &mut rng);
        worst = worst.max((mc - exact).abs() / exact);
    }
    let prior = GaussianPosterior {
        omega_mu: vec![0.0; 2],
        omega_sigma: vec![1.0; 2],
        gamma_mu: vec![0.0; 3],
        gamma_sigma: vec![1.0; 3],
        z_mu: vec![0.0; 3],
        z_sigma: vec![1.0; 3],
    };
    (worst, prior.kl_to_prior())
}

fn posterior_fixture() -> (StyleModel, InferenceNet, ParameterSet, Vec<Sentence>, Vec<Sentence>) {
    let cfg = ModelConfig::default();
    let net = InferenceNet::new(InferConfig::default(), cfg.max_len, cfg.d_emb, cfg.num_tensors()).unwrap();
    let model = StyleModel::new(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut psi = net.init_params(&mut rng);
    for t in psi.tensors_mut() {
        for v in t.values_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let task = generate_task(&TaskFamily::default(), 0, 11, true).unwrap();
    let of = |style: Style, k: usize| -> Vec<Sentence> {
        task.examples.iter().filter(|e| e.style() == style).take(k).map(|e| e.source.clone()).collect()
    };
    (model, net, psi, of(Style::A, 9), of(Style::B, 5))
}

fn posterior_vector(p: &GaussianPosterior) -> Vec<f64> {
    [&p.omega_mu, &p.omega_sigma, &p.gamma_mu, &p.gamma_sigma, &p.z_mu, &p.z_sigma].into_iter().flatten().copied().collect()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest posterior change over `perms` joint shuffles of both support
/// classes, and the largest change of raw statistics pooling under shuffling.
pub fn pooling_permutation_gap(perms: usize, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let (model, net, psi, mut a, mut b) = posterior_fixture();
    let post = |a: &[Sentence], b: &[Sentence]| {
        let ra: Vec<&Sentence> = a.iter().collect();
        let rb: Vec<&Sentence> = b.iter().collect();
        posterior_vector(&net.posterior(&psi, &model.backbone, [&ra[..], &rb[..]]).unwrap())
    };
    let reference = post(&a, &b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = (0..12).map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let pooled = taml_core::infernet::pool_vectors(&rows).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..perms {
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        worst = worst.max(max_gap(&reference, &post(&a, &b)));
        rows.shuffle(&mut rng);
        worst = worst.max(max_gap(&pooled, &taml_core::infernet::pool_vectors(&rows).unwrap()));
    }
    worst
}

/// Under swapping the two support classes: the gap between `ω` and the
/// swapped `ω`, and the change in the `γ`, `z` posteriors.
pub fn class_swap_gaps() -> (f64, f64) {
    let (model, net, psi, a, b) = posterior_fixture();
    let ra: Vec<&Sentence> = a.iter().collect();
    let rb: Vec<&Sentence> = b.iter().collect();
    let p = net.posterior(&psi, &model.backbone, [&ra[..], &rb[..]]).unwrap();
    let q = net.posterior(&psi, &model.backbone, [&rb[..], &ra[..]]).unwrap();
    let rev = |v: &[f64]| -> Vec<f64> { v.iter().rev().copied().collect() };
    let omega = max_gap(&p.omega_mu, &rev(&q.omega_mu)).max(max_gap(&p.omega_sigma, &rev(&q.omega_sigma)));
    let task = max_gap(&p.gamma_mu, &q.gamma_mu)
        .max(max_gap(&p.gamma_sigma, &q.gamma_sigma))
        .max(max_gap(&p.z_mu, &q.z_mu))
        .max(max_gap(&p.z_sigma, &q.z_sigma));
    (omega, task)
}

/// Fraction of class-1 sentences in one task of `n` sentences.
pub fn class_one_fraction(n: usize, seed: u64) -> f64 {
    let family = TaskFamily {
        size_min: n,
        size_max: n,
        ..TaskFamily::default()
    };
    generate_task(&family, 0, seed, false).unwrap().class_fraction(Style::A)
}

/// Worst gap between the library LM and [`DirectKn`], and the worst
/// normalization error, over `count` random corpora of at most 50 tokens.
pub fn kn_oracle_gaps(count: usize, seed: u64) -> (f64, f64) {
    const V: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gap, mut norm): (f64, f64) = (0.0, 0.0);
    for _ in 0..count {
        let mut budget = rng.random_range(1..=50usize);
        let mut corpus = Vec::new();
        while budget > 0 {
            let len = rng.random_range(1..=budget.min(8));
            budget -= len;
            corpus.push((0..len).map(|_| rng.random_range(4..V as u32)).collect::<Vec<u32>>());
        }
        let lm = BigramLM::train(&corpus, V, 0.75).unwrap();
        let oracle = DirectKn::new(&corpus, V, 0.75);
        for v in 0..V as u32 {
            let mut total = 0.0;
            for w in 0..V as u32 {
                let p = lm.prob(v, w);
                gap = gap.max((p - oracle.p(v, w)).abs());
                total += p;
            }
            norm = norm.max((total - 1.0).abs());
        }
    }
    (gap, norm)
}

pub fn small_tasks(n: usize) -> Vec<taml_core::taskgen::Task> {
    let family = TaskFamily {
        size_min: 40,
        size_max: 60,
        ..TaskFamily::default()
    };
    taml_core::taskgen::generate_tasks(&family, 0, n, &mut ChaCha8Rng::seed_from_u64(8)).unwrap()
}

pub fn default_parts() -> (StyleModel, InferenceNet) {
    let cfg = ModelConfig::default();
    let net = InferenceNet::new(InferConfig::default(), cfg.max_len, cfg.d_emb, cfg.num_tensors()).unwrap();
    (StyleModel::new(cfg, 1).unwrap(), net)
}

/// ψ whose posterior is `μ = 0` with a vanishing scale.
pub fn collapsed_psi(net: &InferenceNet) -> ParameterSet {
    let mut psi = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    for i in 0..psi.len() {
        if psi.name(i).ends_with(".sigma.b") {
            for v in psi.tensor_mut(i).values_mut() {
                *v = -60.0;
            }
        }
    }
    psi
}

/// Largest θ or objective gap over `iterations` meta-iterations between TAML
/// pinned to identity balancing at `α` and MAML at `α / 2`.
pub fn half_step_gap(iterations: usize) -> f64 {
    use taml_core::infernet::BalancingVariables;
    use taml_core::metalearn::{Balancing, Learner, MetaConfig, Method, Streams};
    let train = small_tasks(4);
    let cfg = MetaConfig::default();
    let build = |method, cfg| {
        let (model, net) = default_parts();
        Learner::new(method, model, net, cfg, Streams::split(5)).unwrap()
    };
    let mut taml = build(Method::Taml, cfg.clone());
    taml.balancing = Balancing::Pinned(BalancingVariables::identity(taml.theta.len()));
    let half = MetaConfig {
        inner_lr: cfg.inner_lr / 2.0,
        ..cfg
    };
    let mut maml = build(Method::Maml, half);
    let mut worst: f64 = 0.0;
    for _ in 0..iterations {
        let a = taml.step(&train).unwrap();
        let b = maml.step(&train).unwrap();
        worst = worst.max((a.objective - b.objective).abs()).max(taml.theta.max_abs_diff(&maml.theta));
    }
    worst
}

/// With `K = 0`, the gaps between the joint query-loss gradient and the MAML
/// and TAML meta-gradients; TAML uses a collapsed posterior at `μ = 0`.
pub fn zero_step_gaps() -> (f64, f64) {
    use taml_core::metalearn::{maml_meta_gradient, sample_meta_batch, taml_meta_gradient, Balancing, MetaConfig};
    let train = small_tasks(4);
    let cfg = MetaConfig {
        inner_steps: 0,
        ..MetaConfig::default()
    };
    let (model, net) = default_parts();
    let theta = model.init_params(&mut ChaCha8Rng::seed_from_u64(2));
    let psi = collapsed_psi(&net);
    let episodes = sample_meta_batch(&train, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut joint = theta.zeros_like();
    for pe in &episodes {
        assert!(pe.plan.steps.is_empty());
        joint.add_scaled(&model.loss_and_grad(&theta, &pe.plan.query).unwrap().1, 1.0);
    }
    let maml = maml_meta_gradient(&model, &theta, &episodes, &cfg).unwrap();
    let mut noise = ChaCha8Rng::seed_from_u64(4);
    let taml = taml_meta_gradient(&model, &net, &theta, &psi, &episodes, &cfg, &Balancing::Inferred, &mut noise).unwrap();
    (maml.theta.max_abs_diff(&joint), taml.theta.max_abs_diff(&joint))
}
