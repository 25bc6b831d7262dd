//! Variational inference network over balancing variables.
//!
//! Each support sentence is encoded by a small conv net (NN1) over its frozen
//! embedding grid. Class encodings `s_c` pool those vectors; a task encoding
//! pools `NN2(s_c)` over classes. Affine heads turn `s_c` into the Gaussian
//! posterior of the class weight `ω_c`, and the task encoding into the
//! posteriors of the per-tensor learning-rate multipliers `γ` and the
//! per-tensor initialization multipliers `z`.
//!
//! The prior over the pre-transform variables is standard normal, and the
//! transforms are `ω = sigmoid(g)`, `γ = exp(g)`, `z = exp(g)`, so the prior
//! mode is the identity balancing `ω = 0.5, γ = 1, z = 1`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::math;
use crate::model::Backbone;
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::text::{Sentence, Style};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    /// Output width of NN1.
    pub d_enc: usize,
    /// Width of both NN2 layers.
    pub d_set: usize,
    /// Initial posterior scale of every coordinate.
    pub sigma_init: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            conv1_channels: 4,
            conv2_channels: 8,
            d_enc: 16,
            d_set: 16,
            sigma_init: 0.05,
        }
    }
}

/// Balancing variables for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancingVariables {
    /// Per-class gradient weights in `[0, 1]`.
    pub omega: Vec<f64>,
    /// Per-tensor learning-rate multipliers in `[0, inf)`.
    pub gamma: Vec<f64>,
    /// Per-tensor initialization multipliers in `(0, inf)`.
    pub z: Vec<f64>,
}

impl BalancingVariables {
    /// Image of the prior mode: `ω = 0.5`, `γ = 1`, `z = 1`.
    pub fn identity(num_tensors: usize) -> Self {
        Self {
            omega: vec![0.5; NUM_CLASSES],
            gamma: vec![1.0; num_tensors],
            z: vec![1.0; num_tensors],
        }
    }

    /// Unweighted class sum, as used by plain MAML: `ω = 1`, `γ = 1`, `z = 1`.
    pub fn plain(num_tensors: usize) -> Self {
        Self {
            omega: vec![1.0; NUM_CLASSES],
            ..Self::identity(num_tensors)
        }
    }

    pub fn check(&self, num_tensors: usize) -> Result<()> {
        if self.omega.len() != NUM_CLASSES || self.gamma.len() != num_tensors || self.z.len() != num_tensors {
            return Err(Error::ParamMismatch(format!(
                "balancing variables sized ({}, {}, {}) for {num_tensors} tensors",
                self.omega.len(),
                self.gamma.len(),
                self.z.len()
            )));
        }
        Ok(())
    }
}

/// Factorized Gaussian over the pre-transform variables `(ω̃, γ̃, z̃)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub omega_mu: Vec<f64>,
    pub omega_sigma: Vec<f64>,
    pub gamma_mu: Vec<f64>,
    pub gamma_sigma: Vec<f64>,
    pub z_mu: Vec<f64>,
    pub z_sigma: Vec<f64>,
}

/// Standard normal noise for one reparameterized sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub omega: Vec<f64>,
    pub gamma: Vec<f64>,
    pub z: Vec<f64>,
}

impl Noise {
    pub fn draw(num_tensors: usize, rng: &mut impl Rng) -> Self {
        let mut normal = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect()
        };
        Self {
            omega: normal(NUM_CLASSES),
            gamma: normal(num_tensors),
            z: normal(num_tensors),
        }
    }

    pub fn zeros(num_tensors: usize) -> Self {
        Self {
            omega: vec![0.0; NUM_CLASSES],
            gamma: vec![0.0; num_tensors],
            z: vec![0.0; num_tensors],
        }
    }
}

impl GaussianPosterior {
    /// Reparameterized sample `g = μ + σ ε` pushed through the link functions.
    pub fn transform(&self, noise: &Noise) -> BalancingVariables {
        let draw = |mu: &[f64], sd: &[f64], eps: &[f64], link: fn(f64) -> f64| -> Vec<f64> {
            mu.iter()
                .zip(sd)
                .zip(eps)
                .map(|((m, s), e)| link(m + s * e))
                .collect()
        };
        BalancingVariables {
            omega: draw(&self.omega_mu, &self.omega_sigma, &noise.omega, math::sigmoid),
            gamma: draw(&self.gamma_mu, &self.gamma_sigma, &noise.gamma, math::exp),
            z: draw(&self.z_mu, &self.z_sigma, &noise.z, math::exp),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> BalancingVariables {
        self.transform(&Noise::draw(self.gamma_mu.len(), rng))
    }

    /// Balancing at the posterior mean (`ε = 0`).
    pub fn mean_balancing(&self) -> BalancingVariables {
        self.transform(&Noise::zeros(self.gamma_mu.len()))
    }

    /// `KL(q || N(0, I))`, summed over all coordinates.
    pub fn kl_to_prior(&self) -> f64 {
        let group = |mu: &[f64], sd: &[f64]| -> f64 {
            mu.iter()
                .zip(sd)
                .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * math::ln(*s)))
                .sum()
        };
        group(&self.omega_mu, &self.omega_sigma)
            + group(&self.gamma_mu, &self.gamma_sigma)
            + group(&self.z_mu, &self.z_sigma)
    }

    pub fn num_tensors(&self) -> usize {
        self.gamma_mu.len()
    }
}

/// `[mean, population variance, ln(1 + n)]` of the rows of an `[n, d]` node.
pub fn statistics_pooling(g: &mut Graph, rows: NodeId) -> Result<NodeId> {
    let s = g.shape(rows);
    if s.len() != 2 {
        return Err(Error::Shape {
            node: rows.index(),
            op: "statistics_pooling",
            detail: format!("expected [n, d], got {s:?}"),
        });
    }
    let n = s[0];
    let mean = g.mean_rows(rows)?;
    let var = g.var_rows(rows)?;
    let card = g.constant(Tensor::scalar(math::ln_1p(n as f64)));
    g.concat(&[mean, var, card])
}

/// [`statistics_pooling`] on plain vectors.
pub fn pool_vectors(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = vectors.first() else {
        return Err(Error::EmptySet);
    };
    let d = first.len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Config("pooled vectors must share a positive width".into()));
    }
    let flat: Vec<f64> = vectors.iter().flatten().copied().collect();
    let mut g = Graph::new();
    let rows = g.constant(Tensor::new(vec![vectors.len(), d], flat)?);
    let out = statistics_pooling(&mut g, rows)?;
    Ok(g.value(out).values().to_vec())
}

/// Graph nodes of a posterior: means and scales of each variable group.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorNodes {
    pub omega_mu: NodeId,
    pub omega_sigma: NodeId,
    pub gamma_mu: NodeId,
    pub gamma_sigma: NodeId,
    pub z_mu: NodeId,
    pub z_sigma: NodeId,
}

impl PosteriorNodes {
    pub fn values(&self, g: &Graph) -> GaussianPosterior {
        let v = |n: NodeId| g.value(n).values().to_vec();
        GaussianPosterior {
            omega_mu: v(self.omega_mu),
            omega_sigma: v(self.omega_sigma),
            gamma_mu: v(self.gamma_mu),
            gamma_sigma: v(self.gamma_sigma),
            z_mu: v(self.z_mu),
            z_sigma: v(self.z_sigma),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BalancingNodes {
    pub omega: NodeId,
    pub gamma: NodeId,
    pub z: NodeId,
}

impl BalancingNodes {
    pub fn values(&self, g: &Graph) -> BalancingVariables {
        BalancingVariables {
            omega: g.value(self.omega).values().to_vec(),
            gamma: g.value(self.gamma).values().to_vec(),
            z: g.value(self.z).values().to_vec(),
        }
    }
}

/// Shapes and parameter layout of the inference network.
#[derive(Clone, Debug)]
pub struct InferenceNet {
    pub config: InferConfig,
    max_len: usize,
    d_emb: usize,
    num_tensors: usize,
}

impl InferenceNet {
    /// `num_tensors` is the number of model tensors the `γ` and `z` heads cover.
    pub fn new(config: InferConfig, max_len: usize, d_emb: usize, num_tensors: usize) -> Result<Self> {
        if max_len < 4 || d_emb < 4 {
            return Err(Error::Config(format!(
                "the encoder needs an embedding grid of at least 4x4, got {max_len}x{d_emb}"
            )));
        }
        if config.conv1_channels == 0 || config.conv2_channels == 0 || config.d_enc == 0 || config.d_set == 0 {
            return Err(Error::Config("inference network widths must be positive".into()));
        }
        if !(config.sigma_init > 0.0) {
            return Err(Error::Config("sigma_init must be positive".into()));
        }
        if num_tensors == 0 {
            return Err(Error::Config("no model tensors to balance".into()));
        }
        Ok(Self {
            config,
            max_len,
            d_emb,
            num_tensors,
        })
    }

    pub fn num_tensors(&self) -> usize {
        self.num_tensors
    }

    fn flat_dim(&self) -> usize {
        self.config.conv2_channels * (self.max_len / 4) * (self.d_emb / 4)
    }

    /// Width of a class encoding `s_c`.
    pub fn class_dim(&self) -> usize {
        2 * self.config.d_enc + 1
    }

    /// Width of the task encoding `v`.
    pub fn task_dim(&self) -> usize {
        2 * self.config.d_set + 1
    }

    /// Random NN1/NN2 weights; posterior heads start at zero weight with
    /// `μ = 0` and `σ = sigma_init`.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParameterSet {
        let c = &self.config;
        let mut p = ParameterSet::new();
        let mut he = |shape: &[usize], fan_in: usize| -> Tensor {
            let sd = math::sqrt(2.0 / fan_in as f64);
            let n: usize = shape.iter().product();
            let v = (0..n)
                .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            Tensor::from_parts(shape.to_vec(), v)
        };
        p.push("nn1.conv1.k", he(&[c.conv1_channels, 1, 3, 3], 9));
        p.push("nn1.conv1.b", Tensor::zeros(&[c.conv1_channels]));
        p.push(
            "nn1.conv2.k",
            he(&[c.conv2_channels, c.conv1_channels, 3, 3], 9 * c.conv1_channels),
        );
        p.push("nn1.conv2.b", Tensor::zeros(&[c.conv2_channels]));
        p.push("nn1.fc.w", he(&[self.flat_dim(), c.d_enc], self.flat_dim()));
        p.push("nn1.fc.b", Tensor::zeros(&[c.d_enc]));
        p.push("nn2.fc1.w", he(&[self.class_dim(), c.d_set], self.class_dim()));
        p.push("nn2.fc1.b", Tensor::zeros(&[c.d_set]));
        p.push("nn2.fc2.w", he(&[c.d_set, c.d_set], c.d_set));
        p.push("nn2.fc2.b", Tensor::zeros(&[c.d_set]));
        let raw0 = math::softplus_inv(c.sigma_init);
        let heads = [
            ("omega", self.class_dim(), 1),
            ("gamma", self.task_dim(), self.num_tensors),
            ("z", self.task_dim(), self.num_tensors),
        ];
        for (name, fan_in, out) in heads {
            p.push(format!("{name}.mu.w"), Tensor::zeros(&[fan_in, out]));
            p.push(format!("{name}.mu.b"), Tensor::zeros(&[out]));
            p.push(format!("{name}.sigma.w"), Tensor::zeros(&[fan_in, out]));
            p.push(format!("{name}.sigma.b"), Tensor::filled(&[out], raw0));
        }
        p
    }

    pub fn check_params(&self, psi: &ParameterSet) -> Result<()> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        self.init_params(&mut rng).check_compatible(psi)
    }

    fn node(psi: &ParameterSet, nodes: &[NodeId], name: &str) -> NodeId {
        nodes[psi.index_of(name).expect("inference parameter layout")]
    }

    /// NN1 over a batch of sentences: `[n, d_enc]`.
    pub fn encode_nodes(
        &self,
        g: &mut Graph,
        psi: &ParameterSet,
        nodes: &[NodeId],
        backbone: &Backbone,
        sentences: &[&Sentence],
    ) -> Result<NodeId> {
        if sentences.is_empty() {
            return Err(Error::EmptySet);
        }
        let (h, w) = (self.max_len, self.d_emb);
        if backbone.d_emb() != w {
            return Err(Error::Config(format!(
                "backbone embedding width {} does not match encoder width {w}",
                backbone.d_emb()
            )));
        }
        let mut grid = Vec::with_capacity(sentences.len() * h * w);
        for s in sentences {
            grid.extend_from_slice(backbone.sentence_embeddings(s, h)?.values());
        }
        let n = sentences.len();
        let x = g.constant(Tensor::new(vec![n, 1, h, w], grid)?);
        let p = |name: &str| Self::node(psi, nodes, name);
        let c1 = g.conv2d(x, p("nn1.conv1.k"), p("nn1.conv1.b"))?;
        let c1 = g.relu(c1);
        let c1 = g.max_pool2(c1)?;
        let c2 = g.conv2d(c1, p("nn1.conv2.k"), p("nn1.conv2.b"))?;
        let c2 = g.relu(c2);
        let c2 = g.max_pool2(c2)?;
        let flat = g.reshape(c2, &[n, self.flat_dim()])?;
        let fc = g.matmul(flat, p("nn1.fc.w"))?;
        g.add(fc, p("nn1.fc.b"))
    }

    /// NN1 encoding of a single sentence.
    pub fn encode_example(&self, psi: &ParameterSet, backbone: &Backbone, s: &Sentence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let nodes = psi.bind(&mut g);
        let out = self.encode_nodes(&mut g, psi, &nodes, backbone, &[s])?;
        Ok(g.value(out).values().to_vec())
    }

    /// Posterior over balancing variables from class-partitioned support sentences.
    pub fn posterior_nodes(
        &self,
        g: &mut Graph,
        psi: &ParameterSet,
        nodes: &[NodeId],
        backbone: &Backbone,
        support: [&[&Sentence]; NUM_CLASSES],
    ) -> Result<PosteriorNodes> {
        let p = |name: &str| Self::node(psi, nodes, name);
        let mut class_rows = Vec::with_capacity(NUM_CLASSES);
        let mut set_rows = Vec::with_capacity(NUM_CLASSES);
        for (c, sentences) in support.iter().enumerate() {
            if sentences.is_empty() {
                return Err(Error::EmptyClass(Style::from_index(c).label()));
            }
            let enc = self.encode_nodes(g, psi, nodes, backbone, sentences)?;
            let s_c = statistics_pooling(g, enc)?;
            let s_row = g.reshape(s_c, &[1, self.class_dim()])?;
            class_rows.push(s_row);
            let h = g.matmul(s_row, p("nn2.fc1.w"))?;
            let h = g.add(h, p("nn2.fc1.b"))?;
            let h = g.relu(h);
            let h = g.matmul(h, p("nn2.fc2.w"))?;
            set_rows.push(g.add(h, p("nn2.fc2.b"))?);
        }
        let classes = g.concat(&class_rows)?;
        let set = g.concat(&set_rows)?;
        let v = statistics_pooling(g, set)?;
        let v_row = g.reshape(v, &[1, self.task_dim()])?;

        let head = |g: &mut Graph, input: NodeId, name: &str, len: usize| -> Result<(NodeId, NodeId)> {
            let mu = g.matmul(input, p(&format!("{name}.mu.w")))?;
            let mu = g.add(mu, p(&format!("{name}.mu.b")))?;
            let raw = g.matmul(input, p(&format!("{name}.sigma.w")))?;
            let raw = g.add(raw, p(&format!("{name}.sigma.b")))?;
            let mu = g.reshape(mu, &[len])?;
            let raw = g.reshape(raw, &[len])?;
            Ok((mu, g.softplus(raw)))
        };
        let (omega_mu, omega_sigma) = head(g, classes, "omega", NUM_CLASSES)?;
        let (gamma_mu, gamma_sigma) = head(g, v_row, "gamma", self.num_tensors)?;
        let (z_mu, z_sigma) = head(g, v_row, "z", self.num_tensors)?;
        Ok(PosteriorNodes {
            omega_mu,
            omega_sigma,
            gamma_mu,
            gamma_sigma,
            z_mu,
            z_sigma,
        })
    }

    pub fn posterior(
        &self,
        psi: &ParameterSet,
        backbone: &Backbone,
        support: [&[&Sentence]; NUM_CLASSES],
    ) -> Result<GaussianPosterior> {
        let mut g = Graph::new();
        let nodes = psi.bind(&mut g);
        let post = self.posterior_nodes(&mut g, psi, &nodes, backbone, support)?;
        Ok(post.values(&g))
    }
}

/// Reparameterized balancing sample as graph nodes, differentiable in the
/// posterior parameters for fixed `noise`.
pub fn balancing_nodes(g: &mut Graph, post: &PosteriorNodes, noise: &Noise) -> Result<BalancingNodes> {
    let draw = |g: &mut Graph, mu: NodeId, sd: NodeId, eps: &[f64]| -> Result<NodeId> {
        let e = g.constant(Tensor::vector(eps.to_vec()));
        let scaled = g.mul(sd, e)?;
        g.add(mu, scaled)
    };
    let go = draw(g, post.omega_mu, post.omega_sigma, &noise.omega)?;
    let gg = draw(g, post.gamma_mu, post.gamma_sigma, &noise.gamma)?;
    let gz = draw(g, post.z_mu, post.z_sigma, &noise.z)?;
    Ok(BalancingNodes {
        omega: g.sigmoid(go),
        gamma: g.exp(gg),
        z: g.exp(gz),
    })
}

/// `KL(q || N(0, I))` as a graph node.
pub fn kl_node(g: &mut Graph, post: &PosteriorNodes) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (mu, sd) in [
        (post.omega_mu, post.omega_sigma),
        (post.gamma_mu, post.gamma_sigma),
        (post.z_mu, post.z_sigma),
    ] {
        let n = g.value(mu).len() as f64;
        let mu2 = g.mul(mu, mu)?;
        let sd2 = g.mul(sd, sd)?;
        let log_sd = g.log(sd)?;
        let log_sd2 = g.scale(log_sd, 2.0);
        let a = g.add(mu2, sd2)?;
        let b = g.sub(a, log_sd2)?;
        let s = g.sum(b);
        let s = g.add_scalar(s, -n);
        let term = g.scale(s, 0.5);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("three groups"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn post1(mu: f64, sd: f64) -> GaussianPosterior {
        GaussianPosterior {
            omega_mu: vec![mu],
            omega_sigma: vec![sd],
            gamma_mu: vec![],
            gamma_sigma: vec![],
            z_mu: vec![],
            z_sigma: vec![],
        }
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(post1(0.0, 1.0).kl_to_prior(), 0.0);
        assert!((post1(1.0, 1.0).kl_to_prior() - 0.5).abs() < 1e-15);
        let expected = 0.5 * (4.0 - 1.0 - libm::log(4.0));
        assert!((post1(0.0, 2.0).kl_to_prior() - expected).abs() < 1e-15);
        assert!((expected - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn pooling_hand_values() {
        let out = pool_vectors(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(&out[..4], &[2.0, 4.0, 1.0, 1.0]);
        assert!((out[4] - libm::log(3.0)).abs() < 1e-15);
        let single = pool_vectors(&[vec![0.5, -2.0]]).unwrap();
        assert_eq!(&single[..4], &[0.5, -2.0, 0.0, 0.0]);
        assert!((single[4] - core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(pool_vectors(&[]).unwrap_err(), Error::EmptySet);
    }

    #[test]
    fn identity_element() {
        let p = GaussianPosterior {
            omega_mu: vec![0.0; 2],
            omega_sigma: vec![1e-300; 2],
            gamma_mu: vec![0.0, libm::log(2.0)],
            gamma_sigma: vec![1e-300; 2],
            z_mu: vec![0.0; 2],
            z_sigma: vec![1e-300; 2],
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let b = p.sample(&mut rng);
        assert_eq!(b.omega, vec![0.5, 0.5]);
        assert_eq!(b.gamma[0], 1.0);
        assert!((b.gamma[1] - 2.0).abs() < 1e-15);
        assert_eq!(b.z, vec![1.0, 1.0]);
    }

    #[test]
    fn small_grid_rejected() {
        assert!(InferenceNet::new(InferConfig::default(), 3, 8, 4).is_err());
        assert!(InferenceNet::new(InferConfig::default(), 12, 8, 4).is_ok());
    }

    #[test]
    fn heads_start_at_sigma_init() {
        let cfg = ModelConfig::default();
        let bb = Backbone::new(&cfg, 1).unwrap();
        let net = InferenceNet::new(InferConfig::default(), cfg.max_len, cfg.d_emb, cfg.num_tensors()).unwrap();
        let psi = net.init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2));
        let a = Sentence::new(vec![4, 16, 5], Style::A);
        let b = Sentence::new(vec![6, 20], Style::B);
        let post = net.posterior(&psi, &bb, [&[&a], &[&b]]).unwrap();
        assert!(post.omega_mu.iter().chain(&post.gamma_mu).all(|&m| m == 0.0));
        for s in post.omega_sigma.iter().chain(&post.gamma_sigma).chain(&post.z_sigma) {
            assert!((s - 0.05).abs() < 1e-12);
        }
        assert_eq!(post.gamma_mu.len(), cfg.num_tensors());
        let err = net.posterior(&psi, &bb, [&[&a], &[]]).unwrap_err();
        assert_eq!(err, Error::EmptyClass(2));
    }
}
