//! Multi-level prompt signal and the semantic KL regularizer.
//!
//! The textual prior `p(γ)` is a diagonal Gaussian read off the mean-pooled
//! fused text states; the visual distribution `p(β)` is a diagonal Gaussian
//! read off the whole-image embedding. The semantic loss is `KL(p(γ) ‖ p(β))`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::encoders::FeatureMap;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Per-level `1x1` projections from backbone channels to the text width.
#[derive(Clone, Debug)]
pub struct PromptProjector {
    levels: Vec<Linear>,
    d_model: usize,
}

impl PromptProjector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, level_channels: &[usize], d_model: usize, rng: &mut R) -> Self {
        let levels = level_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| Linear::new(store, &format!("prompt.level{l}"), c, d_model, rng))
            .collect();
        PromptProjector { levels, d_model }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Average-pools each level over the objects and their spatial extent, then
    /// projects it to `1 x d_model`. Input is indexed `[object][level]`.
    pub fn build_prompt_signal(&self, g: &mut Graph, objects: &[Vec<FeatureMap>]) -> Result<Vec<Var>> {
        if objects.is_empty() {
            return Err(shape_err!("prompt signal needs at least one object"));
        }
        for o in objects {
            if o.len() != self.levels.len() {
                return Err(shape_err!("object has {} feature levels, expected {}", o.len(), self.levels.len()));
            }
        }
        let mut out = Vec::with_capacity(self.levels.len());
        for (l, proj) in self.levels.iter().enumerate() {
            let shape = g.shape(objects[0][l].var);
            if objects.iter().any(|o| g.shape(o[l].var) != shape) {
                return Err(shape_err!("objects disagree on level {l} feature shape"));
            }
            let parts: Vec<Var> = objects.iter().map(|o| o[l].var).collect();
            let stacked = g.concat_rows(&parts);
            let pooled = g.mean_rows(stacked);
            out.push(proj.forward(g, pooled));
        }
        debug_assert!(out.iter().all(|&v| g.shape(v) == (1, self.d_model)));
        Ok(out)
    }
}

/// Diagonal Gaussian parameters as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianParams {
    pub fn standard(k: usize) -> Self {
        GaussianParams {
            mean: vec![0.0; k],
            logvar: vec![0.0; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self) -> Result<()> {
        if self.mean.len() != self.logvar.len() {
            return Err(shape_err!("mean has {} entries, logvar {}", self.mean.len(), self.logvar.len()));
        }
        if self.mean.iter().chain(&self.logvar).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian parameters".into()));
        }
        Ok(())
    }
}

/// Closed-form `KL(p ‖ q)` between diagonal Gaussians.
pub fn kl_divergence(p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    p.check()?;
    q.check()?;
    if p.dim() != q.dim() {
        return Err(shape_err!("KL between dimensions {} and {}", p.dim(), q.dim()));
    }
    let mut kl = 0.0;
    for i in 0..p.dim() {
        let d = p.mean[i] - q.mean[i];
        kl += q.logvar[i] - p.logvar[i] + ((p.logvar[i] - q.logvar[i]).exp() + d * d * (-q.logvar[i]).exp()) - 1.0;
    }
    Ok(0.5 * kl)
}

/// Gaussian parameters living in a graph, each `1 x k`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub logvar: Var,
}

impl GaussianVars {
    pub fn to_params(&self, g: &Graph) -> GaussianParams {
        GaussianParams {
            mean: g.value(self.mean).data().to_vec(),
            logvar: g.value(self.logvar).data().to_vec(),
        }
    }
}

/// Linear map to `(mean, logvar)` with the log-variance clamped to `[-10, 10]`.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    linear: Linear,
    latent_dim: usize,
}

impl GaussianHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input_dim: usize, latent_dim: usize, rng: &mut R) -> Self {
        GaussianHead {
            linear: Linear::new(store, name, input_dim, 2 * latent_dim, rng),
            latent_dim,
        }
    }

    pub fn linear(&self) -> Linear {
        self.linear
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> GaussianVars {
        let out = self.linear.forward(g, x);
        let k = self.latent_dim;
        let mean = g.slice_cols(out, 0, k);
        let raw = g.slice_cols(out, k, 2 * k);
        let logvar = g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
        GaussianVars { mean, logvar }
    }
}

/// `p(γ)`: mean-pool the word states, then the prior head.
pub fn textual_prior(g: &mut Graph, head: &GaussianHead, states: Var) -> Result<GaussianVars> {
    if g.shape(states).0 == 0 {
        return Err(invalid!("textual prior of an empty sequence"));
    }
    let pooled = g.mean_rows(states);
    Ok(head.forward(g, pooled))
}

/// `p(β)` from the whole-image embedding.
pub fn visual_posterior(g: &mut Graph, head: &GaussianHead, image_embedding: Var) -> Result<GaussianVars> {
    if g.shape(image_embedding).0 != 1 {
        return Err(shape_err!("image embedding must be a single row, got {:?}", g.shape(image_embedding)));
    }
    Ok(head.forward(g, image_embedding))
}

/// Differentiable `KL(p_gamma ‖ p_beta)` as a `1 x 1` node.
pub fn semantic_loss(g: &mut Graph, p_gamma: &GaussianVars, p_beta: &GaussianVars) -> Result<Var> {
    let shapes = [p_gamma.mean, p_gamma.logvar, p_beta.mean, p_beta.logvar].map(|v| g.shape(v));
    if shapes.iter().any(|&s| s != shapes[0] || s.0 != 1) {
        return Err(shape_err!("semantic loss parameter shapes disagree: {shapes:?}"));
    }
    for v in [p_gamma.mean, p_gamma.logvar, p_beta.mean, p_beta.logvar] {
        if !g.value(v).is_finite() {
            return Err(Error::NonFinite("semantic loss input".into()));
        }
    }
    let lv_diff = g.sub(p_gamma.logvar, p_beta.logvar);
    let var_ratio = g.exp(lv_diff);
    let d = g.sub(p_gamma.mean, p_beta.mean);
    let d2 = g.mul(d, d);
    let neg_lv_beta = g.scale(p_beta.logvar, -1.0);
    let inv_var_beta = g.exp(neg_lv_beta);
    let maha = g.mul(d2, inv_var_beta);
    let neg_lv_diff = g.scale(lv_diff, -1.0);
    let terms = g.add_n(&[neg_lv_diff, var_ratio, maha]);
    let terms = g.add_scalar(terms, -1.0);
    let sum = g.sum_all(terms);
    Ok(g.scale(sum, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_params(k: usize, rng: &mut ChaCha8Rng) -> GaussianParams {
        GaussianParams {
            mean: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            logvar: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn kl_identity_and_shifted_unit_gaussian() {
        let p = GaussianParams {
            mean: vec![1.0],
            logvar: vec![0.0],
        };
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let q = GaussianParams::standard(1);
        assert!((kl_divergence(&p, &q).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_errors() {
        let p = GaussianParams::standard(2);
        assert!(kl_divergence(&p, &GaussianParams::standard(3)).is_err());
        let bad = GaussianParams {
            mean: vec![f64::NAN, 0.0],
            logvar: vec![0.0, 0.0],
        };
        assert!(matches!(kl_divergence(&bad, &p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_params(8, &mut rng);
        let q = random_params(8, &mut rng);
        let closed = kl_divergence(&p, &q).unwrap();
        let log_density = |g: &GaussianParams, x: &[f64]| -> f64 {
            x.iter()
                .enumerate()
                .map(|(i, &xi)| {
                    let var = g.logvar[i].exp();
                    -0.5 * ((2.0 * std::f64::consts::PI).ln() + g.logvar[i] + (xi - g.mean[i]).powi(2) / var)
                })
                .sum()
        };
        let n = 200_000;
        let mut acc = 0.0;
        let mut x = vec![0.0; 8];
        for _ in 0..n {
            for i in 0..8 {
                let z: f64 = StandardNormal.sample(&mut rng);
                x[i] = p.mean[i] + (0.5 * p.logvar[i]).exp() * z;
            }
            acc += log_density(&p, &x) - log_density(&q, &x);
        }
        assert!((acc / n as f64 - closed).abs() < 2e-2, "mc {} closed {closed}", acc / n as f64);
    }

    #[test]
    fn graph_kl_matches_closed_form_and_its_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = random_params(5, &mut rng);
        let q = random_params(5, &mut rng);
        let build = |p: &GaussianParams, q: &GaussianParams| {
            let store = ParamStore::new();
            let mut g = Graph::new(&store);
            let vars = [&p.mean, &p.logvar, &q.mean, &q.logvar].map(|v| g.input(Tensor::row_vector(v.clone())));
            let a = GaussianVars { mean: vars[0], logvar: vars[1] };
            let b = GaussianVars { mean: vars[2], logvar: vars[3] };
            let loss = semantic_loss(&mut g, &a, &b).unwrap();
            let grads = g.backward(loss);
            let gs: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(v).unwrap().data().to_vec()).collect();
            (g.scalar(loss), gs)
        };
        let (value, grads) = build(&p, &q);
        assert!((value - kl_divergence(&p, &q).unwrap()).abs() < 1e-12);
        let h = 1e-5;
        for which in 0..4 {
            for i in 0..5 {
                let perturb = |s: f64| {
                    let (mut p2, mut q2) = (p.clone(), q.clone());
                    let slot = match which {
                        0 => &mut p2.mean,
                        1 => &mut p2.logvar,
                        2 => &mut q2.mean,
                        _ => &mut q2.logvar,
                    };
                    slot[i] += s;
                    kl_divergence(&p2, &q2).unwrap()
                };
                let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
                let a = grads[which][i];
                assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6) < 1e-4);
            }
        }
    }

    #[test]
    fn prompt_signal_pools_and_projects() {
        let mut store = ParamStore::new();
        let proj = PromptProjector::new(&mut store, &[3, 4], 6, &mut ChaCha8Rng::seed_from_u64(23));
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut g = Graph::new(&store);
        let level = |g: &mut Graph, rows: usize, cols: usize, rng: &mut ChaCha8Rng| FeatureMap {
            var: g.input(Tensor::uniform(rows, cols, 1.0, rng)),
            height: 1,
            width: rows,
        };
        let a = vec![level(&mut g, 4, 3, &mut rng), level(&mut g, 2, 4, &mut rng)];
        let b = vec![level(&mut g, 4, 3, &mut rng), level(&mut g, 2, 4, &mut rng)];
        let c = vec![level(&mut g, 4, 3, &mut rng), level(&mut g, 2, 4, &mut rng)];

        let r = proj.build_prompt_signal(&mut g, &[a.clone(), b.clone(), c.clone()]).unwrap();
        assert_eq!(r.iter().map(|&v| g.shape(v)).collect::<Vec<_>>(), vec![(1, 6), (1, 6)]);

        let permuted = proj.build_prompt_signal(&mut g, &[c.clone(), a.clone(), b]).unwrap();
        for l in 0..2 {
            assert!(g.value(r[l]).max_abs_diff(g.value(permuted[l])) < 1e-12);
        }

        // identical stacks pool to a single stack's spatial mean
        let same = proj.build_prompt_signal(&mut g, &[a.clone(), a.clone(), a.clone()]).unwrap();
        let single = {
            let m = g.mean_rows(a[0].var);
            proj.levels[0].forward(&mut g, m)
        };
        assert!(g.value(same[0]).max_abs_diff(g.value(single)) < 1e-12);

        assert!(proj.build_prompt_signal(&mut g, &[vec![a[0]]]).is_err());
    }

    #[test]
    fn zero_features_and_bias_give_zero_prompt() {
        let mut store = ParamStore::new();
        let proj = PromptProjector::new(&mut store, &[3], 4, &mut ChaCha8Rng::seed_from_u64(25));
        let mut g = Graph::new(&store);
        let objs: Vec<Vec<FeatureMap>> = (0..3)
            .map(|_| {
                vec![FeatureMap {
                    var: g.input(Tensor::zeros(4, 3)),
                    height: 2,
                    width: 2,
                }]
            })
            .collect();
        let r = proj.build_prompt_signal(&mut g, &objs).unwrap();
        assert!(g.value(r[0]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prior_and_posterior_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let psi = GaussianHead::new(&mut store, "psi", 4, 3, &mut rng);
        let phi = GaussianHead::new(&mut store, "phi", 5, 3, &mut rng);
        let zero_store = {
            let mut s = store.clone();
            for id in s.ids().collect::<Vec<_>>() {
                s.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            s
        };
        {
            let mut g = Graph::new(&zero_store);
            let m = g.input(Tensor::zeros(3, 4));
            let p = textual_prior(&mut g, &psi, m).unwrap().to_params(&g);
            assert_eq!(p, GaussianParams::standard(3));
            let e = g.input(Tensor::zeros(1, 5));
            assert_eq!(visual_posterior(&mut g, &phi, e).unwrap().to_params(&g), GaussianParams::standard(3));
        }
        let mut g = Graph::new(&store);
        let row = Tensor::uniform(1, 4, 1.0, &mut rng);
        let one = g.input(row.clone());
        let direct = psi.forward(&mut g, one).to_params(&g);
        let m = g.input(row);
        assert_eq!(textual_prior(&mut g, &psi, m).unwrap().to_params(&g), direct);

        let e1 = g.input(Tensor::uniform(1, 5, 1.0, &mut rng));
        let e2 = g.input(Tensor::uniform(1, 5, 1.0, &mut rng));
        let a = visual_posterior(&mut g, &phi, e1).unwrap().to_params(&g);
        let b = visual_posterior(&mut g, &phi, e2).unwrap().to_params(&g);
        assert_ne!(a, b);

        let empty = g.input(Tensor::zeros(0, 4));
        assert!(textual_prior(&mut g, &psi, empty).is_err());
        let two_rows = g.input(Tensor::zeros(2, 5));
        assert!(visual_posterior(&mut g, &phi, two_rows).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn logvar_stays_clamped(xs in proptest::collection::vec(-1e3f64..1e3, 4), seed in 0u64..1000) {
                let mut store = ParamStore::new();
                let head = GaussianHead::new(&mut store, "h", 4, 3, &mut ChaCha8Rng::seed_from_u64(seed));
                let mut g = Graph::new(&store);
                let x = g.input(Tensor::row_vector(xs));
                let p = head.forward(&mut g, x).to_params(&g);
                prop_assert!(p.logvar.iter().all(|v| v.is_finite() && v.abs() <= 10.0));
                prop_assert!(p.mean.iter().all(|v| v.is_finite()));
            }

            #[test]
            fn kl_is_nonnegative_and_zero_only_on_equal(
                m1 in proptest::collection::vec(-3f64..3.0, 6),
                l1 in proptest::collection::vec(-3f64..3.0, 6),
                m2 in proptest::collection::vec(-3f64..3.0, 6),
                l2 in proptest::collection::vec(-3f64..3.0, 6),
            ) {
                let p = GaussianParams { mean: m1, logvar: l1 };
                let q = GaussianParams { mean: m2, logvar: l2 };
                let kl = kl_divergence(&p, &q).unwrap();
                prop_assert!(kl >= 0.0);
                prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
                let gap = p.mean.iter().chain(&p.logvar).zip(q.mean.iter().chain(&q.logvar))
                    .map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if gap > 1e-3 {
                    prop_assert!(kl > 1e-12);
                }
            }
        }
    }
}
