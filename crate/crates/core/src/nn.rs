//! Layer bundles: parameter registration plus graph application.
//!
//! Each layer owns [`ParamId`]s registered under a dotted name prefix and
//! applies itself to a [`Graph`] through a [`Fwd`] context, which decides
//! whether parameters enter the graph as trainable nodes or frozen constants
//! (frozen networks contribute values but route no gradients).

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::dtype::Scalar;
use crate::rng::SeedRng;
use crate::Result;
use ndarray::{ArrayD, IxDyn};

/// Weight-initialization spread for conv/linear layers.
pub const INIT_STD: f64 = 0.02;

/// Negative slope used by every leaky rectifier in the models.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Forward-pass context: graph under construction, parameter source, and
/// whether this network's parameters are frozen for the current objective.
pub struct Fwd<'a, S: Scalar> {
    pub graph: &'a mut Graph<S>,
    pub store: &'a ParamStore<S>,
    pub frozen: bool,
}

impl<'a, S: Scalar> Fwd<'a, S> {
    pub fn new(graph: &'a mut Graph<S>, store: &'a ParamStore<S>) -> Self {
        Fwd { graph, store, frozen: false }
    }

    pub fn frozen(graph: &'a mut Graph<S>, store: &'a ParamStore<S>) -> Self {
        Fwd { graph, store, frozen: true }
    }

    /// Parameter node respecting the frozen flag.
    pub fn param(&mut self, pid: ParamId) -> NodeId {
        if self.frozen {
            self.graph.param_frozen(self.store, pid)
        } else {
            self.graph.param(self.store, pid)
        }
    }
}

fn normal_tensor<S: Scalar>(rng: &mut SeedRng, shape: &[usize], std: f64) -> ArrayD<S> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| S::from_f64(rng.normal() * std))
}

// ── Convolution ────────────────────────────────────────────────────────────

/// 2D convolution with bias; weights N(0, 0.02), bias zero.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let w = store.register(
            format!("{name}.w"),
            normal_tensor(rng, &[out_ch, in_ch, k, k], INIT_STD),
        )?;
        let b = store.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_ch])))?;
        Ok(Conv2dLayer { w, b, stride, pad })
    }

    pub fn apply<S: Scalar>(&self, fwd: &mut Fwd<S>, x: NodeId) -> NodeId {
        let w = fwd.param(self.w);
        let b = fwd.param(self.b);
        fwd.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

// ── Fully connected ────────────────────────────────────────────────────────

/// Dense layer; weights N(0, 0.02) (or zero for modulation heads), bias zero.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        name: &str,
        in_f: usize,
        out_f: usize,
    ) -> Result<Self> {
        let w = store.register(format!("{name}.w"), normal_tensor(rng, &[out_f, in_f], INIT_STD))?;
        let b = store.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_f])))?;
        Ok(LinearLayer { w, b })
    }

    /// Zero-initialized variant: output is identically zero until trained.
    pub fn new_zero<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_f: usize,
        out_f: usize,
    ) -> Result<Self> {
        let w = store.register(format!("{name}.w"), ArrayD::zeros(IxDyn(&[out_f, in_f])))?;
        let b = store.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_f])))?;
        Ok(LinearLayer { w, b })
    }

    pub fn apply<S: Scalar>(&self, fwd: &mut Fwd<S>, x: NodeId) -> NodeId {
        let w = fwd.param(self.w);
        let b = fwd.param(self.b);
        fwd.graph.linear(x, w, b)
    }
}

// ── Feature-wise modulation ────────────────────────────────────────────────

/// Conditioning site: two zero-initialized heads predict per-channel
/// (gamma, beta) from the conditioning vector, applied as x·(1+γ)+β.
/// Zero init makes every site start as the identity.
#[derive(Debug, Clone)]
pub struct FilmSite {
    pub gamma: LinearLayer,
    pub beta: LinearLayer,
}

impl FilmSite {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cond_dim: usize,
        channels: usize,
    ) -> Result<Self> {
        Ok(FilmSite {
            gamma: LinearLayer::new_zero(store, &format!("{name}.gamma"), cond_dim, channels)?,
            beta: LinearLayer::new_zero(store, &format!("{name}.beta"), cond_dim, channels)?,
        })
    }

    /// `cond` is (N, cond_dim); x is (N, C, H, W).
    pub fn apply<S: Scalar>(&self, fwd: &mut Fwd<S>, x: NodeId, cond: NodeId) -> NodeId {
        let gamma = self.gamma.apply(fwd, cond);
        let beta = self.beta.apply(fwd, cond);
        fwd.graph.film(x, gamma, beta)
    }
}

// ── Time embedding ─────────────────────────────────────────────────────────

/// Sinusoidal position encoding of a step index: interleaved
/// (sin, cos) pairs over geometrically spaced frequencies. `dim` must be even.
pub fn sinusoidal_embedding<S: Scalar>(t: f64, dim: usize) -> ArrayD<S> {
    assert!(dim % 2 == 0, "embedding dimension must be even");
    let mut out = ArrayD::zeros(IxDyn(&[1, dim]));
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(2.0 * i as f64) / dim as f64);
        out[[0, 2 * i]] = S::from_f64((t * freq).sin());
        out[[0, 2 * i + 1]] = S::from_f64((t * freq).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, SeedRng};

    #[test]
    fn film_sites_start_as_identity() {
        let mut store = ParamStore::<f64>::new();
        let site = FilmSite::new(&mut store, "site", 8, 3).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |ix| {
            ix[0] as f64 + ix[1] as f64 * 0.3 - ix[2] as f64 * 0.1
        }));
        let cond = g.leaf(ArrayD::from_elem(IxDyn(&[2, 8]), 0.7));
        let mut fwd = Fwd { graph: &mut g, store: &store, frozen: false };
        let out = site.apply(&mut fwd, x, cond);
        let diff = g.sub(out, x);
        let m = g.abs(diff);
        let m = g.mean(m);
        assert_eq!(g.scalar(m), 0.0);
    }

    #[test]
    fn conv_layer_init_spread_is_small() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SeedRng::new(3, stream::MODEL_INIT);
        let layer = Conv2dLayer::new(&mut store, &mut rng, "c", 4, 8, 3, 1, 1).unwrap();
        let w = store.value(layer.w);
        let max = w.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
        assert!(max < 0.15, "init weight too large: {max}");
        assert!(store.value(layer.b).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sinusoidal_embedding_structure() {
        let e = sinusoidal_embedding::<f64>(0.0, 8);
        for i in 0..4 {
            assert_eq!(e[[0, 2 * i]], 0.0);
            assert_eq!(e[[0, 2 * i + 1]], 1.0);
        }
        let e1 = sinusoidal_embedding::<f64>(1.0, 8);
        let e2 = sinusoidal_embedding::<f64>(2.0, 8);
        assert!(e1.iter().zip(e2.iter()).any(|(a, b)| (a - b).abs() > 1e-3));
        assert!(e1.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn frozen_context_blocks_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::new(4, stream::MODEL_INIT);
        let layer = LinearLayer::new(&mut store, &mut rng, "lin", 3, 2).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1, 3]), 0.5));
        let mut fwd = Fwd::frozen(&mut g, &store);
        let out = layer.apply(&mut fwd, x);
        let sq = g.square(out);
        let loss = g.mean(sq);
        g.backward(loss, &mut store);
        assert!(store.grad(layer.w).iter().all(|&v| v == 0.0));
    }
}
