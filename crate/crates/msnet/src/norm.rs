//! Batch normalization and its per-site variant.
//!
//! A [`BnState`] owns the trainable affine pair and the running
//! statistics of one normalization layer. A [`DsbnState`] holds one
//! `BnState` per data site and routes each forward pass by site id, so
//! that every site normalizes with its own statistics while all
//! convolution kernels around the layer stay shared.

use serde::{Deserialize, Serialize};

use crate::engine::{BatchStats, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// 1-based site identifier (`1..=S`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId(pub usize);

impl SiteId {
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl std::fmt::Display for SiteId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine parameters plus running statistics for one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
    /// Number of running-statistics updates applied so far; zero means the
    /// statistics still hold their initialization values.
    pub updates: u64,
}

impl BnState {
    /// Identity transform at start: gamma 1, beta 0, mean 0, var 1.
    pub fn new(channels: usize) -> Self {
        BnState {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Fold one batch's (biased) statistics into the running values.
    pub fn commit(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
        self.updates += 1;
    }
}

/// One `BnState` per site, all sharing channel count and epsilon.
#[derive(Clone, Debug, PartialEq)]
pub struct DsbnState {
    per_site: Vec<BnState>,
}

impl DsbnState {
    pub fn new(num_sites: usize, channels: usize) -> Self {
        DsbnState { per_site: (0..num_sites).map(|_| BnState::new(channels)).collect() }
    }

    pub fn num_sites(&self) -> usize {
        self.per_site.len()
    }

    pub fn channels(&self) -> usize {
        self.per_site[0].channels()
    }

    pub fn site(&self, site: SiteId) -> Result<&BnState> {
        self.per_site
            .get(site.0.wrapping_sub(1))
            .ok_or(Error::UnknownSite { site: site.0, num_sites: self.per_site.len() })
    }

    pub fn site_mut(&mut self, site: SiteId) -> Result<&mut BnState> {
        let n = self.per_site.len();
        self.per_site
            .get_mut(site.0.wrapping_sub(1))
            .ok_or(Error::UnknownSite { site: site.0, num_sites: n })
    }

    pub fn states(&self) -> &[BnState] {
        &self.per_site
    }

    pub fn states_mut(&mut self) -> &mut [BnState] {
        &mut self.per_site
    }
}

/// One batch's statistics tagged with the normalization layer they came
/// from and the site that produced them, for a deferred running-stat
/// commit after parallel per-site forwards.
#[derive(Clone, Debug)]
pub struct BatchStatsUpdate {
    pub layer: String,
    pub site: SiteId,
    pub stats: BatchStats,
}

/// Result of one normalization forward: the output node, the graph nodes
/// holding the affine parameters (so callers can read their gradients),
/// and the batch statistics when batch-statistics math was used.
#[derive(Clone, Debug)]
pub struct BnForward {
    pub out: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
    pub stats: Option<BatchStats>,
}

/// Training-mode forward over batch statistics, without touching the
/// running statistics; the caller decides when to commit `stats`.
pub fn bn_forward_batch(g: &mut Graph, x: NodeId, state: &BnState) -> Result<BnForward> {
    let gamma = g.leaf(state.gamma.clone());
    let beta = g.leaf(state.beta.clone());
    let (out, stats) = g.batch_norm_train(x, gamma, beta, state.epsilon)?;
    Ok(BnForward { out, gamma, beta, stats: Some(stats) })
}

/// Training-mode forward: normalizes with batch statistics and folds them
/// into the running mean/variance.
pub fn bn_forward_train(g: &mut Graph, x: NodeId, state: &mut BnState) -> Result<BnForward> {
    let fwd = bn_forward_batch(g, x, state)?;
    state.commit(fwd.stats.as_ref().expect("batch stats present"));
    Ok(fwd)
}

/// Inference-mode forward using the collected running statistics. Never
/// mutates the state.
pub fn bn_forward_eval(g: &mut Graph, x: NodeId, state: &BnState) -> Result<BnForward> {
    let gamma = g.leaf(state.gamma.clone());
    let beta = g.leaf(state.beta.clone());
    let out =
        g.batch_norm_eval(x, gamma, beta, &state.running_mean, &state.running_var, state.epsilon)?;
    Ok(BnForward { out, gamma, beta, stats: None })
}

/// Site-routed forward: delegates to the site's own `BnState`; all other
/// sites' parameters and statistics are untouched.
pub fn dsbn_forward(
    g: &mut Graph,
    x: NodeId,
    site: SiteId,
    state: &mut DsbnState,
    mode: Mode,
) -> Result<BnForward> {
    match mode {
        Mode::Train => bn_forward_train(g, x, state.site_mut(site)?),
        Mode::Eval => bn_forward_eval(g, x, state.site(site)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn forward_values(state: &mut BnState, data: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.leaf(data.clone());
        let y = bn_forward_train(&mut g, x, state).unwrap().out;
        g.value(y).data().to_vec()
    }

    #[test]
    fn matches_scalar_hand_oracle() {
        // Channel values [1,2,3,4]: mean 2.5, biased variance 1.25,
        // output (x - 2.5) / sqrt(1.25 + eps).
        let mut state = BnState::new(1);
        let x = Tensor::from_vec(&[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = forward_values(&mut state, &x);
        let inv = 1.0 / (1.25f64 + DEFAULT_EPSILON).sqrt();
        for (o, v) in out.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((o - (v - 2.5) * inv).abs() < 1e-12, "got {o}");
        }
        // Frozen reference values.
        assert!((out[0] - (-1.341635419968927)).abs() < 1e-12);
        assert!((out[1] - (-0.447211806656309)).abs() < 1e-12);
        // Batch statistics fold into the running values once.
        assert_eq!(state.updates, 1);
        assert!((state.running_mean[0] - 0.01 * 2.5).abs() < 1e-15);
        assert!((state.running_var[0] - (0.99 + 0.01 * 1.25)).abs() < 1e-15);
    }

    #[test]
    fn constant_channel_returns_beta() {
        let mut state = BnState::new(1);
        state.beta = Tensor::full(&[1], 7.0);
        let x = Tensor::full(&[2, 1, 2, 2], 3.0);
        let out = forward_values(&mut state, &x);
        assert!(out.iter().all(|v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn degenerate_batch_is_rejected() {
        let mut state = BnState::new(2);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(matches!(
            bn_forward_train(&mut g, x, &mut state),
            Err(Error::DegenerateBatch { count: 1 })
        ));
    }

    #[test]
    fn eval_uses_initial_identity_stats() {
        let state = BnState::new(1);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 1, 2], vec![2.0, -4.0]).unwrap());
        let y = bn_forward_eval(&mut g, x, &state).unwrap().out;
        let scale = 1.0 / (1.0f64 + DEFAULT_EPSILON).sqrt();
        assert!((g.value(y).data()[0] - 2.0 * scale).abs() < 1e-15);
        assert!((g.value(y).data()[1] - -4.0 * scale).abs() < 1e-15);
    }

    #[test]
    fn eval_never_mutates_state() {
        let mut state = BnState::new(2);
        let x = Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        forward_values(&mut state, &x);
        let before = state.clone();
        let mut g = Graph::new();
        let xn = g.leaf(x);
        bn_forward_eval(&mut g, xn, &state).unwrap();
        assert_eq!(state, before);
    }

    #[test]
    fn training_output_is_batch_whitened() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, c, h, w) = (4, 3, 5, 5);
        let x = Tensor::from_vec(
            &[b, c, h, w],
            (0..b * c * h * w).map(|_| rng.random_range(-3.0..7.0)).collect(),
        )
        .unwrap();
        let mut state = BnState::new(c);
        let out = forward_values(&mut state, &x);
        let hw = h * w;
        let n = (b * hw) as f64;
        for ch in 0..c {
            let mut mean = 0.0;
            for bi in 0..b {
                mean += out[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().sum::<f64>();
            }
            mean /= n;
            assert!(mean.abs() < 1e-10, "channel {ch} mean {mean}");
            let mut var = 0.0;
            for bi in 0..b {
                var += out[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= n;
            // Output variance is var/(var+eps), slightly below 1.
            let batch_var = state.running_var[ch] - 0.99; // recover committed batch var
            let expected = (batch_var / 0.01) / (batch_var / 0.01 + DEFAULT_EPSILON);
            assert!((var - expected).abs() < 1e-6, "channel {ch} var {var} vs {expected}");
        }
    }

    #[test]
    fn running_stats_track_stationary_distribution() {
        // 500 batches from a fixed distribution: eval output on a large
        // fresh batch becomes approximately centered.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut state = BnState::new(1);
        for _ in 0..500 {
            let x = Tensor::from_vec(&[8, 1, 2, 2], (0..32).map(|_| 3.0 + rng.random_range(-2.0..2.0)).collect())
                .unwrap();
            let mut g = Graph::new();
            let xn = g.leaf(x);
            bn_forward_train(&mut g, xn, &mut state).unwrap();
        }
        let n = 2000;
        let x = Tensor::from_vec(&[125, 1, 4, 4], (0..n).map(|_| 3.0 + rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let y = bn_forward_eval(&mut g, xn, &state).unwrap().out;
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.1, "eval mean {mean}");
    }

    #[test]
    fn dsbn_single_site_equals_plain_bn_bitwise() {
        let x = Tensor::from_vec(&[2, 2, 2, 2], (0..16).map(|i| i as f64 * 0.37).collect()).unwrap();
        let mut plain = BnState::new(2);
        let mut dsbn = DsbnState::new(1, 2);

        let mut g1 = Graph::new();
        let x1 = g1.leaf(x.clone());
        let y1 = bn_forward_train(&mut g1, x1, &mut plain).unwrap().out;

        let mut g2 = Graph::new();
        let x2 = g2.leaf(x.clone());
        let y2 = dsbn_forward(&mut g2, x2, SiteId(1), &mut dsbn, Mode::Train).unwrap().out;

        assert_eq!(g1.value(y1).data(), g2.value(y2).data());
        assert_eq!(&plain, dsbn.site(SiteId(1)).unwrap());
    }

    #[test]
    fn forward_touches_only_the_routed_site() {
        let mut dsbn = DsbnState::new(3, 2);
        let before_1 = dsbn.site(SiteId(1)).unwrap().clone();
        let before_3 = dsbn.site(SiteId(3)).unwrap().clone();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 2, 1, 1], vec![5.0, 1.0, -2.0, 0.5]).unwrap());
        dsbn_forward(&mut g, x, SiteId(2), &mut dsbn, Mode::Train).unwrap();
        assert_eq!(&before_1, dsbn.site(SiteId(1)).unwrap());
        assert_eq!(&before_3, dsbn.site(SiteId(3)).unwrap());
        assert_eq!(dsbn.site(SiteId(2)).unwrap().updates, 1);
    }

    #[test]
    fn unknown_site_is_a_routing_error() {
        let mut dsbn = DsbnState::new(2, 1);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 1, 1, 1]));
        assert!(matches!(
            dsbn_forward(&mut g, x, SiteId(3), &mut dsbn, Mode::Train),
            Err(Error::UnknownSite { site: 3, num_sites: 2 })
        ));
        assert!(matches!(
            dsbn_forward(&mut g, x, SiteId(0), &mut dsbn, Mode::Train),
            Err(Error::UnknownSite { site: 0, num_sites: 2 })
        ));
    }

    #[test]
    fn sites_fed_shifted_distributions_diverge() {
        // Site 1 sees centered data, site 2 sees the same shifted by 5:
        // the running means must separate by about 5. With momentum 0.99
        // the moving average needs several hundred batches to absorb the
        // shift (0.99^600 ~ 0.2% of the initialization left).
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut dsbn = DsbnState::new(2, 1);
        for _ in 0..600 {
            for (site, shift, spread) in [(SiteId(1), 0.0, 1.0), (SiteId(2), 5.0, 2.0)] {
                let x = Tensor::from_vec(
                    &[8, 1, 2, 2],
                    (0..32).map(|_| shift + spread * rng.random_range(-1.7..1.7)).collect(),
                )
                .unwrap();
                let mut g = Graph::new();
                let xn = g.leaf(x);
                dsbn_forward(&mut g, xn, site, &mut dsbn, Mode::Train).unwrap();
            }
        }
        let gap = dsbn.site(SiteId(2)).unwrap().running_mean[0]
            - dsbn.site(SiteId(1)).unwrap().running_mean[0];
        assert!((gap - 5.0).abs() < 0.3, "running-mean gap {gap}");
    }
}
