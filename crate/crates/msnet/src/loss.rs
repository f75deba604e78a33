//! Segmentation and knowledge-transfer losses plus the two combined
//! training objectives.
//!
//! Both losses share the soft-dice form
//! `1 - 2*sum(m*p) / (sum(m^2) + sum(p^2))` summed jointly over every
//! pixel-channel entry of the batch. There is no smoothing constant:
//! softmax probabilities keep `sum(m^2) > 0` and a one-hot map always
//! contributes one unit per pixel, so the denominator cannot vanish.

use crate::engine::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// The knowledge-transfer rate and the L2 weight of the objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub eta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
            return Err(Error::LossWeight(format!("alpha must lie in [0,1], got {alpha}")));
        }
        if eta < 0.0 || !eta.is_finite() {
            return Err(Error::LossWeight(format!("eta must be non-negative, got {eta}")));
        }
        Ok(LossWeights { alpha, eta })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, eta: 1e-4 }
    }
}

/// Supervised soft-dice loss against a constant one-hot target.
pub fn dice_loss(g: &mut Graph, probs: NodeId, target: &Tensor) -> Result<NodeId> {
    let t = g.leaf(target.clone());
    g.dice(probs, t)
}

/// Knowledge-transfer loss: identical formula, but the target is a
/// detached one-hot prediction mask, so no gradient can flow toward the
/// branch that produced it.
pub fn kt_loss(g: &mut Graph, uni_probs: NodeId, aux_onehot: &Tensor) -> Result<NodeId> {
    dice_loss(g, uni_probs, aux_onehot)
}

/// Per-pixel argmax over the channel axis, ties broken toward the lowest
/// channel index.
pub fn onehot_argmax(probs: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = probs.dims4("onehot_argmax")?;
    let hw = h * w;
    let data = probs.data();
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for pix in 0..hw {
            let mut best_ch = 0;
            let mut best = data[base + pix];
            for ch in 1..c {
                let v = data[base + ch * hw + pix];
                if v > best {
                    best = v;
                    best_ch = ch;
                }
            }
            out[base + best_ch * hw + pix] = 1.0;
        }
    }
    Tensor::from_vec(&[b, c, h, w], out)
}

/// Sum of squared entries over the given kernel nodes. The caller passes
/// convolution kernels only; biases and normalization affines stay out of
/// the penalty.
pub fn l2_penalty(g: &mut Graph, kernels: &[NodeId]) -> NodeId {
    let mut total: Option<NodeId> = None;
    for &k in kernels {
        let sq = g.sum_squares(k);
        total = Some(match total {
            Some(t) => g.add(t, sq).expect("scalar add"),
            None => sq,
        });
    }
    total.unwrap_or_else(|| g.leaf(Tensor::scalar(0.0)))
}

/// Auxiliary-branch objective: the sum of per-site dice losses plus the
/// weighted L2 penalty over the shared encoder and every branch.
pub fn aux_objective(
    g: &mut Graph,
    site_losses: &[NodeId],
    kernels: &[NodeId],
    weights: &LossWeights,
    num_sites: usize,
) -> Result<NodeId> {
    if site_losses.len() != num_sites {
        return Err(Error::MissingSiteTerm { expected: num_sites, got: site_losses.len() });
    }
    let mut total = site_losses[0];
    for &l in &site_losses[1..] {
        total = g.add(total, l)?;
    }
    if weights.eta != 0.0 {
        let l2 = l2_penalty(g, kernels);
        let weighted = g.scale(l2, weights.eta);
        total = g.add(total, weighted)?;
    }
    Ok(total)
}

/// Universal-network objective: per-site `alpha * kt + (1 - alpha) * dice`
/// plus the weighted L2 penalty over encoder and decoder.
pub fn uni_objective(
    g: &mut Graph,
    site_pairs: &[(NodeId, NodeId)],
    kernels: &[NodeId],
    weights: &LossWeights,
    num_sites: usize,
) -> Result<NodeId> {
    if site_pairs.len() != num_sites {
        return Err(Error::MissingSiteTerm { expected: num_sites, got: site_pairs.len() });
    }
    LossWeights::new(weights.alpha, weights.eta)?;
    let mut total: Option<NodeId> = None;
    for &(kt, uni) in site_pairs {
        let kt_term = g.scale(kt, weights.alpha);
        let uni_term = g.scale(uni, 1.0 - weights.alpha);
        let site = g.add(kt_term, uni_term)?;
        total = Some(match total {
            Some(t) => g.add(t, site)?,
            None => site,
        });
    }
    let mut total = total.expect("at least one site");
    if weights.eta != 0.0 {
        let l2 = l2_penalty(g, kernels);
        let weighted = g.scale(l2, weights.eta);
        total = g.add(total, weighted)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval_dice(probs: Tensor, target: Tensor) -> f64 {
        let mut g = Graph::new();
        let p = g.leaf(probs);
        let l = dice_loss(&mut g, p, &target).unwrap();
        g.value(l).item()
    }

    #[test]
    fn exact_match_is_zero() {
        let t = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(eval_dice(t.clone(), t), 0.0);
    }

    #[test]
    fn half_confidence_single_pixel_is_one_third() {
        let p = Tensor::from_vec(&[1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let t = Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        assert!((eval_dice(p, t) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_probs_give_one_third_for_any_onehot() {
        // 2 classes, N pixels: 1 - (2*0.5N)/(0.5N + N) = 1/3.
        let n = 12;
        let p = Tensor::full(&[1, 2, 3, 4], 0.5);
        let mut t = vec![0.0; 2 * n];
        for pix in 0..n {
            let ch = pix % 2;
            t[ch * n + pix] = 1.0;
        }
        let t = Tensor::from_vec(&[1, 2, 3, 4], t).unwrap();
        assert!((eval_dice(p, t) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::zeros(&[1, 2, 2, 2]));
        let t = Tensor::zeros(&[1, 2, 2, 3]);
        assert!(dice_loss(&mut g, p, &t).is_err());
    }

    #[test]
    fn kt_target_receives_no_gradient() {
        // The target enters the graph as a constant; backward must leave it
        // without a gradient while the probability node gets one.
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![0.7, 0.3]).unwrap());
        let t = g.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap());
        let l = g.dice(p, t).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(p).is_some());
        assert!(g.grad(t).is_none());
        assert!(g.grad_or_zeros(t).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn onehot_argmax_basics() {
        let p = Tensor::from_vec(&[1, 2, 1, 1], vec![0.7, 0.3]).unwrap();
        assert_eq!(onehot_argmax(&p).unwrap().data(), &[1.0, 0.0]);
        // Tie breaks toward the lowest channel.
        let p = Tensor::from_vec(&[1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        assert_eq!(onehot_argmax(&p).unwrap().data(), &[1.0, 0.0]);
        // Round trip: argmax of a one-hot map is the identity.
        let t = Tensor::from_vec(&[1, 3, 1, 2], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(onehot_argmax(&t).unwrap().data(), t.data());
    }

    #[test]
    fn l2_penalty_values() {
        let mut g = Graph::new();
        let zero = g.leaf(Tensor::zeros(&[2, 3]));
        let l = l2_penalty(&mut g, &[zero]);
        assert_eq!(g.value(l).item(), 0.0);

        let k = g.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let l = l2_penalty(&mut g, &[k]);
        assert_eq!(g.value(l).item(), 25.0);

        let empty = l2_penalty(&mut g, &[]);
        assert_eq!(g.value(empty).item(), 0.0);
    }

    #[test]
    fn aux_objective_arithmetic() {
        let w = LossWeights { alpha: 0.5, eta: 0.0 };
        let mut g = Graph::new();
        let losses: Vec<NodeId> =
            [0.2, 0.3, 0.1].iter().map(|v| g.leaf(Tensor::scalar(*v))).collect();
        let total = aux_objective(&mut g, &losses, &[], &w, 3).unwrap();
        assert!((g.value(total).item() - 0.6).abs() < 1e-15);

        // eta = 1e-4 with kernel sum-of-squares 100 adds 0.01.
        let w = LossWeights { alpha: 0.5, eta: 1e-4 };
        let k = g.leaf(Tensor::from_vec(&[1], vec![10.0]).unwrap());
        let total = aux_objective(&mut g, &losses, &[k], &w, 3).unwrap();
        assert!((g.value(total).item() - 0.61).abs() < 1e-12);

        assert!(matches!(
            aux_objective(&mut g, &losses, &[], &w, 4),
            Err(Error::MissingSiteTerm { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn uni_objective_arithmetic_and_limits() {
        let mut g = Graph::new();
        let kt = g.leaf(Tensor::scalar(0.4));
        let uni = g.leaf(Tensor::scalar(0.2));
        let w = LossWeights { alpha: 0.5, eta: 0.0 };
        let total = uni_objective(&mut g, &[(kt, uni)], &[], &w, 1).unwrap();
        assert!((g.value(total).item() - 0.3).abs() < 1e-15);

        let w0 = LossWeights { alpha: 0.0, eta: 0.0 };
        let t0 = uni_objective(&mut g, &[(kt, uni)], &[], &w0, 1).unwrap();
        assert!((g.value(t0).item() - 0.2).abs() < 1e-15);

        let w1 = LossWeights { alpha: 1.0, eta: 0.0 };
        let t1 = uni_objective(&mut g, &[(kt, uni)], &[], &w1, 1).unwrap();
        assert!((g.value(t1).item() - 0.4).abs() < 1e-15);

        assert!(LossWeights::new(1.5, 0.0).is_err());
        assert!(LossWeights::new(0.5, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn dice_stays_in_unit_interval(
            seed in 0u64..1000,
            pixels in 1usize..24,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut probs = vec![0.0; 2 * pixels];
            let mut target = vec![0.0; 2 * pixels];
            for pix in 0..pixels {
                let p: f64 = rng.random_range(0.0..1.0);
                probs[pix] = p;
                probs[pixels + pix] = 1.0 - p;
                let ch = usize::from(rng.random_bool(0.5));
                target[ch * pixels + pix] = 1.0;
            }
            let p = Tensor::from_vec(&[1, 2, 1, pixels], probs).unwrap();
            let t = Tensor::from_vec(&[1, 2, 1, pixels], target).unwrap();
            let v = eval_dice(p, t);
            prop_assert!((0.0..=1.0).contains(&v), "dice {v}");
        }

        #[test]
        fn uni_objective_is_affine_in_alpha(
            kt in 0.0f64..1.0,
            uni in 0.0f64..1.0,
            alpha in 0.0f64..1.0,
        ) {
            let mut g = Graph::new();
            let ktn = g.leaf(Tensor::scalar(kt));
            let unin = g.leaf(Tensor::scalar(uni));
            let w = LossWeights { alpha, eta: 0.0 };
            let total = uni_objective(&mut g, &[(ktn, unin)], &[], &w, 1).unwrap();
            let expected = alpha * kt + (1.0 - alpha) * uni;
            prop_assert!((g.value(total).item() - expected).abs() < 1e-12);
        }
    }
}
