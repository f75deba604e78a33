//! Self-check suites: finite-difference verification of every backward
//! rule and brute-force oracles for the evaluation metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{fd_check, Graph, NodeId, Tensor};
use crate::loss;
use crate::norm::{self, DsbnState, Mode, SiteId};

const FD_STEP: f64 = 1e-3;
const FD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<40} max rel err {:>12.3e}  (tol {:.0e})  {}\n",
                c.name,
                c.max_rel_err,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random values bounded away from zero, for operations with a kink there.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(0.05..1.0)
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Scalar head for gradient checks: `sum((y + r)^2)` gives every output
/// entry a distinct, non-degenerate adjoint.
fn head(g: &mut Graph, y: NodeId, r: &Tensor) -> NodeId {
    let rn = g.leaf(r.clone());
    let s = g.add(y, rn).expect("head shapes");
    g.sum_squares(s)
}

/// Run one gradient check: `build` maps parameter tensors to the scalar
/// loss inside a fresh graph and returns (loss, analytic gradients).
fn check<F>(name: &str, point: &[Tensor], mut build: F) -> CheckResult
where
    F: FnMut(&[Tensor]) -> (f64, Vec<Tensor>),
{
    let (_, analytic) = build(point);
    let err = fd_check(|p| build(p).0, point, &analytic, FD_STEP);
    CheckResult { name: name.to_string(), max_rel_err: err, tolerance: FD_TOLERANCE }
}

/// Finite-difference verification of every primitive operation's backward
/// rule on randomized small shapes.
pub fn gradient_checks(seed: u64) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // conv2d: one case per dispatch path (direct 3x3, strided GEMM, 1x1).
    for (label, ci, co, h, w, k, s, p) in [
        ("conv2d 3x3 s1", 3usize, 4usize, 6usize, 5usize, 3usize, 1usize, 1usize),
        ("conv2d 3x3 s2", 3, 4, 7, 7, 3, 2, 1),
        ("conv2d 1x1", 5, 3, 4, 4, 1, 1, 0),
    ] {
        let x = rand_tensor(&mut rng, &[2, ci, h, w], -1.0, 1.0);
        let wk = rand_tensor(&mut rng, &[co, ci, k, k], -0.7, 0.7);
        let b = rand_tensor(&mut rng, &[co], -0.5, 0.5);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let r = rand_tensor(&mut rng, &[2, co, ho, wo], -1.0, 1.0);
        checks.push(check(label, &[x, wk, b], |pt| {
            let mut g = Graph::new();
            let xn = g.leaf(pt[0].clone());
            let wn = g.leaf(pt[1].clone());
            let bn = g.leaf(pt[2].clone());
            let y = g.conv2d(xn, wn, bn, s, p).unwrap();
            let l = head(&mut g, y, &r);
            g.backward(l).unwrap();
            (
                g.value(l).item(),
                vec![g.grad_or_zeros(xn), g.grad_or_zeros(wn), g.grad_or_zeros(bn)],
            )
        }));
    }

    // transposed_conv2d at stride 2 and stride 1.
    for (label, stride) in [("transposed_conv2d s2", 2usize), ("transposed_conv2d s1", 1usize)] {
        let (ci, co, h, w) = (3, 2, 3, 4);
        let x = rand_tensor(&mut rng, &[2, ci, h, w], -1.0, 1.0);
        let wk = rand_tensor(&mut rng, &[ci, co, 3, 3], -0.7, 0.7);
        let b = rand_tensor(&mut rng, &[co], -0.5, 0.5);
        let r = rand_tensor(&mut rng, &[2, co, h * stride, w * stride], -1.0, 1.0);
        checks.push(check(label, &[x, wk, b], |pt| {
            let mut g = Graph::new();
            let xn = g.leaf(pt[0].clone());
            let wn = g.leaf(pt[1].clone());
            let bn = g.leaf(pt[2].clone());
            let y = g.transposed_conv2d(xn, wn, bn, stride).unwrap();
            let l = head(&mut g, y, &r);
            g.backward(l).unwrap();
            (
                g.value(l).item(),
                vec![g.grad_or_zeros(xn), g.grad_or_zeros(wn), g.grad_or_zeros(bn)],
            )
        }));
    }

    // maxpool2d on well-separated values so the argmax is stable under the
    // finite-difference step.
    {
        let n = 2 * 2 * 6 * 6;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.03).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::from_vec(&[2, 2, 6, 6], vals).unwrap();
        let r = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        checks.push(check("maxpool2d 3x3 s2", &[x], |pt| {
            let mut g = Graph::new();
            let xn = g.leaf(pt[0].clone());
            let y = g.maxpool2d(xn).unwrap();
            let l = head(&mut g, y, &r);
            g.backward(l).unwrap();
            (g.value(l).item(), vec![g.grad_or_zeros(xn)])
        }));
    }

    // relu away from the kink.
    {
        let x = rand_tensor_off_zero(&mut rng, &[3, 2, 4, 4]);
        let r = rand_tensor(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
        checks.push(check("relu", &[x], |pt| {
            let mut g = Graph::new();
            let xn = g.leaf(pt[0].clone());
            let y = g.relu(xn);
            let l = head(&mut g, y, &r);
            g.backward(l).unwrap();
            (g.value(l).item(), vec![g.grad_or_zeros(xn)])
        }));
    }

    // add: gradient 1 to both operands.
    {
        let a = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let r = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        checks.push(check("add", &[a, b], |pt| {
            let mut g = Graph::new();
            let an = g.leaf(pt[0].clone());
            let bn = g.leaf(pt[1].clone());
            let y = g.add(an, bn).unwrap();
            let l = head(&mut g, y, &r);
            g.backward(l).unwrap();
            (g.value(l).item(), vec![g.grad_or_zeros(an), g.grad_or_zeros(bn)])
        }));
    }

    // softmax over channels.
    {
        let x = rand_tensor(&mut rng, &[2, 3, 3, 3], -2.0, 2.0);
        let r = rand_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        checks.push(check("softmax_channel", &[x], |pt| {
            let mut g = Graph::new();
            let xn = g.leaf(pt[0].clone());
            let y = g.softmax_channel(xn).unwrap();
            let l = head(&mut g, y, &r);
            g.backward(l).unwrap();
            (g.value(l).item(), vec![g.grad_or_zeros(xn)])
        }));
    }

    // batch norm, training mode: input, gamma and beta all checked.
    {
        let x = rand_tensor(&mut rng, &[3, 2, 3, 3], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[2], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[2], -0.5, 0.5);
        let r = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        checks.push(check("bn_forward_train", &[x, gamma, beta], |pt| {
            let mut g = Graph::new();
            let xn = g.leaf(pt[0].clone());
            let gn = g.leaf(pt[1].clone());
            let bn = g.leaf(pt[2].clone());
            let (y, _) = g.batch_norm_train(xn, gn, bn, norm::DEFAULT_EPSILON).unwrap();
            let l = head(&mut g, y, &r);
            g.backward(l).unwrap();
            (
                g.value(l).item(),
                vec![g.grad_or_zeros(xn), g.grad_or_zeros(gn), g.grad_or_zeros(bn)],
            )
        }));
    }

    // dsbn routed through one site of three.
    {
        let x = rand_tensor(&mut rng, &[3, 2, 3, 3], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[2], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[2], -0.5, 0.5);
        let r = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        checks.push(check("dsbn_forward site 2/3", &[x, gamma, beta], |pt| {
            let mut state = DsbnState::new(3, 2);
            let site = state.site_mut(SiteId(2)).unwrap();
            site.gamma = pt[1].clone();
            site.beta = pt[2].clone();
            let mut g = Graph::new();
            let xn = g.leaf(pt[0].clone());
            let fwd = norm::dsbn_forward(&mut g, xn, SiteId(2), &mut state, Mode::Train).unwrap();
            let l = head(&mut g, fwd.out, &r);
            g.backward(l).unwrap();
            (
                g.value(l).item(),
                vec![g.grad_or_zeros(xn), g.grad_or_zeros(fwd.gamma), g.grad_or_zeros(fwd.beta)],
            )
        }));
    }

    // dice loss against a fixed one-hot target.
    {
        let logits = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.5, 1.5);
        let target = loss::onehot_argmax(&rand_tensor(&mut rng, &[2, 2, 3, 3], 0.0, 1.0)).unwrap();
        checks.push(check("dice_loss", &[logits], |pt| {
            let mut g = Graph::new();
            let xn = g.leaf(pt[0].clone());
            let probs = g.softmax_channel(xn).unwrap();
            let l = loss::dice_loss(&mut g, probs, &target).unwrap();
            g.backward(l).unwrap();
            (g.value(l).item(), vec![g.grad_or_zeros(xn)])
        }));
    }

    // kt loss: same form, detached target.
    {
        let logits = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.5, 1.5);
        let target = loss::onehot_argmax(&rand_tensor(&mut rng, &[2, 2, 3, 3], 0.0, 1.0)).unwrap();
        checks.push(check("kt_loss", &[logits], |pt| {
            let mut g = Graph::new();
            let xn = g.leaf(pt[0].clone());
            let probs = g.softmax_channel(xn).unwrap();
            let l = loss::kt_loss(&mut g, probs, &target).unwrap();
            g.backward(l).unwrap();
            (g.value(l).item(), vec![g.grad_or_zeros(xn)])
        }));
    }

    // l2 penalty: gradient is exactly 2w.
    {
        let a = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        checks.push(check("l2_penalty", &[a, b], |pt| {
            let mut g = Graph::new();
            let an = g.leaf(pt[0].clone());
            let bn = g.leaf(pt[1].clone());
            let l = loss::l2_penalty(&mut g, &[an, bn]);
            g.backward(l).unwrap();
            (g.value(l).item(), vec![g.grad_or_zeros(an), g.grad_or_zeros(bn)])
        }));
    }

    VerifyReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_primitive_gradients_verify() {
        let report = gradient_checks(2024);
        assert!(report.passed(), "\n{}", report.render());
        assert_eq!(report.checks.len(), 14);
    }
}
