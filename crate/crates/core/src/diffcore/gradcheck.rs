//! Finite-difference verification of every differentiable operation.
//!
//! The oracle here never touches the backward pass: it re-evaluates the
//! forward computation at perturbed inputs and forms central differences.
//! Both the CLI `grad-check` subcommand and the acceptance suite drive
//! [`check_all_ops`].

use super::graph::{Graph, NodeId};
use super::rng::SeededRng;
use super::tensor::Tensor;

/// Central-difference step, matching the documented oracle.
pub const FD_STEP: f64 = 1e-5;

/// Worst relative error per checked operation.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub cases: Vec<CaseResult>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

/// Central finite differences of a scalar function.
pub fn finite_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + step;
        let hi = f(&point);
        point[i] = orig - step;
        let lo = f(&point);
        point[i] = orig;
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely instead of blowing up the ratio.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// A builder maps the flat input vector to (differentiated leaves, scalar
/// loss) on a fresh graph. Leaves must consume the flat vector in order.
type CaseBuilder<'a> = dyn Fn(&mut Graph, &[f64]) -> (Vec<NodeId>, NodeId) + 'a;

fn check_case(name: &'static str, x: &[f64], build: &CaseBuilder<'_>) -> CaseResult {
    let mut g = Graph::new();
    let (leaves, loss) = build(&mut g, x);
    g.backward(loss).expect("gradcheck loss is scalar");
    let mut analytic = Vec::with_capacity(x.len());
    for leaf in leaves {
        analytic.extend_from_slice(g.grad(leaf).data());
    }
    assert_eq!(analytic.len(), x.len(), "builder consumed wrong length");

    let numeric = finite_difference(
        |p| {
            let mut g = Graph::new();
            let (_, loss) = build(&mut g, p);
            g.value(loss).data()[0]
        },
        x,
        FD_STEP,
    );

    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max);
    CaseResult { name, max_rel_err }
}

fn randn(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.next_normal()).collect()
}

/// Check the analytic gradient of every op kind at `points` random inputs
/// each. Returns the worst relative error per case.
pub fn check_all_ops(points: usize, seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(seed);
    let mut report = GradCheckReport::default();
    let mut worst = |name: &'static str, runs: Vec<CaseResult>| {
        let max = runs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        report.cases.push(CaseResult {
            name,
            max_rel_err: max,
        });
    };

    // affine: differentiate x, w, b jointly; reduce with fixed weights.
    let mut runs = Vec::new();
    for _ in 0..points {
        let (b_rows, n_in, n_out) = (2, 3, 4);
        let dim = b_rows * n_in + n_out * n_in + n_out;
        let x0 = randn(&mut rng, dim);
        let red = Tensor::matrix(b_rows, n_out, randn(&mut rng, b_rows * n_out)).unwrap();
        runs.push(check_case("affine", &x0, &|g, p| {
            let x = g.leaf(Tensor::matrix(b_rows, n_in, p[..b_rows * n_in].to_vec()).unwrap());
            let w = g.leaf(
                Tensor::matrix(
                    n_out,
                    n_in,
                    p[b_rows * n_in..b_rows * n_in + n_out * n_in].to_vec(),
                )
                .unwrap(),
            );
            let b = g.leaf(Tensor::row(p[b_rows * n_in + n_out * n_in..].to_vec()));
            let y = g.affine(x, w, b).unwrap();
            let loss = g.weighted_sum(y, &red).unwrap();
            (vec![x, w, b], loss)
        }));
    }
    worst("affine", runs);

    // elementwise nonlinearities
    for (name, kind) in [
        ("tanh", 0usize),
        ("relu", 1),
        ("sigmoid", 2),
        ("softmax", 3),
    ] {
        let mut runs = Vec::new();
        for _ in 0..points {
            let n = 6;
            let mut x0 = randn(&mut rng, n);
            if name == "relu" {
                // keep points away from the kink at zero
                for v in &mut x0 {
                    if v.abs() < 0.1 {
                        *v += 0.2 * v.signum().max(0.0) + 0.2;
                    }
                }
            }
            let red = Tensor::row(randn(&mut rng, n));
            runs.push(check_case(name, &x0, &|g, p| {
                let x = g.leaf(Tensor::row(p.to_vec()));
                let y = match kind {
                    0 => g.tanh(x),
                    1 => g.relu(x),
                    2 => g.sigmoid(x),
                    _ => g.softmax(x),
                };
                let loss = g.weighted_sum(y, &red).unwrap();
                (vec![x], loss)
            }));
        }
        worst(name, runs);
    }

    // reparameterize: mu and log_var with fixed noise
    let mut runs = Vec::new();
    for _ in 0..points {
        let n = 5;
        let x0 = randn(&mut rng, 2 * n);
        let eps = Tensor::row(randn(&mut rng, n));
        let red = Tensor::row(randn(&mut rng, n));
        runs.push(check_case("reparameterize", &x0, &|g, p| {
            let mu = g.leaf(Tensor::row(p[..n].to_vec()));
            let lv = g.leaf(Tensor::row(p[n..].to_vec()));
            let z = g.reparameterize_with(mu, lv, eps.clone()).unwrap();
            let loss = g.weighted_sum(z, &red).unwrap();
            (vec![mu, lv], loss)
        }));
    }
    worst("reparameterize", runs);

    // kl_diag_gaussian
    let mut runs = Vec::new();
    for _ in 0..points {
        let n = 5;
        let x0 = randn(&mut rng, 2 * n);
        runs.push(check_case("kl_diag_gaussian", &x0, &|g, p| {
            let mu = g.leaf(Tensor::row(p[..n].to_vec()));
            let lv = g.leaf(Tensor::row(p[n..].to_vec()));
            let loss = g.kl_diag_gaussian(mu, lv).unwrap();
            (vec![mu, lv], loss)
        }));
    }
    worst("kl_diag_gaussian", runs);

    // mse
    let mut runs = Vec::new();
    for _ in 0..points {
        let n = 6;
        let x0 = randn(&mut rng, n);
        let target = Tensor::row(randn(&mut rng, n));
        runs.push(check_case("mse", &x0, &|g, p| {
            let x = g.leaf(Tensor::row(p.to_vec()));
            let loss = g.mse(x, &target).unwrap();
            (vec![x], loss)
        }));
    }
    worst("mse", runs);

    // bce on probabilities strictly inside (0, 1)
    let mut runs = Vec::new();
    for _ in 0..points {
        let n = 6;
        let x0: Vec<f64> = (0..n).map(|_| 0.05 + 0.9 * rng.next_f64()).collect();
        let target = Tensor::row((0..n).map(|_| rng.next_f64()).collect());
        runs.push(check_case("bce", &x0, &|g, p| {
            let x = g.leaf(Tensor::row(p.to_vec()));
            let loss = g.bce(x, &target).unwrap();
            (vec![x], loss)
        }));
    }
    worst("bce", runs);

    // bce_with_logits
    let mut runs = Vec::new();
    for _ in 0..points {
        let n = 6;
        let x0: Vec<f64> = randn(&mut rng, n).iter().map(|v| 3.0 * v).collect();
        let target = Tensor::row((0..n).map(|_| rng.next_f64()).collect());
        runs.push(check_case("bce_with_logits", &x0, &|g, p| {
            let x = g.leaf(Tensor::row(p.to_vec()));
            let loss = g.bce_with_logits(x, &target).unwrap();
            (vec![x], loss)
        }));
    }
    worst("bce_with_logits", runs);

    // softmax_ce over a small batch of logit rows
    let mut runs = Vec::new();
    for _ in 0..points {
        let (rows, cols) = (3, 4);
        let x0 = randn(&mut rng, rows * cols);
        let classes: Vec<usize> = (0..rows).map(|_| rng.next_index(cols)).collect();
        runs.push(check_case("softmax_ce", &x0, &|g, p| {
            let x = g.leaf(Tensor::matrix(rows, cols, p.to_vec()).unwrap());
            let loss = g.softmax_ce(x, &classes).unwrap();
            (vec![x], loss)
        }));
    }
    worst("softmax_ce", runs);

    // slice / concat / add / scale plumbing
    let mut runs = Vec::new();
    for _ in 0..points {
        let n = 8;
        let x0 = randn(&mut rng, n);
        let red = Tensor::row(randn(&mut rng, n));
        runs.push(check_case("compose", &x0, &|g, p| {
            let x = g.leaf(Tensor::row(p.to_vec()));
            let head = g.slice_cols(x, 0, 3).unwrap();
            let tail = g.slice_cols(x, 3, n - 3).unwrap();
            let joined = g.concat_cols(&[head, tail]).unwrap();
            let doubled = g.scale(joined, 2.0);
            let summed = g.add(doubled, x).unwrap();
            let loss = g.weighted_sum(summed, &red).unwrap();
            (vec![x], loss)
        }));
    }
    worst("compose", runs);

    // random two-layer network end to end
    let mut runs = Vec::new();
    for _ in 0..points {
        let (n_in, n_hidden, n_out) = (4, 3, 2);
        let dim = n_hidden * n_in + n_hidden + n_out * n_hidden + n_out;
        let x0 = randn(&mut rng, dim);
        let input = Tensor::row(randn(&mut rng, n_in));
        let target = Tensor::row((0..n_out).map(|_| rng.next_f64()).collect());
        runs.push(check_case("two_layer_net", &x0, &|g, p| {
            let mut at = 0;
            let mut take = |len: usize| {
                let s = p[at..at + len].to_vec();
                at += len;
                s
            };
            let w1 = g.leaf(Tensor::matrix(n_hidden, n_in, take(n_hidden * n_in)).unwrap());
            let b1 = g.leaf(Tensor::row(take(n_hidden)));
            let w2 = g.leaf(Tensor::matrix(n_out, n_hidden, take(n_out * n_hidden)).unwrap());
            let b2 = g.leaf(Tensor::row(take(n_out)));
            let x = g.leaf(input.clone());
            let h = g.affine(x, w1, b1).unwrap();
            let h = g.tanh(h);
            let y = g.affine(h, w2, b2).unwrap();
            let loss = g.bce_with_logits(y, &target).unwrap();
            (vec![w1, b1, w2, b2], loss)
        }));
    }
    worst("two_layer_net", runs);

    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ops_match_finite_differences() {
        let report = check_all_ops(20, 0x5EED);
        for case in &report.cases {
            assert!(
                case.max_rel_err < 1e-4,
                "{} rel err {}",
                case.name,
                case.max_rel_err
            );
        }
    }

    #[test]
    fn finite_difference_of_quadratic_is_exact_enough() {
        let grad = finite_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((grad[0] - 4.0).abs() < 1e-9);
        assert!((grad[1] - 3.0).abs() < 1e-9);
    }
}
