//! Entropic optimal transport between embedding clouds.
//!
//! The alignment engine is full-batch log-domain Sinkhorn over node
//! embeddings with a *selective* cost: squared Euclidean distances scaled
//! per source row by the graph-level and node-level selector weights. An
//! exact min-cost-flow oracle and the semi-dual objective provide
//! independent checks of the solver at small sizes.
//!
//! Gradients follow the envelope approach: the optimal plan is treated as a
//! constant at the solution and only the cost entries carry derivatives.
//! At small regularization the plan is exponentially insensitive to cost
//! perturbations, which the finite-difference tests confirm.

use crate::error::{Result, SelmagError};
use crate::tensor::{Matrix, Tape, ValueId};

/// A discrete OT instance: cost matrix, marginals, and entropic weight.
#[derive(Debug, Clone)]
pub struct TransportProblem {
    pub cost: Matrix,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub epsilon: f64,
}

impl TransportProblem {
    pub fn validate(&self) -> Result<()> {
        let fail = |details: String| {
            Err(SelmagError::InvalidArgument {
                op: "TransportProblem",
                details,
            })
        };
        let (m, n) = self.cost.shape();
        if self.mu.len() != m || self.nu.len() != n {
            return fail(format!(
                "marginal lengths ({}, {}) do not match cost shape {m}x{n}",
                self.mu.len(),
                self.nu.len()
            ));
        }
        if self.cost.data().iter().any(|&c| c < 0.0) {
            return fail("cost entries must be nonnegative".into());
        }
        for (name, v) in [("mu", &self.mu), ("nu", &self.nu)] {
            if v.iter().any(|&p| p < 0.0) {
                return fail(format!("{name} has negative entries"));
            }
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return fail(format!("{name} sums to {s}, expected 1"));
            }
        }
        Ok(())
    }
}

/// Solver knobs. Defaults match the verification setting (tight tolerance);
/// training loops pass looser values plus warm-start potentials.
#[derive(Debug, Clone)]
pub struct SinkhornOptions {
    pub max_iters: usize,
    /// Largest allowed marginal violation in sup-norm.
    pub tolerance: f64,
    /// Check convergence only every this many iterations (the check costs a
    /// full plan evaluation).
    pub check_every: usize,
    /// Record `<gamma, C>` and the dual objective after every iteration
    /// (testing aid).
    pub record_trace: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            max_iters: 10_000,
            tolerance: 1e-9,
            check_every: 1,
            record_trace: false,
        }
    }
}

/// Result of a Sinkhorn solve. Potentials are kept for warm starts.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub gamma: Matrix,
    /// `<gamma, C> + epsilon * sum gamma log gamma` (negentropy form).
    pub cost_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub f_potential: Vec<f64>,
    pub g_potential: Vec<f64>,
    /// Transport part `<gamma, C>` per iteration when tracing is enabled.
    pub trace: Vec<f64>,
    /// Dual objective `<mu,f> + <nu,g> - eps*(mass - 1)` per iteration when
    /// tracing is enabled. Sinkhorn is block-coordinate ascent on this, so
    /// the sequence is monotone non-decreasing and converges to
    /// `cost_value` (the transport part at iterates is *not* monotone).
    pub dual_trace: Vec<f64>,
}

impl TransportPlan {
    /// Transport part of the objective, without the entropy term.
    pub fn transport_cost(&self, cost: &Matrix) -> f64 {
        self.gamma.dot(cost)
    }
}

/// Pairwise squared Euclidean distances between rows of `xs` and rows of
/// `xt`, computed as `|x|^2 + |y|^2 - 2 x.y` with a clamp against the tiny
/// negatives that cancellation can produce.
pub fn cost_matrix(xs: &Matrix, xt: &Matrix) -> Matrix {
    assert_eq!(xs.cols(), xt.cols(), "cost_matrix: embedding dims differ");
    let sn = xs.row_sq_norms();
    let tn = xt.row_sq_norms();
    let cross = xs.matmul(&xt.transpose());
    let mut c = Matrix::zeros(xs.rows(), xt.rows());
    for i in 0..xs.rows() {
        for j in 0..xt.rows() {
            let v = sn.get(i, 0) + tn.get(j, 0) - 2.0 * cross.get(i, j);
            c.set(i, j, v.max(0.0));
        }
    }
    c
}

/// Scales row `v` of the cost by `s_global * s_local[v]`.
pub fn selective_cost(c: &Matrix, s_global: f64, s_local: &[f64]) -> Result<Matrix> {
    if s_local.len() != c.rows() {
        return Err(SelmagError::InvalidArgument {
            op: "selective_cost",
            details: format!("{} local weights for {} cost rows", s_local.len(), c.rows()),
        });
    }
    if s_global <= 0.0 || s_local.iter().any(|&w| w <= 0.0) {
        return Err(SelmagError::InvalidArgument {
            op: "selective_cost",
            details: "selector weights must be strictly positive".into(),
        });
    }
    let mut out = c.clone();
    for i in 0..out.rows() {
        let w = s_global * s_local[i];
        for v in out.row_mut(i) {
            *v *= w;
        }
    }
    Ok(out)
}

fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let max = vals.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = vals.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log-domain Sinkhorn with optional warm-start potentials.
///
/// Alternates the closed-form potential updates
/// `f_i = eps ln mu_i - eps lse_j((g_j - C_ij)/eps)` (and symmetrically for
/// `g`) until the plan's marginals match `mu` and `nu` within tolerance.
/// Non-convergence is reported through the `converged` flag, not an error.
pub fn sinkhorn_warm(
    problem: &TransportProblem,
    options: &SinkhornOptions,
    warm: Option<(&[f64], &[f64])>,
) -> Result<TransportPlan> {
    problem.validate()?;
    if problem.epsilon <= 0.0 {
        return Err(SelmagError::InvalidArgument {
            op: "sinkhorn",
            details: format!("epsilon must be positive, got {}", problem.epsilon),
        });
    }
    let eps = problem.epsilon;
    let (m, n) = problem.cost.shape();
    let c = &problem.cost;
    let (mut f, mut g) = match warm {
        Some((wf, wg)) if wf.len() == m && wg.len() == n => (wf.to_vec(), wg.to_vec()),
        _ => (vec![0.0; m], vec![0.0; n]),
    };
    // Zero-mass atoms get potential -inf implicitly via ln; guard against
    // them by treating ln(0) as a very negative finite number.
    let safe_ln = |p: f64| if p > 0.0 { p.ln() } else { -1e30 };
    let ln_mu: Vec<f64> = problem.mu.iter().map(|&p| safe_ln(p)).collect();
    let ln_nu: Vec<f64> = problem.nu.iter().map(|&p| safe_ln(p)).collect();

    let plan_from = |f: &[f64], g: &[f64]| -> Matrix {
        Matrix::from_fn(m, n, |i, j| ((f[i] + g[j] - c.get(i, j)) / eps).exp())
    };

    let mut iterations = 0;
    let mut converged = false;
    let mut trace = Vec::new();
    let mut dual_trace = Vec::new();
    while iterations < options.max_iters {
        iterations += 1;
        for i in 0..m {
            let lse = logsumexp((0..n).map(|j| (g[j] - c.get(i, j)) / eps));
            f[i] = eps * ln_mu[i] - eps * lse;
        }
        for j in 0..n {
            let lse = logsumexp((0..m).map(|i| (f[i] - c.get(i, j)) / eps));
            g[j] = eps * ln_nu[j] - eps * lse;
        }
        let check = iterations % options.check_every == 0 || iterations == options.max_iters;
        if options.record_trace || check {
            let gamma = plan_from(&f, &g);
            if options.record_trace {
                trace.push(gamma.dot(c));
                let mass = gamma.sum();
                let dual: f64 = f.iter().zip(&problem.mu).map(|(a, b)| a * b).sum::<f64>()
                    + g.iter().zip(&problem.nu).map(|(a, b)| a * b).sum::<f64>()
                    - eps * (mass - 1.0);
                dual_trace.push(dual);
            }
            if check {
                let mut worst = 0.0f64;
                for i in 0..m {
                    let row: f64 = gamma.row(i).iter().sum();
                    worst = worst.max((row - problem.mu[i]).abs());
                }
                for j in 0..n {
                    let mut col = 0.0;
                    for i in 0..m {
                        col += gamma.get(i, j);
                    }
                    worst = worst.max((col - problem.nu[j]).abs());
                }
                if worst < options.tolerance {
                    converged = true;
                    break;
                }
            }
        }
    }

    let gamma = plan_from(&f, &g);
    let transport = gamma.dot(c);
    let negentropy: f64 = gamma
        .data()
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum();
    Ok(TransportPlan {
        cost_value: transport + eps * negentropy,
        gamma,
        iterations,
        converged,
        f_potential: f,
        g_potential: g,
        trace,
        dual_trace,
    })
}

/// [`sinkhorn_warm`] from cold potentials.
pub fn sinkhorn(problem: &TransportProblem, options: &SinkhornOptions) -> Result<TransportPlan> {
    sinkhorn_warm(problem, options, None)
}

// ---------------------------------------------------------------------------
// Exact oracle (small instances)
// ---------------------------------------------------------------------------

const ORACLE_SIZE_CAP: usize = 6;

/// Exact minimum of `<gamma, C>` over couplings of `(mu, nu)`, solved as a
/// min-cost flow with successive shortest paths. Capped to tiny instances;
/// this is a verification oracle, not a production solver.
pub fn exact_ot_oracle(cost: &Matrix, mu: &[f64], nu: &[f64]) -> Result<f64> {
    let (m, n) = cost.shape();
    if m > ORACLE_SIZE_CAP || n > ORACLE_SIZE_CAP {
        return Err(SelmagError::InvalidArgument {
            op: "exact_ot_oracle",
            details: format!("instance {m}x{n} exceeds the {ORACLE_SIZE_CAP} size cap"),
        });
    }
    TransportProblem {
        cost: cost.clone(),
        mu: mu.to_vec(),
        nu: nu.to_vec(),
        epsilon: 1.0,
    }
    .validate()?;

    // Node layout: 0 = super-source, 1..=m sources, m+1..=m+n sinks, last = super-sink.
    let num_nodes = m + n + 2;
    let (s, t) = (0usize, m + n + 1);
    let mut flow = MinCostFlow::new(num_nodes);
    for i in 0..m {
        flow.add_edge(s, 1 + i, mu[i], 0.0);
    }
    for j in 0..n {
        flow.add_edge(m + 1 + j, t, nu[j], 0.0);
    }
    for i in 0..m {
        for j in 0..n {
            flow.add_edge(1 + i, m + 1 + j, 2.0, cost.get(i, j));
        }
    }
    Ok(flow.run(s, t))
}

struct McfEdge {
    to: usize,
    cap: f64,
    cost: f64,
}

struct MinCostFlow {
    graph: Vec<Vec<usize>>,
    edges: Vec<McfEdge>,
}

impl MinCostFlow {
    fn new(n: usize) -> MinCostFlow {
        MinCostFlow {
            graph: vec![Vec::new(); n],
            edges: Vec::new(),
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) {
        self.graph[from].push(self.edges.len());
        self.edges.push(McfEdge { to, cap, cost });
        self.graph[to].push(self.edges.len());
        self.edges.push(McfEdge {
            to: from,
            cap: 0.0,
            cost: -cost,
        });
    }

    /// Sends as much flow as possible from `s` to `t` along successive
    /// shortest (by cost) augmenting paths; returns the total cost.
    fn run(&mut self, s: usize, t: usize) -> f64 {
        const EPS: f64 = 1e-12;
        let n = self.graph.len();
        let mut total = 0.0;
        loop {
            // Bellman-Ford: residual arcs can have negative cost.
            let mut dist = vec![f64::INFINITY; n];
            let mut pre: Vec<Option<usize>> = vec![None; n];
            dist[s] = 0.0;
            for _ in 0..n {
                let mut improved = false;
                for u in 0..n {
                    if !dist[u].is_finite() {
                        continue;
                    }
                    for &ei in &self.graph[u] {
                        let e = &self.edges[ei];
                        if e.cap > EPS && dist[u] + e.cost < dist[e.to] - 1e-15 {
                            dist[e.to] = dist[u] + e.cost;
                            pre[e.to] = Some(ei);
                            improved = true;
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
            if !dist[t].is_finite() {
                break;
            }
            // Bottleneck along the path.
            let mut push = f64::INFINITY;
            let mut v = t;
            while let Some(ei) = pre[v] {
                push = push.min(self.edges[ei].cap);
                v = self.edges[ei ^ 1].to;
            }
            if push <= EPS {
                break;
            }
            let mut v = t;
            while let Some(ei) = pre[v] {
                self.edges[ei].cap -= push;
                self.edges[ei ^ 1].cap += push;
                total += push * self.edges[ei].cost;
                v = self.edges[ei ^ 1].to;
            }
        }
        total
    }
}

// ---------------------------------------------------------------------------
// Semi-dual objective
// ---------------------------------------------------------------------------

/// Dual potential over source atoms.
#[derive(Debug, Clone)]
pub struct DualPotential {
    pub beta: Vec<f64>,
    pub epsilon: f64,
}

/// Soft c-transform `beta^c_eps(x_t_j)`: the hard min `min_i (C_ij - beta_i)`
/// at `eps = 0`, otherwise `-eps ln E_{i~mu}[exp((beta_i - C_ij)/eps)]`.
fn c_transform(beta: &[f64], problem: &TransportProblem, j: usize) -> f64 {
    let m = problem.cost.rows();
    if problem.epsilon == 0.0 {
        return (0..m)
            .map(|i| problem.cost.get(i, j) - beta[i])
            .fold(f64::INFINITY, f64::min);
    }
    let eps = problem.epsilon;
    let lse = logsumexp((0..m).filter(|&i| problem.mu[i] > 0.0).map(|i| {
        problem.mu[i].ln() + (beta[i] - problem.cost.get(i, j)) / eps
    }));
    -eps * lse
}

/// Semi-dual objective `sum_i mu_i beta_i + sum_j nu_j beta^c_eps(x_t_j)`.
/// Its maximum over `beta` equals the entropic primal up to the constant
/// `eps * (H(mu) + H(nu))` that separates the negentropy and KL conventions.
pub fn dual_objective(potential: &DualPotential, problem: &TransportProblem) -> f64 {
    assert_eq!(potential.beta.len(), problem.cost.rows(), "beta length mismatch");
    let primal_part: f64 = potential
        .beta
        .iter()
        .zip(&problem.mu)
        .map(|(&b, &m)| m * b)
        .sum();
    let dual_part: f64 = (0..problem.cost.cols())
        .map(|j| problem.nu[j] * c_transform(&potential.beta, problem, j))
        .sum();
    primal_part + dual_part
}

/// Gradient of [`dual_objective`] with respect to `beta` (for `eps > 0`):
/// `mu_i - sum_j nu_j w_ij` with `w_ij` the softmax weights of the
/// c-transform expectation.
pub fn dual_gradient(potential: &DualPotential, problem: &TransportProblem) -> Vec<f64> {
    let eps = problem.epsilon;
    assert!(eps > 0.0, "dual gradient needs eps > 0 (hard min is not smooth)");
    let (m, n) = problem.cost.shape();
    let mut grad: Vec<f64> = problem.mu.clone();
    for j in 0..n {
        // Softmax over i of ln mu_i + (beta_i - C_ij)/eps.
        let logits: Vec<f64> = (0..m)
            .map(|i| {
                if problem.mu[i] > 0.0 {
                    problem.mu[i].ln() + (potential.beta[i] - problem.cost.get(i, j)) / eps
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let lse = logsumexp(logits.iter().copied());
        for i in 0..m {
            if logits[i].is_finite() {
                grad[i] -= problem.nu[j] * (logits[i] - lse).exp();
            }
        }
    }
    grad
}

/// Plain gradient ascent on the semi-dual. Returns the final potential and
/// the objective trace (one entry per iteration).
pub fn maximize_dual(
    problem: &TransportProblem,
    iters: usize,
    lr: f64,
) -> (DualPotential, Vec<f64>) {
    let mut potential = DualPotential {
        beta: vec![0.0; problem.cost.rows()],
        epsilon: problem.epsilon,
    };
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let grad = dual_gradient(&potential, problem);
        for (b, g) in potential.beta.iter_mut().zip(&grad) {
            *b += lr * g;
        }
        trace.push(dual_objective(&potential, problem));
    }
    (potential, trace)
}

// ---------------------------------------------------------------------------
// Selective OT loss on the tape
// ---------------------------------------------------------------------------

/// One source block for [`selot_loss`]: tracked embeddings plus tracked
/// selector weights (`s_global_k` as a `1x1` node, `s_local` as `n_k x 1`).
pub struct SelotSource {
    pub embeddings: ValueId,
    pub s_global: ValueId,
    pub s_local: ValueId,
}

/// Outcome of a selective-OT evaluation: the tracked loss and the solved
/// plan (whose potentials can warm-start the next solve).
pub struct SelotOutcome {
    pub loss: ValueId,
    pub plan: TransportPlan,
}

/// Tracked pairwise squared distances between two embedding matrices,
/// max(0, |x|^2 + |y|^2 - 2 x.y) assembled from tape primitives.
pub fn cost_matrix_on_tape(tape: &Tape, xs: ValueId, xt: ValueId) -> ValueId {
    let (m, d) = tape.shape(xs);
    let (n, d2) = tape.shape(xt);
    assert_eq!(d, d2, "cost_matrix_on_tape: embedding dims differ");
    let ones_d1 = tape.constant(Matrix::ones(d, 1));
    let sq_s = tape.matmul(tape.square(xs), ones_d1); // m x 1
    let sq_t = tape.matmul(tape.square(xt), ones_d1); // n x 1
    let ones_1n = tape.constant(Matrix::ones(1, n));
    let ones_m1 = tape.constant(Matrix::ones(m, 1));
    let a = tape.matmul(sq_s, ones_1n); // m x n of |x_i|^2
    let b = tape.matmul(ones_m1, tape.transpose(sq_t)); // m x n of |y_j|^2
    let cross = tape.matmul(xs, tape.transpose(xt));
    let raw = tape.add(tape.sub(a, tape.scalar_mul(cross, 2.0)), b);
    // Cancellation can leave tiny negatives where points coincide; clamp.
    tape.relu(raw)
}

/// Selective entropic OT loss `sum_k <Gamma_k, C^sel_k>`.
///
/// Per source `k`, the cost block is `C_k[v][j] * s_global_k * s_local_k[v]`
/// (all tracked). The blocks are stacked into one transport problem with
/// uniform marginals over all stacked source nodes and over target nodes,
/// solved off-tape, and the plan re-enters the tape as a constant, so
/// gradients flow through the cost entries only.
pub fn selot_loss(
    tape: &Tape,
    sources: &[SelotSource],
    target_embeddings: ValueId,
    epsilon: f64,
    options: &SinkhornOptions,
    warm: Option<(&[f64], &[f64])>,
) -> Result<SelotOutcome> {
    if sources.is_empty() {
        return Err(SelmagError::InvalidArgument {
            op: "selot_loss",
            details: "need at least one source".into(),
        });
    }
    let n_t = tape.shape(target_embeddings).0;
    if n_t == 0 {
        return Err(SelmagError::InvalidArgument {
            op: "selot_loss",
            details: "target has no nodes".into(),
        });
    }

    // Tracked selective cost per source block.
    let mut block_costs = Vec::with_capacity(sources.len());
    let mut block_rows = Vec::with_capacity(sources.len());
    for src in sources {
        let (n_k, _) = tape.shape(src.embeddings);
        assert!(n_k > 0, "selot_loss: empty source block");
        assert_eq!(tape.shape(src.s_global), (1, 1), "s_global block must be 1x1");
        assert_eq!(tape.shape(src.s_local), (n_k, 1), "s_local must be n_k x 1");
        let c = cost_matrix_on_tape(tape, src.embeddings, target_embeddings);
        let scaled_local = tape.matmul(src.s_local, src.s_global); // n_k x 1
        let ones_1n = tape.constant(Matrix::ones(1, n_t));
        let weights = tape.matmul(scaled_local, ones_1n); // n_k x n_t
        block_costs.push(tape.mul_elem(c, weights));
        block_rows.push(n_k);
    }

    // Assemble the stacked problem off-tape.
    let total_rows: usize = block_rows.iter().sum();
    let mut stacked = Matrix::zeros(total_rows, n_t);
    let mut offset = 0usize;
    for (cid, &rows) in block_costs.iter().zip(&block_rows) {
        tape.with_value(*cid, |c| {
            for i in 0..rows {
                stacked.row_mut(offset + i).copy_from_slice(c.row(i));
            }
        });
        offset += rows;
    }
    let problem = TransportProblem {
        cost: stacked,
        mu: vec![1.0 / total_rows as f64; total_rows],
        nu: vec![1.0 / n_t as f64; n_t],
        epsilon,
    };
    let plan = sinkhorn_warm(&problem, options, warm)?;

    // Re-enter the plan as constants and contract against the tracked costs.
    let mut loss: Option<ValueId> = None;
    let mut offset = 0usize;
    for (cid, &rows) in block_costs.iter().zip(&block_rows) {
        let mut block = Matrix::zeros(rows, n_t);
        for i in 0..rows {
            block.row_mut(i).copy_from_slice(plan.gamma.row(offset + i));
        }
        offset += rows;
        let gamma_k = tape.constant(block);
        let term = tape.sum(tape.mul_elem(gamma_k, *cid));
        loss = Some(match loss {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }

    Ok(SelotOutcome {
        loss: loss.expect("at least one source"),
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_err};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    fn random_problem(seed: u64, m: usize, n: usize, eps: f64) -> TransportProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TransportProblem {
            cost: Matrix::from_fn(m, n, |_, _| rng.gen_range(0.0..1.0)),
            mu: uniform(m),
            nu: uniform(n),
            epsilon: eps,
        }
    }

    #[test]
    fn cost_matrix_basics() {
        let x = Matrix::new(1, 1, vec![0.0]);
        let y = Matrix::new(1, 1, vec![3.0]);
        assert_eq!(cost_matrix(&x, &x).data(), &[0.0]);
        assert_eq!(cost_matrix(&x, &y).data(), &[9.0]);

        let pts = Matrix::new(3, 2, vec![0.0, 0.0, 1.0, 2.0, -1.0, 0.5]);
        let c = cost_matrix(&pts, &pts);
        for i in 0..3 {
            assert_eq!(c.get(i, i), 0.0);
            for j in 0..3 {
                assert!((c.get(i, j) - c.get(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selective_cost_scales_rows() {
        let c = Matrix::new(2, 1, vec![4.0, 4.0]);
        let out = selective_cost(&c, 0.5, &[0.2, 1.0]).unwrap();
        assert!((out.get(0, 0) - 0.4).abs() < 1e-12);
        assert!((out.get(1, 0) - 2.0).abs() < 1e-12);
        // Identity weights leave the matrix unchanged.
        let same = selective_cost(&c, 1.0, &[1.0, 1.0]).unwrap();
        assert_eq!(same.data(), c.data());
        // Scaling s_global scales every entry.
        let doubled = selective_cost(&c, 1.0, &[0.2, 1.0]).unwrap();
        for (a, b) in out.data().iter().zip(doubled.data()) {
            assert!((a * 2.0 - b).abs() < 1e-12);
        }
        assert!(selective_cost(&c, 0.0, &[1.0, 1.0]).is_err());
        assert!(selective_cost(&c, 1.0, &[1.0, -0.1]).is_err());
    }

    #[test]
    fn sinkhorn_one_by_one_is_forced() {
        let p = TransportProblem {
            cost: Matrix::scalar(3.7),
            mu: vec![1.0],
            nu: vec![1.0],
            epsilon: 0.5,
        };
        let plan = sinkhorn(&p, &SinkhornOptions::default()).unwrap();
        assert!(plan.converged);
        assert!((plan.gamma.item() - 1.0).abs() < 1e-9);
        assert!((plan.transport_cost(&p.cost) - 3.7).abs() < 1e-9);
    }

    #[test]
    fn sinkhorn_small_eps_recovers_the_assignment() {
        let p = TransportProblem {
            cost: Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]),
            mu: uniform(2),
            nu: uniform(2),
            epsilon: 1e-3,
        };
        let plan = sinkhorn(&p, &SinkhornOptions::default()).unwrap();
        assert!(plan.converged);
        assert!((plan.gamma.get(0, 0) - 0.5).abs() < 1e-6);
        assert!(plan.gamma.get(0, 1) < 1e-6);
        assert!(plan.transport_cost(&p.cost) < 1e-4);
    }

    #[test]
    fn sinkhorn_marginals_meet_tolerance() {
        for seed in 0..5u64 {
            let p = random_problem(seed, 4, 6, 0.05);
            let plan = sinkhorn(&p, &SinkhornOptions::default()).unwrap();
            assert!(plan.converged, "seed {seed} did not converge");
            for i in 0..4 {
                let row: f64 = plan.gamma.row(i).iter().sum();
                assert!((row - p.mu[i]).abs() < 1e-9);
            }
            for j in 0..6 {
                let col: f64 = (0..4).map(|i| plan.gamma.get(i, j)).sum();
                assert!((col - p.nu[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sinkhorn_matches_exact_oracle_at_small_eps() {
        for seed in 0..20u64 {
            let p = random_problem(100 + seed, 3, 4, 1e-3);
            let plan = sinkhorn(&p, &SinkhornOptions::default()).unwrap();
            let exact = exact_ot_oracle(&p.cost, &p.mu, &p.nu).unwrap();
            let diff = (plan.transport_cost(&p.cost) - exact).abs();
            assert!(diff < 1e-3, "seed {seed}: |{} - {exact}| = {diff}", plan.transport_cost(&p.cost));
            // The entropic plan is feasible, so it can never beat the oracle.
            assert!(plan.transport_cost(&p.cost) >= exact - 1e-9);
        }
    }

    #[test]
    fn large_eps_plan_approaches_product_of_marginals() {
        let p = TransportProblem {
            cost: Matrix::new(3, 3, vec![0.3, 0.9, 0.1, 0.5, 0.2, 0.8, 0.7, 0.4, 0.6]),
            mu: uniform(3),
            nu: uniform(3),
            epsilon: 100.0,
        };
        let plan = sinkhorn(&p, &SinkhornOptions::default()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((plan.gamma.get(i, j) - 1.0 / 9.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn solver_makes_monotone_progress_on_its_objective() {
        // The dual objective is the quantity Sinkhorn provably ascends
        // (exact block-coordinate maximization); the transport part at the
        // iterates oscillates slightly near convergence and is only
        // monotone in the net (cold start to limit).
        let opts = SinkhornOptions {
            record_trace: true,
            max_iters: 200_000,
            ..SinkhornOptions::default()
        };
        for seed in 0..5u64 {
            let p = random_problem(200 + seed, 4, 4, 0.02);
            let plan = sinkhorn(&p, &opts).unwrap();
            // Degenerate instances close their marginals only at ~1/iters,
            // so do not insist on the 1e-9 flag; demand good marginals.
            for i in 0..4 {
                let row: f64 = plan.gamma.row(i).iter().sum();
                assert!((row - p.mu[i]).abs() < 1e-4);
            }
            for w in plan.dual_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "seed {seed}: dual {} -> {}", w[0], w[1]);
            }
            // The transport part is convergent but not monotone (early
            // infeasible iterates can even undercut the limit); assert it
            // settles: the last quarter of the trace is flat.
            let tail = &plan.trace[plan.trace.len() * 3 / 4..];
            let lo = tail.iter().fold(f64::INFINITY, |a, &v| a.min(v));
            let hi = tail.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            assert!(hi - lo < 1e-6, "seed {seed}: transport tail fluctuates by {}", hi - lo);
            // At convergence the dual meets the entropic primal.
            let dual_last = *plan.dual_trace.last().unwrap();
            assert!((dual_last - plan.cost_value).abs() < 1e-6);
        }
    }

    #[test]
    fn warm_start_converges_faster_on_a_nearby_problem() {
        let p = random_problem(7, 5, 5, 0.01);
        let cold = sinkhorn(&p, &SinkhornOptions::default()).unwrap();
        let mut p2 = p.clone();
        for v in p2.cost.data_mut() {
            *v += 1e-4;
        }
        let warm = sinkhorn_warm(
            &p2,
            &SinkhornOptions::default(),
            Some((&cold.f_potential, &cold.g_potential)),
        )
        .unwrap();
        let cold2 = sinkhorn(&p2, &SinkhornOptions::default()).unwrap();
        assert!(warm.converged);
        assert!(warm.iterations <= cold2.iterations);
    }

    #[test]
    fn oracle_hand_cases() {
        // Forced rows: 1 x n.
        let c = Matrix::new(1, 3, vec![2.0, 4.0, 6.0]);
        let nu = vec![0.5, 0.25, 0.25];
        let v = exact_ot_oracle(&c, &[1.0], &nu).unwrap();
        assert!((v - (0.5 * 2.0 + 0.25 * 4.0 + 0.25 * 6.0)).abs() < 1e-12);

        // Permutation-friendly cost with uniform marginals: the assignment.
        let c = Matrix::new(3, 3, vec![0.0, 5.0, 5.0, 5.0, 0.0, 5.0, 5.0, 5.0, 0.0]);
        let v = exact_ot_oracle(&c, &uniform(3), &uniform(3)).unwrap();
        assert!(v.abs() < 1e-12);

        // 2x2 with an interior optimum, solvable by hand:
        // mu = (0.7, 0.3), nu = (0.4, 0.6), C = [[1, 2], [3, 1]].
        // gamma = [[0.4, 0.3], [0, 0.3]] -> 0.4 + 0.6 + 0.3 = 1.3.
        let c = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 1.0]);
        let v = exact_ot_oracle(&c, &[0.7, 0.3], &[0.4, 0.6]).unwrap();
        assert!((v - 1.3).abs() < 1e-9, "got {v}");

        assert!(exact_ot_oracle(&Matrix::zeros(7, 3), &uniform(7), &uniform(3)).is_err());
    }

    #[test]
    fn dual_objective_hand_cases() {
        // eps = 0, beta = 0: sum_j nu_j min_i C_ij.
        let p = TransportProblem {
            cost: Matrix::new(2, 2, vec![1.0, 4.0, 2.0, 3.0]),
            mu: uniform(2),
            nu: uniform(2),
            epsilon: 0.0,
        };
        let d = dual_objective(
            &DualPotential {
                beta: vec![0.0, 0.0],
                epsilon: 0.0,
            },
            &p,
        );
        assert!((d - 0.5 * (1.0 + 3.0)).abs() < 1e-12);

        // 1x1 at eps = 0: b + (c - b) = c for any b.
        let p1 = TransportProblem {
            cost: Matrix::scalar(2.5),
            mu: vec![1.0],
            nu: vec![1.0],
            epsilon: 0.0,
        };
        for b in [-1.0, 0.0, 3.7] {
            let d = dual_objective(
                &DualPotential {
                    beta: vec![b],
                    epsilon: 0.0,
                },
                &p1,
            );
            assert!((d - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_ascent_reaches_the_entropic_primal() {
        // The semi-dual maximum equals cost_value + eps (H(mu) + H(nu));
        // at eps = 1e-3 on 3x3 uniform that offset is ~2.2e-3, well inside
        // the 1e-2 comparison budget. At this eps the marginals close only
        // at ~1/iters, so the plan misses the 1e-9 flag, but cost_value is
        // already accurate to ~5e-6 after the default budget.
        let p = random_problem(42, 3, 3, 1e-3);
        let plan = sinkhorn(&p, &SinkhornOptions::default()).unwrap();
        let (_, trace) = maximize_dual(&p, 20_000, 0.05);
        let best = trace.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let gap = (best - plan.cost_value).abs();
        assert!(gap < 1e-2, "primal-dual gap {gap}");
    }

    #[test]
    fn dual_gradient_matches_finite_differences() {
        let p = random_problem(3, 4, 3, 0.05);
        let beta0 = vec![0.1, -0.2, 0.05, 0.3];
        let grad = dual_gradient(
            &DualPotential {
                beta: beta0.clone(),
                epsilon: p.epsilon,
            },
            &p,
        );
        let mut f = |m: &Matrix| {
            dual_objective(
                &DualPotential {
                    beta: m.data().to_vec(),
                    epsilon: p.epsilon,
                },
                &p,
            )
        };
        let oracle = finite_diff_grad(&mut f, &Matrix::new(1, 4, beta0), 1e-6);
        let got = Matrix::new(1, 4, grad);
        assert!(max_rel_err(&got, &oracle) < 1e-6);
    }

    // -- selective OT loss on the tape --------------------------------------

    fn tape_weights(tape: &Tape, n: usize) -> (ValueId, ValueId) {
        let s_g = tape.input(Matrix::scalar(1.0));
        let s_l = tape.input(Matrix::ones(n, 1));
        (s_g, s_l)
    }

    #[test]
    fn identical_clouds_give_near_zero_loss() {
        let tape = Tape::new();
        let pts = Matrix::new(3, 2, vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0]);
        let xs = tape.constant(pts.clone());
        let xt = tape.constant(pts);
        let (s_g, s_l) = tape_weights(&tape, 3);
        let out = selot_loss(
            &tape,
            &[SelotSource {
                embeddings: xs,
                s_global: s_g,
                s_local: s_l,
            }],
            xt,
            1e-4,
            &SinkhornOptions::default(),
            None,
        )
        .unwrap();
        assert!(tape.item(out.loss).abs() < 1e-3, "loss {}", tape.item(out.loss));
    }

    #[test]
    fn scaling_weights_with_co_scaled_eps_scales_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xs_m = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let xt_m = Matrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let t = 3.0;

        let run = |scale: f64, eps: f64| -> f64 {
            let tape = Tape::new();
            let xs = tape.constant(xs_m.clone());
            let xt = tape.constant(xt_m.clone());
            let s_g = tape.input(Matrix::scalar(scale));
            let s_l = tape.input(Matrix::ones(4, 1));
            let out = selot_loss(
                &tape,
                &[SelotSource {
                    embeddings: xs,
                    s_global: s_g,
                    s_local: s_l,
                }],
                xt,
                eps,
                &SinkhornOptions::default(),
                None,
            )
            .unwrap();
            tape.item(out.loss)
        };
        let base = run(0.7, 0.01);
        let scaled = run(0.7 * t, 0.01 * t);
        assert!(
            (scaled - t * base).abs() < 1e-6 * t.max(1.0),
            "{scaled} vs {}",
            t * base
        );
    }

    #[test]
    fn selot_gradient_wrt_embeddings_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let xs_m = Matrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let xt_m = Matrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));

        let eval = |xt_val: &Matrix| -> f64 {
            let tape = Tape::new();
            let xs = tape.constant(xs_m.clone());
            let xt = tape.input(xt_val.clone());
            let s_g = tape.input(Matrix::scalar(0.8));
            let s_l = tape.input(Matrix::new(3, 1, vec![0.5, 1.0, 1.5]));
            let out = selot_loss(
                &tape,
                &[SelotSource {
                    embeddings: xs,
                    s_global: s_g,
                    s_local: s_l,
                }],
                xt,
                0.01,
                &SinkhornOptions::default(),
                None,
            )
            .unwrap();
            tape.item(out.loss)
        };

        let tape = Tape::new();
        let xs = tape.constant(xs_m.clone());
        let xt = tape.input(xt_m.clone());
        let s_g = tape.input(Matrix::scalar(0.8));
        let s_l = tape.input(Matrix::new(3, 1, vec![0.5, 1.0, 1.5]));
        let out = selot_loss(
            &tape,
            &[SelotSource {
                embeddings: xs,
                s_global: s_g,
                s_local: s_l,
            }],
            xt,
            0.01,
            &SinkhornOptions::default(),
            None,
        )
        .unwrap();
        let grads = tape.backward(out.loss);
        let got = grads.grad(xt).unwrap().clone();
        let oracle = finite_diff_grad(&mut |m| eval(m), &xt_m, 1e-5);
        let err = max_rel_err(&got, &oracle);
        assert!(err < 1e-2, "rel err {err}");
    }

    #[test]
    fn selot_gradient_wrt_selector_weights_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let xs_m = Matrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let xt_m = Matrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));

        let eval = |sl: &Matrix| -> f64 {
            let tape = Tape::new();
            let xs = tape.constant(xs_m.clone());
            let xt = tape.constant(xt_m.clone());
            let s_g = tape.input(Matrix::scalar(0.8));
            let s_l = tape.input(sl.clone());
            let out = selot_loss(
                &tape,
                &[SelotSource {
                    embeddings: xs,
                    s_global: s_g,
                    s_local: s_l,
                }],
                xt,
                0.01,
                &SinkhornOptions::default(),
                None,
            )
            .unwrap();
            tape.item(out.loss)
        };

        let sl0 = Matrix::new(3, 1, vec![0.5, 1.0, 1.5]);
        let tape = Tape::new();
        let xs = tape.constant(xs_m.clone());
        let xt = tape.constant(xt_m.clone());
        let s_g = tape.input(Matrix::scalar(0.8));
        let s_l = tape.input(sl0.clone());
        let out = selot_loss(
            &tape,
            &[SelotSource {
                embeddings: xs,
                s_global: s_g,
                s_local: s_l,
            }],
            xt,
            0.01,
            &SinkhornOptions::default(),
            None,
        )
        .unwrap();
        let grads = tape.backward(out.loss);
        let got = grads.grad(s_l).unwrap().clone();
        let oracle = finite_diff_grad(&mut |m| eval(m), &sl0, 1e-5);
        let err = max_rel_err(&got, &oracle);
        assert!(err < 1e-2, "rel err {err}");
    }

    #[test]
    fn rejects_bad_problems() {
        let p = TransportProblem {
            cost: Matrix::new(1, 1, vec![1.0]),
            mu: vec![0.5],
            nu: vec![1.0],
            epsilon: 0.1,
        };
        assert!(sinkhorn(&p, &SinkhornOptions::default()).is_err());
        let p = TransportProblem {
            cost: Matrix::new(1, 1, vec![1.0]),
            mu: vec![1.0],
            nu: vec![1.0],
            epsilon: 0.0,
        };
        assert!(sinkhorn(&p, &SinkhornOptions::default()).is_err());
    }
}
