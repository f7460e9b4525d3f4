//! Transportation simplex on the bipartite supply/demand graph.
//!
//! The basis is a spanning tree of `m + n - 1` cells. Each pivot computes
//! node potentials on the tree, enters the most negative reduced cost and
//! pushes flow around the unique tree cycle. After a fixed number of
//! pivots the entering rule switches to the first negative cell, which
//! together with the smallest-index leaving rule rules out cycling.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TransportSolution {
    pub value: f64,
    /// `plan[i][j]`, rows are supplies.
    pub plan: Vec<Vec<f64>>,
    /// Row potentials; `u[0] = 0`.
    pub u: Vec<f64>,
    /// Column potentials; `u[i] + v[j] <= cost[i][j]` with equality on the
    /// support of the plan.
    pub v: Vec<f64>,
}

/// Minimizes `sum plan[i][j] cost[i][j]` subject to row sums `a` and column
/// sums `b`. Both weight vectors must have the same total.
pub fn transport(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> Result<TransportSolution> {
    let (m, n) = (a.len(), b.len());
    if m == 0 || n == 0 || cost.len() != m || cost.iter().any(|r| r.len() != n) {
        return Err(Error::shape("transport", format!("{m} x {n} problem with cost {}", cost.len())));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::invalid("transport", "non-finite cost"));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-12 * sa.abs().max(1.0) {
        return Err(Error::invalid("transport", format!("unbalanced totals {sa} vs {sb}")));
    }

    let mut flow = vec![vec![0.0; n]; m];
    let mut basic = vec![vec![false; n]; m];
    north_west(a, b, &mut flow, &mut basic);

    let cmax = cost.iter().flatten().fold(0.0f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-12 * (1.0 + cmax);
    let bland_after = 50 * (m + n);
    let max_pivots = 100 * (m + n) * (m + n) + 1000;

    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    for pivot in 0..=max_pivots {
        potentials(cost, &basic, &mut u, &mut v);
        let mut enter = None;
        let mut best = -tol;
        'scan: for i in 0..m {
            for j in 0..n {
                if basic[i][j] {
                    continue;
                }
                let d = cost[i][j] - u[i] - v[j];
                if d < best {
                    enter = Some((i, j));
                    best = d;
                    if pivot >= bland_after {
                        break 'scan;
                    }
                }
            }
        }
        let Some((ei, ej)) = enter else {
            let value = flow
                .iter()
                .zip(cost)
                .map(|(f, c)| f.iter().zip(c).map(|(x, y)| x * y).sum::<f64>())
                .sum();
            return Ok(TransportSolution { value, plan: flow, u, v });
        };

        let path = tree_path(&basic, m, n, ei, ej);
        // edges at odd positions from column ej lose flow
        let mut theta = f64::INFINITY;
        let mut leave = None;
        for (k, &(i, j)) in path.iter().enumerate() {
            if k % 2 == 0 {
                let f = flow[i][j];
                let better = match leave {
                    None => true,
                    Some((li, lj)) => f < theta || (f == theta && (i, j) < (li, lj)),
                };
                if better {
                    theta = f;
                    leave = Some((i, j));
                }
            }
        }
        let (li, lj) = leave.expect("cycle has a decreasing edge");
        for (k, &(i, j)) in path.iter().enumerate() {
            if k % 2 == 0 {
                flow[i][j] = (flow[i][j] - theta).max(0.0);
            } else {
                flow[i][j] += theta;
            }
        }
        flow[ei][ej] = theta;
        basic[ei][ej] = true;
        basic[li][lj] = false;
        flow[li][lj] = 0.0;
    }
    Err(Error::invalid("transport", "pivot limit reached"))
}

fn north_west(a: &[f64], b: &[f64], flow: &mut [Vec<f64>], basic: &mut [Vec<bool>]) {
    let (m, n) = (a.len(), b.len());
    let (mut ra, mut rb) = (a.to_vec(), b.to_vec());
    let (mut i, mut j) = (0, 0);
    loop {
        let x = ra[i].min(rb[j]);
        flow[i][j] = x;
        basic[i][j] = true;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if (ra[i] <= rb[j] && i < m - 1) || j == n - 1 {
            rb[j] -= x;
            ra[i] = 0.0;
            i += 1;
        } else {
            ra[i] -= x;
            rb[j] = 0.0;
            j += 1;
        }
    }
}

/// Nodes: rows `0..m`, columns `m..m+n`.
fn adjacency(basic: &[Vec<bool>], m: usize, n: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); m + n];
    for i in 0..m {
        for j in 0..n {
            if basic[i][j] {
                adj[i].push(m + j);
                adj[m + j].push(i);
            }
        }
    }
    adj
}

fn potentials(cost: &[Vec<f64>], basic: &[Vec<bool>], u: &mut [f64], v: &mut [f64]) {
    let (m, n) = (u.len(), v.len());
    let adj = adjacency(basic, m, n);
    let mut seen = vec![false; m + n];
    let mut stack = vec![0];
    seen[0] = true;
    u[0] = 0.0;
    while let Some(node) = stack.pop() {
        for &nb in &adj[node] {
            if seen[nb] {
                continue;
            }
            seen[nb] = true;
            if node < m {
                v[nb - m] = cost[node][nb - m] - u[node];
            } else {
                u[nb] = cost[nb][node - m] - v[node - m];
            }
            stack.push(nb);
        }
    }
    debug_assert!(seen.iter().all(|&s| s), "basis is not spanning");
}

/// Tree edges from column `ej` back to row `ei`, as `(row, col)` cells.
fn tree_path(basic: &[Vec<bool>], m: usize, n: usize, ei: usize, ej: usize) -> Vec<(usize, usize)> {
    let adj = adjacency(basic, m, n);
    let mut parent = vec![usize::MAX; m + n];
    parent[ei] = ei;
    let mut queue = std::collections::VecDeque::from([ei]);
    while let Some(node) = queue.pop_front() {
        if node == m + ej {
            break;
        }
        for &nb in &adj[node] {
            if parent[nb] == usize::MAX {
                parent[nb] = node;
                queue.push_back(nb);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = m + ej;
    while node != ei {
        let p = parent[node];
        path.push(if node < m { (node, p - m) } else { (p, node - m) });
        node = p;
    }
    path
}
