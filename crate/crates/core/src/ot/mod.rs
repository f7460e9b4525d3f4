//! Exact optimal transport between finitely supported distributions.

mod simplex;

pub use simplex::{transport, TransportSolution};

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Largest support accepted by the solvers.
pub const MAX_SUPPORT: usize = 64;
/// Allowed deviation of weight sums from one.
pub const WEIGHT_TOL: f64 = 1e-12;
/// Slack of the support-pair Lipschitz check on witnesses.
pub const LIPSCHITZ_TOL: f64 = 1e-9;

/// `||a - b||_p`, `p = inf` allowed.
pub fn ground_distance(a: &[f64], b: &[f64], p: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if p.is_infinite() {
        a.iter().zip(b).fold(0.0, |m, (u, v)| m.max((u - v).abs()))
    } else if p == 1.0 {
        a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum()
    } else {
        a.iter()
            .zip(b)
            .map(|(u, v)| (u - v).abs().powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePdf {
    pub support: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DiscretePdf {
    pub fn new(support: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let d = DiscretePdf { support, weights };
        d.validate()?;
        Ok(d)
    }

    pub fn dirac(point: Vec<f64>) -> Self {
        DiscretePdf {
            support: vec![point],
            weights: vec![1.0],
        }
    }

    /// Scalar support points.
    pub fn scalars(points: &[f64], weights: &[f64]) -> Result<Self> {
        Self::new(points.iter().map(|&v| vec![v]).collect(), weights.to_vec())
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("discrete-pdf", m));
        let n = self.support.len();
        if n == 0 || n > MAX_SUPPORT {
            return bad(format!("support size {n} outside 1..={MAX_SUPPORT}"));
        }
        if self.weights.len() != n {
            return bad(format!("{} weights for {n} points", self.weights.len()));
        }
        let d = self.dim();
        if self.support.iter().any(|s| s.len() != d) {
            return bad("support points differ in extent".into());
        }
        if self.support.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite support point".into());
        }
        if self.weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return bad("negative or non-finite weight".into());
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > WEIGHT_TOL {
            return bad(format!("weights sum to {s}, not 1"));
        }
        Ok(())
    }

    pub fn expect(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.support.iter().zip(&self.weights).map(|(s, w)| w * f(s)).sum()
    }
}

/// A discrete joint: each entry is an `X` point, its marginal weight and
/// the conditional distribution of `Y` there.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    pub atoms: Vec<JointAtom>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointAtom {
    pub x: Vec<f64>,
    pub weight: f64,
    pub conditional: DiscretePdf,
}

impl DiscreteJoint {
    pub fn new(atoms: Vec<JointAtom>) -> Result<Self> {
        let j = DiscreteJoint { atoms };
        j.validate()?;
        Ok(j)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("discrete-joint", m));
        if self.atoms.is_empty() || self.atoms.len() > MAX_SUPPORT {
            return bad(format!("{} X points", self.atoms.len()));
        }
        let s: f64 = self.atoms.iter().map(|a| a.weight).sum();
        if (s - 1.0).abs() > WEIGHT_TOL || self.atoms.iter().any(|a| !(a.weight >= 0.0)) {
            return bad(format!("marginal weights sum to {s}, not 1"));
        }
        let (dx, dy) = (self.atoms[0].x.len(), self.atoms[0].conditional.dim());
        for a in &self.atoms {
            a.conditional.validate()?;
            if a.x.len() != dx || a.conditional.dim() != dy {
                return bad("atoms differ in extent".into());
            }
        }
        Ok(())
    }

    /// Flattened `(x, y)` support with joint weights.
    pub fn flatten(&self) -> (Vec<(&[f64], &[f64])>, Vec<f64>) {
        let mut pts = Vec::new();
        let mut w = Vec::new();
        for a in &self.atoms {
            for (y, wy) in a.conditional.support.iter().zip(&a.conditional.weights) {
                pts.push((a.x.as_slice(), y.as_slice()));
                w.push(a.weight * wy);
            }
        }
        (pts, w)
    }

    /// The `Y` marginal.
    pub fn y_marginal(&self) -> Result<DiscretePdf> {
        let (pts, w) = self.flatten();
        let s: f64 = w.iter().sum();
        DiscretePdf::new(
            pts.iter().map(|(_, y)| y.to_vec()).collect(),
            w.iter().map(|v| v / s).collect(),
        )
    }
}

/// An optimal coupling `pi[j][k]` with its value.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMatrix {
    pub pi: Vec<Vec<f64>>,
}

impl CouplingMatrix {
    pub fn row_sums(&self) -> Vec<f64> {
        self.pi.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let n = self.pi.first().map_or(0, Vec::len);
        (0..n).map(|k| self.pi.iter().map(|r| r[k]).sum()).collect()
    }

    pub fn cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pi
            .iter()
            .zip(cost)
            .map(|(r, c)| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

pub fn cost_matrix(p: &DiscretePdf, q: &DiscretePdf, ground_p: f64, order_r: f64) -> Result<Vec<Vec<f64>>> {
    if p.dim() != q.dim() {
        return Err(Error::shape("wasserstein", format!("point extents {} vs {}", p.dim(), q.dim())));
    }
    Ok(p.support
        .iter()
        .map(|a| {
            q.support
                .iter()
                .map(|b| ground_distance(a, b, ground_p).powf(order_r))
                .collect()
        })
        .collect())
}

fn check_orders(ground_p: f64, order_r: f64) -> Result<()> {
    if !(ground_p >= 1.0) || !(order_r >= 1.0) || !order_r.is_finite() {
        return Err(Error::invalid(
            "wasserstein",
            format!("need ground p >= 1 and order r >= 1, got p={ground_p} r={order_r}"),
        ));
    }
    Ok(())
}

/// `W_r(P, Q)` with `||.||_p` ground distance and an optimal coupling.
pub fn wasserstein_exact(
    p: &DiscretePdf,
    q: &DiscretePdf,
    ground_p: f64,
    order_r: f64,
) -> Result<(f64, CouplingMatrix)> {
    check_orders(ground_p, order_r)?;
    p.validate()?;
    q.validate()?;
    // Solve in a canonical argument order so that W(P, Q) == W(Q, P) bitwise.
    if canonical_order(q, p) == Ordering::Less {
        let (v, c) = wasserstein_exact(q, p, ground_p, order_r)?;
        let n = c.pi.first().map_or(0, Vec::len);
        let pi = (0..n).map(|k| c.pi.iter().map(|r| r[k]).collect()).collect();
        return Ok((v, CouplingMatrix { pi }));
    }
    let cost = cost_matrix(p, q, ground_p, order_r)?;
    let sol = transport(&p.weights, &q.weights, &cost)?;
    Ok((sol.value.max(0.0).powf(1.0 / order_r), CouplingMatrix { pi: sol.plan }))
}

fn canonical_order(a: &DiscretePdf, b: &DiscretePdf) -> Ordering {
    let key = |d: &DiscretePdf| -> Vec<f64> {
        d.support.iter().flatten().chain(&d.weights).copied().collect()
    };
    let (ka, kb) = (key(a), key(b));
    ka.len()
        .cmp(&kb.len())
        .then_with(|| ka.iter().zip(&kb).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal))
}

/// `W_1(P, Q) - (E_P D - E_Q D)`. The witness is checked to be 1-Lipschitz
/// over all pairs of support points.
pub fn kr_dual_gap(
    p: &DiscretePdf,
    q: &DiscretePdf,
    ground_p: f64,
    witness: impl Fn(&[f64]) -> f64,
) -> Result<f64> {
    let (w, _) = wasserstein_exact(p, q, ground_p, 1.0)?;
    let pts: Vec<&Vec<f64>> = p.support.iter().chain(&q.support).collect();
    let vals: Vec<f64> = pts.iter().map(|s| witness(s)).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("kr_dual_gap", "witness is not finite on the support"));
    }
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = ground_distance(pts[i], pts[j], ground_p);
            if (vals[i] - vals[j]).abs() > d + LIPSCHITZ_TOL {
                return Err(Error::invalid(
                    "kr_dual_gap",
                    format!(
                        "witness is not 1-Lipschitz: |D(a) - D(b)| = {} > {d}",
                        (vals[i] - vals[j]).abs()
                    ),
                ));
            }
        }
    }
    Ok(w - (p.expect(&witness) - q.expect(&witness)))
}

/// A 1-Lipschitz witness attaining `W_1(P, Q)`, built as the c-transform of
/// the optimal dual potentials: `D(z) = min_k (||z - q_k||_p - v_k)`.
pub fn optimal_witness(p: &DiscretePdf, q: &DiscretePdf, ground_p: f64) -> Result<impl Fn(&[f64]) -> f64> {
    p.validate()?;
    q.validate()?;
    let cost = cost_matrix(p, q, ground_p, 1.0)?;
    let sol = transport(&p.weights, &q.weights, &cost)?;
    let pts = q.support.clone();
    let v = sol.v;
    Ok(move |z: &[f64]| {
        pts.iter()
            .zip(&v)
            .map(|(qk, vk)| ground_distance(z, qk, ground_p) - vk)
            .fold(f64::INFINITY, f64::min)
    })
}

fn check_same_marginal(a: &DiscreteJoint, b: &DiscreteJoint) -> Result<()> {
    a.validate()?;
    b.validate()?;
    let same = a.atoms.len() == b.atoms.len()
        && a.atoms.iter().zip(&b.atoms).all(|(u, v)| {
            u.x == v.x && (u.weight - v.weight).abs() <= WEIGHT_TOL
        });
    if !same {
        return Err(Error::invalid("jw_exact", "joints do not share the same X marginal"));
    }
    Ok(())
}

/// `sum_x P_X(x) W_r(P(.|x), Q(.|x))` for joints with the same `X` marginal.
pub fn jw_exact(a: &DiscreteJoint, b: &DiscreteJoint, ground_p: f64, order_r: f64) -> Result<f64> {
    check_same_marginal(a, b)?;
    let mut total = 0.0;
    for (u, v) in a.atoms.iter().zip(&b.atoms) {
        total += u.weight * wasserstein_exact(&u.conditional, &v.conditional, ground_p, order_r)?.0;
    }
    Ok(total)
}

/// `W_1` between the full joints under the ground cost
/// `sqrt(||dY||_p^2 + ||dX / sigma||_s^2)`.
pub fn jw2_exact(a: &DiscreteJoint, b: &DiscreteJoint, sigma: f64, ground_p: f64, s: f64) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    check_orders(ground_p, 1.0)?;
    if !(sigma > 0.0) || !(s >= 1.0) {
        return Err(Error::invalid("jw2_exact", format!("need sigma > 0 and s >= 1, got {sigma}, {s}")));
    }
    let (pa, wa) = a.flatten();
    let (pb, wb) = b.flatten();
    if pa.len() > MAX_SUPPORT || pb.len() > MAX_SUPPORT {
        return Err(Error::invalid("jw2_exact", "joint support exceeds the solver limit"));
    }
    if pa[0].0.len() != pb[0].0.len() || pa[0].1.len() != pb[0].1.len() {
        return Err(Error::shape("jw2_exact", "joint extents differ".to_string()));
    }
    let cost: Vec<Vec<f64>> = pa
        .iter()
        .map(|(xa, ya)| {
            pb.iter()
                .map(|(xb, yb)| {
                    let dy = ground_distance(ya, yb, ground_p);
                    let dx = ground_distance(xa, xb, s) / sigma;
                    (dy * dy + dx * dx).sqrt()
                })
                .collect()
        })
        .collect();
    let sa: f64 = wa.iter().sum();
    let sb: f64 = wb.iter().sum();
    let wa: Vec<f64> = wa.iter().map(|v| v / sa).collect();
    let wb: Vec<f64> = wb.iter().map(|v| v / sb).collect();
    Ok(transport(&wa, &wb, &cost)?.value)
}
