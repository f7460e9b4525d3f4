//! Text descriptions of discrete distributions for the `oracle` command.
//!
//! ```text
//! # header keys
//! p = 2          # ground norm exponent
//! r = 1          # Wasserstein order
//! sigma = 0.01   # X scale of the combined-norm joint distance
//! s = 2          # X norm exponent of the combined-norm joint distance
//! [P]
//! 0 0 : 0.5      # point coordinates, then its weight
//! 2 0 : 0.5
//! [Q]
//! 1 0 : 1
//! [J1]
//! 0 | 1 1 : 0.5  # X coordinates | Y coordinates : joint weight
//! ```
//!
//! `P`/`Q` sections give `W_r(P, Q)`; `J1`/`J2` sections give the joint
//! distance and, with `sigma`, the combined-norm distance. Weights whose
//! sum is within 1e-9 of one are renormalized.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context, Result};
use ghostlab::ot::{
    jw2_exact, jw_exact, kr_dual_gap, optimal_witness, wasserstein_exact, DiscreteJoint, DiscretePdf, JointAtom,
};

const NORMALIZE_TOL: f64 = 1e-9;

#[derive(Debug, Default)]
pub struct OracleSpec {
    pub p: f64,
    pub r: f64,
    pub sigma: Option<f64>,
    pub s: f64,
    pub pdfs: BTreeMap<String, Vec<(Vec<f64>, f64)>>,
    pub joints: BTreeMap<String, Vec<(Vec<f64>, Vec<f64>, f64)>>,
}

fn numbers(s: &str, line: usize) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().with_context(|| format!("line {line}: bad number {t:?}")))
        .collect()
}

pub fn parse(text: &str) -> Result<OracleSpec> {
    let mut spec = OracleSpec {
        p: 2.0,
        r: 1.0,
        s: 2.0,
        ..Default::default()
    };
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            match name.as_str() {
                "P" | "Q" => {
                    spec.pdfs.insert(name.clone(), Vec::new());
                }
                "J1" | "J2" => {
                    spec.joints.insert(name.clone(), Vec::new());
                }
                _ => bail!("line {no}: unknown section [{name}] (expected P, Q, J1 or J2)"),
            }
            section = Some(name);
            continue;
        }
        match &section {
            None => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| anyhow!("line {no}: expected key = value before the first section"))?;
                let v: f64 = v.trim().parse().with_context(|| format!("line {no}: bad value for {}", k.trim()))?;
                match k.trim() {
                    "p" => spec.p = v,
                    "r" => spec.r = v,
                    "sigma" => spec.sigma = Some(v),
                    "s" => spec.s = v,
                    other => bail!("line {no}: unknown key {other:?}"),
                }
            }
            Some(name) => {
                let (pt, w) = line
                    .rsplit_once(':')
                    .ok_or_else(|| anyhow!("line {no}: expected coordinates : weight"))?;
                let w: f64 = w.trim().parse().with_context(|| format!("line {no}: bad weight"))?;
                if let Some(entries) = spec.pdfs.get_mut(name) {
                    entries.push((numbers(pt, no)?, w));
                } else {
                    let (x, y) = pt
                        .split_once('|')
                        .ok_or_else(|| anyhow!("line {no}: joint points are written X | Y : weight"))?;
                    spec.joints
                        .get_mut(name)
                        .expect("section exists")
                        .push((numbers(x, no)?, numbers(y, no)?, w));
                }
            }
        }
    }
    Ok(spec)
}

fn normalized(w: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > NORMALIZE_TOL {
        bail!("{what}: weights sum to {s}, not 1");
    }
    Ok(w.iter().map(|v| v / s).collect())
}

fn pdf(entries: &[(Vec<f64>, f64)], what: &str) -> Result<DiscretePdf> {
    let weights = normalized(entries.iter().map(|e| e.1).collect(), what)?;
    Ok(DiscretePdf::new(entries.iter().map(|e| e.0.clone()).collect(), weights)?)
}

fn joint(entries: &[(Vec<f64>, Vec<f64>, f64)], what: &str) -> Result<DiscreteJoint> {
    let weights = normalized(entries.iter().map(|e| e.2).collect(), what)?;
    let mut atoms: Vec<(Vec<f64>, Vec<(Vec<f64>, f64)>)> = Vec::new();
    for ((x, y, _), w) in entries.iter().zip(weights) {
        match atoms.iter_mut().find(|a| &a.0 == x) {
            Some(a) => a.1.push((y.clone(), w)),
            None => atoms.push((x.clone(), vec![(y.clone(), w)])),
        }
    }
    let atoms = atoms
        .into_iter()
        .map(|(x, ys)| {
            let weight: f64 = ys.iter().map(|e| e.1).sum();
            let conditional = DiscretePdf::new(
                ys.iter().map(|e| e.0.clone()).collect(),
                ys.iter().map(|e| e.1 / weight).collect(),
            )?;
            Ok(JointAtom { x, weight, conditional })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscreteJoint::new(atoms)?)
}

/// Evaluates every quantity the spec allows, as `(name, value)` pairs.
pub fn evaluate(spec: &OracleSpec) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    match (spec.pdfs.get("P"), spec.pdfs.get("Q")) {
        (Some(p), Some(q)) => {
            let (p, q) = (pdf(p, "[P]")?, pdf(q, "[Q]")?);
            let (w, _) = wasserstein_exact(&p, &q, spec.p, spec.r)?;
            out.push(("wasserstein".to_string(), w));
            if spec.r == 1.0 {
                let witness = optimal_witness(&p, &q, spec.p)?;
                out.push(("kr_dual_gap".to_string(), kr_dual_gap(&p, &q, spec.p, witness)?));
            }
        }
        (None, None) => {}
        _ => bail!("sections [P] and [Q] must both be present"),
    }
    match (spec.joints.get("J1"), spec.joints.get("J2")) {
        (Some(a), Some(b)) => {
            let (a, b) = (joint(a, "[J1]")?, joint(b, "[J2]")?);
            out.push(("jw".to_string(), jw_exact(&a, &b, spec.p, spec.r)?));
            if let Some(sigma) = spec.sigma {
                out.push(("jw2".to_string(), jw2_exact(&a, &b, sigma, spec.p, spec.s)?));
            }
        }
        (None, None) => {}
        _ => bail!("sections [J1] and [J2] must both be present"),
    }
    if out.is_empty() {
        bail!("no distributions given");
    }
    Ok(out)
}
