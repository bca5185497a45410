//! Damped Newton iterations on the coupled residual, used to drive an
//! already small residual down to round-off.
//!
//! The factorised Jacobian is reused for as long as full steps keep
//! contracting the residual quickly; it is refreshed otherwise.

use crate::error::{Error, Result};
use crate::linalg::{colored_jacobian, BandedLu, FdOptions, FdScheme};

use super::discretization::{Discretization, Fields, Var};

pub(crate) struct Polished {
    pub fields: Fields,
    pub norms: Vec<f64>,
    pub history: Vec<Vec<f64>>,
    pub clips: usize,
}

fn worst(norms: &[f64]) -> f64 {
    norms.iter().fold(0.0f64, |m, &v| m.max(v))
}

/// Residual floor below which further Newton steps are pointless.
const ROUND_OFF: f64 = 1e-13;
/// Contraction a reused factorisation must achieve per step.
const REUSE_CONTRACTION: f64 = 0.2;

fn factor(disc: &Discretization, w: &[f64]) -> Result<BandedLu> {
    let opts = FdOptions {
        relative_step: 1e-7,
        scheme: FdScheme::Forward,
    };
    let jac = colored_jacobian(disc, w, opts)?;
    BandedLu::factor(&jac)
}

pub(crate) fn polish(
    disc: &Discretization,
    start: &Fields,
    tolerance: f64,
    max_iterations: usize,
) -> Result<Polished> {
    let mesh = disc.mesh;
    let ne = disc.n_eq();
    let n = mesh.n_cells() * ne;
    let k_slot = disc.layout.slot(Var::K);
    let w_slot = disc.layout.slot(Var::W);

    let mut w = disc.pack(start);
    let mut r = vec![0.0; n];
    let mut s = vec![0.0; n];
    disc.evaluate(&disc.unpack(&w), &mut r, Some(&mut s));
    let mut history = Vec::new();
    let mut clips = 0;
    let mut last = f64::INFINITY;
    let mut lu: Option<BandedLu> = None;
    let mut steps = 0;

    loop {
        let norms = disc.normalized_norms(&r, &s);
        let now = worst(&norms);
        if now.is_nan() {
            return Err(Error::NumericalFailure("non-finite residual in Newton polish".into()));
        }
        history.push(norms.clone());
        let stalled = now > 0.1 * last;
        if now <= tolerance && (now <= ROUND_OFF || (stalled && lu.is_none())) {
            return Ok(Polished {
                fields: disc.unpack(&w),
                norms,
                history,
                clips,
            });
        }
        if steps >= max_iterations {
            break;
        }
        steps += 1;
        if stalled && lu.is_some() {
            // the reused factorisation stopped paying off
            lu = None;
        }
        last = now;

        let fresh = lu.is_none();
        if fresh {
            lu = Some(factor(disc, &w)?);
        }
        let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
        let step = lu.as_ref().expect("factorised above").solve(&rhs);
        if step.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure("non-finite Newton step".into()));
        }

        let weights: Vec<f64> = s.iter().map(|&v| 1.0 / (v + 1e-300)).collect();
        let merit = |res: &[f64]| -> f64 {
            res.iter()
                .zip(&weights)
                .map(|(x, q)| (x * q) * (x * q))
                .sum::<f64>()
        };
        let m0 = merit(&r);

        // keep omega strictly positive along the step
        let mut alpha: f64 = 1.0;
        if let Some(ws) = w_slot {
            for c in 0..mesh.n_cells() {
                let i = c * ne + ws;
                if step[i] < 0.0 {
                    alpha = alpha.min(0.9 * w[i] / -step[i]);
                }
            }
        }

        let mut accepted = false;
        for _ in 0..30 {
            let mut trial: Vec<f64> = w.iter().zip(&step).map(|(a, b)| a + alpha * b).collect();
            let mut trial_clips = 0;
            if let Some(ks) = k_slot {
                for c in 0..mesh.n_cells() {
                    let i = c * ne + ks;
                    if trial[i] < 0.0 {
                        trial[i] = 0.0;
                        trial_clips += 1;
                    }
                }
            }
            let mut rt = vec![0.0; n];
            let mut st = vec![0.0; n];
            disc.evaluate(&disc.unpack(&trial), &mut rt, Some(&mut st));
            let mt = merit(&rt);
            if mt.is_finite() && mt <= (1.0 - 1e-4 * alpha) * m0 {
                let contraction = (mt / m0).sqrt();
                w = trial;
                r = rt;
                s = st;
                clips += trial_clips;
                accepted = true;
                if alpha < 1.0 || contraction > REUSE_CONTRACTION {
                    lu = None;
                }
                break;
            }
            if !fresh {
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if !fresh {
                lu = None;
                last = f64::INFINITY;
                continue;
            }
            let norms = disc.normalized_norms(&r, &s);
            if worst(&norms) <= tolerance {
                history.push(norms.clone());
                return Ok(Polished {
                    fields: disc.unpack(&w),
                    norms,
                    history,
                    clips,
                });
            }
            return Err(Error::NonConvergence {
                reason: "Newton line search failed".into(),
                history,
                partial: None,
            });
        }
    }
    let norms = disc.normalized_norms(&r, &s);
    if worst(&norms) <= tolerance {
        return Ok(Polished {
            fields: disc.unpack(&w),
            norms,
            history,
            clips,
        });
    }
    Err(Error::NonConvergence {
        reason: format!("Newton polish did not reach {tolerance:.1e}"),
        history,
        partial: None,
    })
}
