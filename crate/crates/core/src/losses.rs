//! Adversarial, cycle-consistency and total objectives.
//!
//! Each loss exists twice: a plain evaluation over tensors, and a builder that
//! records the same computation on a [`Graph`] for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Real, Tensor, Var};

/// Scores are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const SCORE_EPS: f64 = 1e-7;
/// Default weight of the cycle terms.
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// `mean log(1 - D(fake))`, minimized by the generator.
    Minimax,
    /// `-mean log D(fake)`.
    #[default]
    NonSaturating,
}

fn clamp(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

fn mean_of<T: Real>(t: &Tensor<T>, f: impl Fn(f64) -> f64) -> f64 {
    t.data().iter().map(|&v| f(v.as_f64())).sum::<f64>() / t.len() as f64
}

/// `-mean log real - mean log(1 - fake)`.
pub fn adv_d_loss<T: Real>(real: &Tensor<T>, fake: &Tensor<T>) -> f64 {
    -mean_of(real, |s| clamp(s).ln()) - mean_of(fake, |s| (1.0 - clamp(s)).ln())
}

pub fn adv_g_loss<T: Real>(fake: &Tensor<T>, mode: GanMode) -> f64 {
    match mode {
        GanMode::Minimax => mean_of(fake, |s| (1.0 - clamp(s)).ln()),
        GanMode::NonSaturating => -mean_of(fake, |s| clamp(s).ln()),
    }
}

fn mean_abs<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(&p, &q)| (p.as_f64() - q.as_f64()).abs()).sum::<f64>() / a.len() as f64)
}

/// `(mean|x_rec - x|, mean|y_rec - y|, mean|z_rec - z|)`.
pub fn cycle_loss<T: Real>(
    x: &Tensor<T>,
    x_rec: &Tensor<T>,
    y: &Tensor<T>,
    y_rec: &Tensor<T>,
    z: &Tensor<T>,
    z_rec: &Tensor<T>,
) -> Result<(f64, f64, f64)> {
    Ok((mean_abs(x, x_rec, "x")?, mean_abs(y, y_rec, "y")?, mean_abs(z, z_rec, "z")?))
}

/// Adversarial generator terms plus `lambda` times the summed cycle terms.
pub fn total_objective(g_adv: [f64; 3], cyc: [f64; 3], lambda: f64) -> f64 {
    g_adv.iter().sum::<f64>() + lambda * cyc.iter().sum::<f64>()
}

/// Per-step losses, one JSON line each in the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossReport {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub d_x: f64,
    pub d_y: f64,
    pub d_z: f64,
    pub g_adv_x: f64,
    pub g_adv_y: f64,
    pub g_adv_z: f64,
    pub cyc_x: f64,
    pub cyc_y: f64,
    pub cyc_z: f64,
    pub lambda: f64,
    pub total_g: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [
            self.d_x,
            self.d_y,
            self.d_z,
            self.g_adv_x,
            self.g_adv_y,
            self.g_adv_z,
            self.cyc_x,
            self.cyc_y,
            self.cyc_z,
            self.total_g,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

// ---- graph builders ----

fn log_clamped<T: Real>(g: &mut Graph<T>, s: Var) -> Var {
    let c = g.clamp(s, SCORE_EPS, 1.0 - SCORE_EPS);
    g.log(c)
}

fn log_one_minus<T: Real>(g: &mut Graph<T>, s: Var) -> Var {
    let c = g.clamp(s, SCORE_EPS, 1.0 - SCORE_EPS);
    let q = g.affine(c, -1.0, 1.0);
    g.log(q)
}

pub fn adv_d_var<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Var {
    let lr = log_clamped(g, real);
    let mr = g.mean(lr);
    let lf = log_one_minus(g, fake);
    let mf = g.mean(lf);
    g.weighted_sum(&[(mr, -1.0), (mf, -1.0)])
}

pub fn adv_g_var<T: Real>(g: &mut Graph<T>, fake: Var, mode: GanMode) -> Var {
    match mode {
        GanMode::Minimax => {
            let l = log_one_minus(g, fake);
            g.mean(l)
        }
        GanMode::NonSaturating => {
            let l = log_clamped(g, fake);
            let m = g.mean(l);
            g.affine(m, -1.0, 0.0)
        }
    }
}

pub fn cycle_var<T: Real>(g: &mut Graph<T>, target: Var, rec: Var) -> Var {
    g.mean_abs_diff(rec, target)
}

pub fn total_var<T: Real>(g: &mut Graph<T>, g_adv: [Var; 3], cyc: [Var; 3], lambda: f64) -> Var {
    let mut terms: Vec<(Var, f64)> = g_adv.iter().map(|&v| (v, 1.0)).collect();
    terms.extend(cyc.iter().map(|&v| (v, lambda)));
    g.weighted_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new([1, 1, 1, v.len()], v.to_vec())
    }

    #[test]
    fn d_loss_closed_forms() {
        let e = SCORE_EPS;
        assert!(adv_d_loss(&t(&[1.0 - e; 4]), &t(&[e; 4])) < 1e-6);
        let half = adv_d_loss(&t(&[0.5; 4]), &t(&[0.5; 4]));
        assert!((half - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((half - 1.3863).abs() < 1e-4);
        let a = [0.2, 0.7, 0.9];
        let one_minus: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let expect = -2.0 * a.iter().map(|v: &f64| v.ln()).sum::<f64>() / 3.0;
        assert!((adv_d_loss(&t(&a), &t(&one_minus)) - expect).abs() < 1e-12);
    }

    #[test]
    fn g_loss_closed_forms() {
        let half = t(&[0.5; 3]);
        assert!((adv_g_loss(&half, GanMode::Minimax) + std::f64::consts::LN_2).abs() < 1e-6);
        assert!((adv_g_loss(&half, GanMode::NonSaturating) - std::f64::consts::LN_2).abs() < 1e-6);
        let fooled = adv_g_loss(&t(&[1.0; 3]), GanMode::NonSaturating);
        assert!(fooled > 0.0 && fooled < 1e-6);
        // Clamping keeps the extremes finite.
        assert!(adv_g_loss(&t(&[0.0]), GanMode::NonSaturating).is_finite());
        assert!(adv_g_loss(&t(&[1.0]), GanMode::Minimax).is_finite());
        assert!(adv_d_loss(&t(&[0.0]), &t(&[1.0])).is_finite());
    }

    #[test]
    fn cycle_closed_forms() {
        let x = t(&[0.1, -0.3, 0.7]);
        let off = x.map(|v| v + 0.1);
        let y = t(&[0.5; 4]);
        let neg = y.map(|v| -v);
        let (cx, cy, cz) = cycle_loss(&x, &x, &y, &neg, &x, &off).unwrap();
        assert_eq!(cx, 0.0);
        assert!((cy - 1.0).abs() < 1e-12);
        assert!((cz - 0.1).abs() < 1e-12);
        assert!(cycle_loss(&x, &y, &y, &y, &y, &y).is_err());
    }

    #[test]
    fn total_linear_in_lambda() {
        assert_eq!(DEFAULT_LAMBDA, 10.0);
        let adv = [0.3, 0.4, 0.5];
        assert_eq!(total_objective(adv, [0.0; 3], 10.0), 1.2);
        let cyc = [0.1, 0.2, 0.05];
        let c1 = total_objective(adv, cyc, 10.0) - total_objective(adv, [0.0; 3], 10.0);
        let c2 = total_objective(adv, cyc, 20.0) - total_objective(adv, [0.0; 3], 20.0);
        assert!((c2 - 2.0 * c1).abs() < 1e-12);
    }

    #[test]
    fn graph_builders_match_plain_losses() {
        let real = t(&[0.9, 0.6, 0.2, 0.0]);
        let fake = t(&[0.1, 0.5, 1.0, 0.3]);
        let mut g = Graph::<f64>::inference();
        let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
        let d = adv_d_var(&mut g, r, f);
        assert!((g.value(d).value() - adv_d_loss(&real, &fake)).abs() < 1e-12);
        for mode in [GanMode::Minimax, GanMode::NonSaturating] {
            let v = adv_g_var(&mut g, f, mode);
            assert!((g.value(v).value() - adv_g_loss(&fake, mode)).abs() < 1e-12);
        }
        let c = cycle_var(&mut g, r, f);
        let (cx, _, _) = cycle_loss(&real, &fake, &real, &real, &real, &real).unwrap();
        assert!((g.value(c).value() - cx).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn raising_a_score_lowers_generator_loss(v in proptest::collection::vec(0.01f64..0.98, 1..8), i in 0usize..8, dv in 0.001f64..0.01) {
            let i = i % v.len();
            let mut up = v.clone();
            up[i] += dv;
            for mode in [GanMode::Minimax, GanMode::NonSaturating] {
                prop_assert!(adv_g_loss(&t(&up), mode) < adv_g_loss(&t(&v), mode));
            }
        }

        #[test]
        fn cycle_terms_nonnegative(a in proptest::collection::vec(-1f64..1.0, 4), b in proptest::collection::vec(-1f64..1.0, 4)) {
            let (ta, tb) = (t(&a), t(&b));
            let (cx, cy, cz) = cycle_loss(&ta, &tb, &tb, &ta, &ta, &ta).unwrap();
            prop_assert!(cx >= 0.0 && cy >= 0.0);
            prop_assert_eq!(cz, 0.0);
            prop_assert_eq!(cx == 0.0, a == b);
        }
    }
}
