//! Distillation losses over probability rows, plus graph-side versions that
//! carry gradients to student logits.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Graph, Tensor, Var, LOG_EPS};

/// Tolerance on row sums accepted by [`ProbDist::new`].
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Per-position distributions over the vocabulary, `[positions × vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    probs: Tensor,
}

impl ProbDist {
    pub fn new(probs: Tensor) -> Result<Self> {
        let (rows, _) = probs.require_2d("prob_dist")?;
        probs.check_finite("prob_dist")?;
        for r in 0..rows {
            let row = probs.row(r);
            if let Some(v) = row.iter().find(|&&v| v < 0.0) {
                return Err(Error::invalid(format!("row {r} has negative entry {v}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("row {r} sums to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn one_hot(ids: &[usize], vocab: usize) -> Result<Self> {
        let mut data = vec![0.0; ids.len() * vocab];
        for (r, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::invalid(format!("label {id} >= vocab {vocab}")));
            }
            data[r * vocab + id] = 1.0;
        }
        Ok(Self {
            probs: Tensor::new(vec![ids.len(), vocab], data)?,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn positions(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn vocab(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.probs.row(r)
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor {
        self.probs
    }

    /// Index of the largest entry in each row; ties go to the lower index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.positions()).map(|r| argmax(self.row(r))).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn same_shape(op: &'static str, a: &ProbDist, b: &ProbDist) -> Result<()> {
    if a.probs.shape() != b.probs.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.probs.shape().to_vec(),
            rhs: b.probs.shape().to_vec(),
        });
    }
    if a.positions() == 0 {
        return Err(Error::invalid(format!("{op} needs at least one position")));
    }
    Ok(())
}

fn check_unit(name: &str, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("{name} must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Row-wise `softmax(logits / tau)` with max subtraction.
pub fn softmax_temperature(logits: &Tensor, tau: f64) -> Result<ProbDist> {
    check_tau(tau)?;
    let (rows, cols) = logits.require_2d("softmax_temperature")?;
    logits.check_finite("softmax_temperature")?;
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        let z = logits.row(r);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut data[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(z) {
            *o = ((v - max) / tau).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    Ok(ProbDist {
        probs: Tensor::new(vec![rows, cols], data)?,
    })
}

/// `τ² · mean_pos Σ p_T·log((p_T + ε)/(p_S + ε))`.
pub fn kl_loss(p_teacher: &ProbDist, p_student: &ProbDist, tau: f64) -> Result<f64> {
    same_shape("kl_loss", p_teacher, p_student)?;
    check_tau(tau)?;
    let mut total = 0.0;
    for r in 0..p_teacher.positions() {
        for (t, s) in p_teacher.row(r).iter().zip(p_student.row(r)) {
            total += t * ((t + LOG_EPS) / (s + LOG_EPS)).ln();
        }
    }
    Ok(tau * tau * total / p_teacher.positions() as f64)
}

pub fn akd_loss(
    p_student: &ProbDist,
    p_teacher: &ProbDist,
    alpha_akd: f64,
    tau: f64,
) -> Result<f64> {
    check_unit("alpha_akd", alpha_akd)?;
    Ok(alpha_akd * kl_loss(p_teacher, p_student, tau)?)
}

/// `mean_pos −Σ target·log(p_student + ε)`.
pub fn soft_ce_loss(target: &ProbDist, p_student: &ProbDist) -> Result<f64> {
    same_shape("soft_ce_loss", target, p_student)?;
    let mut total = 0.0;
    for r in 0..target.positions() {
        for (t, s) in target.row(r).iter().zip(p_student.row(r)) {
            total -= t * (s + LOG_EPS).ln();
        }
    }
    Ok(total / target.positions() as f64)
}

/// `(1 − α)·y + α·p_prev`.
pub fn skd_target(y: &ProbDist, p_prev: &ProbDist, alpha_skd: f64) -> Result<ProbDist> {
    same_shape("skd_target", y, p_prev)?;
    check_unit("alpha_skd", alpha_skd)?;
    let data = y
        .probs
        .data()
        .iter()
        .zip(p_prev.probs.data())
        .map(|(y, p)| (1.0 - alpha_skd) * y + alpha_skd * p)
        .collect();
    Ok(ProbDist {
        probs: Tensor::new(y.probs.shape().to_vec(), data)?,
    })
}

pub fn skd_loss(
    y: &ProbDist,
    p_prev: &ProbDist,
    p_student: &ProbDist,
    alpha_skd: f64,
) -> Result<f64> {
    soft_ce_loss(&skd_target(y, p_prev, alpha_skd)?, p_student)
}

/// Objective of the adaptive phase; the hard-label term is not down-weighted.
pub fn total_loss_akd(l_s: f64, l_akd: f64) -> f64 {
    l_s + l_akd
}

/// Loss terms of one step or the mean over an epoch. Terms that do not apply
/// to the current phase are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_kl: Option<f64>,
    pub l_akd: Option<f64>,
    pub l_skd: Option<f64>,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [Some(self.l_s), self.l_kl, self.l_akd, self.l_skd, Some(self.l_total)]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }

    /// Weighted mean of several breakdowns; optional terms are averaged over
    /// the entries that carry them.
    pub fn mean(items: &[(LossBreakdown, f64)]) -> LossBreakdown {
        fn avg(items: &[(LossBreakdown, f64)], f: impl Fn(&LossBreakdown) -> Option<f64>) -> Option<f64> {
            let (mut s, mut w) = (0.0, 0.0);
            for (b, wt) in items {
                if let Some(v) = f(b) {
                    s += v * wt;
                    w += wt;
                }
            }
            (w > 0.0).then(|| s / w)
        }
        LossBreakdown {
            l_s: avg(items, |b| Some(b.l_s)).unwrap_or(0.0),
            l_kl: avg(items, |b| b.l_kl),
            l_akd: avg(items, |b| b.l_akd),
            l_skd: avg(items, |b| b.l_skd),
            l_total: avg(items, |b| Some(b.l_total)).unwrap_or(0.0),
        }
    }
}

/// `Σ_rows Σ_v p·log(p + ε)`, the constant part of the KL term.
pub fn neg_entropy_sum(p: &Tensor) -> f64 {
    p.data().iter().map(|&v| v * (v + LOG_EPS).ln()).sum()
}

/// Graph node for `(1/denom) · Σ_rows −Σ target·log(softmax(logits/τ) + ε)`.
pub fn graph_soft_ce(
    g: &mut Graph,
    logits: Var,
    target: Arc<Tensor>,
    tau: f64,
    denom: f64,
) -> Result<Var> {
    let x = g.soft_target_xent(logits, target, tau)?;
    g.scale(x, 1.0 / denom)
}

/// Graph node for the KL term summed over the rows of `logits` and divided by
/// `denom`. `p_teacher` must already be a temperature-`tau` distribution.
pub fn graph_kl(
    g: &mut Graph,
    logits: Var,
    p_teacher: Arc<Tensor>,
    tau: f64,
    denom: f64,
) -> Result<Var> {
    let k = tau * tau / denom;
    let constant = k * neg_entropy_sum(&p_teacher);
    let x = g.soft_target_xent(logits, p_teacher, tau)?;
    let scaled = g.scale(x, k)?;
    g.add_scalar(scaled, constant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn dist(rows: &[&[f64]]) -> ProbDist {
        ProbDist::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temperature(&Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap(), 1.0).unwrap();
        assert!(p.row(0).iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax_temperature(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), 2.0).unwrap();
        let e = 0.5f64.exp();
        assert!((p.row(0)[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p.row(0)[0] - 0.377540668798).abs() < 1e-9);
        let z = Tensor::from_rows(&[vec![-30.0, 4.0, 17.5, 0.0]]).unwrap();
        let p = softmax_temperature(&z, 1e6).unwrap();
        assert!(p.row(0).iter().all(|v| (v - 0.25).abs() < 1e-5));
        assert!(softmax_temperature(&z, 0.0).is_err());
        assert!(softmax_temperature(&z, -1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let t = dist(&[&[1.0, 0.0]]);
        let s = dist(&[&[0.5, 0.5]]);
        assert!((kl_loss(&t, &s, 1.0).unwrap() - LN2).abs() < 1e-9);
        assert!((kl_loss(&t, &s, 2.0).unwrap() - 4.0 * LN2).abs() < 1e-9);
        assert!(kl_loss(&s, &s, 1.0).unwrap().abs() < 1e-12);
        assert!(kl_loss(&t, &dist(&[&[1.0, 0.0], &[0.0, 1.0]]), 1.0).is_err());
    }

    #[test]
    fn akd_scaling() {
        let t = dist(&[&[1.0, 0.0]]);
        let s = dist(&[&[0.5, 0.5]]);
        assert!((akd_loss(&s, &t, 0.5, 1.0).unwrap() - 0.346574).abs() < 1e-6);
        assert_eq!(akd_loss(&s, &t, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(akd_loss(&s, &t, 1.0, 1.0).unwrap(), kl_loss(&t, &s, 1.0).unwrap());
        assert!(akd_loss(&s, &t, 1.5, 1.0).is_err());
        assert!(akd_loss(&s, &t, -0.1, 1.0).is_err());
    }

    #[test]
    fn soft_ce_and_skd_examples() {
        let y = dist(&[&[1.0, 0.0]]);
        let half = dist(&[&[0.5, 0.5]]);
        assert!((soft_ce_loss(&y, &half).unwrap() - LN2).abs() < 1e-9);
        assert!(soft_ce_loss(&y, &dist(&[&[1.0, 0.0]])).unwrap() < 1e-11);

        let prev = dist(&[&[0.6, 0.4]]);
        let t = skd_target(&y, &prev, 0.8).unwrap();
        assert!((t.row(0)[0] - 0.68).abs() < 1e-12 && (t.row(0)[1] - 0.32).abs() < 1e-12);
        assert_eq!(skd_target(&y, &prev, 0.0).unwrap(), y);
        assert_eq!(skd_target(&y, &prev, 1.0).unwrap(), prev);
        assert!(skd_target(&y, &prev, 1.01).is_err());
        assert!((skd_loss(&y, &prev, &half, 0.8).unwrap() - LN2).abs() < 1e-9);
        assert_eq!(
            skd_loss(&y, &prev, &half, 0.0).unwrap(),
            soft_ce_loss(&y, &half).unwrap()
        );
        let p = dist(&[&[0.2, 0.8]]);
        let h = -(0.2f64 * 0.2f64.ln() + 0.8 * 0.8f64.ln());
        assert!((skd_loss(&y, &p, &p, 1.0).unwrap() - h).abs() < 1e-9);
    }

    #[test]
    fn total_is_plain_sum() {
        assert_eq!(total_loss_akd(0.5, 0.25), 0.75);
        assert_eq!(total_loss_akd(0.3, 0.0), 0.3);
        assert_eq!(total_loss_akd(0.0, 0.0), 0.0);
    }

    #[test]
    fn rejects_invalid_rows() {
        assert!(ProbDist::from_rows(&[vec![0.5, 0.6]]).is_err());
        assert!(ProbDist::from_rows(&[vec![1.5, -0.5]]).is_err());
        assert!(ProbDist::one_hot(&[3], 3).is_err());
    }

    #[test]
    fn graph_kl_matches_direct_value() {
        let z = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.0, 0.5, -0.5]]).unwrap();
        let t = softmax_temperature(
            &Tensor::from_rows(&[vec![1.0, 0.0, -1.0], vec![2.0, 2.0, 0.0]]).unwrap(),
            2.0,
        )
        .unwrap();
        let direct = kl_loss(&t, &softmax_temperature(&z, 2.0).unwrap(), 2.0).unwrap();
        let mut g = Graph::new();
        let x = g.param(&z).unwrap();
        let k = graph_kl(&mut g, x, Arc::new(t.probs().clone()), 2.0, 2.0).unwrap();
        assert!((g.value(k).item() - direct).abs() < 1e-12);
    }

    fn rows(n: usize, v: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-4.0f64..4.0, n * v)
            .prop_map(move |d| Tensor::new(vec![n, v], d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_keep_argmax(z in rows(3, 5), tau in 0.1f64..10.0) {
            let p = softmax_temperature(&z, tau).unwrap();
            let p1 = softmax_temperature(&z, 1.0).unwrap();
            for r in 0..3 {
                prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            prop_assert_eq!(p.argmax(), p1.argmax());
        }

        #[test]
        fn gibbs_inequalities(a in rows(2, 4), b in rows(2, 4), alpha in 0.0f64..=1.0) {
            let p = softmax_temperature(&a, 1.0).unwrap();
            let q = softmax_temperature(&b, 1.0).unwrap();
            prop_assert!(kl_loss(&p, &q, 1.0).unwrap() >= -1e-9);
            prop_assert!(kl_loss(&p, &p, 1.0).unwrap() <= 1e-9);
            prop_assert!(soft_ce_loss(&q, &p).unwrap() - soft_ce_loss(&q, &q).unwrap() >= -1e-9);
            let y = ProbDist::one_hot(&[1, 3], 4).unwrap();
            let t = skd_target(&y, &p, alpha).unwrap();
            for r in 0..2 {
                prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(t.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }
}
