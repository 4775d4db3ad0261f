//! Square loss between L2-normalized student and teacher emission logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the distillation term in the combined objective.
    pub alpha: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { alpha: 0.15 }
    }
}

fn unit(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        (vec![0.0; v.len()], 0.0)
    } else {
        (v.iter().map(|x| x / norm).collect(), norm)
    }
}

fn check_pair(s: &Tensor, t: &Tensor) -> Result<()> {
    if s.shape() != t.shape() {
        return Err(Error::shape("distill_loss", s.shape(), t.shape()));
    }
    s.require_matrix("distill_loss")?;
    Ok(())
}

/// `(1 / 2T) Σ ‖ĥ_s − ĥ_t‖²` over every row of every sentence, where `ĥ` is
/// the row scaled to unit length (zero rows stay zero) and `T` is the total
/// number of rows. Zero when there are no rows.
pub fn distill_loss(student: &[Tensor], teacher: &[Tensor]) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::shape("distill_loss", &[student.len()], &[teacher.len()]));
    }
    let mut total = 0.0;
    let mut positions = 0usize;
    for (s, t) in student.iter().zip(teacher) {
        check_pair(s, t)?;
        for r in 0..s.rows() {
            let (us, _) = unit(s.row(r));
            let (ut, _) = unit(t.row(r));
            total += us.iter().zip(&ut).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        positions += s.rows();
    }
    if positions == 0 {
        return Ok(0.0);
    }
    Ok(total / (2.0 * positions as f64))
}

/// Graph form over packed rows; the teacher is a constant and receives no
/// gradient. Normalizes by the number of rows.
pub fn distill_loss_graph<'g>(g: &'g Graph, student: Var<'g>, teacher: &Tensor) -> Result<Var<'g>> {
    let sv = student.value();
    check_pair(&sv, teacher)?;
    let (rows, k) = (sv.rows(), sv.cols());
    if rows == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let c = 1.0 / (2.0 * rows as f64);
    let mut total = 0.0;
    let mut grad = vec![0.0; rows * k];
    for r in 0..rows {
        let (us, norm) = unit(sv.row(r));
        let (ut, _) = unit(teacher.row(r));
        let diff: Vec<f64> = us.iter().zip(&ut).map(|(a, b)| a - b).collect();
        total += diff.iter().map(|d| d * d).sum::<f64>();
        if norm > 0.0 {
            // d/dh of ‖h/|h| − t‖² = 2 (I − u uᵀ) (u − t) / |h|
            let dot: f64 = us.iter().zip(&diff).map(|(a, b)| a * b).sum();
            for j in 0..k {
                grad[r * k + j] = c * 2.0 * (diff[j] - us[j] * dot) / norm;
            }
        }
    }
    Ok(g.custom(&[student], Tensor::scalar(total * c), move |out| {
        let scale = out.item();
        vec![Some(
            Tensor::new(vec![rows, k], grad.iter().map(|x| x * scale).collect()).unwrap(),
        )]
    }))
}

/// `seg + alpha · dis`.
pub fn combined_loss(seg: f64, dis: f64, alpha: f64) -> f64 {
    seg + alpha * dis
}

pub fn combined_loss_graph<'g>(g: &'g Graph, seg: Var<'g>, dis: Var<'g>, alpha: f64) -> Result<Var<'g>> {
    g.add(seg, g.scale(dis, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::*;

    fn oracle(s: &[Tensor], t: &[Tensor]) -> f64 {
        let mut total = 0.0;
        let mut n = 0.0;
        for (a, b) in s.iter().zip(t) {
            for r in 0..a.rows() {
                let na = a.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                for j in 0..a.cols() {
                    let x = if na > 0.0 { a.get(r, j) / na } else { 0.0 };
                    let y = if nb > 0.0 { b.get(r, j) / nb } else { 0.0 };
                    total += (x - y).powi(2);
                }
                n += 1.0;
            }
        }
        total / (2.0 * n)
    }

    #[test]
    fn examples() {
        let u = Tensor::from_rows(&[[0.6, 0.8, 0.0, 0.0]]).unwrap();
        let one = std::slice::from_ref(&u);
        assert_eq!(distill_loss(one, one).unwrap(), 0.0);
        let v = u.scale(-1.0);
        assert!((distill_loss(one, &[v]).unwrap() - 2.0).abs() < 1e-12);
        assert!(distill_loss(one, &[Tensor::zeros([2, 4])]).is_err());
        assert_eq!(combined_loss(1.0, 2.0, 0.15), 1.3);
        assert_eq!(combined_loss(1.0, 2.0, 0.0), 1.0);
    }

    #[test]
    fn graph_gradient_matches_finite_differences() {
        let teacher = Tensor::from_rows(&[[0.3, -1.0, 0.2, 0.5], [1.0, 1.0, -2.0, 0.1]]).unwrap();
        let student = Tensor::from_rows(&[[0.7, 0.1, -0.4, 0.9], [-0.2, 0.6, 0.3, -1.1]]).unwrap();
        let report = grad_check(|g, p| distill_loss_graph(g, p[0], &teacher), &[student], 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn combined_gradient_is_weighted_sum() {
        let teacher = Tensor::from_rows(&[[0.3, -1.0, 0.2, 0.5]]).unwrap();
        let student = Tensor::from_rows(&[[0.7, 0.1, -0.4, 0.9]]).unwrap();
        let report = grad_check(
            |g, p| {
                let seg = g.sum_all(g.mul(p[0], p[0])?);
                let dis = distill_loss_graph(g, p[0], &teacher)?;
                combined_loss_graph(g, seg, dis, 0.15)
            },
            &[student],
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn batch() -> impl Strategy<Value = (Vec<Tensor>, Vec<Tensor>)> {
        prop::collection::vec(1usize..6, 1..4).prop_flat_map(|lens| {
            let total: usize = lens.iter().sum();
            (
                prop::collection::vec(-3.0f64..3.0, total * 4),
                prop::collection::vec(-3.0f64..3.0, total * 4),
            )
                .prop_map(move |(a, b)| {
                    let mut s = Vec::new();
                    let mut t = Vec::new();
                    let mut off = 0;
                    for &l in &lens {
                        s.push(Tensor::new(vec![l, 4], a[off * 4..(off + l) * 4].to_vec()).unwrap());
                        t.push(Tensor::new(vec![l, 4], b[off * 4..(off + l) * 4].to_vec()).unwrap());
                        off += l;
                    }
                    (s, t)
                })
        })
    }

    proptest! {
        #[test]
        fn matches_scalar_oracle((s, t) in batch()) {
            let got = distill_loss(&s, &t).unwrap();
            prop_assert!((got - oracle(&s, &t)).abs() < 1e-10);
            prop_assert!((0.0..=2.0).contains(&got));
        }

        #[test]
        fn scale_invariant((s, t) in batch(), c in 0.01f64..100.0) {
            let scaled: Vec<Tensor> = s.iter().map(|x| x.scale(c)).collect();
            let a = distill_loss(&s, &t).unwrap();
            prop_assert!((distill_loss(&scaled, &t).unwrap() - a).abs() < 1e-10);
            let scaled_t: Vec<Tensor> = t.iter().map(|x| x.scale(c)).collect();
            prop_assert!((distill_loss(&s, &scaled_t).unwrap() - a).abs() < 1e-10);
        }
    }
}
