//! Point cross-entropy, Lovász-Softmax on partial label maps, alignment MSE
//! and their weighted total.

use serde::{Deserialize, Serialize};

use crate::data::UNLABELED;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{sc, Scalar, Tensor};

/// Lower clamp applied to probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_t: f64,
    pub l_s: f64,
    pub l_a: f64,
    pub l_total: f64,
    pub lambda_a: f64,
}

fn probs_shape<F: Scalar>(tape: &Tape<F>, probs: Var, op: &'static str) -> Result<(usize, usize)> {
    let shape = tape.shape(probs);
    if shape.len() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        });
    }
    Ok((shape[0], shape[1]))
}

/// Mean of `-ln max(p[pixel, class], 1e-12)` over `targets`
/// (`(pixel, class)` pairs). `probs` is `[pixels, classes]`.
/// No targets gives a constant zero.
pub fn point_ce<F: Scalar>(tape: &mut Tape<F>, probs: Var, targets: &[(usize, u8)]) -> Result<Var> {
    let (n, k) = probs_shape(tape, probs, "point_ce")?;
    if targets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(F::zero())));
    }
    let idx: Vec<usize> = targets
        .iter()
        .map(|&(p, c)| {
            if p >= n || c as usize >= k {
                Err(Error::Dimension {
                    op: "point_ce",
                    lhs: vec![n, k],
                    rhs: vec![p, c as usize],
                })
            } else {
                Ok(p * k + c as usize)
            }
        })
        .collect::<Result<_>>()?;
    let floor: F = sc(PROB_FLOOR);
    let inv_n = F::one() / sc(idx.len() as f64);
    let pv = tape.value(probs).data();
    let loss = idx.iter().fold(F::zero(), |acc, &i| acc - pv[i].max(floor).ln()) * inv_n;
    Ok(tape.push(Tensor::scalar(loss), &[probs], move |vals, g, sink| {
        if sink.wants(probs) {
            let pv = vals[probs.0].data();
            let buf = sink.buf(probs);
            for &i in &idx {
                if pv[i] > floor {
                    buf[i] -= g[0] * inv_n / pv[i];
                }
            }
        }
    }))
}

/// Jaccard loss `1 - |gt - top_i| / |gt ∪ top_i|` after each prefix of a
/// sorted ground-truth indicator.
pub fn jaccard_prefix(gt_sorted: &[bool]) -> Vec<f64> {
    let total = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    gt_sorted
        .iter()
        .map(|&g| {
            if g {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            1.0 - (total - cum_fg) / (total + cum_bg)
        })
        .collect()
}

/// Discrete gradient of the Jaccard loss along a sorted ground-truth indicator.
pub fn lovasz_grad<F: Scalar>(gt_sorted: &[bool]) -> Vec<F> {
    let jac = jaccard_prefix(gt_sorted);
    (0..jac.len())
        .map(|i| sc(if i == 0 { jac[0] } else { jac[i] - jac[i - 1] }))
        .collect()
}

/// Value of the Lovász-Softmax loss over pixels whose label is not
/// [`UNLABELED`], and its gradient with respect to `probs` (`[pixels, k]`).
/// Returns `None` when no pixel is labeled.
pub fn lovasz_softmax_value<F: Scalar>(probs: &[F], labels: &[u8], k: usize) -> Option<(F, Vec<F>)> {
    let labeled: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != UNLABELED).collect();
    if labeled.is_empty() {
        return None;
    }
    let present: Vec<usize> = (0..k)
        .filter(|&c| labeled.iter().any(|&i| labels[i] as usize == c))
        .collect();
    let scale = F::one() / sc(present.len() as f64);
    let mut loss_sum = F::zero();
    let mut grad = vec![F::zero(); probs.len()];
    let mut order: Vec<usize> = Vec::with_capacity(labeled.len());
    let mut errors: Vec<F> = vec![F::zero(); labeled.len()];
    for &c in &present {
        for (j, &i) in labeled.iter().enumerate() {
            let p = probs[i * k + c];
            errors[j] = if labels[i] as usize == c { F::one() - p } else { p };
        }
        order.clear();
        order.extend(0..labeled.len());
        order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap_or(std::cmp::Ordering::Equal));
        let fg: Vec<bool> = order.iter().map(|&j| labels[labeled[j]] as usize == c).collect();
        let jac = jaccard_prefix(&fg);
        let lg = lovasz_grad::<F>(&fg);
        // sum_i e_(i) (J_i - J_(i-1)) rearranged as sum_i J_i (e_(i) - e_(i+1))
        for rank in 0..order.len() {
            let next = order.get(rank + 1).map_or(F::zero(), |&j| errors[j]);
            loss_sum += sc::<F>(jac[rank]) * (errors[order[rank]] - next);
        }
        for (rank, &j) in order.iter().enumerate() {
            let i = labeled[j];
            let d = lg[rank] * scale;
            if fg[rank] {
                grad[i * k + c] -= d;
            } else {
                grad[i * k + c] += d;
            }
        }
    }
    Some((loss_sum / sc(present.len() as f64), grad))
}

/// Lovász-Softmax averaged over classes present among labeled pixels.
/// A map with no labeled pixel gives a constant zero.
pub fn lovasz_softmax<F: Scalar>(tape: &mut Tape<F>, probs: Var, labels: &[u8]) -> Result<Var> {
    let (n, k) = probs_shape(tape, probs, "lovasz_softmax")?;
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "lovasz_softmax",
            lhs: vec![n, k],
            rhs: vec![labels.len()],
        });
    }
    match lovasz_softmax_value(tape.value(probs).data(), labels, k) {
        None => Ok(tape.constant(Tensor::scalar(F::zero()))),
        Some((loss, grad)) => Ok(tape.push(Tensor::scalar(loss), &[probs], move |_, g, sink| {
            if let Some(buf) = sink.get(probs) {
                buf.iter_mut().zip(&grad).for_each(|(d, s)| *d += g[0] * *s);
            }
        })),
    }
}

/// Mean over pixels of the squared distance between two `[pixels, k]` maps.
pub fn alignment_mse<F: Scalar>(tape: &mut Tape<F>, a: Var, b: Var) -> Result<Var> {
    let (n, _) = probs_shape(tape, a, "alignment_mse")?;
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, F::one() / sc(n.max(1) as f64)))
}

/// `l_t + l_s + lambda_a * l_a`.
pub fn total_loss<F: Scalar>(tape: &mut Tape<F>, l_t: Var, l_s: Var, l_a: Var, lambda_a: f64) -> Result<Var> {
    tape.weighted_sum(&[(l_t, F::one()), (l_s, F::one()), (l_a, sc(lambda_a))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, grad_check_abs};
    use rand::{Rng, SeedableRng};

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap(), true)
    }

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn point_ce_examples() {
        let mut t = Tape::new();
        let p = leaf(&mut t, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let l = point_ce(&mut t, p, &[(0, 0), (1, 1)]).unwrap();
        assert_eq!(scalar(&t, l), 0.0);

        let e = std::f64::consts::E;
        let p = leaf(&mut t, &[1, 2], vec![1.0 / e, 1.0 - 1.0 / e]);
        let l = point_ce(&mut t, p, &[(0, 0)]).unwrap();
        assert!((scalar(&t, l) - 1.0).abs() < 1e-12);

        let p = leaf(&mut t, &[2, 2], vec![0.5, 0.5, 0.75, 0.25]);
        let l = point_ce(&mut t, p, &[(0, 0), (1, 1)]).unwrap();
        assert!((scalar(&t, l) - 1.5 * 2f64.ln()).abs() < 1e-12);

        let l = point_ce(&mut t, p, &[]).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
    }

    #[test]
    fn point_ce_gradient_touches_only_targets() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(0.1..1.0)).collect();
        let targets = [(0usize, 2u8), (3, 0)];
        let err = grad_check(
            |t: &mut Tape<f64>, v: &[Var]| point_ce(t, v[0], &targets),
            &[Tensor::new(vec![4, 3], data.clone()).unwrap()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let mut t = Tape::new();
        let p = leaf(&mut t, &[4, 3], data);
        let l = point_ce(&mut t, p, &targets).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(p).unwrap();
        for (i, &v) in g.iter().enumerate() {
            assert_eq!(v != 0.0, i == 2 || i == 9, "index {i}");
        }
    }

    fn iou_loss(pred: &[usize], labels: &[u8], k: usize) -> f64 {
        let present: Vec<usize> = (0..k).filter(|&c| labels.iter().any(|&l| l as usize == c)).collect();
        let sum: f64 = present
            .iter()
            .map(|&c| {
                let inter = pred.iter().zip(labels).filter(|(&p, &l)| p == c && l as usize == c).count();
                let union = pred.iter().zip(labels).filter(|(&p, &l)| p == c || l as usize == c).count();
                1.0 - inter as f64 / union as f64
            })
            .sum();
        sum / present.len() as f64
    }

    #[test]
    fn hard_predictions_give_one_minus_iou() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..10);
            let k = rng.gen_range(2..4);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let mut probs = vec![0.0f64; n * k];
            for (i, &p) in pred.iter().enumerate() {
                probs[i * k + p] = 1.0;
            }
            let (loss, _) = lovasz_softmax_value(&probs, &labels, k).unwrap();
            assert_eq!(loss, iou_loss(&pred, &labels, k));
        }
        let labels = [0u8, 1, 1, 0];
        let probs = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(lovasz_softmax_value(&probs, &labels, 2).unwrap().0, 0.0);
    }

    #[test]
    fn unlabeled_pixels_are_ignored() {
        let probs = [0.9, 0.1, 0.3, 0.7, 0.5, 0.5];
        let with = lovasz_softmax_value(&probs, &[0, UNLABELED, 1], 2).unwrap();
        let without = lovasz_softmax_value(&[0.9, 0.1, 0.5, 0.5], &[0, 1], 2).unwrap();
        assert_eq!(with.0, without.0);
        assert_eq!(&with.1[2..4], &[0.0, 0.0]);
        assert!(lovasz_softmax_value(&probs, &[UNLABELED; 3], 2).is_none());
    }

    #[test]
    fn lovasz_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let labels: Vec<u8> = (0..6).map(|_| rng.gen_range(0..3)).collect();
            let data: Vec<f64> = (0..18).map(|_| rng.gen_range(0.0..1.0)).collect();
            let err = grad_check_abs(
                |t: &mut Tape<f64>, v: &[Var]| lovasz_softmax(t, v[0], &labels),
                &[Tensor::new(vec![6, 3], data).unwrap()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-9, "{err}");
        }
    }

    #[test]
    fn alignment_examples() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[1, 2], vec![1.0, 0.0]);
        let b = leaf(&mut t, &[1, 2], vec![0.0, 1.0]);
        let l = alignment_mse(&mut t, a, b).unwrap();
        assert_eq!(scalar(&t, l), 2.0);
        let l2 = alignment_mse(&mut t, b, a).unwrap();
        assert_eq!(scalar(&t, l2), 2.0);
        let a = leaf(&mut t, &[2, 2], vec![1.0, 0.0, 0.5, 0.5]);
        let b = leaf(&mut t, &[2, 2], vec![0.0, 1.0, 0.5, 0.5]);
        let l = alignment_mse(&mut t, a, b).unwrap();
        assert_eq!(scalar(&t, l), 1.0);
        let l = alignment_mse(&mut t, a, a).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let c = leaf(&mut t, &[1, 2], vec![0.0, 1.0]);
        assert!(alignment_mse(&mut t, a, c).is_err());
    }

    #[test]
    fn alignment_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..8).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen()).collect();
        let err = grad_check(
            |t: &mut Tape<f64>, v: &[Var]| alignment_mse(t, v[0], v[1]),
            &[Tensor::new(vec![4, 2], a).unwrap(), Tensor::new(vec![4, 2], b).unwrap()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn total_loss_examples() {
        let mut t = Tape::<f64>::new();
        let mut s = |v: f64| t.leaf(Tensor::scalar(v), true);
        let (a, b, c, z) = (s(1.0), s(2.0), s(3.0), s(0.0));
        let four = s(4.0);
        for (lt, ls, la, lam, want) in [(a, b, c, 0.0, 3.0), (a, b, c, 1.0, 6.0), (z, z, four, 0.5, 2.0)] {
            let l = total_loss(&mut t, lt, ls, la, lam).unwrap();
            assert_eq!(scalar(&t, l), want);
        }
    }

    #[test]
    fn total_loss_slope_in_lambda_is_alignment() {
        let la = 0.37;
        let err = grad_check_abs(
            |t: &mut Tape<f64>, v: &[Var]| {
                let lt = t.constant(Tensor::scalar(1.3));
                let ls = t.constant(Tensor::scalar(0.4));
                let la = t.constant(Tensor::scalar(la));
                let base = total_loss(t, lt, ls, la, 0.0)?;
                let weighted = t.mul(la, v[0])?;
                t.add(base, weighted)
            },
            &[Tensor::scalar(0.8)],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9);
        let f = |lam: f64| {
            let mut t = Tape::<f64>::new();
            let (lt, ls, l_a) = (
                t.constant(Tensor::scalar(1.3)),
                t.constant(Tensor::scalar(0.4)),
                t.constant(Tensor::scalar(la)),
            );
            let v = total_loss(&mut t, lt, ls, l_a, lam).unwrap();
            t.value(v).data()[0]
        };
        assert!(((f(1.0 + 1e-6) - f(1.0 - 1e-6)) / 2e-6 - la).abs() < 1e-8);
    }
}
