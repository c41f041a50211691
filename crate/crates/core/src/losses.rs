//! Objective terms: the prototype contrastive loss and its symmetrized and
//! new/seen-composed forms, the instance-level supervised contrastive loss,
//! replay cross-entropy over soft targets, and the total-loss breakdown.
//! Every term returns analytic gradients w.r.t. its embedding or logit
//! inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor2};
use crate::prototypes::PrototypeSet;

/// Gradients of a prototype-level loss w.r.t. the two normalized prototype
/// matrices it consumed.
#[derive(Debug, Clone)]
pub struct ProtoGrads {
    pub d_p: Tensor2,
    pub d_p_hat: Tensor2,
}

impl ProtoGrads {
    fn zeros(k: usize, dim: usize) -> Self {
        Self { d_p: Tensor2::zeros(k, dim), d_p_hat: Tensor2::zeros(k, dim) }
    }

    fn add_scaled(&mut self, other: &ProtoGrads, scale: f64) {
        for (a, b) in self.d_p.as_mut_slice().iter_mut().zip(other.d_p.as_slice()) {
            *a += scale * b;
        }
        for (a, b) in self.d_p_hat.as_mut_slice().iter_mut().zip(other.d_p_hat.as_slice()) {
            *a += scale * b;
        }
    }
}

fn check_aligned(p: &PrototypeSet, p_hat: &PrototypeSet) -> Result<()> {
    if p.classes() != p_hat.classes() {
        return Err(Error::Alignment(format!(
            "classes {:?} vs {:?}",
            p.classes(),
            p_hat.classes()
        )));
    }
    Ok(())
}

/// One direction of the prototype contrastive loss.
///
/// For each class prototype the positive is its augmented view; the
/// denominator collects similarities to every augmented view plus to the
/// other prototypes of the same set:
///
/// `-1/K * sum_i log[ exp(p_i.ph_i/t) / (sum_j exp(p_i.ph_j/t) + sum_{j!=i} exp(p_i.p_j/t)) ]`
pub fn proto_contrastive(
    p: &PrototypeSet,
    p_hat: &PrototypeSet,
    tau: f64,
) -> Result<(f64, ProtoGrads)> {
    check_aligned(p, p_hat)?;
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    let k = p.len();
    let dim = p.prototypes().cols();
    let mut grads = ProtoGrads::zeros(k, dim);
    if k == 0 {
        return Ok((0.0, grads));
    }
    let pm = p.prototypes();
    let ph = p_hat.prototypes();
    let inv_k = 1.0 / k as f64;
    let mut loss = 0.0;
    for i in 0..k {
        // Scaled similarities entering anchor i's denominator: all cross-view
        // pairs, then same-view pairs excluding the anchor itself.
        let a: Vec<f64> = (0..k).map(|j| dot(pm.row(i), ph.row(j)) / tau).collect();
        let b: Vec<f64> = (0..k)
            .map(|j| if j == i { f64::NEG_INFINITY } else { dot(pm.row(i), pm.row(j)) / tau })
            .collect();
        let max = a
            .iter()
            .chain(b.iter())
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = a.iter().map(|v| (v - max).exp()).sum::<f64>()
            + b.iter().filter(|v| v.is_finite()).map(|v| (v - max).exp()).sum::<f64>();
        let log_denom = max + sum.ln();
        loss += inv_k * (log_denom - a[i]);

        // d loss / d similarity, already including the 1/(K tau) factors.
        for j in 0..k {
            let soft = ((a[j] - max).exp() / sum) * inv_k / tau;
            let g = soft - if j == i { inv_k / tau } else { 0.0 };
            // a_ij = p_i . ph_j
            for (d, v) in grads.d_p.row_mut(i).iter_mut().zip(ph.row(j)) {
                *d += g * v;
            }
            for (d, v) in grads.d_p_hat.row_mut(j).iter_mut().zip(pm.row(i)) {
                *d += g * v;
            }
        }
        for j in 0..k {
            if j == i {
                continue;
            }
            let soft = ((b[j] - max).exp() / sum) * inv_k / tau;
            // b_ij = p_i . p_j touches both rows of the same matrix.
            for (d, v) in grads.d_p.row_mut(i).iter_mut().zip(pm.row(j)) {
                *d += soft * v;
            }
            for (d, v) in grads.d_p.row_mut(j).iter_mut().zip(pm.row(i)) {
                *d += soft * v;
            }
        }
    }
    Ok((loss, grads))
}

/// Symmetrized prototype loss: the mean of both anchor directions.
pub fn l_pro(p: &PrototypeSet, p_hat: &PrototypeSet, tau: f64) -> Result<(f64, ProtoGrads)> {
    let (fwd, g_fwd) = proto_contrastive(p, p_hat, tau)?;
    let (bwd, g_bwd) = proto_contrastive(p_hat, p, tau)?;
    let mut grads = ProtoGrads::zeros(p.len(), p.prototypes().cols());
    grads.add_scaled(&g_fwd, 0.5);
    // The reversed direction's d_p is this call's d_p_hat and vice versa.
    let swapped = ProtoGrads { d_p: g_bwd.d_p_hat, d_p_hat: g_bwd.d_p };
    grads.add_scaled(&swapped, 0.5);
    Ok((0.5 * (fwd + bwd), grads))
}

/// New-classes and seen-classes prototype terms; an absent side contributes
/// zero.
#[allow(clippy::type_complexity)]
pub fn ope_loss(
    new: Option<(&PrototypeSet, &PrototypeSet)>,
    seen: Option<(&PrototypeSet, &PrototypeSet)>,
    tau: f64,
) -> Result<(f64, Option<ProtoGrads>, f64, Option<ProtoGrads>)> {
    let (l_new, g_new) = match new {
        Some((p, p_hat)) => {
            let (l, g) = l_pro(p, p_hat, tau)?;
            (l, Some(g))
        }
        None => (0.0, None),
    };
    let (l_seen, g_seen) = match seen {
        Some((p, p_hat)) => {
            let (l, g) = l_pro(p, p_hat, tau)?;
            (l, Some(g))
        }
        None => (0.0, None),
    };
    Ok((l_new, g_new, l_seen, g_seen))
}

/// Supervised contrastive loss over one group of view embeddings.
///
/// Rows of `z` must be unit-norm so dot products are cosine similarities.
/// Anchors without positives contribute zero. The result is summed over
/// anchors, not averaged.
pub fn supcon_group(z: &Tensor2, labels: &[usize], tau_prime: f64) -> Result<(f64, Tensor2)> {
    if z.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings against {} labels",
            z.rows(),
            labels.len()
        )));
    }
    if !(tau_prime > 0.0) {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    let n = z.rows();
    let mut d_z = Tensor2::zeros(n, z.cols());
    let mut loss = 0.0;
    for i in 0..n {
        let positives: Vec<usize> =
            (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let sims: Vec<f64> = (0..n)
            .map(|k| if k == i { f64::NEG_INFINITY } else { dot(z.row(i), z.row(k)) / tau_prime })
            .collect();
        let max = sims.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let denom: f64 = sims.iter().filter(|v| v.is_finite()).map(|v| (v - max).exp()).sum();
        let log_denom = max + denom.ln();
        let inv_pos = 1.0 / positives.len() as f64;
        for &j in &positives {
            loss += inv_pos * (log_denom - sims[j]);
        }
        for k in 0..n {
            if k == i {
                continue;
            }
            let soft = (sims[k] - max).exp() / denom;
            let is_pos = labels[k] == labels[i];
            let g = (soft - if is_pos { inv_pos } else { 0.0 }) / tau_prime;
            for (d, v) in d_z.row_mut(i).iter_mut().zip(z.row(k)) {
                *d += g * v;
            }
            for (d, v) in d_z.row_mut(k).iter_mut().zip(z.row(i)) {
                *d += g * v;
            }
        }
    }
    Ok((loss, d_z))
}

/// Instance loss over the incoming-view group and, when present, the replay-
/// view group. The two sums are independent; no cross-group pairs exist.
#[allow(clippy::type_complexity)]
pub fn supcon_ins(
    incoming: (&Tensor2, &[usize]),
    replay: Option<(&Tensor2, &[usize])>,
    tau_prime: f64,
) -> Result<(f64, Tensor2, Option<Tensor2>)> {
    let (l_in, d_in) = supcon_group(incoming.0, incoming.1, tau_prime)?;
    match replay {
        Some((z, labels)) => {
            let (l_rep, d_rep) = supcon_group(z, labels, tau_prime)?;
            Ok((l_in + l_rep, d_in, Some(d_rep)))
        }
        None => Ok((l_in, d_in, None)),
    }
}

/// Mean cross-entropy of logits against per-row probability targets
/// (one-hot for plain replay samples, two-hot for mixup samples).
pub fn replay_ce(logits: &Tensor2, targets: &Tensor2) -> Result<(f64, Tensor2)> {
    if logits.rows() != targets.rows() || logits.cols() != targets.cols() {
        return Err(Error::Shape("logits and targets must have equal shape".into()));
    }
    if logits.rows() == 0 {
        return Ok((0.0, Tensor2::zeros(0, logits.cols())));
    }
    for i in 0..targets.rows() {
        let row = targets.row(i);
        if row.iter().any(|v| *v < -1e-12) {
            return Err(Error::Target(format!("negative entry in target row {i}")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Target(format!("target row {i} sums to {sum}")));
        }
    }
    let n = logits.rows() as f64;
    let mut d_logits = Tensor2::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_denom = max + denom.ln();
        for ((&l, &t), d) in row.iter().zip(targets.row(i)).zip(d_logits.row_mut(i)) {
            loss += -t * (l - log_denom) / n;
            *d = ((l - max).exp() / denom - t) / n;
        }
    }
    Ok((loss, d_logits))
}

/// Per-step loss terms; the total is their plain unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ope_new: f64,
    pub l_ope_seen: f64,
    pub l_ins: f64,
    pub l_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_ope_new: f64, l_ope_seen: f64, l_ins: f64, l_ce: f64) -> Self {
        Self { l_ope_new, l_ope_seen, l_ins, l_ce, total: l_ope_new + l_ope_seen + l_ins + l_ce }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, l2_normalize};
    use proptest::prelude::*;

    fn proto_set(rows: &[Vec<f64>], labels: &[usize]) -> PrototypeSet {
        let normed: Vec<Vec<f64>> = rows.iter().map(|r| l2_normalize(r).unwrap()).collect();
        let z = Tensor2::from_rows(&normed).unwrap();
        PrototypeSet::compute(&z, labels).unwrap()
    }

    /// Straight transliteration of the loss definition, used as an oracle.
    fn naive_proto_loss(p: &Tensor2, p_hat: &Tensor2, tau: f64) -> f64 {
        let k = p.rows();
        let mut total = 0.0;
        for i in 0..k {
            let num = (dot(p.row(i), p_hat.row(i)) / tau).exp();
            let mut denom = 0.0;
            for j in 0..k {
                denom += (dot(p.row(i), p_hat.row(j)) / tau).exp();
            }
            for j in 0..k {
                if j != i {
                    denom += (dot(p.row(i), p.row(j)) / tau).exp();
                }
            }
            total += -(num / denom).ln();
        }
        total / k as f64
    }

    #[test]
    fn singleton_prototype_loss_is_exactly_zero() {
        let p = proto_set(&[vec![0.6, 0.8]], &[0]);
        let (loss, grads) = proto_contrastive(&p, &p, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.d_p.as_slice().iter().all(|g| *g == 0.0));
        let (sym, _) = l_pro(&p, &p, 1.0).unwrap();
        assert_eq!(sym, 0.0);
    }

    #[test]
    fn two_orthogonal_prototypes_match_closed_form() {
        let p = proto_set(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        let (loss, _) = proto_contrastive(&p, &p, 1.0).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 2.0)).ln();
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
        assert!((loss - 0.551445).abs() < 1e-5);
        assert!((loss - naive_proto_loss(p.prototypes(), p.prototypes(), 1.0)).abs() < 1e-12);
    }

    #[test]
    fn three_orthogonal_prototypes_match_closed_form() {
        let p = proto_set(
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            &[0, 1, 2],
        );
        let (loss, _) = proto_contrastive(&p, &p, 1.0).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 4.0)).ln();
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
        assert!((loss - naive_proto_loss(p.prototypes(), p.prototypes(), 1.0)).abs() < 1e-12);
    }

    #[test]
    fn proto_loss_matches_naive_oracle_on_random_inputs() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let dist = Normal::new(0.0, 1.0).unwrap();
        for k in 1..5 {
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..6).map(|_| dist.sample(&mut rng)).collect())
                .collect();
            let hat_rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..6).map(|_| dist.sample(&mut rng)).collect())
                .collect();
            let labels: Vec<usize> = (0..k).collect();
            let p = proto_set(&rows, &labels);
            let p_hat = proto_set(&hat_rows, &labels);
            for tau in [0.25, 0.5, 1.0] {
                let (loss, _) = proto_contrastive(&p, &p_hat, tau).unwrap();
                let naive = naive_proto_loss(p.prototypes(), p_hat.prototypes(), tau);
                assert!((loss - naive).abs() < 1e-10, "k={k} tau={tau}: {loss} vs {naive}");
            }
        }
    }

    #[test]
    fn misaligned_class_sets_are_rejected() {
        let p = proto_set(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        let q = proto_set(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 2]);
        assert!(matches!(proto_contrastive(&p, &q, 1.0), Err(Error::Alignment(_))));
    }

    #[test]
    fn proto_gradients_match_finite_differences() {
        let raw_p = vec![vec![0.9, 0.2, -0.1], vec![0.3, -0.8, 0.5], vec![-0.2, 0.4, 0.7]];
        let raw_h = vec![vec![0.8, 0.3, 0.0], vec![0.2, -0.7, 0.6], vec![-0.3, 0.5, 0.6]];
        let labels = [0, 1, 2];
        let p = proto_set(&raw_p, &labels);
        let p_hat = proto_set(&raw_h, &labels);
        let tau = 0.5;
        let (_, grads) = proto_contrastive(&p, &p_hat, tau).unwrap();

        // The loss is algebraic in both matrices; differentiate w.r.t. the
        // raw entries of each in turn.
        let mut flat = p.prototypes().as_slice().to_vec();
        flat.extend_from_slice(p_hat.prototypes().as_slice());
        let mut analytic = grads.d_p.as_slice().to_vec();
        analytic.extend_from_slice(grads.d_p_hat.as_slice());
        let loss = |v: &[f64]| {
            let pm = Tensor2::from_vec(3, 3, v[..9].to_vec()).unwrap();
            let ph = Tensor2::from_vec(3, 3, v[9..].to_vec()).unwrap();
            naive_proto_loss(&pm, &ph, tau)
        };
        let err = finite_diff_check(loss, &flat, &analytic, 1e-6);
        assert!(err < 1e-6, "proto gradient mismatch: {err}");
    }

    #[test]
    fn l_pro_is_symmetric_in_its_arguments() {
        let p = proto_set(&[vec![0.9, 0.1], vec![-0.2, 0.9]], &[0, 1]);
        let q = proto_set(&[vec![0.7, 0.4], vec![0.1, -0.8]], &[0, 1]);
        let (ab, _) = l_pro(&p, &q, 0.5).unwrap();
        let (ba, _) = l_pro(&q, &p, 0.5).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        // With identical sets it reduces to the one-directional loss.
        let (sym, _) = l_pro(&p, &p, 0.5).unwrap();
        let (one, _) = proto_contrastive(&p, &p, 0.5).unwrap();
        assert!((sym - one).abs() < 1e-12);
    }

    #[test]
    fn ope_loss_sides_are_independent() {
        let p = proto_set(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        let (l_new, g_new, l_seen, g_seen) = ope_loss(Some((&p, &p)), None, 1.0).unwrap();
        assert!(l_new > 0.0);
        assert!(g_new.is_some());
        assert_eq!(l_seen, 0.0);
        assert!(g_seen.is_none());

        // Both sides singleton: zero total.
        let s = proto_set(&[vec![1.0, 0.0]], &[0]);
        let (a, _, b, _) = ope_loss(Some((&s, &s)), Some((&s, &s)), 1.0).unwrap();
        assert_eq!(a + b, 0.0);
    }

    /// Raising the positive-pair similarity with everything else fixed must
    /// lower the loss; checked at the similarity-matrix level.
    #[test]
    fn proto_loss_decreases_in_positive_similarity() {
        let eval = |bump: f64| {
            let k = 3;
            let mut a = vec![vec![0.0f64; k]; k]; // cross-view sims
            let b = vec![vec![0.2f64; k]; k]; // same-view sims
            for (i, row) in a.iter_mut().enumerate() {
                row[i] = 0.7;
            }
            a[1][1] += bump;
            let mut total = 0.0;
            for i in 0..k {
                let num = a[i][i].exp();
                let mut denom = 0.0;
                for j in 0..k {
                    denom += a[i][j].exp();
                }
                for j in 0..k {
                    if j != i {
                        denom += b[i][j].exp();
                    }
                }
                total += -(num / denom).ln();
            }
            total / k as f64
        };
        assert!(eval(0.05) < eval(0.0));
        assert!(eval(0.0) < eval(-0.05));
    }

    #[test]
    fn identical_views_of_one_pair_cost_nothing() {
        let z = Tensor2::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let (loss, d_z) = supcon_group(&z, &[0, 0], 1.0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(d_z.as_slice().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn all_distinct_classes_contribute_nothing() {
        let z = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let (loss, d_z) = supcon_group(&z, &[0, 1, 2], 0.07).unwrap();
        assert_eq!(loss, 0.0);
        assert!(d_z.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn supcon_hand_case_two_pairs() {
        let z = Tensor2::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let (loss, _) = supcon_group(&z, &[0, 0, 1, 1], 1.0).unwrap();
        let per_anchor = -(std::f64::consts::E / (std::f64::consts::E + 2.0)).ln();
        assert!((loss - 4.0 * per_anchor).abs() < 1e-5, "{loss}");
        assert!((loss - 2.20578).abs() < 1e-5);
    }

    #[test]
    fn supcon_gradients_match_finite_differences() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| l2_normalize(&(0..4).map(|_| dist.sample(&mut rng)).collect::<Vec<_>>()).unwrap())
            .collect();
        let labels = [0, 1, 0, 2, 1, 0];
        let z = Tensor2::from_rows(&rows).unwrap();
        let (_, d_z) = supcon_group(&z, &labels, 0.3).unwrap();
        let loss = |v: &[f64]| {
            let z = Tensor2::from_vec(6, 4, v.to_vec()).unwrap();
            supcon_group(&z, &labels, 0.3).unwrap().0
        };
        let err = finite_diff_check(loss, z.as_slice(), d_z.as_slice(), 1e-6);
        assert!(err < 1e-6, "supcon gradient mismatch: {err}");
    }

    #[test]
    fn supcon_ins_sums_both_groups() {
        let z_in = Tensor2::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let z_rep = Tensor2::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let (total, _, d_rep) =
            supcon_ins((&z_in, &[0, 0]), Some((&z_rep, &[0, 0, 1, 1])), 1.0).unwrap();
        let (a, _) = supcon_group(&z_in, &[0, 0], 1.0).unwrap();
        let (b, _) = supcon_group(&z_rep, &[0, 0, 1, 1], 1.0).unwrap();
        assert!((total - (a + b)).abs() < 1e-12);
        assert!(d_rep.is_some());
    }

    #[test]
    fn one_hot_uniform_logits_cost_log_c() {
        let logits = Tensor2::zeros(2, 5);
        let targets = Tensor2::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
        ])
        .unwrap();
        let (loss, _) = replay_ce(&logits, &targets).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matching_softmax_target_is_stationary() {
        let logits = Tensor2::from_rows(&[vec![0.3, -0.4, 1.1]]).unwrap();
        let max = 1.1;
        let denom: f64 = logits.row(0).iter().map(|v| (v - max).exp()).sum();
        let target: Vec<f64> = logits.row(0).iter().map(|v| (v - max).exp() / denom).collect();
        let entropy: f64 = target.iter().map(|p| -p * p.ln()).sum();
        let t = Tensor2::from_rows(&[target]).unwrap();
        let (loss, d) = replay_ce(&logits, &t).unwrap();
        assert!((loss - entropy).abs() < 1e-12);
        assert!(d.as_slice().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn mixup_target_is_linear_in_the_endpoints() {
        let logits = Tensor2::from_rows(&[vec![0.2, -0.7, 0.9]]).unwrap();
        let one_hot_a = Tensor2::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let one_hot_b = Tensor2::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        let mixed = Tensor2::from_rows(&[vec![0.5, 0.0, 0.5]]).unwrap();
        let (la, _) = replay_ce(&logits, &one_hot_a).unwrap();
        let (lb, _) = replay_ce(&logits, &one_hot_b).unwrap();
        let (lm, _) = replay_ce(&logits, &mixed).unwrap();
        assert!((lm - 0.5 * (la + lb)).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_is_softmax_minus_target() {
        let logits = Tensor2::from_rows(&[vec![1.2, -0.3, 0.4], vec![0.0, 0.5, -0.5]]).unwrap();
        let targets =
            Tensor2::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.3, 0.3, 0.4]]).unwrap();
        let (_, d) = replay_ce(&logits, &targets).unwrap();
        for i in 0..2 {
            let row = logits.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for ((l, t), g) in row.iter().zip(targets.row(i)).zip(d.row(i)) {
                let expected = ((l - max).exp() / denom - t) / 2.0;
                assert!((g - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_distribution_target_is_rejected() {
        let logits = Tensor2::zeros(1, 3);
        let bad = Tensor2::from_rows(&[vec![0.5, 0.2, 0.1]]).unwrap();
        assert!(matches!(replay_ce(&logits, &bad), Err(Error::Target(_))));
        let negative = Tensor2::from_rows(&[vec![1.5, -0.5, 0.0]]).unwrap();
        assert!(matches!(replay_ce(&logits, &negative), Err(Error::Target(_))));
    }

    #[test]
    fn breakdown_total_is_the_sum_of_parts() {
        let b = LossBreakdown::new(0.3, 0.0, 1.2, 0.0);
        assert!((b.total - 1.5).abs() < 1e-10);
        let c = LossBreakdown::new(0.0, 0.7, 0.0, 0.0);
        assert_eq!(c.total, 0.7);
    }

    proptest! {
        /// Cosine similarities are preserved by any common rotation, so the
        /// instance loss must be too.
        #[test]
        fn supcon_is_rotation_invariant(seed in 0u64..100, angle in 0.0f64..6.28) {
            use rand::SeedableRng;
            use rand_distr::{Distribution, Normal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dist = Normal::new(0.0, 1.0).unwrap();
            let rows: Vec<Vec<f64>> = (0..5)
                .map(|_| l2_normalize(&(0..3).map(|_| dist.sample(&mut rng)).collect::<Vec<_>>()).unwrap())
                .collect();
            let labels = [0usize, 1, 0, 1, 0];
            let z = Tensor2::from_rows(&rows).unwrap();
            // Givens rotation in the (0, 1) plane.
            let rotated: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let mut v = r.clone();
                    v[0] = angle.cos() * r[0] - angle.sin() * r[1];
                    v[1] = angle.sin() * r[0] + angle.cos() * r[1];
                    v
                })
                .collect();
            let zr = Tensor2::from_rows(&rotated).unwrap();
            let (a, _) = supcon_group(&z, &labels, 0.5).unwrap();
            let (b, _) = supcon_group(&zr, &labels, 0.5).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        /// Batch order must not matter for any loss term.
        #[test]
        fn losses_are_permutation_invariant(seed in 0u64..100) {
            use rand::SeedableRng;
            use rand::seq::SliceRandom;
            use rand_distr::{Distribution, Normal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dist = Normal::new(0.0, 1.0).unwrap();
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| l2_normalize(&(0..4).map(|_| dist.sample(&mut rng)).collect::<Vec<_>>()).unwrap())
                .collect();
            let labels = [0usize, 1, 2, 0, 1, 2];
            let mut order: Vec<usize> = (0..6).collect();
            order.shuffle(&mut rng);
            let permuted_rows: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
            let permuted_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();

            let z = Tensor2::from_rows(&rows).unwrap();
            let zp = Tensor2::from_rows(&permuted_rows).unwrap();
            let (a, _) = supcon_group(&z, &labels, 0.2).unwrap();
            let (b, _) = supcon_group(&zp, &permuted_labels, 0.2).unwrap();
            prop_assert!((a - b).abs() < 1e-9);

            let p1 = PrototypeSet::compute(&z, &labels).unwrap();
            let p2 = PrototypeSet::compute(&zp, &permuted_labels).unwrap();
            let (la, _) = l_pro(&p1, &p1, 0.5).unwrap();
            let (lb, _) = l_pro(&p2, &p2, 0.5).unwrap();
            prop_assert!((la - lb).abs() < 1e-9);
        }
    }
}
