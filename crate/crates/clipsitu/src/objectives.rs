//! Training losses.
//!
//! The noun loss is the minimum-annotator cross entropy: per role, the
//! cross-entropy against each annotator's label, taking the minimum over
//! annotators and averaging over unmasked roles. Ties pick the first
//! minimizing annotator so training stays deterministic. Box regression uses
//! an L1 loss over present boxes, role prediction a per-head cross entropy,
//! and the video decoder a token cross entropy over non-pad positions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mat::Mat;

/// Scalar loss broken into named components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    /// Number of elements that contributed (roles, boxes, tokens).
    pub count: usize,
}

impl LossReport {
    pub fn single(name: &str, value: f64, count: usize) -> Self {
        let mut components = BTreeMap::new();
        components.insert(name.to_string(), value);
        LossReport {
            total: value,
            components,
            count,
        }
    }

    /// Combine component reports; the total is their sum.
    pub fn combined(parts: &[(&str, f64, usize)]) -> Self {
        let mut components = BTreeMap::new();
        let mut total = 0.0;
        let mut count = 0;
        for (name, value, n) in parts {
            components.insert(name.to_string(), *value);
            total += value;
            count += n;
        }
        LossReport {
            total,
            components,
            count,
        }
    }
}

/// Minimum-annotator cross entropy over `m` roles with `q` annotators.
///
/// `labels` is `m` rows of `q` class indices; `mask[i]` admits role `i`.
/// Returns the graph node plus, per role, which annotator supplied the
/// minimum (useful in tests and diagnostics).
pub fn maxe_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[Vec<usize>],
    mask: &[bool],
) -> Result<(Var, Vec<usize>)> {
    let (m, classes) = g.value(logits).shape();
    if labels.len() != m || mask.len() != m {
        return Err(Error::shape(
            "maxe_loss",
            format!("{m} label rows"),
            format!("{} labels, {} mask", labels.len(), mask.len()),
        ));
    }
    let active = mask.iter().filter(|&&b| b).count();
    if active == 0 {
        return Err(Error::InvalidArgument(
            "maxe_loss: every role is masked".into(),
        ));
    }
    let logp = g.log_softmax_rows(logits);
    let lp = g.value(logp).clone();
    let mut picks = Vec::with_capacity(active);
    let mut chosen = vec![0usize; m];
    for (i, row_labels) in labels.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        if row_labels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "maxe_loss: role {i} has no annotators"
            )));
        }
        let mut best_j = 0;
        let mut best_ce = f64::INFINITY;
        for (j, &label) in row_labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::InvalidArgument(format!(
                    "maxe_loss: label {label} out of range {classes}"
                )));
            }
            let ce = -lp.get(i, label);
            // Strict `<` keeps the first minimizing annotator on ties.
            if ce < best_ce {
                best_ce = ce;
                best_j = j;
            }
        }
        chosen[i] = best_j;
        picks.push((i, row_labels[best_j], -1.0 / active as f64));
    }
    Ok((g.pick_weighted(logp, picks), chosen))
}

/// Mean L1 distance over present boxes; zero (with count 0) if none present.
///
/// Returns `(loss, present_count)`.
pub fn bbox_l1(g: &mut Graph, pred: Var, gt: &Mat, present: &[bool]) -> Result<(Var, usize)> {
    let (m, four) = g.value(pred).shape();
    if four != 4 || gt.shape() != (m, 4) || present.len() != m {
        return Err(Error::shape(
            "bbox_l1",
            format!("({m},4) pred/gt and {m} flags"),
            format!("{:?} gt, {} flags", gt.shape(), present.len()),
        ));
    }
    let m_present = present.iter().filter(|&&b| b).count();
    if m_present == 0 {
        return Ok((g.leaf(Mat::scalar(0.0)), 0));
    }
    let gt_leaf = g.leaf(gt.clone());
    let diff = g.sub(pred, gt_leaf);
    let dist = g.abs(diff);
    let row_mask = Mat::from_fn(m, 4, |r, _| if present[r] { 1.0 } else { 0.0 });
    let masked = g.mul_const(dist, row_mask);
    let total = g.sum_all(masked);
    Ok((g.scale(total, 1.0 / m_present as f64), m_present))
}

/// Per-head cross entropy for the role predictor, averaged over heads.
///
/// The head count is the logits row count; `scale` rescales the average (the
/// default 1.0 is a plain per-head mean).
pub fn role_ce(g: &mut Graph, head_logits: Var, gt_roles: &[usize], scale: f64) -> Result<Var> {
    let (heads, classes) = g.value(head_logits).shape();
    if gt_roles.len() != heads {
        return Err(Error::shape(
            "role_ce",
            format!("{heads} labels"),
            format!("{}", gt_roles.len()),
        ));
    }
    for &r in gt_roles {
        if r >= classes {
            return Err(Error::InvalidArgument(format!(
                "role_ce: label {r} out of range {classes}"
            )));
        }
    }
    let logp = g.log_softmax_rows(head_logits);
    let picks: Vec<(usize, usize, f64)> = gt_roles
        .iter()
        .enumerate()
        .map(|(i, &r)| (i, r, -scale / heads as f64))
        .collect();
    Ok(g.pick_weighted(logp, picks))
}

/// Token cross entropy over positions where `pad[t]` is false.
pub fn seq_ce(g: &mut Graph, logits: Var, targets: &[usize], pad: &[bool]) -> Result<Var> {
    let (t_len, vocab) = g.value(logits).shape();
    if targets.len() != t_len || pad.len() != t_len {
        return Err(Error::shape(
            "seq_ce",
            format!("{t_len} targets"),
            format!("{} targets, {} pad flags", targets.len(), pad.len()),
        ));
    }
    let active = pad.iter().filter(|&&p| !p).count();
    if active == 0 {
        return Err(Error::InvalidArgument("seq_ce: every position is pad".into()));
    }
    let logp = g.log_softmax_rows(logits);
    let mut picks = Vec::with_capacity(active);
    for (t, (&target, &is_pad)) in targets.iter().zip(pad).enumerate() {
        if is_pad {
            continue;
        }
        if target >= vocab {
            return Err(Error::InvalidArgument(format!(
                "seq_ce: target {target} out of range {vocab}"
            )));
        }
        picks.push((t, target, -1.0 / active as f64));
    }
    Ok(g.pick_weighted(logp, picks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Scalar-loop oracle: softmax cross entropy of one row against a label.
    fn ce_oracle(logits: &[f64], label: usize) -> f64 {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        lse - logits[label]
    }

    fn maxe_oracle(logits: &Mat, labels: &[Vec<usize>], mask: &[bool]) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..logits.rows() {
            if !mask[i] {
                continue;
            }
            let per_ann: Vec<f64> = labels[i].iter().map(|&l| ce_oracle(logits.row(i), l)).collect();
            total += per_ann.iter().cloned().fold(f64::INFINITY, f64::min);
            n += 1;
        }
        total / n as f64
    }

    fn rand_logits(rng: &mut ChaCha8Rng, m: usize, c: usize) -> Mat {
        Mat::from_fn(m, c, |_, _| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn maxe_single_annotator_is_plain_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = rand_logits(&mut rng, 3, 7);
        let labels = vec![vec![2], vec![0], vec![6]];
        let mask = vec![true; 3];
        let mut g = Graph::new();
        let lv = g.leaf(logits.clone());
        let (loss, _) = maxe_loss(&mut g, lv, &labels, &mask).unwrap();
        let expect = (ce_oracle(logits.row(0), 2)
            + ce_oracle(logits.row(1), 0)
            + ce_oracle(logits.row(2), 6))
            / 3.0;
        assert!((g.value(loss).get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn maxe_duplicate_annotators_equal_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = rand_logits(&mut rng, 2, 5);
        let single = vec![vec![1], vec![3]];
        let triple = vec![vec![1, 1, 1], vec![3, 3, 3]];
        let mask = vec![true, true];
        let mut g = Graph::new();
        let lv = g.leaf(logits.clone());
        let (l1, _) = maxe_loss(&mut g, lv, &single, &mask).unwrap();
        let mut g2 = Graph::new();
        let lv2 = g2.leaf(logits);
        let (l3, _) = maxe_loss(&mut g2, lv2, &triple, &mask).unwrap();
        assert_eq!(g.value(l1).get(0, 0), g2.value(l3).get(0, 0));
    }

    #[test]
    fn maxe_matches_loop_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = rng.random_range(1..=4);
            let c = rng.random_range(2..=9);
            let q = rng.random_range(1..=4);
            let logits = rand_logits(&mut rng, m, c);
            let labels: Vec<Vec<usize>> = (0..m)
                .map(|_| (0..q).map(|_| rng.random_range(0..c)).collect())
                .collect();
            let mask = vec![true; m];
            let mut g = Graph::new();
            let lv = g.leaf(logits.clone());
            let (loss, _) = maxe_loss(&mut g, lv, &labels, &mask).unwrap();
            let oracle = maxe_oracle(&logits, &labels, &mask);
            assert!((g.value(loss).get(0, 0) - oracle).abs() < 1e-8);
        }
    }

    #[test]
    fn maxe_all_masked_is_error() {
        let mut g = Graph::new();
        let lv = g.leaf(Mat::zeros(2, 3));
        let err = maxe_loss(&mut g, lv, &[vec![0], vec![1]], &[false, false]).unwrap_err();
        assert!(err.to_string().contains("masked"));
    }

    #[test]
    fn maxe_tie_gradient_follows_first_annotator() {
        // Annotators 0 and 1 give the same label, so their CEs tie exactly;
        // the gradient must equal the single-annotator gradient.
        let logits = Mat::from_vec(1, 4, vec![0.2, -0.4, 1.1, 0.0]);
        let grad_for = |labels: Vec<Vec<usize>>| -> Mat {
            let mut g = Graph::new();
            let lv = g.leaf(logits.clone());
            let (loss, chosen) = maxe_loss(&mut g, lv, &labels, &[true]).unwrap();
            assert_eq!(chosen[0], 0);
            g.backward(loss);
            g.grad(lv)
        };
        let tied = grad_for(vec![vec![2, 2]]);
        let single = grad_for(vec![vec![2]]);
        assert_eq!(tied, single);
    }

    #[test]
    fn bbox_zero_when_equal_and_hand_case() {
        let mut g = Graph::new();
        let pred = g.leaf(Mat::from_vec(1, 4, vec![0.3, 0.4, 0.5, 0.6]));
        let gt = Mat::from_vec(1, 4, vec![0.3, 0.4, 0.5, 0.6]);
        let (loss, n) = bbox_l1(&mut g, pred, &gt, &[true]).unwrap();
        assert_eq!(g.value(loss).get(0, 0), 0.0);
        assert_eq!(n, 1);

        // every component off by 0.1 → four deviations of 0.1 → 0.4
        let mut g = Graph::new();
        let pred = g.leaf(Mat::from_vec(1, 4, vec![0.4, 0.5, 0.6, 0.7]));
        let (loss, _) = bbox_l1(&mut g, pred, &gt, &[true]).unwrap();
        assert!((g.value(loss).get(0, 0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn bbox_absent_roles_are_excluded() {
        let gt = Mat::from_vec(2, 4, vec![0.1, 0.1, 0.1, 0.1, 0.9, 0.9, 0.9, 0.9]);
        let loss_with = |absent_pred: f64| -> f64 {
            let mut g = Graph::new();
            let pred = g.leaf(Mat::from_vec(
                2,
                4,
                vec![0.2, 0.2, 0.2, 0.2, absent_pred, absent_pred, absent_pred, absent_pred],
            ));
            let (loss, n) = bbox_l1(&mut g, pred, &gt, &[true, false]).unwrap();
            assert_eq!(n, 1);
            g.value(loss).get(0, 0)
        };
        assert_eq!(loss_with(0.0), loss_with(123.0));
    }

    #[test]
    fn bbox_no_present_boxes_is_zero_with_count_zero() {
        let mut g = Graph::new();
        let pred = g.leaf(Mat::zeros(2, 4));
        let gt = Mat::zeros(2, 4);
        let (loss, n) = bbox_l1(&mut g, pred, &gt, &[false, false]).unwrap();
        assert_eq!(g.value(loss).get(0, 0), 0.0);
        assert_eq!(n, 0);
    }

    #[test]
    fn role_ce_uniform_logits_is_ln_classes() {
        let mut g = Graph::new();
        let lv = g.leaf(Mat::zeros(6, 191));
        let loss = role_ce(&mut g, lv, &[0, 10, 50, 190, 7, 3], 1.0).unwrap();
        assert!((g.value(loss).get(0, 0) - (191f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn role_ce_perfect_logits_vanish() {
        let gt = [1usize, 0, 2, 2, 1, 0];
        let logits = Mat::from_fn(6, 3, |r, c| if c == gt[r] { 50.0 } else { 0.0 });
        let mut g = Graph::new();
        let lv = g.leaf(logits);
        let loss = role_ce(&mut g, lv, &gt, 1.0).unwrap();
        assert!(g.value(loss).get(0, 0) < 1e-9);
    }

    #[test]
    fn role_ce_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_logits(&mut rng, 6, 11);
        let gt: Vec<usize> = (0..6).map(|_| rng.random_range(0..11)).collect();
        let mut g = Graph::new();
        let lv = g.leaf(logits.clone());
        let loss = role_ce(&mut g, lv, &gt, 1.0).unwrap();
        let oracle: f64 =
            (0..6).map(|i| ce_oracle(logits.row(i), gt[i])).sum::<f64>() / 6.0;
        assert!((g.value(loss).get(0, 0) - oracle).abs() < 1e-8);
    }

    #[test]
    fn role_ce_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let lv = g.leaf(Mat::zeros(6, 191));
        assert!(role_ce(&mut g, lv, &[0, 0, 0, 0, 0, 191], 1.0).is_err());
    }

    #[test]
    fn seq_ce_uniform_and_pad_behaviour() {
        let mut g = Graph::new();
        let lv = g.leaf(Mat::zeros(1, 30));
        let loss = seq_ce(&mut g, lv, &[4], &[false]).unwrap();
        assert!((g.value(loss).get(0, 0) - (30f64).ln()).abs() < 1e-12);

        let mut g = Graph::new();
        let lv = g.leaf(Mat::zeros(3, 5));
        assert!(seq_ce(&mut g, lv, &[0, 1, 2], &[true, true, true]).is_err());
    }

    #[test]
    fn seq_ce_ignores_pad_targets_and_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = rand_logits(&mut rng, 4, 9);
        let targets = [3usize, 8, 0, 5];
        let pad = [false, false, true, false];
        let run = |targets: &[usize]| -> f64 {
            let mut g = Graph::new();
            let lv = g.leaf(logits.clone());
            let loss = seq_ce(&mut g, lv, targets, &pad).unwrap();
            g.value(loss).get(0, 0)
        };
        let base = run(&targets);
        // perturbing the PAD position's target changes nothing
        assert_eq!(base, run(&[3, 8, 7, 5]));
        let oracle = (ce_oracle(logits.row(0), 3)
            + ce_oracle(logits.row(1), 8)
            + ce_oracle(logits.row(3), 5))
            / 3.0;
        assert!((base - oracle).abs() < 1e-8);
    }

    #[test]
    fn loss_report_total_is_component_sum() {
        let r = LossReport::combined(&[("maxe", 1.25, 3), ("l1", 0.5, 2)]);
        assert!((r.total - (r.components["maxe"] + r.components["l1"])).abs() < 1e-9);
        assert_eq!(r.count, 5);
    }

    proptest::proptest! {
        // Appending an annotator can only lower (or keep) the per-role min.
        #[test]
        fn maxe_monotone_in_annotators(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.random_range(1..=3);
            let c = rng.random_range(2..=6);
            let q = rng.random_range(1..=3);
            let logits = rand_logits(&mut rng, m, c);
            let labels: Vec<Vec<usize>> = (0..m)
                .map(|_| (0..q).map(|_| rng.random_range(0..c)).collect())
                .collect();
            let mut extended = labels.clone();
            for row in &mut extended {
                row.push(rng.random_range(0..c));
            }
            let mask = vec![true; m];
            let mut g = Graph::new();
            let lv = g.leaf(logits.clone());
            let (base, _) = maxe_loss(&mut g, lv, &labels, &mask).unwrap();
            let mut g2 = Graph::new();
            let lv2 = g2.leaf(logits.clone());
            let (more, _) = maxe_loss(&mut g2, lv2, &extended, &mask).unwrap();
            proptest::prop_assert!(g2.value(more).get(0,0) <= g.value(base).get(0,0) + 1e-12);

            // MAXE is ≤ the CE against any single annotator column.
            for j in 0..q {
                let col: Vec<Vec<usize>> = labels.iter().map(|r| vec![r[j]]).collect();
                let mut g3 = Graph::new();
                let lv3 = g3.leaf(logits.clone());
                let (single, _) = maxe_loss(&mut g3, lv3, &col, &mask).unwrap();
                proptest::prop_assert!(
                    g.value(base).get(0,0) <= g3.value(single).get(0,0) + 1e-12
                );
            }
        }
    }
}
