//! The adaptation objectives: thresholded self-training, fairness
//! regularization, masked pixel reconstruction and `[CLS]`/`[MSK]`
//! alignment, plus their weighted sum.
//!
//! Every loss returns its value together with the gradient with respect to
//! its direct inputs, so the trainer can chain them into the backbone.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};
use crate::linalg::{argmax, dot, norm2};

/// Lower bound applied to probabilities before taking a log.
pub const LOG_CLAMP: f64 = 1e-12;
/// Default momentum of the running class-mean when `K > B`.
pub const DEFAULT_MEAN_MOMENTUM: f64 = 0.99;

const PROB_TOL: f64 = 1e-5;
const UNIT_TOL: f64 = 1e-6;

fn check_prob_vector(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(invalid_input("empty probability vector"));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(invalid_input("probability vector has negative or non-finite entries"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(invalid_input(format!("probability vector sums to {s}")));
    }
    Ok(())
}

fn check_batch(rows: &[Vec<f64>]) -> Result<usize> {
    let k = rows.first().map(Vec::len).ok_or_else(|| invalid_input("empty batch"))?;
    for r in rows {
        if r.len() != k {
            return Err(invalid_input("ragged probability batch"));
        }
        check_prob_vector(r)?;
    }
    Ok(k)
}

/// Hard pseudo-label: `argmax q` when `max q ≥ τ`. Thresholds above 1 never
/// keep anything.
pub fn pseudo_label(q: &[f64], tau: f64) -> Result<Option<usize>> {
    check_prob_vector(q)?;
    if tau.is_nan() || tau < 0.0 {
        return Err(invalid_input(format!("threshold {tau} is negative")));
    }
    let k = argmax(q);
    Ok((q[k] >= tau).then_some(k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsLoss {
    pub value: f64,
    pub keep_rate: f64,
    pub labels: Vec<Option<usize>>,
    /// Kept samples whose student probability hit the log clamp.
    pub clamped: usize,
    /// `∂L/∂p_b`, one row per sample.
    pub grad: Vec<Vec<f64>>,
}

/// `(1/B) Σ_b 1(max q_b ≥ τ) · −log p_b[q̂_b]`. The sum is divided by the
/// full batch size, not the number of kept samples.
pub fn loss_cls(student: &[Vec<f64>], teacher: &[Vec<f64>], tau: f64) -> Result<ClsLoss> {
    let k = check_batch(student)?;
    if teacher.len() != student.len() || check_batch(teacher)? != k {
        return Err(invalid_input("student and teacher batches differ in shape"));
    }
    let b = student.len() as f64;
    let mut value = 0.0;
    let mut kept = 0usize;
    let mut clamped = 0usize;
    let mut labels = Vec::with_capacity(student.len());
    let mut grad = vec![vec![0.0; k]; student.len()];
    for (i, (p, q)) in student.iter().zip(teacher).enumerate() {
        let label = pseudo_label(q, tau)?;
        if let Some(c) = label {
            kept += 1;
            let pc = p[c];
            if pc < LOG_CLAMP {
                clamped += 1;
                value -= LOG_CLAMP.ln();
            } else {
                value -= pc.ln();
                grad[i][c] = -1.0 / (b * pc);
            }
        }
        labels.push(label);
    }
    Ok(ClsLoss { value: value / b, keep_rate: kept as f64 / b, labels, clamped, grad })
}

/// Moving average of the student's mean prediction, used when there are
/// more classes than samples per batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMeanState {
    pub mean_probs: Vec<f64>,
    pub momentum: f64,
    pub initialized: bool,
}

impl RunningMeanState {
    pub fn new(num_classes: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid_input(format!("momentum {momentum} outside [0, 1)")));
        }
        if num_classes == 0 {
            return Err(invalid_input("no classes"));
        }
        Ok(Self {
            mean_probs: vec![1.0 / num_classes as f64; num_classes],
            momentum,
            initialized: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegLoss {
    pub value: f64,
    /// The `p̄` the loss was evaluated at.
    pub mean: Vec<f64>,
    pub clamped: usize,
    pub grad: Vec<Vec<f64>>,
}

/// `−(1/K) Σ_k log p̄_k`. With `use_moving_average` the state is updated to
/// `m·mean + (1−m)·batch_mean` (or the batch mean on first use) and the
/// loss is taken at the state; gradients flow only through the batch term.
pub fn loss_reg(student: &[Vec<f64>], state: &mut RunningMeanState, use_moving_average: bool) -> Result<RegLoss> {
    let k = check_batch(student)?;
    let b = student.len() as f64;
    let mut batch_mean = vec![0.0; k];
    for p in student {
        for (m, x) in batch_mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    batch_mean.iter_mut().for_each(|m| *m /= b);

    let (mean, coef) = if use_moving_average {
        if state.mean_probs.len() != k {
            return Err(invalid_input("running mean has the wrong number of classes"));
        }
        let coef = if state.initialized {
            let m = state.momentum;
            for (s, x) in state.mean_probs.iter_mut().zip(&batch_mean) {
                *s = m * *s + (1.0 - m) * x;
            }
            1.0 - m
        } else {
            state.mean_probs.clone_from(&batch_mean);
            state.initialized = true;
            1.0
        };
        (state.mean_probs.clone(), coef)
    } else {
        (batch_mean, 1.0)
    };

    let kf = k as f64;
    let mut value = 0.0;
    let mut clamped = 0;
    let mut dmean = vec![0.0; k];
    for (j, &m) in mean.iter().enumerate() {
        if m < LOG_CLAMP {
            clamped += 1;
            value -= LOG_CLAMP.ln();
        } else {
            value -= m.ln();
            dmean[j] = -1.0 / (kf * m);
        }
    }
    let row: Vec<f64> = dmean.iter().map(|g| g * coef / b).collect();
    Ok(RegLoss { value: value / kf, mean, clamped, grad: vec![row; student.len()] })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MimLoss {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

/// Mean absolute error over every masked patch value of the batch. Rows are
/// masked patches (all images concatenated), columns the `N` pixel values,
/// so the divisor is `B·M·N`. No masked patches gives zero.
pub fn loss_mim(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<MimLoss> {
    if pred.len() != target.len() {
        return Err(invalid_input(format!("{} predicted patches vs {} targets", pred.len(), target.len())));
    }
    let total: usize = pred.iter().map(Vec::len).sum();
    if pred.iter().zip(target).any(|(y, x)| y.len() != x.len()) {
        return Err(invalid_input("predicted and target patch sizes differ"));
    }
    if total == 0 {
        return Ok(MimLoss { value: 0.0, grad: pred.iter().map(|y| vec![0.0; y.len()]).collect() });
    }
    let n = total as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(y, x)| {
            y.iter()
                .zip(x)
                .map(|(yi, xi)| {
                    let d = yi - xi;
                    value += d.abs();
                    if d > 0.0 {
                        1.0 / n
                    } else if d < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(MimLoss { value: value / n, grad })
}

/// Which `[MSK]` features each `[CLS]` feature is aligned with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopK {
    All,
    Nearest(usize),
}

impl std::str::FromStr for TopK {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(TopK::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(TopK::Nearest(k)),
            _ => Err(format!("expected `all` or a positive integer, got `{s}`")),
        }
    }
}

impl std::fmt::Display for TopK {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopK::All => write!(f, "all"),
            TopK::Nearest(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignLoss {
    pub value: f64,
    pub grad_cls: Vec<Vec<f64>>,
    pub grad_msk: Vec<Vec<Vec<f64>>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_unit(v: &[f64]) -> Result<()> {
    if (norm2(v) - 1.0).abs() > UNIT_TOL {
        return Err(invalid_input("alignment inputs must be unit vectors"));
    }
    Ok(())
}

/// Mean squared distance between each image's `[CLS]` feature and its
/// `[MSK]` features (or the `k` nearest). Images without masked tokens are
/// left out of the divisor. Ties in nearest selection go to the earlier
/// token.
pub fn loss_align(cls: &[Vec<f64>], msk: &[Vec<Vec<f64>>], top_k: TopK) -> Result<AlignLoss> {
    if cls.len() != msk.len() {
        return Err(invalid_input("one [MSK] list per [CLS] feature required"));
    }
    if let TopK::Nearest(0) = top_k {
        return Err(invalid_input("top-k must be positive"));
    }
    let mut terms = 0usize;
    let mut value = 0.0;
    let mut grad_cls: Vec<Vec<f64>> = cls.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut grad_msk: Vec<Vec<Vec<f64>>> = msk.iter().map(|m| m.iter().map(|v| vec![0.0; v.len()]).collect()).collect();
    let mut selected: Vec<Vec<usize>> = Vec::with_capacity(cls.len());
    for (c, ms) in cls.iter().zip(msk) {
        check_unit(c)?;
        let mut dists = Vec::with_capacity(ms.len());
        for (j, m) in ms.iter().enumerate() {
            if m.len() != c.len() {
                return Err(invalid_input("alignment feature dimensions differ"));
            }
            check_unit(m)?;
            dists.push((sq_dist(c, m), j));
        }
        let keep = match top_k {
            TopK::All => ms.len(),
            TopK::Nearest(k) => k.min(ms.len()),
        };
        if keep < ms.len() {
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        dists.truncate(keep);
        terms += keep;
        value += dists.iter().map(|d| d.0).sum::<f64>();
        selected.push(dists.into_iter().map(|d| d.1).collect());
    }
    if terms == 0 {
        return Ok(AlignLoss { value: 0.0, grad_cls, grad_msk });
    }
    let denom = terms as f64;
    for (b, sel) in selected.iter().enumerate() {
        for &j in sel {
            for (i, (cv, mv)) in cls[b].iter().zip(&msk[b][j]).enumerate() {
                let g = 2.0 * (cv - mv) / denom;
                grad_cls[b][i] += g;
                grad_msk[b][j][i] -= g;
            }
        }
    }
    Ok(AlignLoss { value: value / denom, grad_cls, grad_msk })
}

/// Per-step loss record.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_mim: f64,
    pub l_align: f64,
    pub total: f64,
    pub keep_rate: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_reg, self.l_mim, self.l_align, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_mim: f64,
    pub l_align: f64,
    pub keep_rate: f64,
}

/// `L_cls + λ_reg·L_reg + L_mim + λ_align·L_align`.
pub fn loss_total(parts: LossParts, lambda_reg: f64, lambda_align: f64) -> LossBreakdown {
    LossBreakdown {
        l_cls: parts.l_cls,
        l_reg: parts.l_reg,
        l_mim: parts.l_mim,
        l_align: parts.l_align,
        total: parts.l_cls + lambda_reg * parts.l_reg + parts.l_mim + lambda_align * parts.l_align,
        keep_rate: parts.keep_rate,
    }
}

/// `KL(p̄ ‖ uniform) = Σ p̄_k log(K p̄_k)`.
pub fn kl_to_uniform(mean: &[f64]) -> f64 {
    let k = mean.len() as f64;
    mean.iter().filter(|&&p| p > 0.0).map(|&p| p * (k * p).ln()).sum()
}

/// Squared distance between unit vectors via `2 − 2·a·b`.
pub fn unit_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    2.0 - 2.0 * dot(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pseudo_label_examples() {
        assert_eq!(pseudo_label(&[0.8, 0.2], 0.7).unwrap(), Some(0));
        assert_eq!(pseudo_label(&[0.6, 0.4], 0.7).unwrap(), None);
        assert_eq!(pseudo_label(&[0.3, 0.7], 0.0).unwrap(), Some(1));
        assert_eq!(pseudo_label(&[0.5, 0.5], 0.5).unwrap(), Some(0));
        assert_eq!(pseudo_label(&[1.0, 0.0], 1.01).unwrap(), None);
        assert!(pseudo_label(&[0.5, 0.4], 0.1).is_err());
        assert!(pseudo_label(&[1.2, -0.2], 0.1).is_err());
    }

    #[test]
    fn cls_hand_example() {
        let p = vec![vec![0.5, 0.5], vec![0.3, 0.7]];
        let q = vec![vec![0.8, 0.2], vec![0.6, 0.4]];
        let l = loss_cls(&p, &q, 0.7).unwrap();
        assert!(close(l.value, 0.346_573_590_279_972_6, 1e-12));
        assert_eq!(l.keep_rate, 0.5);
        assert_eq!(l.labels, vec![Some(0), None]);
    }

    #[test]
    fn cls_edge_cases() {
        let p = vec![vec![0.5, 0.5]];
        let l = loss_cls(&p, &[vec![0.6, 0.4]], 0.7).unwrap();
        assert_eq!((l.value, l.keep_rate), (0.0, 0.0));
        let l = loss_cls(&[vec![1.0, 0.0]], &[vec![0.9, 0.1]], 0.7).unwrap();
        assert_eq!(l.value, 0.0);
        let l = loss_cls(&[vec![0.0, 1.0]], &[vec![0.9, 0.1]], 0.7).unwrap();
        assert_eq!(l.clamped, 1);
        assert!(l.value.is_finite() && close(l.value, -LOG_CLAMP.ln(), 1e-9));
    }

    #[test]
    fn reg_examples() {
        let mut st = RunningMeanState::new(2, 0.99).unwrap();
        let l = loss_reg(&[vec![0.5, 0.5]], &mut st, false).unwrap();
        assert!(close(l.value, std::f64::consts::LN_2, 1e-12));
        let l = loss_reg(&[vec![0.9, 0.1]], &mut st, false).unwrap();
        assert!(close(l.value, 1.203_972_804_325_936, 1e-12));
        assert!(!st.initialized);
    }

    #[test]
    fn reg_moving_average() {
        let batches = [vec![vec![0.9, 0.1], vec![0.5, 0.5]], vec![vec![0.2, 0.8], vec![0.4, 0.6]]];
        let mut ma = RunningMeanState::new(2, 0.0).unwrap();
        let mut unused = RunningMeanState::new(2, 0.0).unwrap();
        for b in &batches {
            let a = loss_reg(b, &mut ma, true).unwrap();
            let c = loss_reg(b, &mut unused, false).unwrap();
            assert_eq!(a.value, c.value);
            assert_eq!(a.grad, c.grad);
        }
        let mut st = RunningMeanState::new(2, 0.9).unwrap();
        loss_reg(&[vec![1.0, 0.0]], &mut st, true).unwrap();
        assert_eq!(st.mean_probs, vec![1.0, 0.0]);
        let l = loss_reg(&[vec![0.0, 1.0]], &mut st, true).unwrap();
        assert!(close(st.mean_probs[0], 0.9, 1e-15) && close(st.mean_probs[1], 0.1, 1e-15));
        assert!(close(l.value, 1.203_972_804_325_936, 1e-12));
        assert!(RunningMeanState::new(2, 1.0).is_err());
    }

    #[test]
    fn mim_examples() {
        let x = vec![vec![0.5, 0.5, 0.5]];
        let y = vec![vec![0.6, 0.3, 0.8]];
        assert!(close(loss_mim(&y, &x).unwrap().value, 0.2, 1e-12));
        assert_eq!(loss_mim(&x, &x).unwrap().value, 0.0);
        assert_eq!(loss_mim(&[], &[]).unwrap().value, 0.0);
        assert!(loss_mim(&y, &[vec![0.1, 0.2]]).is_err());
        assert!(loss_mim(&y, &[]).is_err());
    }

    #[test]
    fn align_examples() {
        let c = vec![vec![1.0, 0.0]];
        let same = loss_align(&c, &[vec![vec![1.0, 0.0]]], TopK::All).unwrap();
        assert_eq!(same.value, 0.0);
        let perp = loss_align(&c, &[vec![vec![0.0, 1.0]]], TopK::All).unwrap();
        assert!(close(perp.value, 2.0, 1e-12));
        let anti = loss_align(&c, &[vec![vec![-1.0, 0.0]]], TopK::All).unwrap();
        assert!(close(anti.value, 4.0, 1e-12));
        // image without masked tokens leaves the divisor
        let mixed = loss_align(&[c[0].clone(), c[0].clone()], &[vec![vec![0.0, 1.0]], vec![]], TopK::All).unwrap();
        assert!(close(mixed.value, 2.0, 1e-12));
        assert_eq!(loss_align(&c, &[vec![]], TopK::All).unwrap().value, 0.0);
        assert!(loss_align(&c, &[vec![vec![2.0, 0.0]]], TopK::All).is_err());
        assert!(loss_align(&c, &[vec![vec![1.0, 0.0]]], TopK::Nearest(0)).is_err());
    }

    #[test]
    fn align_nearest_picks_smallest_and_ties_by_position() {
        let c = vec![vec![1.0, 0.0]];
        let ms = vec![vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, -1.0]]];
        let l = loss_align(&c, &ms, TopK::Nearest(2)).unwrap();
        // distances 2, 0, 4, 2 -> picks index 1 and index 0 (tie with 3)
        assert!(close(l.value, 1.0, 1e-12));
        assert!(l.grad_msk[0][0].iter().any(|&g| g != 0.0));
        assert!(l.grad_msk[0][3].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_examples() {
        let z = loss_total(LossParts::default(), 1.0, 0.2);
        assert_eq!(z.total, 0.0);
        let p = LossParts { l_cls: 1.0, l_reg: 1.0, l_mim: 1.0, l_align: 1.0, keep_rate: 1.0 };
        assert!(close(loss_total(p, 1.0, 0.2).total, 3.2, 1e-12));
        let no_align = loss_total(p, 1.0, 0.0);
        assert_eq!(no_align.total, p.l_cls + p.l_reg + p.l_mim);
    }

    fn prob_row(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, d)
            .prop_filter("nonzero", |v| norm2(v) > 1e-3)
            .prop_map(|v| {
                let n = norm2(&v);
                v.into_iter().map(|x| x / n).collect()
            })
    }

    proptest! {
        #[test]
        fn raising_tau_never_raises_keep_rate(
            q in prop::collection::vec(prob_row(4), 1..8),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = loss_cls(&q, &q, lo).unwrap().keep_rate;
            let b = loss_cls(&q, &q, hi).unwrap().keep_rate;
            prop_assert!(b <= a);
        }

        #[test]
        fn cls_is_non_increasing_in_target_prob(q in prob_row(3), p in prob_row(3), bump in 0.0f64..0.5) {
            let c = argmax(&q);
            let base = loss_cls(std::slice::from_ref(&p), std::slice::from_ref(&q), 0.0).unwrap().value;
            // move mass from the other classes onto the pseudo-label
            let take = bump * (1.0 - p[c]);
            let mut p2: Vec<f64> = p.iter().map(|x| x * (1.0 - take / (1.0 - p[c]).max(1e-300))).collect();
            p2[c] = p[c] + take;
            let s: f64 = p2.iter().sum();
            p2.iter_mut().for_each(|x| *x /= s);
            let after = loss_cls(&[p2], &[q], 0.0).unwrap().value;
            prop_assert!(after <= base + 1e-12);
        }

        #[test]
        fn reg_minimized_at_uniform(k in 2usize..6, i in 0usize..6, j in 0usize..6, eps in 1e-3f64..0.1) {
            let (i, j) = (i % k, j % k);
            prop_assume!(i != j);
            let u = vec![1.0 / k as f64; k];
            let mut st = RunningMeanState::new(k, 0.9).unwrap();
            let base = loss_reg(std::slice::from_ref(&u), &mut st, false).unwrap().value;
            let mut p = u;
            let e = eps.min(p[j] * 0.99);
            p[i] += e;
            p[j] -= e;
            let moved = loss_reg(&[p], &mut st, false).unwrap().value;
            prop_assert!(moved > base);
        }

        #[test]
        fn top_k_equal_to_m_matches_all(c in unit_vec(4), ms in prop::collection::vec(unit_vec(4), 1..6)) {
            let m = ms.len();
            let all = loss_align(std::slice::from_ref(&c), std::slice::from_ref(&ms), TopK::All).unwrap();
            let top = loss_align(std::slice::from_ref(&c), std::slice::from_ref(&ms), TopK::Nearest(m)).unwrap();
            prop_assert_eq!(all.value, top.value);
            prop_assert_eq!(all.grad_cls, top.grad_cls);
            let big = loss_align(&[c], &[ms], TopK::Nearest(m + 3)).unwrap();
            prop_assert_eq!(all.value, big.value);
        }

        #[test]
        fn mim_shift_bounded(y in prop::collection::vec(0.0f64..1.0, 6), x in prop::collection::vec(0.0f64..1.0, 6), c in -1.0f64..1.0) {
            let base = loss_mim(std::slice::from_ref(&y), std::slice::from_ref(&x)).unwrap().value;
            let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
            let after = loss_mim(&[shifted], &[x]).unwrap().value;
            prop_assert!((after - base).abs() <= c.abs() + 1e-12);
        }
    }
}
