//! Coordinate losses: softmax cross entropy, its multiscale variant, and the
//! sigmoid + squared error baseline. Every loss returns its analytic gradient
//! with respect to the logits alongside the value.
//!
//! A target class `t` on a vector of `C` logits induces one class per scale:
//! scale `m` (1-based) has `C / 2^(m-1)` classes and target `t >> (m-1)`,
//! which is where a one-hot target lands after `m-1` rounds of 2-wide max
//! pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pool1d, PoolKind, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    /// Squared error between `sigmoid(logits)` and the one-hot target.
    #[serde(rename = "mse")]
    MseSigmoid,
    #[serde(rename = "sce")]
    Sce,
    #[serde(rename = "msce")]
    Msce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::MseSigmoid => "mse",
            LossKind::Sce => "sce",
            LossKind::Msce => "msce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// One positive weight per scale; the scale count is `weights.len()`.
    pub weights: Vec<f64>,
    /// Pooling used to derive coarse branches in [`landscape`].
    pub pool: PoolKind,
}

impl LossConfig {
    /// Unit weights on `scales` scales, max pooling.
    pub fn new(kind: LossKind, scales: usize) -> Result<Self> {
        let cfg = LossConfig {
            kind,
            weights: vec![1.0; scales],
            pool: PoolKind::Max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sce() -> Self {
        LossConfig::new(LossKind::Sce, 1).expect("valid")
    }

    pub fn mse_sigmoid() -> Self {
        LossConfig::new(LossKind::MseSigmoid, 1).expect("valid")
    }

    pub fn msce(scales: usize) -> Result<Self> {
        LossConfig::new(LossKind::Msce, scales)
    }

    pub fn with_pool(mut self, pool: PoolKind) -> Self {
        self.pool = pool;
        self
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one scale is required".into(),
            ));
        }
        if let Some(w) = self.weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "scale weights must be positive, got {w}"
            )));
        }
        if self.kind != LossKind::Msce && self.scales() != 1 {
            return Err(Error::InvalidConfig(format!(
                "{} uses a single scale, got {}",
                self.kind.name(),
                self.scales()
            )));
        }
        Ok(())
    }
}

/// Ground-truth class at every scale of a multiscale target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleTarget {
    classes: usize,
    per_scale: Vec<usize>,
}

impl ScaleTarget {
    pub fn new(base: usize, classes: usize, scales: usize) -> Result<Self> {
        if scales == 0 {
            return Err(Error::InvalidConfig(
                "at least one scale is required".into(),
            ));
        }
        if base >= classes {
            return Err(Error::ClassOutOfRange {
                index: base,
                classes,
            });
        }
        let factor = 1usize
            .checked_shl(scales as u32 - 1)
            .filter(|f| *f <= classes)
            .ok_or_else(|| {
                Error::InvalidConfig(format!("{scales} scales exceed {classes} classes"))
            })?;
        if classes % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "{classes} classes are not divisible by 2^{}",
                scales - 1
            )));
        }
        let per_scale = (0..scales).map(|m| base >> m).collect();
        Ok(ScaleTarget { classes, per_scale })
    }

    pub fn base(&self) -> usize {
        self.per_scale[0]
    }

    /// Target class for each scale, finest first.
    pub fn classes(&self) -> &[usize] {
        &self.per_scale
    }

    pub fn scales(&self) -> usize {
        self.per_scale.len()
    }

    /// Number of classes at 0-based scale `m`.
    pub fn class_count(&self, m: usize) -> usize {
        self.classes >> m
    }
}

/// Loss value and gradient with respect to one logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor,
}

/// Loss value and one gradient per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLossGrad {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

fn check_vector(s: &Tensor) -> Result<usize> {
    match s.shape() {
        [c] if *c > 0 => Ok(*c),
        _ => Err(Error::Shape(format!(
            "expected a non-empty logit vector, got shape {:?}",
            s.shape()
        ))),
    }
}

fn check_class(t: usize, c: usize) -> Result<()> {
    if t >= c {
        return Err(Error::ClassOutOfRange {
            index: t,
            classes: c,
        });
    }
    Ok(())
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(s: &Tensor) -> Result<Tensor> {
    check_vector(s)?;
    let m = max_of(s.data());
    let mut out: Vec<f64> = s.data().iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(Tensor::vector(out))
}

/// Softmax cross entropy `-log softmax(s)[t]` and its gradient
/// `softmax(s) - one_hot(t)`.
pub fn sce(s: &Tensor, t: usize) -> Result<LossGrad> {
    let c = check_vector(s)?;
    check_class(t, c)?;
    let d = s.data();
    let m = max_of(d);
    let mut p: Vec<f64> = d.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = p.iter().sum();
    let loss = m + z.ln() - d[t];
    p.iter_mut().for_each(|v| *v /= z);
    p[t] -= 1.0;
    Ok(LossGrad {
        loss,
        grad: Tensor::vector(p),
    })
}

/// Weighted sum of per-scale softmax cross entropies. Branch `m` must hold
/// `C / 2^m` logits (0-based `m`) and is scored against `target.classes()[m]`.
pub fn msce(branches: &[Tensor], target: &ScaleTarget, weights: &[f64]) -> Result<MultiLossGrad> {
    if branches.len() != target.scales() || weights.len() != target.scales() {
        return Err(Error::Shape(format!(
            "{} branches, {} weights, {} target scales",
            branches.len(),
            weights.len(),
            target.scales()
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(branches.len());
    for (m, ((s, &t), &w)) in branches
        .iter()
        .zip(target.classes())
        .zip(weights)
        .enumerate()
    {
        if s.shape() != [target.class_count(m)] {
            return Err(Error::Shape(format!(
                "branch {m} has shape {:?}, expected [{}]",
                s.shape(),
                target.class_count(m)
            )));
        }
        let LossGrad { loss: l, mut grad } = sce(s, t)?;
        loss += w * l;
        grad.scale(w);
        grads.push(grad);
    }
    Ok(MultiLossGrad { loss, grads })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean squared error between `sigmoid(s)` and `one_hot(t)`.
pub fn mse_sigmoid(s: &Tensor, t: usize) -> Result<LossGrad> {
    let c = check_vector(s)?;
    check_class(t, c)?;
    let n = c as f64;
    let mut loss = 0.0;
    let grad = s
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = sigmoid(v);
            let e = p - if i == t { 1.0 } else { 0.0 };
            loss += e * e;
            2.0 * e * p * (1.0 - p) / n
        })
        .collect();
    Ok(LossGrad {
        loss: loss / n,
        grad: Tensor::vector(grad),
    })
}

/// Scores one axis of head output against the finest-scale class `t`.
///
/// `branches` are finest first. Single-scale losses only look at the finest
/// branch; any coarser branches receive zero gradient.
pub fn axis_loss(cfg: &LossConfig, branches: &[Tensor], t: usize) -> Result<MultiLossGrad> {
    let first = branches
        .first()
        .ok_or(Error::EmptyInput("no logit branches"))?;
    let single = |lg: LossGrad| {
        let mut grads = vec![lg.grad];
        grads.extend(branches[1..].iter().map(|b| Tensor::zeros(b.shape())));
        MultiLossGrad {
            loss: lg.loss,
            grads,
        }
    };
    match cfg.kind {
        LossKind::MseSigmoid => Ok(single(mse_sigmoid(first, t)?)),
        LossKind::Sce => Ok(single(sce(first, t)?)),
        LossKind::Msce => {
            let m = cfg.scales();
            if branches.len() < m {
                return Err(Error::Shape(format!(
                    "loss needs {m} branches, head produced {}",
                    branches.len()
                )));
            }
            let target = ScaleTarget::new(t, first.len(), m)?;
            let mut out = msce(&branches[..m], &target, &cfg.weights)?;
            out.grads
                .extend(branches[m..].iter().map(|b| Tensor::zeros(b.shape())));
            Ok(out)
        }
    }
}

/// Default one-hot amplitude for [`landscape`].
pub const DEFAULT_AMPLITUDE: f64 = 10.0;

/// Loss of every candidate prediction `k ∈ [0, classes)` against the ground
/// truth `gt`, divided by the largest value so the curve lies in `[0, 1]`.
///
/// The squared-error curve is measured in coordinate space, `(k - gt)^2`.
/// The cross-entropy curves score the logit vector `amplitude * one_hot(k)`;
/// multiscale branches come from repeated [`pool1d`] with `cfg.pool`.
pub fn landscape(cfg: &LossConfig, classes: usize, gt: usize, amplitude: f64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if classes == 0 {
        return Err(Error::EmptyInput("no classes"));
    }
    check_class(gt, classes)?;
    if !(amplitude.is_finite() && amplitude > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "amplitude must be positive, got {amplitude}"
        )));
    }
    let target = match cfg.kind {
        LossKind::Msce => {
            if !classes.is_power_of_two() {
                return Err(Error::NotPowerOfTwo(classes));
            }
            Some(ScaleTarget::new(gt, classes, cfg.scales())?)
        }
        _ => None,
    };

    let mut curve = Vec::with_capacity(classes);
    for k in 0..classes {
        let v = match cfg.kind {
            LossKind::MseSigmoid => {
                let d = k as f64 - gt as f64;
                d * d
            }
            LossKind::Sce => sce(&Tensor::one_hot(classes, k, amplitude), gt)?.loss,
            LossKind::Msce => {
                let target = target.as_ref().expect("msce target");
                let mut branches = vec![Tensor::one_hot(classes, k, amplitude)];
                for _ in 1..cfg.scales() {
                    let next = pool1d(branches.last().expect("non-empty"), cfg.pool)?;
                    branches.push(next);
                }
                msce(&branches, target, &cfg.weights)?.loss
            }
        };
        curve.push(v);
    }
    let peak = max_of(&curve);
    if peak > 0.0 {
        curve.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&Tensor::vector(vec![1000.0, 1000.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!((p.data()[0] - E / (E + 1.0)).abs() < 1e-15);
        assert!((p.data()[0] - 0.731059).abs() < 1e-6);
        assert!((p.data()[1] - 0.268941).abs() < 1e-6);
        assert!(softmax(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn sce_examples() {
        let lg = sce(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert!((lg.loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(lg.grad.data(), &[-0.5, 0.5]);

        let lg = sce(&Tensor::vector(vec![1.0, 0.0]), 0).unwrap();
        assert!((lg.loss - -(E / (E + 1.0)).ln()).abs() < 1e-15);
        assert!((lg.loss - 0.313262).abs() < 1e-6);

        assert!(matches!(
            sce(&Tensor::vector(vec![0.0; 3]), 3),
            Err(Error::ClassOutOfRange {
                index: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn msce_two_scale_example() {
        let fine = Tensor::vector(vec![2.0, 0.0, 0.0, 0.0]);
        let coarse = pool1d(&fine, PoolKind::Max).unwrap();
        assert_eq!(coarse.data(), &[2.0, 0.0]);
        let target = ScaleTarget::new(0, 4, 2).unwrap();
        let out = msce(&[fine, coarse], &target, &[1.0, 1.0]).unwrap();
        let e2 = E * E;
        let expected = -(e2 / (e2 + 3.0)).ln() - (e2 / (e2 + 1.0)).ln();
        assert!((out.loss - expected).abs() < 1e-14);
        // 0.340753 + 0.126928
        assert!((out.loss - 0.467681).abs() < 1e-6);
    }

    #[test]
    fn msce_zero_branches_sum_log_classes() {
        for t in [0, 5, 31] {
            let target = ScaleTarget::new(t, 32, 4).unwrap();
            let branches: Vec<_> = (0..4).map(|m| Tensor::zeros(&[32 >> m])).collect();
            let out = msce(&branches, &target, &[1.0; 4]).unwrap();
            let expected: f64 = (0..4).map(|m| ((32 >> m) as f64).ln()).sum();
            assert!((out.loss - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn msce_weights_scale_terms() {
        let target = ScaleTarget::new(3, 8, 2).unwrap();
        let b = [
            Tensor::vector(vec![0.3; 8]),
            Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]),
        ];
        let unit = msce(&b, &target, &[1.0, 1.0]).unwrap();
        let heavy = msce(&b, &target, &[1.0, 3.0]).unwrap();
        let coarse = sce(&b[1], 1).unwrap();
        assert!((heavy.loss - unit.loss - 2.0 * coarse.loss).abs() < 1e-12);
        for (g, r) in heavy.grads[1].data().iter().zip(coarse.grad.data()) {
            assert!((g - 3.0 * r).abs() < 1e-15);
        }
    }

    #[test]
    fn msce_rejects_bad_shapes() {
        let target = ScaleTarget::new(0, 4, 2).unwrap();
        let b = [Tensor::zeros(&[4]), Tensor::zeros(&[3])];
        assert!(matches!(
            msce(&b, &target, &[1.0, 1.0]),
            Err(Error::Shape(_))
        ));
        assert!(msce(&b[..1], &target, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn scale_target_floor_chain() {
        let t = ScaleTarget::new(70, 256, 8).unwrap();
        assert_eq!(t.classes(), &[70, 35, 17, 8, 4, 2, 1, 0]);
        assert_eq!(t.class_count(7), 2);
        assert!(ScaleTarget::new(0, 12, 4).is_err());
        assert!(ScaleTarget::new(0, 4, 4).is_err());
        assert!(ScaleTarget::new(4, 4, 1).is_err());
    }

    #[test]
    fn mse_sigmoid_examples() {
        let lg = mse_sigmoid(&Tensor::zeros(&[2]), 0).unwrap();
        assert_eq!(lg.loss, 0.25);
        let lg = mse_sigmoid(&Tensor::vector(vec![60.0, -60.0, -60.0]), 0).unwrap();
        assert!(lg.loss < 1e-40);
        assert!(mse_sigmoid(&Tensor::zeros(&[2]), 2).is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(LossConfig::new(LossKind::Sce, 2).is_err());
        assert!(LossConfig::new(LossKind::Msce, 0).is_err());
        let mut cfg = LossConfig::msce(3).unwrap();
        cfg.weights[1] = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn axis_loss_pads_coarse_grads() {
        let branches = [
            Tensor::vector(vec![0.5, 0.1, 0.0, 0.2]),
            Tensor::vector(vec![1.0, 0.0]),
        ];
        let out = axis_loss(&LossConfig::sce(), &branches, 2).unwrap();
        assert_eq!(out.loss, sce(&branches[0], 2).unwrap().loss);
        assert_eq!(out.grads[1], Tensor::zeros(&[2]));
        let out = axis_loss(&LossConfig::msce(2).unwrap(), &branches, 2).unwrap();
        let target = ScaleTarget::new(2, 4, 2).unwrap();
        assert_eq!(out, msce(&branches, &target, &[1.0, 1.0]).unwrap());
    }

    #[test]
    fn landscape_errors() {
        let cfg = LossConfig::msce(4).unwrap();
        assert!(matches!(
            landscape(&cfg, 100, 70, 10.0),
            Err(Error::NotPowerOfTwo(100))
        ));
        assert!(landscape(&cfg, 256, 256, 10.0).is_err());
        assert!(landscape(&cfg, 256, 70, 0.0).is_err());
        // squared error does not need a power of two
        assert_eq!(
            landscape(&LossConfig::mse_sigmoid(), 100, 70, 10.0)
                .unwrap()
                .len(),
            100
        );
    }

    #[test]
    fn landscape_mse_bowl() {
        let c = landscape(&LossConfig::mse_sigmoid(), 256, 70, 10.0).unwrap();
        assert_eq!(c[70], 0.0);
        assert_eq!(c[255], 1.0);
        assert!((c[0] - 4900.0 / 34225.0).abs() < 1e-15);
    }

    fn logits(c: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-20.0f64..20.0, c)
    }

    proptest! {
        #[test]
        fn sce_grad_sums_to_zero(s in logits(16), t in 0usize..16) {
            let lg = sce(&Tensor::vector(s), t).unwrap();
            prop_assert!(lg.loss >= 0.0);
            prop_assert!(lg.grad.sum().abs() < 1e-12);
        }

        #[test]
        fn softmax_normalized(s in logits(9)) {
            let p = softmax(&Tensor::vector(s)).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
            prop_assert!(p.data().iter().all(|&v| v > 0.0));
        }

        #[test]
        fn msce_single_scale_is_sce(s in logits(16), t in 0usize..16) {
            let s = Tensor::vector(s);
            let a = sce(&s, t).unwrap();
            let b = msce(&[s], &ScaleTarget::new(t, 16, 1).unwrap(), &[1.0]).unwrap();
            prop_assert_eq!(a.loss, b.loss);
            prop_assert_eq!(&a.grad, &b.grads[0]);
        }

        #[test]
        fn msce_shift_invariant(
            s in logits(16), t in 0usize..16, shift in -50.0f64..50.0, which in 0usize..3
        ) {
            let fine = Tensor::vector(s);
            let mut branches = vec![fine];
            for _ in 1..3 {
                let next = pool1d(branches.last().unwrap(), PoolKind::Max).unwrap();
                branches.push(next);
            }
            let target = ScaleTarget::new(t, 16, 3).unwrap();
            let base = msce(&branches, &target, &[1.0; 3]).unwrap().loss;
            let mut shifted = branches.clone();
            shifted[which] = shifted[which].map(|v| v + shift);
            let moved = msce(&shifted, &target, &[1.0; 3]).unwrap().loss;
            prop_assert!((base - moved).abs() < 1e-9);
        }
    }
}
