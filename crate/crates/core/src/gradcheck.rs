//! Central finite-difference checks for every analytic gradient in the crate.
//!
//! Each kernel `K` is checked through the scalar `<r, K(x)>` with a random
//! probe `r`, whose gradient is exactly what `K`'s backward pass returns for
//! upstream `r`. The error measure is normwise:
//! `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)`.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::loss::{axis_loss, msce, mse_sigmoid, sce, LossConfig, LossKind, ScaleTarget};
use crate::net::{self, HeadConfig, HeadOutput, NetConfig, NetParams};
use crate::seeding::derive_seed;
use crate::tensor::{
    pool1d, pool1d_backward, pool2d, pool2d_backward, reduce_axes, reduce_axes_backward, PoolKind,
    ReduceKind, Tensor,
};

pub const KERNEL_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Normwise relative error between an analytic and a numerical gradient.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let amax = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = amax(analytic).max(amax(numeric));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub seed: u64,
    /// Image size of the network check.
    pub size: usize,
    /// Number of random trials per component.
    pub trials: usize,
    pub step: f64,
    /// Added to the first analytic gradient entry; non-zero values exist to
    /// prove the harness can fail.
    pub perturb: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            size: 8,
            trials: 20,
            step: DEFAULT_STEP,
            perturb: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn normal_vec(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Check<'a> {
    opts: &'a CheckOptions,
    worst: f64,
}

impl Check<'_> {
    fn record(&mut self, mut analytic: Vec<f64>, numeric: &[f64]) {
        if let Some(first) = analytic.first_mut() {
            *first += self.opts.perturb;
        }
        self.worst = self.worst.max(relative_error(&analytic, numeric));
    }
}

type Trial = dyn Fn(&mut SplitMix64, &mut Check<'_>) -> Result<()>;

fn kernel_checks() -> Vec<(&'static str, Box<Trial>)> {
    let mut out: Vec<(&'static str, Box<Trial>)> = Vec::new();
    out.push((
        "sce",
        Box::new(|rng, chk| {
            let s = normal_vec(rng, 16, 3.0);
            let t = rng.random_range(0..16);
            let analytic = sce(&Tensor::vector(s.clone()), t)?.grad.into_data();
            let numeric = central_difference(
                |v| sce(&Tensor::vector(v.to_vec()), t).map_or(f64::NAN, |l| l.loss),
                &s,
                chk.opts.step,
            );
            chk.record(analytic, &numeric);
            Ok(())
        }),
    ));
    out.push((
        "msce",
        Box::new(|rng, chk| {
            let (c, m) = (32, 4);
            let target = ScaleTarget::new(rng.random_range(0..c), c, m)?;
            let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..2.0)).collect();
            let sizes: Vec<usize> = (0..m).map(|k| c >> k).collect();
            let flat = normal_vec(rng, sizes.iter().sum(), 3.0);
            let split = |v: &[f64]| {
                let mut at = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        at += n;
                        Tensor::vector(v[at - n..at].to_vec())
                    })
                    .collect::<Vec<_>>()
            };
            let analytic: Vec<f64> = msce(&split(&flat), &target, &weights)?
                .grads
                .into_iter()
                .flat_map(Tensor::into_data)
                .collect();
            let numeric = central_difference(
                |v| msce(&split(v), &target, &weights).map_or(f64::NAN, |l| l.loss),
                &flat,
                chk.opts.step,
            );
            chk.record(analytic, &numeric);
            Ok(())
        }),
    ));
    out.push((
        "mse_sigmoid",
        Box::new(|rng, chk| {
            let s = normal_vec(rng, 16, 2.0);
            let t = rng.random_range(0..16);
            let analytic = mse_sigmoid(&Tensor::vector(s.clone()), t)?.grad.into_data();
            let numeric = central_difference(
                |v| mse_sigmoid(&Tensor::vector(v.to_vec()), t).map_or(f64::NAN, |l| l.loss),
                &s,
                chk.opts.step,
            );
            chk.record(analytic, &numeric);
            Ok(())
        }),
    ));
    for (name, kind) in [
        ("pool1d_max", PoolKind::Max),
        ("pool1d_average", PoolKind::Average),
    ] {
        out.push((
            name,
            Box::new(move |rng, chk| {
                let x = normal_vec(rng, 16, 1.0);
                let r = normal_vec(rng, 8, 1.0);
                let analytic =
                    pool1d_backward(&Tensor::vector(x.clone()), kind, &Tensor::vector(r.clone()))?
                        .into_data();
                let numeric = central_difference(
                    |v| {
                        pool1d(&Tensor::vector(v.to_vec()), kind)
                            .map_or(f64::NAN, |y| dot(y.data(), &r))
                    },
                    &x,
                    chk.opts.step,
                );
                chk.record(analytic, &numeric);
                Ok(())
            }),
        ));
    }
    for (name, kind) in [
        ("pool2d_max", PoolKind::Max),
        ("pool2d_average", PoolKind::Average),
    ] {
        out.push((
            name,
            Box::new(move |rng, chk| {
                let x = normal_vec(rng, 16, 1.0);
                let r = Tensor::new(vec![2, 2], normal_vec(rng, 4, 1.0))?;
                let xt = Tensor::new(vec![4, 4], x.clone())?;
                let analytic = pool2d_backward(&xt, kind, &r)?.into_data();
                let numeric = central_difference(
                    |v| {
                        let t = Tensor::new(vec![4, 4], v.to_vec()).expect("shape");
                        pool2d(&t, kind).map_or(f64::NAN, |y| dot(y.data(), r.data()))
                    },
                    &x,
                    chk.opts.step,
                );
                chk.record(analytic, &numeric);
                Ok(())
            }),
        ));
    }
    for (name, kind) in [
        ("reduce_axes_sum", ReduceKind::Sum),
        ("reduce_axes_mean", ReduceKind::Mean),
    ] {
        out.push((
            name,
            Box::new(move |rng, chk| {
                let (h, w) = (3, 5);
                let x = normal_vec(rng, h * w, 1.0);
                let rx = Tensor::vector(normal_vec(rng, w, 1.0));
                let ry = Tensor::vector(normal_vec(rng, h, 1.0));
                let analytic = reduce_axes_backward(kind, &rx, &ry)?.into_data();
                let numeric = central_difference(
                    |v| {
                        let t = Tensor::new(vec![h, w], v.to_vec()).expect("shape");
                        let (xs, ys) = reduce_axes(&t, kind).expect("rank 2");
                        dot(xs.data(), rx.data()) + dot(ys.data(), ry.data())
                    },
                    &x,
                    chk.opts.step,
                );
                chk.record(analytic, &numeric);
                Ok(())
            }),
        ));
    }
    out
}

/// Loss used by the network check: x-axis plus y-axis loss of the head.
fn network_loss(
    params: &NetParams,
    image: &Tensor,
    loss: &LossConfig,
    tx: usize,
    ty: usize,
) -> Result<(f64, HeadOutput, net::ForwardCache)> {
    let (featmap, cache) = net::forward(params, image)?;
    let h = &params.config.head;
    let out = net::head(&featmap, h.pool, h.reduce, h.scales)?;
    let lx = axis_loss(loss, &out.x, tx)?;
    let ly = axis_loss(loss, &out.y, ty)?;
    let upstream = HeadOutput {
        x: lx.grads,
        y: ly.grads,
    };
    Ok((lx.loss + ly.loss, upstream, cache))
}

fn network_trial(size: usize, trial: u64, rng: &mut SplitMix64, chk: &mut Check<'_>) -> Result<()> {
    let scales = (size.trailing_zeros() as usize + 1).min(3);
    let (head, loss) = match trial % 3 {
        0 => (
            HeadConfig {
                pool: PoolKind::Max,
                reduce: ReduceKind::Sum,
                scales,
            },
            LossConfig::msce(scales)?,
        ),
        1 => (
            HeadConfig {
                pool: PoolKind::Average,
                reduce: ReduceKind::Mean,
                scales,
            },
            LossConfig::msce(scales)?,
        ),
        _ => (
            HeadConfig {
                pool: PoolKind::Max,
                reduce: ReduceKind::Sum,
                scales: 1,
            },
            if trial % 2 == 0 {
                LossConfig::sce()
            } else {
                LossConfig::new(LossKind::MseSigmoid, 1)?
            },
        ),
    };
    let cfg = NetConfig {
        input_size: size,
        in_channels: 1,
        widths: vec![4, 8],
        head,
    };
    let mut params = net::init(&cfg, rng.random())?;
    // Non-zero biases keep pre-activations of dead windows off the ReLU kink.
    for layer in &mut params.layers {
        for b in layer.bias.data_mut() {
            *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let image = Tensor::new(
        vec![1, size, size],
        (0..size * size).map(|_| rng.random::<f64>()).collect(),
    )?;
    let (tx, ty) = (rng.random_range(0..size), rng.random_range(0..size));

    let (_, upstream, cache) = network_loss(&params, &image, &loss, tx, ty)?;
    let grads = net::backward(&params, &cache, &upstream)?;

    // Up to 12 random entries from every weight and bias tensor.
    let mut picks = Vec::new();
    let mut offset = 0;
    for (_, t) in params.named_tensors() {
        for i in rand::seq::index::sample(rng, t.len(), t.len().min(12)) {
            picks.push(offset + i);
        }
        offset += t.len();
    }
    let analytic: Vec<f64> = picks.iter().map(|&i| grads.get_flat(i)).collect();
    let x0: Vec<f64> = picks.iter().map(|&i| params.get_flat(i)).collect();
    let mut probe = params.clone();
    let numeric = central_difference(
        |v| {
            for (&i, &val) in picks.iter().zip(v) {
                probe.set_flat(i, val);
            }
            network_loss(&probe, &image, &loss, tx, ty).map_or(f64::NAN, |(l, _, _)| l)
        },
        &x0,
        chk.opts.step,
    );
    chk.record(analytic, &numeric);
    Ok(())
}

/// Runs every component check for `opts.trials` random trials.
pub fn run_suite(opts: &CheckOptions) -> Result<Vec<ComponentReport>> {
    if !opts.size.is_power_of_two() || opts.size < 4 {
        return Err(Error::InvalidConfig(format!(
            "gradcheck size {} must be a power of two >= 4",
            opts.size
        )));
    }
    if opts.trials == 0 {
        return Err(Error::InvalidConfig(
            "at least one trial is required".into(),
        ));
    }
    let mut reports = Vec::new();
    for (c, (name, trial)) in kernel_checks().into_iter().enumerate() {
        let mut chk = Check { opts, worst: 0.0 };
        for t in 0..opts.trials {
            let mut rng =
                SplitMix64::seed_from_u64(derive_seed(derive_seed(opts.seed, c as u64), t as u64));
            trial(&mut rng, &mut chk)?;
        }
        reports.push(ComponentReport {
            name: name.to_string(),
            max_rel_error: chk.worst,
            tolerance: KERNEL_TOLERANCE,
        });
    }
    let mut chk = Check { opts, worst: 0.0 };
    for t in 0..opts.trials as u64 {
        let mut rng = SplitMix64::seed_from_u64(derive_seed(derive_seed(opts.seed, 1000), t));
        network_trial(opts.size, t, &mut rng, &mut chk)?;
    }
    reports.push(ComponentReport {
        name: format!("network_s{}", opts.size),
        max_rel_error: chk.worst,
        tolerance: NETWORK_TOLERANCE,
    });
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, -1.0], 1e-6);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_is_normwise() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0, 0.0], &[2.0, 0.02]) - 0.01).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn suite_passes() {
        let reports = run_suite(&CheckOptions {
            trials: 4,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(reports.len(), 10);
        for r in &reports {
            assert!(r.passed(), "{} failed with {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn perturbation_is_caught() {
        let opts = CheckOptions {
            trials: 2,
            perturb: 1e-2,
            ..Default::default()
        };
        let reports = run_suite(&opts).unwrap();
        assert!(reports.iter().all(|r| !r.passed()));
    }
}
