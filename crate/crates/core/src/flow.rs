//! Conditional flow matching on straight (optimal-transport) paths, plus the
//! explicit Euler sampler.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::synthdata::FeatureMatrix;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowStepInterval {
    pub lo: f64,
    pub hi: f64,
}

impl FlowStepInterval {
    pub const FULL: FlowStepInterval = FlowStepInterval { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        ensure!(
            0.0 <= lo && lo < hi && hi <= 1.0,
            Config,
            "flow-step interval [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1"
        );
        Ok(Self { lo, hi })
    }

    pub fn up_to(hi: f64) -> Result<Self> {
        Self::new(0.0, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSchedule {
    pub nfe: usize,
    pub lambda: f64,
    /// Control is applied for grid steps `t_i < interval.hi`.
    pub interval: FlowStepInterval,
}

impl SampleSchedule {
    pub const DEFAULT_NFE: usize = 32;

    pub fn new(nfe: usize, lambda: f64, interval: FlowStepInterval) -> Result<Self> {
        ensure!(nfe >= 1, Config, "nfe must be at least 1");
        ensure!(lambda.is_finite(), Config, "lambda must be finite");
        Ok(Self { nfe, lambda, interval })
    }

    pub fn lambda_at(&self, t: f64) -> f64 {
        if t < self.interval.hi {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Per-frame binary mask; `true` marks frames to infill.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalMask {
    pub frames: Vec<bool>,
}

impl TemporalMask {
    pub fn full(t: usize) -> Self {
        Self { frames: vec![true; t] }
    }

    pub fn empty(t: usize) -> Self {
        Self { frames: vec![false; t] }
    }

    /// Masked from `start` to the end.
    pub fn suffix(t: usize, start: usize) -> Self {
        Self {
            frames: (0..t).map(|i| i >= start).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn active(&self) -> usize {
        self.frames.iter().filter(|&&m| m).count()
    }

    #[inline]
    pub fn value(&self, frame: usize) -> f64 {
        if self.frames[frame] {
            1.0
        } else {
            0.0
        }
    }

    /// `(1 - m) ⊙ x`: keeps unmasked frames, zeroes the rest.
    pub fn keep_unmasked(&self, x: &FeatureMatrix) -> FeatureMatrix {
        let mut out = x.clone();
        for r in 0..out.data.rows {
            for (f, v) in out.data.row_mut(r).iter_mut().enumerate() {
                if self.frames[f] {
                    *v = 0.0;
                }
            }
        }
        out
    }
}

fn check_same_shape(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    ensure!(
        a.data.shape() == b.data.shape(),
        Contract,
        "shape mismatch: {:?} vs {:?}",
        a.data.shape(),
        b.data.shape()
    );
    Ok(())
}

/// `(1 - t) x0 + t x1`
pub fn interpolate_flow(x0: &FeatureMatrix, x1: &FeatureMatrix, t: f64) -> Result<FeatureMatrix> {
    check_same_shape(x0, x1)?;
    ensure!((0.0..=1.0).contains(&t), Contract, "flow step {t} outside [0, 1]");
    let data = x0
        .data
        .data
        .iter()
        .zip(&x1.data.data)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Ok(FeatureMatrix {
        data: Mat::from_vec(x0.data.rows, x0.data.cols, data),
    })
}

/// `x1 - x0`
pub fn cfm_target(x0: &FeatureMatrix, x1: &FeatureMatrix) -> Result<FeatureMatrix> {
    check_same_shape(x0, x1)?;
    let data = x1.data.data.iter().zip(&x0.data.data).map(|(b, a)| b - a).collect();
    Ok(FeatureMatrix {
        data: Mat::from_vec(x0.data.rows, x0.data.cols, data),
    })
}

/// Sum of squared errors over masked frames, and the number of entries summed.
pub(crate) fn masked_sse(pred: &FeatureMatrix, target: &FeatureMatrix, mask: &TemporalMask) -> (f64, usize) {
    let mut sse = 0.0;
    for r in 0..pred.data.rows {
        for (f, (p, q)) in pred.data.row(r).iter().zip(target.data.row(r)).enumerate() {
            if mask.frames[f] {
                sse += (p - q) * (p - q);
            }
        }
    }
    (sse, pred.data.rows * mask.active())
}

/// Mean squared error over the entries of masked frames.
pub fn cfm_loss(pred: &FeatureMatrix, target: &FeatureMatrix, mask: &TemporalMask) -> Result<f64> {
    check_same_shape(pred, target)?;
    ensure!(
        mask.len() == pred.frames(),
        Contract,
        "mask covers {} frames, sample has {}",
        mask.len(),
        pred.frames()
    );
    ensure!(mask.active() > 0, Contract, "loss undefined for an empty mask");
    let (sse, n) = masked_sse(pred, target, mask);
    Ok(sse / n as f64)
}

/// Uniform draw in `[lo, hi)`.
pub fn sample_flowstep(interval: &FlowStepInterval, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random();
    let t = interval.lo + (interval.hi - interval.lo) * u;
    // guard against rounding up onto the open end
    if t >= interval.hi {
        interval.lo.max(interval.hi - f64::EPSILON * interval.hi.max(1.0))
    } else {
        t
    }
}

/// Contiguous span of `ceil(r T)` masked frames at a uniform start,
/// `r ~ U[ratio.0, ratio.1]`.
pub fn sample_mask(t: usize, rng: &mut impl Rng, ratio: (f64, f64)) -> Result<TemporalMask> {
    ensure!(t >= 2, Contract, "mask needs at least 2 frames, got {t}");
    ensure!(
        0.0 < ratio.0 && ratio.0 <= ratio.1 && ratio.1 <= 1.0,
        Config,
        "mask ratio range ({}, {}) must satisfy 0 < lo <= hi <= 1",
        ratio.0,
        ratio.1
    );
    let r = if ratio.0 == ratio.1 {
        ratio.0
    } else {
        rng.random_range(ratio.0..=ratio.1)
    };
    let len = ((r * t as f64).ceil() as usize).clamp(1, t);
    let start = rng.random_range(0..=t - len);
    Ok(TemporalMask {
        frames: (0..t).map(|i| i >= start && i < start + len).collect(),
    })
}

pub fn standard_normal(freq_bins: usize, frames: usize, rng: &mut impl Rng) -> FeatureMatrix {
    let data = (0..freq_bins * frames).map(|_| StandardNormal.sample(rng)).collect();
    FeatureMatrix {
        data: Mat::from_vec(freq_bins, frames, data),
    }
}

fn euler_step(x: &mut FeatureMatrix, v: &FeatureMatrix, dt: f64, step: usize) -> Result<()> {
    ensure!(
        v.data.shape() == x.data.shape(),
        Contract,
        "field shape {:?} != state shape {:?}",
        v.data.shape(),
        x.data.shape()
    );
    if !v.data.all_finite() {
        return Err(Error::NonFinite {
            step,
            what: "vector field".into(),
        });
    }
    for (a, b) in x.data.data.iter_mut().zip(&v.data.data) {
        *a += dt * b;
    }
    Ok(())
}

/// Explicit Euler on `t_i = i / nfe`. The field receives `(x, t_i, lambda_i)`
/// where `lambda_i` is the schedule's control scale inside its interval and 0
/// outside.
pub fn integrate_ode<F>(mut field_fn: F, x0: &FeatureMatrix, schedule: &SampleSchedule) -> Result<FeatureMatrix>
where
    F: FnMut(&FeatureMatrix, f64, f64) -> Result<FeatureMatrix>,
{
    ensure!(schedule.nfe >= 1, Config, "nfe must be at least 1");
    let dt = 1.0 / schedule.nfe as f64;
    let mut x = x0.clone();
    for i in 0..schedule.nfe {
        let t = i as f64 / schedule.nfe as f64;
        let v = field_fn(&x, t, schedule.lambda_at(t))?;
        euler_step(&mut x, &v, dt, i)?;
    }
    Ok(x)
}

/// Noises `x1` back to flow step `t_start` with a fresh standard-normal `x0`,
/// then integrates to `t = 1` over the grid points `i / nfe_total` above
/// `t_start` (the first step is shortened to land on the grid).
pub fn partial_resample<F>(
    x1: &FeatureMatrix,
    t_start: f64,
    field_fn: F,
    nfe_total: usize,
    rng: &mut impl Rng,
) -> Result<FeatureMatrix>
where
    F: FnMut(&FeatureMatrix, f64) -> Result<FeatureMatrix>,
{
    let x0 = standard_normal(x1.freq_bins(), x1.frames(), rng);
    resample_from(&x0, x1, t_start, field_fn, nfe_total)
}

/// [`partial_resample`] with an explicit starting noise.
pub fn resample_from<F>(
    x0: &FeatureMatrix,
    x1: &FeatureMatrix,
    t_start: f64,
    mut field_fn: F,
    nfe_total: usize,
) -> Result<FeatureMatrix>
where
    F: FnMut(&FeatureMatrix, f64) -> Result<FeatureMatrix>,
{
    ensure!(
        (0.0..=1.0).contains(&t_start),
        Contract,
        "t_start {t_start} outside [0, 1]"
    );
    ensure!(nfe_total >= 1, Config, "nfe must be at least 1");
    if t_start >= 1.0 {
        return Ok(x1.clone());
    }
    let mut points = vec![t_start];
    points.extend(
        (0..=nfe_total)
            .map(|i| i as f64 / nfe_total as f64)
            .filter(|&t| t > t_start),
    );
    let mut x = interpolate_flow(x0, x1, t_start)?;
    for (step, w) in points.windows(2).enumerate() {
        let v = field_fn(&x, w[0])?;
        euler_step(&mut x, &v, w[1] - w[0], step)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(rows: usize, cols: usize, data: Vec<f64>) -> FeatureMatrix {
        FeatureMatrix {
            data: Mat::from_vec(rows, cols, data),
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let x0 = fm(1, 2, vec![0.0, 2.0]);
        let x1 = fm(1, 2, vec![2.0, 0.0]);
        assert_eq!(interpolate_flow(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate_flow(&x0, &x1, 1.0).unwrap(), x1);
        assert_eq!(interpolate_flow(&x0, &x1, 0.5).unwrap().data.data, vec![1.0, 1.0]);
        assert!(matches!(interpolate_flow(&x0, &x1, 1.5), Err(Error::Contract(_))));
    }

    #[test]
    fn target_examples() {
        let a = fm(1, 3, vec![1.0, -2.0, 0.5]);
        let b = fm(1, 3, vec![0.0, 4.0, 0.25]);
        assert!(cfm_target(&a, &a).unwrap().data.data.iter().all(|&v| v == 0.0));
        let z = fm(1, 3, vec![0.0; 3]);
        assert_eq!(cfm_target(&z, &b).unwrap(), b);
        let ab = cfm_target(&a, &b).unwrap();
        let ba = cfm_target(&b, &a).unwrap();
        for (x, y) in ab.data.data.iter().zip(&ba.data.data) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn loss_examples() {
        let target = fm(2, 3, vec![1.0; 6]);
        let full = TemporalMask::full(3);
        assert_eq!(cfm_loss(&target, &target, &full).unwrap(), 0.0);
        let zero = fm(2, 3, vec![0.0; 6]);
        assert_eq!(cfm_loss(&zero, &target, &full).unwrap(), 1.0);
        let mask = TemporalMask {
            frames: vec![true, false, true],
        };
        let mut pred = target.clone();
        pred.data.set(0, 1, 7.0);
        pred.data.set(1, 1, -3.0);
        assert_eq!(cfm_loss(&pred, &target, &mask).unwrap(), 0.0);
        assert!(matches!(
            cfm_loss(&pred, &target, &TemporalMask::empty(3)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn flowstep_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = FlowStepInterval::FULL;
        let mean = (0..10_000).map(|_| sample_flowstep(&full, &mut rng)).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        let narrow = FlowStepInterval::up_to(0.1).unwrap();
        assert!((0..1000).all(|_| sample_flowstep(&narrow, &mut rng) < 0.1));
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            assert_eq!(sample_flowstep(&full, &mut a), sample_flowstep(&full, &mut b));
        }
        assert!(FlowStepInterval::new(0.5, 0.5).is_err());
        assert!(FlowStepInterval::new(0.0, 1.5).is_err());
    }

    #[test]
    fn masks_are_contiguous_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_mask(10, &mut rng, (1.0, 1.0)).unwrap(), TemporalMask::full(10));
        for _ in 0..200 {
            let m = sample_mask(17, &mut rng, (0.7, 1.0)).unwrap();
            let ups = (0..17).filter(|&i| m.frames[i] && (i == 0 || !m.frames[i - 1])).count();
            let downs = (1..17).filter(|&i| !m.frames[i] && m.frames[i - 1]).count();
            assert_eq!(ups, 1);
            assert!(downs <= 1);
            assert!(m.active() >= 12);
        }
        let a = sample_mask(20, &mut ChaCha8Rng::seed_from_u64(9), (0.7, 1.0)).unwrap();
        let b = sample_mask(20, &mut ChaCha8Rng::seed_from_u64(9), (0.7, 1.0)).unwrap();
        assert_eq!(a, b);
        assert!(sample_mask(1, &mut rng, (0.7, 1.0)).is_err());
    }

    #[test]
    fn euler_on_constant_field() {
        let x0 = fm(2, 2, vec![0.5, -1.0, 2.0, 0.0]);
        let c = fm(2, 2, vec![1.0, 2.0, -0.5, 0.25]);
        for nfe in [1, 7, 32] {
            let sched = SampleSchedule::new(nfe, 0.0, FlowStepInterval::FULL).unwrap();
            let out = integrate_ode(|_, _, _| Ok(c.clone()), &x0, &sched).unwrap();
            for ((o, a), b) in out.data.data.iter().zip(&x0.data.data).zip(&c.data.data) {
                assert!((o - (a + b)).abs() <= 4.0 * f64::EPSILON * (a + b).abs().max(1.0));
            }
        }
    }

    #[test]
    fn euler_recovers_target_with_oracle_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = standard_normal(3, 4, &mut rng);
        let x1 = standard_normal(3, 4, &mut rng);
        let v = cfm_target(&x0, &x1).unwrap();
        let sched = SampleSchedule::new(32, 0.0, FlowStepInterval::FULL).unwrap();
        let out = integrate_ode(|_, _, _| Ok(v.clone()), &x0, &sched).unwrap();
        assert!(out.data.max_abs_diff(&x1.data) < 1e-12);
    }

    #[test]
    fn single_step_is_one_euler_step() {
        let x0 = fm(1, 2, vec![1.0, 2.0]);
        let sched = SampleSchedule::new(1, 0.0, FlowStepInterval::FULL).unwrap();
        let out = integrate_ode(|x, t, _| Ok(fm(1, 2, vec![x.data.data[0] + t, 3.0])), &x0, &sched).unwrap();
        assert_eq!(out.data.data, vec![2.0, 5.0]);
    }

    #[test]
    fn lambda_gating_in_sampler() {
        let x0 = fm(1, 1, vec![0.0]);
        let sched = SampleSchedule::new(10, 0.7, FlowStepInterval::up_to(0.3).unwrap()).unwrap();
        let mut seen = Vec::new();
        integrate_ode(
            |x, t, l| {
                seen.push((t, l));
                Ok(x.clone())
            },
            &x0,
            &sched,
        )
        .unwrap();
        for (t, l) in seen {
            assert_eq!(l, if t < 0.3 { 0.7 } else { 0.0 });
        }
    }

    #[test]
    fn non_finite_field_reports_step() {
        let x0 = fm(1, 1, vec![0.0]);
        let sched = SampleSchedule::new(4, 0.0, FlowStepInterval::FULL).unwrap();
        let err = integrate_ode(
            |_, t, _| Ok(fm(1, 1, vec![if t >= 0.5 { f64::NAN } else { 1.0 }])),
            &x0,
            &sched,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 2, .. }));
    }

    #[test]
    fn resample_identity_and_oracle_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = standard_normal(2, 5, &mut rng);
        let out = partial_resample(&x1, 1.0, |_, _| unreachable!(), 32, &mut rng).unwrap();
        assert!(out.data.bit_eq(&x1.data));

        let x0 = standard_normal(2, 5, &mut rng);
        let v = cfm_target(&x0, &x1).unwrap();
        for t_start in [0.0, 0.05, 0.33, 0.9] {
            let out = resample_from(&x0, &x1, t_start, |_, _| Ok(v.clone()), 32).unwrap();
            assert!(out.data.max_abs_diff(&x1.data) < 1e-12, "t_start {t_start}");
        }
    }

    #[test]
    fn path_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = standard_normal(2, 3, &mut rng);
        let b = standard_normal(2, 3, &mut rng);
        for t in [0.0, 0.25, 0.6, 1.0] {
            let p = interpolate_flow(&a, &b, t).unwrap();
            let q = interpolate_flow(&b, &a, 1.0 - t).unwrap();
            assert!(p.data.max_abs_diff(&q.data) < 1e-15);
        }
    }
}
