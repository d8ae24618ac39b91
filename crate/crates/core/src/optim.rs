//! SGD with momentum, coupled weight decay and a piecewise-constant
//! learning-rate schedule.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    /// Schedule empty, thresholds not strictly increasing, or a rate <= 0.
    InvalidSchedule(String),
    InvalidHyperparameter(String),
    /// Parameter and gradient slices disagree in count or length.
    ShapeMismatch { expected: usize, got: usize },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::InvalidSchedule(msg) => write!(f, "invalid schedule: {msg}"),
            OptimError::InvalidHyperparameter(msg) => write!(f, "invalid hyperparameter: {msg}"),
            OptimError::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
        }
    }
}

impl std::error::Error for OptimError {}

pub type Result<T> = std::result::Result<T, OptimError>;

/// Ordered `(iteration threshold, learning rate)` segments. The active rate
/// is that of the first segment whose threshold exceeds the iteration; past
/// the last threshold the last rate stays in effect.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    segments: Vec<(u64, f64)>,
}

impl LrSchedule {
    pub fn new(segments: Vec<(u64, f64)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(OptimError::InvalidSchedule("no segments".into()));
        }
        for pair in segments.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(OptimError::InvalidSchedule(format!(
                    "thresholds must be strictly increasing, got {} then {}",
                    pair[0].0, pair[1].0
                )));
            }
        }
        if let Some(&(t, rate)) = segments.iter().find(|&&(_, r)| !(r > 0.0) || !r.is_finite()) {
            return Err(OptimError::InvalidSchedule(format!(
                "rate {rate} at threshold {t} must be positive"
            )));
        }
        Ok(Self { segments })
    }

    pub fn constant(rate: f64) -> Result<Self> {
        Self::new(vec![(u64::MAX, rate)])
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        for &(threshold, rate) in &self.segments {
            if threshold > iteration {
                return rate;
            }
        }
        self.segments.last().unwrap().1
    }

    pub fn segments(&self) -> &[(u64, f64)] {
        &self.segments
    }
}

/// SGD state for one parameter group: momentum buffers mirroring the
/// parameter shapes plus the shared hyperparameters.
///
/// Update rule: `v <- mu * v + (grad + wd * param); param <- param - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    schedule: LrSchedule,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, schedule: LrSchedule) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(OptimError::InvalidHyperparameter(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(OptimError::InvalidHyperparameter(format!(
                "weight decay {weight_decay} must be nonnegative"
            )));
        }
        Ok(Self { momentum, weight_decay, schedule, velocity: Vec::new() })
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    /// One SGD step over a parameter group. `params` and `grads` must list
    /// the same buffers in the same order on every call; momentum buffers
    /// are created on first use.
    pub fn step(
        &mut self,
        iteration: u64,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(OptimError::ShapeMismatch { expected: params.len(), got: grads.len() });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(OptimError::ShapeMismatch {
                expected: self.velocity.len(),
                got: params.len(),
            });
        }
        let lr = self.schedule.lr_at(iteration);
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if param.len() != grad.len() || param.len() != vel.len() {
                return Err(OptimError::ShapeMismatch { expected: vel.len(), got: grad.len() });
            }
            for ((p, g), v) in param.iter_mut().zip(*grad).zip(vel.iter_mut()) {
                *v = self.momentum * *v + (*g + self.weight_decay * *p);
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_sgd_moves_against_gradient() {
        let schedule = LrSchedule::constant(0.1).unwrap();
        let mut opt = Sgd::new(0.0, 0.0, schedule).unwrap();
        let mut p = [1.0, -2.0];
        let g = [0.5, -0.5];
        opt.step(0, &mut [&mut p], &[&g]).unwrap();
        assert!((p[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_zero_velocity_keeps_params() {
        let mut opt = Sgd::new(0.9, 0.0, LrSchedule::constant(0.1).unwrap()).unwrap();
        let mut p = [3.0, 4.0];
        let g = [0.0, 0.0];
        opt.step(0, &mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, [3.0, 4.0]);
    }

    #[test]
    fn momentum_matches_hand_recurrence() {
        let (mu, wd, lr) = (0.9, 0.01, 0.05);
        let mut opt = Sgd::new(mu, wd, LrSchedule::constant(lr).unwrap()).unwrap();
        let mut p = [2.0];
        let grads = [[0.3], [-0.7]];

        // hand recurrence
        let mut hp = 2.0;
        let mut hv = 0.0;
        for g in grads {
            hv = mu * hv + (g[0] + wd * hp);
            hp -= lr * hv;
        }

        for g in &grads {
            opt.step(0, &mut [&mut p], &[g]).unwrap();
        }
        assert!((p[0] - hp).abs() < 1e-12, "{} vs {hp}", p[0]);
    }

    #[test]
    fn schedule_lookup_matches_segments() {
        let s = LrSchedule::new(vec![(50_000, 5e-3), (70_000, 5e-4), (80_000, 5e-5)]).unwrap();
        assert_eq!(s.lr_at(10), 5e-3);
        assert_eq!(s.lr_at(49_999), 5e-3);
        assert_eq!(s.lr_at(50_000), 5e-4);
        assert_eq!(s.lr_at(75_000), 5e-5);
        assert_eq!(s.lr_at(200_000), 5e-5);
    }

    #[test]
    fn single_segment_is_constant() {
        let s = LrSchedule::constant(0.25).unwrap();
        for it in [0, 10, 1 << 40] {
            assert_eq!(s.lr_at(it), 0.25);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::new(vec![]).is_err());
        assert!(LrSchedule::new(vec![(10, 0.1), (10, 0.2)]).is_err());
        assert!(LrSchedule::new(vec![(10, 0.1), (5, 0.2)]).is_err());
        assert!(LrSchedule::new(vec![(10, -0.1)]).is_err());
        assert!(LrSchedule::new(vec![(10, 0.0)]).is_err());
    }

    #[test]
    fn hyperparameter_validation() {
        let s = || LrSchedule::constant(0.1).unwrap();
        assert!(Sgd::new(1.0, 0.0, s()).is_err());
        assert!(Sgd::new(-0.1, 0.0, s()).is_err());
        assert!(Sgd::new(0.9, -1.0, s()).is_err());
        assert!(Sgd::new(0.9, 0.0, s()).is_ok());
    }

    #[test]
    fn step_decreases_convex_quadratic() {
        // objective ||p||^2, gradient 2p
        let mut opt = Sgd::new(0.0, 0.0, LrSchedule::constant(1e-3).unwrap()).unwrap();
        let mut p = [0.7, -1.3, 2.1];
        let before: f64 = p.iter().map(|x| x * x).sum();
        let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        opt.step(0, &mut [&mut p], &[&g]).unwrap();
        let after: f64 = p.iter().map(|x| x * x).sum();
        assert!(after < before);
    }

    #[test]
    fn step_is_deterministic() {
        let run = || {
            let mut opt = Sgd::new(0.9, 5e-4, LrSchedule::constant(0.01).unwrap()).unwrap();
            let mut p = [1.0, 2.0, 3.0];
            for i in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| x * 0.1 + i as f64 * 0.01).collect();
                opt.step(i, &mut [&mut p], &[&g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut opt = Sgd::new(0.0, 0.0, LrSchedule::constant(0.1).unwrap()).unwrap();
        let mut p = [1.0, 2.0];
        let g = [1.0];
        assert!(matches!(
            opt.step(0, &mut [&mut p], &[&g]),
            Err(OptimError::ShapeMismatch { .. })
        ));
    }
}
