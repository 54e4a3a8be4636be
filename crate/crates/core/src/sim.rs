//! Euler–Maruyama rollouts of the closed loop `dx = (f + G u) dt + B dw`
//! with first-exit detection, cost accumulation and Monte Carlo summaries.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlError, Controller};
use crate::hjb::HjbProblem;
use crate::poly::PolyError;

/// Environment variable holding the worker thread count for Monte Carlo runs.
pub const THREADS_ENV: &str = "LSCTL_THREADS";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("initial state {0:?} is outside the domain")]
    StartOutsideDomain(Vec<f64>),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("controller failed at t = {time} (step {step}): {source}")]
    Control {
        step: usize,
        time: f64,
        #[source]
        source: ControlError,
    },
    #[error(transparent)]
    Poly(#[from] PolyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub origin_ball: f64,
    #[serde(default = "default_max_time")]
    pub max_time: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_num_runs")]
    pub num_runs: usize,
    /// Upper bound on the drift displacement `|f + G u| h` of a single step;
    /// steps shrink below `dt` where the feedback is stiff.
    #[serde(default = "default_max_drift_step")]
    pub max_drift_step: f64,
}

fn default_max_time() -> f64 {
    50.0
}

fn default_num_runs() -> usize {
    20
}

fn default_max_drift_step() -> f64 {
    0.05
}

/// Smallest admissible step as a fraction of `dt`.
const MIN_STEP_FRACTION: f64 = 1e-6;

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.005,
            origin_ball: 0.005,
            max_time: default_max_time(),
            rng_seed: 0,
            num_runs: default_num_runs(),
            max_drift_step: default_max_drift_step(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.dt) {
            return Err(SimError::InvalidConfig(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !positive(self.origin_ball) {
            return Err(SimError::InvalidConfig(format!(
                "origin_ball must be positive, got {}",
                self.origin_ball
            )));
        }
        if !positive(self.max_time) {
            return Err(SimError::InvalidConfig(format!(
                "max_time must be positive, got {}",
                self.max_time
            )));
        }
        if !positive(self.max_drift_step) {
            return Err(SimError::InvalidConfig(format!(
                "max_drift_step must be positive, got {}",
                self.max_drift_step
            )));
        }
        if self.num_runs == 0 {
            return Err(SimError::InvalidConfig(
                "num_runs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExitReason {
    OriginReached,
    BoundaryExited,
    TimedOut,
}

/// A single rollout. `controls[k]` is the feedback evaluated at `states[k]`,
/// and `cumulative_cost[k]` is the running cost accrued up to `times[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub cumulative_cost: Vec<f64>,
    pub exit_reason: ExitReason,
    pub running_cost: f64,
    pub terminal_cost: f64,
}

impl Trajectory {
    pub fn total_cost(&self) -> f64 {
        self.running_cost + self.terminal_cost
    }

    pub fn exit_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    /// CSV with header `t,x1..xn,u1..um,running_cost`.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.controls.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("running_cost".into());
        let mut out = header.join(",");
        out.push('\n');
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].iter().map(f64::to_string));
            row.extend(self.controls[k].iter().map(f64::to_string));
            row.push(self.cumulative_cost[k].to_string());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// A factor `L` with `L L^T = sigma_eps`: Cholesky when positive definite,
/// otherwise a clipped eigendecomposition.
pub fn noise_factor(sigma_eps: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = sigma_eps.clone().cholesky() {
        return ch.l();
    }
    let eig = sigma_eps.clone().symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

/// One Euler–Maruyama step `x + (f + G u) dt + B sqrt(dt) z`, with `z ~ N(0, Sigma_eps)` supplied.
pub fn step(
    p: &HjbProblem,
    x: &[f64],
    u: &[f64],
    dt: f64,
    noise: &[f64],
) -> Result<Vec<f64>, SimError> {
    let n = p.nvars();
    if x.len() != n || u.len() != p.num_inputs() || noise.len() != p.b().cols() {
        return Err(SimError::Dimension(format!(
            "state {}, input {}, noise {} for a problem with n={}, m={}, l={}",
            x.len(),
            u.len(),
            noise.len(),
            n,
            p.num_inputs(),
            p.b().cols()
        )));
    }
    let drift = drift(p, x, u)?;
    let b = p.b().evaluate(x)?;
    let diffusion = b * DVector::from_column_slice(noise);
    let sqrt_dt = dt.sqrt();
    Ok((0..n)
        .map(|i| x[i] + drift[i] * dt + diffusion[i] * sqrt_dt)
        .collect())
}

/// Closed-loop drift `f(x) + G(x) u`.
pub fn drift(p: &HjbProblem, x: &[f64], u: &[f64]) -> Result<DVector<f64>, SimError> {
    let f = p.f().evaluate(x)?;
    let g = p.g().evaluate(x)?;
    Ok(f.column(0) + g * DVector::from_column_slice(u))
}

/// Step length used at a state with closed-loop drift `v`: `dt`, shortened so
/// that `|v| h <= max_drift_step`, and never below `MIN_STEP_FRACTION * dt`.
pub fn step_length(v: &DVector<f64>, cfg: &SimConfig) -> f64 {
    let speed = v.norm();
    let h = if speed * cfg.dt > cfg.max_drift_step {
        cfg.max_drift_step / speed
    } else {
        cfg.dt
    };
    h.max(cfg.dt * MIN_STEP_FRACTION)
}

fn inside(p: &HjbProblem, x: &[f64]) -> bool {
    p.domain().generators.iter().all(|g| g.eval(x) >= 0.0)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Fraction `s` in `[0, 1]` at which the segment `a + s (b - a)` first enters
/// the ball of radius `r` about the origin.
pub fn ball_entry(a: &[f64], b: &[f64], r: f64) -> Option<f64> {
    let d: Vec<f64> = a.iter().zip(b).map(|(u, v)| v - u).collect();
    let dd: f64 = d.iter().map(|v| v * v).sum();
    let ad: f64 = a.iter().zip(&d).map(|(u, v)| u * v).sum();
    let c = a.iter().map(|v| v * v).sum::<f64>() - r * r;
    if c <= 0.0 {
        return Some(0.0);
    }
    let disc = ad * ad - dd * c;
    if dd == 0.0 || disc < 0.0 {
        return None;
    }
    let s = (-ad - disc.sqrt()) / dd;
    (0.0..=1.0).contains(&s).then_some(s)
}

/// Roll out the closed loop from `x0` with the seed `cfg.rng_seed`.
///
/// Steps are `dt` long except where the drift would move the state by more
/// than `cfg.max_drift_step`, in which case the step is shortened. The target
/// is reached when a segment enters the origin ball, not only when a grid
/// point lands in it; the final row is the entry point and the last step is
/// charged for the elapsed fraction only.
pub fn simulate(
    p: &HjbProblem,
    c: &Controller,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    if x0.len() != p.nvars() {
        return Err(SimError::Dimension(format!(
            "initial state has {} coordinates, problem has {}",
            x0.len(),
            p.nvars()
        )));
    }
    if !inside(p, x0) {
        return Err(SimError::StartOutsideDomain(x0.to_vec()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let factor = noise_factor(p.sigma_eps());
    let l = factor.nrows();
    let r = p.r();

    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        controls: Vec::new(),
        cumulative_cost: Vec::new(),
        exit_reason: ExitReason::TimedOut,
        running_cost: 0.0,
        terminal_cost: 0.0,
    };
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut cost = 0.0;
    let mut entered = false;
    for k in 0.. {
        let u = c.control_at(&x).map_err(|source| SimError::Control {
            step: k,
            time: t,
            source,
        })?;
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.controls.push(u.iter().copied().collect());
        traj.cumulative_cost.push(cost);
        if entered || norm(&x) <= cfg.origin_ball {
            traj.exit_reason = ExitReason::OriginReached;
            break;
        }
        if t >= cfg.max_time * (1.0 - 1e-12) {
            traj.exit_reason = ExitReason::TimedOut;
            break;
        }
        let h = step_length(&drift(p, &x, u.as_slice())?, cfg).min(cfg.max_time - t);
        let rate = p.q().eval(&x) + 0.5 * u.dot(&(r * &u));
        let z = DVector::from_fn(l, |_, _| StandardNormal.sample(&mut rng));
        let noise = &factor * z;
        let next = step(p, &x, u.as_slice(), h, noise.as_slice())?;
        if let Some(s) = ball_entry(&x, &next, cfg.origin_ball) {
            cost += rate * s * h;
            t += s * h;
            x = x.iter().zip(&next).map(|(a, b)| a + s * (b - a)).collect();
            entered = true;
            continue;
        }
        cost += rate * h;
        if !inside(p, &next) {
            traj.exit_reason = ExitReason::BoundaryExited;
            traj.terminal_cost = p.terminal_cost(&x);
            break;
        }
        x = next;
        t += h;
    }
    traj.running_cost = cost;
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub exit_reason: ExitReason,
    pub exit_time: f64,
    pub running_cost: f64,
    pub terminal_cost: f64,
    pub total_cost: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitCounts {
    pub origin_reached: usize,
    pub boundary_exited: usize,
    pub timed_out: usize,
}

/// Monte Carlo statistics. Timed-out runs are counted but excluded from the mean;
/// boundary exits enter the mean with their terminal cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub runs: Vec<RunSummary>,
    pub counts: ExitCounts,
    pub mean_cost: Option<f64>,
    pub std_err: Option<f64>,
    pub median_exit_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub summary: MonteCarloSummary,
    pub trajectories: Vec<Trajectory>,
}

/// Mean and standard error of the mean; `None` below two samples.
pub fn mean_and_std_err(samples: &[f64]) -> Option<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((mean, (var / n as f64).sqrt()))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    })
}

/// Worker count from [`THREADS_ENV`], else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `cfg.num_runs` independent rollouts, run `i` seeded with `cfg.rng_seed + i`.
/// Results do not depend on the worker count.
pub fn monte_carlo(
    p: &HjbProblem,
    c: &Controller,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<MonteCarloResult, SimError> {
    cfg.validate()?;
    if cfg.num_runs < 2 {
        return Err(SimError::InvalidConfig(
            "Monte Carlo needs at least 2 runs for a standard error".into(),
        ));
    }
    let seeds: Vec<u64> = (0..cfg.num_runs as u64)
        .map(|i| cfg.rng_seed.wrapping_add(i))
        .collect();
    let run = |seed: u64| {
        let cfg = SimConfig {
            rng_seed: seed,
            ..cfg.clone()
        };
        simulate(p, c, x0, &cfg)
    };
    let threads = worker_threads().min(seeds.len());
    let results: Vec<Result<Trajectory, SimError>> = if threads <= 1 {
        seeds.iter().map(|&s| run(s)).collect()
    } else {
        let chunk = seeds.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|&s| run(s)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("simulation worker panicked"))
                .collect()
        })
    };
    let trajectories = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut counts = ExitCounts::default();
    let mut runs = Vec::with_capacity(trajectories.len());
    for (seed, t) in seeds.iter().zip(&trajectories) {
        match t.exit_reason {
            ExitReason::OriginReached => counts.origin_reached += 1,
            ExitReason::BoundaryExited => counts.boundary_exited += 1,
            ExitReason::TimedOut => counts.timed_out += 1,
        }
        runs.push(RunSummary {
            seed: *seed,
            exit_reason: t.exit_reason,
            exit_time: t.exit_time(),
            running_cost: t.running_cost,
            terminal_cost: t.terminal_cost,
            total_cost: t.total_cost(),
        });
    }
    let finished: Vec<&RunSummary> = runs
        .iter()
        .filter(|r| r.exit_reason != ExitReason::TimedOut)
        .collect();
    let costs: Vec<f64> = finished.iter().map(|r| r.total_cost).collect();
    let stats = mean_and_std_err(&costs);
    let median_exit_time = median(finished.iter().map(|r| r.exit_time).collect());
    Ok(MonteCarloResult {
        summary: MonteCarloSummary {
            runs,
            counts,
            mean_cost: stats.map(|s| s.0),
            std_err: stats.map(|s| s.1),
            median_exit_time,
        },
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ValueFunction;
    use crate::hjb::tests::scalar_problem;
    use crate::poly::Polynomial;

    fn zero_controller(p: &HjbProblem) -> Controller {
        let v = ValueFunction::new(Polynomial::constant(1, 1.0), p.lambda()).unwrap();
        Controller::new(p, v).unwrap()
    }

    #[test]
    fn step_examples() {
        let p = scalar_problem("-x", None).unwrap();
        assert_eq!(step(&p, &[1.0], &[0.0], 0.01, &[0.0]).unwrap(), vec![0.99]);
        let x = step(&p, &[0.5], &[2.0], 0.25, &[1.0]).unwrap();
        assert!((x[0] - (0.5 + (-0.5 + 2.0) * 0.25 + 0.5)).abs() < 1e-15);
        assert!(step(&p, &[0.5, 0.1], &[0.0], 0.1, &[0.0]).is_err());
    }

    #[test]
    fn increment_variance_matches_dt() {
        // f = -x is evaluated at x = 0, so the increment is pure noise.
        let p = scalar_problem("-x", None).unwrap();
        let dt = 0.01;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let incs: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                step(&p, &[0.0], &[0.0], dt, &[z]).unwrap()[0]
            })
            .collect();
        let mean = incs.iter().sum::<f64>() / n as f64;
        let var = incs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / dt - 1.0).abs() < 0.05, "variance ratio {}", var / dt);
    }

    #[test]
    fn noise_factor_handles_singular_covariance() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = noise_factor(&s);
        assert!((&l * l.transpose() - &s).abs().max() < 1e-12);
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let l = noise_factor(&s);
        assert!((&l * l.transpose() - &s).abs().max() < 1e-12);
    }

    #[test]
    fn start_at_origin_costs_nothing() {
        let p = scalar_problem("-x^3 + 5*x^2 + 3*x", None).unwrap();
        let t = simulate(&p, &zero_controller(&p), &[0.0], &SimConfig::default()).unwrap();
        assert_eq!(t.exit_reason, ExitReason::OriginReached);
        assert_eq!(t.total_cost(), 0.0);
        assert_eq!(t.times, vec![0.0]);
    }

    #[test]
    fn uncontrolled_unstable_drift_exits_the_boundary() {
        let p = scalar_problem("-x^3 + 5*x^2 + 3*x", None).unwrap();
        let c = zero_controller(&p);
        let cfg = SimConfig {
            num_runs: 50,
            rng_seed: 5,
            ..Default::default()
        };
        let mc = monte_carlo(&p, &c, &[0.5], &cfg).unwrap();
        assert!(
            mc.summary.counts.boundary_exited >= 35,
            "{:?}",
            mc.summary.counts
        );
        for t in mc
            .trajectories
            .iter()
            .filter(|t| t.exit_reason == ExitReason::BoundaryExited)
        {
            let last = t.states.last().unwrap();
            assert!(last[0].abs() <= 1.0);
            assert!((t.terminal_cost - (10.0 - 20f64.ln())).abs() < 1e-9);
            assert!(t.cumulative_cost.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn reproducible_and_order_independent() {
        let p = scalar_problem("-x^3 + 5*x^2 + 3*x", None).unwrap();
        let c = zero_controller(&p);
        let cfg = SimConfig {
            num_runs: 6,
            rng_seed: 42,
            ..Default::default()
        };
        let a = monte_carlo(&p, &c, &[0.2], &cfg).unwrap();
        let b = monte_carlo(&p, &c, &[0.2], &cfg).unwrap();
        assert_eq!(a, b);
        let single = simulate(
            &p,
            &c,
            &[0.2],
            &SimConfig {
                rng_seed: 44,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(single, a.trajectories[2]);
        assert_eq!(single.to_csv(), a.trajectories[2].to_csv());
    }

    #[test]
    fn zero_noise_runs_are_identical() {
        let p = scalar_problem("-x", None)
            .unwrap()
            .with_noise_override(DMatrix::zeros(1, 1))
            .unwrap();
        let c = zero_controller(&p);
        let cfg = SimConfig {
            num_runs: 4,
            ..Default::default()
        };
        let mc = monte_carlo(&p, &c, &[0.5], &cfg).unwrap();
        let first = &mc.trajectories[0];
        assert!(mc.trajectories.iter().all(|t| t.states == first.states));
        assert_eq!(mc.summary.std_err, Some(0.0));
        assert_eq!(first.exit_reason, ExitReason::OriginReached);
    }

    #[test]
    fn config_validation() {
        let p = scalar_problem("-x", None).unwrap();
        let c = zero_controller(&p);
        let bad = SimConfig {
            dt: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            simulate(&p, &c, &[0.1], &bad),
            Err(SimError::InvalidConfig(_))
        ));
        let one = SimConfig {
            num_runs: 1,
            ..Default::default()
        };
        assert!(simulate(&p, &c, &[0.1], &one).is_ok());
        assert!(matches!(
            monte_carlo(&p, &c, &[0.1], &one),
            Err(SimError::InvalidConfig(_))
        ));
        assert!(matches!(
            simulate(&p, &c, &[1.5], &SimConfig::default()),
            Err(SimError::StartOutsideDomain(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let t = Trajectory {
            times: vec![0.0, 0.5],
            states: vec![vec![0.25], vec![0.125]],
            controls: vec![vec![-1.0], vec![-0.5]],
            cumulative_cost: vec![0.0, 0.28125],
            exit_reason: ExitReason::TimedOut,
            running_cost: 0.28125,
            terminal_cost: 0.0,
        };
        assert_eq!(
            t.to_csv(),
            "t,x1,u1,running_cost\n0,0.25,-1,0\n0.5,0.125,-0.5,0.28125\n"
        );
    }

    #[test]
    fn segment_entry_into_the_ball() {
        assert_eq!(ball_entry(&[0.001], &[0.5], 0.005), Some(0.0));
        let s = ball_entry(&[-0.1], &[0.1], 0.005).unwrap();
        assert!((s - 0.475).abs() < 1e-12);
        assert_eq!(ball_entry(&[0.3], &[0.1], 0.005), None);
        assert_eq!(ball_entry(&[1.0, 1.0], &[1.0, -1.0], 0.5), None);
        let s = ball_entry(&[1.0, 0.1], &[-1.0, 0.1], 0.5).unwrap();
        assert!((s - 0.5 * (1.0 - 0.24f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn crossing_the_target_ends_the_run() {
        let p = scalar_problem("-x", None)
            .unwrap()
            .with_noise_override(DMatrix::zeros(1, 1))
            .unwrap();
        let v = ValueFunction::new(Polynomial::parse("1 - x", &["x"]).unwrap(), 1.0).unwrap();
        // u = -1/(1-x): from x = 0.5 a step of dt = 0.5 goes to 0.5 + (-0.5 - 2) 0.5 < 0.
        let c = Controller::new(&p, v).unwrap();
        let cfg = SimConfig {
            dt: 0.5,
            origin_ball: 0.01,
            max_drift_step: 10.0,
            ..Default::default()
        };
        let t = simulate(&p, &c, &[0.5], &cfg).unwrap();
        assert_eq!(t.exit_reason, ExitReason::OriginReached);
        let last = t.states.last().unwrap()[0];
        assert!((last - 0.01).abs() < 1e-12);
        let s = (0.5 - 0.01) / 1.25;
        assert!((t.exit_time() - s * 0.5).abs() < 1e-12);
        let rate = 0.25 + 0.5 * 4.0;
        assert!((t.running_cost - rate * s * 0.5).abs() < 1e-12);
    }

    #[test]
    fn stiff_feedback_shortens_steps() {
        let p = scalar_problem("-x", None)
            .unwrap()
            .with_noise_override(DMatrix::zeros(1, 1))
            .unwrap();
        let v = ValueFunction::new(Polynomial::parse("1 - x", &["x"]).unwrap(), 1.0).unwrap();
        let c = Controller::new(&p, v).unwrap();
        let cfg = SimConfig {
            dt: 0.5,
            origin_ball: 0.01,
            max_drift_step: 0.02,
            ..Default::default()
        };
        let t = simulate(&p, &c, &[0.5], &cfg).unwrap();
        assert_eq!(t.exit_reason, ExitReason::OriginReached);
        for w in t.states.windows(2) {
            assert!((w[1][0] - w[0][0]).abs() <= 0.02 + 1e-12);
        }
        assert!(t.states.len() > 20);
        assert!(t.times.windows(2).all(|w| w[1] > w[0]));

        let v = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(
            step_length(
                &v,
                &SimConfig {
                    dt: 0.1,
                    ..Default::default()
                }
            ),
            0.01
        );
        assert_eq!(
            step_length(
                &v,
                &SimConfig {
                    dt: 0.001,
                    ..Default::default()
                }
            ),
            0.001
        );
        let fast = DVector::from_vec(vec![1e12]);
        assert_eq!(
            step_length(
                &fast,
                &SimConfig {
                    dt: 0.1,
                    ..Default::default()
                }
            ),
            1e-7
        );
    }

    #[test]
    fn std_err_scaling() {
        assert_eq!(mean_and_std_err(&[1.0]), None);
        let (m, s) = mean_and_std_err(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
