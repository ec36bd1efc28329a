//! Analytic targets for validating the SGHMC update without a network.
//!
//! For `U(w) = ½ wᵀ A w` the tempered chain has the stationary law
//! `N(0, T A⁻¹)`; moment checks compare against it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, SymMatrix};
use crate::rng::stream;
use crate::sampler::sghmc_step;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTarget {
    /// Row-major symmetric positive-definite `d x d` matrix.
    pub a: Vec<Vec<f64>>,
}

impl QuadraticTarget {
    pub fn new(a: Vec<Vec<f64>>) -> Result<Self> {
        let d = a.len();
        if d == 0 || d > 10 || a.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidConfig(format!("A must be square with 1 <= d <= 10, got {d}")));
        }
        for i in 0..d {
            for j in 0..i {
                if (a[i][j] - a[j][i]).abs() > 1e-12 * (a[i][j].abs() + a[j][i].abs() + 1.0) {
                    return Err(Error::InvalidConfig("A is not symmetric".into()));
                }
            }
        }
        let t = Self { a };
        if t.eigenvalues().last().is_none_or(|&l| l <= 0.0) {
            return Err(Error::InvalidConfig("A is not positive definite".into()));
        }
        Ok(t)
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let d = diag.len();
        Self::new((0..d).map(|i| (0..d).map(|j| if i == j { diag[i] } else { 0.0 }).collect()).collect())
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// Descending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        symmetric_eigen(&SymMatrix::from_fn(self.dim(), |i, j| self.a[i][j])).values
    }

    pub fn gradient(&self, w: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.a) {
            *o = row.iter().zip(w).map(|(x, y)| x * y).sum();
        }
    }

    /// `T A⁻¹`.
    pub fn stationary_covariance(&self, temperature: f64) -> Vec<Vec<f64>> {
        let d = self.dim();
        let e = symmetric_eigen(&SymMatrix::from_fn(d, |i, j| self.a[i][j]));
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        temperature
                            * e.values
                                .iter()
                                .zip(&e.vectors)
                                .map(|(l, v)| v[i] * v[j] / l)
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticChainConfig {
    pub eta: f64,
    pub friction: f64,
    pub temperature: f64,
    pub burn_in: usize,
    pub thin: usize,
    /// Number of thinned samples returned.
    pub samples: usize,
}

impl Default for AnalyticChainConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            friction: 0.1,
            temperature: 1.0,
            burn_in: 10_000,
            thin: 10,
            samples: 100_000,
        }
    }
}

const BLOWUP: f64 = 1e12;

fn check_state(w: &[f64], step: usize) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
        return Err(Error::Divergence {
            epoch: step,
            reason: "analytic chain left every reasonable bound".into(),
        });
    }
    Ok(())
}

/// Runs the chain from `start` with the exact gradient `A w` and returns
/// thinned post-burn-in samples.
pub fn run_analytic_chain(
    target: &QuadraticTarget,
    cfg: &AnalyticChainConfig,
    start: &[f64],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let d = target.dim();
    if start.len() != d || cfg.thin == 0 {
        return Err(Error::InvalidConfig("start dimension or thinning invalid".into()));
    }
    let mut rng = stream(seed, "oracle", 0);
    let mut w = start.to_vec();
    let mut r = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut out = Vec::with_capacity(cfg.samples);
    let total = cfg.burn_in + cfg.samples * cfg.thin;
    for step in 1..=total {
        target.gradient(&w, &mut g);
        sghmc_step(&mut w, &mut r, &g, cfg.eta, cfg.friction, cfg.temperature, &mut rng)?;
        if step % 1024 == 0 {
            check_state(&w, step)?;
        }
        if step > cfg.burn_in && (step - cfg.burn_in) % cfg.thin == 0 {
            out.push(w.clone());
        }
    }
    check_state(&w, total)?;
    Ok(out)
}

/// Mean and covariance over every post-burn-in step, without storing them.
pub fn streaming_moments(
    target: &QuadraticTarget,
    eta: f64,
    friction: f64,
    temperature: f64,
    burn_in: usize,
    steps: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = target.dim();
    let mut rng = stream(seed, "oracle", 0);
    let (mut w, mut r, mut g) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut sum = vec![0.0; d];
    let mut sq = vec![vec![0.0; d]; d];
    for step in 0..burn_in + steps {
        target.gradient(&w, &mut g);
        sghmc_step(&mut w, &mut r, &g, eta, friction, temperature, &mut rng)?;
        if step >= burn_in {
            for i in 0..d {
                sum[i] += w[i];
                for j in 0..d {
                    sq[i][j] += w[i] * w[j];
                }
            }
        }
    }
    check_state(&w, burn_in + steps)?;
    let n = steps as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let cov = (0..d)
        .map(|i| (0..d).map(|j| sq[i][j] / n - mean[i] * mean[j]).collect())
        .collect();
    Ok((mean, cov))
}

/// Effective sample size of a scalar series (Geyer's initial positive
/// sequence). A constant series counts as fully independent.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return n as f64;
    }
    let rho = |k: usize| -> f64 { c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var) };
    let mut tau = -1.0;
    let mut k = 0;
    while k + 1 < n {
        let pair = rho(k) + rho(k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 2;
    }
    (n as f64 / tau.max(1.0)).min(n as f64)
}

pub const MIN_ESS: f64 = 1e4;
pub const COV_TOL: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub mean: Vec<f64>,
    pub mean_norm: f64,
    /// Norm of the per-coordinate standard errors of the mean.
    pub mean_se: f64,
    pub covariance: Vec<Vec<f64>>,
    pub expected_covariance: Vec<Vec<f64>>,
    pub cov_rel_error: f64,
    pub ess: Vec<f64>,
    pub pass: bool,
}

fn frobenius(m: &[Vec<f64>]) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Compares sample moments with `N(0, T A⁻¹)`.
pub fn moment_check(samples: &[Vec<f64>], target: &QuadraticTarget, temperature: f64) -> Result<MomentReport> {
    let d = target.dim();
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig("moment check needs T > 0".into()));
    }
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Shape("sample dimension differs from the target".into()));
    }
    let ess: Vec<f64> = (0..d)
        .map(|i| effective_sample_size(&samples.iter().map(|s| s[i]).collect::<Vec<_>>()))
        .collect();
    let min_ess = ess.iter().copied().fold(f64::INFINITY, f64::min);
    if min_ess < MIN_ESS {
        return Err(Error::TooFewSamples(format!("effective sample size {min_ess:.0} < {MIN_ESS}")));
    }
    let n = samples.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / n).collect();
    let covariance: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).sum::<f64>() / (n - 1.0))
                .collect()
        })
        .collect();
    let expected = target.stationary_covariance(temperature);
    let diff: Vec<Vec<f64>> = covariance
        .iter()
        .zip(&expected)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    let cov_rel_error = frobenius(&diff) / frobenius(&expected);
    let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mean_se = (0..d).map(|i| covariance[i][i] / ess[i]).sum::<f64>().sqrt();
    let pass = cov_rel_error < COV_TOL && mean_norm < 3.0 * mean_se.max(f64::MIN_POSITIVE);
    Ok(MomentReport {
        mean,
        mean_norm,
        mean_se,
        covariance,
        expected_covariance: expected,
        cov_rel_error,
        ess,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub temperatures: Vec<f64>,
    /// Least-squares slope through the origin of each diagonal variance.
    pub slopes: Vec<f64>,
    pub expected: Vec<f64>,
    pub max_rel_error: f64,
}

/// Fits `Var_i(T) = s_i T` across temperatures and compares `s_i` to
/// `(A⁻¹)_ii`.
pub fn temperature_scaling(
    target: &QuadraticTarget,
    temperatures: &[f64],
    base: &AnalyticChainConfig,
    seed: u64,
) -> Result<ScalingReport> {
    let d = target.dim();
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for (k, &t) in temperatures.iter().enumerate() {
        let cfg = AnalyticChainConfig {
            temperature: t,
            ..base.clone()
        };
        let s = run_analytic_chain(target, &cfg, &vec![0.0; d], crate::rng::derive_seed(seed, "temperature", k as u64))?;
        let n = s.len() as f64;
        for i in 0..d {
            let m = s.iter().map(|x| x[i]).sum::<f64>() / n;
            let var = s.iter().map(|x| (x[i] - m) * (x[i] - m)).sum::<f64>() / (n - 1.0);
            num[i] += var * t;
        }
        den += t * t;
    }
    let slopes: Vec<f64> = num.iter().map(|x| x / den).collect();
    let inv = target.stationary_covariance(1.0);
    let expected: Vec<f64> = (0..d).map(|i| inv[i][i]).collect();
    let max_rel_error = slopes
        .iter()
        .zip(&expected)
        .map(|(s, e)| (s - e).abs() / e)
        .fold(0.0, f64::max);
    Ok(ScalingReport {
        temperatures: temperatures.to_vec(),
        slopes,
        expected,
        max_rel_error,
    })
}

/// Equal-weight mixture of two 1-D Gaussians at `±separation/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureTarget {
    pub separation: f64,
    pub std: f64,
}

impl MixtureTarget {
    pub fn gradient(&self, w: f64) -> f64 {
        let m = self.separation / 2.0;
        let s2 = self.std * self.std;
        let (a, b) = (-(w - m).powi(2) / (2.0 * s2), -(w + m).powi(2) / (2.0 * s2));
        // responsibilities, computed stably
        let mx = a.max(b);
        let (pa, pb) = ((a - mx).exp(), (b - mx).exp());
        let (ra, rb) = (pa / (pa + pb), pb / (pa + pb));
        ra * (w - m) / s2 + rb * (w + m) / s2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureChainConfig {
    pub cycles: usize,
    pub steps_per_cycle: usize,
    pub eta0: f64,
    pub eta_restart: f64,
    /// Fraction of each cycle run at the restart rate.
    pub restart_fraction: f64,
    pub friction: f64,
    pub temperature: f64,
}

impl Default for MixtureChainConfig {
    fn default() -> Self {
        Self {
            cycles: 10,
            steps_per_cycle: 20_000,
            eta0: 0.01,
            eta_restart: 0.2,
            restart_fraction: 0.05,
            friction: 0.1,
            temperature: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    /// Post-restart steps spent left / right of zero.
    pub visits: [usize; 2],
    /// Mode (0 left, 1 right) occupied at the end of each cycle.
    pub cycle_modes: Vec<usize>,
}

/// Cyclical chain on the mixture; counts which mode each step occupies.
pub fn run_mixture_chain(target: &MixtureTarget, cfg: &MixtureChainConfig, seed: u64) -> Result<MixtureReport> {
    let mut rng = stream(seed, "mixture", 0);
    let (mut w, mut r) = ([target.separation / 2.0], [0.0]);
    let mut visits = [0usize; 2];
    let mut cycle_modes = Vec::with_capacity(cfg.cycles);
    let restart = (cfg.restart_fraction * cfg.steps_per_cycle as f64) as usize;
    for _ in 0..cfg.cycles {
        for step in 0..cfg.steps_per_cycle {
            let eta = if step < restart { cfg.eta_restart } else { cfg.eta0 };
            let g = [target.gradient(w[0])];
            sghmc_step(&mut w, &mut r, &g, eta, cfg.friction, cfg.temperature, &mut rng)?;
            if step >= restart {
                visits[usize::from(w[0] > 0.0)] += 1;
            }
        }
        check_state(&w, 0)?;
        cycle_modes.push(usize::from(w[0] > 0.0));
    }
    Ok(MixtureReport { visits, cycle_modes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub name: String,
    pub temperature: f64,
    pub report: MomentReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub targets: Vec<TargetResult>,
    pub scaling: ScalingReport,
    pub mixture: MixtureReport,
    pub pass: bool,
}

/// Scaling tolerance on the fitted variance slopes.
pub const SCALING_TOL: f64 = 0.10;

/// Standard suite: `A = 1` and `A = diag(1, 4)` at `T ∈ {0.25, 1}`, the
/// temperature-scaling fit and the two-mode mixture.
pub fn run_oracle_suite(seed: u64) -> Result<OracleReport> {
    let cfg = AnalyticChainConfig::default();
    let mut targets = Vec::new();
    for (name, diag) in [("A=1", vec![1.0]), ("A=diag(1,4)", vec![1.0, 4.0])] {
        let t = QuadraticTarget::diagonal(&diag)?;
        for (k, &temp) in [0.25, 1.0].iter().enumerate() {
            let c = AnalyticChainConfig {
                temperature: temp,
                ..cfg.clone()
            };
            let s = run_analytic_chain(&t, &c, &vec![0.0; t.dim()], crate::rng::derive_seed(seed, name, k as u64))?;
            targets.push(TargetResult {
                name: name.to_owned(),
                temperature: temp,
                report: moment_check(&s, &t, temp)?,
            });
        }
    }
    let scaling = temperature_scaling(&QuadraticTarget::diagonal(&[1.0, 4.0])?, &[0.1, 0.5, 1.0], &cfg, seed)?;
    let mixture = run_mixture_chain(
        &MixtureTarget {
            separation: 4.0,
            std: 0.7,
        },
        &MixtureChainConfig::default(),
        seed,
    )?;
    let pass = targets.iter().all(|t| t.report.pass)
        && scaling.max_rel_error < SCALING_TOL
        && mixture.visits.iter().all(|&v| v > 0);
    Ok(OracleReport {
        targets,
        scaling,
        mixture,
        pass,
    })
}
