//! Time profiles: the gluing cutoff family, the projection wavenumber
//! schedule, and 1-d adaptive quadrature.
//!
//! The gluing family lives on a window ending at time T. With
//! tau_n = lambda_n^{-1 - beta/2} / 4 and T = tau_N / 2, shell n is active
//! while t is within [T - tau_n - w_n, T - tau_{n+1}], where
//! w_n = c0 tau_n^{1 + eps/4} is the (short) transition width. The square
//! cutoffs chi_n^2 telescope between consecutive rising steps, so
//! sum_n chi_n^2 = 1 from the first plateau until the partition end
//! T_cut = T - tau_{nmax+1} - w_{nmax+1}.

use crate::error::{FluxError, Result};
use crate::profile::{
    smooth_step, smooth_step_deriv, smooth_step_sqrt, smooth_step_sqrt_deriv,
};

/// The smooth time step h: h(t) = 0 for t <= -1, h(t) = 1 for t >= 0, with
/// sqrt(h) and sqrt(1-h) smooth.
#[inline]
pub fn time_step(t: f64) -> f64 {
    smooth_step(t + 1.0)
}

#[inline]
pub fn time_step_deriv(t: f64) -> f64 {
    smooth_step_deriv(t + 1.0)
}

/// Square-root gluing cutoffs chi_n for shells n in [n_start, n_max].
#[derive(Debug, Clone)]
pub struct CutoffFamily {
    pub beta: f64,
    pub eps: f64,
    pub c0: f64,
    pub n_start: i32,
    pub n_max: i32,
    /// End of the gluing window.
    pub t_end: f64,
    /// Optional measured switch times for n_start..=n_max+1, overriding the
    /// analytic power law (used when tau_n is calibrated from the measured
    /// single-shell flux).
    taus: Option<Vec<f64>>,
}

impl CutoffFamily {
    pub fn new(beta: f64, eps: f64, c0: f64, n_start: i32, n_max: i32) -> Result<Self> {
        if !(beta > 0.0) || !(eps > 0.0) || !(c0 > 0.0) {
            return Err(FluxError::InvalidParameter {
                name: "beta/eps/c0".into(),
                detail: "must be positive".into(),
            });
        }
        if n_max < n_start {
            return Err(FluxError::InvalidParameter {
                name: "n_max".into(),
                detail: format!("n_max = {n_max} below n_start = {n_start}"),
            });
        }
        let fam = Self {
            beta,
            eps,
            c0,
            n_start,
            n_max,
            t_end: 0.0,
            taus: None,
        };
        let t_end = fam.tau(n_start) / 2.0;
        let fam = Self { t_end, ..fam };
        fam.validate()?;
        Ok(fam)
    }

    /// Family with explicitly measured switch times `taus[i] = tau_{n_start+i}`
    /// for `n_start..=n_max+1` (so `taus.len() = n_max - n_start + 2`).
    /// The window end is `t_end = tau_{n_start} / 2`.
    pub fn with_taus(beta: f64, eps: f64, c0: f64, n_start: i32, taus: Vec<f64>) -> Result<Self> {
        if taus.len() < 2 {
            return Err(FluxError::InvalidParameter {
                name: "taus".into(),
                detail: "need switch times for at least two shells".into(),
            });
        }
        if !taus.iter().all(|t| t.is_finite() && *t > 0.0) {
            return Err(FluxError::InvalidParameter {
                name: "taus".into(),
                detail: "switch times must be positive and finite".into(),
            });
        }
        let n_max = n_start + taus.len() as i32 - 2;
        let t_end = taus[0] / 2.0;
        let fam = Self {
            beta,
            eps,
            c0,
            n_start,
            n_max,
            t_end,
            taus: Some(taus),
        };
        fam.validate()?;
        Ok(fam)
    }

    fn validate(&self) -> Result<()> {
        // The construction needs the transition of step n+1 to finish before
        // the plateau of step n ends, i.e. tau_{n+1} + w_{n+1} < tau_n.
        for n in self.n_start..=self.n_max {
            if self.tau(n + 1) + self.width(n + 1) >= self.tau(n) {
                return Err(FluxError::InvalidParameter {
                    name: "c0".into(),
                    detail: format!("transition width at shell {} overlaps the next plateau", n),
                });
            }
        }
        Ok(())
    }

    /// Shell switch time scale: tau_n = lambda_n^{-1-beta/2} / 4 analytically,
    /// or the measured table when calibrated.
    pub fn tau(&self, n: i32) -> f64 {
        if let Some(taus) = &self.taus {
            let i = (n - self.n_start).clamp(0, taus.len() as i32 - 1) as usize;
            return taus[i];
        }
        0.25 * crate::lambda(n).powf(-1.0 - self.beta / 2.0)
    }

    /// Transition width w_n = c0 tau_n^{1 + eps/4}.
    pub fn width(&self, n: i32) -> f64 {
        self.c0 * self.tau(n).powf(1.0 + self.eps / 4.0)
    }

    /// Last time at which the chi_n^2 still sum to one.
    pub fn partition_end(&self) -> f64 {
        self.t_end - self.tau(self.n_max + 1) - self.width(self.n_max + 1)
    }

    /// Rising step H_n: 0 before T - tau_n - w_n, 1 after T - tau_n.
    fn step_arg(&self, n: i32, t: f64) -> f64 {
        (t - (self.t_end - self.tau(n))) / self.width(n) + 1.0
    }

    pub fn step(&self, n: i32, t: f64) -> f64 {
        smooth_step(self.step_arg(n, t))
    }

    /// chi_n(t) = sqrt(H_n(t) - H_{n+1}(t)).
    ///
    /// The two transitions never overlap, so on any t exactly one of the
    /// smooth closed forms applies; no finite differences, no 0/0.
    pub fn chi(&self, n: i32, t: f64) -> f64 {
        debug_assert!((self.n_start..=self.n_max).contains(&n));
        let a = self.step_arg(n, t);
        if a <= 0.0 {
            return 0.0;
        }
        if a < 1.0 {
            return smooth_step_sqrt(a);
        }
        let b = self.step_arg(n + 1, t);
        if b <= 0.0 {
            1.0
        } else if b < 1.0 {
            // sqrt(1 - sigma(b)) = sqrt(sigma(1 - b)).
            smooth_step_sqrt(1.0 - b)
        } else {
            0.0
        }
    }

    /// Closed-form derivative of chi_n.
    pub fn chi_deriv(&self, n: i32, t: f64) -> f64 {
        let a = self.step_arg(n, t);
        if a <= 0.0 {
            return 0.0;
        }
        if a < 1.0 {
            return smooth_step_sqrt_deriv(a) / self.width(n);
        }
        let b = self.step_arg(n + 1, t);
        if b > 0.0 && b < 1.0 {
            -smooth_step_sqrt_deriv(1.0 - b) / self.width(n + 1)
        } else {
            0.0
        }
    }

    /// chi_n^2 and its derivative (used by ledger integrands).
    pub fn chi_sq(&self, n: i32, t: f64) -> f64 {
        let c = self.chi(n, t);
        c * c
    }

    pub fn chi_sq_deriv(&self, n: i32, t: f64) -> f64 {
        2.0 * self.chi(n, t) * self.chi_deriv(n, t)
    }

    /// All transition boundary times inside [a, b]; quadrature knots.
    pub fn knots(&self, a: f64, b: f64) -> Vec<f64> {
        let mut ks = Vec::new();
        for n in self.n_start..=self.n_max + 1 {
            for t in [
                self.t_end - self.tau(n) - self.width(n),
                self.t_end - self.tau(n),
            ] {
                if t > a && t < b {
                    ks.push(t);
                }
            }
        }
        ks.sort_by(f64::total_cmp);
        ks.dedup();
        ks
    }

    /// Shells whose cutoff is not identically zero on [a, b].
    pub fn active_shells(&self, a: f64, b: f64) -> Vec<i32> {
        (self.n_start..=self.n_max)
            .filter(|&n| {
                let lo = self.t_end - self.tau(n) - self.width(n);
                let hi = self.t_end - self.tau(n + 1);
                lo < b && hi > a
            })
            .collect()
    }
}

/// Wavenumber schedule for the projected solution:
/// Lambda(t) = (T - t)^{-(1-eps)/2} on t < T.
#[derive(Debug, Clone, Copy)]
pub struct WavenumberSchedule {
    pub eps: f64,
    pub t_end: f64,
}

impl WavenumberSchedule {
    pub fn new(eps: f64, t_end: f64) -> Result<Self> {
        if !(0.0 < eps && eps < 1.0) {
            return Err(FluxError::InvalidParameter {
                name: "eps".into(),
                detail: "need 0 < eps < 1".into(),
            });
        }
        Ok(Self { eps, t_end })
    }

    #[inline]
    pub fn lambda_of(&self, t: f64) -> f64 {
        (self.t_end - t).powf(-(1.0 - self.eps) / 2.0)
    }

    #[inline]
    pub fn lambda_deriv(&self, t: f64) -> f64 {
        let a = (1.0 - self.eps) / 2.0;
        a * (self.t_end - t).powf(-a - 1.0)
    }

    /// Time at which Lambda(t) = g (inverse of the schedule).
    pub fn time_at_lambda(&self, g: f64) -> f64 {
        self.t_end - g.powf(-2.0 / (1.0 - self.eps))
    }
}

/// Symbol of d/dt P_{g(t)} at radius r for a cutoff dilation g:
/// -chi'(r/g) * (r/g) * (g'/g). Supported on g/2 <= r <= g.
pub fn dt_projection_symbol(chi: &crate::profile::LpProfile, r: f64, g: f64, gprime: f64) -> f64 {
    -chi.eval_deriv(r / g) * (r / g) * (gprime / g)
}

/// Adaptive Simpson quadrature with interior knots.
///
/// The interval is split at the knots (where integrands may switch between
/// smooth branches) and each piece gets a tolerance share proportional to
/// its length. Deterministic: the refinement pattern depends only on the
/// integrand values, never on threads or timing.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, knots: &[f64]) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    let mut pts = vec![a];
    pts.extend(knots.iter().copied().filter(|&t| t > a && t < b));
    pts.push(b);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let total = b - a;
    let mut acc = crate::util::CompensatedSum::new();
    for w in pts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let t = tol * ((hi - lo) / total).max(1e-3);
        acc.add(adaptive_simpson(f, lo, hi, t)?);
    }
    Ok(acc.value())
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let err = (left + right - whole) / 15.0;
    if err.abs() <= tol || b - a < 1e-300 {
        return Ok(left + right + err);
    }
    if depth == 0 {
        return Err(FluxError::QuadratureFailure {
            tol,
            best: err.abs(),
        });
    }
    Ok(simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn family() -> CutoffFamily {
        CutoffFamily::new(2.0, 0.1, 1.0, 4, 7).unwrap()
    }

    #[test]
    fn tau_arithmetic() {
        let f = family();
        // tau_4 = 16^{-2} / 4 = 1/1024 at beta = 2; T = tau_4 / 2.
        assert_abs_diff_eq!(f.tau(4), 1.0 / 1024.0, epsilon = 1e-18);
        assert_abs_diff_eq!(f.t_end, 1.0 / 2048.0, epsilon = 1e-19);
        // Ratio tau_n / tau_{n+1} = 2^{1 + beta/2} for every n.
        for n in 4..8 {
            assert_abs_diff_eq!(f.tau(n) / f.tau(n + 1), 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn partition_of_unity_on_window() {
        let f = family();
        let t_cut = f.partition_end();
        assert!(t_cut > 0.0 && t_cut < f.t_end);
        // From the first plateau (t >= T - tau_N = -T) through t_cut the
        // squares telescope to exactly one.
        for i in 0..=2000 {
            let t = -f.t_end + (t_cut + f.t_end) * (i as f64) / 2000.0;
            let total: f64 = (4..=7).map(|n| f.chi_sq(n, t)).sum();
            assert!(
                (total - 1.0).abs() < 1e-12,
                "partition fails at t = {t}: {total}"
            );
        }
        // Beyond t_cut the sum decays to zero.
        let total_end: f64 = (4..=7).map(|n| f.chi_sq(n, f.t_end)).sum();
        assert_abs_diff_eq!(total_end, 0.0, epsilon = 1e-30);
    }

    #[test]
    fn plateau_matches_closed_form() {
        let f = family();
        for n in 4..=7 {
            let lo = f.t_end - f.tau(n);
            let hi = f.t_end - f.tau(n + 1) - f.width(n + 1);
            assert!(lo < hi, "plateau empty at n = {n}");
            assert_abs_diff_eq!(f.chi(n, lo), 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(f.chi(n, hi), 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(f.chi(n, 0.5 * (lo + hi)), 1.0, epsilon = 1e-15);
            // Support: zero before the ramp and after the handoff.
            assert_eq!(f.chi(n, lo - f.width(n) * 1.0001), 0.0);
            assert_eq!(f.chi(n, f.t_end - f.tau(n + 1) + 1e-12 * f.t_end), 0.0);
        }
    }

    #[test]
    fn chi_derivative_closed_form_vs_finite_differences() {
        let f = family();
        for n in 4..=6 {
            // Probe inside both transition regions.
            let probes = [
                f.t_end - f.tau(n) - 0.5 * f.width(n),
                f.t_end - f.tau(n) - 0.1 * f.width(n),
                f.t_end - f.tau(n + 1) - 0.5 * f.width(n + 1),
            ];
            for &t in &probes {
                let h = f.width(n + 1) * 1e-6;
                let fd = (f.chi(n, t + h) - f.chi(n, t - h)) / (2.0 * h);
                let an = f.chi_deriv(n, t);
                assert!(
                    (fd - an).abs() <= 1e-5 * an.abs().max(1.0 / f.tau(n)),
                    "n={n} t={t}: fd={fd:.6e} an={an:.6e}"
                );
            }
        }
    }

    #[test]
    fn chi_derivative_scale_is_uniform_across_shells() {
        // |chi_n'| <= C tau_{n+1}^{-1-eps/4} with one C for every shell.
        let f = family();
        let mut consts = Vec::new();
        for n in 4..=7 {
            let mut max = 0.0f64;
            for i in 0..20_000 {
                let t = -f.t_end
                    + (f.t_end + f.t_end) * (i as f64) / 20_000.0;
                max = max.max(f.chi_deriv(n, t).abs());
            }
            let bound_scale = f.tau(n + 1).powf(-1.0 - f.eps / 4.0);
            consts.push(max / bound_scale);
        }
        let cmax = consts.iter().cloned().fold(0.0, f64::max);
        let cmin = consts.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(cmax.is_finite() && cmax > 0.0);
        // The per-shell constants agree to within a modest factor; the
        // c0 normalization makes the widths scale exactly.
        assert!(
            cmax / cmin < 4.0,
            "per-shell derivative constants spread too far: {consts:?}"
        );
    }

    #[test]
    fn calibrated_taus_override_power_law_and_keep_partition() {
        let a = family();
        let taus: Vec<f64> = (4..=8).map(|n| a.tau(n) * 1.3).collect();
        let f = CutoffFamily::with_taus(2.0, 0.1, 1.0, 4, taus.clone()).unwrap();
        assert_eq!(f.n_max, 7);
        assert_abs_diff_eq!(f.t_end, taus[0] / 2.0, epsilon = 1e-19);
        for n in 4..=8 {
            assert_abs_diff_eq!(f.tau(n), taus[(n - 4) as usize], epsilon = 1e-19);
        }
        let t_cut = f.partition_end();
        for i in 0..=500 {
            let t = -f.t_end + (t_cut + f.t_end) * (i as f64) / 500.0;
            let total: f64 = (4..=7).map(|n| f.chi_sq(n, t)).sum();
            assert!((total - 1.0).abs() < 1e-12, "partition fails at t = {t}");
        }
        // Non-monotone switch times are rejected.
        assert!(CutoffFamily::with_taus(2.0, 0.1, 1.0, 4, vec![1e-3, 2e-3]).is_err());
    }

    #[test]
    fn schedule_basics_and_inverse() {
        let s = WavenumberSchedule::new(0.1, 1.0).unwrap();
        assert_abs_diff_eq!(s.lambda_of(0.0), 1.0, epsilon = 1e-15);
        // Monotone increase toward the end time.
        let mut prev = 0.0;
        for i in 0..100 {
            let t = 0.99 * (i as f64) / 100.0;
            let l = s.lambda_of(t);
            assert!(l > prev);
            prev = l;
        }
        for &g in &[2.0, 32.0, 512.0] {
            let t = s.time_at_lambda(g);
            assert_abs_diff_eq!(s.lambda_of(t) / g, 1.0, epsilon = 1e-12);
        }
        // d Lambda/dt matches finite differences.
        let t = s.time_at_lambda(16.0);
        let h = 1e-9;
        let fd = (s.lambda_of(t + h) - s.lambda_of(t - h)) / (2.0 * h);
        assert_abs_diff_eq!(fd / s.lambda_deriv(t), 1.0, epsilon = 1e-5);
    }

    #[test]
    fn dt_projection_symbol_matches_time_derivative() {
        let chi = crate::profile::LpProfile::new();
        let s = WavenumberSchedule::new(0.1, 1.0).unwrap();
        let r = 24.0;
        let t = s.time_at_lambda(32.0); // r/Lambda = 0.75, mid-transition
        let h = (s.t_end - t) * 1e-7;
        let fd = (chi.eval(r / s.lambda_of(t + h)) - chi.eval(r / s.lambda_of(t - h))) / (2.0 * h);
        let an = dt_projection_symbol(&chi, r, s.lambda_of(t), s.lambda_deriv(t));
        assert_abs_diff_eq!(fd / an, 1.0, epsilon = 1e-5);
        // Support: zero on the plateau and outside the cutoff.
        assert_eq!(
            dt_projection_symbol(&chi, 10.0, 32.0, 1.0),
            0.0,
            "inside plateau"
        );
        assert_eq!(dt_projection_symbol(&chi, 40.0, 32.0, 1.0), 0.0);
    }

    #[test]
    fn quadrature_polynomials_and_knots() {
        let v = integrate(&|x: f64| x * x * x, 0.0, 1.0, 1e-12, &[]).unwrap();
        assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        // Piecewise integrand with a kink: knots make it cheap and exact.
        let f = |x: f64| if x < 0.3 { x } else { 0.3 + 2.0 * (x - 0.3) };
        let v = integrate(&f, 0.0, 1.0, 1e-12, &[0.3]).unwrap();
        let exact = 0.045 + 0.3 * 0.7 + 0.49;
        assert_abs_diff_eq!(v, exact, epsilon = 1e-10);
        // Smooth step over its transition.
        let v = integrate(&|x| smooth_step(x), -1.0, 2.0, 1e-13, &[0.0, 1.0]).unwrap();
        // int_0^1 sigma = 1/2 by symmetry, plus the plateau on [1,2].
        assert_abs_diff_eq!(v, 1.5, epsilon = 1e-11);
    }
}
