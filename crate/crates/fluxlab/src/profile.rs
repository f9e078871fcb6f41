//! The smooth step and the radial Littlewood-Paley cutoff.
//!
//! One C-infinity step underlies everything: with psi(s) = exp(-1/s) for
//! s > 0 (zero otherwise), define
//!
//! ```text
//! sigma(s) = psi(s) / (psi(s) + psi(1 - s))
//! ```
//!
//! which rises from 0 at s <= 0 to 1 at s >= 1 and has sigma(s) + sigma(1-s) = 1.
//! The radial cutoff is chi(r) = sigma(2 - 2r), so chi = 1 for r <= 1/2 and
//! chi = 0 for r >= 1; the same step reparametrized in time is the gluing
//! profile h. Both sqrt(sigma) and sqrt(1 - sigma) are smooth, which is what
//! the square-root time cutoffs in the gluing need.

/// Evaluate sigma(s) stably.
///
/// In the transition region we use sigma = 1/(1 + e^L) with
/// L = 1/s - 1/(1-s), computed through the numerically safe branch of the
/// logistic so neither psi underflowing nor e^L overflowing loses the value.
#[inline]
pub fn smooth_step(s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if s >= 1.0 {
        return 1.0;
    }
    let l = 1.0 / s - 1.0 / (1.0 - s);
    if l >= 0.0 {
        let e = (-l).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + l.exp())
    }
}

/// Derivative of the smooth step.
///
/// sigma' = sigma (1 - sigma) (s^-2 + (1-s)^-2); both factors are benign in
/// (0,1) and the product underflows gracefully at the endpoints.
#[inline]
pub fn smooth_step_deriv(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    let sg = smooth_step(s);
    sg * (1.0 - sg) * (1.0 / (s * s) + 1.0 / ((1.0 - s) * (1.0 - s)))
}

/// sqrt(sigma(s)), smooth on all of R.
#[inline]
pub fn smooth_step_sqrt(s: f64) -> f64 {
    smooth_step(s).sqrt()
}

/// d/ds sqrt(sigma(s)) via the closed form sqrt(sigma) (1 - sigma) (...) / 2.
///
/// Never forms sigma'/(2 sqrt(sigma)) directly, so there is no 0/0 at the
/// left edge of the transition.
#[inline]
pub fn smooth_step_sqrt_deriv(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    let sg = smooth_step(s);
    0.5 * sg.sqrt() * (1.0 - sg) * (1.0 / (s * s) + 1.0 / ((1.0 - s) * (1.0 - s)))
}

/// Radial Littlewood-Paley profile chi.
///
/// chi(r) = 1 for r <= 1/2, chi(r) = 0 for r >= 1, smooth and monotone in
/// between. `Delta_{<=q}` acts with symbol chi(|k| / lambda_{q+1}).
#[derive(Debug, Clone, Copy)]
pub struct LpProfile {
    /// Upper bound for the Lipschitz constant of chi^2, measured once.
    lip_sq: f64,
}

impl Default for LpProfile {
    fn default() -> Self {
        Self::new()
    }
}

impl LpProfile {
    pub fn new() -> Self {
        // Dense deterministic scan of |d(chi^2)/dr| = |2 chi chi'| over the
        // transition region, padded by a small safety factor.
        let n = 200_000;
        let mut max = 0.0f64;
        for i in 0..=n {
            let r = 0.5 + 0.5 * (i as f64) / (n as f64);
            let d = (2.0 * eval(r) * eval_deriv(r)).abs();
            if d > max {
                max = d;
            }
        }
        Self {
            lip_sq: max * 1.001,
        }
    }

    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        eval(r)
    }

    #[inline]
    pub fn eval_deriv(&self, r: f64) -> f64 {
        eval_deriv(r)
    }

    /// Symbol of Delta_{<=q} at frequency k: chi(|k| / 2^{q+1}).
    #[inline]
    pub fn leq_symbol(&self, knorm: f64, q: i32) -> f64 {
        eval(knorm / crate::lambda(q + 1))
    }

    /// Upper bound for the Lipschitz constant of chi^2 on [0, infinity).
    pub fn lipschitz_bound_of_square(&self) -> f64 {
        self.lip_sq
    }
}

#[inline]
fn eval(r: f64) -> f64 {
    smooth_step(2.0 - 2.0 * r)
}

#[inline]
fn eval_deriv(r: f64) -> f64 {
    -2.0 * smooth_step_deriv(2.0 - 2.0 * r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_endpoints_and_symmetry() {
        assert_eq!(smooth_step(-1.0), 0.0);
        assert_eq!(smooth_step(0.0), 0.0);
        assert_eq!(smooth_step(1.0), 1.0);
        assert_eq!(smooth_step(7.5), 1.0);
        // sigma(s) + sigma(1-s) = 1 exactly in exact arithmetic.
        for &s in &[0.1, 0.25, 0.4, 0.5, 0.77, 0.9] {
            assert!((smooth_step(s) + smooth_step(1.0 - s) - 1.0).abs() < 1e-15);
        }
        assert_eq!(smooth_step(0.5), 0.5);
    }

    #[test]
    fn step_is_monotone_and_smooth_at_edges() {
        let mut prev = 0.0;
        for i in 0..=1000 {
            let s = i as f64 / 1000.0;
            let v = smooth_step(s);
            assert!(v >= prev);
            prev = v;
        }
        // Derivative vanishes to all orders at the edges; spot-check decay.
        assert!(smooth_step_deriv(1e-3) < 1e-300);
        assert!(smooth_step_deriv(0.999) < 1e-2);
    }

    #[test]
    fn step_deriv_matches_finite_differences() {
        for &s in &[0.2, 0.35, 0.5, 0.65, 0.8] {
            let h = 1e-6;
            let fd = (smooth_step(s + h) - smooth_step(s - h)) / (2.0 * h);
            let an = smooth_step_deriv(s);
            assert!(
                (fd - an).abs() <= 1e-7 * an.abs().max(1.0),
                "s={s}: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn sqrt_step_deriv_is_stable_at_boundary() {
        // The naive g'/(2 sqrt(g)) form blows up as s -> 0+; the closed form
        // must go to zero smoothly instead.
        for &s in &[1e-3, 1e-2, 0.05, 0.1] {
            let d = smooth_step_sqrt_deriv(s);
            assert!(d.is_finite() && d >= 0.0);
        }
        let h = 1e-7;
        for &s in &[0.3, 0.5, 0.7] {
            let fd = (smooth_step_sqrt(s + h) - smooth_step_sqrt(s - h)) / (2.0 * h);
            let an = smooth_step_sqrt_deriv(s);
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0));
        }
    }

    #[test]
    fn chi_plateau_support_and_frozen_values() {
        let chi = LpProfile::new();
        assert_eq!(chi.eval(0.0), 1.0);
        assert_eq!(chi.eval(0.5), 1.0);
        assert_eq!(chi.eval(1.0), 0.0);
        assert_eq!(chi.eval(3.0), 0.0);
        // chi(3/4) = sigma(1/2) = 1/2 by the symmetry of the step.
        assert!((chi.eval(0.75) - 0.5).abs() < 1e-15);
        // chi(4/5) = sigma(2/5) = 1/(1 + e^{5/6}); reference value computed
        // with 50-digit arithmetic and frozen here.
        let reference = 0.302_940_716_034_592_72;
        assert!(
            (chi.eval(0.8) - reference).abs() < 1e-15,
            "chi(0.8) = {:.17e}",
            chi.eval(0.8)
        );
    }

    #[test]
    fn chi_square_lipschitz_bound_dominates_samples() {
        let chi = LpProfile::new();
        let lip = chi.lipschitz_bound_of_square();
        assert!(lip > 0.0);
        for i in 0..10_000 {
            let r = 0.5 + 0.5 * (i as f64) / 10_000.0;
            let r2 = r + 1e-5;
            let diff = (chi.eval(r2).powi(2) - chi.eval(r).powi(2)).abs();
            assert!(diff <= lip * 1e-5 * (1.0 + 1e-6));
        }
    }
}
