//! Sparse spectral representation of real vector fields on the d-torus.
//!
//! Coefficients live in a `BTreeMap` keyed by the integer frequency vector,
//! so iteration order is canonical (lexicographic) and every reduction over
//! a field is deterministic. The measure is normalized: Plancherel reads
//! `int u . v dx = sum_k u(k) . conj(v(k))` with no 2*pi factors.
//!
//! Real fields store both `k` and `-k` with conjugate coefficients; the
//! constructors enforce this, and the dump reader rejects files that
//! violate it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{FluxError, Result};
use crate::profile::LpProfile;
use crate::util::CompensatedSum;

/// Relative tolerance for the divergence-free check.
pub const DIVFREE_TOL: f64 = 1e-10;
/// Relative tolerance for the Hermitian-symmetry check on input files.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Default cap on convolution pair counts (|supp u| * |supp v|).
pub const DEFAULT_PAIR_CAP: u128 = 1 << 34;
/// Default cap on synthesis grid points (m^d, per component).
pub const DEFAULT_GRID_CAP: u128 = 1 << 27;

/// A real (Hermitian-symmetric) vector field given by its Fourier modes.
#[derive(Debug, Clone)]
pub struct SpectralField {
    dim: usize,
    coeffs: BTreeMap<Vec<i32>, Vec<Complex64>>,
    divfree: bool,
}

/// Leray projection of a single coefficient: v - k (k.v)/|k|^2.
///
/// At k = 0 the projection is the identity (constants are divergence-free).
pub fn leray_project(k: &[i32], v: &[Complex64]) -> Vec<Complex64> {
    let k2: f64 = k.iter().map(|&x| (x as f64) * (x as f64)).sum();
    if k2 == 0.0 {
        return v.to_vec();
    }
    let kv: Complex64 = k
        .iter()
        .zip(v)
        .map(|(&ki, &vi)| vi * (ki as f64))
        .sum();
    k.iter()
        .zip(v)
        .map(|(&ki, &vi)| vi - kv * ((ki as f64) / k2))
        .collect()
}

fn norm_of(k: &[i32]) -> f64 {
    k.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

fn coeff_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

impl SpectralField {
    /// Empty field in dimension `dim` (d >= 3 for all constructions here,
    /// but the container itself works for d >= 1).
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            coeffs: BTreeMap::new(),
            divfree: true,
        }
    }

    /// Build from explicit (k, coefficient) pairs.
    ///
    /// Every pair inserts both k and -k (with the conjugate coefficient), so
    /// pass each +-k pair only once, in either orientation. A zero frequency
    /// must carry a real coefficient.
    pub fn from_pairs<I>(dim: usize, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<i32>, Vec<Complex64>)>,
    {
        let mut f = Self::new(dim);
        for (k, v) in pairs {
            f.insert_pair(k, v)?;
        }
        f.refresh_divfree();
        Ok(f)
    }

    /// Insert the conjugate pair (k, v), (-k, conj v), accumulating into any
    /// existing coefficient.
    pub fn insert_pair(&mut self, k: Vec<i32>, v: Vec<Complex64>) -> Result<()> {
        if k.len() != self.dim || v.len() != self.dim {
            return Err(FluxError::DimensionMismatch {
                expected: self.dim,
                got: k.len().max(v.len()),
            });
        }
        if k.iter().all(|&x| x == 0) {
            let im: f64 = v.iter().map(|c| c.im.abs()).sum();
            if im > HERMITIAN_TOL * (1.0 + coeff_norm(&v)) {
                return Err(FluxError::NotHermitian {
                    key: k,
                    detail: "zero mode must be real".into(),
                });
            }
            accumulate(&mut self.coeffs, k, &v);
            return Ok(());
        }
        let kneg: Vec<i32> = k.iter().map(|&x| -x).collect();
        let vconj: Vec<Complex64> = v.iter().map(|c| c.conj()).collect();
        accumulate(&mut self.coeffs, k, &v);
        accumulate(&mut self.coeffs, kneg, &vconj);
        Ok(())
    }

    /// Re-derive the divergence-free flag from the stored coefficients.
    pub fn refresh_divfree(&mut self) {
        self.divfree = self.coeffs.iter().all(|(k, v)| {
            let kv: Complex64 = k
                .iter()
                .zip(v)
                .map(|(&ki, &vi)| vi * (ki as f64))
                .sum();
            kv.norm() <= DIVFREE_TOL * (norm_of(k) * coeff_norm(v)).max(f64::MIN_POSITIVE)
        });
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored modes (counting k and -k separately).
    pub fn support_len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_divergence_free(&self) -> bool {
        self.divfree
    }

    pub fn get(&self, k: &[i32]) -> Option<&[Complex64]> {
        self.coeffs.get(k).map(|v| v.as_slice())
    }

    /// Iterate modes in canonical (lexicographic) order.
    pub fn iter(&self) -> impl Iterator<Item = (&Vec<i32>, &Vec<Complex64>)> {
        self.coeffs.iter()
    }

    /// Largest |k_i| over the support, per-axis maximum.
    pub fn max_abs_freq(&self) -> i32 {
        self.coeffs
            .keys()
            .flat_map(|k| k.iter().map(|&x| x.abs()))
            .max()
            .unwrap_or(0)
    }

    /// Apply the Leray projection mode by mode.
    pub fn leray_projected(&self) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .map(|(k, v)| (k.clone(), leray_project(k, v)))
            .collect();
        Self {
            dim: self.dim,
            coeffs,
            divfree: true,
        }
    }

    /// Apply a real radial-symmetric Fourier multiplier m(k).
    ///
    /// The caller must supply m with m(-k) = m(k); all multipliers in this
    /// crate are functions of |k| so this holds automatically. Modes whose
    /// multiplier value is exactly zero are dropped from the support.
    pub fn apply_multiplier<F: Fn(&[i32]) -> f64>(&self, m: F) -> Self {
        let mut coeffs = BTreeMap::new();
        for (k, v) in &self.coeffs {
            let w = m(k);
            if w != 0.0 {
                coeffs.insert(k.clone(), v.iter().map(|&c| c * w).collect());
            }
        }
        Self {
            dim: self.dim,
            coeffs,
            divfree: self.divfree,
        }
    }

    /// Low-pass projection `Delta_{<=q}` with symbol chi(|k| / lambda_{q+1}).
    pub fn project_leq(&self, q: i32, chi: &LpProfile) -> Self {
        self.apply_multiplier(|k| chi.leq_symbol(norm_of(k), q))
    }

    /// Dyadic shell projection `Delta_q`.
    ///
    /// Symbol chi(|k|/lambda_{q+1}) - chi(|k|/lambda_q) for q >= 0 and
    /// chi(|k|) for the q = -1 block; the symbols over q >= -1 sum to one at
    /// every frequency.
    pub fn shell_projection(&self, q: i32, chi: &LpProfile) -> Self {
        self.apply_multiplier(|k| shell_symbol(norm_of(k), q, chi))
    }

    /// L2 pairing: sum over k of u(k) . conj(v(k)); real for real fields.
    pub fn inner_product(&self, other: &Self) -> Result<f64> {
        if self.dim != other.dim {
            return Err(FluxError::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut acc = CompensatedSum::new();
        // Iterate the smaller support, look up in the larger.
        let (a, b) = if self.coeffs.len() <= other.coeffs.len() {
            (&self.coeffs, &other.coeffs)
        } else {
            (&other.coeffs, &self.coeffs)
        };
        for (k, va) in a {
            if let Some(vb) = b.get(k) {
                let term: f64 = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &y)| (x * y.conj()).re)
                    .sum();
                acc.add(term);
            }
        }
        Ok(acc.value())
    }

    pub fn l2_norm_sq(&self) -> f64 {
        let mut acc = CompensatedSum::new();
        for v in self.coeffs.values() {
            acc.add(v.iter().map(|c| c.norm_sqr()).sum());
        }
        acc.value()
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_sq().sqrt()
    }

    /// Inhomogeneous Sobolev norm H^s.
    ///
    /// Implemented as a per-mode weight m_s(k) = sum over shells q >= -1 of
    /// lambda_q^{2s} phi_q(|k|), where the phi_q are the (first-power)
    /// Littlewood-Paley symbols; they partition unity, so s = 0 reproduces
    /// the L2 norm exactly and the norm agrees with the shell-by-shell
    /// reference sum up to summation order.
    pub fn sobolev_norm(&self, s: f64, chi: &LpProfile) -> f64 {
        let mut acc = CompensatedSum::new();
        for (k, v) in &self.coeffs {
            let e: f64 = v.iter().map(|c| c.norm_sqr()).sum();
            acc.add(sobolev_weight(norm_of(k), s, chi) * e);
        }
        acc.value().max(0.0).sqrt()
    }

    /// Fourier coefficients of div(u (x) v) for divergence-free u:
    ///
    /// ```text
    /// F[div(u (x) v)](k) = i sum_{k1 + k2 = k} (k2 . u(k1)) v(k2)
    /// ```
    ///
    /// The output is real but in general not divergence-free. Fails if
    /// |supp u| * |supp v| exceeds `pair_cap` (pass `None` for the default).
    pub fn nonlinear_coeffs(&self, v: &Self, pair_cap: Option<u128>) -> Result<Self> {
        if self.dim != v.dim {
            return Err(FluxError::DimensionMismatch {
                expected: self.dim,
                got: v.dim,
            });
        }
        if !self.divfree {
            return Err(FluxError::NotDivergenceFree {
                key: vec![],
                violation: f64::NAN,
            });
        }
        let cap = pair_cap.unwrap_or(DEFAULT_PAIR_CAP);
        let needed = self.coeffs.len() as u128 * v.coeffs.len() as u128;
        if needed > cap {
            return Err(FluxError::PairBudgetExceeded { needed, cap });
        }
        let mut out: BTreeMap<Vec<i32>, Vec<Complex64>> = BTreeMap::new();
        let i = Complex64::new(0.0, 1.0);
        for (k1, u1) in &self.coeffs {
            for (k2, v2) in &v.coeffs {
                let dot: Complex64 = k2
                    .iter()
                    .zip(u1)
                    .map(|(&ki, &ui)| ui * (ki as f64))
                    .sum();
                if dot.norm_sqr() == 0.0 {
                    continue;
                }
                let k: Vec<i32> = k1.iter().zip(k2).map(|(&a, &b)| a + b).collect();
                let entry = out.entry(k).or_insert_with(|| vec![Complex64::ZERO; self.dim]);
                for (e, &v2j) in entry.iter_mut().zip(v2) {
                    *e += i * dot * v2j;
                }
            }
        }
        // Drop numerically empty modes to keep supports tight.
        out.retain(|_, c| c.iter().any(|x| x.norm_sqr() > 0.0));
        let mut f = Self {
            dim: self.dim,
            coeffs: out,
            divfree: false,
        };
        f.refresh_divfree();
        Ok(f)
    }

    /// Exact trigonometric synthesis on the uniform m^d grid
    /// x_j = 2 pi j / m.
    ///
    /// Exact as long as no two support frequencies alias mod m per axis
    /// (m >= 2 max|k_i| + 1 suffices). Errors out above `grid_cap` points.
    pub fn synthesize_grid(&self, m: usize, grid_cap: Option<u128>) -> Result<GridField> {
        let cap = grid_cap.unwrap_or(DEFAULT_GRID_CAP);
        let points = (m as u128).pow(self.dim as u32);
        if points > cap {
            return Err(FluxError::GridBudgetExceeded {
                needed: points,
                cap,
            });
        }
        if m < 2 * self.max_abs_freq() as usize + 1 {
            return Err(FluxError::InvalidParameter {
                name: "m".into(),
                detail: format!(
                    "grid size {m} aliases support with max |k_i| = {}",
                    self.max_abs_freq()
                ),
            });
        }
        let n = points as usize;
        let mut data = vec![0.0f64; n * self.dim];
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_inverse(m);
        let mut buf = vec![Complex64::ZERO; n];
        let mut line = vec![Complex64::ZERO; m];
        for comp in 0..self.dim {
            buf.iter_mut().for_each(|c| *c = Complex64::ZERO);
            for (k, v) in &self.coeffs {
                let mut flat = 0usize;
                for &ki in k {
                    flat = flat * m + (ki.rem_euclid(m as i32) as usize);
                }
                buf[flat] = v[comp];
            }
            // Unnormalized inverse FFT along each axis gives
            // sum_k c(k) e^{2 pi i k . j / m} = u(x_j).
            for axis in 0..self.dim {
                let inner: usize = m.pow((self.dim - 1 - axis) as u32);
                let outer: usize = n / (m * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * m * inner + i;
                        for t in 0..m {
                            line[t] = buf[base + t * inner];
                        }
                        fft.process(&mut line);
                        for t in 0..m {
                            buf[base + t * inner] = line[t];
                        }
                    }
                }
            }
            let scale = self.l2_norm().max(1.0);
            for (o, c) in data[comp * n..(comp + 1) * n].iter_mut().zip(&buf) {
                debug_assert!(c.im.abs() <= 1e-9 * scale, "imaginary residue {}", c.im);
                *o = c.re;
            }
        }
        Ok(GridField {
            dim: self.dim,
            m,
            data,
        })
    }

    /// Write the plain-text dump format:
    ///
    /// ```text
    /// d=<dim> count=<n> real=1 divfree=<0|1>
    /// k1 ... kd re1 im1 ... red imd
    /// ```
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        writeln!(
            s,
            "d={} count={} real=1 divfree={}",
            self.dim,
            self.coeffs.len(),
            if self.divfree { 1 } else { 0 }
        )
        .unwrap();
        for (k, v) in &self.coeffs {
            for (i, ki) in k.iter().enumerate() {
                if i > 0 {
                    s.push(' ');
                }
                write!(s, "{ki}").unwrap();
            }
            for c in v {
                write!(s, " {:.16e} {:.16e}", c.re, c.im).unwrap();
            }
            s.push('\n');
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    /// Read a dump, validating the header, Hermitian symmetry, and the
    /// declared divergence-free flag.
    pub fn read_dump(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| FluxError::Malformed("empty dump".into()))?;
        let mut dim = None;
        let mut count = None;
        let mut real = None;
        let mut divfree_flag = None;
        for tok in header.split_whitespace() {
            let (key, val) = tok
                .split_once('=')
                .ok_or_else(|| FluxError::Malformed(format!("bad header token '{tok}'")))?;
            let n: i64 = val
                .parse()
                .map_err(|_| FluxError::Malformed(format!("bad header value '{tok}'")))?;
            match key {
                "d" => dim = Some(n as usize),
                "count" => count = Some(n as usize),
                "real" => real = Some(n),
                "divfree" => divfree_flag = Some(n),
                _ => return Err(FluxError::Malformed(format!("unknown header key '{key}'"))),
            }
        }
        let dim = dim.ok_or_else(|| FluxError::Malformed("header missing d=".into()))?;
        let count = count.ok_or_else(|| FluxError::Malformed("header missing count=".into()))?;
        if real != Some(1) {
            return Err(FluxError::Malformed("only real fields supported".into()));
        }
        let divfree_flag = divfree_flag
            .ok_or_else(|| FluxError::Malformed("header missing divfree=".into()))?;
        let mut coeffs: BTreeMap<Vec<i32>, Vec<Complex64>> = BTreeMap::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != dim + 2 * dim {
                return Err(FluxError::Malformed(format!(
                    "expected {} tokens per row, got {}",
                    3 * dim,
                    toks.len()
                )));
            }
            let k: Vec<i32> = toks[..dim]
                .iter()
                .map(|t| t.parse::<i32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| FluxError::Malformed(format!("bad frequency: {e}")))?;
            let mut v = Vec::with_capacity(dim);
            for c in 0..dim {
                let re: f64 = toks[dim + 2 * c]
                    .parse()
                    .map_err(|e| FluxError::Malformed(format!("bad coefficient: {e}")))?;
                let im: f64 = toks[dim + 2 * c + 1]
                    .parse()
                    .map_err(|e| FluxError::Malformed(format!("bad coefficient: {e}")))?;
                v.push(Complex64::new(re, im));
            }
            if coeffs.insert(k.clone(), v).is_some() {
                return Err(FluxError::Malformed(format!("duplicate frequency {k:?}")));
            }
        }
        if coeffs.len() != count {
            return Err(FluxError::Malformed(format!(
                "header count {} but {} rows",
                count,
                coeffs.len()
            )));
        }
        // Hermitian validation: every k must have its mirror with the
        // conjugate coefficient.
        for (k, v) in &coeffs {
            let kneg: Vec<i32> = k.iter().map(|&x| -x).collect();
            let Some(w) = coeffs.get(&kneg) else {
                return Err(FluxError::NotHermitian {
                    key: k.clone(),
                    detail: "mirror frequency missing".into(),
                });
            };
            let scale = coeff_norm(v).max(f64::MIN_POSITIVE);
            let dev: f64 = v
                .iter()
                .zip(w)
                .map(|(&a, &b)| (a - b.conj()).norm())
                .sum();
            if dev > HERMITIAN_TOL * scale * (dim as f64) {
                return Err(FluxError::NotHermitian {
                    key: k.clone(),
                    detail: format!("conjugate mismatch {dev:.3e}"),
                });
            }
        }
        let mut f = Self {
            dim,
            coeffs,
            divfree: false,
        };
        f.refresh_divfree();
        if divfree_flag == 1 && !f.divfree {
            let (k, v) = f
                .coeffs
                .iter()
                .max_by(|a, b| {
                    let da = div_violation(a.0, a.1);
                    let db = div_violation(b.0, b.1);
                    da.total_cmp(&db)
                })
                .unwrap();
            return Err(FluxError::NotDivergenceFree {
                key: k.clone(),
                violation: div_violation(k, v),
            });
        }
        Ok(f)
    }

    /// Pointwise evaluation u(x) by direct summation (small supports only).
    pub fn eval_point(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (k, v) in &self.coeffs {
            let phase: f64 = k.iter().zip(x).map(|(&ki, &xi)| ki as f64 * xi).sum();
            let e = Complex64::new(0.0, phase).exp();
            for (o, &c) in out.iter_mut().zip(v) {
                *o += (c * e).re;
            }
        }
        out
    }
}

fn div_violation(k: &[i32], v: &[Complex64]) -> f64 {
    let kv: Complex64 = k
        .iter()
        .zip(v)
        .map(|(&ki, &vi)| vi * (ki as f64))
        .sum();
    kv.norm()
}

fn accumulate(map: &mut BTreeMap<Vec<i32>, Vec<Complex64>>, k: Vec<i32>, v: &[Complex64]) {
    match map.entry(k) {
        std::collections::btree_map::Entry::Vacant(e) => {
            e.insert(v.to_vec());
        }
        std::collections::btree_map::Entry::Occupied(mut e) => {
            for (a, &b) in e.get_mut().iter_mut().zip(v) {
                *a += b;
            }
        }
    }
}

/// Symbol of the dyadic shell projection Delta_q at radius r.
pub fn shell_symbol(r: f64, q: i32, chi: &LpProfile) -> f64 {
    if q < -1 {
        0.0
    } else if q == -1 {
        chi.eval(r)
    } else {
        chi.eval(r / crate::lambda(q + 1)) - chi.eval(r / crate::lambda(q))
    }
}

/// Per-mode H^s weight: sum over q >= -1 of lambda_q^{2s} phi_q(r), with
/// lambda_{-1} = 1/2 for the low block. Only the couple of shells whose
/// symbol is nonzero at r contribute.
pub fn sobolev_weight(r: f64, s: f64, chi: &LpProfile) -> f64 {
    if r <= 0.0 {
        return 0.25f64.powf(s); // zero mode sits in the q = -1 block
    }
    let qmax = r.log2().ceil() as i32 + 1;
    let qmin = (-1).max(r.log2().floor() as i32 - 1);
    let mut w = 0.0;
    for q in qmin..=qmax {
        let phi = shell_symbol(r, q, chi);
        if phi > 0.0 {
            let lam = if q == -1 { 0.5 } else { crate::lambda(q) };
            w += lam.powf(2.0 * s) * phi;
        }
    }
    w
}

/// Real samples of a field on the uniform m^d grid, component-major.
pub struct GridField {
    pub dim: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl GridField {
    pub fn points(&self) -> usize {
        self.m.pow(self.dim as u32)
    }

    /// |u(x)| at flat grid index `idx`.
    pub fn speed_at(&self, idx: usize) -> f64 {
        let n = self.points();
        (0..self.dim)
            .map(|c| {
                let v = self.data[c * n + idx];
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Grid quadrature of |u|^p under the normalized measure.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let n = self.points();
        let mut chunks = Vec::with_capacity(n / 4096 + 1);
        let mut acc = CompensatedSum::new();
        for (i, _) in (0..n).enumerate() {
            acc.add(self.speed_at(i).powf(p));
            if (i + 1) % 4096 == 0 {
                chunks.push(acc.value());
                acc = CompensatedSum::new();
            }
        }
        chunks.push(acc.value());
        (crate::util::pairwise_sum(&chunks) / n as f64).powf(1.0 / p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// 2 sin(x1) e2 in dimension 3: coefficients -i e2 at (1,0,0), +i e2 at
    /// the mirror.
    fn sine_field() -> SpectralField {
        SpectralField::from_pairs(
            3,
            [(
                vec![1, 0, 0],
                vec![c(0.0, 0.0), c(0.0, -1.0), c(0.0, 0.0)],
            )],
        )
        .unwrap()
    }

    #[test]
    fn leray_examples() {
        // k = (1,1,0), v = e1: P v = (1/2, -1/2, 0).
        let p = leray_project(&[1, 1, 0], &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        assert_abs_diff_eq!(p[0].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1].re, -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[2].re, 0.0, epsilon = 1e-15);
        // Idempotent and orthogonal to k.
        let p2 = leray_project(&[1, 1, 0], &p);
        for (a, b) in p.iter().zip(&p2) {
            assert_abs_diff_eq!(a.re, b.re, epsilon = 1e-15);
        }
        // Vector parallel to k projects to zero.
        let z = leray_project(&[2, -1, 3], &[c(2.0, 0.0), c(-1.0, 0.0), c(3.0, 0.0)]);
        assert!(z.iter().all(|x| x.norm() < 1e-14));
    }

    #[test]
    fn sine_field_is_real_and_divfree() {
        let u = sine_field();
        assert!(u.is_divergence_free());
        assert_abs_diff_eq!(u.l2_norm(), std::f64::consts::SQRT_2, epsilon = 1e-14);
        // Pointwise check at a few x: u(x) = 2 sin(x1) e2.
        let v = u.eval_point(&[0.7, 0.3, 1.1]);
        assert_abs_diff_eq!(v[1], 2.0 * 0.7f64.sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn projection_plateau_and_kill() {
        let chi = LpProfile::new();
        let u = sine_field();
        // |k| = 1 <= lambda_3 / 2 = 4: untouched by Delta_{<=2}.
        let low = u.project_leq(2, &chi);
        assert_abs_diff_eq!(low.l2_norm(), u.l2_norm(), epsilon = 1e-15);
        // chi(1 / lambda_{-1}) with lambda_0 = 1: symbol chi(1) = 0 kills it.
        let hi = u.project_leq(-1, &chi);
        assert_eq!(hi.support_len(), 0);
    }

    #[test]
    fn shell_symbols_partition_unity() {
        let chi = LpProfile::new();
        for &r in &[0.3, 1.0, 1.7, 2.5, 13.0, 97.4] {
            let total: f64 = (-1..=12).map(|q| shell_symbol(r, q, &chi)).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn sobolev_s0_is_l2_and_shell_reference_matches() {
        let chi = LpProfile::new();
        // A two-mode field straddling a shell boundary.
        let u = SpectralField::from_pairs(
            3,
            [
                (
                    vec![3, 0, 0],
                    vec![c(0.0, 0.0), c(0.2, 0.1), c(0.0, -0.3)],
                ),
                (
                    vec![0, 12, 5],
                    vec![c(0.4, 0.0), c(0.0, 0.0), c(0.0, 0.0)],
                ),
            ],
        )
        .unwrap();
        assert_abs_diff_eq!(u.sobolev_norm(0.0, &chi), u.l2_norm(), epsilon = 1e-12);
        // Independent summation order: shell projections first, then the
        // weighted sum over shells.
        for &s in &[-1.0, 0.5, 1.0] {
            let mut total = 0.0;
            for q in -1..=8 {
                let uq = u.apply_multiplier(|k| shell_symbol(norm_of(k), q, &chi));
                let lam = if q == -1 { 0.5 } else { crate::lambda(q) };
                // First-power symbols: per-mode weight is phi_q, so the
                // shell contribution is sum_k phi_q(k) |u(k)|^2 ... which is
                // the inner product of u with its projection.
                total += lam.powf(2.0 * s) * u.inner_product(&uq).unwrap();
            }
            assert_abs_diff_eq!(u.sobolev_norm(s, &chi), total.sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn nonlinear_single_pair_hand_oracle() {
        // u = 2 sin(x1) e2 interacting with itself: div(u (x) u) = 0 because
        // k . u(k') = 0 for all pairs (k parallel to e1, u parallel to e2).
        let u = sine_field();
        let nl = u.nonlinear_coeffs(&u, None).unwrap();
        assert_eq!(nl.support_len(), 0);

        // Hand-checked two-mode case: u with modes at a=(1,0,0) dir e2 and
        // b=(0,1,0) dir e3 (coefficients -i/2 each orientation).
        // F[div(u (x) u)](a+b) = i [ (b . u(a)) u(b) + (a . u(b)) u(a) ]
        //                      = i (b . u(a)) u(b)   since a . u(b) = 0
        // with u(a) = -i/2 e2, u(b) = -i/2 e3:
        //   = i (-i/2) (-i/2) e3 = -i/4 e3.
        let u2 = SpectralField::from_pairs(
            3,
            [
                (vec![1, 0, 0], vec![c(0.0, 0.0), c(0.0, -0.5), c(0.0, 0.0)]),
                (vec![0, 1, 0], vec![c(0.0, 0.0), c(0.0, 0.0), c(0.0, -0.5)]),
            ],
        )
        .unwrap();
        let nl2 = u2.nonlinear_coeffs(&u2, None).unwrap();
        let at = nl2.get(&[1, 1, 0]).unwrap();
        assert_abs_diff_eq!(at[2].im, -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(at[2].re, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(at[0].norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(at[1].norm(), 0.0, epsilon = 1e-15);
        // Output of the nonlinearity of a real field is real.
        let at_neg = nl2.get(&[-1, -1, 0]).unwrap();
        assert_abs_diff_eq!(at_neg[2].im, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn pair_budget_is_enforced() {
        let u = sine_field();
        let err = u.nonlinear_coeffs(&u, Some(1)).unwrap_err();
        assert!(matches!(err, FluxError::PairBudgetExceeded { .. }));
    }

    #[test]
    fn synthesis_matches_closed_form() {
        let u = sine_field();
        let g = u.synthesize_grid(8, None).unwrap();
        // Component 2 (index 1) should be 2 sin(x1) at x1 = 2 pi j / 8.
        let n = g.points();
        for j in 0..8 {
            let idx = j * 64; // x = (2 pi j / 8, 0, 0)
            let want = 2.0 * (2.0 * std::f64::consts::PI * j as f64 / 8.0).sin();
            assert_abs_diff_eq!(g.data[n + idx], want, epsilon = 1e-12);
            assert_abs_diff_eq!(g.data[idx], 0.0, epsilon = 1e-12);
        }
        // L2 and L4 norms: ||u||_2 = sqrt(2), ||u||_4 = 6^{1/4}.
        assert_abs_diff_eq!(g.lp_norm(2.0), std::f64::consts::SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(g.lp_norm(4.0), 6.0f64.powf(0.25), epsilon = 1e-12);
    }

    #[test]
    fn grid_quadrature_matches_plancherel_inner_product() {
        // Random-ish small real divergence-free field; its grid L2 norm must
        // match the coefficient-space norm.
        let chi = LpProfile::new();
        let _ = chi;
        let u = SpectralField::from_pairs(
            3,
            [
                (vec![2, 1, 0], {
                    let v = leray_project(&[2, 1, 0], &[c(0.3, 0.1), c(-0.2, 0.4), c(0.0, 0.7)]);
                    v
                }),
                (vec![0, 3, 1], {
                    leray_project(&[0, 3, 1], &[c(-0.1, 0.0), c(0.5, -0.2), c(0.2, 0.2)])
                }),
            ],
        )
        .unwrap();
        let g = u.synthesize_grid(9, None).unwrap();
        assert_abs_diff_eq!(g.lp_norm(2.0), u.l2_norm(), epsilon = 1e-12);
    }

    #[test]
    fn dump_roundtrip_and_hermitian_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.txt");
        let u = SpectralField::from_pairs(
            3,
            [(vec![1, 2, 0], {
                leray_project(&[1, 2, 0], &[c(0.1, 0.2), c(0.3, -0.4), c(0.5, 0.6)])
            })],
        )
        .unwrap();
        u.write_dump(&path).unwrap();
        let v = SpectralField::read_dump(&path).unwrap();
        assert_eq!(v.support_len(), u.support_len());
        for (k, cv) in u.iter() {
            let w = v.get(k).unwrap();
            for (a, b) in cv.iter().zip(w) {
                assert_abs_diff_eq!(a.re, b.re, epsilon = 1e-15);
                assert_abs_diff_eq!(a.im, b.im, epsilon = 1e-15);
            }
        }
        // Corrupt one row's sign to break Hermitian symmetry.
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let toks: Vec<String> = lines[1].split_whitespace().map(String::from).collect();
        let mut bad = toks.clone();
        bad[3] = format!("{:.16e}", toks[3].parse::<f64>().unwrap() + 1.0);
        lines[1] = bad.join(" ");
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(
            SpectralField::read_dump(&path),
            Err(FluxError::NotHermitian { .. })
        ));
    }

    fn norm_of(k: &[i32]) -> f64 {
        k.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
    }
}
