//! Fields whose Fourier support is a union of integer boxes ("blocks"),
//! each carrying one direction and one amplitude.
//!
//! Every constructed field in this crate has coefficients of the form
//! i * sign * amp * P(k) dir on an axis-aligned box of frequencies, plus the
//! conjugate mirror box. Keeping that structure explicit lets the flux
//! engine work with purely real triad arithmetic and lets pointwise
//! evaluation stream over lattices with a phase recurrence instead of
//! materializing dense spectral data.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{FluxError, Result};
use crate::spectral::SpectralField;
use crate::util::{pairwise_sum, CompensatedSum};

/// Leray projection of a real vector: v - k (k.v) / |k|^2, identity at k = 0.
pub fn leray_real(k: &[i32], v: &[f64]) -> Vec<f64> {
    let ksq: f64 = k.iter().map(|&ki| (ki as f64) * (ki as f64)).sum();
    if ksq == 0.0 {
        return v.to_vec();
    }
    let kv: f64 = k.iter().zip(v).map(|(&ki, &vi)| ki as f64 * vi).sum();
    k.iter()
        .zip(v)
        .map(|(&ki, &vi)| vi - ki as f64 * kv / ksq)
        .collect()
}

/// One box of frequencies with coefficient i * sign * amp * P(k) dir.
///
/// The mirror box (negated frequencies, flipped sign) is implicit: the
/// represented field is real.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformBlock {
    pub lo: Vec<i32>,
    pub hi: Vec<i32>,
    pub sign: f64,
    pub amp: f64,
    pub dir: Vec<f64>,
}

impl UniformBlock {
    pub fn new(lo: Vec<i32>, hi: Vec<i32>, sign: f64, amp: f64, dir: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != dir.len() {
            return Err(FluxError::DimensionMismatch {
                expected: lo.len(),
                got: hi.len().max(dir.len()),
            });
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(FluxError::InvalidParameter {
                name: "block".into(),
                detail: format!("empty box lo={lo:?} hi={hi:?}"),
            });
        }
        if sign.abs() != 1.0 {
            return Err(FluxError::InvalidParameter {
                name: "sign".into(),
                detail: format!("sign must be +/-1, got {sign}"),
            });
        }
        Ok(Self { lo, hi, sign, amp, dir })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Number of lattice points in the box.
    pub fn count(&self) -> u128 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l + 1) as u128)
            .product()
    }

    pub fn contains(&self, k: &[i32]) -> bool {
        k.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&ki, (&l, &h))| l <= ki && ki <= h)
    }

    /// Mirror box: coefficients at -k are the complex conjugates, which in
    /// this representation is the same box negated with the sign flipped.
    pub fn mirror(&self) -> UniformBlock {
        UniformBlock {
            lo: self.hi.iter().map(|h| -h).collect(),
            hi: self.lo.iter().map(|l| -l).collect(),
            sign: -self.sign,
            amp: self.amp,
            dir: self.dir.clone(),
        }
    }

    /// Range of |k| over the box: (min, max).
    pub fn radius_range(&self) -> (f64, f64) {
        let mut min_sq = 0.0f64;
        let mut max_sq = 0.0f64;
        for (&l, &h) in self.lo.iter().zip(&self.hi) {
            let (lf, hf) = (l as f64, h as f64);
            let lo_abs = if l <= 0 && 0 <= h {
                0.0
            } else {
                lf.abs().min(hf.abs())
            };
            let hi_abs = lf.abs().max(hf.abs());
            min_sq += lo_abs * lo_abs;
            max_sq += hi_abs * hi_abs;
        }
        (min_sq.sqrt(), max_sq.sqrt())
    }

    /// Coefficient at k (must lie in the box): i * sign * amp * P(k) dir.
    pub fn coeff(&self, k: &[i32]) -> Vec<Complex64> {
        debug_assert!(self.contains(k));
        leray_real(k, &self.dir)
            .into_iter()
            .map(|v| Complex64::new(0.0, self.sign * self.amp * v))
            .collect()
    }

    /// Visit every lattice point of the box in lexicographic order.
    pub fn for_each_mode<F: FnMut(&[i32])>(&self, f: F) {
        for_each_lattice(&self.lo, &self.hi, f);
    }
}

/// Visit every lattice point of [lo, hi] in lexicographic order.
pub fn for_each_lattice<F: FnMut(&[i32])>(lo: &[i32], hi: &[i32], mut f: F) {
    let d = lo.len();
    let mut k = lo.to_vec();
    loop {
        f(&k);
        let mut axis = d;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            if k[axis] < hi[axis] {
                k[axis] += 1;
                break;
            }
            k[axis] = lo[axis];
        }
    }
}

/// Intersection of two boxes, if nonempty.
fn box_intersection(a: &UniformBlock, b: &UniformBlock) -> Option<(Vec<i32>, Vec<i32>)> {
    let lo: Vec<i32> = a.lo.iter().zip(&b.lo).map(|(&x, &y)| x.max(y)).collect();
    let hi: Vec<i32> = a.hi.iter().zip(&b.hi).map(|(&x, &y)| x.min(y)).collect();
    if lo.iter().zip(&hi).any(|(l, h)| l > h) {
        None
    } else {
        Some((lo, hi))
    }
}

fn boxes_overlap(a: &UniformBlock, b: &UniformBlock) -> bool {
    a.lo
        .iter()
        .zip(&a.hi)
        .zip(b.lo.iter().zip(&b.hi))
        .all(|((&al, &ah), (&bl, &bh))| al <= bh && bl <= ah)
}

/// A real, divergence-free field given as a sum of blocks (with their
/// implicit mirrors). Overlapping blocks add coefficients.
#[derive(Debug, Clone)]
pub struct BlockField {
    dim: usize,
    blocks: Vec<UniformBlock>,
}

impl BlockField {
    /// Blocks may overlap (coefficients add); only the zero mode is
    /// forbidden, which would break the odd i-times-real structure.
    pub fn new(dim: usize, blocks: Vec<UniformBlock>) -> Result<Self> {
        for b in &blocks {
            if b.dim() != dim {
                return Err(FluxError::DimensionMismatch {
                    expected: dim,
                    got: b.dim(),
                });
            }
            if b.contains(&vec![0; dim]) {
                return Err(FluxError::InvalidParameter {
                    name: "block".into(),
                    detail: "box contains the zero frequency".into(),
                });
            }
        }
        Ok(Self { dim, blocks })
    }

    /// Like `new`, but additionally requires all blocks and mirrors to be
    /// pairwise disjoint (used where the construction relies on it).
    pub fn new_disjoint(dim: usize, blocks: Vec<UniformBlock>) -> Result<Self> {
        let f = Self::new(dim, blocks)?;
        let all = f.blocks_with_mirrors();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if boxes_overlap(&all[i], &all[j]) {
                    return Err(FluxError::BlockCollision {
                        detail: format!(
                            "boxes {:?}..{:?} and {:?}..{:?} intersect",
                            all[i].lo, all[i].hi, all[j].lo, all[j].hi
                        ),
                    });
                }
            }
        }
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[UniformBlock] {
        &self.blocks
    }

    /// Stored blocks followed by their mirrors.
    pub fn blocks_with_mirrors(&self) -> Vec<UniformBlock> {
        let mut v = Vec::with_capacity(self.blocks.len() * 2);
        for b in &self.blocks {
            v.push(b.clone());
        }
        for b in &self.blocks {
            v.push(b.mirror());
        }
        v
    }

    /// Total number of Fourier modes including mirrors.
    pub fn mode_count(&self) -> u128 {
        2 * self.blocks.iter().map(UniformBlock::count).sum::<u128>()
    }

    /// Materialize as a sparse spectral field (mirrors added implicitly).
    pub fn to_spectral(&self, mode_cap: u128) -> Result<SpectralField> {
        if self.mode_count() > mode_cap {
            return Err(FluxError::PairBudgetExceeded {
                needed: self.mode_count(),
                cap: mode_cap,
            });
        }
        let mut pairs = Vec::new();
        for b in &self.blocks {
            b.for_each_mode(|k| pairs.push((k.to_vec(), b.coeff(k))));
        }
        SpectralField::from_pairs(self.dim, pairs)
    }

    /// Squared L2 norm, streamed without materializing coefficients.
    ///
    /// With coefficients i * sign * amp * P(k) dir on each box, the squared
    /// norm is a sum over box pairs of real dot products on the box
    /// intersection; disjoint fields reduce to the usual diagonal sum.
    pub fn l2_norm_sq(&self) -> f64 {
        let all = self.blocks_with_mirrors();
        let mut acc = CompensatedSum::new();
        for i in 0..all.len() {
            for j in i..all.len() {
                let Some((lo, hi)) = box_intersection(&all[i], &all[j]) else {
                    continue;
                };
                let w = if i == j { 1.0 } else { 2.0 }
                    * all[i].sign
                    * all[j].sign
                    * all[i].amp
                    * all[j].amp;
                let (di, dj) = (&all[i].dir, &all[j].dir);
                for_each_lattice(&lo, &hi, |k| {
                    let vi = leray_real(k, di);
                    let vj = leray_real(k, dj);
                    acc.add(w * vi.iter().zip(&vj).map(|(a, b)| a * b).sum::<f64>());
                });
            }
        }
        acc.value()
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_sq().sqrt()
    }

    /// Weighted inner product sum_k w(k, |k|) u^(k) . conj(v^(k)) between two
    /// real block fields, streamed over intersecting box pairs (mirrors
    /// included).  With coefficients i * sign * amp * P(k) dir the summand is
    /// real, so the result is exact up to rounding.
    pub fn weighted_inner_sum(&self, other: &BlockField, w: &dyn Fn(&[i32], f64) -> f64) -> f64 {
        let mine = self.blocks_with_mirrors();
        let theirs = other.blocks_with_mirrors();
        let mut acc = CompensatedSum::new();
        for bi in &mine {
            for bj in &theirs {
                let Some((lo, hi)) = box_intersection(bi, bj) else {
                    continue;
                };
                let c = bi.sign * bj.sign * bi.amp * bj.amp;
                for_each_lattice(&lo, &hi, |k| {
                    let vi = leray_real(k, &bi.dir);
                    let vj = leray_real(k, &bj.dir);
                    let r = k.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                    let dot = vi.iter().zip(&vj).map(|(a, b)| a * b).sum::<f64>();
                    acc.add(c * w(k, r) * dot);
                });
            }
        }
        acc.value()
    }

    /// Pointwise velocity: u(x) = sum_blocks sum_k -2 sign amp sin(k.x) P(k)dir.
    pub fn eval_point(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for b in &self.blocks {
            FlatBlock::new(b).eval_into(x, &mut out);
        }
        out
    }

    /// Monte Carlo L^p norm over the torus with the normalized measure.
    ///
    /// Returns (norm, relative standard error of the norm). Deterministic
    /// for a fixed seed and sample count regardless of thread count: each
    /// fixed-size chunk draws from its own counter-seeded stream and the
    /// chunk results are reduced in index order.
    pub fn mc_lp_norm(&self, p: f64, samples: usize, seed: u64) -> (f64, f64) {
        assert!(p >= 1.0 && samples > 0);
        // Flatten per-mode data once: projected direction and lattice order
        // matching for_each_mode, so evaluation is a pure phase recurrence.
        let flat: Vec<FlatBlock> = self.blocks.iter().map(FlatBlock::new).collect();
        const CHUNK: usize = 256;
        let n_chunks = samples.div_ceil(CHUNK);
        let stats: Vec<(f64, f64, usize)> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
                let n = CHUNK.min(samples - c * CHUNK);
                let mut s = 0.0;
                let mut s2 = 0.0;
                let mut x = vec![0.0f64; self.dim];
                let mut u = vec![0.0f64; self.dim];
                for _ in 0..n {
                    for xi in x.iter_mut() {
                        *xi = rng.gen::<f64>() * std::f64::consts::TAU;
                    }
                    u.iter_mut().for_each(|v| *v = 0.0);
                    for fb in &flat {
                        fb.eval_into(&x, &mut u);
                    }
                    let speed = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let w = speed.powf(p);
                    s += w;
                    s2 += w * w;
                }
                (s, s2, n)
            })
            .collect();
        let total: f64 = pairwise_sum(&stats.iter().map(|t| t.0).collect::<Vec<_>>());
        let total2: f64 = pairwise_sum(&stats.iter().map(|t| t.1).collect::<Vec<_>>());
        let n = samples as f64;
        let mean = total / n;
        let var = (total2 / n - mean * mean).max(0.0);
        let se_mean = (var / n).sqrt();
        let norm = mean.powf(1.0 / p);
        let rel_se = se_mean / (p * mean.max(f64::MIN_POSITIVE));
        (norm, rel_se)
    }
}

/// Per-mode data laid out contiguously for fast pointwise evaluation.
struct FlatBlock {
    lo: Vec<i32>,
    hi: Vec<i32>,
    /// -2 * sign * amp folded into the projected directions.
    v: Vec<f64>, // dim values per mode, lexicographic order
    dim: usize,
}

impl FlatBlock {
    fn new(b: &UniformBlock) -> Self {
        let dim = b.dim();
        let scale = -2.0 * b.sign * b.amp;
        let mut v = Vec::with_capacity(b.count() as usize * dim);
        b.for_each_mode(|k| {
            for c in leray_real(k, &b.dir) {
                v.push(scale * c);
            }
        });
        Self {
            lo: b.lo.clone(),
            hi: b.hi.clone(),
            v,
            dim,
        }
    }

    /// Accumulate sum_k sin(k.x) v_k into `out` with a phase recurrence:
    /// one complex multiply per mode, trig calls only at block entry.
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let step: Vec<Complex64> = x.iter().map(|&xi| Complex64::cis(xi)).collect();
        // Phase at the current lattice point, maintained per axis level:
        // part[a] = exp(i * sum_{j<=a} k_j x_j).
        let mut part = vec![Complex64::new(1.0, 0.0); d];
        let mut acc = Complex64::new(1.0, 0.0);
        for a in 0..d {
            acc *= Complex64::cis(self.lo[a] as f64 * x[a]);
            part[a] = acc;
        }
        let mut k = self.lo.clone();
        let mut phase = part[d - 1];
        let mut idx = 0usize;
        loop {
            let s = phase.im; // sin(k.x)
            for (o, vi) in out.iter_mut().zip(&self.v[idx..idx + d]) {
                *o += s * vi;
            }
            idx += d;
            // Advance the lattice point, innermost axis fastest.
            let mut axis = d;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                if k[axis] < self.hi[axis] {
                    k[axis] += 1;
                    let upd = if axis == 0 {
                        part[0] * step[0]
                    } else {
                        part[axis] * step[axis]
                    };
                    part[axis] = upd;
                    // Rebuild the inner partial products from this level.
                    let mut p = upd;
                    for a in axis + 1..d {
                        k[a] = self.lo[a];
                        p *= Complex64::cis(self.lo[a] as f64 * x[a]);
                        part[a] = p;
                    }
                    phase = part[d - 1];
                    break;
                }
            }
        }
    }
}

/// Geometry of the three-block single-shell field at scale lambda_n.
#[derive(Debug, Clone)]
pub struct ShellBlockGeometry {
    pub lambda: f64,
    pub mu: f64,
    pub m: i32,
    pub a_count: u128,
    pub b_count: u128,
    pub c_count: u128,
}

/// Build the single-shell block field w_n in dimension d >= 3:
/// three blocks A, B and C = A + B (an exact box sum), with directions
/// chosen so the middle block transports energy between the other two.
///
/// A = [lambda, lambda + 2m] x [-m, m]^{d-1};
/// B = [-m, m] x [ceil(sqrt3 lambda - 4m), floor(sqrt3 lambda - 2m)] x [-m, m]^{d-2};
/// amplitudes |A|^{-1/2}, |B|^{-1/2}, |C|^{-1/2} with m = floor(lambda^{beta/d}).
pub fn build_wn(d: usize, beta: f64, n: i32) -> Result<(BlockField, ShellBlockGeometry)> {
    if d < 3 {
        return Err(FluxError::InvalidParameter {
            name: "d".into(),
            detail: format!("need d >= 3, got {d}"),
        });
    }
    let lambda = crate::lambda(n);
    if lambda > i32::MAX as f64 / 8.0 {
        return Err(FluxError::InvalidParameter {
            name: "n".into(),
            detail: format!("shell index {n} overflows frequency range"),
        });
    }
    let li = lambda as i32;
    let mu = lambda.powf(beta / d as f64);
    let m = mu.floor() as i32;
    if m < 1 {
        return Err(FluxError::InvalidParameter {
            name: "n".into(),
            detail: format!("block half-width floor(lambda^(beta/d)) = {m} < 1 at n = {n}"),
        });
    }
    let sqrt3 = 3.0f64.sqrt();
    let b2_lo = (sqrt3 * lambda - 4.0 * mu.floor() as f64).ceil() as i32;
    let b2_hi = (sqrt3 * lambda - 2.0 * mu.floor() as f64).floor() as i32;
    if b2_lo > b2_hi {
        return Err(FluxError::InvalidParameter {
            name: "n".into(),
            detail: format!("middle block empty at n = {n}"),
        });
    }

    let mut a_lo = vec![-m; d];
    let mut a_hi = vec![m; d];
    a_lo[0] = li;
    a_hi[0] = li + 2 * m;

    let mut b_lo = vec![-m; d];
    let mut b_hi = vec![m; d];
    b_lo[1] = b2_lo;
    b_hi[1] = b2_hi;

    // C = A + B is exactly the per-axis interval sum because both are boxes.
    let c_lo: Vec<i32> = a_lo.iter().zip(&b_lo).map(|(a, b)| a + b).collect();
    let c_hi: Vec<i32> = a_hi.iter().zip(&b_hi).map(|(a, b)| a + b).collect();

    let mut e_last = vec![0.0; d];
    e_last[d - 1] = 1.0;
    let mut e_first_last = vec![0.0; d];
    e_first_last[0] = 1.0;
    e_first_last[d - 1] = 1.0;

    // Sign convention: the product of the three block signs is chosen so
    // that energy is transported upward (the single-shell flux through the
    // block's own shell is positive).
    let a = UniformBlock::new(a_lo, a_hi, 1.0, 0.0, e_last.clone())?;
    let b = UniformBlock::new(b_lo, b_hi, 1.0, 0.0, e_first_last)?;
    let c = UniformBlock::new(c_lo, c_hi, 1.0, 0.0, e_last)?;
    let (na, nb, nc) = (a.count(), b.count(), c.count());
    let a = UniformBlock { amp: (na as f64).powf(-0.5), ..a };
    let b = UniformBlock { amp: (nb as f64).powf(-0.5), ..b };
    let c = UniformBlock { amp: (nc as f64).powf(-0.5), ..c };

    let field = BlockField::new(d, vec![a, b, c])?;
    Ok((
        field,
        ShellBlockGeometry {
            lambda,
            mu,
            m,
            a_count: na,
            b_count: nb,
            c_count: nc,
        },
    ))
}

/// Directions used by the intermittent cube construction (d = 3).
pub const CUBE_XI: [[i32; 3]; 4] = [[1, 0, 0], [0, 1, 0], [1, 1, 0], [1, -1, 0]];
pub const CUBE_E: [[f64; 3]; 4] = [
    [0.0, 0.0, -1.0],
    [1.0, 0.0, 1.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, -1.0],
];

/// Parameters of the intermittent cube field.
#[derive(Debug, Clone, Copy)]
pub struct CubeParams {
    pub beta: f64,
    pub eps_blk: f64,
    pub q_min: i32,
    pub q_max: i32,
}

impl CubeParams {
    pub fn new(beta: f64, q_min: i32, q_max: i32) -> Result<Self> {
        let d = 3.0;
        if !(0.0 < beta && beta < d) {
            return Err(FluxError::InvalidParameter {
                name: "beta".into(),
                detail: format!("need 0 < beta < 3, got {beta}"),
            });
        }
        Ok(Self {
            beta,
            eps_blk: (d - beta) / (100.0 * d),
            q_min,
            q_max,
        })
    }

    /// Cube half-width scale at shell q.
    pub fn mu(&self, q: i32) -> f64 {
        crate::lambda(q).powf((self.beta + 6.0 * self.eps_blk) / 3.0)
    }

    /// Coefficient amplitude at shell q.
    pub fn amp(&self, q: i32, half_width: i32) -> f64 {
        let side = (2 * half_width + 1) as f64;
        crate::lambda(q).powf(-self.eps_blk) * side.powf(-1.5)
    }
}

/// One cube block Omega_{q,j}: frequencies within distance m of lambda_q xi_j.
pub fn cube_block(p: &CubeParams, q: i32, j: usize) -> Result<UniformBlock> {
    let lam = crate::lambda(q);
    if lam * 2.0 > i32::MAX as f64 {
        return Err(FluxError::InvalidParameter {
            name: "q".into(),
            detail: format!("shell {q} overflows frequency range"),
        });
    }
    let li = lam as i32;
    let m = p.mu(q).floor() as i32;
    if m < 1 {
        return Err(FluxError::InvalidParameter {
            name: "q".into(),
            detail: format!("cube half-width < 1 at q = {q}"),
        });
    }
    let center: Vec<i32> = CUBE_XI[j].iter().map(|&c| c * li).collect();
    let lo: Vec<i32> = center.iter().map(|&c| c - m).collect();
    let hi: Vec<i32> = center.iter().map(|&c| c + m).collect();
    UniformBlock::new(lo, hi, -1.0, p.amp(q, m), CUBE_E[j].to_vec())
}

/// Build the intermittent cube field: four cubes per shell, q in
/// [q_min, q_max]. Fails if any two cubes (or mirrors) intersect.
pub fn build_cube_field(p: &CubeParams) -> Result<BlockField> {
    let mut blocks = Vec::new();
    for q in p.q_min..=p.q_max {
        for j in 0..4 {
            blocks.push(cube_block(p, q, j)?);
        }
    }
    BlockField::new_disjoint(3, blocks)
}

/// A single shear mode: u(x) = 2 amp sin(k.x) dir with dir orthogonal to k.
pub fn shear_mode(k: Vec<i32>, dir: Vec<f64>, amp: f64) -> Result<UniformBlock> {
    let dot: f64 = k.iter().zip(&dir).map(|(&ki, &di)| ki as f64 * di).sum();
    if dot.abs() > 1e-12 {
        return Err(FluxError::InvalidParameter {
            name: "dir".into(),
            detail: format!("shear direction not orthogonal to frequency (k.dir = {dot})"),
        });
    }
    UniformBlock::new(k.clone(), k, -1.0, amp, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::collections::HashSet;

    #[test]
    fn shell_block_counts_at_n4() {
        let (field, geo) = build_wn(3, 2.0, 4).unwrap();
        assert_eq!(geo.m, 6); // floor(16^(2/3))
        assert_eq!(geo.a_count, 2197); // 13^3
        assert_eq!(geo.b_count, 2028); // 13 * 12 * 13
        assert_eq!(geo.c_count, 15000); // 25 * 24 * 25
        let b = &field.blocks()[1];
        assert_eq!((b.lo[1], b.hi[1]), (4, 15));
        let c = &field.blocks()[2];
        assert_eq!(c.lo, vec![10, -2, -12]);
        assert_eq!(c.hi, vec![34, 21, 12]);
    }

    #[test]
    fn sum_box_matches_exhaustive_minkowski_sum() {
        let (field, _) = build_wn(3, 2.0, 4).unwrap();
        let (a, b, c) = (&field.blocks()[0], &field.blocks()[1], &field.blocks()[2]);
        let mut sums: HashSet<[i32; 3]> = HashSet::new();
        a.for_each_mode(|ka| {
            let ka = [ka[0], ka[1], ka[2]];
            b.for_each_mode(|kb| {
                sums.insert([ka[0] + kb[0], ka[1] + kb[1], ka[2] + kb[2]]);
            });
        });
        assert_eq!(sums.len() as u128, c.count());
        for s in &sums {
            assert!(c.contains(s));
        }
    }

    #[test]
    fn shell_radius_ranges() {
        // The blocks concentrate near |k| ~ lambda_n but strict containment
        // in [lambda_n, 2 lambda_n] only sets in at large n: the middle
        // block dips below lambda_n until n = 8 and the sum block's corner
        // always pokes slightly past 2 lambda_n.
        let (field, _) = build_wn(3, 2.0, 4).unwrap();
        let (bmin, _) = field.blocks()[1].radius_range();
        assert_abs_diff_eq!(bmin, 4.0, epsilon = 1e-12); // (0,4,0), well below 16
        let (_, cmax) = field.blocks()[2].radius_range();
        assert_abs_diff_eq!(cmax, 1741f64.sqrt(), epsilon = 1e-12); // > 32

        let first_contained = (4..=10)
            .find(|&n| {
                let (f, _) = build_wn(3, 2.0, n).unwrap();
                f.blocks().iter().all(|b| {
                    let (lo, _) = b.radius_range();
                    lo >= crate::lambda(n)
                })
            })
            .unwrap();
        assert_eq!(first_contained, 8);
        for n in 4..=10 {
            let (f, _) = build_wn(3, 2.0, n).unwrap();
            let worst = f
                .blocks()
                .iter()
                .map(|b| b.radius_range().1 / crate::lambda(n))
                .fold(0.0, f64::max);
            assert!(worst > 2.0 && worst < 2.7, "n={n}: max radius {worst}");
        }
    }

    #[test]
    fn disjointness_rules() {
        let b1 = UniformBlock::new(vec![1, 0, 0], vec![3, 0, 0], 1.0, 1.0, vec![0.0, 1.0, 0.0])
            .unwrap();
        let b2 = UniformBlock::new(vec![2, 0, 0], vec![4, 0, 0], 1.0, 1.0, vec![0.0, 1.0, 0.0])
            .unwrap();
        // Overlap is rejected by the strict constructor but allowed (with
        // additive coefficients) by the permissive one.
        assert!(matches!(
            BlockField::new_disjoint(3, vec![b1.clone(), b2.clone()]),
            Err(FluxError::BlockCollision { .. })
        ));
        let both = BlockField::new(3, vec![b1.clone(), b2]).unwrap();
        let sf = both.to_spectral(100).unwrap();
        // Modes 1..4 with the doubled interior 2..3: spectral and streamed
        // norms agree on the additive overlap.
        assert_eq!(sf.support_len(), 8);
        assert_abs_diff_eq!(both.l2_norm_sq(), sf.l2_norm_sq(), epsilon = 1e-13);
        // The zero frequency is never allowed.
        let zero = UniformBlock::new(
            vec![-1, 0, 0],
            vec![1, 0, 0],
            1.0,
            1.0,
            vec![0.0, 1.0, 0.0],
        )
        .unwrap();
        assert!(BlockField::new(3, vec![zero]).is_err());
        assert!(BlockField::new_disjoint(3, vec![b1]).is_ok());
    }

    #[test]
    fn streamed_l2_matches_spectral_l2() {
        let (field, _) = build_wn(3, 2.0, 4).unwrap();
        let sf = field.to_spectral(1 << 22).unwrap();
        assert!(sf.is_divergence_free());
        assert_abs_diff_eq!(
            field.l2_norm_sq(),
            sf.l2_norm_sq(),
            epsilon = 1e-12 * field.l2_norm_sq()
        );
        // Each of the three blocks is L2-normalized up to the projection
        // factor <= 1, so the total is O(1).
        let n2 = field.l2_norm_sq();
        assert!(n2 > 1.0 && n2 < 10.0, "unexpected norm {n2}");
    }

    #[test]
    fn pointwise_evaluation_matches_spectral_synthesis() {
        let (field, _) = build_wn(3, 2.0, 4).unwrap();
        let sf = field.to_spectral(1 << 22).unwrap();
        for (i, x) in [
            [0.3, 1.7, 4.1],
            [2.2, 0.9, 5.5],
            [6.1, 3.3, 0.2],
        ]
        .iter()
        .enumerate()
        {
            let ub = field.eval_point(x);
            let us = sf.eval_point(x);
            for c in 0..3 {
                assert_abs_diff_eq!(ub[c], us[c], epsilon = 1e-9);
            }
            assert!(i < 3);
        }
    }

    #[test]
    fn cube_field_geometry() {
        let p = CubeParams::new(2.0, 5, 7).unwrap();
        // Directions are orthogonal to their centers, so the projection
        // leaves them untouched at the cube centers.
        for j in 0..4 {
            let dot: f64 = CUBE_XI[j]
                .iter()
                .zip(&CUBE_E[j])
                .map(|(&a, &b)| a as f64 * b)
                .sum();
            assert_eq!(dot, 0.0);
        }
        let f = build_cube_field(&p).unwrap();
        assert_eq!(f.blocks().len(), 12);
        // Amplitudes decay like lambda_q^{-eps}; cube width grows.
        let a5 = f.blocks()[0].amp;
        let a6 = f.blocks()[4].amp;
        assert!(a6 < a5);
        // Starting a shell earlier makes neighboring cubes touch.
        let p4 = CubeParams::new(2.0, 4, 5).unwrap();
        assert!(matches!(
            build_cube_field(&p4),
            Err(FluxError::BlockCollision { .. })
        ));
    }

    #[test]
    fn shear_mode_is_a_pure_sine() {
        let b = shear_mode(vec![0, 2, 0], vec![1.0, 0.0, 0.0], 0.7).unwrap();
        let f = BlockField::new(3, vec![b]).unwrap();
        let sf = f.to_spectral(10).unwrap();
        assert_eq!(sf.support_len(), 2);
        let x = [0.4, 1.1, 2.9];
        let u = f.eval_point(&x);
        assert_abs_diff_eq!(u[0], 2.0 * 0.7 * (2.0 * x[1]).sin(), epsilon = 1e-13);
        assert_abs_diff_eq!(u[1], 0.0, epsilon = 1e-15);
        assert!(shear_mode(vec![1, 0, 0], vec![1.0, 0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn mc_lp_norm_reproduces_exact_sine_norms() {
        // |u| = 2 |sin(x2)| for a unit shear mode: L2 norm sqrt(2),
        // L4 norm (6)^{1/4}, L3 norm (32/(3 pi))^{1/3}.
        let b = shear_mode(vec![0, 1, 0], vec![1.0, 0.0, 0.0], 1.0).unwrap();
        let f = BlockField::new(3, vec![b]).unwrap();
        for (p, exact) in [
            (2.0, 2f64.sqrt()),
            (3.0, (32.0 / (3.0 * std::f64::consts::PI)).powf(1.0 / 3.0)),
            (4.0, 6f64.powf(0.25)),
        ] {
            let (est, rel_se) = f.mc_lp_norm(p, 40_000, 12345);
            assert!(rel_se < 0.02);
            assert!(
                (est / exact - 1.0).abs() < 4.0 * rel_se.max(0.005),
                "p={p}: est {est} vs exact {exact} (se {rel_se})"
            );
        }
    }

    #[test]
    fn mc_is_deterministic_across_thread_counts() {
        let b = shear_mode(vec![0, 1, 0], vec![1.0, 0.0, 0.0], 1.0).unwrap();
        let f = BlockField::new(3, vec![b]).unwrap();
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = pool1.install(|| f.mc_lp_norm(3.0, 10_000, 7));
        let b4 = pool4.install(|| f.mc_lp_norm(3.0, 10_000, 7));
        assert_eq!(a.0.to_bits(), b4.0.to_bits());
        assert_eq!(a.1.to_bits(), b4.1.to_bits());
    }
}
