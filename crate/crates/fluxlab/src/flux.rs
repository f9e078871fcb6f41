//! Shell-to-shell energy flux engine.
//!
//! Two independent code paths compute the same quantity:
//!
//! * an exact triple-sum oracle over the stored Fourier support of a
//!   [`SpectralField`] (quadratic in the support size, used for small fields
//!   and as ground truth), and
//! * a cluster engine that exploits the uniform-box structure of
//!   [`BlockField`]s: blocks are split into radial slabs, unordered slab
//!   multisets are enumerated with exact lattice feasibility tests, and each
//!   surviving multiset is reduced with a symmetrized per-triad kernel.
//!
//! The instantaneous flux through shell `q` of a real divergence-free field
//! `u` is
//!
//! ```text
//! flux(u, q) = i * sum_{k1+k2+k3=0} (u^(k1)·k2) (u^(k2)·u^(k3)) m(k3),
//! ```
//!
//! with `m(k) = chi(|k|/lambda_{q+1})^2` the squared low-pass symbol.  It
//! equals the inner product of `div(u ⊗ u)` with the twice-low-passed field.

use std::collections::{BTreeMap, HashMap};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::blocks::BlockField;
use crate::error::{FluxError, Result};
use crate::profile::LpProfile;
use crate::spectral::SpectralField;
use crate::util::CompensatedSum;

// ---------------------------------------------------------------------------
// Result and report types
// ---------------------------------------------------------------------------

/// A flux value together with a rigorous bound on the truncation error
/// introduced by skipped interaction multisets (zero when nothing was
/// skipped), and the number of lattice triads actually visited.
#[derive(Debug, Clone, Copy)]
pub struct FluxEstimate {
    pub value: f64,
    pub error_bound: f64,
    pub triads: u128,
}

/// One row of the cutoff energy balance over a time interval.
///
/// The identity `kinetic_end - kinetic_start + dissipation - work - pi_q -
/// phi_q = 0` holds exactly for every solution; `residual` records the
/// numerically achieved defect.
#[derive(Debug, Clone)]
pub struct FluxLedger {
    pub q: i32,
    pub t0: f64,
    pub t1: f64,
    pub kinetic_start: f64,
    pub kinetic_end: f64,
    pub dissipation: f64,
    pub work: f64,
    pub pi_q: f64,
    pub phi_q: f64,
    pub residual: f64,
    pub valid: bool,
}

/// One row of the energy-jump table: the transfer and work defects through
/// shell `q` around a fixed time, whose common limit is the energy jump.
#[derive(Debug, Clone)]
pub struct JumpRow {
    pub q: i32,
    pub pi_q: f64,
    pub phi_q: f64,
    pub sum: f64,
    pub target_jump: f64,
}

/// Leading-order prediction of the single-shell flux of one building block
/// from its box cardinalities: `2 * lambda * sqrt(|A| |B| / |C|)`.
pub fn flux_predictor(lambda: f64, a_count: f64, b_count: f64, c_count: f64) -> f64 {
    2.0 * lambda * (a_count * b_count / c_count).sqrt()
}

// ---------------------------------------------------------------------------
// Oracle path: exact triple sum over a stored spectral support
// ---------------------------------------------------------------------------

/// Exact triple-sum flux over the stored support of `u`.
///
/// Enumerates ordered support pairs `(k1, k2)`, looks up `k3 = -k1-k2`, and
/// accumulates the full summand.  Quadratic in the support size; guarded by
/// `pair_cap`.  The imaginary residue of the sum is checked against the
/// accumulated term magnitude.
pub fn shell_flux_triple_sum(
    u: &SpectralField,
    chi: &LpProfile,
    q: i32,
    pair_cap: Option<u128>,
) -> Result<f64> {
    if !u.is_divergence_free() {
        return Err(FluxError::NotDivergenceFree {
            key: Vec::new(),
            violation: f64::NAN,
        });
    }
    let support: Vec<(&Vec<i32>, &Vec<Complex64>)> = u.iter().collect();
    let n = support.len();
    let cap = pair_cap.unwrap_or(4_000_000_000);
    let needed = (n as u128) * (n as u128);
    if needed > cap {
        return Err(FluxError::PairBudgetExceeded { needed, cap });
    }
    let dim = u.dim();
    let mut index: HashMap<&[i32], usize> = HashMap::with_capacity(n);
    let mut lo = vec![i32::MAX; dim];
    let mut hi = vec![i32::MIN; dim];
    for (i, (k, _)) in support.iter().enumerate() {
        index.insert(k.as_slice(), i);
        for a in 0..dim {
            lo[a] = lo[a].min(k[a]);
            hi[a] = hi[a].max(k[a]);
        }
    }
    let lam = crate::lambda(q + 1);

    const CHUNK: usize = 64;
    let nchunks = n.div_ceil(CHUNK);
    let partials: Vec<(f64, f64, f64)> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut re = CompensatedSum::new();
            let mut im = CompensatedSum::new();
            let mut mag = CompensatedSum::new();
            let mut k3 = vec![0i32; dim];
            for i in (c * CHUNK)..(n.min((c + 1) * CHUNK)) {
                let (k1, v1) = support[i];
                'outer: for (k2, v2) in &support {
                    let mut r3sq = 0f64;
                    for a in 0..dim {
                        let z = -k1[a] - k2[a];
                        if z < lo[a] || z > hi[a] {
                            continue 'outer;
                        }
                        k3[a] = z;
                        r3sq += (z as f64) * (z as f64);
                    }
                    let Some(&j3) = index.get(k3.as_slice()) else {
                        continue;
                    };
                    let m = {
                        let s = chi.eval(r3sq.sqrt() / lam);
                        s * s
                    };
                    if m == 0.0 {
                        continue;
                    }
                    let v3 = support[j3].1;
                    let mut dot_a = Complex64::new(0.0, 0.0);
                    let mut dot_b = Complex64::new(0.0, 0.0);
                    for a in 0..dim {
                        dot_a += v1[a] * (k2[a] as f64);
                        dot_b += v2[a] * v3[a];
                    }
                    let c = dot_a * dot_b * m;
                    // multiply by i: (re, im) -> (-im, re)
                    re.add(-c.im);
                    im.add(c.re);
                    mag.add(c.norm());
                }
            }
            (re.value(), im.value(), mag.value())
        })
        .collect();
    let re = crate::util::pairwise_sum(&partials.iter().map(|p| p.0).collect::<Vec<_>>());
    let im = crate::util::pairwise_sum(&partials.iter().map(|p| p.1).collect::<Vec<_>>());
    let mag = partials.iter().map(|p| p.2).sum::<f64>();
    if im.abs() > 1e-10 * mag.max(1e-300) {
        return Err(FluxError::Malformed(format!(
            "flux imaginary residue {im:e} exceeds 1e-10 of term magnitude {mag:e}"
        )));
    }
    Ok(re)
}

/// Independent flux path: form the nonlinear coefficients `div(u ⊗ u)` by
/// direct convolution and take the inner product with the squared-low-pass
/// weighted field.
pub fn shell_flux_inner_path(
    u: &SpectralField,
    chi: &LpProfile,
    q: i32,
    pair_cap: Option<u128>,
) -> Result<f64> {
    let nl = u.nonlinear_coeffs(u, pair_cap)?;
    let weighted = u.apply_multiplier(|k| {
        let r = k.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        let s = chi.leq_symbol(r, q);
        s * s
    });
    nl.inner_product(&weighted)
}

// ---------------------------------------------------------------------------
// Cluster engine
// ---------------------------------------------------------------------------

/// Identifies the originating block of a cluster: `(source tag, 2 * block
/// index + mirror bit)`, where the block index refers to the canonical block
/// list of the source field.
pub type Label = (u16, u16);

/// Returns the label of the mirror image of `l`.
pub fn mirror_label(l: Label) -> Label {
    (l.0, l.1 ^ 1)
}

/// A box-shaped slab of one uniform block with densely stored per-mode
/// coefficient vectors (the real vector `v(k)` with `u^(k) = i v(k)`).
#[derive(Debug, Clone)]
pub struct Cluster {
    pub lo: Vec<i32>,
    pub hi: Vec<i32>,
    pub label: Label,
    stride: Vec<usize>,
    count: usize,
    /// Per-axis coefficient component arrays, each of length `count`,
    /// lexicographic over the box (last axis contiguous).
    v: Vec<Vec<f64>>,
    vmax: f64,
    kmax: f64,
    rmin: f64,
    rmax: f64,
}

impl Cluster {
    fn from_box(lo: Vec<i32>, hi: Vec<i32>, sign: f64, amp: f64, dir: &[f64], label: Label) -> Cluster {
        let dim = lo.len();
        let mut width = vec![0usize; dim];
        let mut count = 1usize;
        for a in 0..dim {
            width[a] = (hi[a] - lo[a] + 1) as usize;
            count *= width[a];
        }
        let mut stride = vec![1usize; dim];
        for a in (0..dim.saturating_sub(1)).rev() {
            stride[a] = stride[a + 1] * width[a + 1];
        }
        let mut v = vec![vec![0f64; count]; dim];
        let mut vmax = 0f64;
        let mut rmin = f64::INFINITY;
        let mut rmax = 0f64;
        let mut kmax = 0f64;
        let mut k = lo.clone();
        for idx in 0..count {
            let mut rem = idx;
            for a in 0..dim {
                k[a] = lo[a] + (rem / stride[a]) as i32;
                rem %= stride[a];
            }
            let pv = crate::blocks::leray_real(&k, dir);
            let mut nsq = 0f64;
            let mut rsq = 0f64;
            for a in 0..dim {
                let c = sign * amp * pv[a];
                v[a][idx] = c;
                nsq += c * c;
                rsq += (k[a] as f64) * (k[a] as f64);
            }
            vmax = vmax.max(nsq.sqrt());
            let r = rsq.sqrt();
            rmin = rmin.min(r);
            rmax = rmax.max(r);
            kmax = kmax.max(r);
        }
        Cluster { lo, hi, label, stride, count, v, vmax, kmax, rmin, rmax }
    }

    #[inline]
    fn index(&self, k: &[i32]) -> usize {
        let mut idx = 0usize;
        for a in 0..k.len() {
            idx += ((k[a] - self.lo[a]) as usize) * self.stride[a];
        }
        idx
    }

    fn coords(&self, idx: usize, k: &mut [i32]) {
        let mut rem = idx;
        for a in 0..k.len() {
            k[a] = self.lo[a] + (rem / self.stride[a]) as i32;
            rem %= self.stride[a];
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn radius_range(&self) -> (f64, f64) {
        (self.rmin, self.rmax)
    }

    /// Exact maximum of `|v(x) · k|` over all modes `x` of this cluster and
    /// all lattice points `k` of the given box.
    fn max_dot_with_box(&self, lo: &[i32], hi: &[i32]) -> f64 {
        let dim = lo.len();
        let mut best = 0f64;
        for idx in 0..self.count {
            let mut smax = 0f64;
            let mut smin = 0f64;
            for a in 0..dim {
                let va = self.v[a][idx];
                let c1 = va * (lo[a] as f64);
                let c2 = va * (hi[a] as f64);
                smax += c1.max(c2);
                smin += c1.min(c2);
            }
            best = best.max(smax.abs().max(smin.abs()));
        }
        best
    }
}

/// A source field for the cluster engine: a block field with an identifying
/// tag and a scalar multiplier applied to all its coefficients (used to feed
/// normalized blocks in).
pub struct BlockSource<'a> {
    pub tag: u16,
    pub field: &'a BlockField,
    pub scale: f64,
}

/// The full interaction domain of one or more block fields, broken into
/// radial slabs.  Mirror clusters are stored adjacent to their canonical
/// partner (`mirror index = index ^ 1`).
pub struct ClusterSet {
    pub dim: usize,
    clusters: Vec<Cluster>,
    /// Radius range per label, at block (pre-splitting) granularity.
    label_radii: BTreeMap<Label, (f64, f64)>,
}

impl ClusterSet {
    /// Builds the cluster set.  Each canonical block is split along its
    /// dominant axis (the axis of largest coordinate magnitude, which
    /// controls the mode radius) into slabs at most `slab_max` wide, so that
    /// slab radius ranges are tight enough for plateau pruning.
    pub fn build(sources: &[BlockSource<'_>], slab_max: i32) -> Result<ClusterSet> {
        if sources.is_empty() {
            return Err(FluxError::InvalidParameter {
                name: String::from("sources"),
                detail: String::from("at least one block field is required"),
            });
        }
        let dim = sources[0].field.dim();
        for s in sources {
            if s.field.dim() != dim {
                return Err(FluxError::DimensionMismatch { expected: dim, got: s.field.dim() });
            }
        }
        if slab_max < 1 {
            return Err(FluxError::InvalidParameter {
                name: String::from("slab_max"),
                detail: String::from("must be >= 1"),
            });
        }
        // Collect slab descriptors first, then materialize in parallel.
        struct Desc {
            lo: Vec<i32>,
            hi: Vec<i32>,
            sign: f64,
            amp: f64,
            dir: Vec<f64>,
            label: Label,
        }
        let mut descs: Vec<Desc> = Vec::new();
        for src in sources {
            for (bi, blk) in src.field.blocks().iter().enumerate() {
                let axis = (0..dim)
                    .max_by_key(|&a| blk.lo[a].abs().max(blk.hi[a].abs()))
                    .unwrap();
                let width = blk.hi[axis] - blk.lo[axis] + 1;
                let nslabs = ((width + slab_max - 1) / slab_max).max(1);
                for s in 0..nslabs {
                    let alo = blk.lo[axis] + s * width / nslabs;
                    let ahi = blk.lo[axis] + (s + 1) * width / nslabs - 1;
                    if ahi < alo {
                        continue;
                    }
                    let mut lo = blk.lo.clone();
                    let mut hi = blk.hi.clone();
                    lo[axis] = alo;
                    hi[axis] = ahi;
                    // Canonical slab, then its mirror image.
                    descs.push(Desc {
                        lo: lo.clone(),
                        hi: hi.clone(),
                        sign: blk.sign,
                        amp: src.scale * blk.amp,
                        dir: blk.dir.clone(),
                        label: (src.tag, (bi as u16) * 2),
                    });
                    let mlo: Vec<i32> = hi.iter().map(|&x| -x).collect();
                    let mhi: Vec<i32> = lo.iter().map(|&x| -x).collect();
                    descs.push(Desc {
                        lo: mlo,
                        hi: mhi,
                        sign: -blk.sign,
                        amp: src.scale * blk.amp,
                        dir: blk.dir.clone(),
                        label: (src.tag, (bi as u16) * 2 + 1),
                    });
                }
            }
        }
        let clusters: Vec<Cluster> = descs
            .par_iter()
            .map(|d| Cluster::from_box(d.lo.clone(), d.hi.clone(), d.sign, d.amp, &d.dir, d.label))
            .collect();
        let mut label_radii: BTreeMap<Label, (f64, f64)> = BTreeMap::new();
        for c in &clusters {
            let e = label_radii.entry(c.label).or_insert((f64::INFINITY, 0.0));
            e.0 = e.0.min(c.rmin);
            e.1 = e.1.max(c.rmax);
        }
        Ok(ClusterSet { dim, clusters, label_radii })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn mode_count(&self) -> usize {
        self.clusters.iter().map(|c| c.count).sum()
    }
}

// ---------------------------------------------------------------------------
// Triad summation over a cluster set
// ---------------------------------------------------------------------------

/// Options for [`triad_sums`].
#[derive(Debug, Clone, Copy)]
pub struct TriadOpts {
    /// Maximum number of lattice triads a single multiset may require.  A
    /// multiset above this budget is skipped if its rigorous contribution
    /// bound is negligible (see `skip_tol`), otherwise the call fails with
    /// `PairBudgetExceeded`.
    pub pair_cap: u128,
    /// A multiset over budget is skipped when its rigorous bound is at most
    /// `skip_tol` times the summed bound of all within-budget multisets; the
    /// skipped bound is accumulated into the reported error bound.
    pub skip_tol: f64,
    /// Modes per parallel work chunk (fixed, for deterministic reduction).
    pub chunk: usize,
}

impl Default for TriadOpts {
    fn default() -> Self {
        TriadOpts { pair_cap: 500_000_000_000, skip_tol: 0.05, chunk: 4096 }
    }
}

/// Plain and time-weighted sums attributed to one label multiset.
#[derive(Debug, Clone, Copy, Default)]
pub struct PairSums {
    pub plain: f64,
    pub weighted: f64,
}

/// Output of [`triad_sums`]: flux contributions keyed by the sorted label
/// triple of the interacting blocks.  Each value already includes the mirror
/// image of the multiset, so summing all values gives the total flux.
#[derive(Debug, Clone, Default)]
pub struct TriadSums {
    pub by_label: BTreeMap<[Label; 3], PairSums>,
    pub skipped_bound: f64,
    pub skipped_weighted_bound: f64,
    pub triads_done: u128,
}

impl TriadSums {
    pub fn total(&self) -> f64 {
        let vals: Vec<f64> = self.by_label.values().map(|p| p.plain).collect();
        crate::util::pairwise_sum(&vals)
    }

    pub fn weighted_total(&self) -> f64 {
        let vals: Vec<f64> = self.by_label.values().map(|p| p.weighted).collect();
        crate::util::pairwise_sum(&vals)
    }

    pub fn total_where<F: Fn(&[Label; 3]) -> bool>(&self, pred: F) -> f64 {
        let vals: Vec<f64> = self
            .by_label
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, p)| p.plain)
            .collect();
        crate::util::pairwise_sum(&vals)
    }
}

/// Trilinear interpolation table for a smooth symmetric time weight
/// `J(r1, r2, r3)` over the radius ranges of one block triple.
struct JTable {
    lo: [f64; 3],
    step: [f64; 3],
    n: [usize; 3],
    vals: Vec<f64>,
}

impl JTable {
    fn build(ranges: [(f64, f64); 3], f: &(dyn Fn(f64, f64, f64) -> f64 + Sync)) -> JTable {
        let mut lo = [0f64; 3];
        let mut step = [0f64; 3];
        let mut n = [1usize; 3];
        for a in 0..3 {
            let (rlo, rhi) = ranges[a];
            lo[a] = rlo;
            let range = (rhi - rlo).max(0.0);
            if range < 1e-12 {
                n[a] = 1;
                step[a] = 0.0;
            } else {
                n[a] = (((range / 4.0).ceil() as usize) + 1).clamp(2, 33);
                step[a] = range / ((n[a] - 1) as f64);
            }
        }
        let mut vals = vec![0f64; n[0] * n[1] * n[2]];
        for i in 0..n[0] {
            let r0 = lo[0] + step[0] * i as f64;
            for j in 0..n[1] {
                let r1 = lo[1] + step[1] * j as f64;
                for l in 0..n[2] {
                    let r2 = lo[2] + step[2] * l as f64;
                    vals[(i * n[1] + j) * n[2] + l] = f(r0, r1, r2);
                }
            }
        }
        JTable { lo, step, n, vals }
    }

    #[inline]
    fn axis(&self, a: usize, r: f64) -> (usize, f64) {
        if self.n[a] == 1 {
            return (0, 0.0);
        }
        let t = ((r - self.lo[a]) / self.step[a]).clamp(0.0, (self.n[a] - 1) as f64);
        let i = (t.floor() as usize).min(self.n[a] - 2);
        (i, t - i as f64)
    }

    #[inline]
    fn eval(&self, r0: f64, r1: f64, r2: f64) -> f64 {
        let (i0, f0) = self.axis(0, r0);
        let (i1, f1) = self.axis(1, r1);
        let (i2, f2) = self.axis(2, r2);
        let n1 = self.n[1];
        let n2 = self.n[2];
        let s1 = if self.n[1] > 1 { n2 } else { 0 };
        let s0 = if self.n[0] > 1 { n1 * n2 } else { 0 };
        let s2 = usize::from(self.n[2] > 1);
        let base = (i0 * n1 + i1) * n2 + i2;
        let v = &self.vals;
        let c00 = v[base] * (1.0 - f2) + v[base + s2] * f2;
        let c01 = v[base + s1] * (1.0 - f2) + v[base + s1 + s2] * f2;
        let c10 = v[base + s0] * (1.0 - f2) + v[base + s0 + s2] * f2;
        let c11 = v[base + s0 + s1] * (1.0 - f2) + v[base + s0 + s1 + s2] * f2;
        let c0 = c00 * (1.0 - f1) + c01 * f1;
        let c1 = c10 * (1.0 - f1) + c11 * f1;
        c0 * (1.0 - f0) + c1 * f0
    }
}

/// Per-mode squared low-pass weight class of one cluster for a given `q`.
#[derive(Debug, Clone, Copy)]
struct MRange {
    mlo: f64,
    mhi: f64,
}

fn m_range(chi: &LpProfile, q: i32, rmin: f64, rmax: f64) -> MRange {
    let hi = chi.leq_symbol(rmin, q);
    let lo = chi.leq_symbol(rmax, q);
    MRange { mlo: lo * lo, mhi: hi * hi }
}

struct Plan {
    tri: [usize; 3],
    /// Which of `tri` is the lookup target (entity 3).
    r_slot: usize,
    triads: u128,
    jt: Option<usize>,
}

/// Exact number of lattice triads `x + y + z = 0` with `x`, `y`, `z` in the
/// three boxes (separable per axis).
fn exact_triad_count(a: &Cluster, b: &Cluster, c: &Cluster) -> u128 {
    let dim = a.lo.len();
    let mut total: u128 = 1;
    for ax in 0..dim {
        let mut cnt: u128 = 0;
        for x in a.lo[ax]..=a.hi[ax] {
            // y in b, z = -x-y in c  =>  y in [-c.hi - x, -c.lo - x]
            let ylo = b.lo[ax].max(-c.hi[ax] - x);
            let yhi = b.hi[ax].min(-c.lo[ax] - x);
            if yhi >= ylo {
                cnt += (yhi - ylo + 1) as u128;
            }
        }
        if cnt == 0 {
            return 0;
        }
        total = total.saturating_mul(cnt);
    }
    total
}

fn feasible(a: &Cluster, b: &Cluster, c: &Cluster) -> bool {
    for ax in 0..a.lo.len() {
        let lo = a.lo[ax] + b.lo[ax] + c.lo[ax];
        let hi = a.hi[ax] + b.hi[ax] + c.hi[ax];
        if lo > 0 || hi < 0 {
            return false;
        }
    }
    true
}

/// Rigorous bound on the absolute multiset contribution: triad count times
/// the maximal per-triad kernel magnitude.  `g` factors use exact per-cluster
/// scans of `|v(x) · k|` over the partner box when `sharp` is set, otherwise
/// the cheap product of norms.
fn multiset_bound(c1: &Cluster, c2: &Cluster, c3: &Cluster, m: &[MRange; 3], triads: u128, sharp: bool) -> f64 {
    let dm = m.iter().map(|r| r.mhi).fold(0.0, f64::max) - m.iter().map(|r| r.mlo).fold(f64::INFINITY, f64::min);
    if dm <= 0.0 {
        return 0.0;
    }
    let (g1, g2, g3) = if sharp {
        (
            c1.max_dot_with_box(&c2.lo, &c2.hi),
            c2.max_dot_with_box(&c3.lo, &c3.hi),
            c3.max_dot_with_box(&c1.lo, &c1.hi),
        )
    } else {
        (c1.vmax * c2.kmax, c2.vmax * c3.kmax, c3.vmax * c1.kmax)
    };
    let d23 = c2.vmax * c3.vmax;
    let d13 = c1.vmax * c3.vmax;
    let d12 = c1.vmax * c2.vmax;
    2.0 * (triads as f64) * dm * (g1 * d23 + g2 * d13 + g3 * d12)
}

/// Sums the symmetrized triad kernel over every unordered interaction
/// multiset of the cluster set, for shell `q`.
///
/// Per triad of modes `x, y, z` with `x + y + z = 0`, coefficient vectors
/// `v_i` and squared low-pass weights `m_i`, the kernel (the sum of the
/// original summand over all six role orderings) is
///
/// ```text
/// F = (v1·k2)(v2·v3)(m3 - m2) + (v2·k3)(v1·v3)(m1 - m3) + (v3·k1)(v1·v2)(m2 - m1),
/// ```
///
/// which vanishes identically when the three weights agree — this makes
/// plateau pruning exact.  Unordered multisets of clusters are enumerated
/// once; ordered pair loops with a third-box lookup produce each mode triple
/// a fixed number of times, corrected by the multiset symmetry divisor
/// (1, 2, or 6).  Mirror-image multisets are folded in with a factor 2.
///
/// `time_weight`, when present, is a smooth symmetric function of the three
/// mode radii; a second accumulator sums `F * J(r1, r2, r3)` with `J`
/// evaluated through a per-block-triple interpolation table.
pub fn triad_sums(
    set: &ClusterSet,
    chi: &LpProfile,
    q: i32,
    time_weight: Option<&(dyn Fn(f64, f64, f64) -> f64 + Sync)>,
    opts: &TriadOpts,
) -> Result<TriadSums> {
    let cl = &set.clusters;
    let nc = cl.len();
    let mranges: Vec<MRange> = cl.iter().map(|c| m_range(chi, q, c.rmin, c.rmax)).collect();
    let is_const: Vec<bool> = mranges.iter().map(|r| r.mhi - r.mlo == 0.0).collect();

    // Phase 1: enumerate feasible canonical multisets.
    let candidates: Vec<[usize; 3]> = (0..nc)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut v = Vec::new();
            for j in i..nc {
                for l in j..nc {
                    let (ci, cj, clu) = (&cl[i], &cl[j], &cl[l]);
                    if !feasible(ci, cj, clu) {
                        continue;
                    }
                    // Mirror canonicalization (mirror cluster = index ^ 1).
                    let mut m = [i ^ 1, j ^ 1, l ^ 1];
                    m.sort_unstable();
                    if m < [i, j, l] {
                        continue;
                    }
                    debug_assert!(m != [i, j, l]);
                    // Exact plateau pruning: all three weights constant and
                    // equal makes the kernel vanish identically.
                    if is_const[i]
                        && is_const[j]
                        && is_const[l]
                        && mranges[i].mlo == mranges[j].mlo
                        && mranges[j].mlo == mranges[l].mlo
                    {
                        continue;
                    }
                    v.push([i, j, l]);
                }
            }
            v
        })
        .collect();

    // Budget decisions need a scale; use the summed cheap bound of all
    // within-budget multisets.
    let with_counts: Vec<([usize; 3], u128)> = candidates
        .par_iter()
        .map(|&t| {
            let triads = exact_triad_count(&cl[t[0]], &cl[t[1]], &cl[t[2]]);
            (t, triads)
        })
        .filter(|&(_, n)| n > 0)
        .collect();
    let scale: f64 = with_counts
        .par_iter()
        .filter(|&&(_, n)| n <= opts.pair_cap)
        .map(|&(t, n)| {
            let m = [mranges[t[0]], mranges[t[1]], mranges[t[2]]];
            multiset_bound(&cl[t[0]], &cl[t[1]], &cl[t[2]], &m, n, false)
        })
        .sum();

    let mut plans: Vec<Plan> = Vec::new();
    let mut skipped_bound = 0f64;
    let mut skipped_weighted = 0f64;
    // Lazily built J tables, keyed by the slot-ordered label triple.
    let mut jt_index: BTreeMap<[Label; 3], usize> = BTreeMap::new();
    let mut jt_specs: Vec<[Label; 3]> = Vec::new();
    for &(t, triads) in &with_counts {
        let m = [mranges[t[0]], mranges[t[1]], mranges[t[2]]];
        if triads > opts.pair_cap {
            let bound = multiset_bound(&cl[t[0]], &cl[t[1]], &cl[t[2]], &m, triads, true);
            let wbound = match time_weight {
                Some(f) => bound * f(cl[t[0]].rmin, cl[t[1]].rmin, cl[t[2]].rmin).abs(),
                None => 0.0,
            };
            if bound <= opts.skip_tol * scale {
                skipped_bound += bound;
                skipped_weighted += wbound;
                continue;
            }
            return Err(FluxError::PairBudgetExceeded { needed: triads, cap: opts.pair_cap });
        }
        // Lookup target: the largest cluster.
        let r_slot = (0..3).max_by_key(|&s| cl[t[s]].count).unwrap();
        let jt = time_weight.map(|_| {
            let labels = [cl[t[0]].label, cl[t[1]].label, cl[t[2]].label];
            let slot_labels = assign_slot_labels(&labels, r_slot);
            *jt_index.entry(slot_labels).or_insert_with(|| {
                jt_specs.push(slot_labels);
                jt_specs.len() - 1
            })
        });
        plans.push(Plan { tri: t, r_slot, triads, jt });
    }

    // Phase 2: materialize weight arrays and J tables.
    let mut needed = vec![false; nc];
    for p in &plans {
        for &c in &p.tri {
            needed[c] = true;
            needed[c ^ 1] = true; // mirror is read by the kernel
        }
    }
    let marrays: Vec<Option<Vec<f64>>> = (0..nc)
        .into_par_iter()
        .map(|ci| {
            if !needed[ci] {
                return None;
            }
            let c = &cl[ci];
            let dim = set.dim;
            let mut arr = vec![0f64; c.count];
            let mut k = vec![0i32; dim];
            for (idx, slot) in arr.iter_mut().enumerate() {
                c.coords(idx, &mut k);
                let r = k.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                let s = chi.leq_symbol(r, q);
                *slot = s * s;
            }
            Some(arr)
        })
        .collect();
    let jtables: Vec<JTable> = match time_weight {
        Some(f) => jt_specs
            .par_iter()
            .map(|labels| {
                let ranges = [
                    set.label_radii[&labels[0]],
                    set.label_radii[&labels[1]],
                    set.label_radii[&labels[2]],
                ];
                JTable::build(ranges, f)
            })
            .collect(),
        None => Vec::new(),
    };

    // Phase 3: run kernels.
    let mut out = TriadSums {
        skipped_bound,
        skipped_weighted_bound: skipped_weighted,
        ..TriadSums::default()
    };
    for p in &plans {
        let r = p.tri[p.r_slot];
        let rest: Vec<usize> = (0..3).filter(|&s| s != p.r_slot).map(|s| p.tri[s]).collect();
        let (pi, qi) = (rest[0], rest[1]);
        let divisor = if p.tri[0] == p.tri[1] && p.tri[1] == p.tri[2] {
            6.0
        } else if p.tri[0] == p.tri[1] || p.tri[1] == p.tri[2] {
            2.0
        } else {
            1.0
        };
        let jt = p.jt.map(|ix| &jtables[ix]);
        let (plain, weighted) = run_multiset(
            set,
            pi,
            qi,
            r,
            &marrays,
            jt,
            opts.chunk,
        );
        // Mirror fold (x2), symmetry divisor, and the sign flip from reading
        // entity 3 through the mirror of the lookup cluster.
        let factor = -2.0 / divisor;
        let mut key = [cl[p.tri[0]].label, cl[p.tri[1]].label, cl[p.tri[2]].label];
        key.sort_unstable();
        let e = out.by_label.entry(key).or_default();
        e.plain += factor * plain;
        e.weighted += factor * weighted;
        out.triads_done += p.triads;
    }
    Ok(out)
}

/// Orders the three block labels by kernel slot: the two loop slots keep
/// enumeration order, the lookup slot goes third.
fn assign_slot_labels(labels: &[Label; 3], r_slot: usize) -> [Label; 3] {
    let mut out = [labels[0]; 3];
    let mut w = 0;
    for (s, &l) in labels.iter().enumerate() {
        if s != r_slot {
            out[w] = l;
            w += 1;
        }
    }
    out[2] = labels[r_slot];
    out
}

/// Sums the kernel over ordered pairs `(x in P, y in Q)` with the third mode
/// looked up in cluster `R`.  Entity 3 is read through the mirror cluster of
/// `R` (stored at `r ^ 1`) so that all three memory streams advance with
/// unit stride; this flips the sign of every kernel term exactly once, which
/// the caller undoes.
fn run_multiset(
    set: &ClusterSet,
    p: usize,
    q: usize,
    r: usize,
    marrays: &[Option<Vec<f64>>],
    jt: Option<&JTable>,
    chunk: usize,
) -> (f64, f64) {
    let pc = &set.clusters[p];
    let qc = &set.clusters[q];
    let mc = &set.clusters[r ^ 1]; // mirror of the lookup cluster
    let mp = marrays[p].as_deref().expect("weight array");
    let mq = marrays[q].as_deref().expect("weight array");
    let mm = marrays[r ^ 1].as_deref().expect("weight array");
    let nchunks = pc.count.div_ceil(chunk);
    let partials: Vec<(f64, f64)> = (0..nchunks)
        .into_par_iter()
        .map(|ci| {
            if set.dim == 3 {
                kernel_chunk3(pc, qc, mc, mp, mq, mm, jt, ci * chunk, pc.count.min((ci + 1) * chunk))
            } else {
                kernel_chunk_nd(set.dim, pc, qc, mc, mp, mq, mm, jt, ci * chunk, pc.count.min((ci + 1) * chunk))
            }
        })
        .collect();
    let plain = crate::util::pairwise_sum(&partials.iter().map(|p| p.0).collect::<Vec<_>>());
    let weighted = crate::util::pairwise_sum(&partials.iter().map(|p| p.1).collect::<Vec<_>>());
    (plain, weighted)
}

#[allow(clippy::too_many_arguments)]
fn kernel_chunk3(
    pc: &Cluster,
    qc: &Cluster,
    mc: &Cluster,
    mp: &[f64],
    mq: &[f64],
    mm: &[f64],
    jt: Option<&JTable>,
    ix0: usize,
    ix1: usize,
) -> (f64, f64) {
    let mut acc = CompensatedSum::new();
    let mut accw = CompensatedSum::new();
    let mut x = [0i32; 3];
    for ix in ix0..ix1 {
        pc.coords(ix, &mut x);
        let v1 = [pc.v[0][ix], pc.v[1][ix], pc.v[2][ix]];
        let m1 = mp[ix];
        let x0f = x[0] as f64;
        let x1f = x[1] as f64;
        let x2f = x[2] as f64;
        let r1 = (x0f * x0f + x1f * x1f + x2f * x2f).sqrt();
        // Per-axis bounds on y such that x + y lies in the mirror box.
        let mut ylo = [0i32; 3];
        let mut yhi = [0i32; 3];
        let mut empty = false;
        for a in 0..3 {
            ylo[a] = qc.lo[a].max(mc.lo[a] - x[a]);
            yhi[a] = qc.hi[a].min(mc.hi[a] - x[a]);
            if ylo[a] > yhi[a] {
                empty = true;
                break;
            }
        }
        if empty {
            continue;
        }
        for y0 in ylo[0]..=yhi[0] {
            let y0f = y0 as f64;
            let s0 = x0f + y0f;
            let z0 = -s0;
            for y1 in ylo[1]..=yhi[1] {
                let y1f = y1 as f64;
                let s1 = x1f + y1f;
                let z1 = -s1;
                let len = (yhi[2] - ylo[2] + 1) as usize;
                let iy = qc.index(&[y0, y1, ylo[2]]);
                let is = mc.index(&[x[0] + y0, x[1] + y1, x[2] + ylo[2]]);
                let qv0 = &qc.v[0][iy..iy + len];
                let qv1 = &qc.v[1][iy..iy + len];
                let qv2 = &qc.v[2][iy..iy + len];
                let mv0 = &mc.v[0][is..is + len];
                let mv1 = &mc.v[1][is..is + len];
                let mv2 = &mc.v[2][is..is + len];
                let mq_s = &mq[iy..iy + len];
                let mm_s = &mm[is..is + len];
                let ylo2f = ylo[2] as f64;
                let g1b = v1[0] * y0f + v1[1] * y1f + v1[2] * ylo2f;
                let z2b = -(x2f + ylo2f);
                let mut run = 0f64;
                let mut runw = 0f64;
                for t in 0..len {
                    let tf = t as f64;
                    let v20 = qv0[t];
                    let v21 = qv1[t];
                    let v22 = qv2[t];
                    let w0 = mv0[t];
                    let w1 = mv1[t];
                    let w2 = mv2[t];
                    let g1 = g1b + v1[2] * tf;
                    let z2 = z2b - tf;
                    let g2 = v20 * z0 + v21 * z1 + v22 * z2;
                    let g3 = w0 * x0f + w1 * x1f + w2 * x2f;
                    let d23 = v20 * w0 + v21 * w1 + v22 * w2;
                    let d13 = v1[0] * w0 + v1[1] * w1 + v1[2] * w2;
                    let d12 = v1[0] * v20 + v1[1] * v21 + v1[2] * v22;
                    let m2 = mq_s[t];
                    let m3 = mm_s[t];
                    let f6 = g1 * d23 * (m3 - m2) + g2 * d13 * (m1 - m3) + g3 * d12 * (m2 - m1);
                    run += f6;
                    if let Some(table) = jt {
                        let y2 = ylo2f + tf;
                        let r2 = (y0f * y0f + y1f * y1f + y2 * y2).sqrt();
                        let r3 = (s0 * s0 + s1 * s1 + z2 * z2).sqrt();
                        runw += f6 * table.eval(r1, r2, r3);
                    }
                }
                acc.add(run);
                accw.add(runw);
            }
        }
    }
    (acc.value(), accw.value())
}

#[allow(clippy::too_many_arguments)]
fn kernel_chunk_nd(
    dim: usize,
    pc: &Cluster,
    qc: &Cluster,
    mc: &Cluster,
    mp: &[f64],
    mq: &[f64],
    mm: &[f64],
    jt: Option<&JTable>,
    ix0: usize,
    ix1: usize,
) -> (f64, f64) {
    let mut acc = CompensatedSum::new();
    let mut accw = CompensatedSum::new();
    let mut x = vec![0i32; dim];
    let mut y = vec![0i32; dim];
    let mut s = vec![0i32; dim];
    for ix in ix0..ix1 {
        pc.coords(ix, &mut x);
        let m1 = mp[ix];
        let r1 = x.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt();
        let mut ylo = vec![0i32; dim];
        let mut yhi = vec![0i32; dim];
        let mut empty = false;
        for a in 0..dim {
            ylo[a] = qc.lo[a].max(mc.lo[a] - x[a]);
            yhi[a] = qc.hi[a].min(mc.hi[a] - x[a]);
            if ylo[a] > yhi[a] {
                empty = true;
                break;
            }
        }
        if empty {
            continue;
        }
        y.copy_from_slice(&ylo);
        'iter: loop {
            for a in 0..dim {
                s[a] = x[a] + y[a];
            }
            let iy = qc.index(&y);
            let is = mc.index(&s);
            let mut g1 = 0f64;
            let mut g2 = 0f64;
            let mut g3 = 0f64;
            let mut d23 = 0f64;
            let mut d13 = 0f64;
            let mut d12 = 0f64;
            let mut r2sq = 0f64;
            let mut r3sq = 0f64;
            for a in 0..dim {
                let v1a = pc.v[a][ix];
                let v2a = qc.v[a][iy];
                let wa = mc.v[a][is];
                let ya = y[a] as f64;
                let za = -(s[a] as f64);
                g1 += v1a * ya;
                g2 += v2a * za;
                g3 += wa * (x[a] as f64);
                d23 += v2a * wa;
                d13 += v1a * wa;
                d12 += v1a * v2a;
                r2sq += ya * ya;
                r3sq += za * za;
            }
            let m2 = mq[iy];
            let m3 = mm[is];
            let f6 = g1 * d23 * (m3 - m2) + g2 * d13 * (m1 - m3) + g3 * d12 * (m2 - m1);
            acc.add(f6);
            if let Some(table) = jt {
                accw.add(f6 * table.eval(r1, r2sq.sqrt(), r3sq.sqrt()));
            }
            // advance lexicographically
            let mut a = dim;
            loop {
                if a == 0 {
                    break 'iter;
                }
                a -= 1;
                if y[a] < yhi[a] {
                    y[a] += 1;
                    for b in (a + 1)..dim {
                        y[b] = ylo[b];
                    }
                    break;
                }
            }
        }
    }
    (acc.value(), accw.value())
}

// ---------------------------------------------------------------------------
// Convenience wrappers
// ---------------------------------------------------------------------------

/// Single-shell flux of a block field through the cluster engine.
pub fn shell_flux_blocks(
    field: &BlockField,
    chi: &LpProfile,
    q: i32,
    slab_max: i32,
    opts: &TriadOpts,
) -> Result<FluxEstimate> {
    let set = ClusterSet::build(&[BlockSource { tag: 0, field, scale: 1.0 }], slab_max)?;
    cluster_flux(&set, chi, q, opts)
}

/// Total flux of a prebuilt cluster set at shell `q`.
pub fn cluster_flux(set: &ClusterSet, chi: &LpProfile, q: i32, opts: &TriadOpts) -> Result<FluxEstimate> {
    let sums = triad_sums(set, chi, q, None, opts)?;
    Ok(FluxEstimate {
        value: sums.total(),
        error_bound: sums.skipped_bound,
        triads: sums.triads_done,
    })
}
