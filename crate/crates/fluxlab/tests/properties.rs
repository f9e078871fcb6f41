//! Property tests for the structural invariants: the three flux routes agree,
//! off-support cutoffs transport nothing, the cutoff energy ledger closes,
//! and the config format round-trips.

use proptest::prelude::*;

use fluxlab::blocks::{leray_real, shear_mode, BlockField, UniformBlock};
use fluxlab::cli::RunConfig;
use fluxlab::flux::{shell_flux_blocks, shell_flux_inner_path, shell_flux_triple_sum, TriadOpts};
use fluxlab::profile::LpProfile;
use fluxlab::solutions::{build_shear_solution, Solution};

fn small_block_field(
    bases: Vec<Vec<i32>>,
    widths: Vec<Vec<i32>>,
    dirs: Vec<Vec<f64>>,
    amps: Vec<f64>,
) -> Option<BlockField> {
    let mut blocks = Vec::new();
    for i in 0..bases.len() {
        let hi: Vec<i32> = bases[i].iter().zip(&widths[i]).map(|(b, w)| b + w).collect();
        blocks.push(UniformBlock::new(bases[i].clone(), hi, 1.0, amps[i], dirs[i].clone()).ok()?);
    }
    BlockField::new_disjoint(3, blocks).ok()
}

fn base_strategy(lo: i32, hi: i32) -> impl Strategy<Value = Vec<i32>> {
    prop::collection::vec(lo..hi, 3)
}

fn dir_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 3)
        .prop_filter("nonzero direction", |d| d.iter().map(|x| x * x).sum::<f64>() > 1e-2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// The streamed block engine, the exact triple sum, and the
    /// convolution + inner-product route agree on random block fields.
    #[test]
    fn flux_routes_agree(
        b1 in base_strategy(3, 12),
        b2 in base_strategy(12, 24),
        d1 in dir_strategy(),
        d2 in dir_strategy(),
        a1 in 0.2f64..2.0,
        a2 in 0.2f64..2.0,
        q in 2i32..5,
    ) {
        let Some(field) = small_block_field(
            vec![b1, b2],
            vec![vec![2, 2, 2], vec![2, 2, 2]],
            vec![d1, d2],
            vec![a1, a2],
        ) else { return Ok(()); };
        let chi = LpProfile::new();
        let engine = shell_flux_blocks(&field, &chi, q, 8, &TriadOpts::default())?.value;
        let w = field.to_spectral(1 << 22)?;
        let oracle = shell_flux_triple_sum(&w, &chi, q, None)?;
        let inner = shell_flux_inner_path(&w, &chi, q, None)?;
        let scale = engine.abs().max(oracle.abs()).max(1.0);
        prop_assert!((engine - oracle).abs() <= 1e-9 * scale,
            "engine {engine} vs oracle {oracle}");
        prop_assert!((inner - oracle).abs() <= 1e-9 * scale,
            "inner {inner} vs oracle {oracle}");
    }

    /// A cutoff far above or below the stored support transports nothing,
    /// exactly (the triad weight is identically 0 or the symbol is flat 1).
    #[test]
    fn off_support_flux_is_exactly_zero(
        base in base_strategy(8, 16),
        dir in dir_strategy(),
        amp in 0.2f64..2.0,
    ) {
        let Some(field) = small_block_field(
            vec![base],
            vec![vec![3, 3, 3]],
            vec![dir],
            vec![amp],
        ) else { return Ok(()); };
        let chi = LpProfile::new();
        for q in [0, 1, 9, 10] {
            let est = shell_flux_blocks(&field, &chi, q, 8, &TriadOpts::default())?;
            prop_assert_eq!(est.value, 0.0);
        }
    }

    /// Every real mode built from the discrete Leray projection is
    /// orthogonal to its wavevector (divergence-free by construction).
    #[test]
    fn leray_mode_is_divergence_free(
        k in prop::collection::vec(-20i32..20, 3),
        dir in dir_strategy(),
    ) {
        prop_assume!(k.iter().any(|&x| x != 0));
        let v = leray_real(&k, &dir);
        let dot: f64 = v.iter().zip(&k).map(|(vi, &ki)| vi * ki as f64).sum();
        let klen = k.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        prop_assert!(dot.abs() <= 1e-12 * klen * 10.0, "k.v = {dot}");
    }

    /// The cutoff energy ledger closes on random windows of the shear
    /// solution: kinetic change + dissipation - work - transfer - defect = 0.
    #[test]
    fn shear_ledger_closes(
        q in 0i32..6,
        a in -0.95f64..0.9,
        span in 0.05f64..0.9,
    ) {
        let sol = build_shear_solution(
            3.0, 1.0, 4, vec![0, 0, 1], vec![1.0, 0.0, 0.0], 1e-11,
        ).unwrap();
        let (t0, t1) = (a, (a + span).min(0.99));
        let led = sol.ledger(q, t0, t1)?;
        let scale = led.dissipation.abs().max(led.work.abs())
            .max(led.phi_q.abs()).max(1e-9);
        prop_assert!(led.residual.abs() <= 1e-6 * scale,
            "residual {} at scale {}", led.residual, scale);
        prop_assert_eq!(led.pi_q, 0.0);
    }

    /// A single shear mode never transports energy across any cutoff.
    #[test]
    fn shear_mode_flux_vanishes(
        i in 0i32..5,
        q in 0i32..8,
        amp in 0.1f64..2.0,
    ) {
        let k = vec![0, 0, 1 << i];
        let block = shear_mode(k, vec![1.0, 0.0, 0.0], amp).unwrap();
        let field = BlockField::new_disjoint(3, vec![block]).unwrap();
        let chi = LpProfile::new();
        let est = shell_flux_blocks(&field, &chi, q, 8, &TriadOpts::default())?;
        prop_assert_eq!(est.value, 0.0);
    }

    /// Config text round-trips through parse, and unknown keys are errors.
    #[test]
    fn config_roundtrip(
        dim in 3usize..6,
        beta in 1.5f64..3.5,
        eps in 0.01f64..0.9,
        n in 0i32..5,
        extra in 1i32..6,
        seed in 0u64..1000,
        workers in 0usize..9,
    ) {
        let text = format!(
            "schema_version = 1\ndim = {dim}\nbeta = {beta}\neps = {eps}\n\
             n = {n}\nn_max = {}\nq_list = {n},{}\nseed = {seed}\n\
             workers = {workers}\n# trailing comment\n",
            n + extra, n + 1,
        );
        let cfg = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(cfg.dim, dim);
        prop_assert_eq!(cfg.beta, beta);
        prop_assert_eq!(cfg.n_max, n + extra);
        prop_assert_eq!(cfg.q_list, vec![n, n + 1]);
        prop_assert_eq!(cfg.seed, seed);
        prop_assert!(RunConfig::parse("no_such_key = 1\n").is_err());
        prop_assert!(RunConfig::parse("schema_version = 99\n").is_err());
    }

    /// The smooth cutoff profile is a plateau partition: 1 inside, 0 outside,
    /// monotone in between, and the shell symbols telescope.
    #[test]
    fn cutoff_profile_shape(r in 0.0f64..4.0, q in 0i32..10) {
        let chi = LpProfile::new();
        let v = chi.eval(r);
        prop_assert!((0.0..=1.0).contains(&v));
        if r <= 0.5 { prop_assert_eq!(v, 1.0); }
        if r >= 1.0 { prop_assert_eq!(v, 0.0); }
        let lo = chi.leq_symbol(r, q);
        let hi = chi.leq_symbol(r, q + 1);
        prop_assert!(hi >= lo - 1e-15, "leq symbol must grow with q");
    }
}
