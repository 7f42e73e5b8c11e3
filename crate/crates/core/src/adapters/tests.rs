use proptest::prelude::*;

use super::*;
use crate::gradcheck;

fn host_shape(kind: AdapterKind, d: usize) -> Vec<usize> {
    if kind.is_2d() {
        vec![d, 4, 6]
    } else {
        vec![7, d]
    }
}

fn randomize_up(m: &mut AdapterModule, seed: u64) {
    let mut rng = RngState::new(seed);
    for (name, t) in m.params_mut() {
        if name.starts_with("up.") {
            let fresh = Tensor::randn(t.shape(), 0.3, &mut rng);
            t.data_mut().copy_from_slice(fresh.data());
        }
    }
}

/// Closed-form counts written out per architecture; independent of
/// `param_shapes`.
fn formula_count(kind: AdapterKind, d: usize, b: usize) -> usize {
    match kind {
        AdapterKind::LinearBottleneck => 2 * d * b + b + d,
        AdapterKind::ConvResidualSE => {
            let r = (b / 4).max(1);
            3 * d * b + b + 3 * (3 * b * b + b) + (b * r + r + r * b + b) + 3 * b * d + d
        }
        AdapterKind::ConvResidual2D => 9 * d * b + b + 3 * (9 * b * b + b) + 9 * b * d + d,
        AdapterKind::TransformerAdapter | AdapterKind::TransformerAdapter2D => {
            let down = d * b + b;
            let norms = 4 * b;
            let attn = 4 * (b * b + b);
            let ffn = b * 4 * b + 4 * b + 4 * b * b + b;
            let up = b * d + d;
            down + norms + attn + ffn + up
        }
    }
}

#[test]
fn fresh_adapters_are_exact_identities() {
    for kind in AdapterKind::ALL {
        for b in [1, 4, 9] {
            let m = AdapterModule::build(&AdapterSpec::new(kind, 8, b), &mut RngState::new(3)).unwrap();
            let x = Tensor::randn(&host_shape(kind, 8), 1.0, &mut RngState::new(4));
            assert_eq!(m.apply(&x).unwrap(), x, "{kind} b={b}");
        }
    }
}

#[test]
fn linear_count_example() {
    let m = build_linear_adapter(
        &AdapterSpec::new(AdapterKind::LinearBottleneck, 64, 16),
        &mut RngState::new(0),
    )
    .unwrap();
    assert_eq!(count_parameters(&m), 2128);
    let walked: usize = m.params().values().map(|t| t.data().len()).sum();
    assert_eq!(walked, 2128);
}

#[test]
fn counts_match_closed_forms() {
    for kind in AdapterKind::ALL {
        for d in [8, 32, 64] {
            for b in [1, 2, 3, 4, 7, 16, 64, 100] {
                let spec = AdapterSpec::new(kind, d, b);
                let m = AdapterModule::build(&spec, &mut RngState::new(1)).unwrap();
                assert_eq!(m.parameter_count(), formula_count(kind, d, b), "{kind} d={d} b={b}");
                assert_eq!(count_for_spec(&spec), m.parameter_count());
            }
        }
    }
}

#[test]
fn builders_reject_wrong_kinds() {
    let mut rng = RngState::new(0);
    let lin = AdapterSpec::new(AdapterKind::LinearBottleneck, 8, 4);
    let conv = AdapterSpec::new(AdapterKind::ConvResidualSE, 8, 4);
    let tr = AdapterSpec::new(AdapterKind::TransformerAdapter2D, 8, 4);
    assert!(matches!(build_linear_adapter(&conv, &mut rng), Err(LabError::Config(_))));
    assert!(matches!(build_conv_adapter(&tr, &mut rng), Err(LabError::Config(_))));
    assert!(matches!(build_transformer_adapter(&lin, &mut rng), Err(LabError::Config(_))));
    assert!(build_conv_adapter(&AdapterSpec::new(AdapterKind::ConvResidual2D, 8, 4), &mut rng).is_ok());
}

#[test]
fn spec_validation() {
    let mut s = AdapterSpec::new(AdapterKind::TransformerAdapter, 8, 6);
    assert_eq!(s.num_heads, 2);
    assert!(s.validate().is_ok());
    s.num_heads = 4;
    assert!(s.validate().is_err());
    let mut s = AdapterSpec::new(AdapterKind::LinearBottleneck, 8, 4);
    s.dropout_p = 1.0;
    assert!(s.validate().is_err());
    let mut s = AdapterSpec::new(AdapterKind::ConvResidual2D, 8, 4);
    s.stereo_expand = true;
    assert!(s.validate().is_err());
}

#[test]
fn se_gate_on_zero_map_is_one_half() {
    let m = AdapterModule::build(&AdapterSpec::new(AdapterKind::ConvResidualSE, 8, 8), &mut RngState::new(2)).unwrap();
    let mut g = Graph::new();
    let p = m.bind(&mut g);
    let h = g.leaf(&Tensor::zeros(&[8, 10]));
    let gate = m.se_gate(&mut g, &p, h).unwrap();
    assert!(g.value(gate).iter().all(|&w| w == 0.5));
}

#[test]
fn residual_stack_receptive_field_is_fifteen() {
    let spec = AdapterSpec::new(AdapterKind::ConvResidualSE, 4, 3);
    let m = AdapterModule::build(&spec, &mut RngState::new(5)).unwrap();
    let (len, at) = (41, 20);
    let base = Tensor::randn(&[3, len], 1.0, &mut RngState::new(6));
    let mut bumped = base.clone();
    for c in 0..3 {
        bumped.data_mut()[c * len + at] += 0.5;
    }
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let xv = g.leaf(x);
        let y = m.residual_stack(&mut g, &p, xv, false).unwrap();
        g.tensor(y)
    };
    let (a, b) = (run(&base), run(&bumped));
    let touched: Vec<usize> = (0..len)
        .filter(|&t| (0..3).any(|c| a.data()[c * len + t] != b.data()[c * len + t]))
        .collect();
    let span = touched.last().unwrap() - touched.first().unwrap() + 1;
    assert_eq!(span, 1 + 2 * (1 + 2 + 4));
    assert_eq!(touched.len(), span);
}

#[test]
fn single_token_attention_ignores_queries_and_keys() {
    let spec = AdapterSpec::new(AdapterKind::TransformerAdapter, 8, 4).with_dropout(0.0);
    let mut m = AdapterModule::build(&spec, &mut RngState::new(7)).unwrap();
    randomize_up(&mut m, 8);
    let x = Tensor::randn(&[1, 8], 1.0, &mut RngState::new(9));
    let before = m.apply(&x).unwrap();
    let mut rng = RngState::new(10);
    for name in ["attn.q.w", "attn.k.w", "attn.q.b", "attn.k.b"] {
        let t = m.param_mut(name).unwrap();
        let fresh = Tensor::randn(t.shape(), 2.0, &mut rng);
        t.data_mut().copy_from_slice(fresh.data());
    }
    let after = m.apply(&x).unwrap();
    assert!(before.max_abs_diff(&after) < 1e-14);
}

#[test]
fn transformer_delta_is_permutation_equivariant() {
    let spec = AdapterSpec::new(AdapterKind::TransformerAdapter, 6, 4).with_dropout(0.0);
    let mut m = AdapterModule::build(&spec, &mut RngState::new(11)).unwrap();
    randomize_up(&mut m, 12);
    let x = Tensor::randn(&[8, 6], 1.0, &mut RngState::new(13));
    let perm = [3, 7, 0, 5, 1, 6, 2, 4];
    let permute = |t: &Tensor| {
        let mut out = Vec::with_capacity(48);
        for &p in &perm {
            out.extend_from_slice(&t.data()[p * 6..(p + 1) * 6]);
        }
        Tensor::new(&[8, 6], out).unwrap()
    };
    let y = m.apply(&x).unwrap();
    let yp = m.apply(&permute(&x)).unwrap();
    assert!(permute(&y).max_abs_diff(&yp) < 1e-12);
}

#[test]
fn stereo_expansion_duplicates_channels() {
    let mut spec = AdapterSpec::new(AdapterKind::LinearBottleneck, 6, 3);
    spec.stereo_expand = true;
    let mut m = AdapterModule::build(&spec, &mut RngState::new(1)).unwrap();
    randomize_up(&mut m, 2);
    let mut g = Graph::new();
    let p = m.bind(&mut g);
    let x = g.leaf(&Tensor::randn(&[5, 6], 1.0, &mut RngState::new(3)));
    let y = m.forward_stereo(&mut g, &p, x, &mut RngState::new(0), Pass::eval()).unwrap();
    assert_eq!(g.shape(y), &[2, 5, 6]);
    let v = g.value(y);
    assert_eq!(&v[..30], &v[30..]);
}

#[test]
fn every_kind_passes_gradient_check() {
    for (kind, causal) in AdapterKind::ALL.into_iter().map(|k| (k, false)).chain([
        (AdapterKind::ConvResidualSE, true),
        (AdapterKind::TransformerAdapter, true),
    ]) {
        let spec = AdapterSpec::new(kind, 16, 4);
        let mut m = AdapterModule::build(&spec, &mut RngState::new(21)).unwrap();
        randomize_up(&mut m, 22);
        let shape = if kind.is_2d() { vec![16, 2, 3] } else { vec![5, 16] };
        let x = Tensor::randn(&shape, 1.0, &mut RngState::new(23));
        let target = Tensor::randn(&shape, 1.0, &mut RngState::new(24));
        let params: Vec<Tensor> = m.params().values().cloned().collect();
        let r = gradcheck::check(&params, gradcheck::DEFAULT_STEP, |g, vars| {
            let p = m.bind_vars(vars)?;
            let xv = g.leaf(&x);
            let tv = g.leaf(&target);
            let y = m.forward(g, &p, xv, &mut RngState::new(25), Pass::train().causal(causal))?;
            g.mse(y, tv)
        })
        .unwrap();
        assert_eq!(r.scalars_checked, m.parameter_count());
        assert!(r.max_rel_err < 1e-4, "{kind}: {r:?}");
    }
}

#[test]
fn causal_mode_never_looks_ahead() {
    for kind in [AdapterKind::LinearBottleneck, AdapterKind::ConvResidualSE, AdapterKind::TransformerAdapter] {
        let mut m = AdapterModule::build(&AdapterSpec::new(kind, 6, 4).with_dropout(0.0), &mut RngState::new(41)).unwrap();
        randomize_up(&mut m, 42);
        let x = Tensor::randn(&[12, 6], 1.0, &mut RngState::new(43));
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let p = m.bind(&mut g);
            let xv = g.leaf(x);
            let y = m.forward(&mut g, &p, xv, &mut RngState::new(0), Pass::eval().causal(true)).unwrap();
            g.tensor(y)
        };
        let base = run(&x);
        for at in [0, 5, 11] {
            let mut bumped = x.clone();
            bumped.data_mut()[at * 6 + 2] += 1.0;
            let y = run(&bumped);
            let first_change = (0..12).find(|&t| (0..6).any(|c| y.data()[t * 6 + c] != base.data()[t * 6 + c]));
            assert_eq!(first_change, Some(at), "{kind} at {at}");
        }
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for kind in AdapterKind::ALL {
        let mut m = AdapterModule::build(&AdapterSpec::new(kind, 8, 4), &mut RngState::new(31)).unwrap();
        randomize_up(&mut m, 32);
        let path = dir.path().join(format!("{kind}.bin"));
        m.save(&path).unwrap();
        let back = AdapterModule::load(&path).unwrap();
        assert_eq!(back, m);
        assert!(back.params().values().all(Tensor::requires_grad));
    }
}

#[test]
fn host_shape_mismatch_is_a_dimension_error() {
    let m = AdapterModule::build(&AdapterSpec::new(AdapterKind::ConvResidual2D, 8, 2), &mut RngState::new(1)).unwrap();
    assert!(matches!(m.apply(&Tensor::zeros(&[5, 8])), Err(LabError::Dimension { .. })));
}

// ---- budget solver ---------------------------------------------------------

fn scan_closest(kind: AdapterKind, d: usize, target: usize, upto: usize) -> usize {
    let mut best = (usize::MAX, 0);
    for b in 1..=upto {
        let e = formula_count(kind, d, b).abs_diff(target);
        if e < best.0 {
            best = (e, b);
        }
    }
    best.1
}

#[test]
fn solver_exact_hits() {
    let s = solve_bottleneck_for_budget(AdapterKind::LinearBottleneck, 64, 2128, 0.02).unwrap();
    assert_eq!(s.spec.bottleneck_dim, 16);
    assert_eq!(s.realized, 2128);
    for kind in AdapterKind::ALL {
        let target = formula_count(kind, 32, 11);
        let s = solve_bottleneck_for_budget(kind, 32, target, 0.0).unwrap();
        assert_eq!(s.spec.bottleneck_dim, 11);
        assert!(s.within_tolerance);
    }
}

#[test]
fn solver_agrees_with_exhaustive_scan() {
    for kind in AdapterKind::ALL {
        let lo = formula_count(kind, 64, 1);
        let hi = formula_count(kind, 64, 64);
        for i in 0..40 {
            let target = lo + (hi - lo) * i / 39;
            let s = solve_bottleneck_for_budget(kind, 64, target, 0.02).unwrap();
            assert_eq!(s.spec.bottleneck_dim, scan_closest(kind, 64, target, 64), "{kind} {target}");
        }
    }
}

#[test]
fn solver_rejects_infeasible_budgets() {
    let min = minimum_count(AdapterKind::ConvResidualSE, 64);
    assert!(matches!(
        solve_bottleneck_for_budget(AdapterKind::ConvResidualSE, 64, min - 1, 0.02),
        Err(LabError::InfeasibleBudget { .. })
    ));
}

#[test]
fn split_budget_over_three_points() {
    let s = solve_split(AdapterKind::LinearBottleneck, 64, 3000, 3, 0.02).unwrap();
    assert_eq!(s.specs.len(), 3);
    assert_eq!(s.counts.iter().sum::<usize>(), s.realized);
    assert!(s.within_tolerance, "{s:?}");
    let spread = s.specs.iter().map(|x| x.bottleneck_dim).max().unwrap()
        - s.specs.iter().map(|x| x.bottleneck_dim).min().unwrap();
    assert!(spread <= 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn count_strictly_increases_with_bottleneck(k in 0usize..5, d in 1usize..80, b in 1usize..300) {
        let kind = AdapterKind::ALL[k];
        let c1 = count_for_spec(&AdapterSpec::new(kind, d, b));
        let c2 = count_for_spec(&AdapterSpec::new(kind, d, b + 1));
        prop_assert!(c2 > c1);
    }

    #[test]
    fn forward_preserves_shape(k in 0usize..5, d in 1usize..10, b in 1usize..6, t in 1usize..6, w in 1usize..5, seed in 0u64..1000) {
        let kind = AdapterKind::ALL[k];
        let mut m = AdapterModule::build(&AdapterSpec::new(kind, d, b), &mut RngState::new(seed)).unwrap();
        randomize_up(&mut m, seed + 1);
        let shape = if kind.is_2d() { vec![d, t, w] } else { vec![t, d] };
        let x = Tensor::randn(&shape, 1.0, &mut RngState::new(seed + 2));
        let y = m.apply(&x).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn solver_closest_for_random_targets(k in 0usize..5, d in 4usize..40, frac in 0.0f64..1.0) {
        let kind = AdapterKind::ALL[k];
        let lo = formula_count(kind, d, 1);
        let hi = formula_count(kind, d, 200);
        let target = lo + ((hi - lo) as f64 * frac) as usize;
        let s = solve_bottleneck_for_budget(kind, d, target, 0.02).unwrap();
        prop_assert_eq!(s.spec.bottleneck_dim, scan_closest(kind, d, target, 210));
    }
}
