use itertools::Itertools;
use proptest::prelude::*;

use ssm_compose::compose::*;
use ssm_compose::ssm::{encode_context, ContextState, LayerContext, ToyModelConfig, ToyModelParams, TokenSequence};
use ssm_compose::tensor::{max_rel_error, Matrix};

fn ctx(id: usize, xs: &[f64], decays: &[f64]) -> ContextState {
    ContextState {
        context_id: format!("c{id}"),
        token_count: 1,
        layers: vec![LayerContext {
            x: xs.to_vec(),
            log_decay: decays.iter().map(|a| a.ln()).collect(),
            decay: decays.to_vec(),
            conv_tail: Matrix::from_fn(2, 1, |r, _| xs[0] * (r as f64 + 1.0)),
        }],
    }
}

/// `n` contexts over `m` channels with decays in (0, 1].
fn contexts(max_n: usize, m: usize) -> impl Strategy<Value = Vec<ContextState>> {
    prop::collection::vec(
        (prop::collection::vec(-2.0f64..2.0, m), prop::collection::vec(0.05f64..=1.0, m)),
        1..=max_n,
    )
    .prop_map(|v| v.iter().enumerate().map(|(i, (x, a))| ctx(i, x, a)).collect())
}

fn x_of(s: &ComposedState) -> Vec<f64> {
    s.layers[0].x.clone()
}

fn mean_caso(orders: impl Iterator<Item = Vec<ContextState>>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0.0;
    for o in orders {
        let x = x_of(&compose_caso(&o).unwrap());
        if sum.is_empty() {
            sum = vec![0.0; x.len()];
        }
        sum.iter_mut().zip(&x).for_each(|(s, v)| *s += v);
        count += 1.0;
    }
    sum.iter().map(|s| s / count).collect()
}

fn rotations(c: &[ContextState]) -> impl Iterator<Item = Vec<ContextState>> + '_ {
    (0..c.len()).map(move |r| (0..c.len()).map(|i| c[(r + i) % c.len()].clone()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_matches_permutation_average(c in contexts(5, 3)) {
        let oracle = mean_caso(c.iter().cloned().permutations(c.len()));
        let got = x_of(&compose_picaso_s(&c).unwrap());
        prop_assert!(max_rel_error(&got, &oracle, 1e-12) < 1e-9);
    }

    #[test]
    fn cyclic_matches_rotation_average(c in contexts(24, 3)) {
        let oracle = mean_caso(rotations(&c));
        let got = x_of(&compose_picaso_r(&c).unwrap());
        prop_assert!(max_rel_error(&got, &oracle, 1e-12) < 1e-9);
    }

    #[test]
    fn symmetric_ignores_any_reordering(c in contexts(8, 4), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut shuffled = c.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = x_of(&compose_picaso_s(&c).unwrap());
        let b = x_of(&compose_picaso_s(&shuffled).unwrap());
        prop_assert!(max_rel_error(&a, &b, 1e-12) < 1e-9);
    }

    #[test]
    fn cyclic_ignores_rotation(c in contexts(12, 4), r in 0usize..12) {
        let n = c.len();
        let rotated: Vec<_> = (0..n).map(|i| c[(i + r) % n].clone()).collect();
        let a = x_of(&compose_picaso_r(&c).unwrap());
        let b = x_of(&compose_picaso_r(&rotated).unwrap());
        prop_assert!(max_rel_error(&a, &b, 1e-12) < 1e-9);
    }

    #[test]
    fn weights_lie_in_unit_interval(c in contexts(16, 3)) {
        for w in [picaso_s_weights(&c).unwrap(), picaso_r_weights(&c).unwrap()] {
            prop_assert!(w.is_finite());
            for v in w.layers[0].as_slice() {
                prop_assert!(*v > 0.0 && *v <= 1.0 + 1e-12, "weight {v}");
            }
        }
    }

    #[test]
    fn identity_decays_give_unit_weights(n in 1usize..20) {
        let c: Vec<_> = (0..n).map(|i| ctx(i, &[i as f64, 1.0], &[1.0, 1.0])).collect();
        for w in [picaso_s_weights(&c).unwrap(), picaso_r_weights(&c).unwrap()] {
            prop_assert!(w.layers[0].as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn every_method_averages_conv_tails(c in contexts(6, 2)) {
        let n = c.len() as f64;
        let expect: Vec<f64> = (0..2)
            .map(|r| c.iter().map(|s| s.layers[0].conv_tail[(r, 0)]).sum::<f64>() / n)
            .collect();
        for m in [Method::Soup, Method::Caso, Method::PicasoS, Method::PicasoR] {
            let tail = compose_states(m, &c).unwrap().layers[0].conv_tail.clone();
            prop_assert!(max_rel_error(tail.as_slice(), &expect, 1e-12) < 1e-12);
        }
    }

    #[test]
    fn soup_is_the_mean(c in contexts(10, 3)) {
        let n = c.len() as f64;
        let expect: Vec<f64> = (0..3).map(|k| c.iter().map(|s| s.layers[0].x[k]).sum::<f64>() / n).collect();
        prop_assert!(max_rel_error(&x_of(&compose_soup(&c).unwrap()), &expect, 1e-12) < 1e-12);
    }

    #[test]
    fn balanced_merge_tree_matches_direct_esp(vars in prop::collection::vec(0.0f64..=1.0, 0..=16)) {
        let decays: Vec<Vec<f64>> = vars.iter().map(|&v| vec![v]).collect();
        let direct = esp_all_channels(&decays, 1).unwrap();
        let tree = esp_balanced(&decays, 1).unwrap();
        for m in 0..=vars.len() {
            let (a, b) = (tree.value(m, 0), direct.value(m, 0));
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300));
        }
    }

    #[test]
    fn caso_reproduces_the_concatenation(
        seed in 0u64..1000,
        m in 1usize..=16,
        lens in prop::collection::vec(1usize..=20, 1..=5),
    ) {
        let cfg = ToyModelConfig::new(4, m, 1).with_conv_width(1);
        let params = ToyModelParams::init_with_scale(cfg, seed, 0.5).unwrap();
        let segs: Vec<TokenSequence> = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| TokenSequence::new((0..l).map(|t| ((seed as usize + 7 * i + 13 * t) % 256) as u32).collect()))
            .collect();
        let states: Vec<_> = segs.iter().map(|s| encode_context(s, &params, "s").unwrap()).collect();
        let whole = encode_context(&TokenSequence::concat(&segs), &params, "all").unwrap();
        let caso = compose_caso(&states).unwrap();
        prop_assert!(max_rel_error(&caso.layers[0].x, &whole.layers[0].x, 1e-12) < 1e-9);
    }
}

#[test]
fn piconcat_is_rotation_invariant_and_costs_n_passes() {
    let params = ToyModelParams::init_with_scale(ToyModelConfig::new(4, 6, 2), 1, 0.3).unwrap();
    let segs: Vec<TokenSequence> = ["ab", "cde", "f", "ghij"].iter().map(|s| TokenSequence::from_text(s)).collect();
    let rotated: Vec<_> = (0..4).map(|i| segs[(i + 1) % 4].clone()).collect();
    let before = ssm_compose::ssm::forward_call_count();
    let a = compose_piconcat_r(&segs, &params).unwrap();
    assert_eq!(ssm_compose::ssm::forward_call_count() - before, 4);
    let b = compose_piconcat_r(&rotated, &params).unwrap();
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        assert!(max_rel_error(&la.x, &lb.x, 1e-12) < 1e-9);
    }
}

#[test]
fn state_only_methods_never_run_the_model() {
    let c: Vec<_> = (0..5).map(|i| ctx(i, &[0.1 * i as f64, -0.2], &[0.9, 0.4])).collect();
    let before = ssm_compose::ssm::forward_call_count();
    for m in [Method::Soup, Method::Caso, Method::PicasoS, Method::PicasoR] {
        compose_states(m, &c).unwrap();
    }
    assert_eq!(ssm_compose::ssm::forward_call_count(), before);
}

#[test]
fn long_cyclic_chains_stay_accurate() {
    // Total log decay far beyond the cumulative-product comfort zone.
    let n = 64;
    let c: Vec<_> = (0..n)
        .map(|i| ctx(i, &[1.0 + i as f64 / n as f64], &[0.2 + 0.3 * ((i * 7) % 5) as f64 / 5.0]))
        .collect();
    let oracle = mean_caso(rotations(&c));
    let got = x_of(&compose_picaso_r(&c).unwrap());
    assert!(max_rel_error(&got, &oracle, 1e-12) < 1e-9);
}
