use proptest::prelude::*;

use ssm_compose::compose::Method;
use ssm_compose::eval::conditioned_state;
use ssm_compose::ssm::{continuation_loss, ToyModelConfig, ToyModelParams, TokenSequence};
use ssm_compose::store::StateStore;
use ssm_compose::train::*;

fn model(seed: u64, conv_width: usize) -> ToyModelParams {
    let cfg = ToyModelConfig::new(8, 16, 1).with_conv_width(conv_width);
    ToyModelParams::init_with_scale(cfg, seed, 0.3).unwrap()
}

fn text() -> impl Strategy<Value = TokenSequence> {
    "[a-h]{1,8}".prop_map(|s| TokenSequence::from_text(&s))
}

fn example() -> impl Strategy<Value = TrainExample> {
    (text(), text(), prop::collection::vec(text(), 0..=4))
        .prop_map(|(q, c, ctx)| TrainExample::new(q, c, ctx).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn analytic_gradients_match_finite_differences(
        ex in example(),
        seed in 0u64..100,
        width in 1usize..=3,
    ) {
        let p = model(seed, width);
        for obj in [Objective::Bptc, Objective::Bp2c, Objective::Concat] {
            // Central differences at h = 1e-5 carry ~1e-10 absolute roundoff,
            // which swamps gradients near 1e-7 under a 1e-6 floor.
            let cfg = GradCheckConfig { seed, floor: 1e-5, ..GradCheckConfig::default() };
            let report = gradient_check(&ex, &p, obj, &cfg).unwrap();
            prop_assert!(report.is_finite());
            prop_assert!(report.max_rel_error() < 1e-4, "{obj}: {:?}", report.tensors);
        }
    }

    #[test]
    fn stop_gradient_changes_only_derivatives(ex in example(), seed in 0u64..100) {
        let p = model(seed, 2);
        let a = loss_bptc(&ex, &p).unwrap();
        let b = loss_bp2c(&ex, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        let frozen = composed_initial_state(&ex, &p).unwrap();
        let (_, g) = loss_and_grad(&ex, &p, Objective::Bp2c).unwrap();
        let (_, g_frozen) = grad_from_state(&ex, &frozen, &p).unwrap();
        prop_assert_eq!(g, g_frozen);
    }
}

#[test]
fn context_only_tokens_get_no_gradient_under_bp2c() {
    let p = model(3, 2);
    let ex = TrainExample::new(
        TokenSequence::from_text("abc"),
        TokenSequence::from_text("de"),
        vec![TokenSequence::from_text("XYZ"), TokenSequence::from_text("QRS")],
    )
    .unwrap();
    let (_, g2) = loss_and_grad(&ex, &p, Objective::Bp2c).unwrap();
    let (_, g1) = loss_and_grad(&ex, &p, Objective::Bptc).unwrap();
    for &t in b"XYZQRS" {
        assert!(g2.embedding.row(t as usize).iter().all(|&v| v == 0.0));
    }
    assert!(b"XYZ".iter().any(|&t| g1.embedding.row(t as usize).iter().any(|&v| v != 0.0)));
}

#[test]
fn training_loss_is_the_evaluated_picaso_r_loss() {
    let p = model(5, 4);
    let texts = ["the sky is blue.", "grass is green.", "snow is white."];
    let mut store = StateStore::new(&p);
    let ids: Vec<String> = texts
        .iter()
        .map(|t| store.insert(&TokenSequence::from_text(t), &p).unwrap())
        .collect();
    let entries = store.load_entries(&ids).unwrap();
    let (q, c) = (TokenSequence::from_text("the sky is "), TokenSequence::from_text("blue."));
    let init = conditioned_state(Method::PicasoR, &entries, &p).unwrap();
    let evaluated = continuation_loss(&q, &c, &init, &p).unwrap();
    let ex = TrainExample::new(q, c, texts.iter().map(|t| TokenSequence::from_text(t)).collect()).unwrap();
    assert_eq!(loss_bptc(&ex, &p).unwrap(), evaluated);
}

#[test]
fn training_is_seeded_and_objectives_diverge() {
    let p = model(1, 2);
    let data: Vec<TrainExample> = (0..6)
        .map(|i| {
            TrainExample::new(
                TokenSequence::from_text(&format!("key{i} ")),
                TokenSequence::from_text(&format!("v{i}")),
                vec![TokenSequence::from_text(&format!("key{i} v{i}")); i % 3],
            )
            .unwrap()
        })
        .collect();
    let cfg = TrainConfig {
        steps: 5,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let a = train(&data, &p, &cfg).unwrap();
    let b = train(&data, &p, &cfg).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.params, b.params);
    let c = train(&data, &p, &TrainConfig { objective: Objective::Bp2c, ..cfg }).unwrap();
    assert_ne!(a.params, c.params);
    let still = train(&data, &p, &TrainConfig { steps: 1, lr: 0.0, ..cfg }).unwrap();
    assert_eq!(still.params, p);
}

#[test]
fn multi_layer_models_are_rejected() {
    let p = ToyModelParams::init(ToyModelConfig::new(4, 4, 2), 0).unwrap();
    let ex = TrainExample::new(TokenSequence::from_text("a"), TokenSequence::from_text("b"), vec![]).unwrap();
    assert!(matches!(loss_bptc(&ex, &p), Err(ssm_compose::Error::UnsupportedConfig(_))));
}
