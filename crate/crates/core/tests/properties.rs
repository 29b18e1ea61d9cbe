mod common;

use common::checks::{toy_episode, toy_hyper_model};
use common::randn;
use metaforge::meta::{
    hyper_update, hypermaml_adapt, hypermaml_episode_grads, hypermaml_meta_gradient, maml_adapt, maml_episode_grads,
    maml_meta_gradient, predict_query, AdaptedModel, MamlConfig, Model,
};
use metaforge::nn::{self, EncoderConfig, InitScheme};
use metaforge::tensor::Tape;
use metaforge::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn encoder_configs() -> Vec<EncoderConfig> {
    let mut conv = EncoderConfig::conv4(&[1, 16, 16], 3);
    conv.batch_norm = false;
    vec![EncoderConfig::linear2d(), EncoderConfig::mlp(5, 7, 3), conv]
}

fn input(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, rows: usize) -> Tensor<f64> {
    let mut shape = vec![rows];
    shape.extend(&cfg.input_shape);
    randn(rng, &shape, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoders_keep_row_count(seed in any::<u64>(), rows in 1usize..6, which in 0usize..3) {
        let cfg = &encoder_configs()[which];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = nn::build_encoder::<f64>(cfg, &mut rng, InitScheme::KaimingUniform).unwrap();
        let e = nn::encode(cfg, &params, &input(&mut rng, cfg, rows)).unwrap();
        prop_assert_eq!(e.shape(), &[rows, cfg.output_dim()][..]);
    }

    #[test]
    fn permuting_rows_permutes_embeddings(seed in any::<u64>(), rows in 2usize..7, which in 0usize..3) {
        let cfg = &encoder_configs()[which];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = nn::build_encoder::<f64>(cfg, &mut rng, InitScheme::KaimingUniform).unwrap();
        let x = input(&mut rng, cfg, rows);
        let mut perm: Vec<usize> = (0..rows).collect();
        perm.shuffle(&mut rng);
        let e = nn::encode(cfg, &params, &x).unwrap();
        let ep = nn::encode(cfg, &params, &x.select_rows(&perm).unwrap()).unwrap();
        prop_assert!(ep.bit_eq(&e.select_rows(&perm).unwrap()));
    }

    #[test]
    fn head_bias_shift_keeps_argmax(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = nn::build_head::<f64>(4, 5, &mut rng, InitScheme::XavierUniform).unwrap();
        let mut shifted = head.clone();
        let b = head.req("head.bias").unwrap().add_scalar(shift).unwrap();
        shifted = shifted.map_tensors(|t| if t.shape() == b.shape() { b.clone() } else { t.clone() });
        let e = randn(&mut rng, &[6, 4], 1.0);
        let z = nn::classify(&head, &e).unwrap();
        let zs = nn::classify(&shifted, &e).unwrap();
        for (row, (a, b)) in z.argmax_rows().into_iter().zip(zs.argmax_rows()).enumerate() {
            let r = &z.data()[row * 5..row * 5 + 5];
            let mut sorted = r.to_vec();
            sorted.sort_by(|x, y| y.total_cmp(x));
            if sorted[0] - sorted[1] > 1e-9 {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn permuting_class_rows_permutes_the_update(seed in any::<u64>()) {
        let (model, _) = toy_hyper_model(seed, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let width = model.hyper.as_ref().unwrap().cfg.input_width();
        let rows = randn(&mut rng, &[2, width], 1.0);
        let swapped = rows.select_rows(&[1, 0]).unwrap();
        let hyper = &model.hyper.as_ref().unwrap().params;
        let (_, d) = hyper_update(&model.head, &rows, hyper).unwrap();
        let (_, ds) = hyper_update(&model.head, &swapped, hyper).unwrap();
        let w = d.req("head.weight").unwrap();
        let ws = ds.req("head.weight").unwrap();
        prop_assert_eq!(w.shape(), model.head.req("head.weight").unwrap().shape());
        let cols = |t: &Tensor<f64>| t.transpose().unwrap().select_rows(&[1, 0]).unwrap().transpose().unwrap();
        prop_assert!(ws.bit_eq(&cols(w)));
        let b = d.req("head.bias").unwrap().data().to_vec();
        let bs = ds.req("head.bias").unwrap().data().to_vec();
        prop_assert_eq!(bs, vec![b[1], b[0]]);
    }

    #[test]
    fn adapted_head_is_continuous_in_lambda(seed in any::<u64>(), lambda in 0.0f64..0.999) {
        let (model, cfg) = toy_hyper_model(seed, true);
        let ep = toy_episode(seed, (seed % 4) as usize, 3, 2);
        let a = hypermaml_adapt(&model, &ep.support_x, &ep.support_y, &cfg, lambda).unwrap();
        let b = hypermaml_adapt(&model, &ep.support_x, &ep.support_y, &cfg, lambda + 1e-3).unwrap();
        let gap: f64 = a.head.iter().map(|(n, t)| t.max_abs_diff(b.head.req(n).unwrap())).fold(0.0, f64::max);
        prop_assert!(gap < 1e-2, "gap {}", gap);
        for (n, t) in a.delta.as_ref().unwrap().iter() {
            prop_assert_eq!(t.shape(), model.head.req(n).unwrap().shape());
        }
    }

    #[test]
    fn hypernetwork_receives_gradient(seed in any::<u64>(), random_last in any::<bool>()) {
        let (model, cfg) = toy_hyper_model(seed, random_last);
        let ep = toy_episode(seed, (seed % 4) as usize, 3, 3);
        let (_, g) = hypermaml_episode_grads(&model, &ep, &cfg, 1.0).unwrap();
        let h = g.hyper.unwrap();
        prop_assert!(h.req("hyper.l3.weight").unwrap().l2_norm() > 0.0);
        prop_assert!(h.l2_norm() > 0.0);
    }
}

#[test]
fn lambda_one_never_nests_the_tape() {
    let (model, cfg) = toy_hyper_model(3, true);
    let ep = toy_episode(3, 0, 3, 3);
    let tape = Tape::new();
    hypermaml_adapt(&model.attach(&tape), &ep.support_x, &ep.support_y, &cfg, 1.0).unwrap();
    assert_eq!(tape.nesting_level(), 0);
    let tape = Tape::new();
    hypermaml_adapt(&model.attach(&tape), &ep.support_x, &ep.support_y, &cfg, 0.5).unwrap();
    assert_eq!(tape.nesting_level(), 1);
}

#[test]
fn half_lambda_with_zero_hypernetwork_is_half_a_step() {
    let (model, cfg) = toy_hyper_model(4, false);
    let ep = toy_episode(4, 3, 4, 2);
    let half = hypermaml_adapt(&model, &ep.support_x, &ep.support_y, &cfg, 0.5).unwrap();
    let step = MamlConfig { inner_lr: 0.5 * cfg.warmup_lr, inner_steps: 1, head_only: true, ..Default::default() };
    let (_, h) = maml_adapt(&model.encoder_cfg, &model.encoder, &model.head, &ep.support_x, &ep.support_y, &step).unwrap();
    assert!(half.head.bit_eq(&h));
    assert!(!h.bit_eq(&model.head));
}

#[test]
fn zero_inner_steps_make_both_orders_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model: Model<f64> = Model::new(EncoderConfig::mlp(2, 6, 3), 2, None, &mut rng, InitScheme::KaimingUniform).unwrap();
    let ep = toy_episode(5, 2, 3, 3);
    let so = MamlConfig { inner_steps: 0, ..Default::default() };
    let fo = MamlConfig { first_order: true, ..so.clone() };
    let (la, a) = maml_episode_grads(&model, &ep, &so).unwrap();
    let (lb, b) = maml_episode_grads(&model, &ep, &fo).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    for (x, y) in [(&a.encoder, &b.encoder), (&a.head, &b.head)] {
        assert!(x.flatten().iter().zip(y.flatten()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn single_episode_batch_equals_episode_gradient() {
    let (model, cfg) = toy_hyper_model(6, true);
    let ep = toy_episode(6, 1, 3, 3);
    let (l1, g1) = hypermaml_episode_grads(&model, &ep, &cfg, 0.7).unwrap();
    let (lb, gb) = hypermaml_meta_gradient(&model, std::slice::from_ref(&ep), &cfg, 0.7, 1).unwrap();
    assert_eq!(l1.to_bits(), lb.to_bits());
    assert_eq!(g1.hyper.unwrap().flatten(), gb.hyper.unwrap().flatten());

    let mcfg = MamlConfig { inner_lr: 0.2, inner_steps: 2, ..Default::default() };
    let (l1, g1) = maml_episode_grads(&model, &ep, &mcfg).unwrap();
    let (lb, gb) = maml_meta_gradient(&model, std::slice::from_ref(&ep), &mcfg, 4).unwrap();
    assert_eq!(l1.to_bits(), lb.to_bits());
    assert_eq!(g1.head.flatten(), gb.head.flatten());
}

#[test]
fn meta_gradient_does_not_depend_on_thread_count() {
    let (model, cfg) = toy_hyper_model(7, true);
    let eps: Vec<_> = (0..6).map(|i| toy_episode(70 + i, (i % 4) as usize, 3, 3)).collect();
    let (l1, g1) = hypermaml_meta_gradient(&model, &eps, &cfg, 0.4, 1).unwrap();
    let (l4, g4) = hypermaml_meta_gradient(&model, &eps, &cfg, 0.4, 4).unwrap();
    assert_eq!(l1.to_bits(), l4.to_bits());
    assert_eq!(g1.encoder.flatten(), g4.encoder.flatten());
    assert_eq!(g1.hyper.unwrap().flatten(), g4.hyper.unwrap().flatten());
}

#[test]
fn zero_update_predicts_like_the_base_model() {
    let (model, _) = toy_hyper_model(8, false);
    let ep = toy_episode(8, 0, 2, 5);
    let mut adapted = AdaptedModel::unadapted(&model);
    let zero = adapted.head.map_tensors(|t| Tensor::zeros(t.shape()));
    adapted.delta = Some(zero);
    let p = predict_query(&model.encoder_cfg, &adapted, &ep.query_x).unwrap();
    let base = predict_query(&model.encoder_cfg, &AdaptedModel::unadapted(&model), &ep.query_x).unwrap();
    assert!(p.bit_eq(&base));
}
