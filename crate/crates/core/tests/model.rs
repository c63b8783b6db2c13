use proptest::prelude::*;
use varcast::graph_learning::GraphMode;
use varcast::model::{
    build_model, finetune, forward, load_checkpoint, next_patch_loss, pretrain, save_checkpoint, train,
    Binding, ForwardOptions, LossKind, Mode, Model, ModelConfig, Placement, TrainPlan, TrainSpec,
};
use varcast::moe::{MoeConfig, NormKind};
use varcast::tensor::{finite_diff_check, Graph, RngStream, Tensor};
use varcast::tokenizer::{next_patch_targets, normalize, SeriesBatch};
use varcast::Error;

fn run(model: &Model, values: &Tensor, opts: &mut ForwardOptions) -> Tensor {
    let batch = normalize(&SeriesBatch::new(values.clone(), None).unwrap()).unwrap();
    let mut g = Graph::new();
    let bind = Binding::new(&mut g, &model.params, &|_| false);
    let out = forward(&mut g, &bind, model, &batch, opts).unwrap();
    g.value(out.pred).clone()
}

fn random_graph(rng: &mut RngStream, c: usize) -> Tensor {
    Tensor::from_fn(&[c, c], |i| {
        if i[0] == i[1] {
            1.0
        } else {
            (rng.uniform() < 0.5) as u8 as f64
        }
    })
}

/// Sinusoid mixture windows `[C, L + F]` with per-window phase offsets.
fn sine_windows(seed: u64, count: usize, c: usize, len: usize) -> Vec<Tensor> {
    let mut rng = RngStream::new(seed);
    (0..count)
        .map(|_| {
            let phase: Vec<f64> = (0..c).map(|_| rng.uniform() * 6.28).collect();
            let noise = rng.normal_tensor(&[c, len], 0.05);
            Tensor::from_fn(&[c, len], |i| {
                let t = i[1] as f64 + phase[i[0]] * 10.0;
                (t * 0.3).sin() + 0.5 * (t * 0.11 + i[0] as f64).cos() + noise.get(i)
            })
        })
        .collect()
}

fn placements() -> [Placement; 5] {
    [
        Placement::All,
        Placement::Every2,
        Placement::FirstHalf,
        Placement::LastHalf,
        Placement::Dense,
    ]
}

#[test]
fn cm_with_identity_graph_equals_ci() {
    let mut rng = RngStream::new(11);
    for trial in 0..20 {
        let layers = 1 + rng.below(4);
        let mut cfg = ModelConfig::tiny(12, 4, 8, 2, layers);
        cfg.placement = placements()[trial % 5];
        cfg.graph_layers = 1 + rng.below(layers);
        cfg.moe.n_private = 4;
        let model = build_model(&cfg, &mut RngStream::new(trial as u64)).unwrap();
        let c = 1 + rng.below(4);
        let x = rng.normal_tensor(&[2, c, 12], 1.0);
        let ci = run(&model, &x, &mut ForwardOptions::ci());
        let mut cm = ForwardOptions::cm(GraphMode::Eval, RngStream::new(0)).with_graph(Tensor::eye(c));
        let cm = run(&model, &x, &mut cm);
        assert!(ci.rel_err(&cm) < 1e-6, "trial {trial}: {}", ci.rel_err(&cm));
    }
}

#[test]
fn single_channel_ci_and_learned_cm_coincide() {
    let cfg = ModelConfig::tiny(12, 4, 8, 2, 2);
    let model = build_model(&cfg, &mut RngStream::new(5)).unwrap();
    let x = RngStream::new(6).normal_tensor(&[3, 1, 12], 1.0);
    let ci = run(&model, &x, &mut ForwardOptions::ci());
    let cm = run(&model, &x, &mut ForwardOptions::cm(GraphMode::Train, RngStream::new(1)));
    assert!(ci.rel_err(&cm) < 1e-12);
}

fn permute_channels(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape().to_vec();
    Tensor::from_fn(&s, |i| {
        let mut j = i.to_vec();
        j[1] = perm[i[1]];
        x.get(&j)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn channel_permutation_equivariance(seed in 0u64..1_000_000) {
        let mut rng = RngStream::new(seed);
        let mut cfg = ModelConfig::tiny(12, 4, 8, 2, 2);
        cfg.placement = Placement::All;
        cfg.moe.n_private = 4;
        let model = build_model(&cfg, &mut RngStream::new(seed / 7)).unwrap();
        let c = 4;
        let x = rng.normal_tensor(&[1, c, 12], 1.0);
        let gm = random_graph(&mut rng, c);
        let mut perm: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut perm);
        // (π G πᵀ)[i, j] = G[π(i), π(j)]
        let pg = Tensor::from_fn(&[c, c], |i| gm.get(&[perm[i[0]], perm[i[1]]]));

        let base = run(&model, &x, &mut ForwardOptions::cm(GraphMode::Eval, RngStream::new(0)).with_graph(gm));
        let moved = run(
            &model,
            &permute_channels(&x, &perm),
            &mut ForwardOptions::cm(GraphMode::Eval, RngStream::new(0)).with_graph(pg),
        );
        let err = moved.rel_err(&permute_channels(&base, &perm));
        prop_assert!(err < 1e-6, "rel err {}", err);
    }
}

/// Gradient check of the next-patch loss over every trainable parameter of
/// `plan`, with Gumbel noise fixed and the relaxed graph in the forward pass.
/// Returns `(name, relative error, analytic norm, numeric norm)`.
fn model_gradcheck(model: &Model, plan: &TrainPlan, x: &Tensor) -> Vec<(String, f64, f64, f64)> {
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| (plan.trainable)(n))
        .map(str::to_string)
        .collect();
    let params: Vec<Tensor> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
    let l = model.cfg.lookback;
    let batch = normalize(&SeriesBatch::from_windows(x, l).unwrap()).unwrap();
    let tgt = next_patch_targets(&batch.values, batch.targets.as_ref().unwrap(), &model.cfg.patch_config()).unwrap();
    let report = finite_diff_check(
        |g, vars| {
            let given: Vec<(String, _)> = names.iter().cloned().zip(vars.iter().copied()).collect();
            let bind = Binding::with_vars(g, &model.params, &given);
            let mut opts = ForwardOptions {
                mode: plan.mode,
                graph_mode: GraphMode::Soft,
                tau: Some(1.0),
                graph_override: None,
                rng: RngStream::new(99),
            };
            let out = forward(g, &bind, model, &batch, &mut opts)?;
            next_patch_loss(g, out.pred, &tgt, LossKind::All)
        },
        &params,
        1e-6,
    )
    .unwrap();
    names
        .into_iter()
        .enumerate()
        .map(|(i, n)| (n, report.per_param[i], report.analytic[i].norm(), report.numeric[i].norm()))
        .collect()
}

fn gradcheck_config() -> ModelConfig {
    // C = 2, N = 3, d = 8, h = 2, J = 2 with the second layer MoE
    let mut cfg = ModelConfig::tiny(6, 2, 8, 2, 2);
    cfg.moe = MoeConfig {
        n_private: 4,
        top_k: 2,
        ..MoeConfig::default()
    };
    cfg
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    for norm in [NormKind::Rms, NormKind::Layer] {
        let mut cfg = gradcheck_config();
        cfg.norm = norm;
        let mut model = build_model(&cfg, &mut RngStream::new(21)).unwrap();
        // Non-zero identifier embeddings and α so their gradients are generic.
        for (name, t) in [("layers.0.attn.e_id", 0.3), ("layers.1.attn.e_id", -0.2)] {
            *model.params.get_mut(name).unwrap() = RngStream::new(1).normal_tensor(&[2, 2], t);
        }
        *model.params.get_mut("graph.alpha_raw").unwrap() = RngStream::new(2).normal_tensor(&[3], 0.5);
        let x = RngStream::new(3).normal_tensor(&[2, 2, 8], 1.0);
        for (plan, label) in [
            (TrainPlan::pretrain(&model), "pretrain"),
            (TrainPlan::finetune(&model, Mode::Cm), "finetune"),
        ] {
            let errs = model_gradcheck(&model, &plan, &x);
            assert!(!errs.is_empty());
            for (name, e, a, n) in errs {
                // With one variable per instance the identifier term adds the
                // same constant to every visible score, so its true gradient
                // is zero and the central difference is pure roundoff.
                let structural_zero = a < 1e-12 && n < 1e-8;
                assert!(e < 1e-4 || structural_zero, "{label} {norm:?} {name}: {e} (|a| {a:e}, |n| {n:e})");
                if label == "finetune" && name.ends_with("e_id") {
                    assert!(a > 1e-6, "identifier gradient vanished in cm mode");
                }
            }
        }
    }
}

#[test]
fn next_patch_loss_examples() {
    let mut rng = RngStream::new(8);
    let t = rng.normal_tensor(&[2, 3, 4, 5], 1.0);
    let mut g = Graph::new();
    let p = g.constant(t.clone());
    let l = next_patch_loss(&mut g, p, &t, LossKind::All).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let p1 = g.constant(t.map(|v| v + 1.0));
    let l = next_patch_loss(&mut g, p1, &t, LossKind::All).unwrap();
    assert!((g.value(l).item() - 1.0).abs() < 1e-12);

    let q = rng.normal_tensor(&[2, 3, 4, 5], 1.0);
    let pq = g.constant(q.clone());
    let l = next_patch_loss(&mut g, pq, &t, LossKind::All).unwrap();
    let naive: f64 = q.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 120.0;
    assert!((g.value(l).item() - naive).abs() <= 1e-12 * naive);

    let l = next_patch_loss(&mut g, pq, &t, LossKind::LastOnly).unwrap();
    let mut last = 0.0;
    for b in 0..2 {
        for c in 0..3 {
            for k in 0..5 {
                last += (q.get(&[b, c, 3, k]) - t.get(&[b, c, 3, k])).powi(2) / 30.0;
            }
        }
    }
    assert!((g.value(l).item() - last).abs() <= 1e-12 * last);
}

fn small_spec(steps: usize, seed: u64) -> TrainSpec {
    TrainSpec {
        steps,
        seed,
        batch_size: 8,
        log_every: 10,
        ..TrainSpec::default()
    }
}

fn finetune_setup(seed: u64) -> (Model, Vec<Tensor>) {
    let mut cfg = ModelConfig::tiny(12, 4, 8, 2, 3);
    cfg.placement = Placement::All;
    cfg.moe.n_private = 4;
    let model = build_model(&cfg, &mut RngStream::new(seed)).unwrap();
    (model, sine_windows(seed, 24, 3, 16))
}

#[test]
fn finetune_freezes_exactly() {
    let (mut model, windows) = finetune_setup(1);
    let before = model.clone();
    let j_ci = model.cfg.frozen_layers();
    let report = finetune(&mut model, &windows, &windows[..4], &small_spec(15, 2), Mode::Cm, &mut |_| {}).unwrap();
    assert_eq!(report.frozen_grad_norms.len(), 15);
    assert!(report.frozen_grad_norms.iter().all(|&n| n == 0.0));
    for l in 0..j_ci {
        assert_eq!(before.layer_bytes(l), model.layer_bytes(l), "layer {l}");
    }
    assert_eq!(before.params.bytes_with_prefix("embed."), model.params.bytes_with_prefix("embed."));
    assert_ne!(before.layer_bytes(j_ci), model.layer_bytes(j_ci));
    assert_ne!(before.params.get("head.w"), model.params.get("head.w"));
    assert_ne!(before.params.get("graph.alpha_raw"), model.params.get("graph.alpha_raw"));
    assert_eq!(before.params.get("graph.edge_bias"), model.params.get("graph.edge_bias"));
}

#[test]
fn one_trainable_layer_when_seven_are_frozen() {
    let mut cfg = ModelConfig::tiny(8, 4, 8, 2, 8);
    cfg.graph_layers = 1;
    let model = build_model(&cfg, &mut RngStream::new(0)).unwrap();
    let plan = TrainPlan::finetune(&model, Mode::Cm);
    let trainable_layers: std::collections::BTreeSet<String> = model
        .params
        .names()
        .filter(|n| n.starts_with("layers.") && (plan.trainable)(n))
        .map(|n| n.split('.').nth(1).unwrap().to_string())
        .collect();
    assert_eq!(trainable_layers.into_iter().collect::<Vec<_>>(), vec!["7"]);
}

#[test]
fn zero_steps_leave_output_unchanged() {
    let (mut model, windows) = finetune_setup(3);
    let x = RngStream::new(4).normal_tensor(&[2, 3, 12], 1.0);
    let opts = ForwardOptions::cm(GraphMode::Eval, RngStream::new(0));
    let before = run(&model, &x, &mut opts.clone());
    finetune(&mut model, &windows, &[], &small_spec(0, 0), Mode::Cm, &mut |_| {}).unwrap();
    assert_eq!(before, run(&model, &x, &mut opts.clone()));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    for optimizer in [varcast::model::OptimizerKind::Adam, varcast::model::OptimizerKind::Sgd] {
        let (mut model, windows) = finetune_setup(5);
        let before = model.params.clone();
        let spec = TrainSpec {
            lr: 0.0,
            optimizer,
            ..small_spec(5, 0)
        };
        pretrain(&mut model, &windows, &[], &spec, &mut |_| {}).unwrap();
        assert_eq!(before, model.params);
    }
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    let mut losses = Vec::new();
    for k in 0..2 {
        let (mut model, windows) = finetune_setup(6);
        let r = pretrain(&mut model, &windows, &windows[..4], &small_spec(12, 9), &mut |_| {}).unwrap();
        let r2 = finetune(&mut model, &windows, &windows[..4], &small_spec(12, 9), Mode::Cm, &mut |_| {}).unwrap();
        losses.push((r.losses, r2.losses));
        let path = dir.path().join(format!("m{k}.ckpt"));
        save_checkpoint(&model, &path).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
        assert_eq!(load_checkpoint(&path).unwrap(), model);
    }
    assert_eq!(losses[0], losses[1]);
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn inconsistent_channel_counts_are_rejected() {
    let (mut model, mut windows) = finetune_setup(7);
    windows.push(sine_windows(1, 1, 2, 16).remove(0));
    let err = finetune(&mut model, &windows, &[], &small_spec(3, 0), Mode::Cm, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn divergence_is_reported_with_step() {
    let (mut model, windows) = finetune_setup(8);
    let spec = TrainSpec {
        lr: 1e200,
        optimizer: varcast::model::OptimizerKind::Sgd,
        ..small_spec(50, 0)
    };
    let err = pretrain(&mut model, &windows, &[], &spec, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn pretraining_halves_validation_loss() {
    for seed in 0..3 {
        let cfg = ModelConfig::tiny(32, 8, 16, 2, 2);
        let mut model = build_model(&cfg, &mut RngStream::new(seed)).unwrap();
        let windows = sine_windows(100 + seed, 128, 1, 40);
        let val = sine_windows(200 + seed, 32, 1, 40);
        let spec = TrainSpec {
            steps: 500,
            seed,
            batch_size: 16,
            log_every: 100,
            ..TrainSpec::default()
        };
        let mut records = 0;
        let r = pretrain(&mut model, &windows, &val, &spec, &mut |_| records += 1).unwrap();
        let (a, b) = (r.initial_val.unwrap(), r.final_val.unwrap());
        assert!(b < 0.5 * a, "seed {seed}: {a} -> {b}");
        assert_eq!(records, 6);
        assert!(r.records.iter().all(|rec| rec.expert_loads.len() == 1));
    }
}

#[test]
fn custom_plan_trains_only_selected() {
    let (mut model, windows) = finetune_setup(9);
    let before = model.clone();
    let plan = TrainPlan {
        mode: Mode::Ci,
        graph_mode: GraphMode::Eval,
        trainable: Box::new(|n: &str| n.starts_with("head.")),
        update_routers: vec![false; 3],
    };
    train(&mut model, &windows, &[], &small_spec(4, 0), &plan, &mut |_| {}).unwrap();
    for (name, t) in before.params.iter() {
        assert_eq!(name.starts_with("head."), model.params.get(name) != Some(t), "{name}");
    }
    assert_eq!(before.routers, model.routers);
}
