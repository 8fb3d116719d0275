use drmea::anchors::compute_anchors;
use drmea::data::{gen_rotated_gaussians, rng_from_seed, GenParams};
use drmea::model::ManifoldNetwork;
use drmea::trainer::{self, adam_step, sgd_momentum_step, Ablation, OptimizerState, RunConfig};

fn small_task(seed: u64) -> drmea::data::GeneratedPair {
    gen_rotated_gaussians(&GenParams {
        dim: 6,
        n_per_class_source: 20,
        n_per_class_target: 20,
        seed,
        ..GenParams::default()
    })
    .unwrap()
}

#[test]
fn one_small_step_does_not_increase_the_batch_loss() {
    let mut checked = 0;
    for seed in 0..20u64 {
        let pair = small_task(seed);
        let cfg = RunConfig {
            dims: vec![8, 6],
            batch_size: 15,
            intra_grad_through_probs: true,
            seed,
            ..RunConfig::default()
        };
        let net = ManifoldNetwork::init(&cfg.network_dims(6, 3), &cfg.activations, seed).unwrap();
        let anchors = compute_anchors(&net, &pair.source, cfg.batch_size, None, 0).unwrap();
        let mut rng = rng_from_seed(seed);
        let is = drmea::data::random_batch(pair.source.len(), cfg.batch_size, &mut rng);
        let it = drmea::data::random_batch(pair.target.len(), cfg.batch_size, &mut rng);
        let xs = pair.source.features.select_columns(&is).unwrap();
        let ys: Vec<usize> = is.iter().map(|&i| pair.source.labels.as_ref().unwrap()[i]).collect();
        let xt = pair.target.features.select_columns(&it).unwrap();
        let objective = |net: &ManifoldNetwork| trainer::batch_objective(net, &cfg, &anchors, &xs, &ys, &xt, true);

        let Ok(before) = objective(&net) else { continue };
        if before.align_skips > 0 {
            continue;
        }
        for use_adam in [true, false] {
            let mut stepped = net.clone();
            let mut state = OptimizerState::new(&stepped.params());
            let mut params = stepped.params_mut();
            if use_adam {
                adam_step(&mut params, &before.grads, &mut state, 1e-6, 0.9, 0.999, 1e-8).unwrap();
            } else {
                sgd_momentum_step(&mut params, &before.grads, &mut state, 1e-6, 0.0, 0.0, 10.0, 0.75, 0.0).unwrap();
            }
            let after = objective(&stepped).unwrap().losses.total;
            let tol = 1e-12 * before.losses.total.abs().max(1.0);
            assert!(
                after <= before.losses.total + tol,
                "seed {seed} adam={use_adam}: {} -> {after}",
                before.losses.total
            );
        }
        checked += 1;
    }
    assert!(checked >= 15, "only {checked} non-degenerate batches");
}

#[test]
fn ablations_share_the_config_surface() {
    let pair = small_task(3);
    for ablation in [Ablation::NoDs, Ablation::NoAl, Ablation::SourceOnly] {
        let cfg = RunConfig {
            dims: vec![8, 6],
            batch_size: 15,
            epochs: 3,
            ablation,
            ..RunConfig::default()
        };
        let out = trainer::train(&cfg, &pair.source, &pair.target, Some(&pair.target_labels), None).unwrap();
        assert_eq!(out.logs.len(), 3);
        assert_eq!(out.anchor_refreshes, 4);
        let last = out.logs.last().unwrap();
        assert!((0.0..=1.0).contains(&last.tgt_acc));
        match ablation {
            Ablation::NoDs => assert_eq!(last.losses.ds, 0.0),
            Ablation::NoAl => assert_eq!(last.losses.al, 0.0),
            _ => assert_eq!((last.losses.ds, last.losses.al), (0.0, 0.0)),
        }
    }
}
