use super::*;
use crate::demo::{run_expert_episode, EpisodeRecord, ScriptedExpert};
use crate::diffusion::{DenoiserConfig, LossDraw};
use crate::encoder::EncoderConfig;
use crate::nn::check::{central_difference, spread_coords};
use crate::nn::ParamStore;
use crate::sim::{Catalog, Simulator, TaskFamily};

fn tiny_policy() -> PolicyConfig {
    PolicyConfig {
        encoder: EncoderConfig {
            image_width: 8,
            image_height: 8,
            stage_channels: vec![3, 4],
            token_dim: 16,
            attn_depth: 1,
            attn_heads: 2,
            ..Default::default()
        },
        denoiser: DenoiserConfig {
            token_dim: 16,
            depth: 1,
            heads: 2,
            ..Default::default()
        },
    }
}

fn episodes(n: usize) -> Vec<EpisodeRecord> {
    let sim = Simulator::new(Catalog::default().with_image_size(16, 16));
    (0..n)
        .map(|i| {
            let task = sim.task(TaskFamily::PickCup, (i % 4) as u32, None).unwrap();
            let mut r = run_expert_episode(&sim, &task, i as u64, 200, &ScriptedExpert::default()).unwrap();
            r.frames.truncate(30);
            r.actions.truncate(30);
            r
        })
        .collect()
}

fn tiny_train(box_on: bool, steps: usize) -> TrainConfig {
    TrainConfig {
        seed: 3,
        batch_size: 4,
        steps,
        lr: 1e-3,
        warmup_steps: 2,
        box_conditioning_enabled: box_on,
        policy: tiny_policy(),
        ..Default::default()
    }
}

#[test]
fn windows_cover_every_frame() {
    let data = TrainingSet::new(episodes(2)).unwrap();
    assert_eq!(data.windows.len(), 60);
    let w = data.windows[0];
    let obs = data.obs(&w, 2);
    assert_eq!(obs.frames.len(), 2);
    assert_eq!(obs.frames[0], obs.frames[1]);
    let t = data.target(&w, 16);
    assert_eq!(t.len(), 64);
    assert!(t.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(make_windows(&[]).is_err());
}

#[test]
fn constant_episode_gives_identical_targets() {
    let mut rec = episodes(1).remove(0);
    let a = rec.actions[0];
    for x in &mut rec.actions {
        *x = a;
    }
    let data = TrainingSet::new(vec![rec]).unwrap();
    let first = data.target(&data.windows[0], 16);
    assert!(data.windows.iter().all(|w| data.target(w, 16) == first));
    let dims = data.normalizer.degenerate_dims();
    assert!((0..4).all(|k| dims.contains(&format!("action[{k}]"))), "{dims:?}");
}

#[test]
fn normalizer_round_trips_dataset_values() {
    let data = TrainingSet::new(episodes(3)).unwrap();
    for r in &data.records {
        for a in &r.actions {
            let x = a.to_array();
            let y = data.normalizer.denorm_action(data.normalizer.norm_action(x));
            for k in 0..4 {
                assert!((x[k] - y[k]).abs() <= 1e-6);
            }
        }
        for f in &r.frames {
            let x = f.lowdim();
            let y = data.normalizer.denorm_lowdim(data.normalizer.norm_lowdim(x));
            for k in 0..4 {
                assert!((x[k] - y[k]).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = TrainingSet::new(episodes(2)).unwrap();
    let a = train_policy(&tiny_train(true, 6), &data).unwrap();
    let b = train_policy(&tiny_train(true, 6), &data).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.policy.store, b.policy.store);
}

#[test]
fn baseline_arm_ignores_dataset_boxes() {
    let data = TrainingSet::new(episodes(2)).unwrap();
    let stripped = data.clone().without_boxes();
    let a = train_policy(&tiny_train(false, 5), &data).unwrap();
    let b = train_policy(&tiny_train(false, 5), &stripped).unwrap();
    assert_eq!(a.losses, b.losses);
    let obs = vec![data.obs(&data.windows[7], 2)];
    let bare = vec![stripped.obs(&stripped.windows[7], 2)];
    assert_eq!(a.policy.predict(&obs, &[1]).unwrap(), b.policy.predict(&bare, &[1]).unwrap());

    let c = train_policy(&tiny_train(true, 5), &data).unwrap();
    let d = train_policy(&tiny_train(true, 5), &stripped).unwrap();
    assert_ne!(c.losses, d.losses);
}

#[test]
fn arms_share_every_parameter_shape() {
    let data = TrainingSet::new(episodes(1)).unwrap();
    let dp = Policy::new(tiny_train(false, 1).effective_policy(), data.normalizer.clone(), 0).unwrap();
    let rg = Policy::new(tiny_train(true, 1).effective_policy(), data.normalizer.clone(), 0).unwrap();
    assert_eq!(shape_audit(&dp), shape_audit(&rg));
    assert_eq!(dp.store, rg.store);
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = TrainingSet::new(episodes(2)).unwrap();
    let cfg = TrainConfig {
        output_dir: Some(dir.path().to_path_buf()),
        log_every: 2,
        checkpoint_every: 2,
        ..tiny_train(true, 5)
    };
    let out = train_policy(&cfg, &data).unwrap();
    assert_eq!(out.policy.golden.len(), 2);
    let path = dir.path().join(FINAL_CHECKPOINT);
    assert!(dir.path().join(PERIODIC_CHECKPOINT).exists());
    let loaded = Policy::load(&path).unwrap();
    assert_eq!(loaded.store, out.policy.store);
    assert!(loaded.golden_error().unwrap() <= 1e-6);
    assert_eq!(loaded.train_config.as_ref().unwrap().seed, 3);

    let log = read_log(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 2, 4]);
    assert_eq!(log[1].loss, out.losses[2]);

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Policy::load(&cut), Err(TrainError::Corrupt(_))));
    let mut bumped = bytes.clone();
    bumped[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let vpath = dir.path().join("v.bin");
    std::fs::write(&vpath, &bumped).unwrap();
    assert!(matches!(Policy::load(&vpath), Err(TrainError::Version { found: 2, expected: 1 })));
}

#[test]
fn tampered_weights_fail_golden_check() {
    let data = TrainingSet::new(episodes(1)).unwrap();
    let mut p = train_policy(&tiny_train(true, 2), &data).unwrap().policy;
    p.store.entry_mut(crate::nn::ParamId(0)).value.data_mut()[0] += 0.5;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    p.save(&path).unwrap();
    assert!(matches!(Policy::load(&path), Err(TrainError::Corrupt(_))));
}

#[test]
fn non_finite_loss_aborts_with_last_good_checkpoint() {
    let mut recs = episodes(1);
    recs[0].actions[3].x = f64::NAN;
    let data = TrainingSet::new(recs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        output_dir: Some(dir.path().to_path_buf()),
        batch_size: 30,
        ..tiny_train(true, 3)
    };
    match train_policy(&cfg, &data) {
        Err(TrainError::NonFinite { step: 0, checkpoint: Some(p) }) => assert!(p.exists()),
        other => panic!("expected non-finite abort, got {other:?}"),
    }
}

#[test]
fn end_to_end_loss_gradient_matches_finite_differences() {
    let data = TrainingSet::new(episodes(1)).unwrap();
    let policy = Policy::new(tiny_train(true, 1).effective_policy(), data.normalizer.clone(), 5).unwrap();
    let store: ParamStore<f64> = policy.store.cast();
    let ws = [data.windows[3], data.windows[20]];
    let obs: Vec<PolicyObs> = ws.iter().map(|w| data.obs(w, 2)).collect();
    let x0: Vec<f64> = ws.iter().flat_map(|w| data.target(w, 16)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draw = LossDraw::sample(&policy.schedule, 2, 64, &mut rng);
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::<f64>::new();
        let tok = policy.encode(&mut g, s, &obs).unwrap();
        let l = crate::diffusion::diffusion_loss_with(&mut g, s, &policy.denoiser, &policy.schedule, &x0, tok, &draw).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::<f64>::new();
    let tok = policy.encode(&mut g, &store, &obs).unwrap();
    let l = crate::diffusion::diffusion_loss_with(&mut g, &store, &policy.denoiser, &policy.schedule, &x0, tok, &draw).unwrap();
    let grads = g.backward(l);
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let analytic = grads.param(id).unwrap().to_vec();
        let base = store.entry(id).value.data().to_vec();
        let chk = central_difference(&base, &analytic, &spread_coords(base.len(), 3), 1e-5, 1e-4, |x| {
            let mut s = store.clone();
            s.entry_mut(id).value.data_mut().copy_from_slice(x);
            eval(&s)
        });
        worst = worst.max(chk.max_rel_err);
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}
