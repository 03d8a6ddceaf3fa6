use graspbox_core::demo::{
    generate_dataset, generate_episodes, read_episode, run_expert_episode, write_episode, DatasetManifest, DemoConfig,
    EpisodeOutcome, ScriptedExpert,
};
use graspbox_core::sim::{Catalog, Simulator, TaskFamily};

fn sim(px: usize) -> Simulator {
    Simulator::new(Catalog::default().with_image_size(px, px))
}

#[test]
fn expert_success_rate_per_condition() {
    let sim = sim(8);
    let expert = ScriptedExpert::default();
    let mut longest = 0;
    for family in TaskFamily::ALL {
        for target in sim.candidate_targets(family) {
            for p in 0..family.placement_count() {
                let task = sim.task(family, p, Some(target)).unwrap();
                let mut ok = 0;
                for seed in 0..100 {
                    let rec = run_expert_episode(&sim, &task, seed, 200, &expert).unwrap();
                    longest = longest.max(rec.len());
                    ok += rec.outcome.task_success as usize;
                }
                assert!(ok >= 99, "{family} {target} placement {p}: {ok}/100");
            }
        }
    }
    assert!(longest <= 120, "episodes unexpectedly long: {longest}");
}

#[test]
fn pick_big_protocol_yields_600_episodes() {
    let sim = sim(4);
    let cfg = DemoConfig::protocol(&sim, TaskFamily::PickBig, 1);
    let eps = generate_episodes(&sim, &cfg).unwrap();
    assert_eq!(eps.len(), 600);
    for p in 0..8 {
        assert_eq!(eps.iter().filter(|e| e.task.placement_id == p).count(), 75);
    }
}

#[test]
fn pick_cup_protocol_yields_315_episodes() {
    let sim = sim(4);
    let cfg = DemoConfig::protocol(&sim, TaskFamily::PickCup, 1);
    let eps = generate_episodes(&sim, &cfg).unwrap();
    assert_eq!(eps.len(), 315);
}

#[test]
fn dataset_round_trip_and_replay() {
    let sim = sim(24);
    let mut cfg = DemoConfig::protocol(&sim, TaskFamily::PickGoods, 9);
    for c in &mut cfg.conditions {
        c.count = 2;
    }
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&sim, &cfg, dir.path()).unwrap();
    assert_eq!(manifest.episodes.len(), 8);
    let reloaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(reloaded, manifest);
    let eps = reloaded.load_episodes(dir.path()).unwrap();
    let fresh = generate_episodes(&sim, &cfg).unwrap();
    assert_eq!(eps, fresh, "stored episodes equal regenerated ones field for field");
    let replay_sim = Simulator::new(reloaded.catalog.clone());
    for e in &eps {
        assert!(e.task.prompt_box.is_some());
        let s = e.replay(&replay_sim).unwrap();
        assert_eq!(EpisodeOutcome::of(&replay_sim, &s), e.outcome);
        assert_eq!(s.events, e.events);
    }
}

#[test]
fn truncated_episode_is_rejected() {
    let sim = sim(16);
    let task = sim.task(TaskFamily::PickBig, 1, None).unwrap();
    let rec = run_expert_episode(&sim, &task, 3, 200, &ScriptedExpert::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ep.bin");
    write_episode(&path, &rec).unwrap();
    assert_eq!(read_episode(&path).unwrap(), rec);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(read_episode(&path).is_err());
}
