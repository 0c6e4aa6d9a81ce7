use uniweight::matching::Strategy;
use uniweight::toydet::{run_strategy_comparison, train, train_for, TrainConfig};

fn short(s: Strategy, iters: usize) -> TrainConfig {
    let mut c = TrainConfig::standard_noisy().with_strategy(s);
    c.schedule.epochs = 1;
    c.schedule.iters_per_epoch = iters;
    c.schedule.decay_epochs.clear();
    c.eval.heldout_scenes = 32;
    c
}

#[test]
fn clean_random_training_improves_map() {
    let mut c = short(Strategy::Random, 200);
    c.scene = c.scene.clean();
    let out = train(&c).unwrap();
    let before = out.history.initial.unwrap().ap;
    let after = out.history.final_eval().unwrap().ap;
    assert!(after > before + 0.1, "AP {before} -> {after}");
}

#[test]
fn weighting_network_stays_finite_and_bounded() {
    let c = short(Strategy::Swn, 5000);
    let out = train_for(&c, Some(5000)).unwrap();
    assert_eq!(out.history.iters.len(), 5000);
    let bound = c.swn.clip_bound;
    for r in &out.history.iters {
        assert!(r.loss.is_finite() && r.w_cls_all.is_finite() && r.w_reg_pos.is_finite(), "iter {}", r.iter);
        assert!(r.m_min >= -bound && r.m_max <= bound, "iter {}: m in [{}, {}]", r.iter, r.m_min, r.m_max);
    }
    assert!(out.swn.to_flat().iter().all(|v| v.is_finite()));
    assert!(out.detector.to_flat().iter().all(|v| v.is_finite()));
}

#[test]
fn indicator_strategies_match_the_subset_objective() {
    for s in [Strategy::Random, Strategy::Ohem] {
        let out = train_for(&short(s, 50), Some(50)).unwrap();
        assert!(out.history.iters.iter().all(|r| r.eq_gap <= 1e-12), "{s}");
    }
}

#[test]
fn duplicate_strategies_give_identical_rows() {
    let rows = run_strategy_comparison(&short(Strategy::Random, 30), &[Strategy::Focal, Strategy::Focal]).unwrap();
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn training_is_deterministic() {
    let c = short(Strategy::Swn, 40);
    let a = train(&c).unwrap();
    let b = train(&c).unwrap();
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert_eq!(a.swn.to_flat(), b.swn.to_flat());
}
