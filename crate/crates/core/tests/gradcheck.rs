mod common;

use common::GradCase;
use rankmerge::losses::LossKind;

#[test]
fn every_loss_matches_finite_differences() {
    for kind in LossKind::ALL {
        for seed in 0..20 {
            let mut case = GradCase::random(kind, 1000 + seed);
            let (err, entrywise) = case.check();
            assert!(err < 1e-4, "{kind} seed {seed}: relative error {err:e}");
            assert!(entrywise, "{kind} seed {seed}: an entry is off");
        }
    }
}

#[test]
fn joint_case_carries_rho_gradients() {
    let case = GradCase::random(LossKind::CmclWithRho, 3);
    assert!(case.rho.is_some());
    let plain = GradCase::random(LossKind::Cmcl, 3);
    assert!(plain.rho.is_none());
}
