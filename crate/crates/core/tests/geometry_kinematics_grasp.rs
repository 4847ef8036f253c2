//! Randomised identities for the frame algebra, the Jacobian and the grasp
//! decomposition, each against an independent oracle.

use duoloco::geometry::{canonicalize, decanonicalize};
use duoloco::RobotModel;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[path = "support/oracles.rs"]
mod oracles;
use oracles::*;

#[test]
fn canonicalization_is_invariant_over_1000_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (g, t_ref, t_world) = (
            random_pose(&mut rng, 50.0),
            random_pose(&mut rng, 5.0),
            random_pose(&mut rng, 5.0),
        );
        let (dp, dq) = canonical_invariance_error(&g, &t_ref, &t_world);
        worst = (worst.0.max(dp), worst.1.max(dq));
    }
    assert!(worst.0 < 1e-9 && worst.1 < 1e-9, "{worst:?}");
}

#[test]
fn jacobian_matches_finite_differences_on_200_states() {
    let model = RobotModel::quadruped_arm();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..200 {
        let state = random_whole_body_state(&mut rng, &model);
        let e = jacobian_fd_error(&model, &state);
        assert!(e < 1e-5, "case {case}: {e}");
    }
}

#[test]
fn grasp_projector_identities_on_200_geometries() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..200 {
        let grasp = random_grasp(&mut rng);
        let e = grasp_identity_error(&mut rng, &grasp);
        assert!(e < 1e-9, "case {case}: {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn decanonicalize_inverts_canonicalize(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t_ref, p) = (random_pose(&mut rng, 10.0), random_pose(&mut rng, 10.0));
        let back = decanonicalize(&t_ref, &canonicalize(&t_ref, &p));
        let dp = (back.translation() - p.translation()).norm();
        let (qa, qb) = (back.rotation().coords, p.rotation().coords);
        let dq = (qa - qb).norm().min((qa + qb).norm());
        prop_assert!(dp < 1e-9 && dq < 1e-9, "{} {}", dp, dq);
    }

    #[test]
    fn internal_part_is_invisible_to_the_object(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grasp = random_grasp(&mut rng);
        prop_assert!(grasp_identity_error(&mut rng, &grasp) < 1e-9);
    }
}
