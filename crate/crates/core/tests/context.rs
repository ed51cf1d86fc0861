mod common;

use common::{permutation_trial, ScmScene};

#[test]
fn reordering_relations_only_reorders_corrections() {
    for seed in 0..40 {
        let (d_sc, d_token, rows_exact) = permutation_trial(seed, 8);
        assert!(d_sc <= 1e-10 && d_token <= 1e-10, "seed {seed}: {d_sc} {d_token}");
        assert!(rows_exact, "seed {seed}");
    }
}

#[test]
fn gap_vanishes_when_prediction_matches_ground_truth() {
    let scene = ScmScene::random(11, 5, 8, 6, 4);
    let mut params = scene.params.clone();
    // Saturated logits put all mass on the ground-truth predicate.
    let z = params.value_mut(common::Z_F).unwrap();
    z.fill(-1e3);
    for (i, &p) in scene.gt_pred.iter().enumerate() {
        z.row_mut(i)[p] = 1e3;
    }
    let mut exact = ScmScene { params, ..scene };
    for (i, &s) in exact.gt_subj.clone().iter().enumerate() {
        exact.subj[i] = one_hot(exact.subj[i].len(), s);
    }
    for (i, &o) in exact.gt_obj.clone().iter().enumerate() {
        exact.obj[i] = one_hot(exact.obj[i].len(), o);
    }
    let out = exact.forward(&exact.params, false);
    assert!(out.l_sc < 1e-20, "{}", out.l_sc);
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}
