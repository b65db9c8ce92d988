mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use tied_plda::data::{sample_corpus, synthetic_model, SyntheticSpec};
use tied_plda::eval::{evaluate, EvalConfig};
use tied_plda::inference::{
    loglik_point, loglik_uncertainty, LikelihoodMode, Scorer, WoodburyFactor,
};
use tied_plda::model::Hyperparams;
use tied_plda::training::Dataset;

#[test]
fn woodbury_matches_dense_up_to_d64() {
    let mut rng = rng(1);
    for d in [1, 2, 7, 16, 33, 64] {
        for p in [1, d.min(3), d] {
            let u = random_matrix(&mut rng, d, p, 1.0);
            let lam = random_noise(&mut rng, d);
            let cov = &u * u.transpose() + DMatrix::from_diagonal(&lam);
            let w = WoodburyFactor::new(&u, &lam).unwrap();
            let direct = cov.clone().cholesky().unwrap().inverse();
            assert!((w.inverse() - &direct).amax() <= 1e-10 * direct.amax(), "d={d} p={p}");
            for _ in 0..5 {
                let y = random_vector(&mut rng, d, 2.0);
                let want = dense_log_normal(&y, &DVector::zeros(d), &cov);
                let got = w.log_density_centered(y.as_slice());
                assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "d={d} p={p}");
            }
        }
    }
}

#[test]
fn state_likelihood_matches_linear_domain_sum() {
    let mut rng = rng(2);
    for _ in 0..20 {
        let model = random_model(&mut rng, Hyperparams::new(3, 1, 2, 3, 2).unwrap(), 2);
        let scorer = Scorer::new(&model).unwrap();
        let y = random_vector(&mut rng, 3, 2.0);
        for j in 0..2 {
            let mut lin = 0.0;
            for (k, sub) in model.states[j].substates.iter().enumerate() {
                for (m, c) in model.components.iter().enumerate() {
                    let mean = &c.state_loading * &sub.vector + &c.bias;
                    lin += model.pair_weight(j, k, m) * dense_log_normal(&y, &mean, &marginal_cov(c)).exp();
                }
            }
            let got = scorer.state_loglik(j, y.as_slice(), None, LikelihoodMode::Uncertainty).unwrap();
            assert!((got - lin.ln()).abs() <= 1e-10, "{got} vs {}", lin.ln());
        }
    }
}

#[test]
fn zero_frame_loading_collapses_both_schemes() {
    let mut rng = rng(3);
    let mut model = random_model(&mut rng, Hyperparams::new(4, 2, 2, 2, 1).unwrap(), 2);
    for c in &mut model.components {
        c.frame_loading.fill(0.0);
    }
    let y = random_vector(&mut rng, 4, 1.0);
    let z: Vec<DVector<f64>> = model.states[0].substates.iter().map(|s| s.vector.clone()).collect();
    let x = vec![DVector::zeros(2); 4];
    let a = loglik_uncertainty(&model, 0, y.as_slice(), &z).unwrap();
    let b = loglik_point(&model, 0, y.as_slice(), &x, &z).unwrap();
    assert!((a.total - b.total).abs() < 1e-12);
    assert_eq!(a.best, b.best);
}

#[test]
fn rescaled_weights_leave_scores_unchanged() {
    let mut rng = rng(4);
    let model = random_model(&mut rng, Hyperparams::new(3, 1, 1, 3, 2).unwrap(), 3);
    let mut scaled = model.clone();
    for s in &mut scaled.states {
        let c: Vec<f64> = s.substates.iter().map(|x| 3.7 * x.weight).collect();
        let total: f64 = c.iter().sum();
        for (sub, v) in s.substates.iter_mut().zip(c) {
            sub.weight = v / total;
        }
        let pi = &s.component_weights * 3.7;
        s.component_weights = &pi / pi.sum();
    }
    let (a, b) = (Scorer::new(&model).unwrap(), Scorer::new(&scaled).unwrap());
    for _ in 0..10 {
        let y = random_vector(&mut rng, 3, 2.0);
        for j in 0..2 {
            let fa = a.frame_score(j, y.as_slice(), None, LikelihoodMode::Uncertainty).unwrap();
            let fb = b.frame_score(j, y.as_slice(), None, LikelihoodMode::Uncertainty).unwrap();
            assert!((fa.total - fb.total).abs() < 1e-12);
            assert_eq!(fa.best, fb.best);
        }
    }
}

#[test]
fn restriction_to_every_component_changes_nothing() {
    let mut rng = rng(5);
    let model = random_model(&mut rng, Hyperparams::new(3, 1, 1, 3, 2).unwrap(), 2);
    let scorer = Scorer::new(&model).unwrap();
    let all = [0, 1, 2];
    for _ in 0..10 {
        let y = random_vector(&mut rng, 3, 2.0);
        for mode in [LikelihoodMode::Point, LikelihoodMode::Uncertainty] {
            let a = scorer.frame_score(1, y.as_slice(), None, mode).unwrap();
            let b = scorer.frame_score(1, y.as_slice(), Some(&all), mode).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn log_domain_survives_far_frames() {
    let mut rng = rng(6);
    let model = random_model(&mut rng, Hyperparams::new(3, 1, 1, 2, 1).unwrap(), 1);
    let scorer = Scorer::new(&model).unwrap();
    let y = [1e3, -1e3, 5e2];
    let v = scorer.state_loglik(0, &y, None, LikelihoodMode::Uncertainty).unwrap();
    assert!(v.is_finite() && v < -1e4);
}

#[test]
fn classification_beats_chance_on_sampled_data() {
    let truth = synthetic_model(&SyntheticSpec::standard(), 9).unwrap();
    let corpus = sample_corpus(&truth, 200, 10).unwrap();
    let report = evaluate(&truth, &Dataset::new(&corpus.features, &corpus.labels), &EvalConfig::default()).unwrap();
    assert!(report.accuracy > 1.0 / 10.0, "{}", report.accuracy);
}
