mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use tied_plda::background::{BackgroundModel, BackgroundScorer, FactorAnalyser};
use tied_plda::data::{sample_corpus, synthetic_model, FeatureMatrix, LabelSequence, SyntheticSpec};
use tied_plda::eval::{evaluate, EvalConfig};
use tied_plda::inference::LikelihoodMode;
use tied_plda::model::{Hyperparams, SubState, TiedPldaModel};
use tied_plda::shard::ExecPolicy;
use tied_plda::training::*;

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

fn small_fixture(seed: u64, frames_per_state: usize) -> (TiedPldaModel, tied_plda::data::Corpus) {
    let mut spec = SyntheticSpec::standard();
    spec.hyper.num_states = 4;
    let truth = synthetic_model(&spec, seed).unwrap();
    let corpus = sample_corpus(&truth, frames_per_state, seed + 1).unwrap();
    (truth, corpus)
}

#[test]
fn responsibilities_follow_bayes_rule() {
    let mut rng = rng(1);
    let mut model = random_model(&mut rng, Hyperparams::new(3, 1, 1, 2, 1).unwrap(), 1);
    for c in &mut model.components {
        c.state_loading.fill(0.0);
    }
    model.states[0].substates[0].vector.fill(0.0);
    let frames = [random_vector(&mut rng, 3, 2.0), random_vector(&mut rng, 3, 2.0)];
    let mut total = [0.0; 2];
    for (t, y) in frames.iter().enumerate() {
        let f = FeatureMatrix::new(1, 3, y.as_slice().to_vec()).unwrap();
        let l = LabelSequence::hard([0]);
        let e = estep(&model, &Dataset::new(&f, &l), &EStepConfig::default()).unwrap();
        let joint: Vec<f64> = (0..2)
            .map(|m| {
                let c = &model.components[m];
                model.states[0].component_weights[m] * dense_log_normal(y, &c.bias, &marginal_cov(c)).exp()
            })
            .collect();
        let norm: f64 = joint.iter().sum();
        for m in 0..2 {
            let gamma = joint[m] / norm;
            assert!((e.acc.pair_occupancy[0][(0, m)] - gamma).abs() < 1e-12, "frame {t} m {m}");
            total[m] += gamma;
        }
    }
    let both = FeatureMatrix::from_rows(&[frames[0].as_slice().to_vec(), frames[1].as_slice().to_vec()]).unwrap();
    let l = LabelSequence::hard([0, 0]);
    let e = estep(&model, &Dataset::new(&both, &l), &EStepConfig::default()).unwrap();
    for m in 0..2 {
        assert!((e.acc.pair_occupancy[0][(0, m)] - total[m]).abs() < 1e-12);
    }
}

#[test]
fn single_component_gets_all_mass() {
    let mut rng = rng(2);
    let model = random_model(&mut rng, Hyperparams::new(3, 1, 1, 1, 1).unwrap(), 1);
    let corpus = sample_corpus(&model, 50, 3).unwrap();
    let e = estep(&model, &Dataset::new(&corpus.features, &corpus.labels), &EStepConfig::default()).unwrap();
    assert_eq!(e.acc.pair_occupancy[0][(0, 0)], 50.0);
}

#[test]
fn responsibility_mass_is_conserved() {
    let (truth, corpus) = small_fixture(3, 100);
    let mut labels = corpus.labels.clone();
    // Soft labels for every other frame.
    for t in (0..labels.len()).step_by(2) {
        let j = labels.best_state(t).unwrap();
        labels.frames[t] = tied_plda::data::FrameLabel::Soft(vec![(j, 0.75), ((j + 1) % 4, 0.25)]);
    }
    let e = estep(&truth, &Dataset::new(&corpus.features, &labels), &EStepConfig::default()).unwrap();
    let mass: f64 = e.acc.pair_occupancy.iter().map(|o| o.sum()).sum();
    assert!((mass - labels.len() as f64).abs() < 1e-9);
    assert!((e.acc.total_occupancy() - mass).abs() < 1e-9);
    assert!((e.acc.state_mass - mass).abs() < 1e-9);
}

fn rel_close(a: &Accumulators, b: &Accumulators, tol: f64) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0);
    let mats = |x: &DMatrix<f64>, y: &DMatrix<f64>| x.iter().zip(y.iter()).all(|(p, q)| close(*p, *q));
    let vecs = |x: &DVector<f64>, y: &DVector<f64>| x.iter().zip(y.iter()).all(|(p, q)| close(*p, *q));
    a.frames == b.frames
        && close(a.loglik, b.loglik)
        && a.pair_occupancy.iter().zip(&b.pair_occupancy).all(|(x, y)| mats(x, y))
        && a.components.iter().zip(&b.components).all(|(x, y)| {
            close(x.occupancy, y.occupancy)
                && vecs(&x.frame_sum, &y.frame_sum)
                && mats(&x.frame_moment, &y.frame_moment)
                && mats(&x.frame_cross, &y.frame_cross)
                && mats(&x.state_cross, &y.state_cross)
                && mats(&x.state_moment, &y.state_moment)
                && vecs(&x.bias_sum, &y.bias_sum)
                && vecs(&x.noise_sum, &y.noise_sum)
        })
}

#[test]
fn merge_is_associative() {
    let (truth, _) = small_fixture(4, 10);
    let parts: Vec<Accumulators> = (0..3)
        .map(|i| {
            let c = sample_corpus(&truth, 40, 100 + i).unwrap();
            estep(&truth, &Dataset::new(&c.features, &c.labels), &EStepConfig::default()).unwrap().acc
        })
        .collect();
    let left = parts[0].clone().merge(parts[1].clone()).merge(parts[2].clone());
    let right = parts[0].clone().merge(parts[1].clone().merge(parts[2].clone()));
    assert!(rel_close(&left, &right, 1e-10));
}

#[test]
fn deterministic_mode_is_bit_exact_across_thread_counts() {
    let (truth, corpus) = small_fixture(5, 1500);
    let data = Dataset::new(&corpus.features, &corpus.labels);
    let cfg = EStepConfig::default();
    let a = pool(1).install(|| estep(&truth, &data, &cfg)).unwrap().acc;
    let b = pool(4).install(|| estep(&truth, &data, &cfg)).unwrap().acc;
    assert_eq!(a, b);
    let loose = EStepConfig {
        policy: ExecPolicy { deterministic: false },
        ..cfg
    };
    let c = pool(3).install(|| estep(&truth, &data, &loose)).unwrap().acc;
    assert!(rel_close(&a, &c, 1e-10));

    let tc = TrainConfig {
        iterations: 2,
        ..TrainConfig::default()
    };
    let run = |threads| {
        pool(threads).install(|| Trainer::new(tc).run(truth.clone(), &data, |_| {}).unwrap().0)
    };
    let (m1, m2) = (run(1), run(4));
    let (mut b1, mut b2) = (Vec::new(), Vec::new());
    m1.write(&mut b1).unwrap();
    m2.write(&mut b2).unwrap();
    assert_eq!(b1, b2);
}

#[test]
fn closed_form_updates_never_decrease_their_auxiliary() {
    let mut rng = rng(6);
    for i in 0..50 {
        let model = random_model(&mut rng, Hyperparams::new(4, 2, 2, 2, 2).unwrap(), 2);
        let c = sample_corpus(&model, 40, 200 + i).unwrap();
        let e = estep(&model, &Dataset::new(&c.features, &c.labels), &EStepConfig::default()).unwrap();
        let base = e.apply_state_vectors(&model);
        let (us, _) = update_frame_loading(&e.acc, &base).unwrap();
        let (gs, _) = update_state_loading(&e.acc, &base).unwrap();
        let (bs, _) = update_bias(&e.acc, &base);
        let (ls, _) = update_noise(&e.acc, &base, &variance_floor(&c.features, 1e-6));
        for (m, (ca, old)) in e.acc.components.iter().zip(&base.components).enumerate() {
            let lam = &old.noise_var;
            assert!(aux_frame_loading(ca, lam, &us[m]) >= aux_frame_loading(ca, lam, &old.frame_loading) - 1e-8);
            assert!(aux_state_loading(ca, lam, &gs[m]) >= aux_state_loading(ca, lam, &old.state_loading) - 1e-8);
            assert!(aux_bias(ca, lam, &bs[m]) >= aux_bias(ca, lam, &old.bias) - 1e-8);
            assert!(aux_noise(ca, &ls[m]) >= aux_noise(ca, lam) - 1e-8);
        }
    }
}

#[test]
fn frame_loading_recovered_from_true_posteriors() {
    let mut rng = rng(7);
    let model = random_model(&mut rng, Hyperparams::new(6, 2, 1, 1, 1).unwrap(), 1);
    let c = sample_corpus(&model, 100_000, 8).unwrap();
    let e = estep(&model, &Dataset::new(&c.features, &c.labels), &EStepConfig::default()).unwrap();
    let (us, _) = update_frame_loading(&e.acc, &e.apply_state_vectors(&model)).unwrap();
    let truth = &model.components[0].frame_loading;
    let rel = (&us[0] - truth).norm() / truth.norm();
    assert!(rel < 0.05, "relative error {rel}");
}

#[test]
fn unused_component_keeps_its_parameters() {
    let (truth, corpus) = small_fixture(9, 100);
    let sel = vec![vec![0, 1, 2]; corpus.features.num_frames()];
    let data = Dataset::new(&corpus.features, &corpus.labels).with_selection(&sel);
    let (next, _) = em_iteration(&truth, &data, &TrainConfig::default(), 1).unwrap();
    assert_eq!(next.components[3], truth.components[3]);
    assert_ne!(next.components[0], truth.components[0]);
}

#[test]
fn degenerate_model_reduces_to_a_diagonal_gaussian() {
    let rows: Vec<Vec<f64>> = (0..200).map(|t| vec![(t % 7) as f64, ((t * 3) % 11) as f64 * 0.5]).collect();
    let f = FeatureMatrix::from_rows(&rows).unwrap();
    let l = LabelSequence::hard(vec![0; 200]);
    let (mean, var) = f.mean_var();
    let mut model = TiedPldaModel::new(Hyperparams::new(2, 1, 1, 1, 1).unwrap(), 1).unwrap();
    let data = Dataset::new(&f, &l);
    let e = estep(&model, &data, &EStepConfig::default()).unwrap();
    let (bs, _) = update_bias(&e.acc, &model);
    assert!((&bs[0] - &mean).amax() < 1e-12);
    model.components[0].bias = mean.clone();
    let e = estep(&model, &data, &EStepConfig::default()).unwrap();
    let (ls, _) = update_noise(&e.acc, &model, &DVector::zeros(2));
    assert!((&ls[0] - &var).amax() < 1e-10, "{} vs {}", ls[0], var);
    let (us, _) = update_frame_loading(&e.acc, &model).unwrap();
    assert_eq!(us[0].amax(), 0.0);
}

#[test]
fn weight_update_matches_occupancy_ratios() {
    let model = TiedPldaModel::new(Hyperparams::new(2, 1, 1, 2, 2).unwrap(), 2).unwrap();
    let mut acc = Accumulators::zeros(&model);
    acc.pair_occupancy[0] = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 2.0]);
    acc.pair_occupancy[1] = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    let (w, info) = update_weights(&acc, &model, 0.0).unwrap();
    assert_eq!(info.floored, 0);
    assert_eq!(w[0].substate, vec![3.0 / 8.0, 5.0 / 8.0]);
    assert_eq!(w[0].component.as_slice(), &[4.0 / 8.0, 4.0 / 8.0]);
    assert_eq!(w[1].substate, vec![0.5, 0.5]);
    assert_eq!(w[1].component.as_slice(), &[0.5, 0.5]);

    acc.pair_occupancy[0] = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 6.0]);
    let (w, info) = update_weights(&acc, &model, 1e-5).unwrap();
    assert_eq!(info.floored, 1);
    assert!(w[0].component[0] >= 1e-5);
    assert!((w[0].component.sum() - 1.0).abs() < 1e-10);
}

#[test]
fn training_log_likelihood_is_monotone() {
    let (truth, corpus) = small_fixture(10, 500);
    let start = mixup(&truth, truth.total_substates(), 0, None).unwrap();
    let mut perturbed = start.clone();
    for c in &mut perturbed.components {
        c.frame_loading *= 0.5;
        c.noise_var *= 2.0;
    }
    let data = Dataset::new(&corpus.features, &corpus.labels);
    let (_, reports) = Trainer::new(TrainConfig { iterations: 10, ..TrainConfig::default() })
        .run(perturbed, &data, |_| {})
        .unwrap();
    for w in reports.windows(2).skip(1) {
        assert!(w[1].avg_loglik >= w[0].avg_loglik - 1e-4 * w[0].avg_loglik.abs(), "{reports:#?}");
    }
}

#[test]
fn evaluate_matches_estep_total() {
    let (truth, corpus) = small_fixture(11, 300);
    let bg = BackgroundModel {
        components: truth
            .components
            .iter()
            .map(|c| FactorAnalyser {
                mean: c.bias.clone(),
                loading: c.frame_loading.clone(),
                noise_var: c.noise_var.clone(),
                weight: 0.25,
            })
            .collect(),
    };
    let sel = BackgroundScorer::new(&bg)
        .unwrap()
        .select_all(&corpus.features, 2, ExecPolicy::default())
        .unwrap();
    for selection in [None, Some(sel.as_slice())] {
        for mode in [LikelihoodMode::Point, LikelihoodMode::Uncertainty] {
            let mut data = Dataset::new(&corpus.features, &corpus.labels);
            data.selection = selection;
            let e = estep(&truth, &data, &EStepConfig { mode, policy: ExecPolicy::default() }).unwrap();
            let r = evaluate(&truth, &data, &EvalConfig { mode, policy: ExecPolicy::default() }).unwrap();
            let from_estep = e.acc.loglik / e.acc.frames as f64;
            assert!((r.avg_loglik - from_estep).abs() <= 1e-10 * from_estep.abs());
        }
    }
}

#[test]
fn init_from_trivial_background() {
    let h = Hyperparams::new(3, 2, 1, 2, 4).unwrap();
    let bg = BackgroundModel {
        components: (0..2)
            .map(|m| FactorAnalyser {
                mean: DVector::from_element(3, m as f64),
                loading: DMatrix::zeros(3, 2),
                noise_var: DVector::from_element(3, 1.0),
                weight: 0.5,
            })
            .collect(),
    };
    let a = init_model(&bg, h, 5).unwrap();
    for c in &a.components {
        assert_eq!(c.noise_var, DVector::from_element(3, 1.0));
        assert_eq!(c.frame_loading.amax(), 0.0);
    }
    assert_eq!(a, init_model(&bg, h, 5).unwrap());
    assert_eq!(a.total_substates(), 4);
}

#[test]
fn init_then_estep_is_finite() {
    let (_, corpus) = small_fixture(12, 200);
    let cfg = tied_plda::background::BgTrainConfig::new(4, 3, 5, 1);
    let bg = tied_plda::background::train_bg(&corpus.features, &cfg).unwrap().model;
    let h = Hyperparams::new(10, 3, 3, 4, 4).unwrap();
    let model = init_model(&bg, h, 1).unwrap();
    let e = estep(&model, &Dataset::new(&corpus.features, &corpus.labels), &EStepConfig::default()).unwrap();
    assert!(e.acc.loglik.is_finite());
}

#[test]
fn starved_substates_merge_after_three_iterations() {
    let (truth, corpus) = small_fixture(13, 200);
    let mut model = truth.clone();
    // A far-away sub-state in state 0 that no frame will visit.
    let far = DVector::from_element(3, 1e3);
    for s in &mut model.states[0].substates {
        s.weight *= 0.99;
    }
    model.states[0].substates.push(SubState { vector: far.clone(), weight: 0.01 });
    let data = Dataset::new(&corpus.features, &corpus.labels);
    let mut trainer = Trainer::new(TrainConfig::default());
    let mut current = model;
    for it in 1..=3 {
        let (next, report) = trainer.step(&current, &data).unwrap();
        current = next;
        let k = current.states[0].substates.len();
        assert_eq!(k, if it < 3 { 3 } else { 2 }, "iteration {it}: {:?}", report.substate_occupancy[0]);
        if it < 3 {
            // Frozen without data.
            assert_eq!(current.states[0].substates[2].vector, far);
        }
    }
    current.validate().unwrap();
}

#[test]
fn config_round_trips_and_errors_name_the_line() {
    let err = "iterations = 3\nselect-n = x\n".parse::<TrainConfig>().unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
    let cfg = TrainConfig::default();
    assert_eq!(cfg.to_string().parse::<TrainConfig>().unwrap(), cfg);
}
