use lpvss::cra::{estimate_table_cra, CraConfig};
use lpvss::em::{em_initial_model, em_refine, EmConfig};
use lpvss::fir::estimate_table_fir;
use lpvss::gb::{gb_refine, GbConfig};
use lpvss::harness::{bfr, identification_signals, identify, set_snr, standard_normal, Estimator, PipelineConfig};
use lpvss::markov::{true_table, SubMarkovTable};
use lpvss::model::{one_step_predict, random_stable_model, simulate, LpvSsModel, ModelDims};
use lpvss::realization::{greedy_selection, realize_table, required_keys, Order, SelectionBasis, EXACT_RANK_TOL};
use nalgebra::DVector;

fn system() -> LpvSsModel {
    random_stable_model(ModelDims { nx: 2, nu: 2, ny: 2, npsi: 2 }, 0.5, 17).unwrap()
}

fn sim_fit(model: &LpvSsModel, truth: &LpvSsModel, seed: u64) -> f64 {
    let (u, p) = identification_signals(2, truth.basis.np, 300, [-1.0, 1.0], [-0.9, 0.9], seed);
    let x0 = DVector::zeros(truth.nx());
    let y = simulate(&truth.noise_free(), &u, &p, &x0, 0).unwrap().y;
    let yh = simulate(&model.noise_free(), &u, &p, &DVector::zeros(model.nx()), 0).unwrap().y;
    bfr(&y, &yh).unwrap()
}

#[test]
fn selection_json_survives_a_file_round_trip() {
    let truth = system();
    let table = true_table(&truth, 3);
    let sel = greedy_selection(&table, 2, 4, 4, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sel.json");
    sel.save(&path).unwrap();
    let back = SelectionBasis::load(&path).unwrap();
    assert_eq!(back, sel);
    let (m, _) = realize_table(&table, &back, &truth.basis, Order::Auto, EXACT_RANK_TOL).unwrap();
    assert_eq!(m.nx(), 2);
    assert!(sim_fit(&m, &truth, 1) > 99.999);
}

#[test]
fn cra_on_selection_keys_only_matches_full_estimate() {
    let truth = system();
    let (u, p) = identification_signals(2, 2, 4000, [-1.0, 1.0], [-0.9, 0.9], 2);
    let data = simulate(&truth.noise_free(), &u, &p, &DVector::zeros(2), 0).unwrap();
    let sel = greedy_selection(&true_table(&truth, 3), 2, 4, 4, 1).unwrap();
    let keys: Vec<_> = required_keys(&sel, 2).into_iter().collect();
    let partial = estimate_table_cra(&data, &truth.basis, &CraConfig::new(keys.clone())).unwrap();
    let full = estimate_table_cra(&data, &truth.basis, &CraConfig::new(lpvss::markov::keys_up_to(2, 3))).unwrap();
    for k in &keys {
        assert_eq!(partial.get(k), full.get(k));
    }
}

#[test]
fn fir_table_saved_and_loaded_realizes_the_same_model() {
    // Fast dynamics so the depth-6 truncation is negligible.
    let truth = random_stable_model(ModelDims { nx: 2, nu: 2, ny: 2, npsi: 1 }, 0.3, 17).unwrap();
    let (u, p) = identification_signals(2, 1, 1500, [-1.0, 1.0], [-0.9, 0.9], 3);
    let data = simulate(&truth.noise_free(), &u, &p, &DVector::zeros(2), 0).unwrap();
    let est = estimate_table_fir(&data, &truth.basis, 6, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    est.table.save(&path).unwrap();
    let table = SubMarkovTable::load(&path).unwrap();
    let sel = greedy_selection(&table, 2, 4, 4, 1).unwrap();
    let (m, _) = realize_table(&table, &sel, &truth.basis, Order::Fixed(2), 1e-3).unwrap();
    assert!(sim_fit(&m, &truth, 4) > 99.9);
}

#[test]
fn refinement_moves_noisy_estimates_toward_the_predictor_optimum() {
    let truth = system();
    let (u, p) = identification_signals(2, 2, 2000, [-1.0, 1.0], [-0.9, 0.9], 5);
    let z = standard_normal(2, 2000, 6);
    let data = set_snr(&truth, &u, &p, &[15.0, 15.0], &z).unwrap().data;
    let cfg = PipelineConfig { nx_guess: 2, no: 4, nr: 4, order: Some(2), ..Default::default() };
    let init = identify(Estimator::Cra, &data, &truth.basis, &cfg).unwrap().model;

    let (uv, pv) = identification_signals(2, 2, 500, [-1.0, 1.0], [-0.9, 0.9], 7);
    let zv = standard_normal(2, 500, 8);
    let val = set_snr(&truth, &uv, &pv, &[15.0, 15.0], &zv).unwrap().data;
    let oracle = one_step_predict(&truth, &val).unwrap();
    let fit = |m: &LpvSsModel| bfr(&oracle, &one_step_predict(m, &val).unwrap()).unwrap();

    let gb = gb_refine(&init, &data, &GbConfig::default()).unwrap();
    let em = em_refine(&em_initial_model(&init, &data).unwrap(), &data, &EmConfig::default()).unwrap();
    let f0 = fit(&init);
    assert!(fit(&gb.model) > f0, "GB {} vs {f0}", fit(&gb.model));
    assert!(fit(&em.model) > f0, "EM {} vs {f0}", fit(&em.model));
}

#[test]
fn model_files_round_trip_through_refinement() {
    let truth = system();
    let (u, p) = identification_signals(2, 2, 800, [-1.0, 1.0], [-0.9, 0.9], 9);
    let z = standard_normal(2, 800, 10);
    let data = set_snr(&truth, &u, &p, &[30.0, 30.0], &z).unwrap().data;
    let gb = gb_refine(&truth.noise_free(), &data, &GbConfig { max_iter: 3, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    gb.model.save(&path).unwrap();
    let back = LpvSsModel::load(&path).unwrap();
    assert_eq!(back, gb.model);
    assert_eq!(one_step_predict(&back, &data).unwrap(), one_step_predict(&gb.model, &data).unwrap());
}
