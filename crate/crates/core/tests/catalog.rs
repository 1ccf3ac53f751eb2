use dsmp::catalog;
use dsmp::config::ExprProblem;
use dsmp::fbsde::{solve_fully_coupled_newton, solve_fully_coupled_picard, solve_state, NewtonConfig, PicardConfig, SolverConfig};
use dsmp::linear::LinearProblem;
use dsmp::monotone::{check_monotone, MonotoneMode};
use dsmp::optimizer::{minimize, OptimizerConfig};
use dsmp::problem::Model;
use dsmp::tree::AdaptedProcess;

#[test]
fn linear_beta_grows_geometrically() {
    let (file, p) = catalog::load("linear-beta").unwrap();
    for horizon in 1..=6 {
        let tree = file.build_tree(Some(horizon), None).unwrap();
        let model = Model::new(&p, &tree).unwrap();
        let sol = solve_state(&model, &model.zero_control(), &SolverConfig::default()).unwrap();
        let expect = 1.1_f64.powi(horizon as i32) * 2.0;
        for a in 0..tree.level_size(0) {
            assert!((sol.y.slice(0, a)[0] - expect).abs() <= 1e-12 * expect, "T={horizon}");
        }
    }
}

#[test]
fn linear_monotone_matches_hand_coded_example() {
    let (file, p) = catalog::load("linear-monotone").unwrap();
    let tree = file.build_tree(None, None).unwrap();
    let model = Model::new(&p, &tree).unwrap();
    let u = model.zero_control();
    let rep = check_monotone(&model, &u, MonotoneMode::LinearExact, 1.0).unwrap();
    assert_eq!(rep.alpha_estimate, 1.0);

    let pic = solve_fully_coupled_picard(&model, &u, &PicardConfig { tol: 1e-12, ..PicardConfig::default() }).unwrap();
    let new = solve_fully_coupled_newton(&model, &u, &NewtonConfig::default()).unwrap();
    let lin = LinearProblem::canonical_monotone();
    let lin_model = Model::new(&lin, &tree).unwrap();
    let reference = solve_fully_coupled_newton(&lin_model, &u, &NewtonConfig::default()).unwrap();
    for sol in [&pic.solution, &new.solution] {
        assert!(sol.y.sup_distance(&reference.solution.y) < 1e-9);
        assert!(sol.x.sup_distance(&reference.solution.x) < 1e-9);
    }
}

#[test]
fn lq_from_file_reaches_the_same_optimum() {
    let (file, p) = catalog::load("lq-forward").unwrap();
    let tree = file.build_tree(None, None).unwrap();
    let from_file = minimize(&Model::new(&p, &tree).unwrap(), &OptimizerConfig::default()).unwrap();
    let lin = LinearProblem::scalar_lq();
    let coded = minimize(&Model::new(&lin, &tree).unwrap(), &OptimizerConfig::default()).unwrap();
    assert!(from_file.control.sup_distance(&coded.control) < 1e-7);
    assert!((from_file.cost_history.last().unwrap() - coded.cost_history.last().unwrap()).abs() < 1e-12);
}

#[test]
fn exported_files_reload() {
    for name in catalog::names() {
        let file = catalog::file(name).unwrap();
        let text = file.to_toml();
        let again = ExprProblem::from_toml(&text).unwrap_or_else(|e| panic!("{name}: {e}\n{text}"));
        assert_eq!(again.name, name);
        // identical solver output, bit for bit
        let (_, original) = catalog::load(name).unwrap();
        let tree = file.build_tree(Some(3), None).unwrap();
        let m1 = Model::new(&original, &tree).unwrap();
        let m2 = Model::new(&again, &tree).unwrap();
        let u = AdaptedProcess::from_fn(&tree, 1, 1, 4, |t, a| vec![0.1 * t as f64 - 0.05 * a as f64]);
        let s1 = solve_state(&m1, &u, &SolverConfig::default()).unwrap();
        let s2 = solve_state(&m2, &u, &SolverConfig::default()).unwrap();
        assert_eq!(s1, s2, "{name}");
    }
}
