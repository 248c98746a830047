//! Structural invariants of the loss and the optimizer loop.

use ndarray::Array2;

use popinv::autodiff::{Tape, Var};
use popinv::distance::EmpiricalMeasure;
use popinv::inference::{
    loss_and_grad, loss_l, loss_with_fixed_weighting, GradientMode, InferenceState, LossConfig, LossDraws, Params,
    ParamGroup, Penalty,
};
use popinv::measures::{InputMeasure, NoiseCov, WmGeometry};
use popinv::models::Darcy1DModel;
use popinv::optim::HalvingSchedule;
use popinv::rng;

const D: usize = 8;

fn setup(noise: NoiseCov) -> (Params, EmpiricalMeasure, Darcy1DModel) {
    let model = Darcy1DModel::new(10.0, D);
    let truth = Params {
        alpha: InputMeasure::log_normal(0.5, 0.25),
        gamma: noise,
    };
    let mut r = rng::stream(3, 0);
    let z = truth.alpha.sample(200, &mut r).unwrap();
    let y = Array2::from_shape_fn((200, D), |(i, j)| model.solve(z[[i, 0]]).unwrap()[j]);
    let y = y + truth.gamma.sample(200, &mut r).unwrap();
    (truth, EmpiricalMeasure::new(y).unwrap(), model)
}

fn cfg(mode: GradientMode, penalties: Vec<Penalty>) -> LossConfig {
    LossConfig {
        n_s: 100,
        slices: 20,
        gradient_mode: mode,
        penalties,
        epsilon_kappa: 0.0,
        frozen: vec![],
    }
}

#[test]
fn standard_minus_cut_gradient_is_the_weighting_derivative() {
    let (truth, data, model) = setup(NoiseCov::scaled_identity(0.05, D));
    for seed in 0..5 {
        let mut p = truth.clone();
        p.gamma = NoiseCov::scaled_identity(0.03 + 0.02 * seed as f64, D);
        let c = cfg(GradientMode::Cut, vec![]);
        let draws = LossDraws::sample(&p, &data, &c, &mut rng::stream(seed, 1)).unwrap();
        let (_, g_cut, _) = loss_and_grad(&p, &draws, &model, &c).unwrap();
        let (_, g_std, _) = loss_and_grad(&p, &draws, &model, &cfg(GradientMode::Standard, vec![])).unwrap();
        let log_gamma = p.gamma.blocks()[0][[0, 0]];
        // derivative in log γ' with the sampled noise held at γ
        let at = |lg: f64| {
            let w = NoiseCov::scaled_identity(lg.exp(), D);
            loss_with_fixed_weighting(&p, &w, &draws, &model, &c).unwrap()
        };
        let h = 1e-5;
        let fd = (at(log_gamma + h) - at(log_gamma - h)) / (2.0 * h);
        let diff = g_std[2][[0, 0]] - g_cut[2][[0, 0]];
        assert!((diff - fd).abs() <= 1e-4 * fd.abs().max(1e-8), "seed {seed}: {diff} vs {fd}");
        assert_eq!(g_std[0], g_cut[0]);
    }
}

#[test]
fn scaling_the_weighting_divides_the_loss() {
    let (p, data, model) = setup(NoiseCov::scaled_identity(0.05, D));
    let c = cfg(GradientMode::Cut, vec![]);
    let draws = LossDraws::sample(&p, &data, &c, &mut rng::stream(8, 0)).unwrap();
    let base = loss_with_fixed_weighting(&p, &NoiseCov::scaled_identity(1.0, D), &draws, &model, &c).unwrap();
    for k in [0.5, 2.0, 10.0] {
        let v = loss_with_fixed_weighting(&p, &NoiseCov::scaled_identity(k, D), &draws, &model, &c).unwrap();
        assert!((v * k * k - base).abs() <= 1e-12 * base, "c = {k}");
    }
}

#[test]
fn regularizers_touch_only_their_own_group() {
    let (mut p, data, model) = setup(NoiseCov::scaled_identity(0.05, D));
    p.gamma = NoiseCov::whittle_matern(0.3, 0.7, 0.5, WmGeometry::line(D));
    let penalties = vec![
        Penalty { group: ParamGroup::Alpha, block: "m".into(), index: 0, anchor: 1.0, weight: 0.5 },
        Penalty { group: ParamGroup::Alpha, block: "log_sigma".into(), index: 0, anchor: 0.0, weight: 0.5 },
        Penalty { group: ParamGroup::Gamma, block: "log_ell".into(), index: 0, anchor: 0.0, weight: 0.5 },
        Penalty { group: ParamGroup::Gamma, block: "log_gamma".into(), index: 0, anchor: 1.0, weight: 0.5 },
    ];
    let c = cfg(GradientMode::Standard, penalties);
    let draws = LossDraws::sample(&p, &data, &c, &mut rng::stream(5, 0)).unwrap();
    let tape = Tape::new();
    let av: Vec<Var> = p.alpha.blocks().into_iter().map(|b| tape.param(b)).collect();
    let gv: Vec<Var> = p.gamma.blocks().into_iter().map(|b| tape.param(b)).collect();
    let parts = loss_l(&tape, &p, &av, &gv, &draws, &model, &c).unwrap();

    let gh = tape.backward(parts.h).unwrap();
    assert!(av.iter().any(|&v| gh.wrt(v).iter().any(|x| *x != 0.0)));
    assert!(gv.iter().all(|&v| gh.wrt(v).iter().all(|x| *x == 0.0)));
    let gr = tape.backward(parts.r).unwrap();
    assert!(gv.iter().any(|&v| gr.wrt(v).iter().any(|x| *x != 0.0)));
    assert!(av.iter().all(|&v| gr.wrt(v).iter().all(|x| *x == 0.0)));
}

#[test]
fn only_accepted_steps_advance_the_optimizer() {
    let (truth, data, model) = setup(NoiseCov::scaled_identity(0.05, D));
    let c = cfg(GradientMode::Cut, vec![]);
    let mut seen = [0usize; 2];
    for lr in [0.05, 1e6] {
        let mut state = InferenceState::new(truth.clone(), HalvingSchedule::constant(lr));
        let mut r = rng::stream(11, 0);
        for _ in 0..30 {
            let before = state.opt.steps();
            let Ok(rec) = state.step(&data, &model, &c, &mut r) else { break };
            let advanced = state.opt.steps() - before;
            assert_eq!(advanced, u64::from(!rec.rejected), "iteration {}", rec.iter);
            seen[usize::from(rec.rejected)] += 1;
        }
    }
    assert!(seen[0] > 0 && seen[1] > 0, "both outcomes exercised: {seen:?}");
}
