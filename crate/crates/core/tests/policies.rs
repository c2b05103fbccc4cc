use dosefind::hybrid::HybridCoefficients;
use dosefind::policies::escalation::uniform_levels;
use dosefind::policies::{c_optimal_dose, d_optimal_dose, myopic_dose};
use dosefind::{
    posterior_from_history, Decision, DoseContext, DoseGrid, LossSpec, Myopic, Policy, PolicySettings, PriorSpec,
    Resolution, RolloutConfig, TrialConfig, TrialHistory,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// History simulated from a truth drawn from the prior, doses spread over the range.
fn prior_history(cfg: TrialConfig, k: usize, rng: &mut ChaCha8Rng) -> TrialHistory {
    let rho = rng.gen::<f64>() * cfg.q;
    let eta = cfg.x_min + rng.gen::<f64>() * cfg.range();
    let pt = dosefind::ModelPoint::new(rho, eta);
    let mut h = TrialHistory::new(cfg);
    for _ in 0..k {
        let x = cfg.x_min + rng.gen::<f64>() * cfg.range();
        let f = dosefind::model::toxicity_prob(x, &pt, &cfg).unwrap();
        h.push(x, rng.gen::<f64>() < f).unwrap();
    }
    h
}

fn all_policies(cfg: &TrialConfig) -> Vec<Policy> {
    let levels = uniform_levels(cfg.x_min, cfg.x_max, 6);
    let quick = RolloutConfig { replicates: 4, candidates: 6, ..RolloutConfig::default() };
    vec![
        Policy::Crm,
        Policy::Ewoc,
        Policy::COpt { c: [0.0, 1.0] },
        Policy::DOpt { eps: 0.05 },
        Policy::Wu,
        Policy::Sa { step: 1.0 },
        Policy::ThreePlusThree { levels: levels.clone() },
        Policy::ModifiedTwoStage { levels, switch_k: 3, inner: Box::new(Policy::Ewoc) },
        Policy::Hybrid {
            coeffs: HybridCoefficients::single(0.096, 0.02, cfg.n),
            learning: Box::new(Policy::COpt { c: [0.0, 1.0] }),
            myopic: Myopic::Ewoc,
        },
        Policy::Rollout { base: Box::new(Policy::Ewoc), config: quick },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_policy_doses_inside_range(seed in 0u64..10_000, k in 0usize..6) {
        let cfg = TrialConfig { n: 6, ..TrialConfig::unit_example() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = prior_history(cfg, k, &mut rng);
        let post = posterior_from_history(&h, &PriorSpec::UniformProduct, Resolution::new(24, 48)).unwrap();
        let settings = PolicySettings::new(&cfg);
        let ctx = DoseContext { history: &h, posterior: &post, settings: &settings, stream: seed };
        for p in all_policies(&cfg) {
            match p.decide(&ctx) {
                Ok(Decision::Dose(x)) => prop_assert!((cfg.x_min..=cfg.x_max).contains(&x), "{} gave {x}", p.name()),
                Ok(Decision::Stop { declared_mtd, .. }) => prop_assert!((cfg.x_min..=cfg.x_max).contains(&declared_mtd)),
                Err(dosefind::DoseError::StoppedTrial) => {}
                Err(e) => prop_assert!(false, "{}: {e}", p.name()),
            }
        }
    }
}

#[test]
fn ewoc_dose_not_above_crm_dose() {
    let cfg = TrialConfig::unit_example();
    let grid = DoseGrid::uniform(&cfg, 101);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let k = rng.gen_range(0..=8);
        let h = prior_history(cfg, k, &mut rng);
        let post = posterior_from_history(&h, &PriorSpec::UniformProduct, Resolution::default()).unwrap();
        let ewoc = myopic_dose(&post, &LossSpec::ewoc(cfg.omega), &grid);
        let crm = myopic_dose(&post, &LossSpec::crm(), &grid);
        assert!(ewoc <= crm + grid.step() + 1e-12, "ewoc {ewoc} crm {crm}");
    }
}

#[test]
fn design_argmins_match_fine_scan() {
    let cfg = TrialConfig::unit_example();
    let coarse = DoseGrid::uniform(&cfg, 21);
    let fine = DoseGrid::uniform(&cfg, 2001);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let k = rng.gen_range(0..=4);
        let h = prior_history(cfg, k, &mut rng);
        let post = posterior_from_history(&h, &PriorSpec::UniformProduct, Resolution::new(16, 32)).unwrap();
        let c_coarse = c_optimal_dose(&post, &h, [0.0, 1.0], &coarse, 1);
        let c_fine = c_optimal_dose(&post, &h, [0.0, 1.0], &fine, 1);
        assert!((c_coarse - c_fine).abs() <= coarse.step() + 1e-12, "c-opt {c_coarse} vs {c_fine}");
        let d_coarse = d_optimal_dose(&post, &h, 0.3, &coarse, 1);
        let d_fine = d_optimal_dose(&post, &h, 0.3, &fine, 1);
        assert!((d_coarse - d_fine).abs() <= coarse.step() + 1e-12, "D-opt {d_coarse} vs {d_fine}");
    }
}

#[test]
fn posterior_variance_shrinks_with_data() {
    let cfg = TrialConfig::unit_example();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut by_stage: Vec<Vec<f64>> = vec![Vec::new(); cfg.n + 1];
    for _ in 0..200 {
        let h = prior_history(cfg, cfg.n, &mut rng);
        for (k, v) in by_stage.iter_mut().enumerate() {
            let post = posterior_from_history(&h.prefix(k), &PriorSpec::UniformProduct, Resolution::new(32, 64)).unwrap();
            v.push(post.eta_variance());
        }
    }
    let medians: Vec<f64> = by_stage
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] < w[0]), "{medians:?}");
}

#[test]
fn posterior_stays_normalized() {
    let cfg = TrialConfig::five_fu().unit();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = prior_history(cfg, 24, &mut rng);
    let mut post = posterior_from_history(&TrialHistory::new(cfg), &PriorSpec::UniformProduct, Resolution::default()).unwrap();
    for r in h.records() {
        post.update(r.dose, r.toxic).unwrap();
        assert!((post.total_mass() - 1.0).abs() < 1e-10);
    }
}
