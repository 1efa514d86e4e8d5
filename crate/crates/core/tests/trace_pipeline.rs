//! Exported traces stand in for the live backend.

use at2_core::ablation::AblationPlan;
use at2_core::at2::{train_at2, TrainConfig};
use at2_core::backend::{planted_generate, PlantedBackend, PlantedConfig};
use at2_core::metrics::{evaluate_suite, lds_on, LdsAblations, Metric};
use at2_core::toy::{toy_generate, MaskMode, ToyBackend, ToyConfig, ToyDataConfig, ToyModel};
use at2_core::trace::{export_trace, read_trace};
use at2_core::{AblationVector, AttributableModel, Method, NamedMethod};

fn small_train() -> TrainConfig {
    TrainConfig {
        steps: 50,
        m_ablations_per_example: 16,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn planted_trace_reproduces_live_training() {
    let config = PlantedConfig {
        noise_sigma: 0.3,
        ..PlantedConfig::default()
    };
    let samples = planted_generate(&config, 12).unwrap();
    let live = PlantedBackend::new(config, &samples).unwrap();
    let data: Vec<_> = samples.into_iter().map(|s| s.example).collect();
    let train = small_train();
    let plan = AblationPlan::generate(&data, train.m_ablations_per_example, train.seed);
    let dir = tempfile::tempdir().unwrap();
    export_trace(&live, &data, &plan, dir.path()).unwrap();
    let trace = read_trace(dir.path()).unwrap();

    let a = train_at2(&data, &live, &train).unwrap();
    let b = train_at2(&data, &trace, &train).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.loss_curve, b.loss_curve);
}

#[test]
fn toy_trace_matches_live_outcomes_and_features() {
    let model = ToyModel::new(ToyConfig::default()).unwrap();
    let data = toy_generate(&model, &ToyDataConfig::default(), 4).unwrap();
    let live = ToyBackend::new(model, MaskMode::PreSoftmaxNegInf);
    let plan = AblationPlan::generate(&data, 8, 0);
    let dir = tempfile::tempdir().unwrap();
    export_trace(&live, &data, &plan, dir.path()).unwrap();
    let trace = read_trace(dir.path()).unwrap();
    assert_eq!(trace.info(), live.info());

    for ex in &data {
        for t in 0..ex.targets.len() {
            assert_eq!(
                trace.aggregated_attention(ex, t).unwrap(),
                live.aggregated_attention(ex, t).unwrap()
            );
            let recorded = trace.recorded_ablations(ex, t).unwrap();
            assert_eq!(recorded, plan.entry(&ex.id, t).unwrap().ablations);
            for v in &recorded {
                let a = trace.logprob_under_ablation(ex, t, v).unwrap();
                let b = live.logprob_under_ablation(ex, t, v).unwrap();
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

#[test]
fn recorded_lds_equals_live_lds_on_the_same_ablations() {
    let config = PlantedConfig::default();
    let samples = planted_generate(&config, 5).unwrap();
    let live = PlantedBackend::new(config, &samples).unwrap();
    let data: Vec<_> = samples.into_iter().map(|s| s.example).collect();
    let plan = AblationPlan::generate(&data, 20, 9);
    let dir = tempfile::tempdir().unwrap();
    export_trace(&live, &data, &plan, dir.path()).unwrap();
    let trace = read_trace(dir.path()).unwrap();

    let methods = [NamedMethod::new(Method::AverageAttention)];
    let metrics = [Metric::Lds(LdsAblations::Recorded)];
    let report = evaluate_suite(&data, &trace, &methods, &metrics, 0).unwrap();
    let summary = report.row("avg_attn", "lds_recorded").unwrap();

    let direct: Vec<f64> = data
        .iter()
        .map(|ex| {
            let tau = Method::AverageAttention.attribute(&live, ex, 0, 0).unwrap();
            let ablations = &plan.entry(&ex.id, 0).unwrap().ablations;
            lds_on(&live, ex, 0, &tau, ablations).unwrap().value
        })
        .collect();
    let mean = direct.iter().sum::<f64>() / direct.len() as f64;
    assert_eq!(summary.mean, mean);
}

#[test]
fn trace_rejects_ablations_outside_the_plan() {
    let config = PlantedConfig::default();
    let samples = planted_generate(&config, 1).unwrap();
    let live = PlantedBackend::new(config, &samples).unwrap();
    let data: Vec<_> = samples.into_iter().map(|s| s.example).collect();
    let plan = AblationPlan::generate(&data, 4, 0);
    let dir = tempfile::tempdir().unwrap();
    export_trace(&live, &data, &plan, dir.path()).unwrap();
    let trace = read_trace(dir.path()).unwrap();
    let ex = &data[0];
    let mut v = AblationVector::all_ablated(ex.n_sources());
    v.0[0] = true;
    if !plan.entries[0].ablations.contains(&v) {
        assert!(trace.logprob_under_ablation(ex, 0, &v).is_err());
    }
}
