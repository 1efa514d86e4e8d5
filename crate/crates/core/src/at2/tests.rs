use super::*;
use crate::backend::{planted_generate, PlantedBackend, PlantedConfig};
use crate::baselines::average_attention;
use crate::metrics::pearson;
use crate::rng::StreamKey;

fn planted(n: usize, config: PlantedConfig) -> (PlantedBackend, Vec<Example>) {
    let samples = planted_generate(&config, n).unwrap();
    let backend = PlantedBackend::new(config, &samples).unwrap();
    (backend, samples.into_iter().map(|s| s.example).collect())
}

fn random_vec(key: StreamKey, n: usize) -> Vec<f64> {
    (0..n as u64).map(|i| key.gaussian_at(i)).collect()
}

#[test]
fn score_hand_case() {
    let theta = HeadCoefficients::new(1, 2, vec![1.0, 2.0]).unwrap();
    let f = AttnFeatures::new(2, 1, 2, vec![0.5, 0.25, 0.0, 1.0]).unwrap();
    assert_eq!(score(&theta, &f).unwrap().0, vec![1.0, 2.0]);
    let wrong = HeadCoefficients::uniform(2, 1);
    assert!(matches!(score(&wrong, &f), Err(Error::ShapeMismatch(_))));
}

#[test]
fn predicted_effect_is_score_dot_v() {
    let (b, data) = planted(5, PlantedConfig::default());
    let key = StreamKey::new(11);
    let theta = HeadCoefficients::new(4, 4, random_vec(key, 16)).unwrap();
    for ex in &data {
        let f = b.aggregated_attention(ex, 0).unwrap();
        let tau = score(&theta, &f).unwrap();
        for v in sample_ablations(ex.n_sources(), 20, key.derive_str(&ex.id)) {
            let direct: f64 = tau.0.iter().zip(v.as_f64()).map(|(t, b)| t * b).sum();
            let fast = predicted_effect(&theta, &f, &v).unwrap();
            assert!((direct - fast).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }
}

#[test]
fn pearson_loss_matches_correlation() {
    let key = StreamKey::new(3);
    let p = random_vec(key.derive(0), 16);
    let t = random_vec(key.derive(1), 16);
    let (loss, _) = pearson_loss(&p, &t).unwrap();
    assert!((loss + pearson(&p, &t).unwrap().value).abs() < 1e-14);
}

#[test]
fn pearson_loss_gradient_matches_finite_differences() {
    // Five-point stencil: truncation error O(h^4), rounding O(eps / h).
    let h = 1e-3;
    let loss = |p: &[f64], t: &[f64]| -pearson(p, t).unwrap().value;
    for case in 0..100u64 {
        let key = StreamKey::new(case);
        let p = random_vec(key.derive(0), 16);
        let t = random_vec(key.derive(1), 16);
        let (_, grad) = pearson_loss(&p, &t).unwrap();
        let scale = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        for k in 0..16 {
            let at = |d: f64| {
                let mut q = p.clone();
                q[k] += d;
                loss(&q, &t)
            };
            let fd = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            let err = (grad[k] - fd).abs() / fd.abs().max(1e-3 * scale);
            assert!(err <= 1e-6, "case {case} coord {k}: {} vs {fd}", grad[k]);
        }
    }
}

#[test]
fn pearson_loss_degenerate_inputs() {
    let t = vec![1.0, 2.0, 3.0];
    assert_eq!(pearson_loss(&[2.0; 3], &t).unwrap(), (0.0, vec![0.0; 3]));
    assert_eq!(pearson_loss(&t, &[5.0; 3]).unwrap(), (0.0, vec![0.0; 3]));
    assert!(pearson_loss(&[1.0], &[1.0]).is_err());
    assert!(pearson_loss(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn pearson_loss_is_scale_and_shift_invariant() {
    let key = StreamKey::new(5);
    let p = random_vec(key.derive(0), 12);
    let t = random_vec(key.derive(1), 12);
    let (l0, g0) = pearson_loss(&p, &t).unwrap();
    let t2: Vec<f64> = t.iter().map(|x| 7.5 * x - 3.0).collect();
    let (l1, g1) = pearson_loss(&p, &t2).unwrap();
    assert!((l0 - l1).abs() < 1e-14);
    for (a, b) in g0.iter().zip(&g1) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cosine_schedule_endpoints() {
    let c = TrainConfig {
        steps: 100,
        lr: 0.2,
        ..TrainConfig::default()
    };
    assert_eq!(c.lr_at(0), 0.2);
    assert!((c.lr_at(50) - 0.1).abs() < 1e-15);
    assert!(c.lr_at(100).abs() < 1e-15);
    let k = TrainConfig {
        schedule: Schedule::Constant,
        ..c
    };
    assert_eq!(k.lr_at(77), 0.2);
}

#[test]
fn invalid_train_configs() {
    for c in [
        TrainConfig {
            m_ablations_per_example: 1,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }
    let (b, _) = planted(1, PlantedConfig::default());
    assert!(matches!(
        train_at2(&[], &b, &TrainConfig::default()),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn zero_steps_give_uniform_theta_and_average_attention() {
    let (b, data) = planted(10, PlantedConfig::default());
    let config = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    let art = train_at2(&data, &b, &config).unwrap();
    assert_eq!(art.theta, HeadCoefficients::uniform(4, 4));
    assert!(art.loss_curve.is_empty());
    for ex in &data {
        let f = b.aggregated_attention(ex, 0).unwrap();
        assert_eq!(score(&art.theta, &f).unwrap(), average_attention(&f));
    }
}

#[test]
fn constant_targets_are_a_fixed_point() {
    let (b, data) = planted(6, PlantedConfig::default());
    let config = TrainConfig {
        steps: 25,
        ..TrainConfig::default()
    };
    let mut cache = TrainCache::build(&b, &data, &config).unwrap();
    for row in &mut cache.targets {
        for c in row {
            c.logits = vec![0.25; c.logits.len()];
        }
    }
    let (theta, curve) = optimize(&cache, 4, 4, &config).unwrap();
    assert_eq!(theta, HeadCoefficients::uniform(4, 4));
    assert!(curve.iter().all(|&l| l == 0.0));
}

#[test]
fn target_scaling_leaves_training_unchanged() {
    let (b, data) = planted(20, PlantedConfig::default());
    let config = TrainConfig {
        steps: 60,
        ..TrainConfig::default()
    };
    let cache = TrainCache::build(&b, &data, &config).unwrap();
    let mut scaled = cache.clone();
    for row in &mut scaled.targets {
        for c in row {
            c.logits.iter_mut().for_each(|l| *l = 3.0 * *l + 1.0);
        }
    }
    let (a, _) = optimize(&cache, 4, 4, &config).unwrap();
    let (s, _) = optimize(&scaled, 4, 4, &config).unwrap();
    for (x, y) in a.theta.iter().zip(&s.theta) {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
}

/// Re-queries the backend on every access instead of caching.
struct Requery<'a> {
    backend: &'a dyn AttributableModel,
    dataset: &'a [Example],
    config: &'a TrainConfig,
}

impl TargetSource for Requery<'_> {
    fn n_examples(&self) -> usize {
        self.dataset.len()
    }

    fn n_targets(&self, example: usize) -> usize {
        self.dataset[example].targets.len()
    }

    fn get(&self, example: usize, target: usize) -> Result<Cow<'_, CachedTarget>> {
        collect_target(self.backend, self.dataset, example, target, self.config).map(Cow::Owned)
    }
}

#[test]
fn cached_and_requeried_training_agree_bitwise() {
    let config = PlantedConfig {
        noise_sigma: 0.3,
        ..PlantedConfig::default()
    };
    let (b, data) = planted(16, config);
    let tc = TrainConfig {
        steps: 40,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let cached = train_at2(&data, &b, &tc).unwrap();
    let requery = Requery {
        backend: &b,
        dataset: &data,
        config: &tc,
    };
    let (theta, curve) = optimize(&requery, 4, 4, &tc).unwrap();
    assert_eq!(cached.theta, theta);
    assert_eq!(cached.loss_curve, curve);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let (b, data) = planted(24, PlantedConfig::default());
    let tc = TrainConfig {
        steps: 30,
        ..TrainConfig::default()
    };
    let a = train_at2(&data, &b, &tc).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let single = pool.install(|| train_at2(&data, &b, &tc).unwrap());
    assert_eq!(a.theta, single.theta);
    assert_eq!(a.loss_curve, single.loss_curve);
    let other_seed = train_at2(&data, &b, &TrainConfig { seed: 1, ..tc }).unwrap();
    assert_ne!(a.theta, other_seed.theta);
}

#[test]
fn planted_head_is_recovered_on_a_small_run() {
    let (b, data) = planted(60, PlantedConfig::default());
    let tc = TrainConfig {
        steps: 300,
        ..TrainConfig::default()
    };
    let art = train_at2(&data, &b, &tc).unwrap();
    assert_eq!(art.theta.argmax_abs(), (2, 1));
    let first = art.loss_curve[0];
    let last = *art.loss_curve.last().unwrap();
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn theta_document_round_trip() {
    let theta = HeadCoefficients::new(1, 3, vec![0.1, -2.5e-7, 3.0]).unwrap();
    let doc = ThetaDocument::new(&theta, &TrainConfig::default());
    let json = doc.to_canonical_json();
    assert!(json.starts_with("{\"H\":3,\"L\":1,\"mask_mode\":\"pre_softmax_neg_inf\""));
    assert!(json.ends_with("}\n"));
    let back: ThetaDocument = serde_json::from_str(&json).unwrap();
    assert_eq!(back, doc);
    assert_eq!(back.coefficients().unwrap(), theta);
    assert_eq!(back.to_canonical_json(), json);
    assert_eq!(
        coefficients_csv(&theta),
        "layer,head,value\n0,0,0.1\n0,1,-0.00000025\n0,2,3\n"
    );
}
