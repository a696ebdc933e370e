//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines; any failure is a failed criterion.

use std::sync::Arc;

use textalign::corruption::{
    self, ConditionKind, NoisyMode, ScenarioCondition, ScenarioGrid, ScenarioKind,
};
use textalign::data::{split_dataset, Label, Modality, Task};
use textalign::eval::{drop_ratio, MetricKind, MetricValue};
use textalign::gateway::{ChatBackend, MockBackend, RequestKind, DEFAULT_MODEL};
use textalign::harness::{AblationFlags, BackendConfig, Experiment, FeaturizerChoice, RunConfig};
use textalign::model::{
    loss_and_gradient, pgd_attack, FeatureVector, LinearModel, TrainConfig, TrainMode,
};
use textalign::perturb::{dummy_token_edit, paraphrase, strip_dummy_tokens, EditOp};
use textalign::pipeline::{serialize_tabular, Stage, TextSegment};
use textalign::rng;
use textalign::synth::{generate_synthetic_dataset, SynthSpec};

use rand::Rng;

#[test]
fn criterion_1_drop_ratio_arithmetic() {
    let clean_acc = MetricValue::new(MetricKind::Accuracy, 0.4201);
    let perturbed_acc = MetricValue::new(MetricKind::Accuracy, 0.397);
    let acc_ratio = drop_ratio(&clean_acc, &perturbed_acc).unwrap();
    assert!(
        (acc_ratio - 0.945).abs() <= 0.001,
        "accuracy drop ratio {acc_ratio}"
    );

    let clean_mse = MetricValue::new(MetricKind::Mse, 0.272);
    let perturbed_mse = MetricValue::new(MetricKind::Mse, 0.274);
    let mse_ratio = drop_ratio(&clean_mse, &perturbed_mse).unwrap();
    assert!(
        (mse_ratio - 0.9927).abs() <= 0.001,
        "mse drop ratio {mse_ratio}"
    );
    println!("ACCEPTANCE 1 PASS - drop ratios {acc_ratio:.4} and {mse_ratio:.4} match the published rows");
}

#[test]
fn criterion_2_tabular_serialization_fidelity() {
    let record = vec![
        ("type of pet".to_string(), "Dog".to_string()),
        ("name of pet".to_string(), "Filo".to_string()),
        (
            "age of pet when listed (in months)".to_string(),
            "78".to_string(),
        ),
    ];
    let segment = serialize_tabular(&record);
    let expected =
        "The type of pet is Dog. The name of pet is Filo. The age of pet when listed (in months) is 78.";
    assert_eq!(segment.text, expected);
    println!("ACCEPTANCE 2 PASS - serialization reproduces the reference record byte-exactly");
}

fn dynamic_experiment(choice: FeaturizerChoice) -> Experiment {
    let run = RunConfig {
        seed: 9,
        repeats: 1,
        backend: BackendConfig::mock(7, None),
        ablation: AblationFlags::default(),
        adversarial_iteration_multiplier: 10,
    };
    let mut experiment = Experiment::new(run).unwrap();
    experiment.train.epochs = 6;
    experiment.train.learning_rate = 0.5;
    experiment.train.l2 = 1e-4;
    experiment.feature_dim = 96;
    experiment.ngram = 2;
    experiment.featurizer_choice = choice;
    experiment.config_hash = "acceptance".into();
    experiment
}

#[test]
fn criterion_3_dynamic_order_invariance_contrast() {
    let dataset = generate_synthetic_dataset(&SynthSpec {
        size: 60,
        num_classes: 4,
        seed: 33,
        confuser_probability: 0.25,
        ..SynthSpec::default()
    })
    .unwrap();
    let (train, test) = split_dataset(&dataset, 0.8, 5).unwrap();

    let segment_experiment = dynamic_experiment(FeaturizerChoice::Segment);
    let demo = segment_experiment.bootstrap(&train).unwrap();
    let (model, _) = segment_experiment.train_model(&train, demo.as_ref()).unwrap();
    let grid = segment_experiment.grid(ScenarioKind::Dynamic, &test).unwrap();
    let report = segment_experiment
        .run_scenario(&model, &test, &grid, demo.as_ref())
        .unwrap();
    assert_eq!(report.per_condition.len(), 6);
    for row in &report.per_condition {
        assert_eq!(
            row.drop_ratio,
            Some(1.0),
            "segment featurizer must be exactly order-invariant, condition {}",
            row.condition.id
        );
    }

    let embedding_experiment = dynamic_experiment(FeaturizerChoice::Embedding);
    let demo = embedding_experiment.bootstrap(&train).unwrap();
    let (model, _) = embedding_experiment.train_model(&train, demo.as_ref()).unwrap();
    let grid = embedding_experiment.grid(ScenarioKind::Dynamic, &test).unwrap();
    let embedding_report = embedding_experiment
        .run_scenario(&model, &test, &grid, demo.as_ref())
        .unwrap();
    let degraded = embedding_report
        .per_condition
        .iter()
        .filter(|row| row.drop_ratio.is_some_and(|r| r < 1.0))
        .count();
    assert!(
        degraded >= 1,
        "embedding baseline must degrade under at least one permutation"
    );
    println!(
        "ACCEPTANCE 3 PASS - segment path drop ratio exactly 1.0 on all 6 permutations; embedding baseline degrades on {degraded}"
    );
}

#[test]
fn criterion_4_pgd_closed_form_oracle() {
    let mut stream = rng::stream(21, "acceptance_pgd", "");
    let epsilon = 0.25;
    let alpha = epsilon / 4.0;
    let mut worst_gap = 0.0f64;
    for _ in 0..100 {
        let dim = stream.random_range(3..12);
        let mut model = LinearModel::zeros(Task::Classification { num_classes: 2 }, dim);
        for w in model.weights.iter_mut() {
            *w = stream.random_range(-1.0..1.0);
        }
        for b in model.bias.iter_mut() {
            *b = stream.random_range(-0.3..0.3);
        }
        let x = FeatureVector {
            values: (0..dim).map(|_| stream.random_range(-1.0..1.0)).collect(),
            block_size: 1,
        };
        let label = Label::Class(stream.random_range(0..2));

        // Every iterate must stay inside the ball.
        for steps in 1..=10 {
            let iterate = pgd_attack(&model, &x, epsilon, alpha, steps, &label).unwrap();
            for (a, b) in iterate.values.iter().zip(&x.values) {
                assert!((a - b).abs() <= epsilon + 1e-12, "iterate escaped the ball");
            }
        }

        let attacked = pgd_attack(&model, &x, epsilon, alpha, 10, &label).unwrap();
        let gradient = loss_and_gradient(&model, &x, &label).unwrap();
        let corner = FeatureVector {
            values: x
                .values
                .iter()
                .zip(&gradient.d_input)
                .map(|(&v, &g)| v + epsilon * g.signum() * f64::from(u8::from(g != 0.0)))
                .collect(),
            block_size: 1,
        };
        let corner_loss = loss_and_gradient(&model, &corner, &label).unwrap().loss;
        let pgd_loss = loss_and_gradient(&model, &attacked, &label).unwrap().loss;
        worst_gap = worst_gap.max((corner_loss - pgd_loss).abs());
    }
    assert!(worst_gap < 1e-9, "worst |corner - pgd| = {worst_gap}");
    println!("ACCEPTANCE 4 PASS - 100 instances, worst |corner loss - PGD loss| = {worst_gap:.3e}");
}

#[test]
fn criterion_5_gradient_finite_difference_check() {
    let mut stream = rng::stream(22, "acceptance_grad", "");
    let h = 1e-5;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1.0);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let dim = stream.random_range(2..=20);
        let regression = case % 3 == 2;
        let (mut model, label) = if regression {
            (
                LinearModel::zeros(Task::Regression, dim),
                Label::Score(stream.random_range(-2.0..2.0)),
            )
        } else {
            let classes = stream.random_range(2..=4u32);
            (
                LinearModel::zeros(Task::Classification { num_classes: classes }, dim),
                Label::Class(stream.random_range(0..classes)),
            )
        };
        for w in model.weights.iter_mut() {
            *w = stream.random_range(-1.0..1.0);
        }
        for b in model.bias.iter_mut() {
            *b = stream.random_range(-0.5..0.5);
        }
        let x = FeatureVector {
            values: (0..dim).map(|_| stream.random_range(-2.0..2.0)).collect(),
            block_size: 1,
        };
        let analytic = loss_and_gradient(&model, &x, &label).unwrap();

        for j in 0..dim {
            let mut plus = x.clone();
            plus.values[j] += h;
            let mut minus = x.clone();
            minus.values[j] -= h;
            let numeric = (loss_and_gradient(&model, &plus, &label).unwrap().loss
                - loss_and_gradient(&model, &minus, &label).unwrap().loss)
                / (2.0 * h);
            worst = worst.max(rel(analytic.d_input[j], numeric));
        }
        for idx in 0..model.weights.len() {
            let mut plus = model.clone();
            plus.weights[idx] += h;
            let mut minus = model.clone();
            minus.weights[idx] -= h;
            let numeric = (loss_and_gradient(&plus, &x, &label).unwrap().loss
                - loss_and_gradient(&minus, &x, &label).unwrap().loss)
                / (2.0 * h);
            worst = worst.max(rel(analytic.d_weights[idx], numeric));
        }
        for c in 0..model.bias.len() {
            let mut plus = model.clone();
            plus.bias[c] += h;
            let mut minus = model.clone();
            minus.bias[c] -= h;
            let numeric = (loss_and_gradient(&plus, &x, &label).unwrap().loss
                - loss_and_gradient(&minus, &x, &label).unwrap().loss)
                / (2.0 * h);
            worst = worst.max(rel(analytic.d_bias[c], numeric));
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
    println!("ACCEPTANCE 5 PASS - 100 instances, worst gradient relative error = {worst:.3e}");
}

#[test]
fn criterion_6_corruption_statistics() {
    // Word dropout at the text grid levels.
    let words = vec!["w"; 100_000].join(" ");
    let text_segment = TextSegment::new(Modality::Text, Stage::Transformed, &words);
    for (i, &p) in corruption::TEXT_LEVELS.iter().enumerate() {
        let out = corruption::corrupt_text(&text_segment, p, 1000 + i as u64).unwrap();
        let dropped = 1.0 - out.text.split_whitespace().count() as f64 / 100_000.0;
        assert!(
            (dropped - p).abs() <= 0.01,
            "text level {p}: dropped fraction {dropped}"
        );
    }
    // Column drop across the tabular grid, 1e5 column trials per level.
    let record: Vec<(String, String)> = (0..10).map(|i| (format!("c{i}"), "v".into())).collect();
    for (i, &p) in corruption::TABULAR_LEVELS.iter().enumerate() {
        let mut dropped_columns = 0usize;
        for trial in 0..10_000u64 {
            let survivors =
                corruption::corrupt_tabular(&record, p, trial * 31 + i as u64).unwrap();
            dropped_columns += 10 - survivors.len();
        }
        let fraction = dropped_columns as f64 / 100_000.0;
        assert!(
            (fraction - p).abs() <= 0.01,
            "tabular level {p}: dropped fraction {fraction}"
        );
    }
    // Exact identities at zero.
    assert_eq!(
        corruption::corrupt_text(&text_segment, 0.0, 7).unwrap(),
        text_segment
    );
    assert_eq!(corruption::corrupt_tabular(&record, 0.0, 7).unwrap(), record);
    let caption = TextSegment::new(Modality::Image, Stage::Transformed, "a calm brown dog");
    assert_eq!(
        corruption::corrupt_image(&caption, 0.0, 7, None, None).unwrap(),
        caption
    );
    println!("ACCEPTANCE 6 PASS - empirical drop fractions within +/-0.01 at 1e5 trials; all operators exact identities at 0");
}

#[test]
fn criterion_7_grid_combinatorics() {
    let permutations = corruption::enumerate_permutations(3).unwrap();
    assert_eq!(permutations.len(), 6);
    let missing = corruption::scenario_grid(
        ScenarioKind::Missing,
        &Modality::ALL,
        NoisyMode::PerModality,
        1,
    )
    .unwrap();
    assert_eq!(missing.conditions.len(), 6);
    let noisy = corruption::scenario_grid(
        ScenarioKind::Noisy,
        &Modality::ALL,
        NoisyMode::PerModality,
        1,
    )
    .unwrap();
    assert_eq!(noisy.conditions.len(), 15);
    println!("ACCEPTANCE 7 PASS - 6 permutations, 6 missing conditions, 15 noisy conditions");
}

fn text_dropout_grid(seed: u64) -> ScenarioGrid {
    ScenarioGrid {
        kind: ScenarioKind::Noisy,
        conditions: vec![ScenarioCondition {
            id: "noisy/text/0.30".into(),
            kind: ConditionKind::Noisy {
                target: Some(Modality::Text),
                level_index: 2,
                level: 0.3,
            },
            seed,
        }],
    }
}

#[test]
fn criterion_8_adversarial_training_improves_drop_ratio() {
    let dataset = generate_synthetic_dataset(&SynthSpec {
        size: 200,
        num_classes: 4,
        seed: 101,
        confuser_probability: 0.4,
        ..SynthSpec::default()
    })
    .unwrap();
    let (train, test) = split_dataset(&dataset, 0.6, 5).unwrap();

    let mut naive_ratio_sum = 0.0;
    let mut adversarial_ratio_sum = 0.0;
    for seed in [1u64, 2, 3] {
        for adversarial in [false, true] {
            let run = RunConfig {
                seed,
                repeats: 2,
                backend: BackendConfig::mock(7, None),
                ablation: AblationFlags::default(),
                adversarial_iteration_multiplier: 10,
            };
            let mut experiment = Experiment::new(run).unwrap();
            experiment.train = TrainConfig {
                epochs: 30,
                learning_rate: 0.5,
                l2: 0.01,
                batch_size: 8,
                mode: if adversarial {
                    TrainMode::TextAdversarial { multiplier: 10 }
                } else {
                    TrainMode::Naive
                },
            };
            experiment.feature_dim = 96;
            experiment.ngram = 2;
            experiment.config_hash = "acceptance".into();

            let demo = experiment.bootstrap(&train).unwrap();
            let (model, stats) = experiment.train_model(&train, demo.as_ref()).unwrap();
            if adversarial {
                assert!(
                    stats.steps <= 10 * stats.naive_steps,
                    "step cap violated: {} > 10 * {}",
                    stats.steps,
                    stats.naive_steps
                );
                assert!(stats.steps >= stats.naive_steps);
            }
            let grid = text_dropout_grid(seed.wrapping_mul(7919));
            let report = experiment
                .run_scenario(&model, &test, &grid, demo.as_ref())
                .unwrap();
            let ratio = report.aggregate.mean_drop_ratio.unwrap();
            if adversarial {
                adversarial_ratio_sum += ratio;
            } else {
                naive_ratio_sum += ratio;
            }
        }
    }
    let naive_mean = naive_ratio_sum / 3.0;
    let adversarial_mean = adversarial_ratio_sum / 3.0;
    let gap = adversarial_mean - naive_mean;
    assert!(
        gap >= 0.02,
        "expected adversarial mean drop ratio to beat naive by >= 0.02, got naive {naive_mean:.4}, adversarial {adversarial_mean:.4}"
    );
    println!(
        "ACCEPTANCE 8 PASS - text word-dropout p=0.3 over 3 seeds: naive {naive_mean:.4} vs adversarial {adversarial_mean:.4} (gap {gap:+.4}, step cap held)"
    );
}

#[test]
fn criterion_9_cache_determinism_and_ablation_call_counts() {
    let dataset = generate_synthetic_dataset(&SynthSpec {
        size: 24,
        num_classes: 3,
        seed: 12,
        ..SynthSpec::default()
    })
    .unwrap();
    let (train, test) = split_dataset(&dataset, 0.75, 3).unwrap();
    let cache_dir = tempfile::tempdir().unwrap();

    let make_experiment = || {
        let run = RunConfig {
            seed: 5,
            repeats: 1,
            backend: BackendConfig::mock(7, Some(cache_dir.path().to_path_buf())),
            ablation: AblationFlags::default(),
            adversarial_iteration_multiplier: 10,
        };
        let mut experiment = Experiment::new(run).unwrap();
        experiment.train.epochs = 2;
        experiment.train.mode = TrainMode::TextAdversarial { multiplier: 10 };
        experiment.config_hash = "acceptance".into();
        experiment
    };

    let first = make_experiment();
    let report_a = first
        .evaluate_scenario(&train, &test, ScenarioKind::Missing)
        .unwrap();
    let cold_calls = first.backend.calls();
    assert!(cold_calls > 0, "cold run must reach the backend");

    // Fresh experiment, fresh inner mock (call counter at zero), same cache.
    let second = make_experiment();
    let report_b = second
        .evaluate_scenario(&train, &test, ScenarioKind::Missing)
        .unwrap();
    assert_eq!(
        second.backend.calls(),
        0,
        "warm-cache rerun must issue zero backend calls"
    );
    assert_eq!(report_a.to_json(), report_b.to_json(), "reports must be byte-identical");

    // Alignment ablated away: no summarize or reasoning traffic at all.
    let mock = Arc::new(MockBackend::new(7));
    let run = RunConfig {
        seed: 5,
        repeats: 1,
        backend: BackendConfig::mock(7, None),
        ablation: AblationFlags {
            use_alignment: false,
            use_perturbation: true,
        },
        adversarial_iteration_multiplier: 10,
    };
    let mut ablated = Experiment::new(run).unwrap();
    ablated.backend = mock.clone();
    ablated.train.epochs = 2;
    ablated.train.mode = TrainMode::TextAdversarial { multiplier: 10 };
    ablated.config_hash = "acceptance".into();
    ablated
        .evaluate_scenario(&train, &test, ScenarioKind::Missing)
        .unwrap();
    assert!(mock.calls() > 0, "perturbation traffic still flows");
    assert_eq!(mock.calls_of_kind(RequestKind::Summarize), 0);
    assert_eq!(mock.calls_of_kind(RequestKind::Reason), 0);
    println!(
        "ACCEPTANCE 9 PASS - warm cache rerun: 0 backend calls (cold run {cold_calls}), byte-identical report; alignment-off run made 0 summarize/reason calls"
    );
}

#[test]
fn criterion_10_perturbation_closure_and_arity() {
    let mut stream = rng::stream(77, "acceptance_closure", "");
    let ops = [EditOp::Deletion, EditOp::Insertion, EditOp::Substitution];
    for case in 0..1000 {
        let word_count = stream.random_range(1..12);
        let base: Vec<String> = (0..word_count)
            .map(|i| format!("word{case}x{i}"))
            .collect();
        let mut text = base.join(" ");
        let expected = strip_dummy_tokens(&text);
        let edits = stream.random_range(0..6);
        for _ in 0..edits {
            let op = ops[stream.random_range(0..ops.len())];
            text = dummy_token_edit(&text, op, stream.random());
        }
        assert_eq!(
            strip_dummy_tokens(&text),
            expected,
            "closure broke for {text:?}"
        );
    }

    let backend = MockBackend::new(5);
    for case in 0..200u32 {
        let k = case % 6 + 1;
        let input = format!("alpha{case} beta gamma delta epsilon");
        let out = paraphrase(&input, k, 0.4, u64::from(case), &backend, DEFAULT_MODEL).unwrap();
        assert_eq!(out.variants.len(), k as usize, "k={k} case={case}");
    }
    println!("ACCEPTANCE 10 PASS - 1000 edit sequences strip back exactly; paraphrase arity equals k across 200 calls");
}
