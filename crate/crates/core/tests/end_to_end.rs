//! Full training runs on small synthetic datasets.

use eedn_core::backbone::{
    load_activations, save_activations, synth_generate, DatasetSplit, SplitSizes, SynthConfig,
};
use eedn_core::cost::CostTable;
use eedn_core::evaluation::{
    gate_usage_report, lambda_sweep, threshold_gm_baseline, warm_start, EvalConfig,
};
use eedn_core::math::argmax;
use eedn_core::trainer::{fit_final_head, init_model, train, TrainConfig};
use eedn_core::{decide_exit, ExecMode, ExitModel, LayeredSample};

fn small(layers: usize, signal: Vec<f64>, noise: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        layers,
        classes: 4,
        dim: 8,
        input_dim: 4,
        sizes: SplitSizes {
            train: 600,
            val1: 150,
            val2: 150,
            test: 300,
        },
        easy_fraction: 0.7,
        signal_scale: signal,
        noise_sigma: noise,
        hard_gamma: 0.2,
        noise_persistence: 0.5,
        seed,
    }
}

fn costs(data: &DatasetSplit) -> CostTable {
    CostTable::for_branches(
        &vec![1000; data.meta.layers],
        &data.meta.dims,
        data.meta.classes,
        92,
    )
    .unwrap()
}

fn quick(lambda: f64) -> TrainConfig {
    TrainConfig {
        lambda,
        epochs: 8,
        warmup_epochs: 3,
        bi_switch: 3,
        head_epochs: 10,
        ..TrainConfig::default()
    }
}

fn im_accuracy(model: &ExitModel, layer: usize, samples: &[LayeredSample]) -> f64 {
    let im = &model.ims[layer - 1];
    let ok = samples
        .iter()
        .filter(|s| argmax(&im.logits(&s.z[layer - 1]).unwrap()) == s.y)
        .count();
    ok as f64 / samples.len() as f64
}

fn avg_ic_norm(model: &ExitModel, samples: &[LayeredSample], costs: &CostTable) -> f64 {
    let exits: Vec<usize> = samples
        .iter()
        .map(|s| decide_exit(s, model).layer)
        .collect();
    costs.average_cost_norm(&exits).unwrap()
}

#[test]
fn noiseless_final_head_fits_training_set() {
    let data = synth_generate(&small(3, vec![0.3, 0.6, 1.0], 0.0, 1)).unwrap();
    let cfg = TrainConfig {
        head_epochs: 40,
        ..quick(1.0)
    };
    let mut model = init_model(&data, &cfg);
    fit_final_head(&mut model, &data.train, &cfg);
    assert_eq!(im_accuracy(&model, 3, &data.train), 1.0);
}

#[test]
fn deeper_probe_beats_first_layer_probe() {
    let data = synth_generate(&SynthConfig {
        signal_scale: SynthConfig::ramp(0.2, 1.0, 6),
        ..small(6, vec![0.0; 6], 1.0, 2)
    })
    .unwrap();
    let cfg = TrainConfig {
        warmup_epochs: 10,
        epochs: 11,
        ..quick(1.0)
    };
    let model = warm_start(&data, &costs(&data), &cfg).unwrap();
    // IM 5 is the deepest one trained from scratch with the same recipe as IM 1.
    let first = im_accuracy(&model, 1, &data.test);
    let last = im_accuracy(&model, 6, &data.test);
    assert!(first < last, "z^1 probe {first} vs z^L probe {last}");
    assert!(first < im_accuracy(&model, 5, &data.test));
}

#[test]
fn zero_lambda_routes_to_perfect_ims() {
    // Layer 1 carries no class signal; layers 2 and 3 are noiselessly separable.
    let data = synth_generate(&small(3, vec![0.0, 1.0, 1.0], 0.0, 3)).unwrap();
    let c = costs(&data);
    let cfg = TrainConfig {
        epochs: 15,
        warmup_epochs: 8,
        head_epochs: 40,
        ..quick(0.0)
    };
    let model = train(&data, &c, &cfg).unwrap().model;
    let perfect: Vec<bool> = (1..=3)
        .map(|l| im_accuracy(&model, l, &data.test) == 1.0)
        .collect();
    let at_perfect = data
        .test
        .iter()
        .filter(|s| perfect[decide_exit(s, &model).layer - 1])
        .count() as f64
        / data.test.len() as f64;
    assert!(
        at_perfect >= 0.95,
        "{at_perfect} exit at a perfect IM ({perfect:?})"
    );
    let report = gate_usage_report(&model, &data.test, ExecMode::Parallel).unwrap();
    assert_eq!(
        report.gates[0].count, 0,
        "uninformative first gate should stay unused"
    );
}

#[test]
fn lambda_endpoints_order_cost() {
    let data = synth_generate(&small(4, SynthConfig::ramp(0.3, 1.0, 4), 1.0, 4)).unwrap();
    let c = costs(&data);
    let free = train(&data, &c, &quick(0.0)).unwrap().model;
    let pricey = train(&data, &c, &quick(10.0)).unwrap().model;
    assert!(avg_ic_norm(&pricey, &data.test, &c) <= avg_ic_norm(&free, &data.test, &c));
}

#[test]
fn sweep_is_deterministic_and_mode_independent() {
    let data = synth_generate(&small(3, vec![0.3, 0.6, 1.0], 1.0, 5)).unwrap();
    let c = costs(&data);
    let run = |exec: ExecMode| {
        let cfg = TrainConfig { exec, ..quick(1.0) };
        let eval = EvalConfig {
            exec,
            ..EvalConfig::default()
        };
        lambda_sweep(&cfg, &data, &c, &[0.1, 1.0, 5.0], &eval).unwrap()
    };
    let a = run(ExecMode::Parallel);
    let b = run(ExecMode::Parallel);
    let seq = run(ExecMode::Sequential);
    assert_eq!(a.len(), 3);
    for ((x, y), z) in a.iter().zip(&b).zip(&seq) {
        assert_eq!(x.point, y.point);
        assert_eq!(x.outcome.model, z.outcome.model);
        assert_eq!(x.outcome.log, z.outcome.log);
    }
    let lambdas: Vec<f64> = a.iter().map(|r| r.point.lambda).collect();
    assert_eq!(lambdas, vec![0.1, 1.0, 5.0]);
}

#[test]
fn baseline_and_joint_share_warm_start() {
    let data = synth_generate(&small(3, vec![0.3, 0.6, 1.0], 1.0, 6)).unwrap();
    let c = costs(&data);
    let cfg = quick(1.0);
    let a = warm_start(&data, &c, &cfg).unwrap();
    let b = warm_start(&data, &c, &cfg).unwrap();
    assert_eq!(a, b);
    let eval = EvalConfig::default();
    let x = threshold_gm_baseline(&a, &[0.6, 0.9], &data, &c, &eval).unwrap();
    let y = threshold_gm_baseline(&b, &[0.6, 0.9], &data, &c, &eval).unwrap();
    // Threshold points carry a NaN lambda, so compare their printed form.
    assert_eq!(format!("{x:?}"), format!("{y:?}"));
}

#[test]
fn training_from_activation_files_matches_in_memory() {
    let data = synth_generate(&small(3, vec![0.3, 0.6, 1.0], 1.0, 7)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_activations(&data, dir.path()).unwrap();
    let loaded = load_activations(&manifest).unwrap();
    let c = costs(&data);
    let a = train(&data, &c, &quick(1.0)).unwrap();
    let b = train(&loaded, &c, &quick(1.0)).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
}
