use desal::experiment::ACTIVE_TOL;
use desal::sal::{self, SalConfig};
use desal::synthdata::{self, GenSpec, LabeledDataset};
use desal::tensor::Rng;

fn fixture(seed: u64) -> LabeledDataset {
    synthdata::generate(&GenSpec {
        n_train_ids: 10,
        n_test_ids: 4,
        utt_per_id: 20,
        seed,
        ..GenSpec::default()
    })
    .unwrap()
    .0
}

fn quick() -> SalConfig {
    SalConfig {
        epochs_base: 100,
        epochs_add: 50,
        ..SalConfig::default()
    }
}

#[test]
fn selection_objective_never_increases() {
    for seed in 0..3 {
        let data = fixture(seed);
        let cfg = SalConfig { seed, ..quick() };
        let base = sal::pretrain_base::<f64>(&data, &cfg).unwrap();
        let selected = sal::selection_phase(base, &data, &cfg).unwrap();
        let trace = &selected.trace.selection;
        assert_eq!(trace.len(), cfg.epochs_select);
        for (i, w) in trace.windows(2).enumerate() {
            assert!(w[1] <= w[0] + 1e-12, "seed {seed} epoch {}: {} -> {}", i + 1, w[0], w[1]);
        }
    }
}

#[test]
fn active_dimensions_shrink_as_lambda_grows() {
    let data = fixture(1);
    let cfg = quick();
    let base = sal::pretrain_base::<f64>(&data, &cfg).unwrap();
    let counts: Vec<usize> = [0.0, 0.01, 0.1, 1.0]
        .iter()
        .map(|&lambda_sparsity| {
            let c = SalConfig {
                lambda_sparsity,
                ..cfg.clone()
            };
            let selected = sal::selection_phase(base.clone(), &data, &c).unwrap();
            let mask = selected.selection_matrix(&data.identities).unwrap();
            sal::active_dimensions(&mask, ACTIVE_TOL)
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    assert!(counts[0] > 0);
}

#[test]
fn stages_run_in_order_only() {
    let data = fixture(2);
    let cfg = quick();
    let base = sal::pretrain_base::<f64>(&data, &cfg).unwrap();
    assert!(sal::addition_phase(base.clone(), &data, &cfg, &mut Rng::new(0)).is_err());
    let selected = sal::selection_phase(base, &data, &cfg).unwrap();
    assert!(sal::selection_phase(selected.clone(), &data, &cfg).is_err());
    let added = sal::addition_phase(selected, &data, &cfg, &mut Rng::new(0)).unwrap();
    assert_eq!(added.trace.addition.len(), cfg.epochs_add);
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = fixture(3);
    let cfg = SalConfig { seed: 17, ..quick() };
    let run = || {
        let m = sal::pretrain_base::<f64>(&data, &cfg).unwrap();
        let m = sal::selection_phase(m, &data, &cfg).unwrap();
        sal::addition_phase(m, &data, &cfg, &mut Rng::new(5)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.trace.base, b.trace.base);
    assert_eq!(a.trace.selection, b.trace.selection);
    assert_eq!(a.trace.addition, b.trace.addition);
    assert_eq!(
        sal::predict(&a, &data.features).unwrap(),
        sal::predict(&b, &data.features).unwrap()
    );
}
