use desal::stats::{self, median};
use desal::synthdata::{self, generate_detailed, trait_label_table, GenSpec, LabeledDataset};

fn stump_accuracy(data: &LabeledDataset, col: usize, sign: f64) -> f64 {
    let pred: Vec<u8> = (0..data.len())
        .map(|r| u8::from(sign * data.features.get(r, col) > 0.0))
        .collect();
    stats::accuracy(&pred, &data.label_bits()).unwrap()
}

#[test]
fn confound_stump_fits_train_but_not_test() {
    let mut train_acc = Vec::new();
    let mut test_acc = Vec::new();
    for seed in 0..20 {
        let spec = GenSpec {
            confound_align: 1.0,
            signal_noise_std: 3.0,
            seed,
            ..GenSpec::default()
        };
        let (train, test) = synthdata::generate(&spec).unwrap();
        let col = spec.confound_columns()[0];
        let up = stump_accuracy(&train, col, 1.0);
        let (sign, acc) = if up >= 0.5 { (1.0, up) } else { (-1.0, 1.0 - up) };
        train_acc.push(acc);
        test_acc.push(stump_accuracy(&test, col, sign));
    }
    let train_med = median(&train_acc).unwrap();
    let test_med = median(&test_acc).unwrap();
    assert!(train_med >= 0.95, "train stump {train_med}");
    assert!(test_med <= 0.6, "test stump {test_med}");
}

fn rejection_rate(align: f64, alpha: f64, test_side: bool) -> f64 {
    let seeds = 100;
    let mut rejected = 0;
    for seed in 0..seeds {
        let g = generate_detailed(&GenSpec {
            confound_align: align,
            seed,
            ..GenSpec::default()
        })
        .unwrap();
        let traits = if test_side { &g.test_traits } else { &g.train_traits };
        let table = trait_label_table(traits).unwrap();
        // a table with an empty row cannot show dependence
        if let Ok(r) = stats::chi_square_independence(&table) {
            if r.p_value < alpha {
                rejected += 1;
            }
        }
    }
    rejected as f64 / seeds as f64
}

#[test]
fn aligned_confound_is_detected() {
    assert!(rejection_rate(1.0, 1e-3, false) >= 0.95);
}

#[test]
fn unaligned_confound_is_not_detected() {
    assert!(rejection_rate(0.5, 0.01, false) <= 0.05);
}

#[test]
fn test_identities_are_independent_of_the_confound() {
    assert!(rejection_rate(1.0, 0.01, true) <= 0.05);
}

#[test]
fn utterance_table_shows_identity_label_dependence() {
    let (train, _) = synthdata::generate(&GenSpec::default()).unwrap();
    let table = train.identity_label_table().unwrap();
    let r = stats::chi_square_independence(&table.compact()).unwrap();
    assert!(r.p_value < 1e-3);
    assert_eq!(r.df, Some(train.m - 1));
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = synthdata::generate(&GenSpec {
        seed: 9,
        ..GenSpec::default()
    })
    .unwrap();
    for (name, data) in [("train.csv", &train), ("test.csv", &test)] {
        let path = dir.path().join(name);
        synthdata::save_csv(data, &path).unwrap();
        assert!(synthdata::manifest_path(&path).exists());
        let back = synthdata::load_csv(&path).unwrap();
        assert_eq!(back.features, data.features);
        assert_eq!(back.labels, data.labels);
        assert_eq!(back.identities, data.identities);
        assert_eq!(back.channels, data.channels);
    }
}
