use dwcaps::capsule::CapsuleConfig;
use dwcaps::data::{generate_synthetic, split, DatasetBundle};
use dwcaps::model::{build_variant, ModelGraph, ModelOptions};
use dwcaps::train::{evaluate, train, TrainConfig};

fn model(name: &str, classes: usize, filters: usize) -> ModelGraph {
    let caps = CapsuleConfig { num_classes: classes, ..Default::default() };
    build_variant(name.parse().unwrap(), caps, ModelOptions { filters, ..Default::default() }).unwrap()
}

fn quiet(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, seed, record_timing: false, ..Default::default() }
}

#[test]
fn first_epoch_lowers_the_loss() {
    let data = split(&generate_synthetic(3, 40, 32, 3).unwrap(), 0.7, 1.0, 3).unwrap();
    let out = train(&model("32-v1-2-2-k3", 3, 8), &data, &quiet(1, 3)).unwrap();
    let first = out.record.rows[0].train_loss;
    println!("initial {:.6} after epoch 1 {first:.6}", out.record.initial_train_loss);
    assert!(first < out.record.initial_train_loss);
}

#[test]
fn same_seed_same_run() {
    let data = split(&generate_synthetic(3, 20, 32, 4).unwrap(), 0.7, 1.0, 4).unwrap();
    let m = model("32-v2-2-2-k3", 3, 8);
    let a = train(&m, &data, &quiet(2, 9)).unwrap();
    let b = train(&m, &data, &quiet(2, 9)).unwrap();
    assert_eq!(a.record.to_csv(), b.record.to_csv());
    assert_eq!(a.checkpoint, b.checkpoint);
    let c = train(&m, &data, &quiet(2, 10)).unwrap();
    assert_ne!(a.checkpoint, c.checkpoint);
}

fn micro_set() -> DatasetBundle {
    let mut data = generate_synthetic(10, 1, 32, 11).unwrap();
    data.train = data.all_indices();
    data.test = Vec::new();
    data
}

#[test]
fn memorizes_ten_items() {
    let data = micro_set();
    for name in ["32-v1-2-2-k3", "32-v2-2-2-k3"] {
        let m = model(name, 10, 16);
        let cfg = TrainConfig { batch_size: 10, stop_at_train_acc: Some(1.0), ..quiet(200, 1) };
        let out = train(&m, &data, &cfg).unwrap();
        let last = out.record.rows.last().unwrap();
        println!("{name}: train acc {} after {} epochs", last.train_acc, last.epoch);
        let eval = evaluate(&m, &out.params, &data, &data.train).unwrap();
        assert_eq!(eval.accuracy, 1.0, "{name}");
    }
}

/// Multinomial logistic regression on raw pixels, full-batch gradient descent.
fn linear_baseline(data: &DatasetBundle, epochs: usize, lr: f64) -> f64 {
    let k = data.num_classes();
    let x_train = data.images(&data.train);
    let d = x_train.len() / data.train.len();
    let y_train = data.labels_of(&data.train);
    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let logits = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k).map(|c| b[c] + x.iter().enumerate().map(|(i, v)| v * w[i * k + c]).sum::<f64>()).collect()
    };
    for _ in 0..epochs {
        let mut gw = vec![0.0; d * k];
        let mut gb = vec![0.0; k];
        for (x, &y) in x_train.data().chunks(d).zip(&y_train) {
            let z = logits(&w, &b, x);
            let max = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / s - if c == y { 1.0 } else { 0.0 };
                gb[c] += g;
                for (i, v) in x.iter().enumerate() {
                    gw[i * k + c] += g * v;
                }
            }
        }
        let n = data.train.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g / n);
        b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g / n);
    }
    let x_test = data.images(&data.test);
    let correct = x_test
        .data()
        .chunks(d)
        .zip(data.labels_of(&data.test))
        .filter(|(x, y)| {
            let z = logits(&w, &b, x);
            (0..k).max_by(|&a, &c| z[a].total_cmp(&z[c])).unwrap() == *y
        })
        .count();
    correct as f64 / data.test.len() as f64
}

#[test]
fn capsule_model_beats_linear_pixels() {
    let data = split(&generate_synthetic(3, 500, 32, 21).unwrap(), 0.7, 0.5, 21).unwrap();
    let linear = linear_baseline(&data, 100, 0.5);
    let out = train(&model("32-v1-2-2-k3", 3, 16), &data, &quiet(5, 21)).unwrap();
    let capsule = out.record.rows.last().unwrap().test_acc;
    println!("linear test acc {linear:.4}, capsule test acc {capsule:.4}, margin {:.4}", capsule - linear);
    assert!(capsule > linear);
}
