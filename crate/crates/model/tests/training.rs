mod common;

use std::sync::OnceLock;

use topocl_core::augment::{OpKind, OpTemplate};
use topocl_core::calibrate::CalibratedCombo;
use topocl_core::{Band, CalibrationTable};
use topocl_model::corpus::generate_sample;
use topocl_model::{
    generate_corpus, linear_probe, toy_calibration_table, ContrastiveLoss, CorpusConfig, ProbeConfig, ShapeClass,
    ShapeCorpus, TopoCl, TrainConfig, Trainer, View,
};
use topocl_nn::{Graph, Tensor};

/// Both bands hold a zero brightness shift, so every view equals its source.
fn identity_table() -> CalibrationTable {
    let combo = |band| CalibratedCombo {
        ops: vec![OpTemplate::new(OpKind::Brightness, 0.0, 0.0)],
        band,
        median_lo: 0.0,
        median_hi: 0.0,
        samples: 1,
    };
    CalibrationTable {
        dataset: "identity".into(),
        combos: vec![combo(Band::Weak), combo(Band::Strong)],
        bands: Default::default(),
        unusable: vec![],
    }
}

fn corpus(n: usize, seed: u64) -> ShapeCorpus {
    generate_corpus(&CorpusConfig {
        n_per_class: n,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small_config(seed: u64, epochs: [usize; 3]) -> TrainConfig {
    TrainConfig {
        seed,
        epochs,
        batch_size: 24,
        lr: 1e-3,
        ..Default::default()
    }
}

/// Scalar NT-Xent over `2n` rows where row `i` pairs with row `i ± n`.
fn nt_xent_scalar(rows: &[Vec<f64>], tau: f64) -> f64 {
    let m = rows.len();
    let n = m / 2;
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / norm).collect()
        })
        .collect();
    let sim = |a: usize, b: usize| unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..m {
        let pos = (i + n) % m;
        let denom: f64 = (0..m).filter(|&k| k != i).map(|k| sim(i, k).exp()).sum();
        total += denom.ln() - sim(i, pos);
    }
    total / m as f64
}

#[test]
fn identical_views_match_scalar_nt_xent() {
    let data = corpus(4, 11);
    let table = identity_table();
    let trainer = Trainer::new(&data, &table, small_config(3, [0, 1, 0])).unwrap();
    assert_eq!(trainer.stage(), 2);
    let batch: Vec<usize> = (0..8).collect();
    let loss = trainer.batch_loss(&batch).unwrap().unwrap();

    let m = &trainer.model;
    let points: Vec<_> = batch
        .iter()
        .map(|&i| {
            let s = &data.samples[i];
            let view = View { image: s.image.clone(), roi: s.roi.clone() };
            m.select(&view.diagram().unwrap())
        })
        .collect();
    let t = m.topo_features(&points).unwrap();
    let mut g = Graph::new();
    let tv = g.constant(t);
    let z = m.topo_head.forward(&mut g, &m.topo_set, tv).unwrap();
    let z = g.value(z).clone();
    let rows: Vec<Vec<f64>> = (0..2 * batch.len()).map(|i| z.row(i % batch.len()).to_vec()).collect();
    let ContrastiveLoss::NtXent { temperature } = ContrastiveLoss::default() else { unreachable!() };
    let expected = nt_xent_scalar(&rows, temperature);
    assert!((loss - expected).abs() < 1e-9 * expected.abs().max(1.0), "{loss} vs {expected}");
}

#[test]
fn one_topology_step_lowers_the_batch_loss() {
    let data = corpus(4, 12);
    let table = toy_calibration_table().unwrap();
    let batch: Vec<usize> = (0..8).collect();
    let mut decreased = 0;
    for trial in 0..5 {
        let mut trainer = Trainer::new(&data, &table, small_config(trial, [0, 1, 0])).unwrap();
        let before = trainer.batch_loss(&batch).unwrap().unwrap();
        let reported = trainer.train_batch(&batch, 1e-3).unwrap().unwrap();
        assert_eq!(reported, before);
        let after = trainer.batch_loss(&batch).unwrap().unwrap();
        decreased += usize::from(after < before);
    }
    assert!(decreased >= 3, "{decreased} of 5");
}

#[test]
fn gradient_reaches_the_first_ph_layer() {
    let data = corpus(4, 13);
    let table = toy_calibration_table().unwrap();
    let trainer = Trainer::new(&data, &table, small_config(5, [0, 1, 0])).unwrap();
    let (_, grads) = trainer.batch_gradients(&(0..8).collect::<Vec<_>>()).unwrap().unwrap();
    let first = &trainer.model.topo.ph.layers[0];
    assert!(grads.param(first.weight).unwrap().norm() > 0.0);
}

/// Mean of the first and last three epochs of each stage.
fn smoothed_ends(losses: &[topocl_model::LossRecord], stage: u8) -> (f64, f64) {
    let v: Vec<f64> = losses.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect();
    let k = 3.min(v.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&v[..k]), mean(&v[v.len() - k..]))
}

#[test]
fn every_stage_loss_decreases_in_most_seeds() {
    let data = corpus(40, 14);
    let table = toy_calibration_table().unwrap();
    let mut wins = [0; 3];
    for seed in 0..3 {
        let mut t = Trainer::new(&data, &table, small_config(seed, [8, 8, 8])).unwrap();
        t.run().unwrap();
        for stage in 1..=3u8 {
            let (first, last) = smoothed_ends(t.losses(), stage);
            wins[stage as usize - 1] += usize::from(last < first);
        }
    }
    assert!(wins.iter().all(|&w| w >= 2), "{wins:?}");
}

#[test]
fn training_is_bit_reproducible() {
    let data = corpus(10, 15);
    let table = toy_calibration_table().unwrap();
    let run = || {
        let mut t = Trainer::new(&data, &table, small_config(9, [1, 1, 1])).unwrap();
        t.run().unwrap();
        t.losses().iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_reproduces_the_next_step() {
    let data = corpus(10, 16);
    let table = toy_calibration_table().unwrap();
    let dir = tempfile::tempdir().unwrap();
    for stop in [1usize, 3, 4] {
        let mut t = Trainer::new(&data, &table, small_config(21, [2, 2, 2])).unwrap();
        for _ in 0..stop {
            t.step_epoch().unwrap();
        }
        let path = dir.path().join(format!("stop{stop}"));
        t.save(&path).unwrap();
        let mut resumed = Trainer::resume(&path, &data, &table).unwrap();
        assert_eq!(resumed.stage(), t.stage());
        let batch: Vec<usize> = (0..6).collect();
        let a = t.batch_loss(&batch).unwrap().unwrap();
        let b = resumed.batch_loss(&batch).unwrap().unwrap();
        assert!((a - b).abs() < 1e-9);
        let a = t.step_epoch().unwrap().unwrap();
        let b = resumed.step_epoch().unwrap().unwrap();
        assert!((a.loss - b.loss).abs() < 1e-9, "stop {stop}: {} vs {}", a.loss, b.loss);
        assert_eq!(t.losses().len(), resumed.losses().len());
    }
}

struct Trained {
    train: ShapeCorpus,
    test: ShapeCorpus,
    pretrained: TopoCl,
}

const EPOCHS: [usize; 3] = [10, 10, 10];

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let train = corpus(60, 17);
        let test = corpus(60, 18);
        let table = toy_calibration_table().unwrap();
        let mut t = Trainer::new(&train, &table, small_config(0, EPOCHS)).unwrap();
        t.run().unwrap();
        let pretrained = t.model.clone();
        Trained { train, test, pretrained }
    })
}

fn views(c: &ShapeCorpus) -> Vec<View> {
    c.samples.iter().map(|s| View { image: s.image.clone(), roi: s.roi.clone() }).collect()
}

fn probe_z(model: &TopoCl, d: &Trained) -> f64 {
    let xtr = model.embed(&views(&d.train)).unwrap();
    let xte = model.embed(&views(&d.test)).unwrap();
    linear_probe(&xtr, &d.train.labels(), &xte, &d.test.labels(), &ProbeConfig::default())
        .unwrap()
        .accuracy
}

#[test]
fn frozen_random_encoders_underperform_pretrained_ones() {
    let d = trained();
    let table = toy_calibration_table().unwrap();
    let config = TrainConfig {
        pretrain: false,
        freeze_encoders: true,
        ..small_config(0, EPOCHS)
    };
    let mut t = Trainer::new(&d.train, &table, config).unwrap();
    let before = t.model.topo_set.clone();
    t.run().unwrap();
    assert!(t.losses().iter().all(|r| r.stage == 3));
    // the encoders really stayed fixed
    for ((_, a), (_, b)) in before.iter().zip(t.model.topo_set.iter()) {
        assert_eq!(a, b);
    }
    let frozen = probe_z(&t.model, d);
    let pretrained = probe_z(&d.pretrained, d);
    assert!(frozen < pretrained, "frozen {frozen} vs pretrained {pretrained}");
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    dot / (a.norm() * b.norm())
}

#[test]
fn annuli_embed_closer_to_annuli_than_to_disks() {
    let model = &trained().pretrained;
    let config = CorpusConfig { seed: 0x5eed, ..Default::default() };
    let embed = |class, index| {
        let s = generate_sample(&config, class, index).unwrap();
        model.embed(&[View { image: s.image, roi: s.roi }]).unwrap()
    };
    let mut hits = 0;
    for trial in 0..50 {
        let annulus = embed(ShapeClass::Annulus, 2 * trial);
        let other = embed(ShapeClass::Annulus, 2 * trial + 1);
        let disk = embed(ShapeClass::Disk, trial);
        hits += usize::from(cosine(&annulus, &disk) < cosine(&annulus, &other));
    }
    assert!(hits >= 45, "{hits} of 50");
}
