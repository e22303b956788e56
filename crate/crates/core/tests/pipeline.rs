use compalign_core::data::{gen_blobs, gen_seg_blobs, BlobSpec, SegSpec};
use compalign_core::losses::{LossConfig, LossTerm};
use compalign_core::models::{build_classifier, LayerSpec, Network};
use compalign_core::rng::{SeededRng, Stream};
use compalign_core::train::{accuracy, fit, Objective, Schedule};
use compalign_core::weighting::{Scheme, Weighting, WeightingParams};

fn blobs(classes: usize, per_class: usize, spread: f64, seed: u64) -> compalign_core::data::Dataset {
    gen_blobs(&BlobSpec {
        classes,
        train_per_class: vec![per_class; classes],
        eval_per_class: vec![per_class; classes],
        dim: 2,
        spread,
        seed,
    })
    .unwrap()
}

fn schedule(epochs: usize) -> Schedule {
    Schedule {
        epochs,
        lr: 0.05,
        milestones: vec![epochs * 3 / 4],
        lr_decay: 0.1,
        momentum: 0.9,
        weight_decay: 1e-4,
        batch_size: 64,
    }
}

fn train_ce(net: &mut Network, ds: &compalign_core::data::Dataset, epochs: usize, seed: u64) -> Vec<f64> {
    let loss = LossConfig::new(&[LossTerm::Ce]).unwrap();
    let mut w = Weighting::new(Scheme::Uniform, &loss.terms, WeightingParams::default(), seed).unwrap();
    let logs = fit(
        net,
        &ds.train,
        &schedule(epochs),
        Objective {
            loss: &loss,
            weighting: &mut w,
            teacher: None,
            group_lambda: 0.0,
        },
        &mut SeededRng::new(seed, Stream::Shuffle),
    )
    .unwrap();
    logs.iter().map(|l| l.loss).collect()
}

#[test]
fn reference_training_smoke() {
    let ds = blobs(4, 100, 0.15, 7);
    let mut net = build_classifier(2, &[16], 4, &mut SeededRng::new(7, Stream::Init)).unwrap();
    train_ce(&mut net, &ds, 50, 7);
    let acc = accuracy(&net, &ds.eval).unwrap();
    assert!(acc >= 0.95, "eval accuracy {acc}");
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let ds = blobs(3, 10, 0.1, 1);
    let init = build_classifier(2, &[4], 3, &mut SeededRng::new(1, Stream::Init)).unwrap();
    let mut net = init.clone();
    train_ce(&mut net, &ds, 0, 1);
    assert_eq!(net, init);
}

#[test]
fn training_is_deterministic() {
    let ds = blobs(3, 30, 0.2, 2);
    let run = || {
        let mut net = build_classifier(2, &[8], 3, &mut SeededRng::new(2, Stream::Init)).unwrap();
        let log = train_ce(&mut net, &ds, 5, 2);
        (net, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn separable_blobs_are_learned_by_a_linear_model() {
    let ds = blobs(2, 50, 1e-6, 3);
    let mut net = Network::new(
        vec![2],
        vec![LayerSpec::Dense { inp: 2, out: 2 }],
        2,
        &mut SeededRng::new(3, Stream::Init),
    )
    .unwrap();
    train_ce(&mut net, &ds, 20, 3);
    assert_eq!(accuracy(&net, &ds.eval).unwrap(), 1.0);
}

#[test]
fn unequal_class_counts_are_honoured() {
    let ds = gen_blobs(&BlobSpec {
        classes: 3,
        train_per_class: vec![100, 100, 10],
        eval_per_class: vec![100, 100, 10],
        dim: 2,
        spread: 0.2,
        seed: 4,
    })
    .unwrap();
    assert_eq!(ds.train.class_counts(3), vec![100, 100, 10]);
    assert_ne!(ds.train.inputs, ds.eval.inputs);
    assert_eq!(ds, gen_blobs(&BlobSpec {
        classes: 3,
        train_per_class: vec![100, 100, 10],
        eval_per_class: vec![100, 100, 10],
        dim: 2,
        spread: 0.2,
        seed: 4,
    })
    .unwrap());
}

#[test]
fn segmentation_masks_match_rasterized_ellipses() {
    let spec = SegSpec {
        n_train: 20,
        n_eval: 20,
        height: 16,
        width: 12,
        noise: 0.3,
        seed: 9,
    };
    let (ds, _, eval_shapes) = gen_seg_blobs(&spec).unwrap();
    let plane = 16 * 12;
    let mut saw_empty = false;
    for (img, shapes) in eval_shapes.iter().enumerate() {
        assert!(shapes.len() <= 3);
        let labels = &ds.eval.labels[img * plane..(img + 1) * plane];
        if shapes.is_empty() {
            saw_empty = true;
            assert!(labels.iter().all(|&y| y == 0));
        }
        let mut expected = 0;
        let mut ambiguous = 0;
        for r in 0..16 {
            for c in 0..12 {
                // Quadratic-form test of the rotated ellipse.
                let q = shapes
                    .iter()
                    .map(|e| {
                        let (dy, dx) = (r as f64 - e.cy, c as f64 - e.cx);
                        let (s, co) = (e.angle.sin(), e.angle.cos());
                        let (iy, ix) = (1.0 / (e.ry * e.ry), 1.0 / (e.rx * e.rx));
                        dy * dy * (co * co * iy + s * s * ix)
                            + 2.0 * dy * dx * co * s * (iy - ix)
                            + dx * dx * (s * s * iy + co * co * ix)
                    })
                    .fold(f64::INFINITY, f64::min);
                if (q - 1.0).abs() < 1e-9 {
                    ambiguous += 1;
                } else if q < 1.0 {
                    expected += 1;
                    assert_eq!(labels[r * 12 + c], 1);
                }
            }
        }
        let got = labels.iter().filter(|&&y| y == 1).count();
        assert!(got >= expected && got <= expected + ambiguous);
    }
    assert!(saw_empty, "no image without ellipses in this sample");
    assert_eq!(gen_seg_blobs(&spec).unwrap().0, ds);
}
