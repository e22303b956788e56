use compalign_core::autodiff::{grad_check, grad_check_input};
use compalign_core::losses::{ce_loss, ce_pred_loss, combined_loss, kd_loss_with, mse_pairing_loss, LossConfig, LossTerm};
use compalign_core::models::{LayerSpec, Network};
use compalign_core::rng::{SeededRng, Stream};
use compalign_core::weighting::Weights;
use compalign_core::{predict, Tensor};

const TOL: f64 = 1e-4;

fn random_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Nets covering every primitive: Dense, Conv2d, ReLU, Flatten, GroupAdapter.
fn nets(seed: u64) -> Vec<(Network, Tensor)> {
    let mut rng = SeededRng::new(seed, Stream::Test);
    let mut build = |input: Vec<usize>, specs: Vec<LayerSpec>, classes: usize, batch: usize| {
        let mut net = Network::new(input.clone(), specs, classes, &mut SeededRng::new(seed, Stream::Init)).unwrap();
        // Perturb biases and adapters away from their special init values.
        for p in net.params_mut() {
            for v in p.value.data_mut() {
                *v += 0.1 * rng.normal();
            }
        }
        let mut shape = vec![batch];
        shape.extend(input);
        let x = random_tensor(&shape, &mut rng);
        (net, x)
    };
    vec![
        build(
            vec![3],
            vec![
                LayerSpec::Dense { inp: 3, out: 5 },
                LayerSpec::Relu,
                LayerSpec::GroupAdapter { n: 5 },
                LayerSpec::Dense { inp: 5, out: 4 },
            ],
            4,
            4,
        ),
        build(
            vec![2, 4, 4],
            vec![
                LayerSpec::Conv2d { in_ch: 2, out_ch: 3 },
                LayerSpec::Relu,
                LayerSpec::GroupAdapter { n: 3 },
                LayerSpec::Conv2d { in_ch: 3, out_ch: 2 },
            ],
            2,
            2,
        ),
        build(
            vec![1, 4, 4],
            vec![
                LayerSpec::Conv2d { in_ch: 1, out_ch: 2 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { inp: 32, out: 3 },
            ],
            3,
            3,
        ),
    ]
}

fn labels_for(logits: &Tensor, classes: usize, rng: &mut SeededRng) -> Vec<usize> {
    let positions = logits.len() / classes;
    (0..positions).map(|_| rng.index(classes)).collect()
}

fn check_all_losses(seed: u64) {
    for (k, (net, x)) in nets(seed).into_iter().enumerate() {
        let mut rng = SeededRng::new(seed + 100, Stream::Test);
        let out = predict(&net, &x).unwrap();
        let classes = net.num_classes();
        let labels = labels_for(&out, classes, &mut rng);
        let mut teacher = random_tensor(out.shape(), &mut rng);
        teacher.scale(2.0);

        let cases: Vec<(&str, Box<dyn Fn(&Tensor) -> compalign_core::Result<(f64, Tensor)>>)> = vec![
            ("ce", Box::new(|z: &Tensor| ce_loss(z, &labels))),
            ("mse", Box::new(|z: &Tensor| mse_pairing_loss(z, &teacher))),
            ("ce_pred", Box::new(|z: &Tensor| ce_pred_loss(z, &teacher))),
            ("kd", Box::new(|z: &Tensor| kd_loss_with(z, &teacher, 3.0, false))),
            ("kd_symmetric", Box::new(|z: &Tensor| kd_loss_with(z, &teacher, 3.0, true))),
            (
                "combined",
                Box::new(|z: &Tensor| {
                    let cfg = LossConfig::new(&LossTerm::ALL).unwrap().with_temperature(2.0).unwrap();
                    let w = Weights::from_pairs(&[
                        (LossTerm::Ce, 0.1),
                        (LossTerm::Mse, 0.2),
                        (LossTerm::CePred, 0.3),
                        (LossTerm::Kd, 0.4),
                    ]);
                    let l = combined_loss(&cfg, &w, z, Some(&teacher), &labels)?;
                    Ok((l.value, l.grad))
                }),
            ),
        ];
        for (name, loss) in &cases {
            let err = grad_check(&net, &x, loss).unwrap();
            assert!(err < TOL, "seed {seed} net {k} loss {name}: relative error {err:e}");
            let err = grad_check_input(&net, &x, loss).unwrap();
            assert!(err < TOL, "seed {seed} net {k} loss {name} (input): relative error {err:e}");
        }
    }
}

#[test]
fn every_loss_and_primitive_seed_1() {
    check_all_losses(1);
}

#[test]
fn every_loss_and_primitive_seed_2() {
    check_all_losses(2);
}

#[test]
fn every_loss_and_primitive_seed_3() {
    check_all_losses(3);
}

#[test]
fn masked_weights_get_no_gradient_and_still_check() {
    let (mut net, x) = nets(4).remove(0);
    let mask = net.params_mut()[0].mask.data_mut();
    mask[0] = 0.0;
    mask[3] = 0.0;
    for p in net.params_mut() {
        p.apply_mask();
    }
    let mut rng = SeededRng::new(4, Stream::Test);
    let labels: Vec<usize> = (0..4).map(|_| rng.index(4)).collect();
    let err = grad_check(&net, &x, |z| ce_loss(z, &labels)).unwrap();
    assert!(err < TOL);
}

#[test]
fn saliency_matches_finite_differences() {
    use compalign_core::metrics::{saliency, Target};
    let (net, x) = nets(5).remove(2);
    let one = x.example(0);
    let logits = predict(&net, &one).unwrap();
    let c = logits
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .unwrap()
        .0;
    let map = saliency(&net, &one, Target::Predicted).unwrap();

    let h = 1e-4;
    let mut fd = Vec::new();
    for k in 0..one.len() {
        let mut p = one.clone();
        p.data_mut()[k] += h;
        let up = predict(&net, &p).unwrap().data()[c];
        p.data_mut()[k] -= 2.0 * h;
        let down = predict(&net, &p).unwrap().data()[c];
        fd.push(((up - down) / (2.0 * h)).abs());
    }
    let max = fd.iter().copied().fold(0.0, f64::max);
    for (a, b) in map.values.iter().zip(&fd) {
        assert!((a - b / max).abs() < 1e-6, "{a} vs {}", b / max);
    }
}
