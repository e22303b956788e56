//! Reverse-mode differentiation over the fixed layer set.
//!
//! Networks are straight-line stacks, so the tape is a linear list of layer
//! records. Node 0 is the input leaf; record `k` produces node `k + 1`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{domain, Error, Result};
use crate::models::{LayerSpec, Network};
use crate::tensor::{ClassLayout, Tensor};

#[derive(Debug, Clone)]
enum Saved {
    /// Layer input (Dense, Conv2d, GroupAdapter).
    Input(Tensor),
    /// ReLU output; the gradient passes where it is positive.
    Output(Tensor),
    /// Flatten only needs the incoming shape.
    Shape(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Record {
    layer: usize,
    input: usize,
    output: usize,
    saved: Saved,
}

/// Primitive records from one forward pass, consumed by one backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    records: Vec<Record>,
    output_shape: Vec<usize>,
    consumed: bool,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

fn check_input(net: &Network, input: &Tensor) -> Result<()> {
    if input.rank() != net.input_shape().len() + 1 || &input.shape()[1..] != net.input_shape() {
        let mut expected = vec![input.shape().first().copied().unwrap_or(1)];
        expected.extend_from_slice(net.input_shape());
        return Err(Error::Shape {
            context: "layer 0 input batch".into(),
            expected,
            got: input.shape().to_vec(),
        });
    }
    Ok(())
}

/// Runs the network on a batch and records a tape for [`backward`].
pub fn forward(net: &Network, input: &Tensor) -> Result<(Tensor, Tape)> {
    check_input(net, input)?;
    let mut records = Vec::with_capacity(net.layers().len());
    let mut x = input.clone();
    for (i, layer) in net.layers().iter().enumerate() {
        let y = apply_layer(net, i, &x)?;
        let saved = match layer.spec {
            LayerSpec::Relu => Saved::Output(y.clone()),
            LayerSpec::Flatten => Saved::Shape(x.shape().to_vec()),
            _ => Saved::Input(x),
        };
        records.push(Record {
            layer: i,
            input: i,
            output: i + 1,
            saved,
        });
        x = y;
    }
    let output_shape = x.shape().to_vec();
    Ok((
        x,
        Tape {
            records,
            output_shape,
            consumed: false,
        },
    ))
}

/// Forward pass without recording.
pub fn predict(net: &Network, input: &Tensor) -> Result<Tensor> {
    check_input(net, input)?;
    let mut x = input.clone();
    for i in 0..net.layers().len() {
        x = apply_layer(net, i, &x)?;
    }
    Ok(x)
}

fn apply_layer(net: &Network, index: usize, x: &Tensor) -> Result<Tensor> {
    let layer = &net.layers()[index];
    let params = net.params();
    let y = match layer.spec {
        LayerSpec::Dense { inp, out } => {
            let w = params[layer.weight.unwrap()].value.data();
            let b = params[layer.bias.unwrap()].value.data();
            dense_forward(x, w, b, inp, out)
        }
        LayerSpec::Conv2d { in_ch, out_ch } => {
            let w = params[layer.weight.unwrap()].value.data();
            let b = params[layer.bias.unwrap()].value.data();
            conv_forward(x, w, b, in_ch, out_ch)
        }
        LayerSpec::Relu => {
            let mut y = x.clone();
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            y
        }
        LayerSpec::Flatten => {
            let n = x.batch();
            let rest = x.len() / n;
            x.clone().reshape(vec![n, rest])?
        }
        LayerSpec::GroupAdapter { n } => {
            let a = params[layer.weight.unwrap()].value.data();
            adapter_forward(x, a, n)
        }
    };
    if !y.is_finite() {
        return Err(Error::NumericOverflow {
            layer: index,
            kind: layer.spec.name(),
        });
    }
    Ok(y)
}

fn dense_forward(x: &Tensor, w: &[f64], b: &[f64], inp: usize, out: usize) -> Tensor {
    let n = x.batch();
    let mut y = Tensor::zeros(&[n, out]);
    let xd = x.data();
    let yd = y.data_mut();
    for s in 0..n {
        let xs = &xd[s * inp..(s + 1) * inp];
        for o in 0..out {
            let wo = &w[o * inp..(o + 1) * inp];
            yd[s * out + o] = b[o] + dot(wo, xs);
        }
    }
    y
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Valid output range along one axis for kernel offset `d` in {-1, 0, 1}.
#[inline]
fn valid(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { len - 1 } else { len };
    (lo, hi)
}

fn conv_forward(x: &Tensor, w: &[f64], b: &[f64], in_ch: usize, out_ch: usize) -> Tensor {
    let (n, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let plane = h * wd;
    let mut y = Tensor::zeros(&[n, out_ch, h, wd]);
    let xd = x.data();
    let yd = y.data_mut();
    for s in 0..n {
        for o in 0..out_ch {
            let yo = &mut yd[(s * out_ch + o) * plane..(s * out_ch + o + 1) * plane];
            yo.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..in_ch {
                let xc = &xd[(s * in_ch + c) * plane..(s * in_ch + c + 1) * plane];
                for k in 0..9 {
                    let wv = w[(o * in_ch + c) * 9 + k];
                    if wv == 0.0 {
                        continue;
                    }
                    let dy = (k / 3) as isize - 1;
                    let dx = (k % 3) as isize - 1;
                    let (r0, r1) = valid(h, dy);
                    let (c0, c1) = valid(wd, dx);
                    for r in r0..r1 {
                        let src = ((r as isize + dy) as usize) * wd;
                        let dst = r * wd;
                        let xs = &xc[(src as isize + c0 as isize + dx) as usize..(src as isize + c1 as isize + dx) as usize];
                        let ys = &mut yo[dst + c0..dst + c1];
                        for (yv, xv) in ys.iter_mut().zip(xs) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
        }
    }
    y
}

fn adapter_forward(x: &Tensor, a: &[f64], n: usize) -> Tensor {
    let batch = x.batch();
    let inner = x.len() / (batch * n);
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data_mut();
    for s in 0..batch {
        let base = s * n * inner;
        for i in 0..n {
            let xi = &xd[base + i * inner..base + (i + 1) * inner];
            for j in 0..n {
                let aij = a[i * n + j];
                if aij == 0.0 {
                    continue;
                }
                let yj = &mut yd[base + j * inner..base + (j + 1) * inner];
                for (yv, xv) in yj.iter_mut().zip(xi) {
                    *yv += aij * xv;
                }
            }
        }
    }
    y
}

/// Propagates `loss_grad` (d loss / d output) back through the tape.
///
/// Parameter gradients are accumulated into `net` and multiplied by their
/// masks; the gradient with respect to the network input is returned.
pub fn backward(net: &mut Network, tape: &mut Tape, loss_grad: &Tensor) -> Result<Tensor> {
    if tape.consumed {
        return Err(Error::TapeConsumed);
    }
    if loss_grad.shape() != tape.output_shape.as_slice() {
        return Err(Error::Shape {
            context: "loss gradient".into(),
            expected: tape.output_shape.clone(),
            got: loss_grad.shape().to_vec(),
        });
    }
    tape.consumed = true;
    let records = core::mem::take(&mut tape.records);
    let mut g = loss_grad.clone();
    let mut expected_node = records.len();
    for rec in records.into_iter().rev() {
        debug_assert_eq!(rec.output, expected_node);
        expected_node = rec.input;
        let spec = net.layers()[rec.layer].spec;
        let (wi, bi) = (net.layers()[rec.layer].weight, net.layers()[rec.layer].bias);
        g = match (spec, rec.saved) {
            (LayerSpec::Dense { inp, out }, Saved::Input(x)) => {
                let (gx, gw, gb) = dense_backward(&x, &g, net.params()[wi.unwrap()].value.data(), inp, out);
                accumulate(net, wi.unwrap(), &gw);
                accumulate(net, bi.unwrap(), &gb);
                gx
            }
            (LayerSpec::Conv2d { in_ch, out_ch }, Saved::Input(x)) => {
                let (gx, gw, gb) = conv_backward(&x, &g, net.params()[wi.unwrap()].value.data(), in_ch, out_ch);
                accumulate(net, wi.unwrap(), &gw);
                accumulate(net, bi.unwrap(), &gb);
                gx
            }
            (LayerSpec::GroupAdapter { n }, Saved::Input(x)) => {
                let (gx, ga) = adapter_backward(&x, &g, net.params()[wi.unwrap()].value.data(), n);
                accumulate(net, wi.unwrap(), &ga);
                gx
            }
            (LayerSpec::Relu, Saved::Output(y)) => {
                for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                    if *yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g
            }
            (LayerSpec::Flatten, Saved::Shape(shape)) => g.reshape(shape)?,
            _ => unreachable!("tape record does not match its layer"),
        };
    }
    Ok(g)
}

fn accumulate(net: &mut Network, index: usize, grad: &[f64]) {
    let p = &mut net.params_mut()[index];
    let mask = p.mask.data().to_vec();
    for ((acc, g), m) in p.grad.data_mut().iter_mut().zip(grad).zip(&mask) {
        *acc += g * m;
    }
}

fn dense_backward(x: &Tensor, g: &Tensor, w: &[f64], inp: usize, out: usize) -> (Tensor, Vec<f64>, Vec<f64>) {
    let n = x.batch();
    let xd = x.data();
    let gd = g.data();
    let mut gw = vec![0.0; out * inp];
    let mut gb = vec![0.0; out];
    let mut gx = Tensor::zeros(x.shape());
    let gxd = gx.data_mut();
    for s in 0..n {
        let xs = &xd[s * inp..(s + 1) * inp];
        let gxs = &mut gxd[s * inp..(s + 1) * inp];
        for o in 0..out {
            let go = gd[s * out + o];
            if go == 0.0 {
                continue;
            }
            gb[o] += go;
            let gwo = &mut gw[o * inp..(o + 1) * inp];
            let wo = &w[o * inp..(o + 1) * inp];
            for i in 0..inp {
                gwo[i] += go * xs[i];
                gxs[i] += go * wo[i];
            }
        }
    }
    (gx, gw, gb)
}

fn conv_backward(x: &Tensor, g: &Tensor, w: &[f64], in_ch: usize, out_ch: usize) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let plane = h * wd;
    let xd = x.data();
    let gd = g.data();
    let mut gw = vec![0.0; out_ch * in_ch * 9];
    let mut gb = vec![0.0; out_ch];
    let mut gx = Tensor::zeros(x.shape());
    let gxd = gx.data_mut();
    for s in 0..n {
        for o in 0..out_ch {
            let go = &gd[(s * out_ch + o) * plane..(s * out_ch + o + 1) * plane];
            gb[o] += go.iter().sum::<f64>();
            for c in 0..in_ch {
                let xoff = (s * in_ch + c) * plane;
                for k in 0..9 {
                    let dy = (k / 3) as isize - 1;
                    let dx = (k % 3) as isize - 1;
                    let (r0, r1) = valid(h, dy);
                    let (c0, c1) = valid(wd, dx);
                    let wv = w[(o * in_ch + c) * 9 + k];
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        let src = xoff + ((r as isize + dy) as usize) * wd;
                        let lo = (src as isize + c0 as isize + dx) as usize;
                        let hi = (src as isize + c1 as isize + dx) as usize;
                        let gs = &go[r * wd + c0..r * wd + c1];
                        acc += dot(&xd[lo..hi], gs);
                        if wv != 0.0 {
                            for (gxv, gv) in gxd[lo..hi].iter_mut().zip(gs) {
                                *gxv += wv * gv;
                            }
                        }
                    }
                    gw[(o * in_ch + c) * 9 + k] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

fn adapter_backward(x: &Tensor, g: &Tensor, a: &[f64], n: usize) -> (Tensor, Vec<f64>) {
    let batch = x.batch();
    let inner = x.len() / (batch * n);
    let xd = x.data();
    let gd = g.data();
    let mut ga = vec![0.0; n * n];
    let mut gx = Tensor::zeros(x.shape());
    let gxd = gx.data_mut();
    for s in 0..batch {
        let base = s * n * inner;
        for i in 0..n {
            let xi = &xd[base + i * inner..base + (i + 1) * inner];
            for j in 0..n {
                let gj = &gd[base + j * inner..base + (j + 1) * inner];
                ga[i * n + j] += dot(xi, gj);
                let aij = a[i * n + j];
                if aij != 0.0 {
                    for (gxv, gv) in gxd[base + i * inner..base + (i + 1) * inner].iter_mut().zip(gj) {
                        *gxv += aij * gv;
                    }
                }
            }
        }
    }
    (gx, ga)
}

/// Temperature softmax over the class axis, max-subtracted.
pub fn softmax_t(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(domain("temperature must be positive and finite"));
    }
    let layout = ClassLayout::of(logits)?;
    let mut out = Tensor::zeros(logits.shape());
    let mut row = vec![0.0; layout.classes];
    for pos in 0..layout.positions {
        layout.read(logits.data(), pos, &mut row);
        softmax_row(&mut row, temperature);
        let b = layout.base(pos);
        for (c, v) in row.iter().enumerate() {
            out.data_mut()[b + c * layout.stride()] = *v;
        }
    }
    Ok(out)
}

/// In-place `softmax(row / t)`.
pub(crate) fn softmax_row(row: &mut [f64], t: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp((*v - max) / t);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(softmax(row / t))` written into `out`.
pub(crate) fn log_softmax_row(row: &[f64], t: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| libm::exp((v - max) / t)).sum();
    let lse = libm::log(sum);
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max) / t - lse;
    }
}

/// One SGD step with classical momentum and L2 weight decay, then re-masks.
///
/// `v <- momentum * v + (g + decay * w)`, `w <- w - lr * lr_scale * v`.
pub fn sgd_step(net: &mut Network, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(domain("learning rate must be positive"));
    }
    for p in net.params_mut() {
        let decay = if p.decays() { weight_decay } else { 0.0 };
        let step = lr * p.lr_scale;
        let mask = p.mask.data().to_vec();
        let grad = p.grad.data().to_vec();
        for (((w, v), g), m) in p.value.data_mut().iter_mut().zip(p.velocity.iter_mut()).zip(&grad).zip(&mask) {
            if *m == 0.0 {
                *w = 0.0;
                *v = 0.0;
                continue;
            }
            *v = momentum * *v + (g + decay * *w);
            *w -= step * *v;
        }
    }
    Ok(())
}

/// Compares reverse-mode parameter gradients against central differences.
///
/// `loss` maps logits to `(value, d value / d logits)`. Every unmasked
/// coordinate is perturbed by `±1e-4`; the result is the largest
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(net: &Network, inputs: &Tensor, loss: F) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    const STEP: f64 = 1e-4;
    let mut work = net.clone();
    work.zero_grads();
    let (logits, mut tape) = forward(&work, inputs)?;
    let (_, g) = loss(&logits)?;
    backward(&mut work, &mut tape, &g)?;
    let analytic: Vec<Vec<f64>> = work.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &g_ad) in grads.iter().enumerate() {
            if work.params()[pi].mask.data()[k] == 0.0 {
                continue;
            }
            let orig = work.params()[pi].value.data()[k];
            work.params_mut()[pi].value.data_mut()[k] = orig + STEP;
            let plus = loss(&predict(&work, inputs)?)?.0;
            work.params_mut()[pi].value.data_mut()[k] = orig - STEP;
            let minus = loss(&predict(&work, inputs)?)?.0;
            work.params_mut()[pi].value.data_mut()[k] = orig;
            let g_fd = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(g_ad, g_fd));
        }
    }
    Ok(worst)
}

/// Same check for the gradient with respect to the network input.
pub fn grad_check_input<F>(net: &Network, inputs: &Tensor, loss: F) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    const STEP: f64 = 1e-4;
    let mut work = net.clone();
    let (logits, mut tape) = forward(&work, inputs)?;
    let (_, g) = loss(&logits)?;
    let gx = backward(&mut work, &mut tape, &g)?;
    let mut probe = inputs.clone();
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let orig = inputs.data()[k];
        probe.data_mut()[k] = orig + STEP;
        let plus = loss(&predict(net, &probe)?)?.0;
        probe.data_mut()[k] = orig - STEP;
        let minus = loss(&predict(net, &probe)?)?.0;
        probe.data_mut()[k] = orig;
        worst = worst.max(relative_error(gx.data()[k], (plus - minus) / (2.0 * STEP)));
    }
    Ok(worst)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    libm::fabs(a - b) / f64::max(1e-8, libm::fabs(a) + libm::fabs(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_classifier, Network};
    use crate::rng::{SeededRng, Stream};

    fn dense_net(w: &[f64], b: &[f64], inp: usize, out: usize) -> Network {
        let mut net = Network::new(
            vec![inp],
            vec![LayerSpec::Dense { inp, out }],
            out,
            &mut SeededRng::new(0, Stream::Init),
        )
        .unwrap();
        net.params_mut()[0].value.data_mut().copy_from_slice(w);
        net.params_mut()[1].value.data_mut().copy_from_slice(b);
        net
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let net = dense_net(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], 2, 2);
        let (y, tape) = forward(&net, &Tensor::row(&[3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn dense_uses_out_by_in_layout() {
        let net = dense_net(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2);
        let y = predict(&net, &Tensor::row(&[1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[4.0, 8.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = Network::new(
            vec![3],
            vec![LayerSpec::Relu, LayerSpec::Dense { inp: 3, out: 3 }],
            3,
            &mut SeededRng::new(0, Stream::Init),
        )
        .unwrap();
        let mut x = Tensor::row(&[-1.0, 0.0, 2.0]);
        x = apply_layer(&net, 0, &x).unwrap();
        assert_eq!(x.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn wrong_input_shape_is_reported() {
        let net = dense_net(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], 2, 2);
        let err = forward(&net, &Tensor::row(&[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn overflow_names_the_layer() {
        let net = dense_net(&[1e300, 0.0, 0.0, 1.0], &[0.0, 0.0], 2, 2);
        let err = predict(&net, &Tensor::row(&[1e300, 1.0])).unwrap_err();
        assert_eq!(err, Error::NumericOverflow { layer: 0, kind: "Dense" });
    }

    #[test]
    fn square_via_identity_layer_has_derivative_six() {
        // f(x) = x^2 through a 1x1 identity layer: df/dx at 3 is 6.
        let mut net = Network::new(
            vec![1],
            vec![LayerSpec::Dense { inp: 1, out: 2 }],
            2,
            &mut SeededRng::new(0, Stream::Init),
        )
        .unwrap();
        net.params_mut()[0].value.data_mut().copy_from_slice(&[1.0, 0.0]);
        net.params_mut()[1].value.data_mut().copy_from_slice(&[0.0, 0.0]);
        let (y, mut tape) = forward(&net, &Tensor::row(&[3.0])).unwrap();
        let x = y.data()[0];
        let g = Tensor::row(&[2.0 * x, 0.0]);
        let gx = backward(&mut net, &mut tape, &g).unwrap();
        assert_eq!(gx.data(), &[6.0]);
    }

    #[test]
    fn sum_of_identity_logits_has_unit_input_gradient() {
        let mut net = dense_net(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], 2, 2);
        let (_, mut tape) = forward(&net, &Tensor::row(&[1.0, 1.0])).unwrap();
        let gx = backward(&mut net, &mut tape, &Tensor::row(&[1.0, 1.0])).unwrap();
        assert_eq!(gx.data(), &[1.0, 1.0]);
    }

    #[test]
    fn tape_cannot_be_replayed() {
        let mut net = dense_net(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], 2, 2);
        let (_, mut tape) = forward(&net, &Tensor::row(&[1.0, 1.0])).unwrap();
        let g = Tensor::row(&[1.0, 1.0]);
        backward(&mut net, &mut tape, &g).unwrap();
        assert_eq!(backward(&mut net, &mut tape, &g).unwrap_err(), Error::TapeConsumed);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_t(&Tensor::row(&[0.0; 4]), 1.0).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let s = softmax_t(&Tensor::row(&[1000.0, 0.0]), 1.0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-12);
        let s = softmax_t(&Tensor::row(&[2.0, 0.0]), 2.0).unwrap();
        let e = core::f64::consts::E;
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.data()[0] - 0.7311).abs() < 1e-4);
        assert!((s.data()[1] - 0.2689).abs() < 1e-4);
        assert!(softmax_t(&Tensor::row(&[1.0]), 0.0).is_err());
        assert!(softmax_t(&Tensor::row(&[1.0]), -1.0).is_err());
    }

    fn single_weight(w: f64, g: f64, masked: bool) -> Network {
        let mut net = dense_net(&[w, 0.0], &[0.0, 0.0], 1, 2);
        net.params_mut()[0].grad.data_mut()[0] = g;
        if masked {
            net.params_mut()[0].mask.data_mut()[0] = 0.0;
            net.params_mut()[0].value.data_mut()[0] = 0.0;
        }
        net
    }

    #[test]
    fn sgd_examples() {
        let mut net = single_weight(1.0, 1.0, false);
        sgd_step(&mut net, 0.1, 0.0, 0.0).unwrap();
        assert!((net.params()[0].value.data()[0] - 0.9).abs() < 1e-15);

        let mut net = single_weight(1.0, 0.0, false);
        sgd_step(&mut net, 0.1, 0.0, 0.5).unwrap();
        assert!((net.params()[0].value.data()[0] - 0.95).abs() < 1e-15);

        let mut net = single_weight(1.0, 123.0, true);
        for _ in 0..5 {
            sgd_step(&mut net, 0.1, 0.9, 1e-4).unwrap();
        }
        assert_eq!(net.params()[0].value.data()[0], 0.0);

        assert!(matches!(sgd_step(&mut net, 0.0, 0.9, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn linear_net_with_quadratic_loss_is_exact() {
        let net = build_classifier(3, &[], 2, &mut SeededRng::new(4, Stream::Init)).unwrap();
        let mut r = SeededRng::new(4, Stream::Test);
        let x = Tensor::new(vec![5, 3], (0..15).map(|_| r.normal()).collect()).unwrap();
        let err = grad_check(&net, &x, |z: &Tensor| {
            let v = z.data().iter().map(|a| a * a).sum::<f64>();
            let mut g = z.clone();
            g.scale(2.0);
            Ok((v, g))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
