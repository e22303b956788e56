//! Layer specs, the parameter store and the small architectures used in
//! experiments, plus the binary checkpoint container.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config, domain, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LayerSpec {
    /// Fully connected; weight stored row-major as `[out, in]`.
    Dense { inp: usize, out: usize },
    /// 3x3 kernel, stride 1, zero padding 1; weight `[out_ch, in_ch, 3, 3]`.
    Conv2d { in_ch: usize, out_ch: usize },
    Relu,
    Flatten,
    /// Square channel mixer `A` (`[n, n]`): `z[j] = sum_i y[i] * A[i, j]`.
    GroupAdapter { n: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::Relu => "ReLU",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::GroupAdapter { .. } => "GroupAdapter",
        }
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::Shape {
            context: format!("{} layer input", self.name()),
            expected,
            got: input.to_vec(),
        };
        match *self {
            LayerSpec::Dense { inp, out } => {
                if input != [inp] {
                    return Err(mismatch(vec![inp]));
                }
                Ok(vec![out])
            }
            LayerSpec::Conv2d { in_ch, out_ch } => {
                if input.len() != 3 || input[0] != in_ch {
                    return Err(mismatch(vec![in_ch, 0, 0]));
                }
                Ok(vec![out_ch, input[1], input[2]])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::GroupAdapter { n } => {
                if input.is_empty() || input[0] != n || !(input.len() == 1 || input.len() == 3) {
                    return Err(mismatch(vec![n]));
                }
                Ok(input.to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Adapter,
}

/// A trainable tensor with its gradient, binary prune mask and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
    pub mask: Tensor,
    pub velocity: Vec<f64>,
    /// Multiplier on the optimizer learning rate.
    pub lr_scale: f64,
}

impl Parameter {
    pub fn new(name: String, kind: ParamKind, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        let n = value.len();
        Self {
            name,
            kind,
            grad: Tensor::zeros(&shape),
            mask: Tensor::filled(&shape, 1.0),
            velocity: vec![0.0; n],
            value,
            lr_scale: 1.0,
        }
    }

    pub fn prunable(&self) -> bool {
        self.kind == ParamKind::Weight
    }

    /// Weight decay applies to the ordinary weights and biases, not adapters
    /// (those carry their own group regularizer).
    pub fn decays(&self) -> bool {
        self.kind != ParamKind::Adapter
    }

    pub fn apply_mask(&mut self) {
        for (v, m) in self.value.data_mut().iter_mut().zip(self.mask.data()) {
            if *m == 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn surviving(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<usize>,
    pub bias: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<Parameter>,
    num_classes: usize,
}

impl Network {
    /// Validates shape composition and He-uniform initializes weights
    /// (biases zero, adapters identity).
    pub fn new(
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        num_classes: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut params = Vec::new();
        for (i, spec) in specs.into_iter().enumerate() {
            let (weight, bias) = match spec {
                LayerSpec::Dense { inp, out } => {
                    let w = he_uniform(&[out, inp], inp, rng);
                    (Some(w), Some(Tensor::zeros(&[out])))
                }
                LayerSpec::Conv2d { in_ch, out_ch } => {
                    let w = he_uniform(&[out_ch, in_ch, 3, 3], in_ch * 9, rng);
                    (Some(w), Some(Tensor::zeros(&[out_ch])))
                }
                LayerSpec::GroupAdapter { n } => (Some(identity(n)), None),
                LayerSpec::Relu | LayerSpec::Flatten => (None, None),
            };
            let kind = if matches!(spec, LayerSpec::GroupAdapter { .. }) {
                ParamKind::Adapter
            } else {
                ParamKind::Weight
            };
            let weight = weight.map(|w| {
                params.push(Parameter::new(format!("layer{i}.weight"), kind, w));
                params.len() - 1
            });
            let bias = bias.map(|b| {
                params.push(Parameter::new(format!("layer{i}.bias"), ParamKind::Bias, b));
                params.len() - 1
            });
            layers.push(Layer { spec, weight, bias });
        }
        let net = Self {
            input_shape,
            layers,
            params,
            num_classes,
        };
        net.validate()?;
        Ok(net)
    }

    pub(crate) fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        params: Vec<Parameter>,
        num_classes: usize,
    ) -> Result<Self> {
        let net = Self {
            input_shape,
            layers,
            params,
            num_classes,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(domain("at least two classes are required"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(domain("input dimensions must be positive"));
        }
        let shapes = self.layer_shapes()?;
        let out = shapes.last().unwrap();
        if out[0] != self.num_classes || !(out.len() == 1 || out.len() == 3) {
            return Err(Error::Shape {
                context: "network output".into(),
                expected: vec![self.num_classes],
                got: out.clone(),
            });
        }
        for layer in &self.layers {
            for idx in layer.weight.iter().chain(layer.bias.iter()) {
                if *idx >= self.params.len() {
                    return Err(config("layer refers to a missing parameter"));
                }
            }
        }
        Ok(())
    }

    /// Per-example shapes: entry 0 is the input, entry k+1 the output of layer k.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.spec.output_shape(shapes.last().unwrap()).map_err(|e| match e {
                Error::Shape { context, expected, got } => Error::Shape {
                    context: format!("layer {i}: {context}"),
                    expected,
                    got,
                },
                other => other,
            })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layer_shapes().expect("validated at construction").pop().unwrap()
    }

    /// True when the net predicts one class per spatial position.
    pub fn is_per_pixel(&self) -> bool {
        self.output_shape().len() == 3
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn prunable_count(&self) -> usize {
        self.params.iter().filter(|p| p.prunable()).map(|p| p.value.len()).sum()
    }

    /// Fraction of prunable entries whose mask is zero.
    pub fn sparsity(&self) -> f64 {
        let total = self.prunable_count();
        if total == 0 {
            return 0.0;
        }
        let pruned: usize = self
            .params
            .iter()
            .filter(|p| p.prunable())
            .map(|p| p.value.len() - p.surviving())
            .sum();
        pruned as f64 / total as f64
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn reset_velocity(&mut self) {
        for p in &mut self.params {
            p.velocity.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Flattened copy of every parameter value, in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// Splits the network into per-layer `(spec, weight, bias)` triples.
    pub(crate) fn into_layers(self) -> (Vec<usize>, Vec<(LayerSpec, Option<Parameter>, Option<Parameter>)>, usize) {
        let mut params: Vec<Option<Parameter>> = self.params.into_iter().map(Some).collect();
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = l.weight.and_then(|i| params[i].take());
                let b = l.bias.and_then(|i| params[i].take());
                (l.spec, w, b)
            })
            .collect();
        (self.input_shape, layers, self.num_classes)
    }

    /// Inverse of [`Network::into_layers`]; parameters are renamed by position.
    pub(crate) fn assemble(
        input_shape: Vec<usize>,
        triples: Vec<(LayerSpec, Option<Parameter>, Option<Parameter>)>,
        num_classes: usize,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(triples.len());
        let mut params = Vec::new();
        for (i, (spec, w, b)) in triples.into_iter().enumerate() {
            let weight = w.map(|mut p| {
                p.name = format!("layer{i}.weight");
                params.push(p);
                params.len() - 1
            });
            let bias = b.map(|mut p| {
                p.name = format!("layer{i}.bias");
                params.push(p);
                params.len() - 1
            });
            layers.push(Layer { spec, weight, bias });
        }
        Self::from_parts(input_shape, layers, params, num_classes)
    }
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform_in(-bound, bound);
    }
    t
}

pub(crate) fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

/// MLP: `[Dense -> ReLU]*k -> Dense` with `classes` outputs.
pub fn build_classifier(
    input_dim: usize,
    hidden_dims: &[usize],
    classes: usize,
    rng: &mut SeededRng,
) -> Result<Network> {
    if input_dim == 0 || hidden_dims.contains(&0) {
        return Err(domain("layer widths must be at least 1"));
    }
    if classes < 2 {
        return Err(domain("a classifier needs at least two classes"));
    }
    let mut specs = Vec::new();
    let mut prev = input_dim;
    for &h in hidden_dims {
        specs.push(LayerSpec::Dense { inp: prev, out: h });
        specs.push(LayerSpec::Relu);
        prev = h;
    }
    specs.push(LayerSpec::Dense { inp: prev, out: classes });
    Network::new(vec![input_dim], specs, classes, rng)
}

/// Size-preserving conv stack with `classes` logits per pixel.
pub fn build_segmenter(
    in_ch: usize,
    widths: &[usize],
    classes: usize,
    height: usize,
    width: usize,
    rng: &mut SeededRng,
) -> Result<Network> {
    if widths.is_empty() {
        return Err(domain("segmenter needs at least one hidden width"));
    }
    if in_ch == 0 || widths.contains(&0) {
        return Err(domain("channel counts must be at least 1"));
    }
    let mut specs = Vec::new();
    let mut prev = in_ch;
    for &w in widths {
        specs.push(LayerSpec::Conv2d { in_ch: prev, out_ch: w });
        specs.push(LayerSpec::Relu);
        prev = w;
    }
    specs.push(LayerSpec::Conv2d { in_ch: prev, out_ch: classes });
    Network::new(vec![in_ch, height, width], specs, classes, rng)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACMP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a network into the versioned `ACMP` container.
///
/// Layout (little endian): magic, `u32` version, `u32` classes, `u32` input
/// rank and dims, `u32` layer count and per layer `u8` tag + two `u32`
/// dims, `u32` parameter count and per parameter `u8` kind, `f64` lr scale,
/// `u32` length, the `f64` values and the bit-packed mask. A trailing
/// FNV-1a `u64` covers every preceding byte.
pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, net.num_classes as u32);
    put_u32(&mut out, net.input_shape.len() as u32);
    for &d in &net.input_shape {
        put_u32(&mut out, d as u32);
    }
    put_u32(&mut out, net.layers.len() as u32);
    for layer in &net.layers {
        let (tag, a, b) = match layer.spec {
            LayerSpec::Dense { inp, out } => (0u8, inp, out),
            LayerSpec::Conv2d { in_ch, out_ch } => (1, in_ch, out_ch),
            LayerSpec::Relu => (2, 0, 0),
            LayerSpec::Flatten => (3, 0, 0),
            LayerSpec::GroupAdapter { n } => (4, n, n),
        };
        out.push(tag);
        put_u32(&mut out, a as u32);
        put_u32(&mut out, b as u32);
    }
    put_u32(&mut out, net.params.len() as u32);
    for p in &net.params {
        out.push(match p.kind {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Adapter => 2,
        });
        out.extend_from_slice(&p.lr_scale.to_le_bytes());
        put_u32(&mut out, p.value.len() as u32);
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut bits = vec![0u8; p.value.len().div_ceil(8)];
        for (i, m) in p.mask.data().iter().enumerate() {
            if *m != 0.0 {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 16 {
        return Err(Error::Corrupt("file too short".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body).to_le_bytes() != trailer {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    r.bytes = body;
    let num_classes = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let input_shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n_layers = r.u32()? as usize;
    let mut specs = Vec::with_capacity(n_layers.min(1 << 16));
    for _ in 0..n_layers {
        let tag = r.u8()?;
        let a = r.u32()? as usize;
        let b = r.u32()? as usize;
        specs.push(match tag {
            0 => LayerSpec::Dense { inp: a, out: b },
            1 => LayerSpec::Conv2d { in_ch: a, out_ch: b },
            2 => LayerSpec::Relu,
            3 => LayerSpec::Flatten,
            4 => LayerSpec::GroupAdapter { n: a },
            t => return Err(Error::Corrupt(format!("unknown layer tag {t}"))),
        });
    }
    let n_params = r.u32()? as usize;
    let mut raw = Vec::with_capacity(n_params.min(1 << 16));
    for _ in 0..n_params {
        let kind = match r.u8()? {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::Adapter,
            k => return Err(Error::Corrupt(format!("unknown parameter kind {k}"))),
        };
        let lr_scale = r.f64()?;
        let len = r.u32()? as usize;
        let mut values = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            values.push(r.f64()?);
        }
        let bits = r.take(len.div_ceil(8))?;
        let mask: Vec<f64> = (0..len)
            .map(|i| if bits[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { 0.0 })
            .collect();
        raw.push((kind, lr_scale, values, mask));
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after parameter table".into()));
    }

    // Rebuild the layer/parameter wiring in construction order.
    let mut layers = Vec::with_capacity(specs.len());
    let mut params = Vec::with_capacity(raw.len());
    let mut raw = raw.into_iter();
    let mut next = |name: String, shape: Vec<usize>, expect: &[ParamKind]| -> Result<usize> {
        let (kind, lr_scale, values, mask) =
            raw.next().ok_or_else(|| Error::Corrupt("missing parameter".into()))?;
        if !expect.contains(&kind) {
            return Err(Error::Corrupt(format!("unexpected parameter kind for {name}")));
        }
        let value = Tensor::new(shape.clone(), values).map_err(|_| Error::Corrupt(format!("bad length for {name}")))?;
        let mut p = Parameter::new(name, kind, value);
        p.mask = Tensor::new(shape, mask).expect("same length as value");
        p.lr_scale = lr_scale;
        params.push(p);
        Ok(params.len() - 1)
    };
    for (i, spec) in specs.into_iter().enumerate() {
        let (weight, bias) = match spec {
            LayerSpec::Dense { inp, out } => (
                Some(next(format!("layer{i}.weight"), vec![out, inp], &[ParamKind::Weight])?),
                Some(next(format!("layer{i}.bias"), vec![out], &[ParamKind::Bias])?),
            ),
            LayerSpec::Conv2d { in_ch, out_ch } => (
                Some(next(format!("layer{i}.weight"), vec![out_ch, in_ch, 3, 3], &[ParamKind::Weight])?),
                Some(next(format!("layer{i}.bias"), vec![out_ch], &[ParamKind::Bias])?),
            ),
            LayerSpec::GroupAdapter { n } => (
                Some(next(format!("layer{i}.weight"), vec![n, n], &[ParamKind::Adapter])?),
                None,
            ),
            LayerSpec::Relu | LayerSpec::Flatten => (None, None),
        };
        layers.push(Layer { spec, weight, bias });
    }
    if raw.next().is_some() {
        return Err(Error::Corrupt("more parameters than layers require".into()));
    }
    Network::from_parts(input_shape, layers, params, num_classes)
        .map_err(|e| Error::Corrupt(format!("invalid network: {e}")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
