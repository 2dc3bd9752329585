//! Layer-composed classifiers with deterministic initialization, an exact
//! backward pass, and flat-parameter packing so the aggregation step is a
//! plain vector average.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{
    activation, activation_backward, conv2d, conv2d_backward, maxpool2, maxpool2_backward,
    Activation, PoolMask, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Features(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv3x3 { out_channels: usize },
    MaxPool2,
    Activation(Activation),
    Flatten,
    Dense { units: usize },
}

/// An ordered layer list over an input shape. Construction checks that
/// consecutive shapes compose and that the final layer emits exactly
/// `classes` logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

/// Shape of the value flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dim {
    Features(usize),
    Image(usize, usize, usize),
}

impl ModelSpec {
    pub fn new(input: InputShape, layers: Vec<LayerSpec>, classes: usize) -> Result<ModelSpec> {
        let spec = ModelSpec {
            input,
            layers,
            classes,
        };
        spec.infer_dims()?;
        Ok(spec)
    }

    /// Flatten -> dense(hidden) -> relu -> dense(classes).
    pub fn mlp(input: InputShape, hidden: usize, classes: usize) -> Result<ModelSpec> {
        ModelSpec::new(
            input,
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: hidden },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::Dense { units: classes },
            ],
            classes,
        )
    }

    /// conv3x3(8) -> relu -> pool -> conv3x3(16) -> relu -> pool -> flatten
    /// -> dense(classes).
    pub fn small_cnn(input: InputShape, classes: usize) -> Result<ModelSpec> {
        ModelSpec::new(
            input,
            vec![
                LayerSpec::Conv3x3 { out_channels: 8 },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::MaxPool2,
                LayerSpec::Conv3x3 { out_channels: 16 },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: classes },
            ],
            classes,
        )
    }

    /// Per-layer output shapes, checking composition. `result[i]` is the
    /// shape entering layer `i`; the last entry is the output shape.
    fn infer_dims(&self) -> Result<Vec<Dim>> {
        let mut dims = vec![match self.input {
            InputShape::Features(f) => Dim::Features(f),
            InputShape::Image {
                channels,
                height,
                width,
            } => Dim::Image(channels, height, width),
        }];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *dims.last().unwrap();
            let next = match (layer, cur) {
                (LayerSpec::Conv3x3 { out_channels }, Dim::Image(_, h, w)) => {
                    Dim::Image(*out_channels, h, w)
                }
                (LayerSpec::Conv3x3 { .. }, Dim::Features(_)) => {
                    return Err(Error::Config(format!(
                        "layer {i}: conv3x3 needs an image input, got flat features"
                    )))
                }
                (LayerSpec::MaxPool2, Dim::Image(c, h, w)) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: maxpool2 needs even spatial extents, got {h}x{w}"
                        )));
                    }
                    Dim::Image(c, h / 2, w / 2)
                }
                (LayerSpec::MaxPool2, Dim::Features(_)) => {
                    return Err(Error::Config(format!(
                        "layer {i}: maxpool2 needs an image input, got flat features"
                    )))
                }
                (LayerSpec::Activation(_), any) => any,
                (LayerSpec::Flatten, Dim::Image(c, h, w)) => Dim::Features(c * h * w),
                (LayerSpec::Flatten, Dim::Features(f)) => Dim::Features(f),
                (LayerSpec::Dense { units }, Dim::Features(_)) => Dim::Features(*units),
                (LayerSpec::Dense { .. }, Dim::Image(..)) => {
                    return Err(Error::Config(format!(
                        "layer {i}: dense needs flat features; insert a flatten first"
                    )))
                }
            };
            dims.push(next);
        }
        if *dims.last().unwrap() != Dim::Features(self.classes) {
            return Err(Error::Config(format!(
                "model output {:?} does not emit exactly {} logits",
                dims.last().unwrap(),
                self.classes
            )));
        }
        Ok(dims)
    }

    /// Parameter layout induced by the spec. Pure function of the spec, so
    /// two parameter vectors for the same spec are always aggregable.
    pub fn layout(&self) -> Layout {
        let dims = self.infer_dims().expect("spec validated at construction");
        let mut slices = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, offset: &mut usize| {
            let len: usize = shape.iter().product();
            slices.push(SliceInfo {
                name,
                offset: *offset,
                shape,
            });
            *offset += len;
        };
        for (i, layer) in self.layers.iter().enumerate() {
            match (layer, dims[i]) {
                (LayerSpec::Conv3x3 { out_channels }, Dim::Image(c_in, _, _)) => {
                    push(
                        format!("layer{i}.weight"),
                        vec![*out_channels, c_in, 3, 3],
                        &mut offset,
                    );
                    push(format!("layer{i}.bias"), vec![*out_channels], &mut offset);
                }
                (LayerSpec::Dense { units }, Dim::Features(f)) => {
                    push(format!("layer{i}.weight"), vec![f, *units], &mut offset);
                    push(format!("layer{i}.bias"), vec![*units], &mut offset);
                }
                _ => {}
            }
        }
        Layout { slices }
    }
}

/// One named contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceInfo {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl SliceInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered slice table over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub slices: Vec<SliceInfo>,
}

impl Layout {
    pub fn total_len(&self) -> usize {
        self.slices.iter().map(SliceInfo::len).sum()
    }

    /// Offsets must be strictly increasing and gap-free, covering exactly
    /// `total` values.
    pub fn validate(&self, total: usize) -> Result<()> {
        let mut expect = 0;
        for s in &self.slices {
            if s.offset != expect {
                return Err(Error::Layout(format!(
                    "slice {} starts at {} but {} values precede it",
                    s.name, s.offset, expect
                )));
            }
            if s.shape.iter().any(|&d| d == 0) {
                return Err(Error::Layout(format!("slice {} has a zero extent", s.name)));
            }
            expect += s.len();
        }
        if expect != total {
            return Err(Error::Layout(format!(
                "layout covers {expect} values but the vector holds {total}"
            )));
        }
        Ok(())
    }
}

/// Flat parameter vector plus its layout; the unit the protocol averages.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn slice_tensor(&self, idx: usize) -> Tensor {
        let s = &self.layout.slices[idx];
        Tensor::new(
            s.shape.clone(),
            self.values[s.offset..s.offset + s.len()].to_vec(),
        )
        .expect("layout slice is internally consistent")
    }
}

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases, fully
/// determined by the seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ModelParams {
    let layout = spec.layout();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.total_len()];
    for s in &layout.slices {
        if s.name.ends_with(".bias") {
            continue;
        }
        let fan_in = match s.shape[..] {
            [_, c_in, kh, kw] => c_in * kh * kw,
            [f, _] => f,
            _ => unreachable!("weight slices are rank 2 or 4"),
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for v in values[s.offset..s.offset + s.len()].iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    ModelParams { values, layout }
}

/// Per-layer values saved by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    params_hash: u64,
    batch_len: usize,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Dense { input: Tensor },
    Conv { input: Tensor },
    Pool { masks: Vec<PoolMask> },
    Act { input: Tensor },
    Flatten { input_shape: Vec<usize> },
}

fn fnv1a64(values: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

fn expected_batch_shape(spec: &ModelSpec, b: usize) -> Vec<usize> {
    match spec.input {
        InputShape::Features(f) => vec![b, f],
        InputShape::Image {
            channels,
            height,
            width,
        } => vec![b, channels, height, width],
    }
}

/// Runs the batch through every layer, returning `[b, classes]` logits and
/// the cache the backward pass needs.
pub fn forward(spec: &ModelSpec, params: &ModelParams, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
    if params.layout != spec.layout() {
        return Err(Error::Layout(
            "parameters were built for a different model spec".into(),
        ));
    }
    let b = *batch
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("batch must have a leading axis".into()))?;
    if batch.shape() != expected_batch_shape(spec, b) {
        return Err(Error::Shape(format!(
            "batch shape {:?} does not match model input {:?}",
            batch.shape(),
            spec.input
        )));
    }

    let mut cur = batch.clone();
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut slice_idx = 0;
    for layer in &spec.layers {
        match layer {
            LayerSpec::Conv3x3 { .. } => {
                let weight = params.slice_tensor(slice_idx);
                let bias = params.slice_tensor(slice_idx + 1);
                slice_idx += 2;
                let outs = (0..b)
                    .map(|i| conv2d(&cur.index_axis0(i)?, &weight, &bias))
                    .collect::<Result<Vec<_>>>()?;
                caches.push(LayerCache::Conv { input: cur });
                cur = Tensor::stack(&outs)?;
            }
            LayerSpec::MaxPool2 => {
                let mut outs = Vec::with_capacity(b);
                let mut masks = Vec::with_capacity(b);
                for i in 0..b {
                    let (out, mask) = maxpool2(&cur.index_axis0(i)?)?;
                    outs.push(out);
                    masks.push(mask);
                }
                caches.push(LayerCache::Pool { masks });
                cur = Tensor::stack(&outs)?;
            }
            LayerSpec::Activation(kind) => {
                let out = activation(&cur, *kind);
                caches.push(LayerCache::Act { input: cur });
                cur = out;
            }
            LayerSpec::Flatten => {
                let shape = cur.shape().to_vec();
                let flat: usize = shape[1..].iter().product();
                let out = cur.reshape(&[b, flat])?;
                caches.push(LayerCache::Flatten { input_shape: shape });
                cur = out;
            }
            LayerSpec::Dense { .. } => {
                let weight = params.slice_tensor(slice_idx);
                let bias = params.slice_tensor(slice_idx + 1);
                slice_idx += 2;
                let mut out = cur.matmul(&weight)?;
                let [rows, cols] = out.dims2("dense output")?;
                let mut data = out.data().to_vec();
                for r in 0..rows {
                    for c in 0..cols {
                        data[r * cols + c] += bias.data()[c];
                    }
                }
                out = Tensor::new(vec![rows, cols], data)?;
                caches.push(LayerCache::Dense { input: cur });
                cur = out;
            }
        }
    }
    Ok((
        cur,
        ForwardCache {
            layers: caches,
            params_hash: fnv1a64(&params.values),
            batch_len: b,
        },
    ))
}

/// Exact gradient of the scalar whose logit gradient is `grad_logits`,
/// w.r.t. every parameter. The cache must come from a [`forward`] call on
/// these exact parameter values.
pub fn backward(
    spec: &ModelSpec,
    params: &ModelParams,
    cache: &ForwardCache,
    grad_logits: &Tensor,
) -> Result<Vec<f64>> {
    if cache.params_hash != fnv1a64(&params.values) {
        return Err(Error::Usage(
            "stale forward cache: parameters changed since the forward pass".into(),
        ));
    }
    if cache.layers.len() != spec.layers.len() {
        return Err(Error::Usage(
            "forward cache does not match the model spec".into(),
        ));
    }
    if grad_logits.shape() != [cache.batch_len, spec.classes] {
        return Err(Error::Shape(format!(
            "logit gradient shape {:?} does not match [{}, {}]",
            grad_logits.shape(),
            cache.batch_len,
            spec.classes
        )));
    }

    let layout = &params.layout;
    let mut grad = vec![0.0; params.len()];
    // Slice cursor positioned after the last parameterized layer.
    let mut slice_idx = layout.slices.len();
    let mut cur = grad_logits.clone();
    for (layer, cached) in spec.layers.iter().zip(&cache.layers).rev() {
        match (layer, cached) {
            (LayerSpec::Dense { .. }, LayerCache::Dense { input }) => {
                slice_idx -= 2;
                let weight = params.slice_tensor(slice_idx);
                let (w_slice, b_slice) = (&layout.slices[slice_idx], &layout.slices[slice_idx + 1]);
                let grad_w = input.transpose2()?.matmul(&cur)?;
                grad[w_slice.offset..w_slice.offset + w_slice.len()]
                    .copy_from_slice(grad_w.data());
                let [rows, cols] = cur.dims2("dense upstream")?;
                for r in 0..rows {
                    for c in 0..cols {
                        grad[b_slice.offset + c] += cur.data()[r * cols + c];
                    }
                }
                cur = cur.matmul(&weight.transpose2()?)?;
            }
            (LayerSpec::Conv3x3 { .. }, LayerCache::Conv { input }) => {
                slice_idx -= 2;
                let weight = params.slice_tensor(slice_idx);
                let (w_slice, b_slice) = (&layout.slices[slice_idx], &layout.slices[slice_idx + 1]);
                let mut grad_inputs = Vec::with_capacity(cache.batch_len);
                for i in 0..cache.batch_len {
                    let (gi, gk, gb) =
                        conv2d_backward(&input.index_axis0(i)?, &weight, &cur.index_axis0(i)?)?;
                    grad_inputs.push(gi);
                    for (dst, src) in grad[w_slice.offset..w_slice.offset + w_slice.len()]
                        .iter_mut()
                        .zip(gk.data())
                    {
                        *dst += src;
                    }
                    for (dst, src) in grad[b_slice.offset..b_slice.offset + b_slice.len()]
                        .iter_mut()
                        .zip(gb.data())
                    {
                        *dst += src;
                    }
                }
                cur = Tensor::stack(&grad_inputs)?;
            }
            (LayerSpec::MaxPool2, LayerCache::Pool { masks }) => {
                let grad_inputs = masks
                    .iter()
                    .enumerate()
                    .map(|(i, mask)| maxpool2_backward(mask, &cur.index_axis0(i)?))
                    .collect::<Result<Vec<_>>>()?;
                cur = Tensor::stack(&grad_inputs)?;
            }
            (LayerSpec::Activation(kind), LayerCache::Act { input }) => {
                cur = activation_backward(input, *kind, &cur)?;
            }
            (LayerSpec::Flatten, LayerCache::Flatten { input_shape }) => {
                cur = cur.reshape(input_shape)?;
            }
            _ => {
                return Err(Error::Usage(
                    "forward cache does not match the model spec".into(),
                ))
            }
        }
    }
    Ok(grad)
}

/// Splits the flat vector into its named per-layer tensors.
pub fn unflatten(params: &ModelParams) -> Vec<(String, Tensor)> {
    (0..params.layout.slices.len())
        .map(|i| (params.layout.slices[i].name.clone(), params.slice_tensor(i)))
        .collect()
}

/// Packs named per-layer tensors back into a flat vector. Names, shapes,
/// and order must match the layout exactly.
pub fn flatten(parts: &[(String, Tensor)], layout: &Layout) -> Result<ModelParams> {
    if parts.len() != layout.slices.len() {
        return Err(Error::Layout(format!(
            "{} tensors provided but the layout has {} slices",
            parts.len(),
            layout.slices.len()
        )));
    }
    let mut values = vec![0.0; layout.total_len()];
    for ((name, tensor), slice) in parts.iter().zip(&layout.slices) {
        if name != &slice.name || tensor.shape() != slice.shape {
            return Err(Error::Layout(format!(
                "expected slice {} with shape {:?}, got {} with shape {:?}",
                slice.name,
                slice.shape,
                name,
                tensor.shape()
            )));
        }
        values[slice.offset..slice.offset + slice.len()].copy_from_slice(tensor.data());
    }
    Ok(ModelParams {
        values,
        layout: layout.clone(),
    })
}

const PARAMS_MAGIC: &[u8; 4] = b"FSPM";
const PARAMS_VERSION: u32 = 1;

/// Encodes parameters as: magic "FSPM", u32 version, u64 vector length, the
/// raw little-endian f64 values, then the layout table (u32 entry count;
/// per entry u16 name length, name bytes, u64 offset, u8 rank, u64 dims).
pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(PARAMS_MAGIC);
    w.u32(PARAMS_VERSION);
    w.u64(params.values.len() as u64);
    for &v in &params.values {
        w.f64(v);
    }
    w.u32(params.layout.slices.len() as u32);
    for s in &params.layout.slices {
        w.u16(s.name.len() as u16);
        w.bytes(s.name.as_bytes());
        w.u64(s.offset as u64);
        w.u8(s.shape.len() as u8);
        for &d in &s.shape {
            w.u64(d as u64);
        }
    }
    w.into_vec()
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = ByteReader::new(bytes);
    r.magic(PARAMS_MAGIC, "parameter checkpoint")?;
    let version = r.u32()?;
    if version != PARAMS_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u64()? as usize;
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        values.push(r.f64()?);
    }
    let entries = r.u32()?;
    let mut slices = Vec::with_capacity(entries as usize);
    for _ in 0..entries {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.fail("slice name is not valid UTF-8"))?
            .to_string();
        let offset = r.u64()? as usize;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        slices.push(SliceInfo {
            name,
            offset,
            shape,
        });
    }
    r.finish()?;
    let layout = Layout { slices };
    layout.validate(values.len())?;
    Ok(ModelParams { values, layout })
}

pub fn save_params(params: &ModelParams, path: &std::path::Path) -> Result<()> {
    Ok(std::fs::write(path, encode_params(params))?)
}

pub fn load_params(path: &std::path::Path) -> Result<ModelParams> {
    decode_params(&std::fs::read(path)?)
}
