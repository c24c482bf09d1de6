//! Neural-network pieces on top of [`crate::linalg`]: convolution lowering,
//! CryptoNets-style inference over 3-D tiles, the bootstrap lower bound for
//! batch-packed training, and a checker for hand-written shape plans.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backend::{BackendConfig, CostReport, Session, Tile};
use crate::dense::{dense_elementwise, dense_matmul, DenseTensor};
use crate::error::{Error, Result};
use crate::linalg::{matmul_a, matmul_b};
use crate::shape::{
    elementwise_result_shape, parse_shape, sum_result_shape, DimSpec, ElementwiseOp,
    TileTensorShape,
};
use crate::tile_tensor::{
    clean_unknowns, replicate_dim, tt_elementwise, tt_sum, SumVariant, TileTensor,
};

/// Sliding-window geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_dims(&self) -> Result<(usize, usize)> {
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if self.stride == 0 || self.filter_h == 0 || self.filter_w == 0 {
            return Err(Error::invalid("filter extents and stride must be positive"));
        }
        if self.filter_h > ph || self.filter_w > pw {
            return Err(Error::invalid(format!(
                "a {}x{} filter admits no window over a padded {ph}x{pw} input",
                self.filter_h, self.filter_w
            )));
        }
        Ok((
            (ph - self.filter_h) / self.stride + 1,
            (pw - self.filter_w) / self.stride + 1,
        ))
    }

    pub fn windows(&self) -> Result<usize> {
        let (h, w) = self.out_dims()?;
        Ok(h * w)
    }

    /// For every window (row-major over the output grid), the flattened
    /// input position under each filter tap, or `None` where the tap falls
    /// on padding.
    pub fn taps(&self) -> Result<Vec<Vec<Option<usize>>>> {
        let (oh, ow) = self.out_dims()?;
        let mut out = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            for c in 0..ow {
                let mut taps = Vec::with_capacity(self.filter_h * self.filter_w);
                for i in 0..self.filter_h {
                    for j in 0..self.filter_w {
                        let y = (r * self.stride + i).checked_sub(self.padding);
                        let x = (c * self.stride + j).checked_sub(self.padding);
                        taps.push(match (y, x) {
                            (Some(y), Some(x)) if y < self.height && x < self.width => {
                                Some(y * self.width + x)
                            }
                            _ => None,
                        });
                    }
                }
                out.push(taps);
            }
        }
        Ok(out)
    }
}

/// Lowers a convolution to a matrix: row `r` is the flattened window at grid
/// position `r`, with zeros where the window overlaps the padding.
pub fn im2col(
    input: &DenseTensor,
    filter_h: usize,
    filter_w: usize,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor> {
    if input.rank() != 2 {
        return Err(Error::invalid(format!(
            "im2col needs a 2-D input, got {:?}",
            input.shape()
        )));
    }
    let g = ConvGeometry {
        height: input.shape()[0],
        width: input.shape()[1],
        filter_h,
        filter_w,
        stride,
        padding,
    };
    let taps = g.taps()?;
    let k = filter_h * filter_w;
    let values: Vec<f64> = taps
        .iter()
        .flat_map(|w| w.iter().map(|t| t.map_or(0.0, |p| input.values()[p])))
        .collect();
    Ok(DenseTensor::new(vec![taps.len(), k], values)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Input {
        height: usize,
        width: usize,
    },
    /// Weights `[filters, kh·kw]`, bias `[filters]`. The output is ordered
    /// filter-major: element `f·windows + w`.
    Conv {
        filters: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        weights: Option<DenseTensor>,
        bias: Option<DenseTensor>,
    },
    Square,
    /// Weights `[out, in]`, bias `[out]`.
    FullyConnected {
        inputs: usize,
        outputs: usize,
        weights: Option<DenseTensor>,
        bias: Option<DenseTensor>,
    },
    MeanPool {
        window: usize,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Input { .. } => "input",
            Layer::Conv { .. } => "conv",
            Layer::Square => "act square",
            Layer::FullyConnected { .. } => "fc",
            Layer::MeanPool { .. } => "pool",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
}

fn take_usize(key: &str, v: &str, line: usize) -> Result<usize> {
    v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Parse(format!(
            "line {line}: `{key}` must be a positive integer, got `{v}`"
        ))
    })
}

fn load_tensor(path: &str, base: Option<&Path>, line: usize) -> Result<DenseTensor> {
    let full = match base {
        Some(b) => b.join(path),
        None => Path::new(path).to_path_buf(),
    };
    let text = std::fs::read_to_string(&full).map_err(|source| Error::Io {
        path: full.display().to_string(),
        source,
    })?;
    DenseTensor::from_text(&text)
        .map_err(|e| Error::Parse(format!("line {line}: {}: {e}", full.display())))
}

fn fit(t: DenseTensor, shape: &[usize], what: &str) -> Result<DenseTensor> {
    if t.len() != shape.iter().product::<usize>() {
        return Err(Error::invalid(format!(
            "{what} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t.reshape(shape)?)
}

impl NetworkSpec {
    /// The CryptoNets network: 28×28 input, 5 filters 5×5 stride 2 (padding
    /// 1, giving 13×13 windows and 845 outputs), square, 845→100, square,
    /// 100→10.
    pub fn cryptonets() -> NetworkSpec {
        NetworkSpec {
            layers: vec![
                Layer::Input {
                    height: 28,
                    width: 28,
                },
                Layer::Conv {
                    filters: 5,
                    kh: 5,
                    kw: 5,
                    stride: 2,
                    padding: 1,
                    weights: None,
                    bias: None,
                },
                Layer::Square,
                Layer::FullyConnected {
                    inputs: 845,
                    outputs: 100,
                    weights: None,
                    bias: None,
                },
                Layer::Square,
                Layer::FullyConnected {
                    inputs: 100,
                    outputs: 10,
                    weights: None,
                    bias: None,
                },
            ],
        }
    }

    /// Parses the line format (`input h=28 w=28`, `conv filters=5 kh=5 kw=5
    /// stride=2 pad=1 [weights=F bias=F]`, `act square`, `fc in=845 out=100
    /// [weights=F bias=F]`, `pool window=2`). Weight paths are resolved
    /// against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<NetworkSpec> {
        let mut layers = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = no + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut tokens = body.split_whitespace();
            let kind = tokens.next().expect("non-empty line");
            let mut kv = Vec::new();
            let mut bare = Vec::new();
            for t in tokens {
                match t.split_once('=') {
                    Some((k, v)) => kv.push((k, v)),
                    None => bare.push(t),
                }
            }
            let get = |key: &str| kv.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
            let need = |key: &str| -> Result<usize> {
                let v = get(key)
                    .ok_or_else(|| Error::Parse(format!("line {line}: `{kind}` needs `{key}=`")))?;
                take_usize(key, v, line)
            };
            let allowed: &[&str] = match kind {
                "input" => &["h", "w"],
                "conv" => &["filters", "kh", "kw", "stride", "pad", "weights", "bias"],
                "act" => &[],
                "fc" => &["in", "out", "weights", "bias"],
                "pool" => &["window"],
                other => {
                    return Err(Error::Parse(format!(
                        "line {line}: unknown layer `{other}`"
                    )))
                }
            };
            if let Some((k, _)) = kv.iter().find(|(k, _)| !allowed.contains(k)) {
                return Err(Error::Parse(format!(
                    "line {line}: unknown key `{k}` for `{kind}`"
                )));
            }
            let tensor = |key: &str| get(key).map(|p| load_tensor(p, base, line)).transpose();
            let layer = match kind {
                "input" => Layer::Input {
                    height: need("h")?,
                    width: need("w")?,
                },
                "conv" => {
                    let filters = need("filters")?;
                    let (kh, kw) = (need("kh")?, need("kw")?);
                    let stride = get("stride")
                        .map(|v| take_usize("stride", v, line))
                        .transpose()?
                        .unwrap_or(1);
                    let padding = match get("pad") {
                        Some(v) => v.parse::<usize>().map_err(|_| {
                            Error::Parse(format!("line {line}: bad `pad` value `{v}`"))
                        })?,
                        None => 0,
                    };
                    Layer::Conv {
                        filters,
                        kh,
                        kw,
                        stride,
                        padding,
                        weights: tensor("weights")?
                            .map(|t| fit(t, &[filters, kh * kw], "conv weights"))
                            .transpose()?,
                        bias: tensor("bias")?
                            .map(|t| fit(t, &[filters], "conv bias"))
                            .transpose()?,
                    }
                }
                "act" => match bare.as_slice() {
                    ["square"] => Layer::Square,
                    _ => {
                        return Err(Error::Parse(format!(
                            "line {line}: only `act square` is supported"
                        )))
                    }
                },
                "fc" => {
                    let (inputs, outputs) = (need("in")?, need("out")?);
                    Layer::FullyConnected {
                        inputs,
                        outputs,
                        weights: tensor("weights")?
                            .map(|t| fit(t, &[outputs, inputs], "fc weights"))
                            .transpose()?,
                        bias: tensor("bias")?
                            .map(|t| fit(t, &[outputs], "fc bias"))
                            .transpose()?,
                    }
                }
                _ => Layer::MeanPool {
                    window: need("window")?,
                },
            };
            if kind != "act" && !bare.is_empty() {
                return Err(Error::Parse(format!(
                    "line {line}: unexpected `{}`",
                    bare[0]
                )));
            }
            layers.push(layer);
        }
        let net = NetworkSpec { layers };
        net.feature_sizes()?;
        Ok(net)
    }

    /// Number of input features.
    pub fn input_size(&self) -> Result<usize> {
        match self.layers.first() {
            Some(Layer::Input { height, width }) => Ok(height * width),
            Some(Layer::FullyConnected { inputs, .. }) => Ok(*inputs),
            Some(other) => Err(Error::invalid(format!(
                "a network must start with `input` or `fc`, not `{}`",
                other.kind()
            ))),
            None => Err(Error::invalid("empty network")),
        }
    }

    /// Feature count after each layer; checks that extents chain.
    pub fn feature_sizes(&self) -> Result<Vec<usize>> {
        let mut size = self.input_size()?;
        let mut hw: Option<(usize, usize)> = None;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| {
                Err(Error::invalid(format!(
                    "layer {} ({}): {msg}",
                    i + 1,
                    layer.kind()
                )))
            };
            match layer {
                Layer::Input { height, width } => {
                    if i != 0 {
                        return fail("`input` must come first".into());
                    }
                    hw = Some((*height, *width));
                }
                Layer::Conv {
                    filters,
                    kh,
                    kw,
                    stride,
                    padding,
                    ..
                } => {
                    let Some((height, width)) = hw.take() else {
                        return fail("convolution needs a 2-D input directly before it".into());
                    };
                    let g = ConvGeometry {
                        height,
                        width,
                        filter_h: *kh,
                        filter_w: *kw,
                        stride: *stride,
                        padding: *padding,
                    };
                    size = filters
                        * g.windows()
                            .map_err(|e| Error::invalid(format!("layer {}: {e}", i + 1)))?;
                }
                Layer::Square => {}
                Layer::FullyConnected {
                    inputs, outputs, ..
                } => {
                    if *inputs != size {
                        return fail(format!("expects {inputs} inputs but receives {size}"));
                    }
                    hw = None;
                    size = *outputs;
                }
                Layer::MeanPool { window } => {
                    if size % window != 0 {
                        return fail(format!("window {window} does not divide {size} features"));
                    }
                    hw = None;
                    size /= window;
                }
            }
            out.push(size);
        }
        Ok(out)
    }

    pub fn output_size(&self) -> Result<usize> {
        Ok(*self.feature_sizes()?.last().expect("non-empty network"))
    }

    /// Fills every missing weight and bias with seeded uniform values
    /// scaled by the fan-in.
    pub fn with_random_weights(&self, seed: u64) -> NetworkSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: &[usize], scale: f64| {
            DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
                .expect("positive extents")
        };
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv {
                    filters,
                    kh,
                    kw,
                    stride,
                    padding,
                    weights,
                    bias,
                } => {
                    let scale = 1.0 / ((kh * kw) as f64).sqrt();
                    Layer::Conv {
                        filters: *filters,
                        kh: *kh,
                        kw: *kw,
                        stride: *stride,
                        padding: *padding,
                        weights: Some(
                            weights
                                .clone()
                                .unwrap_or_else(|| draw(&[*filters, kh * kw], scale)),
                        ),
                        bias: Some(bias.clone().unwrap_or_else(|| draw(&[*filters], 0.1))),
                    }
                }
                Layer::FullyConnected {
                    inputs,
                    outputs,
                    weights,
                    bias,
                } => {
                    let scale = 1.0 / (*inputs as f64).sqrt();
                    Layer::FullyConnected {
                        inputs: *inputs,
                        outputs: *outputs,
                        weights: Some(
                            weights
                                .clone()
                                .unwrap_or_else(|| draw(&[*outputs, *inputs], scale)),
                        ),
                        bias: Some(bias.clone().unwrap_or_else(|| draw(&[*outputs], 0.1))),
                    }
                }
                other => other.clone(),
            })
            .collect();
        NetworkSpec { layers }
    }

    /// Seeded batch `[n, features]` with values in `[0, 1)`.
    pub fn random_batch(&self, n: usize, seed: u64) -> Result<DenseTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(DenseTensor::from_fn(&[n, self.input_size()?], |_| {
            rng.random_range(0.0..1.0)
        })?)
    }
}

fn weights_of(layer: &Layer) -> Result<(&DenseTensor, &DenseTensor)> {
    match layer {
        Layer::Conv {
            weights: Some(w),
            bias: Some(b),
            ..
        }
        | Layer::FullyConnected {
            weights: Some(w),
            bias: Some(b),
            ..
        } => Ok((w, b)),
        _ => Err(Error::invalid(format!(
            "`{}` layer has no weights; load them or call with_random_weights",
            layer.kind()
        ))),
    }
}

fn batch_matrix(net: &NetworkSpec, batch: &DenseTensor) -> Result<DenseTensor> {
    let features = net.input_size()?;
    let n = batch.shape()[0];
    if batch.len() != n * features {
        return Err(Error::invalid(format!(
            "batch of shape {:?} does not hold {features} features per sample",
            batch.shape()
        )));
    }
    Ok(batch.reshape(&[n, features])?)
}

fn conv_geometry(net: &NetworkSpec, layer: &Layer) -> Result<ConvGeometry> {
    let (
        Some(Layer::Input { height, width }),
        Layer::Conv {
            kh,
            kw,
            stride,
            padding,
            ..
        },
    ) = (net.layers.first(), layer)
    else {
        return Err(Error::invalid(
            "convolution is only supported directly after `input`",
        ));
    };
    Ok(ConvGeometry {
        height: *height,
        width: *width,
        filter_h: *kh,
        filter_w: *kw,
        stride: *stride,
        padding: *padding,
    })
}

/// Plaintext forward pass. `batch` is `[n, features]` (or `[n, h, w]`);
/// returns logits `[n, outputs]`.
pub fn forward_plain(net: &NetworkSpec, batch: &DenseTensor) -> Result<DenseTensor> {
    let x = batch_matrix(net, batch)?;
    let n = x.shape()[0];
    // activations as [features, n]
    let mut act = x.transpose()?;
    for layer in &net.layers {
        act = match layer {
            Layer::Input { .. } => act,
            Layer::Conv { filters, .. } => {
                let g = conv_geometry(net, layer)?;
                let (w, b) = weights_of(layer)?;
                let windows = g.windows()?;
                let mut out = DenseTensor::zeros(&[filters * windows, n])?;
                for s in 0..n {
                    let img = DenseTensor::from_fn(&[g.height, g.width], |i| {
                        act.get(&[i[0] * g.width + i[1], s])
                    })?;
                    let cols = im2col(&img, g.filter_h, g.filter_w, g.stride, g.padding)?;
                    let conv = dense_matmul(&cols, &w.transpose()?)?;
                    for f in 0..*filters {
                        for win in 0..windows {
                            out.set(&[f * windows + win, s], conv.get(&[win, f]) + b.values()[f]);
                        }
                    }
                }
                out
            }
            Layer::Square => dense_elementwise(&act, &act, ElementwiseOp::Mul)?,
            Layer::FullyConnected { outputs, .. } => {
                let (w, b) = weights_of(layer)?;
                let y = dense_matmul(w, &act)?;
                dense_elementwise(&y, &b.reshape(&[*outputs, 1])?, ElementwiseOp::Add)?
            }
            Layer::MeanPool { .. } => {
                return Err(Error::invalid("mean pooling is not executed"));
            }
        };
    }
    Ok(act.transpose()?)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InferenceOptions {
    pub variant: SumVariant,
    /// Bootstrap the activations whenever their depth would run out.
    pub auto_bootstrap: bool,
}

#[derive(Debug, Clone)]
pub struct Inference {
    /// `[n, outputs]`
    pub logits: DenseTensor,
    pub cost: CostReport,
    /// Canonical shape of the activations after every layer.
    pub layer_shapes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    /// `[*/t1, x/t2, n/t3]`: features along dimension 2, replicated along 1.
    Rows,
    /// `[x/t1, 1?/t2, n/t3]`: features along dimension 1.
    Columns,
}

fn spec(n: usize, t: usize) -> DimSpec {
    DimSpec::plain(n, t)
}

fn rep(t: usize) -> DimSpec {
    DimSpec::replicated(t)
}

/// Adds `bias[o]` to feature `o` of every sample, packed to match `y`.
fn add_bias(y: &TileTensor, bias: &DenseTensor, n: usize, layout: Layout) -> Result<TileTensor> {
    let shape = y.shape().without_unknowns();
    let out = bias.len();
    let dense = match layout {
        Layout::Rows => DenseTensor::from_fn(&[1, out, n], |i| bias.values()[i[1]])?,
        Layout::Columns => DenseTensor::from_fn(&[out, 1, n], |i| bias.values()[i[0]])?,
    };
    let b = TileTensor::pack(&dense, &shape, y.session())?;
    tt_elementwise(y, &b, ElementwiseOp::Add)
}

fn ensure_depth(t: TileTensor, options: &InferenceOptions) -> TileTensor {
    if options.auto_bootstrap && t.min_chain_index() == 0 {
        t.bootstrap()
    } else {
        t
    }
}

/// Encrypted-path inference. `tile = [t1, t2, t3]` with `t1·t2·t3 = s`;
/// samples run along the third tile dimension, so the batch may hold at most
/// `t3` samples. Tiles `[1, 1, s]` select batch packing: one tile per
/// feature, plaintext weights, no rotations.
pub fn cryptonets_infer(
    net: &NetworkSpec,
    batch: &DenseTensor,
    tile: [usize; 3],
    session: &Arc<Session>,
    options: InferenceOptions,
) -> Result<Inference> {
    let s = session.slot_count();
    let [t1, t2, t3] = tile;
    if t1 * t2 * t3 != s {
        return Err(Error::invalid(format!(
            "tile {t1}x{t2}x{t3} does not multiply to {s} slots"
        )));
    }
    let x = batch_matrix(net, batch)?;
    let n = x.shape()[0];
    if n > t3 {
        return Err(Error::invalid(format!("batch of {n} exceeds t3 = {t3}")));
    }
    net.feature_sizes()?;
    let before = session.cost_report();
    let (result, layer_shapes) = if t1 == 1 && t2 == 1 {
        infer_batch_packed(net, &x, session, &options)?
    } else {
        infer_tiled(net, &x, tile, session, &options)?
    };
    let d = result.unpack();
    let outputs = d.len() / n;
    let logits = d.reshape(&[outputs, n])?.transpose()?;
    Ok(Inference {
        logits,
        cost: session.cost_report() - before,
        layer_shapes,
    })
}

fn infer_tiled(
    net: &NetworkSpec,
    x: &DenseTensor,
    [t1, t2, t3]: [usize; 3],
    session: &Arc<Session>,
    options: &InferenceOptions,
) -> Result<(TileTensor, Vec<String>)> {
    let n = x.shape()[0];
    let variant = options.variant;
    let mut shapes = Vec::new();
    let mut state: Option<(TileTensor, Layout)> = None;
    for (idx, layer) in net.layers.iter().enumerate() {
        let stage = format!("layer {} ({})", idx + 1, layer.kind());
        let step = || -> Result<Option<(TileTensor, Layout)>> {
            Ok(match layer {
                Layer::Input { .. } => None,
                Layer::Conv { filters, .. } => {
                    if state.is_some() {
                        return Err(Error::invalid(
                            "convolution is only supported directly after `input`",
                        ));
                    }
                    let g = conv_geometry(net, layer)?;
                    let (w, b) = weights_of(layer)?;
                    let taps = g.taps()?;
                    let windows = taps.len();
                    let k = g.filter_h * g.filter_w;
                    let cols = filters * windows;
                    // row `f·windows + w` of the lowered input repeats window
                    // `w` once per filter, so a single multiply-and-sum over
                    // the taps yields every filter's output
                    let data = DenseTensor::from_fn(&[k, cols, n], |i| {
                        taps[i[1] % windows][i[0]].map_or(0.0, |p| x.get(&[i[2], p]))
                    })?;
                    let wdense =
                        DenseTensor::from_fn(&[k, cols, 1], |i| w.get(&[i[1] / windows, i[0]]))?;
                    let dshape =
                        TileTensorShape::new(vec![spec(k, t1), spec(cols, t2), spec(n, t3)])?;
                    let wshape = TileTensorShape::new(vec![spec(k, t1), spec(cols, t2), rep(t3)])?;
                    let td = TileTensor::pack(&data, &dshape, session)?;
                    let tw = TileTensor::pack(&wdense, &wshape, session)?;
                    let prod = tt_elementwise(&tw, &td, ElementwiseOp::Mul)?;
                    let y = tt_sum(&prod, 1, variant)?;
                    let expanded = DenseTensor::from_fn(&[cols], |i| b.values()[i[0] / windows])?;
                    Some((add_bias(&y, &expanded, n, Layout::Rows)?, Layout::Rows))
                }
                Layer::Square => {
                    let (t, layout) = state
                        .clone()
                        .ok_or_else(|| Error::invalid("activation before any data"))?;
                    let t = ensure_depth(t, options);
                    Some((tt_elementwise(&t, &t, ElementwiseOp::Mul)?, layout))
                }
                Layer::FullyConnected {
                    inputs, outputs, ..
                } => {
                    let (w, b) = weights_of(layer)?;
                    let (t, layout) = match state.clone() {
                        Some(s) => s,
                        None => {
                            let rows = x.transpose()?.reshape(&[1, *inputs, n])?;
                            let sh = TileTensorShape::new(vec![
                                rep(t1),
                                spec(*inputs, t2),
                                spec(n, t3),
                            ])?;
                            (TileTensor::pack(&rows, &sh, session)?, Layout::Rows)
                        }
                    };
                    match layout {
                        Layout::Rows => {
                            let wsh = TileTensorShape::new(vec![
                                spec(*outputs, t1),
                                spec(*inputs, t2),
                                rep(t3),
                            ])?;
                            let tw = TileTensor::pack(
                                &w.reshape(&[*outputs, *inputs, 1])?,
                                &wsh,
                                session,
                            )?;
                            let y = matmul_a(&tw, &ensure_depth(t, options), variant)?;
                            Some((add_bias(&y, b, n, Layout::Columns)?, Layout::Columns))
                        }
                        Layout::Columns => {
                            let c = clean_unknowns(&ensure_depth(t, options))?;
                            let r = replicate_dim(&c, 2, variant)?;
                            let wsh = TileTensorShape::new(vec![
                                spec(*inputs, t1),
                                spec(*outputs, t2),
                                rep(t3),
                            ])?;
                            let wt = w.transpose()?.reshape(&[*inputs, *outputs, 1])?;
                            let tw = TileTensor::pack(&wt, &wsh, session)?;
                            let y = matmul_b(&tw, &ensure_depth(r, options), variant)?;
                            Some((add_bias(&y, b, n, Layout::Rows)?, Layout::Rows))
                        }
                    }
                }
                Layer::MeanPool { .. } => {
                    return Err(Error::invalid(
                        "mean pooling is not executed by the inference pipeline",
                    ));
                }
            })
        };
        if let Some(next) = step().map_err(|e| e.at_stage(stage))? {
            shapes.push(next.0.shape().to_string());
            state = Some(next);
        }
    }
    let (t, _) = state.ok_or_else(|| Error::invalid("network has no layers to run"))?;
    Ok((t, shapes))
}

fn infer_batch_packed(
    net: &NetworkSpec,
    x: &DenseTensor,
    session: &Arc<Session>,
    options: &InferenceOptions,
) -> Result<(TileTensor, Vec<String>)> {
    let s = session.slot_count();
    let n = x.shape()[0];
    let features = x.shape()[1];
    let packed = TileTensor::pack(
        &x.transpose()?.reshape(&[features, 1, n])?,
        &TileTensorShape::new(vec![spec(features, 1), spec(1, 1), spec(n, s)])?,
        session,
    )?;
    let mut cur: Vec<Tile> = packed.tiles().to_vec();
    let mut shapes = Vec::new();
    let refresh = |cur: Vec<Tile>| -> Vec<Tile> {
        if options.auto_bootstrap && cur.iter().any(|t| t.chain_index() == 0) {
            cur.iter().map(|t| session.bootstrap(t)).collect()
        } else {
            cur
        }
    };
    // Σ_k w_k·x_k + b over plaintext weights
    let affine = |cur: &[Tile], terms: &[(usize, f64)], bias: f64| -> Result<Tile> {
        let mut acc: Option<Tile> = None;
        for &(i, w) in terms {
            let p = session.scalar_mul(&cur[i], w)?;
            acc = Some(match acc {
                None => p,
                Some(a) => session.add(&a, &p)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::invalid("output with no inputs"))?;
        Ok(session.add_scalar(&acc, bias))
    };
    for (idx, layer) in net.layers.iter().enumerate() {
        let stage = format!("layer {} ({})", idx + 1, layer.kind());
        let step = |cur: Vec<Tile>| -> Result<Option<Vec<Tile>>> {
            Ok(match layer {
                Layer::Input { .. } => None,
                Layer::Conv { filters, .. } => {
                    let g = conv_geometry(net, layer)?;
                    let (w, b) = weights_of(layer)?;
                    let taps = g.taps()?;
                    let windows = taps.len();
                    let cur = refresh(cur);
                    let out = (0..filters * windows)
                        .into_par_iter()
                        .map(|o| {
                            let (f, win) = (o / windows, o % windows);
                            let terms: Vec<(usize, f64)> = taps[win]
                                .iter()
                                .enumerate()
                                .filter_map(|(k, p)| p.map(|p| (p, w.get(&[f, k]))))
                                .collect();
                            affine(&cur, &terms, b.values()[f])
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Some(out)
                }
                Layer::Square => {
                    let cur = refresh(cur);
                    Some(
                        cur.par_iter()
                            .map(|t| session.mul(t, t))
                            .collect::<Result<Vec<_>, _>>()?,
                    )
                }
                Layer::FullyConnected {
                    inputs, outputs, ..
                } => {
                    let (w, b) = weights_of(layer)?;
                    let cur = refresh(cur);
                    let out = (0..*outputs)
                        .into_par_iter()
                        .map(|o| {
                            let terms: Vec<(usize, f64)> =
                                (0..*inputs).map(|i| (i, w.get(&[o, i]))).collect();
                            affine(&cur, &terms, b.values()[o])
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Some(out)
                }
                Layer::MeanPool { .. } => {
                    return Err(Error::invalid(
                        "mean pooling is not executed by the inference pipeline",
                    ));
                }
            })
        };
        if let Some(next) = step(cur.clone()).map_err(|e| e.at_stage(stage))? {
            cur = next;
            shapes.push(format!("[{},1,{}/{}]", cur.len(), n, s));
        }
    }
    let shape = TileTensorShape::new(vec![spec(cur.len(), 1), spec(1, 1), spec(n, s)])?;
    Ok((TileTensor::from_parts(shape, cur, session.clone())?, shapes))
}

/// A group of identical convolution filters in a batch-packed training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterGroup {
    pub count: u64,
    pub filter_h: u64,
    pub filter_w: u64,
    /// Rows of the convolution output (one ciphertext each).
    pub out_rows: u64,
}

impl FilterGroup {
    /// The two filter groups of the CNN-static text classifier: 32 filters
    /// of 3×50 (18 output rows) and 32 of 5×50 (16 output rows).
    pub fn cnn_static() -> Vec<FilterGroup> {
        vec![
            FilterGroup {
                count: 32,
                filter_h: 3,
                filter_w: 50,
                out_rows: 18,
            },
            FilterGroup {
                count: 32,
                filter_h: 5,
                filter_w: 50,
                out_rows: 16,
            },
        ]
    }
}

impl std::str::FromStr for FilterGroup {
    type Err = String;

    /// `COUNTxHxW:ROWS`, e.g. `32x3x50:18`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || format!("expected COUNTxHxW:ROWS, got `{s}`");
        let (dims, rows) = s.split_once(':').ok_or_else(err)?;
        let parts: Vec<u64> = dims
            .split('x')
            .map(|p| p.trim().parse::<u64>().map_err(|_| err()))
            .collect::<Result<_, _>>()?;
        let out_rows = rows.trim().parse::<u64>().map_err(|_| err())?;
        match parts.as_slice() {
            &[count, filter_h, filter_w]
                if count > 0 && filter_h > 0 && filter_w > 0 && out_rows > 0 =>
            {
                Ok(FilterGroup {
                    count,
                    filter_h,
                    filter_w,
                    out_rows,
                })
            }
            _ => Err(err()),
        }
    }
}

/// Lower bound on bootstraps per training iteration under batch packing.
///
/// Each filter's weights, its output, the output gradient and the weight
/// gradient form a chain of three multiplications per iteration, so one of
/// them must be bootstrapped `3/d` times on average. The cheapest holds
/// `min(out_rows, filter_h·filter_w)` ciphertexts. The sum over all filters
/// is rounded up.
pub fn bootstrap_lower_bound(groups: &[FilterGroup], depth: u32) -> Result<u64> {
    if depth == 0 {
        return Err(Error::invalid("depth must be positive"));
    }
    let numerator: u64 = groups
        .iter()
        .map(|g| g.count * 3 * g.out_rows.min(g.filter_h * g.filter_w))
        .sum();
    Ok(numerator.div_ceil(u64::from(depth)))
}

/// Operation of a plan step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanOp {
    Input,
    Add,
    Mul,
    Square,
    Sum(usize),
    /// Multiply then sum over the given dimension.
    Matmul(usize),
    Clean,
    Replicate(usize),
    Mask,
    Bootstrap,
    Reshape,
}

impl PlanOp {
    fn arity(self) -> usize {
        match self {
            PlanOp::Input => 0,
            PlanOp::Add | PlanOp::Mul | PlanOp::Matmul(_) => 2,
            _ => 1,
        }
    }

    fn consumes_depth(self) -> bool {
        matches!(
            self,
            PlanOp::Mul | PlanOp::Square | PlanOp::Matmul(_) | PlanOp::Clean | PlanOp::Mask
        )
    }
}

impl fmt::Display for PlanOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanOp::Input => f.write_str("input"),
            PlanOp::Add => f.write_str("add"),
            PlanOp::Mul => f.write_str("mul"),
            PlanOp::Square => f.write_str("square"),
            PlanOp::Sum(d) => write!(f, "sum({d})"),
            PlanOp::Matmul(d) => write!(f, "matmul({d})"),
            PlanOp::Clean => f.write_str("clean"),
            PlanOp::Replicate(d) => write!(f, "replicate({d})"),
            PlanOp::Mask => f.write_str("mask"),
            PlanOp::Bootstrap => f.write_str("bootstrap"),
            PlanOp::Reshape => f.write_str("reshape"),
        }
    }
}

/// One declared step of a hand-written plan. Shapes stay as text so that
/// unparsable shapes are reported as violations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanStep {
    pub op: PlanOp,
    pub inputs: Vec<String>,
    pub output: String,
    pub chain_before: Option<u32>,
    pub chain_after: Option<u32>,
    /// Source line, when parsed from text.
    pub line: Option<usize>,
}

impl PlanStep {
    pub fn new(op: PlanOp, inputs: &[&str], output: &str) -> PlanStep {
        PlanStep {
            op,
            inputs: inputs.iter().map(ToString::to_string).collect(),
            output: output.to_string(),
            chain_before: None,
            chain_after: None,
            line: None,
        }
    }

    pub fn chains(mut self, before: Option<u32>, after: Option<u32>) -> PlanStep {
        self.chain_before = before;
        self.chain_after = after;
        self
    }
}

fn parse_op(s: &str) -> Option<PlanOp> {
    let (name, arg) = match s.split_once('(') {
        Some((n, rest)) => (
            n.trim(),
            Some(rest.strip_suffix(')')?.trim().parse::<usize>().ok()?),
        ),
        None => (s.trim(), None),
    };
    Some(match (name, arg) {
        ("input", None) => PlanOp::Input,
        ("add", None) => PlanOp::Add,
        ("mul", None) => PlanOp::Mul,
        ("square", None) => PlanOp::Square,
        ("sum", Some(d)) => PlanOp::Sum(d),
        ("matmul", Some(d)) => PlanOp::Matmul(d),
        ("clean", None) => PlanOp::Clean,
        ("replicate", Some(d)) => PlanOp::Replicate(d),
        ("mask", None) => PlanOp::Mask,
        ("bootstrap", None) => PlanOp::Bootstrap,
        ("reshape", None) => PlanOp::Reshape,
        _ => return None,
    })
}

fn bracket_groups(s: &str) -> Option<Vec<String>> {
    let mut out = Vec::new();
    let mut rest = s.trim();
    while !rest.is_empty() {
        if !rest.starts_with('[') {
            return None;
        }
        let end = rest.find(']')?;
        out.push(rest[..=end].to_string());
        rest = rest[end + 1..].trim_start();
    }
    Some(out)
}

/// Parses a plan: one step per line, `op: INPUTS -> OUTPUT [@ BEFORE->AFTER]`.
/// `input: [shape]` declares a starting tensor. `#` starts a comment.
///
/// ```text
/// input: [18,*/32,150/256,255] @ 4
/// matmul(3): [18,*/32,150/256,255] [1,32/32,150/256,1] -> [18,32/32,1?/256,255] @ 4->3
/// ```
pub fn parse_plan(text: &str) -> Result<Vec<PlanStep>> {
    let mut steps = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = no + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse(format!("plan line {line}: {msg}"));
        let (op_text, rest) = body
            .split_once(':')
            .ok_or_else(|| err("expected `op: ...`"))?;
        let op = parse_op(op_text)
            .ok_or_else(|| err(&format!("unknown operation `{}`", op_text.trim())))?;
        let (shapes_text, chain_text) = match rest.split_once('@') {
            Some((a, b)) => (a, Some(b.trim())),
            None => (rest, None),
        };
        let (inputs, output) = match shapes_text.split_once("->") {
            Some((ins, out)) => {
                let ins = bracket_groups(ins).ok_or_else(|| err("malformed input shapes"))?;
                let mut out = bracket_groups(out).ok_or_else(|| err("malformed output shape"))?;
                if out.len() != 1 {
                    return Err(err("expected exactly one output shape"));
                }
                (ins, out.remove(0))
            }
            None if op == PlanOp::Input => {
                let mut s = bracket_groups(shapes_text).ok_or_else(|| err("malformed shape"))?;
                if s.len() != 1 {
                    return Err(err("`input` declares exactly one shape"));
                }
                (vec![], s.remove(0))
            }
            None => return Err(err("expected `->` before the output shape")),
        };
        if inputs.len() != op.arity() {
            return Err(err(&format!(
                "`{op}` takes {} input shape(s), got {}",
                op.arity(),
                inputs.len()
            )));
        }
        let num = |s: &str| -> Result<Option<u32>> {
            let s = s.trim();
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<u32>()
                    .map(Some)
                    .map_err(|_| err(&format!("bad chain index `{s}`")))
            }
        };
        let (chain_before, chain_after) = match chain_text {
            None => (None, None),
            Some(c) => match c.split_once("->") {
                Some((b, a)) => (num(b)?, num(a)?),
                None => (None, num(c)?),
            },
        };
        steps.push(PlanStep {
            op,
            inputs,
            output,
            chain_before,
            chain_after,
            line: Some(line),
        });
    }
    Ok(steps)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanViolation {
    /// 1-based step number.
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlanReport {
    pub steps: usize,
    pub bootstraps: u64,
    pub violations: Vec<PlanViolation>,
    /// Informational remarks (declared edges that were accepted unchecked).
    pub notes: Vec<String>,
}

impl PlanReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_depth_violation(&self) -> bool {
        self.violations.iter().any(|v| v.message.contains("depth"))
    }
}

impl fmt::Display for PlanReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "steps={}", self.steps)?;
        writeln!(f, "bootstraps={}", self.bootstraps)?;
        writeln!(f, "violations={}", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "violation step {}: {}", v.step, v.message)?;
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        writeln!(f, "status={}", if self.ok() { "ok" } else { "invalid" })
    }
}

fn derive_output(
    op: PlanOp,
    ins: &[TileTensorShape],
) -> std::result::Result<Option<TileTensorShape>, String> {
    let e = |x: crate::shape::ShapeError| x.to_string();
    Ok(Some(match op {
        PlanOp::Input | PlanOp::Reshape => return Ok(None),
        PlanOp::Add | PlanOp::Mul | PlanOp::Matmul(_) if ins[0].rank() != ins[1].rank() => {
            return Ok(None)
        }
        PlanOp::Add => elementwise_result_shape(&ins[0], &ins[1], ElementwiseOp::Add).map_err(e)?,
        PlanOp::Mul => elementwise_result_shape(&ins[0], &ins[1], ElementwiseOp::Mul).map_err(e)?,
        PlanOp::Square => {
            elementwise_result_shape(&ins[0], &ins[0], ElementwiseOp::Mul).map_err(e)?
        }
        PlanOp::Sum(d) => sum_result_shape(&ins[0], d).map_err(e)?,
        PlanOp::Matmul(d) => {
            let p = elementwise_result_shape(&ins[0], &ins[1], ElementwiseOp::Mul).map_err(e)?;
            sum_result_shape(&p, d).map_err(e)?
        }
        PlanOp::Clean | PlanOp::Mask => ins[0].without_unknowns(),
        PlanOp::Replicate(d) => {
            let s = &ins[0];
            if d == 0 || d > s.rank() {
                return Err(format!("dimension {d} out of range for rank {}", s.rank()));
            }
            let spec = s.dim(d - 1);
            if spec.is_fully_replicated() {
                s.clone()
            } else if spec.n != 1 || spec.d != 1 {
                return Err(format!(
                    "replicate needs a degenerate dimension {d}, got {spec}"
                ));
            } else if s.has_unknowns() {
                return Err("replicate needs a shape without unknowns".into());
            } else {
                let mut dims = s.dims().to_vec();
                dims[d - 1] = DimSpec::replicated(spec.t);
                TileTensorShape::new(dims).map_err(e)?
            }
        }
        PlanOp::Bootstrap => ins[0].clone(),
    }))
}

/// Checks a plan step by step: shapes parse and fit the slot count, derived
/// shapes match the declared outputs, and chain indices stay non-negative
/// between bootstraps. A step without a declared starting chain index
/// continues from the previous step's; `input` steps start fresh at the
/// maximum unless annotated.
pub fn validate_plan(steps: &[PlanStep], config: &BackendConfig) -> PlanReport {
    let max = config.max_chain_index;
    let mut report = PlanReport {
        steps: steps.len(),
        ..Default::default()
    };
    let mut chain = max;
    for (i, step) in steps.iter().enumerate() {
        let n = i + 1;
        let mut violate =
            |message: String| report.violations.push(PlanViolation { step: n, message });
        let mut parsed = Vec::new();
        let mut all_parsed = true;
        for text in step.inputs.iter().chain(std::iter::once(&step.output)) {
            match parse_shape(text) {
                Ok(s) => {
                    if let Err(e) = s.check_slots(config.slot_count) {
                        violate(format!("{text}: {e}"));
                    }
                    parsed.push(s);
                }
                Err(e) => {
                    violate(format!("cannot parse `{text}`: {e}"));
                    all_parsed = false;
                }
            }
        }
        if all_parsed {
            let (ins, out) = parsed.split_at(step.inputs.len());
            match derive_output(step.op, ins) {
                Ok(Some(derived)) => {
                    if derived != out[0] {
                        violate(format!(
                            "`{}` yields {derived}, but the plan declares {}",
                            step.op, out[0]
                        ));
                    }
                }
                Ok(None) => match step.op {
                    PlanOp::Input => {}
                    PlanOp::Reshape => report
                        .notes
                        .push(format!("step {n}: reshape accepted as declared")),
                    _ => report.notes.push(format!(
                        "step {n}: `{}` bridges ranks {} and {}; output accepted as declared",
                        step.op,
                        ins[0].rank(),
                        ins[1].rank()
                    )),
                },
                Err(msg) => violate(format!("`{}`: {msg}", step.op)),
            }
        }
        let before = match step.op {
            PlanOp::Input => step.chain_before.or(step.chain_after).unwrap_or(max),
            _ => step.chain_before.unwrap_or(chain),
        };
        if before > max {
            violate(format!("chain index {before} exceeds the maximum {max}"));
        }
        let after = if step.op == PlanOp::Bootstrap {
            report.bootstraps += 1;
            max
        } else if step.op.consumes_depth() {
            if before == 0 {
                violate(format!(
                    "`{}` at chain index 0: depth exhausted, a bootstrap is required",
                    step.op
                ));
                0
            } else {
                before - 1
            }
        } else {
            before
        };
        if let Some(declared) = step.chain_after {
            if declared != after {
                violate(format!(
                    "declared chain index {declared} after `{}`, expected {after}",
                    step.op
                ));
            }
        }
        chain = step.chain_after.unwrap_or(after);
    }
    report
}
