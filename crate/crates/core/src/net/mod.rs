//! Tiny U-Net localizer and the multiscale per-axis head.
//!
//! The backbone maps a `[in_channels, S, S]` image to an `S×S` feature map:
//!
//! * encoder level `l`: two 3×3 convolutions with ReLU, then 2×2 max pooling
//!   into level `l + 1`;
//! * decoder level `l`: nearest-neighbour ×2 upsampling of level `l + 1`,
//!   channel concatenation with the encoder output of level `l`, two 3×3
//!   convolutions with ReLU;
//! * a final 1×1 convolution down to one channel with no activation.
//!
//! The head pools the feature map `m - 1` times for branch `m` and reduces
//! every pooled map per axis into x and y logits.

pub mod checkpoint;
pub(crate) mod conv;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    pool2d, pool2d_backward, reduce_axes, reduce_axes_backward, PoolKind, ReduceKind, Tensor,
};
use conv::ConvShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub pool: PoolKind,
    pub reduce: ReduceKind,
    pub scales: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            pool: PoolKind::Max,
            reduce: ReduceKind::Sum,
            scales: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Channel width of each U-Net level, finest first.
    pub widths: Vec<usize>,
    pub head: HeadConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_size: 64,
            in_channels: 1,
            widths: vec![8, 16, 32],
            head: HeadConfig::default(),
        }
    }
}

impl NetConfig {
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let s = self.input_size;
        if !s.is_power_of_two() || s < 2 {
            return bad(format!("input size {s} must be a power of two >= 2"));
        }
        if self.in_channels == 0 {
            return bad("input channels must be positive".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("invalid channel widths {:?}", self.widths));
        }
        if s >> (self.depth() - 1) == 0 {
            return bad(format!("{} levels are too deep for size {s}", self.depth()));
        }
        if self.head.scales == 0 || s >> (self.head.scales - 1) == 0 {
            return bad(format!(
                "{} head scales do not divide size {s}",
                self.head.scales
            ));
        }
        Ok(())
    }
}

/// One convolution's weights `[out, in, k, k]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn zeros(name: String, in_c: usize, out_c: usize, k: usize) -> Self {
        ConvLayer {
            name,
            weight: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn shape_at(&self, size: usize) -> ConvShape {
        ConvShape {
            in_c: self.in_channels(),
            out_c: self.out_channels(),
            k: self.kernel(),
            h: size,
            w: size,
        }
    }
}

/// Learnable parameters. The same type doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub config: NetConfig,
    pub seed: u64,
    pub layers: Vec<ConvLayer>,
}

impl NetParams {
    /// Zero-valued parameters with the layout implied by `config`.
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let w = &config.widths;
        let d = config.depth();
        let mut layers = Vec::with_capacity(4 * d - 1);
        for l in 0..d {
            let in_c = if l == 0 { config.in_channels } else { w[l - 1] };
            layers.push(ConvLayer::zeros(format!("enc{l}.conv1"), in_c, w[l], 3));
            layers.push(ConvLayer::zeros(format!("enc{l}.conv2"), w[l], w[l], 3));
        }
        for l in (0..d - 1).rev() {
            layers.push(ConvLayer::zeros(
                format!("dec{l}.conv1"),
                w[l + 1] + w[l],
                w[l],
                3,
            ));
            layers.push(ConvLayer::zeros(format!("dec{l}.conv2"), w[l], w[l], 3));
        }
        layers.push(ConvLayer::zeros("out".into(), w[0], 1, 1));
        Ok(NetParams {
            config: config.clone(),
            seed: 0,
            layers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        NetParams {
            config: self.config.clone(),
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    name: l.name.clone(),
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    fn enc(&self, l: usize, c: usize) -> usize {
        2 * l + c
    }

    fn dec(&self, l: usize, c: usize) -> usize {
        let d = self.config.depth();
        2 * d + 2 * (d - 2 - l) + c
    }

    fn out(&self) -> usize {
        self.layers.len() - 1
    }

    /// All parameter tensors with their checkpoint keys, in layer order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.layers.iter().flat_map(|l| {
            [
                (format!("{}.weight", l.name), &l.weight),
                (format!("{}.bias", l.name), &l.bias),
            ]
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().map(|(_, t)| t.len()).sum()
    }

    /// Parameters flattened in [`named_tensors`](Self::named_tensors) order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn get_flat(&self, mut i: usize) -> f64 {
        for (_, t) in self.named_tensors() {
            if i < t.len() {
                return t.data()[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t.data_mut()[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &NetParams) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.axpy(alpha, &b.weight)?;
            a.bias.axpy(alpha, &b.bias)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.tensors_mut().for_each(|t| t.scale(alpha));
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().all(|(_, t)| t.is_finite())
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) drawn from a SplitMix64
/// stream seeded with `seed`, in layer order; zero biases.
pub fn init(config: &NetConfig, seed: u64) -> Result<NetParams> {
    let mut params = NetParams::zeros(config)?;
    params.seed = seed;
    let mut rng = SplitMix64::seed_from_u64(seed);
    for layer in &mut params.layers {
        let fan_in = (layer.in_channels() * layer.kernel() * layer.kernel()) as f64;
        let std = (2.0 / fan_in).sqrt();
        for w in layer.weight.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = std * z;
        }
    }
    Ok(params)
}

/// Activations retained by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    enc_in: Vec<Vec<f64>>,
    enc_mid: Vec<Vec<f64>>,
    enc_out: Vec<Vec<f64>>,
    dec_in: Vec<Vec<f64>>,
    dec_mid: Vec<Vec<f64>>,
    dec_out: Vec<Vec<f64>>,
    featmap: Tensor,
    size: usize,
    widths: Vec<usize>,
}

impl ForwardCache {
    pub fn featmap(&self) -> &Tensor {
        &self.featmap
    }
}

fn run_conv(layer: &ConvLayer, size: usize, input: &[f64], relu: bool) -> Vec<f64> {
    let s = layer.shape_at(size);
    let mut out = vec![0.0; s.out_c * size * size];
    conv::conv_forward(s, input, layer.weight.data(), layer.bias.data(), &mut out);
    if relu {
        conv::relu_inplace(&mut out);
    }
    out
}

/// Runs the backbone, returning the `S×S` feature map and the cache.
pub fn forward(params: &NetParams, image: &Tensor) -> Result<(Tensor, ForwardCache)> {
    let cfg = &params.config;
    let s = cfg.input_size;
    if image.shape() != [cfg.in_channels, s, s] {
        return Err(Error::Shape(format!(
            "image shape {:?} does not match [{}, {s}, {s}]",
            image.shape(),
            cfg.in_channels
        )));
    }
    let d = cfg.depth();
    let w = &cfg.widths;
    let mut enc_in = Vec::with_capacity(d);
    let mut enc_mid = Vec::with_capacity(d);
    let mut enc_out: Vec<Vec<f64>> = Vec::with_capacity(d);
    for l in 0..d {
        let size = s >> l;
        let inp = if l == 0 {
            image.data().to_vec()
        } else {
            conv::pool_channels(&enc_out[l - 1], w[l - 1], 2 * size, 2 * size, PoolKind::Max)
        };
        let mid = run_conv(&params.layers[params.enc(l, 0)], size, &inp, true);
        let out = run_conv(&params.layers[params.enc(l, 1)], size, &mid, true);
        enc_in.push(inp);
        enc_mid.push(mid);
        enc_out.push(out);
    }

    let mut dec_in = vec![Vec::new(); d.saturating_sub(1)];
    let mut dec_mid = vec![Vec::new(); d.saturating_sub(1)];
    let mut dec_out = vec![Vec::new(); d.saturating_sub(1)];
    let mut cur = enc_out[d - 1].clone();
    for l in (0..d - 1).rev() {
        let size = s >> l;
        let mut cat = conv::upsample2(&cur, w[l + 1], size / 2, size / 2);
        cat.extend_from_slice(&enc_out[l]);
        let mid = run_conv(&params.layers[params.dec(l, 0)], size, &cat, true);
        let out = run_conv(&params.layers[params.dec(l, 1)], size, &mid, true);
        cur = out.clone();
        dec_in[l] = cat;
        dec_mid[l] = mid;
        dec_out[l] = out;
    }

    let feat = run_conv(&params.layers[params.out()], s, &cur, false);
    let featmap = Tensor::new(vec![s, s], feat)?;
    let cache = ForwardCache {
        input: image.data().to_vec(),
        enc_in,
        enc_mid,
        enc_out,
        dec_in,
        dec_mid,
        dec_out,
        featmap: featmap.clone(),
        size: s,
        widths: w.clone(),
    };
    Ok((featmap, cache))
}

/// Gradients of every parameter given `dfeat`, the gradient with respect to
/// the feature map.
pub fn backward_featmap(
    params: &NetParams,
    cache: &ForwardCache,
    dfeat: &Tensor,
) -> Result<NetParams> {
    let cfg = &params.config;
    let s = cfg.input_size;
    if cache.size != s || cache.widths != cfg.widths || cache.input.len() != cfg.in_channels * s * s
    {
        return Err(Error::Shape(
            "forward cache does not match parameters".into(),
        ));
    }
    if dfeat.shape() != [s, s] {
        return Err(Error::Shape(format!(
            "feature map gradient has shape {:?}",
            dfeat.shape()
        )));
    }
    let d = cfg.depth();
    let w = &cfg.widths;
    let mut grads = params.zeros_like();

    // Backward through one conv (+ optional ReLU); returns the input gradient.
    let conv_back = |grads: &mut NetParams,
                     idx: usize,
                     size: usize,
                     input: &[f64],
                     activated: Option<&[f64]>,
                     mut dout: Vec<f64>,
                     need_input: bool|
     -> Vec<f64> {
        if let Some(a) = activated {
            conv::relu_backward_inplace(a, &mut dout);
        }
        let layer = &params.layers[idx];
        let shape = layer.shape_at(size);
        let g = &mut grads.layers[idx];
        let mut din = if need_input {
            vec![0.0; shape.in_c * size * size]
        } else {
            Vec::new()
        };
        conv::conv_backward(
            shape,
            input,
            layer.weight.data(),
            &dout,
            g.weight.data_mut(),
            g.bias.data_mut(),
            need_input.then_some(&mut din[..]),
        );
        din
    };

    let top = if d > 1 {
        &cache.dec_out[0]
    } else {
        &cache.enc_out[0]
    };
    let mut dcur = conv_back(
        &mut grads,
        params.out(),
        s,
        top,
        None,
        dfeat.data().to_vec(),
        true,
    );

    // Gradient flowing into each encoder output through the skip connections.
    let mut dskip: Vec<Vec<f64>> = vec![Vec::new(); d];
    for l in 0..d - 1 {
        let size = s >> l;
        let dmid = conv_back(
            &mut grads,
            params.dec(l, 1),
            size,
            &cache.dec_mid[l],
            Some(&cache.dec_out[l]),
            dcur,
            true,
        );
        let dcat = conv_back(
            &mut grads,
            params.dec(l, 0),
            size,
            &cache.dec_in[l],
            Some(&cache.dec_mid[l]),
            dmid,
            true,
        );
        let up_len = w[l + 1] * size * size;
        dskip[l] = dcat[up_len..].to_vec();
        dcur = conv::upsample2_backward(&dcat[..up_len], w[l + 1], size / 2, size / 2);
    }
    // dcur now holds the gradient of the deepest encoder output.

    for l in (0..d).rev() {
        let size = s >> l;
        let mut dout = dcur;
        if !dskip[l].is_empty() {
            for (a, b) in dout.iter_mut().zip(&dskip[l]) {
                *a += b;
            }
        }
        let dmid = conv_back(
            &mut grads,
            params.enc(l, 1),
            size,
            &cache.enc_mid[l],
            Some(&cache.enc_out[l]),
            dout,
            true,
        );
        let din = conv_back(
            &mut grads,
            params.enc(l, 0),
            size,
            &cache.enc_in[l],
            Some(&cache.enc_mid[l]),
            dmid,
            l > 0,
        );
        if l == 0 {
            break;
        }
        let mut dprev = vec![0.0; w[l - 1] * 4 * size * size];
        conv::pool_channels_backward(
            &cache.enc_out[l - 1],
            w[l - 1],
            2 * size,
            2 * size,
            PoolKind::Max,
            &din,
            &mut dprev,
        );
        dcur = dprev;
    }
    Ok(grads)
}

/// Multiscale logits, finest branch first, for both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// Column logits; branch `m` has length `S / 2^m`.
    pub x: Vec<Tensor>,
    /// Row logits; branch `m` has length `S / 2^m`.
    pub y: Vec<Tensor>,
}

impl HeadOutput {
    pub fn zeros_like(&self) -> Self {
        let z = |v: &[Tensor]| v.iter().map(|t| Tensor::zeros(t.shape())).collect();
        HeadOutput {
            x: z(&self.x),
            y: z(&self.y),
        }
    }
}

fn pooled_chain(featmap: &Tensor, pool: PoolKind, scales: usize) -> Result<Vec<Tensor>> {
    let (h, w) = featmap.dims2()?;
    if scales == 0 || h % (1 << (scales - 1)) != 0 || w % (1 << (scales - 1)) != 0 {
        return Err(Error::Shape(format!(
            "{scales} scales do not divide a {h}x{w} feature map"
        )));
    }
    let mut maps = vec![featmap.clone()];
    for _ in 1..scales {
        let next = pool2d(maps.last().expect("non-empty"), pool)?;
        maps.push(next);
    }
    Ok(maps)
}

/// Pools the feature map into `scales` branches and reduces each per axis.
pub fn head(
    featmap: &Tensor,
    pool: PoolKind,
    reduce: ReduceKind,
    scales: usize,
) -> Result<HeadOutput> {
    let maps = pooled_chain(featmap, pool, scales)?;
    let mut x = Vec::with_capacity(scales);
    let mut y = Vec::with_capacity(scales);
    for m in &maps {
        let (xs, ys) = reduce_axes(m, reduce)?;
        x.push(xs);
        y.push(ys);
    }
    Ok(HeadOutput { x, y })
}

/// Gradient of [`head`] with respect to the feature map.
pub fn head_backward(featmap: &Tensor, cfg: &HeadConfig, upstream: &HeadOutput) -> Result<Tensor> {
    let maps = pooled_chain(featmap, cfg.pool, cfg.scales)?;
    if upstream.x.len() != cfg.scales || upstream.y.len() != cfg.scales {
        return Err(Error::Shape("head gradient branch count mismatch".into()));
    }
    // Walk from the coarsest branch back to the full-resolution map.
    let mut acc: Option<Tensor> = None;
    for m in (0..cfg.scales).rev() {
        let mut g = reduce_axes_backward(cfg.reduce, &upstream.x[m], &upstream.y[m])?;
        if g.shape() != maps[m].shape() {
            return Err(Error::Shape(format!(
                "head gradient branch {m} has wrong length"
            )));
        }
        if let Some(coarser) = acc.take() {
            let routed = pool2d_backward(&maps[m], cfg.pool, &coarser)?;
            g.axpy(1.0, &routed)?;
        }
        acc = Some(g);
    }
    Ok(acc.expect("at least one scale"))
}

/// Full reverse pass from head-shaped gradients to parameter gradients.
pub fn backward(
    params: &NetParams,
    cache: &ForwardCache,
    upstream: &HeadOutput,
) -> Result<NetParams> {
    let dfeat = head_backward(&cache.featmap, &params.config.head, upstream)?;
    backward_featmap(params, cache, &dfeat)
}

/// Normalized `(x, y)` from the finest-scale argmax of each axis, at pixel
/// centres: `(index + 0.5) / S`.
pub fn predict(out: &HeadOutput) -> Result<(f64, f64)> {
    let decode = |v: Option<&Tensor>| -> Result<f64> {
        let t = v.ok_or(Error::EmptyInput("head output has no branches"))?;
        let i = t.argmax().ok_or(Error::EmptyInput("empty logit vector"))?;
        Ok((i as f64 + 0.5) / t.len() as f64)
    };
    Ok((decode(out.x.first())?, decode(out.y.first())?))
}
