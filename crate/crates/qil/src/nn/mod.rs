//! Minimal dense-tensor network layers with hand-written forward and
//! backward passes.
//!
//! Layers read their tensors from a central named [`ParamStore`], which
//! keeps checkpointing and the optimizer's parameter groups trivial.
//! Convolution and fully-connected layers optionally carry a weight and
//! an input-activation quantizer; when the network's `quant_active` flag
//! is set, the layer convolves the quantized views and backpropagation
//! routes through the straight-through quantizer gradients, producing
//! scalar gradients for every interval parameter.
//!
//! Forward passes are pure; batch-norm running statistics are folded in
//! only by the explicit [`Network::apply_bn_updates`] call.

pub mod kernels;
mod lenet;
mod loss;
#[cfg(test)]
pub(crate) mod testutil;

pub use lenet::{lenet_q, LenetOptions};
pub use loss::{mse_logits, softmax_cross_entropy};

use crate::error::{QilError, Result};
use crate::quantizer::{
    backward_activation, backward_weight, quantize, IntervalParams, QuantizerSpec,
};
use crate::tensor::{matmul, matmul_into, transpose, Tensor};
use indexmap::IndexMap;
use kernels::{col2im, conv_out_dim, im2col, maxpool};
use rayon::prelude::*;

/// Batch-norm momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Samples per parallel work unit; fixed so that results do not depend on
/// the thread count.
const BATCH_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Role of a parameter, driving optimizer grouping and clamping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamClass {
    Weight,
    Bias,
    BnGain,
    BnBias,
    BnStat,
    QuantCenter,
    QuantRadius,
    QuantGamma,
}

impl ParamClass {
    pub fn is_quantizer(self) -> bool {
        matches!(
            self,
            ParamClass::QuantCenter | ParamClass::QuantRadius | ParamClass::QuantGamma
        )
    }

    /// Parameters receiving gradient updates (running stats are not
    /// optimized).
    pub fn is_trainable(self) -> bool {
        self != ParamClass::BnStat
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub class: ParamClass,
}

/// Named tensor store holding every parameter of a network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, class: ParamClass, value: Tensor) {
        let prev = self.entries.insert(name.to_string(), Param { value, class });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn class(&self, name: &str) -> ParamClass {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .class
    }

    pub fn scalar(&self, name: &str) -> f64 {
        self.get(name).item()
    }

    pub fn set_scalar(&mut self, name: &str, v: f64) {
        *self.get_mut(name) = Tensor::scalar(v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Gradients keyed by parameter name (scalars as rank-0 tensors).
pub type GradStore = IndexMap<String, Tensor>;

/// Quantizer attachment on a conv/fc layer: the bit-width specs plus the
/// gamma-trainability choice. The interval scalars themselves live in the
/// parameter store under `<layer>.wq.*` / `<layer>.aq.*`.
#[derive(Clone, Debug)]
pub struct QuantSlots {
    pub weight: QuantizerSpec,
    pub activation: QuantizerSpec,
    pub gamma_trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub quant: Option<QuantSlots>,
}

#[derive(Clone, Debug)]
pub struct FcLayer {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub quant: Option<QuantSlots>,
}

#[derive(Clone, Debug)]
pub struct BnLayer {
    pub name: String,
    pub features: usize,
    /// true: normalize (N,C,H,W) per channel; false: (N,F) per feature.
    pub spatial: bool,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d(ConvLayer),
    FullyConnected(FcLayer),
    BatchNorm(BnLayer),
    ReLU,
    MaxPool(usize),
    Flatten,
}

impl Layer {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv2d(c) => Some(&c.name),
            Layer::FullyConnected(f) => Some(&f.name),
            Layer::BatchNorm(b) => Some(&b.name),
            _ => None,
        }
    }
}

/// Per-quantized-layer level statistics collected during a forward pass.
#[derive(Clone, Debug)]
pub struct QuantStat {
    pub layer: String,
    pub zero_levels: usize,
    pub total: usize,
}

enum LayerCache {
    Conv {
        /// Input before activation quantization, (N,C,H,W).
        input: Tensor,
        /// im2col patches of the convolved (possibly quantized) input,
        /// one `(c*k*k) x (ho*wo)` block per sample.
        cols: Vec<f64>,
        /// Weight view actually convolved.
        w_used: Tensor,
        out_hw: (usize, usize),
    },
    Fc {
        input: Tensor,
        /// Input view actually multiplied, (N,I).
        x_used: Tensor,
        w_used: Tensor,
    },
    Bn {
        input: Tensor,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        mask: Vec<bool>,
    },
    Pool {
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
}

/// Everything a backward pass needs, plus instrumentation.
pub struct FwdCache {
    pub mode: Mode,
    batch: usize,
    caches: Vec<LayerCache>,
    /// Batch statistics per batch-norm layer, applied to the running
    /// estimates by [`Network::apply_bn_updates`].
    bn_batch_stats: Vec<(String, Vec<f64>, Vec<f64>, usize)>,
    /// Activation-quantizer level stats per quantized layer.
    pub act_stats: Vec<QuantStat>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub params: ParamStore,
    /// When false, quantizer slots are ignored and the network runs at
    /// full precision.
    pub quant_active: bool,
}

impl Network {
    pub fn new(layers: Vec<Layer>, params: ParamStore) -> Self {
        Network {
            layers,
            params,
            quant_active: false,
        }
    }

    /// Names of layers carrying quantizer slots, in network order.
    pub fn quantized_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv2d(c) if c.quant.is_some() => Some(c.name.clone()),
                Layer::FullyConnected(f) if f.quant.is_some() => Some(f.name.clone()),
                _ => None,
            })
            .collect()
    }

    /// Interval parameters of one quantizer, read from the store.
    pub fn interval_params(&self, layer: &str, weight: bool) -> IntervalParams {
        let prefix = if weight { "wq" } else { "aq" };
        let gamma_trainable = if weight {
            self.layers
                .iter()
                .find_map(|l| match l {
                    Layer::Conv2d(c) if c.name == layer => {
                        c.quant.as_ref().map(|q| q.gamma_trainable)
                    }
                    Layer::FullyConnected(f) if f.name == layer => {
                        f.quant.as_ref().map(|q| q.gamma_trainable)
                    }
                    _ => None,
                })
                .unwrap_or(false)
        } else {
            false
        };
        IntervalParams {
            center: self.params.scalar(&format!("{layer}.{prefix}.c")),
            radius: self.params.scalar(&format!("{layer}.{prefix}.d")),
            gamma: if weight {
                self.params.scalar(&format!("{layer}.{prefix}.gamma"))
            } else {
                1.0
            },
            gamma_trainable,
        }
    }

    /// The weight-quantizer spec of a named layer, if it has one.
    pub fn weight_quant_spec(&self, layer: &str) -> Option<QuantizerSpec> {
        self.layers.iter().find_map(|l| match l {
            Layer::Conv2d(c) if c.name == layer => c.quant.as_ref().map(|q| q.weight),
            Layer::FullyConnected(f) if f.name == layer => f.quant.as_ref().map(|q| q.weight),
            _ => None,
        })
    }

    /// The activation-quantizer spec of a named layer, if it has one.
    pub fn act_quant_spec(&self, layer: &str) -> Option<QuantizerSpec> {
        self.layers.iter().find_map(|l| match l {
            Layer::Conv2d(c) if c.name == layer => c.quant.as_ref().map(|q| q.activation),
            Layer::FullyConnected(f) if f.name == layer => f.quant.as_ref().map(|q| q.activation),
            _ => None,
        })
    }

    /// Raw inputs that reached each quantizer-carrying layer in the
    /// given forward pass (pre-quantization values).
    pub fn quant_layer_inputs(&self, cache: &FwdCache) -> IndexMap<String, Vec<f64>> {
        let mut out = IndexMap::new();
        for (layer, lc) in self.layers.iter().zip(cache.caches.iter()) {
            match (layer, lc) {
                (Layer::Conv2d(c), LayerCache::Conv { input, .. }) if c.quant.is_some() => {
                    out.insert(c.name.clone(), input.data().to_vec());
                }
                (Layer::FullyConnected(f), LayerCache::Fc { input, .. }) if f.quant.is_some() => {
                    out.insert(f.name.clone(), input.data().to_vec());
                }
                _ => {}
            }
        }
        out
    }

    /// Re-target every quantizer slot to new bit widths, keeping the
    /// interval parameters (progressive finetuning inherits them).
    pub fn set_bits(&mut self, n_x: u32, n_w: u32) -> Result<()> {
        let wspec = QuantizerSpec::weight(n_w)?;
        let aspec = QuantizerSpec::activation(n_x)?;
        for layer in &mut self.layers {
            let slots = match layer {
                Layer::Conv2d(c) => c.quant.as_mut(),
                Layer::FullyConnected(f) => f.quant.as_mut(),
                _ => None,
            };
            if let Some(q) = slots {
                q.weight = wspec;
                q.activation = aspec;
            }
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<(Tensor, FwdCache)> {
        let n = *batch
            .shape()
            .first()
            .ok_or_else(|| QilError::ShapeMismatch("batch must have a leading dim".into()))?;
        let mut cache = FwdCache {
            mode,
            batch: n,
            caches: Vec::with_capacity(self.layers.len()),
            bn_batch_stats: Vec::new(),
            act_stats: Vec::new(),
        };
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d(c) => self.fwd_conv(c, x, &mut cache)?,
                Layer::FullyConnected(f) => self.fwd_fc(f, x, &mut cache)?,
                Layer::BatchNorm(b) => self.fwd_bn(b, x, mode, &mut cache)?,
                Layer::ReLU => {
                    let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                    let y = x.map(|v| v.max(0.0));
                    cache.caches.push(LayerCache::Relu { mask });
                    y
                }
                Layer::MaxPool(size) => self.fwd_pool(*size, x, &mut cache)?,
                Layer::Flatten => {
                    let in_shape = x.shape().to_vec();
                    let feat = in_shape[1..].iter().product();
                    cache.caches.push(LayerCache::Flatten { in_shape });
                    x.reshape(&[n, feat])
                }
            };
        }
        Ok((x, cache))
    }

    /// Gradients for every trainable parameter, including the quantizer
    /// scalars of each quantized layer.
    pub fn backward(&self, cache: &FwdCache, grad_logits: &Tensor) -> Result<GradStore> {
        if cache.mode != Mode::Train {
            return Err(QilError::State("backward requires a Train-mode cache".into()));
        }
        if cache.caches.len() != self.layers.len() {
            return Err(QilError::State("cache does not match network".into()));
        }
        if grad_logits.shape().first() != Some(&cache.batch) {
            return Err(QilError::State(format!(
                "grad batch {:?} does not match cache batch {}",
                grad_logits.shape(),
                cache.batch
            )));
        }
        let mut grads = GradStore::new();
        let mut g = grad_logits.clone();
        for (layer, lc) in self.layers.iter().zip(cache.caches.iter()).rev() {
            g = match (layer, lc) {
                (Layer::Conv2d(c), LayerCache::Conv { input, cols, w_used, out_hw }) => {
                    self.bwd_conv(c, input, cols, w_used, *out_hw, g, &mut grads)?
                }
                (Layer::FullyConnected(f), LayerCache::Fc { input, x_used, w_used }) => {
                    self.bwd_fc(f, input, x_used, w_used, g, &mut grads)?
                }
                (Layer::BatchNorm(b), LayerCache::Bn { input, mean, inv_std }) => {
                    self.bwd_bn(b, input, mean, inv_std, g, &mut grads)?
                }
                (Layer::ReLU, LayerCache::Relu { mask }) => {
                    let mut gd = g;
                    for (v, &m) in gd.data_mut().iter_mut().zip(mask.iter()) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                    gd
                }
                (Layer::MaxPool(_), LayerCache::Pool { in_shape, argmax }) => {
                    let mut gx = Tensor::zeros(in_shape);
                    for (o, &idx) in argmax.iter().enumerate() {
                        gx.data_mut()[idx] += g.data()[o];
                    }
                    gx
                }
                (Layer::Flatten, LayerCache::Flatten { in_shape }) => g.reshape(in_shape),
                _ => return Err(QilError::State("cache/layer kind mismatch".into())),
            };
        }
        Ok(grads)
    }

    /// Fold the batch statistics recorded in `cache` into the running
    /// estimates. The only mutation batch norm ever performs.
    pub fn apply_bn_updates(&mut self, cache: &FwdCache) {
        for (name, mean, var, m) in &cache.bn_batch_stats {
            let m = *m as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let rm = self.params.get_mut(&format!("{name}.running_mean"));
            for (r, &b) in rm.data_mut().iter_mut().zip(mean.iter()) {
                *r += BN_MOMENTUM * (b - *r);
            }
            let rv = self.params.get_mut(&format!("{name}.running_var"));
            for (r, &b) in rv.data_mut().iter_mut().zip(var.iter()) {
                *r += BN_MOMENTUM * (b * unbias - *r);
            }
        }
    }

    fn quant_views(
        &self,
        name: &str,
        slots: &QuantSlots,
        w: &Tensor,
        x: &Tensor,
        cache: &mut FwdCache,
    ) -> (Tensor, Tensor) {
        let wq = quantize(w, &self.interval_params(name, true), &slots.weight);
        let xq = quantize(x, &self.interval_params(name, false), &slots.activation);
        cache.act_stats.push(QuantStat {
            layer: name.to_string(),
            zero_levels: xq.levels_int.iter().filter(|&&k| k == 0).count(),
            total: xq.len(),
        });
        (wq.real_view(), xq.real_view())
    }

    fn fwd_conv(&self, c: &ConvLayer, x: Tensor, cache: &mut FwdCache) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 || shape[1] != c.in_ch {
            return Err(QilError::ShapeMismatch(format!(
                "{}: expected (N,{},H,W), got {:?}",
                c.name, c.in_ch, shape
            )));
        }
        let (n, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let ho = conv_out_dim(h, c.kernel, c.stride, c.padding);
        let wo = conv_out_dim(w, c.kernel, c.stride, c.padding);
        let kdim = ch * c.kernel * c.kernel;
        let pdim = ho * wo;

        let weight = self.params.get(&format!("{}.weight", c.name));
        let bias = self.params.get(&format!("{}.bias", c.name));
        let (w_used, x_used) = match (&c.quant, self.quant_active) {
            (Some(slots), true) => self.quant_views(&c.name, slots, weight, &x, cache),
            _ => (weight.clone(), x.clone()),
        };

        let mut cols = vec![0.0; n * kdim * pdim];
        let mut out = Tensor::zeros(&[n, c.out_ch, ho, wo]);
        let wm = w_used.data();
        let bs = bias.data();
        let sample_in = ch * h * w;
        let sample_cols = kdim * pdim;
        let sample_out = c.out_ch * pdim;
        cols.par_chunks_mut(BATCH_CHUNK * sample_cols)
            .zip(out.data_mut().par_chunks_mut(BATCH_CHUNK * sample_out))
            .zip(x_used.data().par_chunks(BATCH_CHUNK * sample_in))
            .for_each(|((cchunk, ochunk), xchunk)| {
                for si in 0..xchunk.len() / sample_in {
                    let cs = &mut cchunk[si * sample_cols..(si + 1) * sample_cols];
                    im2col(
                        &xchunk[si * sample_in..(si + 1) * sample_in],
                        ch,
                        h,
                        w,
                        c.kernel,
                        c.stride,
                        c.padding,
                        cs,
                    );
                    let os = &mut ochunk[si * sample_out..(si + 1) * sample_out];
                    matmul_into(os, wm, cs, c.out_ch, kdim, pdim);
                    for oc in 0..c.out_ch {
                        let b = bs[oc];
                        for v in &mut os[oc * pdim..(oc + 1) * pdim] {
                            *v += b;
                        }
                    }
                }
            });
        cache.caches.push(LayerCache::Conv {
            input: x,
            cols,
            w_used,
            out_hw: (ho, wo),
        });
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn bwd_conv(
        &self,
        c: &ConvLayer,
        input: &Tensor,
        cols: &[f64],
        w_used: &Tensor,
        out_hw: (usize, usize),
        grad_out: Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let in_shape = input.shape().to_vec();
        let (n, ch, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (ho, wo) = out_hw;
        let kdim = ch * c.kernel * c.kernel;
        let pdim = ho * wo;
        let sample_in = ch * h * w;
        let sample_cols = kdim * pdim;
        let sample_out = c.out_ch * pdim;

        // bias gradient
        let god = grad_out.data();
        let mut gb = vec![0.0; c.out_ch];
        for si in 0..n {
            for oc in 0..c.out_ch {
                let base = si * sample_out + oc * pdim;
                gb[oc] += god[base..base + pdim].iter().sum::<f64>();
            }
        }

        let wt = transpose(w_used.data(), c.out_ch, kdim); // kdim x out_ch
        let mut grad_x_used = Tensor::zeros(&in_shape);

        // weight partials per chunk, reduced in chunk order afterwards
        let partials: Vec<Vec<f64>> = grad_x_used
            .data_mut()
            .par_chunks_mut(BATCH_CHUNK * sample_in)
            .zip(god.par_chunks(BATCH_CHUNK * sample_out))
            .zip(cols.par_chunks(BATCH_CHUNK * sample_cols))
            .map(|((gxchunk, gochunk), cchunk)| {
                let mut gw = vec![0.0; c.out_ch * kdim];
                let mut gcols = vec![0.0; sample_cols];
                for si in 0..gochunk.len() / sample_out {
                    let go = &gochunk[si * sample_out..(si + 1) * sample_out];
                    let cs = &cchunk[si * sample_cols..(si + 1) * sample_cols];
                    // grad_w += go (oc x p) * cols^T (p x k)
                    let cols_t = transpose(cs, kdim, pdim);
                    let gw_s = matmul(go, &cols_t, c.out_ch, pdim, kdim);
                    for (a, b) in gw.iter_mut().zip(gw_s.iter()) {
                        *a += b;
                    }
                    // grad_cols = w^T (k x oc) * go (oc x p)
                    matmul_into(&mut gcols, &wt, go, kdim, c.out_ch, pdim);
                    col2im(
                        &gcols,
                        ch,
                        h,
                        w,
                        c.kernel,
                        c.stride,
                        c.padding,
                        &mut gxchunk[si * sample_in..(si + 1) * sample_in],
                    );
                }
                gw
            })
            .collect();
        let mut gw = vec![0.0; c.out_ch * kdim];
        for p in partials {
            for (a, b) in gw.iter_mut().zip(p.iter()) {
                *a += b;
            }
        }
        let wshape = [c.out_ch, ch, c.kernel, c.kernel];
        let grad_w_used = Tensor::from_vec(&wshape, gw);

        grads.insert(format!("{}.bias", c.name), Tensor::from_vec(&[c.out_ch], gb));
        let upstream = self.route_quant_grads(
            c.name.as_str(),
            &c.quant,
            input,
            grad_w_used,
            grad_x_used,
            grads,
        );
        Ok(upstream)
    }

    fn fwd_fc(&self, f: &FcLayer, x: Tensor, cache: &mut FwdCache) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        if shape.len() != 2 || shape[1] != f.in_features {
            return Err(QilError::ShapeMismatch(format!(
                "{}: expected (N,{}), got {:?}",
                f.name, f.in_features, shape
            )));
        }
        let n = shape[0];
        let weight = self.params.get(&format!("{}.weight", f.name));
        let bias = self.params.get(&format!("{}.bias", f.name));
        let (w_used, x_used) = match (&f.quant, self.quant_active) {
            (Some(slots), true) => self.quant_views(&f.name, slots, weight, &x, cache),
            _ => (weight.clone(), x.clone()),
        };
        let wt = transpose(w_used.data(), f.out_features, f.in_features);
        let mut out = Tensor::zeros(&[n, f.out_features]);
        matmul_into(
            out.data_mut(),
            x_used.data(),
            &wt,
            n,
            f.in_features,
            f.out_features,
        );
        let bs = bias.data();
        for row in out.data_mut().chunks_mut(f.out_features) {
            for (v, &b) in row.iter_mut().zip(bs.iter()) {
                *v += b;
            }
        }
        cache.caches.push(LayerCache::Fc {
            input: x,
            x_used,
            w_used,
        });
        Ok(out)
    }

    fn bwd_fc(
        &self,
        f: &FcLayer,
        input: &Tensor,
        x_used: &Tensor,
        w_used: &Tensor,
        grad_out: Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let n = input.shape()[0];
        let (o, i) = (f.out_features, f.in_features);
        // grad_b
        let mut gb = vec![0.0; o];
        for row in grad_out.data().chunks(o) {
            for (a, &b) in gb.iter_mut().zip(row.iter()) {
                *a += b;
            }
        }
        // grad_w = go^T (o x n) * x_used (n x i)
        let got = transpose(grad_out.data(), n, o);
        let gw = matmul(&got, x_used.data(), o, n, i);
        let grad_w_used = Tensor::from_vec(&[o, i], gw);
        // grad_x_used = go (n x o) * w (o x i)
        let gx = matmul(grad_out.data(), w_used.data(), n, o, i);
        let grad_x_used = Tensor::from_vec(&[n, i], gx);

        grads.insert(format!("{}.bias", f.name), Tensor::from_vec(&[o], gb));
        let upstream = self.route_quant_grads(
            f.name.as_str(),
            &f.quant,
            input,
            grad_w_used,
            grad_x_used,
            grads,
        );
        Ok(upstream)
    }

    /// Chain weight/activation gradients through the layer's quantizers
    /// (when active), recording interval-parameter gradients.
    fn route_quant_grads(
        &self,
        name: &str,
        quant: &Option<QuantSlots>,
        input: &Tensor,
        grad_w_used: Tensor,
        grad_x_used: Tensor,
        grads: &mut GradStore,
    ) -> Tensor {
        match (quant, self.quant_active) {
            (Some(slots), true) => {
                let weight = self.params.get(&format!("{name}.weight"));
                let wq = backward_weight(
                    &grad_w_used,
                    weight,
                    &self.interval_params(name, true),
                    &slots.weight,
                );
                grads.insert(format!("{name}.weight"), wq.grad_input);
                grads.insert(format!("{name}.wq.c"), Tensor::scalar(wq.grad_center));
                grads.insert(format!("{name}.wq.d"), Tensor::scalar(wq.grad_radius));
                grads.insert(format!("{name}.wq.gamma"), Tensor::scalar(wq.grad_gamma));
                let aq = backward_activation(
                    &grad_x_used,
                    input,
                    &self.interval_params(name, false),
                );
                grads.insert(format!("{name}.aq.c"), Tensor::scalar(aq.grad_center));
                grads.insert(format!("{name}.aq.d"), Tensor::scalar(aq.grad_radius));
                aq.grad_input
            }
            _ => {
                grads.insert(format!("{name}.weight"), grad_w_used);
                grad_x_used
            }
        }
    }

    fn fwd_bn(&self, b: &BnLayer, x: Tensor, mode: Mode, cache: &mut FwdCache) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let (outer, chans, inner) = bn_dims(b, &shape)?;
        let gain = self.params.get(&format!("{}.gamma", b.name)).data().to_vec();
        let bias = self.params.get(&format!("{}.beta", b.name)).data().to_vec();

        let (mean, var) = match mode {
            Mode::Train => bn_batch_stats(x.data(), outer, chans, inner),
            Mode::Eval => (
                self.params
                    .get(&format!("{}.running_mean", b.name))
                    .data()
                    .to_vec(),
                self.params
                    .get(&format!("{}.running_var", b.name))
                    .data()
                    .to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut y = Tensor::zeros(&shape);
        {
            let xd = x.data();
            let yd = y.data_mut();
            for n in 0..outer {
                for c in 0..chans {
                    let base = (n * chans + c) * inner;
                    let (m, s, g, be) = (mean[c], inv_std[c], gain[c], bias[c]);
                    for i in 0..inner {
                        yd[base + i] = (xd[base + i] - m) * s * g + be;
                    }
                }
            }
        }
        if mode == Mode::Train {
            cache
                .bn_batch_stats
                .push((b.name.clone(), mean.clone(), var.clone(), outer * inner));
        }
        cache.caches.push(LayerCache::Bn {
            input: x,
            mean,
            inv_std,
        });
        Ok(y)
    }

    fn bwd_bn(
        &self,
        b: &BnLayer,
        input: &Tensor,
        mean: &[f64],
        inv_std: &[f64],
        grad_out: Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let shape = input.shape().to_vec();
        let (outer, chans, inner) = bn_dims(b, &shape)?;
        let m = (outer * inner) as f64;
        let gain = self.params.get(&format!("{}.gamma", b.name)).data();
        let xd = input.data();
        let god = grad_out.data();

        let mut dgain = vec![0.0; chans];
        let mut dbias = vec![0.0; chans];
        let mut dvar = vec![0.0; chans];
        let mut dmean = vec![0.0; chans];
        let mut sum_xm = vec![0.0; chans]; // sum of (x - mean)
        for n in 0..outer {
            for c in 0..chans {
                let base = (n * chans + c) * inner;
                let (mu, s) = (mean[c], inv_std[c]);
                for i in 0..inner {
                    let xm = xd[base + i] - mu;
                    let go = god[base + i];
                    dgain[c] += go * xm * s;
                    dbias[c] += go;
                    let dxhat = go * gain[c];
                    dvar[c] += dxhat * xm * (-0.5) * s * s * s;
                    dmean[c] += -dxhat * s;
                    sum_xm[c] += xm;
                }
            }
        }
        for c in 0..chans {
            dmean[c] += dvar[c] * (-2.0) * sum_xm[c] / m;
        }
        let mut gx = Tensor::zeros(&shape);
        {
            let gxd = gx.data_mut();
            for n in 0..outer {
                for c in 0..chans {
                    let base = (n * chans + c) * inner;
                    let (mu, s, g) = (mean[c], inv_std[c], gain[c]);
                    for i in 0..inner {
                        let xm = xd[base + i] - mu;
                        gxd[base + i] =
                            god[base + i] * g * s + dvar[c] * 2.0 * xm / m + dmean[c] / m;
                    }
                }
            }
        }
        grads.insert(format!("{}.gamma", b.name), Tensor::from_vec(&[chans], dgain));
        grads.insert(format!("{}.beta", b.name), Tensor::from_vec(&[chans], dbias));
        Ok(gx)
    }

    fn fwd_pool(&self, size: usize, x: Tensor, cache: &mut FwdCache) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 {
            return Err(QilError::ShapeMismatch(format!(
                "maxpool expects (N,C,H,W), got {:?}",
                shape
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = (h / size, w / size);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let sample_in = c * h * w;
        let sample_out = c * ho * wo;
        {
            let xd = x.data();
            let od = out.data_mut();
            for si in 0..n {
                let mut idx = vec![0usize; sample_out];
                maxpool(
                    &xd[si * sample_in..(si + 1) * sample_in],
                    c,
                    h,
                    w,
                    size,
                    &mut od[si * sample_out..(si + 1) * sample_out],
                    &mut idx,
                );
                for (k, v) in idx.into_iter().enumerate() {
                    argmax[si * sample_out + k] = si * sample_in + v;
                }
            }
        }
        cache.caches.push(LayerCache::Pool {
            in_shape: shape,
            argmax,
        });
        Ok(out)
    }
}

fn bn_dims(b: &BnLayer, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if b.spatial {
        if shape.len() != 4 || shape[1] != b.features {
            return Err(QilError::ShapeMismatch(format!(
                "{}: expected (N,{},H,W), got {:?}",
                b.name, b.features, shape
            )));
        }
        Ok((shape[0], shape[1], shape[2] * shape[3]))
    } else {
        if shape.len() != 2 || shape[1] != b.features {
            return Err(QilError::ShapeMismatch(format!(
                "{}: expected (N,{}), got {:?}",
                b.name, b.features, shape
            )));
        }
        Ok((shape[0], shape[1], 1))
    }
}

fn bn_batch_stats(x: &[f64], outer: usize, chans: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (outer * inner) as f64;
    let mut mean = vec![0.0; chans];
    for n in 0..outer {
        for c in 0..chans {
            let base = (n * chans + c) * inner;
            mean[c] += x[base..base + inner].iter().sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    let mut var = vec![0.0; chans];
    for n in 0..outer {
        for c in 0..chans {
            let base = (n * chans + c) * inner;
            let mu = mean[c];
            var[c] += x[base..base + inner].iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= m;
    }
    (mean, var)
}
