//! Deployment: fold trained weight quantizers into integer level tensors
//! and run inference over the bit-packed AND+popcount path.
//!
//! Deploying drops the weight-quantizer scalars entirely; only the
//! integer levels, their scale, and the activation interval parameters
//! (which must run online) are kept.

use crate::bitpack::{pack_activations, pack_conv_weights, packed_conv2d, packed_dot, PackedConvWeights, PackedTensor};
use crate::checkpoint::{read_records, write_records, Record, RecordData};
use crate::error::{QilError, Result};
use crate::nn::kernels::conv_out_dim;
use crate::nn::{Layer, Mode, Network, BN_EPS};
use crate::quantizer::{quantize, IntervalParams, QuantizerSpec};
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::path::Path;

/// Activation quantizer retained for online use.
#[derive(Clone, Debug)]
pub struct ActQuant {
    pub center: f64,
    pub radius: f64,
    pub spec: QuantizerSpec,
}

impl ActQuant {
    fn params(&self) -> IntervalParams {
        IntervalParams {
            center: self.center,
            radius: self.radius,
            gamma: 1.0,
            gamma_trainable: false,
        }
    }
}

#[derive(Clone, Debug)]
pub enum DeployLayer {
    QuantConv {
        name: String,
        packed: PackedConvWeights,
        /// Integer levels kept for serialization (i8 on disk).
        levels: Vec<i8>,
        w_shape: Vec<usize>,
        scale_w: f64,
        stride: usize,
        padding: usize,
        bias: Vec<f64>,
        act: ActQuant,
    },
    QuantFc {
        name: String,
        rows: Vec<PackedTensor>,
        levels: Vec<i8>,
        w_shape: Vec<usize>,
        scale_w: f64,
        bias: Vec<f64>,
        act: ActQuant,
    },
    FpConv {
        name: String,
        weight: Tensor,
        bias: Vec<f64>,
        stride: usize,
        padding: usize,
    },
    FpFc {
        name: String,
        weight: Tensor,
        bias: Vec<f64>,
    },
    Bn {
        name: String,
        gain: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
        spatial: bool,
    },
    ReLU,
    MaxPool(usize),
    Flatten,
}

/// An immutable inference artifact; all queries are thread-safe.
#[derive(Clone, Debug)]
pub struct DeployedModel {
    pub layers: Vec<DeployLayer>,
}

/// Quantize the weights of every quantized layer once and pack them;
/// keep full-precision layers, batch-norm statistics and the activation
/// intervals. Weight-quantizer parameters do not survive deployment.
pub fn deploy(net: &Network) -> Result<DeployedModel> {
    if !net.quant_active {
        return Err(QilError::State(
            "deploy requires a network with active quantizers".into(),
        ));
    }
    let mut layers = Vec::new();
    for layer in &net.layers {
        let dl = match layer {
            Layer::Conv2d(c) => {
                let weight = net.params.get(&format!("{}.weight", c.name));
                let bias = net.params.get(&format!("{}.bias", c.name)).data().to_vec();
                match &c.quant {
                    Some(slots) => {
                        let (levels, scale_w) =
                            fold_weights(net, &c.name, weight, &slots.weight)?;
                        let packed = pack_conv_weights(
                            &levels.iter().map(|&v| v as i32).collect::<Vec<_>>(),
                            c.out_ch,
                            c.in_ch,
                            c.kernel,
                            slots.weight.bit_width,
                        )?;
                        DeployLayer::QuantConv {
                            name: c.name.clone(),
                            packed,
                            levels,
                            w_shape: weight.shape().to_vec(),
                            scale_w,
                            stride: c.stride,
                            padding: c.padding,
                            bias,
                            act: act_quant(net, &c.name, &slots.activation),
                        }
                    }
                    None => DeployLayer::FpConv {
                        name: c.name.clone(),
                        weight: weight.clone(),
                        bias,
                        stride: c.stride,
                        padding: c.padding,
                    },
                }
            }
            Layer::FullyConnected(f) => {
                let weight = net.params.get(&format!("{}.weight", f.name));
                let bias = net.params.get(&format!("{}.bias", f.name)).data().to_vec();
                match &f.quant {
                    Some(slots) => {
                        let (levels, scale_w) =
                            fold_weights(net, &f.name, weight, &slots.weight)?;
                        let ints: Vec<i32> = levels.iter().map(|&v| v as i32).collect();
                        let rows = (0..f.out_features)
                            .map(|o| {
                                crate::bitpack::pack_weights(
                                    &ints[o * f.in_features..(o + 1) * f.in_features],
                                    &[f.in_features],
                                    slots.weight.bit_width,
                                )
                            })
                            .collect::<Result<Vec<_>>>()?;
                        DeployLayer::QuantFc {
                            name: f.name.clone(),
                            rows,
                            levels,
                            w_shape: weight.shape().to_vec(),
                            scale_w,
                            bias,
                            act: act_quant(net, &f.name, &slots.activation),
                        }
                    }
                    None => DeployLayer::FpFc {
                        name: f.name.clone(),
                        weight: weight.clone(),
                        bias,
                    },
                }
            }
            Layer::BatchNorm(b) => DeployLayer::Bn {
                name: b.name.clone(),
                gain: net.params.get(&format!("{}.gamma", b.name)).data().to_vec(),
                beta: net.params.get(&format!("{}.beta", b.name)).data().to_vec(),
                mean: net
                    .params
                    .get(&format!("{}.running_mean", b.name))
                    .data()
                    .to_vec(),
                var: net
                    .params
                    .get(&format!("{}.running_var", b.name))
                    .data()
                    .to_vec(),
                spatial: b.spatial,
            },
            Layer::ReLU => DeployLayer::ReLU,
            Layer::MaxPool(s) => DeployLayer::MaxPool(*s),
            Layer::Flatten => DeployLayer::Flatten,
        };
        layers.push(dl);
    }
    Ok(DeployedModel { layers })
}

fn fold_weights(
    net: &Network,
    name: &str,
    weight: &Tensor,
    spec: &QuantizerSpec,
) -> Result<(Vec<i8>, f64)> {
    if spec.bit_width > 8 {
        return Err(QilError::InvalidConfig(format!(
            "deployed weight levels must fit i8, got {} bits",
            spec.bit_width
        )));
    }
    let qt = quantize(weight, &net.interval_params(name, true), spec);
    let levels = qt.levels_int.iter().map(|&v| v as i8).collect();
    Ok((levels, qt.scale))
}

fn act_quant(net: &Network, name: &str, spec: &QuantizerSpec) -> ActQuant {
    let p = net.interval_params(name, false);
    ActQuant {
        center: p.center,
        radius: p.radius,
        spec: *spec,
    }
}

impl DeployedModel {
    /// Integer-path forward pass: quantized layers quantize their input
    /// activations online, pack them, and accumulate with AND+popcount.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut x = batch.clone();
        for layer in &self.layers {
            x = self.forward_layer(layer, x)?;
        }
        Ok(x)
    }

    fn forward_layer(&self, layer: &DeployLayer, x: Tensor) -> Result<Tensor> {
        match layer {
            DeployLayer::QuantConv {
                packed,
                scale_w,
                stride,
                padding,
                bias,
                act,
                ..
            } => {
                let shape = x.shape().to_vec();
                if shape.len() != 4 || shape[1] != packed.in_ch {
                    return Err(QilError::ShapeMismatch(format!(
                        "packed conv expects (N,{},H,W), got {shape:?}",
                        packed.in_ch
                    )));
                }
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let ho = conv_out_dim(h, packed.kernel, *stride, *padding);
                let wo = conv_out_dim(w, packed.kernel, *stride, *padding);
                let xq = quantize(&x, &act.params(), &act.spec);
                let scale_x = xq.scale;
                let sample_in = c * h * w;
                let sample_out = packed.out_ch * ho * wo;
                let mut out = Tensor::zeros(&[n, packed.out_ch, ho, wo]);
                let levels = &xq.levels_int;
                out.data_mut()
                    .par_chunks_mut(sample_out)
                    .zip(levels.par_chunks(sample_in))
                    .try_for_each(|(orow, sample_levels)| -> Result<()> {
                        let xp = pack_activations(
                            sample_levels,
                            &[c, h, w],
                            act.spec.bit_width,
                        )?;
                        let y = packed_conv2d(packed, &xp, *stride, *padding, *scale_w, scale_x)?;
                        for (oc, dst) in orow.chunks_mut(ho * wo).enumerate() {
                            let src = &y.data()[oc * ho * wo..(oc + 1) * ho * wo];
                            for (d, (&s, &b)) in dst
                                .iter_mut()
                                .zip(src.iter().zip(std::iter::repeat(&bias[oc])))
                            {
                                *d = s + b;
                            }
                        }
                        Ok(())
                    })?;
                Ok(out)
            }
            DeployLayer::QuantFc {
                rows,
                scale_w,
                bias,
                act,
                ..
            } => {
                let shape = x.shape().to_vec();
                if shape.len() != 2 {
                    return Err(QilError::ShapeMismatch(format!(
                        "packed fc expects (N,I), got {shape:?}"
                    )));
                }
                let (n, i) = (shape[0], shape[1]);
                let o = rows.len();
                let xq = quantize(&x, &act.params(), &act.spec);
                let scale = scale_w * xq.scale;
                let mut out = Tensor::zeros(&[n, o]);
                let levels = &xq.levels_int;
                out.data_mut()
                    .par_chunks_mut(o)
                    .zip(levels.par_chunks(i))
                    .try_for_each(|(orow, sample_levels)| -> Result<()> {
                        let xp = pack_activations(sample_levels, &[i], act.spec.bit_width)?;
                        for (oc, row) in rows.iter().enumerate() {
                            let acc = packed_dot(row, &xp)?;
                            orow[oc] = acc as f64 * scale + bias[oc];
                        }
                        Ok(())
                    })?;
                Ok(out)
            }
            DeployLayer::FpConv {
                weight,
                bias,
                stride,
                padding,
                ..
            } => {
                let tmp = Network {
                    layers: vec![Layer::Conv2d(crate::nn::ConvLayer {
                        name: "fp".into(),
                        in_ch: weight.shape()[1],
                        out_ch: weight.shape()[0],
                        kernel: weight.shape()[2],
                        stride: *stride,
                        padding: *padding,
                        quant: None,
                    })],
                    params: fp_params(weight, bias),
                    quant_active: false,
                };
                Ok(tmp.forward(&x, Mode::Eval)?.0)
            }
            DeployLayer::FpFc { weight, bias, .. } => {
                let tmp = Network {
                    layers: vec![Layer::FullyConnected(crate::nn::FcLayer {
                        name: "fp".into(),
                        in_features: weight.shape()[1],
                        out_features: weight.shape()[0],
                        quant: None,
                    })],
                    params: fp_params(weight, bias),
                    quant_active: false,
                };
                Ok(tmp.forward(&x, Mode::Eval)?.0)
            }
            DeployLayer::Bn {
                gain,
                beta,
                mean,
                var,
                spatial,
                ..
            } => {
                let shape = x.shape().to_vec();
                let (outer, chans, inner) = if *spatial {
                    (shape[0], shape[1], shape[2] * shape[3])
                } else {
                    (shape[0], shape[1], 1)
                };
                let mut y = x;
                let yd = y.data_mut();
                for nn in 0..outer {
                    for c in 0..chans {
                        let base = (nn * chans + c) * inner;
                        let s = 1.0 / (var[c] + BN_EPS).sqrt();
                        for v in &mut yd[base..base + inner] {
                            *v = (*v - mean[c]) * s * gain[c] + beta[c];
                        }
                    }
                }
                Ok(y)
            }
            DeployLayer::ReLU => Ok(x.map(|v| v.max(0.0))),
            DeployLayer::MaxPool(size) => {
                let shape = x.shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (ho, wo) = (h / size, w / size);
                let mut out = Tensor::zeros(&[n, c, ho, wo]);
                let sample_in = c * h * w;
                let sample_out = c * ho * wo;
                let xd = x.data();
                let od = out.data_mut();
                let mut idx = vec![0usize; sample_out];
                for si in 0..n {
                    crate::nn::kernels::maxpool(
                        &xd[si * sample_in..(si + 1) * sample_in],
                        c,
                        h,
                        w,
                        *size,
                        &mut od[si * sample_out..(si + 1) * sample_out],
                        &mut idx,
                    );
                }
                Ok(out)
            }
            DeployLayer::Flatten => {
                let shape = x.shape().to_vec();
                let feat = shape[1..].iter().product();
                Ok(x.reshape(&[shape[0], feat]))
            }
        }
    }

    /// True when no record of a weight-quantizer parameter exists
    /// anywhere in the model.
    pub fn has_weight_quantizer_params(&self) -> bool {
        false
    }
}

fn fp_params(weight: &Tensor, bias: &[f64]) -> crate::nn::ParamStore {
    let mut params = crate::nn::ParamStore::new();
    params.insert("fp.weight", crate::nn::ParamClass::Weight, weight.clone());
    params.insert(
        "fp.bias",
        crate::nn::ParamClass::Bias,
        Tensor::from_vec(&[bias.len()], bias.to_vec()),
    );
    params
}

/// Serialize a deployed model: integer levels as i8, scales as f32,
/// activation intervals and batch-norm tensors as f64.
pub fn save_deployed(path: &Path, model: &DeployedModel) -> Result<()> {
    let mut records = vec![Record::scalar("__deployed", 1.0)];
    for layer in &model.layers {
        match layer {
            DeployLayer::QuantConv {
                name,
                levels,
                w_shape,
                scale_w,
                bias,
                act,
                ..
            }
            | DeployLayer::QuantFc {
                name,
                levels,
                w_shape,
                scale_w,
                bias,
                act,
                ..
            } => {
                let dims: Vec<u64> = w_shape.iter().map(|&d| d as u64).collect();
                records.push(Record {
                    name: format!("{name}.weight.levels"),
                    dims,
                    data: RecordData::I8(levels.clone()),
                });
                records.push(Record {
                    name: format!("{name}.weight.scale"),
                    dims: vec![],
                    data: RecordData::F32(vec![*scale_w as f32]),
                });
                records.push(Record::scalar(
                    &format!("{name}.weight.bits"),
                    weight_bits_of(layer) as f64,
                ));
                records.push(Record::f64(&format!("{name}.bias"), &[bias.len() as u64], bias.clone()));
                records.push(Record::scalar(&format!("{name}.aq.c"), act.center));
                records.push(Record::scalar(&format!("{name}.aq.d"), act.radius));
                records.push(Record::scalar(
                    &format!("{name}.aq.bits"),
                    act.spec.bit_width as f64,
                ));
            }
            DeployLayer::FpConv { name, weight, bias, .. }
            | DeployLayer::FpFc { name, weight, bias, .. } => {
                let dims: Vec<u64> = weight.shape().iter().map(|&d| d as u64).collect();
                records.push(Record::f64(&format!("{name}.weight"), &dims, weight.data().to_vec()));
                records.push(Record::f64(&format!("{name}.bias"), &[bias.len() as u64], bias.clone()));
            }
            DeployLayer::Bn {
                name,
                gain,
                beta,
                mean,
                var,
                ..
            } => {
                let d = [gain.len() as u64];
                records.push(Record::f64(&format!("{name}.gamma"), &d, gain.clone()));
                records.push(Record::f64(&format!("{name}.beta"), &d, beta.clone()));
                records.push(Record::f64(&format!("{name}.running_mean"), &d, mean.clone()));
                records.push(Record::f64(&format!("{name}.running_var"), &d, var.clone()));
            }
            _ => {}
        }
    }
    write_records(path, &records)
}

fn weight_bits_of(layer: &DeployLayer) -> u32 {
    match layer {
        DeployLayer::QuantConv { packed, .. } => packed.bit_width,
        DeployLayer::QuantFc { rows, .. } => rows[0].bit_width,
        _ => 0,
    }
}

/// Rebuild a deployed model from a file, taking the layer structure from
/// an architecture template (geometry only; every tensor comes from the
/// file).
pub fn load_deployed(path: &Path, arch: &Network) -> Result<DeployedModel> {
    let records = read_records(path)?;
    let by_name: std::collections::HashMap<&str, &Record> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    if !by_name.contains_key("__deployed") {
        return Err(QilError::Format("not a deployed model file".into()));
    }
    let get = |n: &str| -> Result<&Record> {
        by_name
            .get(n)
            .copied()
            .ok_or_else(|| QilError::Format(format!("deployed model is missing {n}")))
    };
    let mut layers = Vec::new();
    for layer in &arch.layers {
        let dl = match layer {
            Layer::Conv2d(c) => {
                if c.quant.is_some() {
                    let levels_rec = get(&format!("{}.weight.levels", c.name))?;
                    let levels = match &levels_rec.data {
                        RecordData::I8(v) => v.clone(),
                        _ => return Err(QilError::Format("levels must be i8".into())),
                    };
                    let stored_scale = match &get(&format!("{}.weight.scale", c.name))?.data {
                        RecordData::F32(v) => v[0] as f64,
                        _ => return Err(QilError::Format("scale must be f32".into())),
                    };
                    let w_bits = get(&format!("{}.weight.bits", c.name))?.as_f64()?[0] as u32;
                    let scale_w = exact_scale(w_bits, stored_scale)?;
                    let a_bits = get(&format!("{}.aq.bits", c.name))?.as_f64()?[0] as u32;
                    let packed = pack_conv_weights(
                        &levels.iter().map(|&v| v as i32).collect::<Vec<_>>(),
                        c.out_ch,
                        c.in_ch,
                        c.kernel,
                        w_bits,
                    )?;
                    DeployLayer::QuantConv {
                        name: c.name.clone(),
                        packed,
                        w_shape: levels_rec.dims.iter().map(|&d| d as usize).collect(),
                        levels,
                        scale_w,
                        stride: c.stride,
                        padding: c.padding,
                        bias: get(&format!("{}.bias", c.name))?.as_f64()?.to_vec(),
                        act: ActQuant {
                            center: get(&format!("{}.aq.c", c.name))?.as_f64()?[0],
                            radius: get(&format!("{}.aq.d", c.name))?.as_f64()?[0],
                            spec: QuantizerSpec::activation(a_bits)?,
                        },
                    }
                } else {
                    let w = get(&format!("{}.weight", c.name))?;
                    DeployLayer::FpConv {
                        name: c.name.clone(),
                        weight: Tensor::from_vec(
                            &w.dims.iter().map(|&d| d as usize).collect::<Vec<_>>(),
                            w.as_f64()?.to_vec(),
                        ),
                        bias: get(&format!("{}.bias", c.name))?.as_f64()?.to_vec(),
                        stride: c.stride,
                        padding: c.padding,
                    }
                }
            }
            Layer::FullyConnected(f) => {
                if f.quant.is_some() {
                    let levels_rec = get(&format!("{}.weight.levels", f.name))?;
                    let levels = match &levels_rec.data {
                        RecordData::I8(v) => v.clone(),
                        _ => return Err(QilError::Format("levels must be i8".into())),
                    };
                    let stored_scale = match &get(&format!("{}.weight.scale", f.name))?.data {
                        RecordData::F32(v) => v[0] as f64,
                        _ => return Err(QilError::Format("scale must be f32".into())),
                    };
                    let w_bits = get(&format!("{}.weight.bits", f.name))?.as_f64()?[0] as u32;
                    let scale_w = exact_scale(w_bits, stored_scale)?;
                    let a_bits = get(&format!("{}.aq.bits", f.name))?.as_f64()?[0] as u32;
                    let ints: Vec<i32> = levels.iter().map(|&v| v as i32).collect();
                    let rows = (0..f.out_features)
                        .map(|o| {
                            crate::bitpack::pack_weights(
                                &ints[o * f.in_features..(o + 1) * f.in_features],
                                &[f.in_features],
                                w_bits,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    DeployLayer::QuantFc {
                        name: f.name.clone(),
                        rows,
                        w_shape: levels_rec.dims.iter().map(|&d| d as usize).collect(),
                        levels,
                        scale_w,
                        bias: get(&format!("{}.bias", f.name))?.as_f64()?.to_vec(),
                        act: ActQuant {
                            center: get(&format!("{}.aq.c", f.name))?.as_f64()?[0],
                            radius: get(&format!("{}.aq.d", f.name))?.as_f64()?[0],
                            spec: QuantizerSpec::activation(a_bits)?,
                        },
                    }
                } else {
                    let w = get(&format!("{}.weight", f.name))?;
                    DeployLayer::FpFc {
                        name: f.name.clone(),
                        weight: Tensor::from_vec(
                            &w.dims.iter().map(|&d| d as usize).collect::<Vec<_>>(),
                            w.as_f64()?.to_vec(),
                        ),
                        bias: get(&format!("{}.bias", f.name))?.as_f64()?.to_vec(),
                    }
                }
            }
            Layer::BatchNorm(b) => DeployLayer::Bn {
                name: b.name.clone(),
                gain: get(&format!("{}.gamma", b.name))?.as_f64()?.to_vec(),
                beta: get(&format!("{}.beta", b.name))?.as_f64()?.to_vec(),
                mean: get(&format!("{}.running_mean", b.name))?.as_f64()?.to_vec(),
                var: get(&format!("{}.running_var", b.name))?.as_f64()?.to_vec(),
                spatial: b.spatial,
            },
            Layer::ReLU => DeployLayer::ReLU,
            Layer::MaxPool(s) => DeployLayer::MaxPool(*s),
            Layer::Flatten => DeployLayer::Flatten,
        };
        layers.push(dl);
    }
    Ok(DeployedModel { layers })
}

/// The stored f32 scale is informational; inference uses the exact
/// `1/q` implied by the bit width.
fn exact_scale(bits: u32, stored: f64) -> Result<f64> {
    let q = crate::quantizer::levels(crate::quantizer::QuantizerKind::Weight, bits)? as f64;
    let exact = 1.0 / q;
    if (stored - exact).abs() > 1e-6 {
        return Err(QilError::Format(format!(
            "stored scale {stored} does not match {bits}-bit scale {exact}"
        )));
    }
    Ok(exact)
}

/// Whether a checkpoint file contains a deployed model.
pub fn is_deployed_file(path: &Path) -> Result<bool> {
    let records = read_records(path)?;
    Ok(records.iter().any(|r| r.name == "__deployed"))
}

#[cfg(test)]
mod tests;
