//! Small network builders shared by the unit tests.

use super::*;
use crate::quantizer::QuantizerSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// conv - bn - relu - pool - conv(q) - bn - relu - pool - flatten -
/// fc(q) - bn - relu - fc, for 14x14 single-channel inputs, 3 classes.
pub fn tiny_net(seed: u64, bits: Option<(u32, u32)>) -> Network {
    let slots = bits.map(|(n_x, n_w)| QuantSlots {
        weight: QuantizerSpec::weight(n_w).unwrap(),
        activation: QuantizerSpec::activation(n_x).unwrap(),
        gamma_trainable: true,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut add_conv = |params: &mut ParamStore, name: &str, ic: usize, oc: usize, k: usize| {
        let std = (2.0 / (ic * k * k) as f64).sqrt();
        params.insert(
            &format!("{name}.weight"),
            ParamClass::Weight,
            Tensor::randn(&[oc, ic, k, k], std, &mut rng),
        );
        params.insert(&format!("{name}.bias"), ParamClass::Bias, Tensor::zeros(&[oc]));
    };
    let add_bn = |params: &mut ParamStore, name: &str, f: usize| {
        params.insert(&format!("{name}.gamma"), ParamClass::BnGain, Tensor::filled(&[f], 1.0));
        params.insert(&format!("{name}.beta"), ParamClass::BnBias, Tensor::zeros(&[f]));
        params.insert(&format!("{name}.running_mean"), ParamClass::BnStat, Tensor::zeros(&[f]));
        params.insert(
            &format!("{name}.running_var"),
            ParamClass::BnStat,
            Tensor::filled(&[f], 1.0),
        );
    };
    let add_q = |params: &mut ParamStore, name: &str| {
        params.insert(&format!("{name}.wq.c"), ParamClass::QuantCenter, Tensor::scalar(0.25));
        params.insert(&format!("{name}.wq.d"), ParamClass::QuantRadius, Tensor::scalar(0.3));
        params.insert(&format!("{name}.wq.gamma"), ParamClass::QuantGamma, Tensor::scalar(1.2));
        params.insert(&format!("{name}.aq.c"), ParamClass::QuantCenter, Tensor::scalar(0.8));
        params.insert(&format!("{name}.aq.d"), ParamClass::QuantRadius, Tensor::scalar(0.8));
    };
    add_conv(&mut params, "c1", 1, 2, 3);
    add_bn(&mut params, "b1", 2);
    add_conv(&mut params, "c2", 2, 3, 3);
    if bits.is_some() {
        add_q(&mut params, "c2");
    }
    add_bn(&mut params, "b2", 3);
    let std = (2.0 / 12.0f64).sqrt();
    params.insert("f1.weight", ParamClass::Weight, Tensor::randn(&[8, 12], std, &mut rng));
    params.insert("f1.bias", ParamClass::Bias, Tensor::zeros(&[8]));
    if bits.is_some() {
        add_q(&mut params, "f1");
    }
    add_bn(&mut params, "b3", 8);
    let std = (2.0 / 8.0f64).sqrt();
    params.insert("f2.weight", ParamClass::Weight, Tensor::randn(&[3, 8], std, &mut rng));
    params.insert("f2.bias", ParamClass::Bias, Tensor::zeros(&[3]));

    let layers = vec![
        Layer::Conv2d(ConvLayer {
            name: "c1".into(),
            in_ch: 1,
            out_ch: 2,
            kernel: 3,
            stride: 1,
            padding: 0,
            quant: None,
        }),
        Layer::BatchNorm(BnLayer { name: "b1".into(), features: 2, spatial: true }),
        Layer::ReLU,
        Layer::MaxPool(2),
        Layer::Conv2d(ConvLayer {
            name: "c2".into(),
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 1,
            padding: 0,
            quant: slots.clone(),
        }),
        Layer::BatchNorm(BnLayer { name: "b2".into(), features: 3, spatial: true }),
        Layer::ReLU,
        Layer::MaxPool(2),
        Layer::Flatten,
        Layer::FullyConnected(FcLayer {
            name: "f1".into(),
            in_features: 12,
            out_features: 8,
            quant: slots,
        }),
        Layer::BatchNorm(BnLayer { name: "b3".into(), features: 8, spatial: false }),
        Layer::ReLU,
        Layer::FullyConnected(FcLayer {
            name: "f2".into(),
            in_features: 8,
            out_features: 3,
            quant: None,
        }),
    ];
    let mut net = Network::new(layers, params);
    net.quant_active = bits.is_some();
    net
}

/// Batch-norm-free variant (train and eval forwards are identical):
/// conv - relu - pool - conv - relu - pool - flatten - fc, 14x14 inputs.
pub fn tiny_net_plain(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut add_conv = |params: &mut ParamStore, name: &str, ic: usize, oc: usize, k: usize| {
        let std = (2.0 / (ic * k * k) as f64).sqrt();
        params.insert(
            &format!("{name}.weight"),
            ParamClass::Weight,
            Tensor::randn(&[oc, ic, k, k], std, &mut rng),
        );
        params.insert(&format!("{name}.bias"), ParamClass::Bias, Tensor::zeros(&[oc]));
    };
    add_conv(&mut params, "c1", 1, 2, 3);
    add_conv(&mut params, "c2", 2, 3, 3);
    let std = (2.0 / 12.0f64).sqrt();
    params.insert("f1.weight", ParamClass::Weight, Tensor::randn(&[3, 12], std, &mut rng));
    params.insert("f1.bias", ParamClass::Bias, Tensor::zeros(&[3]));
    let layers = vec![
        Layer::Conv2d(ConvLayer {
            name: "c1".into(),
            in_ch: 1,
            out_ch: 2,
            kernel: 3,
            stride: 1,
            padding: 0,
            quant: None,
        }),
        Layer::ReLU,
        Layer::MaxPool(2),
        Layer::Conv2d(ConvLayer {
            name: "c2".into(),
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 1,
            padding: 0,
            quant: None,
        }),
        Layer::ReLU,
        Layer::MaxPool(2),
        Layer::Flatten,
        Layer::FullyConnected(FcLayer {
            name: "f1".into(),
            in_features: 12,
            out_features: 3,
            quant: None,
        }),
    ];
    Network::new(layers, params)
}

/// Non-negative random inputs shaped for [`tiny_net`] with labels in 0..3.
pub fn tiny_batch(seed: u64, n: usize) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[n, 1, 14, 14], 1.0, &mut rng).map(|v| v.abs().min(2.0));
    let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
    (x, labels)
}

/// A [`crate::data::DatasetHandle`] of random tiny-net inputs.
pub fn tiny_dataset(seed: u64, n: usize) -> crate::data::DatasetHandle {
    let (images, labels) = tiny_batch(seed, n);
    crate::data::DatasetHandle {
        images,
        labels,
        split: "synthetic".into(),
        classes: None,
    }
}
