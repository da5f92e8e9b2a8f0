//! The reference desk-scale architecture.
//!
//! Conv(1->16, 5x5) - BN - ReLU - MaxPool2 -
//! Conv(16->32, 5x5, quantized) - BN - ReLU - MaxPool2 - Flatten -
//! FC(512->100, quantized) - BN - ReLU - FC(100->10).
//!
//! The first convolution and the last fully-connected layer always stay
//! at full precision.

use super::{BnLayer, ConvLayer, FcLayer, Layer, Network, ParamClass, ParamStore, QuantSlots};
use crate::quantizer::QuantizerSpec;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct LenetOptions {
    /// (activation bits, weight bits) for the quantized layers.
    pub bits: (u32, u32),
    pub gamma_trainable: bool,
    pub gamma_init: f64,
}

impl Default for LenetOptions {
    fn default() -> Self {
        LenetOptions {
            bits: (4, 4),
            gamma_trainable: true,
            gamma_init: 1.0,
        }
    }
}

/// Build the network with Kaiming-normal weight init. Quantization starts
/// inactive; callers enable it for finetuning.
pub fn lenet_q(opts: &LenetOptions, seed: u64) -> Network {
    let (n_x, n_w) = opts.bits;
    let slots = QuantSlots {
        weight: QuantizerSpec::weight(n_w).expect("valid weight bits"),
        activation: QuantizerSpec::activation(n_x).expect("valid activation bits"),
        gamma_trainable: opts.gamma_trainable,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();

    let mut conv = |params: &mut ParamStore, name: &str, ic: usize, oc: usize, k: usize| {
        let std = (2.0 / (ic * k * k) as f64).sqrt();
        params.insert(
            &format!("{name}.weight"),
            ParamClass::Weight,
            Tensor::randn(&[oc, ic, k, k], std, &mut rng),
        );
        params.insert(&format!("{name}.bias"), ParamClass::Bias, Tensor::zeros(&[oc]));
    };
    let bn = |params: &mut ParamStore, name: &str, feats: usize| {
        params.insert(&format!("{name}.gamma"), ParamClass::BnGain, Tensor::filled(&[feats], 1.0));
        params.insert(&format!("{name}.beta"), ParamClass::BnBias, Tensor::zeros(&[feats]));
        params.insert(
            &format!("{name}.running_mean"),
            ParamClass::BnStat,
            Tensor::zeros(&[feats]),
        );
        params.insert(
            &format!("{name}.running_var"),
            ParamClass::BnStat,
            Tensor::filled(&[feats], 1.0),
        );
    };
    let quant_scalars = |params: &mut ParamStore, name: &str, gamma_init: f64| {
        params.insert(&format!("{name}.wq.c"), ParamClass::QuantCenter, Tensor::scalar(0.5));
        params.insert(&format!("{name}.wq.d"), ParamClass::QuantRadius, Tensor::scalar(0.5));
        params.insert(
            &format!("{name}.wq.gamma"),
            ParamClass::QuantGamma,
            Tensor::scalar(gamma_init),
        );
        params.insert(&format!("{name}.aq.c"), ParamClass::QuantCenter, Tensor::scalar(0.5));
        params.insert(&format!("{name}.aq.d"), ParamClass::QuantRadius, Tensor::scalar(0.5));
    };

    conv(&mut params, "conv1", 1, 16, 5);
    bn(&mut params, "bn1", 16);
    conv(&mut params, "conv2", 16, 32, 5);
    quant_scalars(&mut params, "conv2", opts.gamma_init);
    bn(&mut params, "bn2", 32);

    let fc = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
        let std = (2.0 / i as f64).sqrt();
        params.insert(
            &format!("{name}.weight"),
            ParamClass::Weight,
            Tensor::randn(&[o, i], std, rng),
        );
        params.insert(&format!("{name}.bias"), ParamClass::Bias, Tensor::zeros(&[o]));
    };
    fc(&mut params, &mut rng, "fc1", 512, 100);
    quant_scalars(&mut params, "fc1", opts.gamma_init);
    bn(&mut params, "bn3", 100);
    fc(&mut params, &mut rng, "fc2", 100, 10);

    let layers = vec![
        Layer::Conv2d(ConvLayer {
            name: "conv1".into(),
            in_ch: 1,
            out_ch: 16,
            kernel: 5,
            stride: 1,
            padding: 0,
            quant: None,
        }),
        Layer::BatchNorm(BnLayer {
            name: "bn1".into(),
            features: 16,
            spatial: true,
        }),
        Layer::ReLU,
        Layer::MaxPool(2),
        Layer::Conv2d(ConvLayer {
            name: "conv2".into(),
            in_ch: 16,
            out_ch: 32,
            kernel: 5,
            stride: 1,
            padding: 0,
            quant: Some(slots.clone()),
        }),
        Layer::BatchNorm(BnLayer {
            name: "bn2".into(),
            features: 32,
            spatial: true,
        }),
        Layer::ReLU,
        Layer::MaxPool(2),
        Layer::Flatten,
        Layer::FullyConnected(FcLayer {
            name: "fc1".into(),
            in_features: 512,
            out_features: 100,
            quant: Some(slots),
        }),
        Layer::BatchNorm(BnLayer {
            name: "bn3".into(),
            features: 100,
            spatial: false,
        }),
        Layer::ReLU,
        Layer::FullyConnected(FcLayer {
            name: "fc2".into(),
            in_features: 100,
            out_features: 10,
            quant: None,
        }),
    ];
    Network::new(layers, params)
}
