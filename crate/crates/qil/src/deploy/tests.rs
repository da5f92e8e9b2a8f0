use super::*;
use crate::checkpoint::read_records;
use crate::nn::testutil::{tiny_batch, tiny_dataset, tiny_net};
use crate::train::{calibration_batch, init_quantizers};
use tempfile::tempdir;

fn quantized_tiny(seed: u64, bits: (u32, u32)) -> Network {
    let mut net = tiny_net(seed, Some(bits));
    let data = tiny_dataset(seed + 100, 32);
    init_quantizers(&mut net, &calibration_batch(&data, 32)).unwrap();
    net
}

#[test]
fn deploy_requires_active_quantizers() {
    let mut net = tiny_net(1, Some((3, 3)));
    net.quant_active = false;
    assert!(matches!(deploy(&net), Err(QilError::State(_))));
}

#[test]
fn deployed_forward_matches_reference_quantized_path() {
    for bits in [(2, 2), (3, 3), (4, 4)] {
        let net = quantized_tiny(2, bits);
        let model = deploy(&net).unwrap();
        let (x, _) = tiny_batch(3, 16);
        let (reference, _) = net.forward(&x, Mode::Eval).unwrap();
        let packed = model.forward(&x).unwrap();
        let max_diff = reference
            .data()
            .iter()
            .zip(packed.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-5, "bits {bits:?}: max logit diff {max_diff}");
        // identical argmax on every sample
        for (r, p) in reference.data().chunks(3).zip(packed.data().chunks(3)) {
            assert_eq!(crate::train::argmax(r), crate::train::argmax(p));
        }
    }
}

#[test]
fn ternary_deployed_levels() {
    let net = quantized_tiny(4, (2, 2));
    let model = deploy(&net).unwrap();
    let mut saw_quant = false;
    for layer in &model.layers {
        if let DeployLayer::QuantConv { levels, .. } | DeployLayer::QuantFc { levels, .. } = layer
        {
            saw_quant = true;
            assert!(levels.iter().all(|&l| (-1..=1).contains(&l)));
        }
    }
    assert!(saw_quant);
}

#[test]
fn deployed_file_roundtrip_and_no_weight_quantizer_records() {
    let net = quantized_tiny(5, (3, 3));
    let model = deploy(&net).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.deployed.qiln");
    save_deployed(&path, &model).unwrap();

    // the file keeps activation intervals but drops weight quantizers
    let records = read_records(&path).unwrap();
    assert!(records.iter().any(|r| r.name == "c2.aq.c"));
    assert!(records.iter().any(|r| r.name == "c2.weight.levels"));
    assert!(!records.iter().any(|r| r.name.contains(".wq.")));

    let restored = load_deployed(&path, &net).unwrap();
    let (x, _) = tiny_batch(6, 8);
    let a = model.forward(&x).unwrap();
    let b = restored.forward(&x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn is_deployed_distinguishes_files() {
    let net = quantized_tiny(7, (3, 3));
    let dir = tempdir().unwrap();
    let train_path = dir.path().join("train.qiln");
    crate::checkpoint::save_network(&train_path, &net).unwrap();
    assert!(!is_deployed_file(&train_path).unwrap());
    let dep_path = dir.path().join("dep.qiln");
    save_deployed(&dep_path, &deploy(&net).unwrap()).unwrap();
    assert!(is_deployed_file(&dep_path).unwrap());
}
