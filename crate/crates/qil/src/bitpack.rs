//! Bit-plane packed tensors and AND+popcount integer arithmetic for the
//! deployment path.
//!
//! Activations pack one plane per significance bit; weights use
//! sign-magnitude planes (separate positive and negative magnitude
//! planes), so the dot product of a weight row with an activation vector
//! is
//!
//! ```text
//! sum_{i,j} 2^(i+j) * (popcount(P_i & A_j) - popcount(N_i & A_j))
//! ```
//!
//! which equals the exact integer dot product of the level tensors; the
//! only multiplication left is the final rescale by the two scale
//! factors.

use crate::error::{QilError, Result};
use crate::quantizer::{levels, QuantizerKind};
use crate::tensor::Tensor;
use std::time::Instant;

const WORD_BITS: usize = 64;

#[derive(Clone, Debug)]
enum Planes {
    /// One plane per bit of the unsigned activation levels.
    Activation(Vec<Vec<u64>>),
    /// Positive / negative magnitude planes of signed weight levels.
    /// `pos[j] & neg[j] == 0` for every j.
    Weight { pos: Vec<Vec<u64>>, neg: Vec<Vec<u64>> },
}

/// Bit-plane representation of an integer level tensor. Trailing pad bits
/// of every plane word are zero; packed tensors are immutable.
#[derive(Clone, Debug)]
pub struct PackedTensor {
    pub logical_shape: Vec<usize>,
    pub bit_width: u32,
    len: usize,
    planes: Planes,
}

impl PackedTensor {
    pub fn logical_len(&self) -> usize {
        self.len
    }

    pub fn is_weight(&self) -> bool {
        matches!(self.planes, Planes::Weight { .. })
    }
}

fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

/// Pack unsigned activation levels in `[0, 2^bits - 1]`: bit j of element
/// k lands in plane j, bit position k (flattened row-major).
pub fn pack_activations(levels_int: &[i32], shape: &[usize], bits: u32) -> Result<PackedTensor> {
    let q = levels(QuantizerKind::Activation, bits)? as i32;
    let len = levels_int.len();
    debug_assert_eq!(shape.iter().product::<usize>(), len);
    let nw = words_for(len);
    let mut planes = vec![vec![0u64; nw]; bits as usize];
    for (k, &lvl) in levels_int.iter().enumerate() {
        if !(0..=q).contains(&lvl) {
            return Err(QilError::LevelOutOfRange {
                level: lvl,
                bits,
                kind: "activation",
            });
        }
        let (word, bit) = (k / WORD_BITS, k % WORD_BITS);
        for (j, plane) in planes.iter_mut().enumerate() {
            if (lvl >> j) & 1 == 1 {
                plane[word] |= 1u64 << bit;
            }
        }
    }
    Ok(PackedTensor {
        logical_shape: shape.to_vec(),
        bit_width: bits,
        len,
        planes: Planes::Activation(planes),
    })
}

/// Pack signed weight levels in `[-q, q]` with `q = 2^(bits-1) - 1` as
/// sign-magnitude planes.
pub fn pack_weights(levels_int: &[i32], shape: &[usize], bits: u32) -> Result<PackedTensor> {
    let q = levels(QuantizerKind::Weight, bits)? as i32;
    let len = levels_int.len();
    debug_assert_eq!(shape.iter().product::<usize>(), len);
    let nw = words_for(len);
    let nplanes = (bits - 1) as usize;
    let mut pos = vec![vec![0u64; nw]; nplanes];
    let mut neg = vec![vec![0u64; nw]; nplanes];
    for (k, &lvl) in levels_int.iter().enumerate() {
        if lvl.abs() > q {
            return Err(QilError::LevelOutOfRange {
                level: lvl,
                bits,
                kind: "weight",
            });
        }
        let mag = lvl.unsigned_abs();
        let target = if lvl >= 0 { &mut pos } else { &mut neg };
        let (word, bit) = (k / WORD_BITS, k % WORD_BITS);
        for (j, plane) in target.iter_mut().enumerate() {
            if (mag >> j) & 1 == 1 {
                plane[word] |= 1u64 << bit;
            }
        }
    }
    Ok(PackedTensor {
        logical_shape: shape.to_vec(),
        bit_width: bits,
        len,
        planes: Planes::Weight { pos, neg },
    })
}

/// Recover the integer levels (exact inverse of packing).
pub fn unpack(t: &PackedTensor) -> Vec<i32> {
    let mut out = vec![0i32; t.len];
    match &t.planes {
        Planes::Activation(planes) => {
            for (j, plane) in planes.iter().enumerate() {
                for (k, v) in out.iter_mut().enumerate() {
                    if (plane[k / WORD_BITS] >> (k % WORD_BITS)) & 1 == 1 {
                        *v += 1 << j;
                    }
                }
            }
        }
        Planes::Weight { pos, neg } => {
            for (j, plane) in pos.iter().enumerate() {
                for (k, v) in out.iter_mut().enumerate() {
                    if (plane[k / WORD_BITS] >> (k % WORD_BITS)) & 1 == 1 {
                        *v += 1 << j;
                    }
                }
            }
            for (j, plane) in neg.iter().enumerate() {
                for (k, v) in out.iter_mut().enumerate() {
                    if (plane[k / WORD_BITS] >> (k % WORD_BITS)) & 1 == 1 {
                        *v -= 1 << j;
                    }
                }
            }
        }
    }
    out
}

/// Verify the sign-magnitude disjointness invariant.
pub fn planes_disjoint(t: &PackedTensor) -> bool {
    match &t.planes {
        Planes::Weight { pos, neg } => {
            // no element may carry both positive and negative magnitude bits
            let nw = words_for(t.len);
            (0..nw).all(|w| {
                let p: u64 = pos.iter().map(|pl| pl[w]).fold(0, |a, b| a | b);
                let n: u64 = neg.iter().map(|pl| pl[w]).fold(0, |a, b| a | b);
                p & n == 0
            })
        }
        Planes::Activation(_) => true,
    }
}

fn and_popcount(a: &[u64], b: &[u64]) -> i64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0u32;
    for (x, y) in a.iter().zip(b) {
        acc += (x & y).count_ones();
    }
    acc as i64
}

/// Exact integer dot product of a packed weight vector with a packed
/// activation vector: shifted AND+popcount over all plane pairs.
pub fn packed_dot(w: &PackedTensor, x: &PackedTensor) -> Result<i64> {
    if w.len != x.len {
        return Err(QilError::ShapeMismatch(format!(
            "packed dot of lengths {} and {}",
            w.len, x.len
        )));
    }
    let (pos, neg) = match &w.planes {
        Planes::Weight { pos, neg } => (pos, neg),
        Planes::Activation(_) => {
            return Err(QilError::ShapeMismatch(
                "packed_dot expects weight planes on the left".into(),
            ))
        }
    };
    let aplanes = match &x.planes {
        Planes::Activation(p) => p,
        Planes::Weight { .. } => {
            return Err(QilError::ShapeMismatch(
                "packed_dot expects activation planes on the right".into(),
            ))
        }
    };
    let mut acc = 0i64;
    for (i, (p, n)) in pos.iter().zip(neg).enumerate() {
        for (j, a) in aplanes.iter().enumerate() {
            let d = and_popcount(p, a) - and_popcount(n, a);
            acc += d << (i + j);
        }
    }
    Ok(acc)
}

/// Conv weights repacked once per output channel over the flattened
/// `in_ch * k * k` window layout, so inference inner loops are pure
/// AND+popcount.
#[derive(Clone, Debug)]
pub struct PackedConvWeights {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub bit_width: u32,
    pub rows: Vec<PackedTensor>,
}

/// Pack a `(out_ch, in_ch, k, k)` weight level tensor row by row.
pub fn pack_conv_weights(
    levels_int: &[i32],
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
    bits: u32,
) -> Result<PackedConvWeights> {
    let kdim = in_ch * kernel * kernel;
    if levels_int.len() != out_ch * kdim {
        return Err(QilError::ShapeMismatch(format!(
            "conv weight levels: expected {} elements, got {}",
            out_ch * kdim,
            levels_int.len()
        )));
    }
    let rows = (0..out_ch)
        .map(|o| pack_weights(&levels_int[o * kdim..(o + 1) * kdim], &[kdim], bits))
        .collect::<Result<Vec<_>>>()?;
    Ok(PackedConvWeights {
        out_ch,
        in_ch,
        kernel,
        bit_width: bits,
        rows,
    })
}

/// Integer convolution of packed weights with one packed activation
/// sample `(C,H,W)`, rescaled by `scale_w * scale_x` at the end.
/// Accumulators are i64; the worst-case window sum is checked up front.
pub fn packed_conv2d(
    w: &PackedConvWeights,
    x: &PackedTensor,
    stride: usize,
    padding: usize,
    scale_w: f64,
    scale_x: f64,
) -> Result<Tensor> {
    if x.is_weight() || x.logical_shape.len() != 3 || x.logical_shape[0] != w.in_ch {
        return Err(QilError::ShapeMismatch(format!(
            "packed conv input: expected activation ({},H,W), got {:?}",
            w.in_ch, x.logical_shape
        )));
    }
    let (c, h, wd) = (x.logical_shape[0], x.logical_shape[1], x.logical_shape[2]);
    let k = w.kernel;
    if h + 2 * padding < k || wd + 2 * padding < k {
        return Err(QilError::ShapeMismatch(format!(
            "kernel {k} does not fit input {h}x{wd} with padding {padding}"
        )));
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (wd + 2 * padding - k) / stride + 1;
    let kdim = c * k * k;
    check_accumulator(kdim, w.bit_width, x.bit_width)?;

    let x_levels = unpack(x);
    let scale = scale_w * scale_x;
    let mut out = Tensor::zeros(&[w.out_ch, ho, wo]);
    let mut window = vec![0i32; kdim];
    for oy in 0..ho {
        for ox in 0..wo {
            // gather the receptive field, zero-padded
            let mut idx = 0;
            for ci in 0..c {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        window[idx] = if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize
                        {
                            0
                        } else {
                            x_levels[(ci * h + iy as usize) * wd + ix as usize]
                        };
                        idx += 1;
                    }
                }
            }
            let wpacked = pack_activations(&window, &[kdim], x.bit_width)?;
            for (oc, row) in w.rows.iter().enumerate() {
                let acc = packed_dot(row, &wpacked)?;
                out.data_mut()[(oc * ho + oy) * wo + ox] = acc as f64 * scale;
            }
        }
    }
    Ok(out)
}

/// i64 accumulators must hold `q_w * q_x * window` with room to spare.
fn check_accumulator(window: usize, n_w: u32, n_x: u32) -> Result<()> {
    let qw = levels(QuantizerKind::Weight, n_w)? as i128;
    let qx = levels(QuantizerKind::Activation, n_x)? as i128;
    let worst = qw * qx * window as i128;
    if worst > (i64::MAX / 4) as i128 {
        return Err(QilError::InvalidConfig(format!(
            "accumulator overflow risk: window {window} at {n_w}/{n_x} bits"
        )));
    }
    Ok(())
}

/// Timing comparison of the packed integer dot against the naive
/// real-valued dot it replaces.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub path: &'static str,
    pub len: usize,
    pub median_ns: u128,
    pub reps: usize,
}

/// Median wall-clock over `reps` runs for both paths at each length.
pub fn bench_dot(sizes: &[usize], reps: usize, n_w: u32, n_x: u32, seed: u64) -> Vec<BenchRow> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let qw = levels(QuantizerKind::Weight, n_w).unwrap() as i32;
    let qx = levels(QuantizerKind::Activation, n_x).unwrap() as i32;
    let mut rows = Vec::new();
    for &len in sizes {
        let w_levels: Vec<i32> = (0..len).map(|_| rng.random_range(-qw..=qw)).collect();
        let x_levels: Vec<i32> = (0..len).map(|_| rng.random_range(0..=qx)).collect();
        let wp = pack_weights(&w_levels, &[len], n_w).unwrap();
        let xp = pack_activations(&x_levels, &[len], n_x).unwrap();
        let wf: Vec<f64> = w_levels.iter().map(|&v| v as f64 / qw as f64).collect();
        let xf: Vec<f64> = x_levels.iter().map(|&v| v as f64 / qx as f64).collect();

        let mut t_packed = Vec::with_capacity(reps);
        let mut t_ref = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            let d = packed_dot(&wp, &xp).unwrap();
            std::hint::black_box(d);
            t_packed.push(t0.elapsed().as_nanos());

            let t0 = Instant::now();
            let mut acc = 0.0f64;
            for (a, b) in wf.iter().zip(&xf) {
                acc += a * b;
            }
            std::hint::black_box(acc);
            t_ref.push(t0.elapsed().as_nanos());
        }
        t_packed.sort_unstable();
        t_ref.sort_unstable();
        rows.push(BenchRow {
            path: "packed",
            len,
            median_ns: t_packed[reps / 2],
            reps,
        });
        rows.push(BenchRow {
            path: "reference",
            len,
            median_ns: t_ref[reps / 2],
            reps,
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activation_planes_match_binary_expansion() {
        // levels {0,1,2,3} at N=2: plane0 holds bits 0101, plane1 0011
        // (element order), i.e. words 0b1010 and 0b1100
        let t = pack_activations(&[0, 1, 2, 3], &[4], 2).unwrap();
        match &t.planes {
            Planes::Activation(p) => {
                assert_eq!(p.len(), 2);
                assert_eq!(p[0][0], 0b1010);
                assert_eq!(p[1][0], 0b1100);
            }
            _ => panic!("expected activation planes"),
        }
    }

    #[test]
    fn all_zero_levels_pack_to_zero_planes() {
        let t = pack_activations(&[0; 130], &[130], 3).unwrap();
        match &t.planes {
            Planes::Activation(p) => assert!(p.iter().all(|pl| pl.iter().all(|&w| w == 0))),
            _ => unreachable!(),
        }
    }

    #[test]
    fn ternary_weights_pack_to_single_sign_planes() {
        let t = pack_weights(&[-1, 0, 1, 1], &[4], 2).unwrap();
        match &t.planes {
            Planes::Weight { pos, neg } => {
                assert_eq!(pos.len(), 1);
                assert_eq!(neg.len(), 1);
                assert_eq!(pos[0][0], 0b1100); // +1 at elements 2,3
                assert_eq!(neg[0][0], 0b0001); // -1 at element 0
            }
            _ => panic!("expected weight planes"),
        }
        assert!(planes_disjoint(&t));
    }

    #[test]
    fn out_of_range_levels_are_rejected() {
        assert!(matches!(
            pack_activations(&[4], &[1], 2),
            Err(QilError::LevelOutOfRange { .. })
        ));
        assert!(matches!(
            pack_weights(&[2], &[1], 2),
            Err(QilError::LevelOutOfRange { .. })
        ));
        assert!(pack_activations(&[-1], &[1], 2).is_err());
    }

    #[test]
    fn roundtrip_random_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for bits in 2u32..=5 {
            let qw = levels(QuantizerKind::Weight, bits).unwrap() as i32;
            let qx = levels(QuantizerKind::Activation, bits).unwrap() as i32;
            for _ in 0..20 {
                let n = rng.random_range(1..200);
                let w: Vec<i32> = (0..n).map(|_| rng.random_range(-qw..=qw)).collect();
                let x: Vec<i32> = (0..n).map(|_| rng.random_range(0..=qx)).collect();
                let wp = pack_weights(&w, &[n], bits).unwrap();
                let xp = pack_activations(&x, &[n], bits).unwrap();
                assert_eq!(unpack(&wp), w);
                assert_eq!(unpack(&xp), x);
                assert!(planes_disjoint(&wp));
            }
        }
    }

    #[test]
    fn packed_dot_example() {
        let w = pack_weights(&[1, -1, 0], &[3], 2).unwrap();
        let x = pack_activations(&[3, 2, 1], &[3], 2).unwrap();
        assert_eq!(packed_dot(&w, &x).unwrap(), 1); // 3 - 2 + 0
    }

    #[test]
    fn packed_dot_zero_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w_levels: Vec<i32> = (0..100).map(|_| rng.random_range(-3..=3)).collect();
        let w = pack_weights(&w_levels, &[100], 3).unwrap();
        let x = pack_activations(&[0; 100], &[100], 3).unwrap();
        assert_eq!(packed_dot(&w, &x).unwrap(), 0);
    }

    #[test]
    fn packed_dot_matches_integer_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n_w in 2u32..=4 {
            for n_x in 2u32..=4 {
                let qw = levels(QuantizerKind::Weight, n_w).unwrap() as i32;
                let qx = levels(QuantizerKind::Activation, n_x).unwrap() as i32;
                for _ in 0..50 {
                    let n = rng.random_range(1..300);
                    let w: Vec<i32> = (0..n).map(|_| rng.random_range(-qw..=qw)).collect();
                    let x: Vec<i32> = (0..n).map(|_| rng.random_range(0..=qx)).collect();
                    let naive: i64 = w.iter().zip(&x).map(|(&a, &b)| a as i64 * b as i64).sum();
                    let wp = pack_weights(&w, &[n], n_w).unwrap();
                    let xp = pack_activations(&x, &[n], n_x).unwrap();
                    assert_eq!(packed_dot(&wp, &xp).unwrap(), naive);
                }
            }
        }
    }

    #[test]
    fn packed_dot_is_linear_in_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 150;
        let w: Vec<i32> = (0..n).map(|_| rng.random_range(-3..=3)).collect();
        let x1: Vec<i32> = (0..n).map(|_| rng.random_range(0..=3)).collect();
        let x2: Vec<i32> = (0..n).map(|_| rng.random_range(0..=3)).collect();
        let sum: Vec<i32> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let wp = pack_weights(&w, &[n], 3).unwrap();
        let d1 = packed_dot(&wp, &pack_activations(&x1, &[n], 3).unwrap()).unwrap();
        let d2 = packed_dot(&wp, &pack_activations(&x2, &[n], 3).unwrap()).unwrap();
        let ds = packed_dot(&wp, &pack_activations(&sum, &[n], 3).unwrap()).unwrap();
        assert_eq!(ds, d1 + d2);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let w = pack_weights(&[1, 0], &[2], 2).unwrap();
        let x = pack_activations(&[1, 2, 3], &[3], 2).unwrap();
        assert!(matches!(
            packed_dot(&w, &x),
            Err(QilError::ShapeMismatch(_))
        ));
    }

    /// Brute-force integer convolution for the conv oracle.
    #[allow(clippy::too_many_arguments)]
    fn int_conv(
        w: &[i32],
        x: &[i32],
        oc: usize,
        c: usize,
        h: usize,
        wd: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Vec<i64> {
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (wd + 2 * padding - k) / stride + 1;
        let mut out = vec![0i64; oc * ho * wo];
        for o in 0..oc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0i64;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[(ci * h + iy as usize) * wd + ix as usize] as i64;
                                let wv = w[((o * c + ci) * k + ky) * k + kx] as i64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn packed_conv_matches_integer_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (n_w, n_x) in [(2u32, 2u32), (3, 2), (2, 4), (4, 4)] {
            let qw = levels(QuantizerKind::Weight, n_w).unwrap() as i32;
            let qx = levels(QuantizerKind::Activation, n_x).unwrap() as i32;
            for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
                let (oc, c, h, wd, k) = (3usize, 2usize, 8usize, 8usize, 3usize);
                let w: Vec<i32> = (0..oc * c * k * k).map(|_| rng.random_range(-qw..=qw)).collect();
                let x: Vec<i32> = (0..c * h * wd).map(|_| rng.random_range(0..=qx)).collect();
                let wp = pack_conv_weights(&w, oc, c, k, n_w).unwrap();
                let xp = pack_activations(&x, &[c, h, wd], n_x).unwrap();
                let (sw, sx) = (1.0 / qw as f64, 1.0 / qx as f64);
                let scale = sw * sx;
                let out = packed_conv2d(&wp, &xp, stride, padding, sw, sx).unwrap();
                let oracle = int_conv(&w, &x, oc, c, h, wd, k, stride, padding);
                assert_eq!(out.len(), oracle.len());
                for (got, &want) in out.data().iter().zip(&oracle) {
                    assert_eq!(*got, want as f64 * scale);
                }
            }
        }
    }

    #[test]
    fn one_by_one_kernel_reduces_to_per_position_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (oc, c, h, wd) = (2usize, 3usize, 4usize, 4usize);
        let w: Vec<i32> = (0..oc * c).map(|_| rng.random_range(-1..=1)).collect();
        let x: Vec<i32> = (0..c * h * wd).map(|_| rng.random_range(0..=3)).collect();
        let wp = pack_conv_weights(&w, oc, c, 1, 2).unwrap();
        let xp = pack_activations(&x, &[c, h, wd], 2).unwrap();
        let out = packed_conv2d(&wp, &xp, 1, 0, 1.0, 1.0).unwrap();
        for o in 0..oc {
            for p in 0..h * wd {
                let mut dot = 0i64;
                for ci in 0..c {
                    dot += w[o * c + ci] as i64 * x[ci * h * wd + p] as i64;
                }
                assert_eq!(out.data()[o * h * wd + p], dot as f64);
            }
        }
    }

    #[test]
    fn bench_report_shape() {
        let rows = bench_dot(&[64, 256], 31, 2, 2, 5);
        assert_eq!(rows.len(), 4); // sizes x 2 paths
        assert!(rows.iter().all(|r| r.reps == 31));
        // medians are non-zero wall clock
        assert!(rows.iter().all(|r| r.median_ns > 0));
    }
}
