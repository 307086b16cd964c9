//! Bit-packed `+-1` tensors and XNOR/popcount products.
//!
//! Each leading-axis row is packed into 64-bit words, least significant bit
//! first; bit 1 encodes `+1` and bit 0 encodes `-1`. Trailing bits of the
//! last word of a row are always zero.
//!
//! For two rows of logical length `n` the integer dot product is
//! `2 * popcount(XNOR(a, b)) - n`. The zeroed pad bits of both operands XNOR
//! to 1, so their count is subtracted before the formula is applied.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::im2col::{im2col, ConvGeom};
use crate::linalg::gemm_nt;
use crate::quantization::BinarizedTensor;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedBitTensor {
    shape: Vec<usize>,
    row_bits: usize,
    words_per_row: usize,
    words: Vec<u64>,
    scale: Vec<f64>,
}

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Rows are slices along the leading axis; scalars and vectors are a single row.
fn rows_of(shape: &[usize]) -> (usize, usize) {
    if shape.len() <= 1 {
        (1, numel(shape))
    } else {
        (shape[0], numel(&shape[1..]))
    }
}

/// Packs one row of `+-1` values into `out`; any other value is an error.
fn pack_row(values: &[f64], out: &mut [u64]) -> Result<()> {
    out.fill(0);
    for (i, &v) in values.iter().enumerate() {
        if v == 1.0 {
            out[i / 64] |= 1u64 << (i % 64);
        } else if v != -1.0 {
            return Err(invalid(format!("cannot pack {} at index {}: entries must be +-1", v, i)));
        }
    }
    Ok(())
}

impl PackedBitTensor {
    /// Packs `values` row by row along the leading axis.
    pub fn from_values(values: &Tensor, scale: Vec<f64>) -> Result<Self> {
        let shape = values.shape().to_vec();
        let (rows, row_bits) = rows_of(&shape);
        let words_per_row = words_for(row_bits);
        let mut words = vec![0u64; rows * words_per_row];
        for r in 0..rows {
            pack_row(
                &values.data()[r * row_bits..(r + 1) * row_bits],
                &mut words[r * words_per_row..(r + 1) * words_per_row],
            )?;
        }
        Ok(Self {
            shape,
            row_bits,
            words_per_row,
            words,
            scale,
        })
    }

    pub fn pack(b: &BinarizedTensor) -> Result<Self> {
        Self::from_values(b.values(), b.scale().to_vec())
    }

    pub fn from_raw(shape: Vec<usize>, words: Vec<u64>, scale: Vec<f64>) -> Result<Self> {
        let (rows, row_bits) = rows_of(&shape);
        let words_per_row = words_for(row_bits);
        if words.len() != rows * words_per_row {
            return Err(shape_err("PackedBitTensor::from_raw", "word count does not match shape"));
        }
        let t = Self {
            shape,
            row_bits,
            words_per_row,
            words,
            scale,
        };
        if t.pad_bits() > 0 {
            let mask = !0u64 << (64 - t.pad_bits());
            if (0..rows).any(|r| t.row(r)[words_per_row - 1] & mask != 0) {
                return Err(invalid("pad bits must be zero"));
            }
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.words.len() / self.words_per_row.max(1)
    }

    pub fn row_bits(&self) -> usize {
        self.row_bits
    }

    /// Unused trailing bits in the last word of each row.
    pub fn pad_bits(&self) -> usize {
        self.words_per_row * 64 - self.row_bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Payload size of the packed bits in bytes.
    pub fn payload_bytes(&self) -> usize {
        self.words.len() * 8
    }

    pub fn unpack(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.rows() * self.row_bits);
        for r in 0..self.rows() {
            let row = self.row(r);
            for i in 0..self.row_bits {
                data.push(if row[i / 64] >> (i % 64) & 1 == 1 { 1.0 } else { -1.0 });
            }
        }
        Tensor::new(self.shape.clone(), data).expect("packed shape is consistent")
    }
}

/// `2 * popcount(XNOR(a, b)) - n` over rows of `n` logical bits whose pad bits are zero.
#[inline]
pub fn xnor_dot_words(a: &[u64], b: &[u64], n: usize) -> i64 {
    debug_assert_eq!(a.len(), b.len());
    let pad = (a.len() * 64 - n) as i64;
    let matches: i64 = a.iter().zip(b).map(|(x, y)| (!(x ^ y)).count_ones() as i64).sum();
    2 * (matches - pad) - n as i64
}

/// Integer dot product of row `ra` of `a` with row `rb` of `b`.
pub fn xnor_dot(a: &PackedBitTensor, ra: usize, b: &PackedBitTensor, rb: usize) -> Result<i64> {
    if a.row_bits != b.row_bits {
        return Err(shape_err(
            "xnor_dot",
            format!("row lengths differ: {} vs {}", a.row_bits, b.row_bits),
        ));
    }
    if ra >= a.rows() || rb >= b.rows() {
        return Err(shape_err("xnor_dot", "row index out of range"));
    }
    Ok(xnor_dot_words(a.row(ra), b.row(rb), a.row_bits))
}

fn check_gamma(gamma: &[f64], out_channels: usize) -> Result<()> {
    if gamma.len() != out_channels && gamma.len() != 1 {
        return Err(shape_err(
            "binary kernel",
            format!("{} scales for {} output channels", gamma.len(), out_channels),
        ));
    }
    Ok(())
}

#[inline]
fn gamma_at(gamma: &[f64], o: usize) -> f64 {
    if gamma.len() == 1 {
        gamma[0]
    } else {
        gamma[o]
    }
}

/// `y[n, o] = gamma[o] * <a[n], w[o]>` for packed `a[N, I]` and `w[O, I]`.
pub fn binary_linear(a: &PackedBitTensor, w: &PackedBitTensor, gamma: &[f64]) -> Result<Tensor> {
    if a.row_bits != w.row_bits {
        return Err(shape_err(
            "binary_linear",
            format!("input width {} vs weight width {}", a.row_bits, w.row_bits),
        ));
    }
    let (n, o) = (a.rows(), w.rows());
    check_gamma(gamma, o)?;
    let mut out = Vec::with_capacity(n * o);
    for i in 0..n {
        for j in 0..o {
            let acc = xnor_dot_words(a.row(i), w.row(j), a.row_bits);
            out.push(acc as f64 * gamma_at(gamma, j));
        }
    }
    Tensor::new(vec![n, o], out)
}

/// Binary convolution of a packed `a[N, C, H, W]` with packed `w[O, C, K, K]`.
///
/// Spatial padding has no `+-1` encoding, so padded taps are packed as `-1`
/// and each output position adds back the sum of the kernel weights that fell
/// on padding. The result equals the zero-padded float convolution of the
/// unpacked operands exactly, scaled per output channel by `gamma`.
pub fn binary_conv2d(
    a: &PackedBitTensor,
    w: &PackedBitTensor,
    gamma: &[f64],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (sa, sw) = (a.shape(), w.shape());
    if sa.len() != 4 || sw.len() != 4 || sa[1] != sw[1] || sw[2] != sw[3] {
        return Err(shape_err("binary_conv2d", format!("input {:?}, kernel {:?}", sa, sw)));
    }
    let geom = ConvGeom::new(sa[1], sw[0], sw[2], stride, pad);
    let (batch, h, wd) = (sa[0], sa[2], sa[3]);
    let (oh, ow) = geom.output_hw(h, wd)?;
    let plane = oh * ow;
    let (o, ck) = (geom.out_channels, geom.patch_len());
    check_gamma(gamma, o)?;

    // Which taps of each output position land on padding: im2col of an
    // all-zero image padded with ones.
    let mut pad_cols = vec![0.0; ck * plane];
    if pad > 0 {
        im2col(&vec![0.0; geom.in_channels * h * wd], h, wd, &geom, 1.0, &mut pad_cols);
    }
    let weights = w.unpack();
    let wv = weights.data();
    // correction[o][p] = sum of w[o, tap] over padded taps at position p
    let mut correction = vec![0i64; o * plane];
    if pad > 0 {
        for p in 0..plane {
            for tap in 0..ck {
                if pad_cols[tap * plane + p] != 0.0 {
                    for oc in 0..o {
                        correction[oc * plane + p] += wv[oc * ck + tap] as i64;
                    }
                }
            }
        }
    }

    let words = words_for(ck);
    let mut patch = vec![0u64; plane * words];
    let mut cols = vec![0.0; ck * plane];
    let mut out = vec![0.0; batch * o * plane];
    for n in 0..batch {
        let img = a.unpack_row(n);
        im2col(&img, h, wd, &geom, -1.0, &mut cols);
        patch.fill(0);
        for tap in 0..ck {
            let (word, bit) = (tap / 64, tap % 64);
            for p in 0..plane {
                if cols[tap * plane + p] > 0.0 {
                    patch[p * words + word] |= 1u64 << bit;
                }
            }
        }
        for oc in 0..o {
            let wrow = w.row(oc);
            let g = gamma_at(gamma, oc);
            let dst = &mut out[(n * o + oc) * plane..(n * o + oc + 1) * plane];
            for (p, y) in dst.iter_mut().enumerate() {
                let acc = xnor_dot_words(&patch[p * words..(p + 1) * words], wrow, ck) + correction[oc * plane + p];
                *y = acc as f64 * g;
            }
        }
    }
    Tensor::new(vec![batch, o, oh, ow], out)
}

impl PackedBitTensor {
    fn unpack_row(&self, r: usize) -> Vec<f64> {
        let row = self.row(r);
        (0..self.row_bits)
            .map(|i| if row[i / 64] >> (i % 64) & 1 == 1 { 1.0 } else { -1.0 })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub float_seconds: f64,
    pub packed_seconds: f64,
    pub float_gmacs: f64,
    pub packed_gmacs: f64,
    pub ratio: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    xs[xs.len() / 2]
}

/// Times an `n x n x n` float GEMM against the packed XNOR/popcount product,
/// reporting the median of `reps` runs for each size.
pub fn bench_gemm(sizes: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if reps == 0 {
        return Err(invalid("bench needs at least one repetition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if n == 0 {
            return Err(invalid("bench size must be positive"));
        }
        let mut rand_pm = |len: usize| -> Vec<f64> {
            (0..len).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
        };
        let a = Tensor::new(vec![n, n], rand_pm(n * n))?;
        let b = Tensor::new(vec![n, n], rand_pm(n * n))?;
        let pa = PackedBitTensor::from_values(&a, vec![1.0])?;
        let pb = PackedBitTensor::from_values(&b, vec![1.0])?;

        let mut ft = Vec::with_capacity(reps);
        let mut pt = Vec::with_capacity(reps);
        let mut float_out = vec![0.0; n * n];
        for _ in 0..reps {
            float_out.fill(0.0);
            let t0 = Instant::now();
            gemm_nt(n, n, n, a.data(), b.data(), &mut float_out);
            ft.push(t0.elapsed().as_secs_f64());

            let t0 = Instant::now();
            let packed_out = binary_linear(&pa, &pb, &[1.0])?;
            pt.push(t0.elapsed().as_secs_f64());
            if packed_out.data() != float_out.as_slice() {
                return Err(invalid("packed and float products disagree"));
            }
        }
        let (fs, ps) = (median(ft), median(pt));
        let macs = (n * n * n) as f64 / 1e9;
        rows.push(BenchRow {
            n,
            float_seconds: fs,
            packed_seconds: ps,
            float_gmacs: macs / fs,
            packed_gmacs: macs / ps,
            ratio: fs / ps,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: std::io::Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use rand::Rng;

    fn pm(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    fn random_pm(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = numel(shape);
        Tensor::new(shape.to_vec(), (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()).unwrap()
    }

    #[test]
    fn pack_examples() {
        let p = PackedBitTensor::from_values(&pm(&[1.0, -1.0, 1.0]), vec![1.0]).unwrap();
        assert_eq!(p.words(), &[0b101]);
        assert_eq!(p.pad_bits(), 61);
        let p = PackedBitTensor::from_values(&Tensor::full([64], 1.0), vec![1.0]).unwrap();
        assert_eq!(p.words(), &[u64::MAX]);
        assert_eq!(p.pad_bits(), 0);
        assert!(PackedBitTensor::from_values(&pm(&[1.0, 0.0]), vec![1.0]).is_err());
    }

    #[test]
    fn raw_words_with_dirty_pad_rejected() {
        assert!(PackedBitTensor::from_raw(vec![3], vec![0b1101], vec![1.0]).is_err());
        assert!(PackedBitTensor::from_raw(vec![3], vec![0b101], vec![1.0]).is_ok());
    }

    #[test]
    fn xnor_dot_examples() {
        let a = PackedBitTensor::from_values(&Tensor::new([1, 3], vec![1.0, -1.0, 1.0]).unwrap(), vec![1.0]).unwrap();
        let b = PackedBitTensor::from_values(&Tensor::new([1, 3], vec![1.0, 1.0, -1.0]).unwrap(), vec![1.0]).unwrap();
        assert_eq!(xnor_dot(&a, 0, &b, 0).unwrap(), -1);
        assert_eq!(xnor_dot(&a, 0, &a, 0).unwrap(), 3);
        let c = PackedBitTensor::from_values(&Tensor::new([1, 4], vec![1.0; 4]).unwrap(), vec![1.0]).unwrap();
        assert!(xnor_dot(&a, 0, &c, 0).is_err());
    }

    #[test]
    fn xnor_dot_matches_float_dot_for_small_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=12 {
            for _ in 0..10_000 / 12 {
                let a = random_pm(&mut rng, &[1, n]);
                let b = random_pm(&mut rng, &[1, n]);
                let want: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
                let pa = PackedBitTensor::from_values(&a, vec![1.0]).unwrap();
                let pb = PackedBitTensor::from_values(&b, vec![1.0]).unwrap();
                assert_eq!(xnor_dot(&pa, 0, &pb, 0).unwrap(), want as i64);
            }
        }
    }

    #[test]
    fn xnor_dot_exhaustive_n8() {
        for x in 0u64..256 {
            for y in 0u64..256 {
                let want: i64 = (0..8).map(|i| if (x >> i & 1) == (y >> i & 1) { 1 } else { -1 }).sum();
                assert_eq!(xnor_dot_words(&[x], &[y], 8), want);
            }
        }
    }

    #[test]
    fn conv_of_ones() {
        let a = PackedBitTensor::from_values(&Tensor::full([1, 1, 3, 3], 1.0), vec![1.0]).unwrap();
        let w = PackedBitTensor::from_values(&Tensor::full([1, 1, 3, 3], 1.0), vec![2.0]).unwrap();
        let y = binary_conv2d(&a, &w, &[2.0], 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[18.0]);
    }

    #[test]
    fn one_by_one_kernel_is_xnor_dot_per_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_pm(&mut rng, &[1, 70, 2, 2]);
        let w = random_pm(&mut rng, &[3, 70, 1, 1]);
        let pa = PackedBitTensor::from_values(&a, vec![1.0]).unwrap();
        let pw = PackedBitTensor::from_values(&w, vec![1.0]).unwrap();
        let y = binary_conv2d(&pa, &pw, &[1.0], 1, 0).unwrap();
        for p in 0..4 {
            let col: Vec<f64> = (0..70).map(|c| a.data()[c * 4 + p]).collect();
            let pc = PackedBitTensor::from_values(&Tensor::new([1, 70], col).unwrap(), vec![1.0]).unwrap();
            for o in 0..3 {
                let wo = PackedBitTensor::from_values(
                    &Tensor::new([1, 70], w.data()[o * 70..(o + 1) * 70].to_vec()).unwrap(),
                    vec![1.0],
                )
                .unwrap();
                assert_eq!(y.data()[o * 4 + p], xnor_dot(&pc, 0, &wo, 0).unwrap() as f64);
            }
        }
    }

    fn float_reference(a: &Tensor, w: &Tensor, gamma: &[f64], stride: usize, pad: usize) -> Tensor {
        let mut tape = Tape::new();
        let av = tape.constant(a).unwrap();
        let wv = tape.constant(w).unwrap();
        let y = tape.conv2d(av, wv, stride, pad).unwrap();
        let g = tape.constant(&Tensor::from_vec(gamma.to_vec())).unwrap();
        let y = tape.scale_channels(y, g).unwrap();
        tape.tensor(y)
    }

    #[test]
    fn conv_matches_float_reference_on_random_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let n = rng.gen_range(1..3);
            let c = rng.gen_range(1..12);
            let o = rng.gen_range(1..6);
            let k = rng.gen_range(1..4);
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..3);
            let h = rng.gen_range(k.max(2)..9);
            let wd = rng.gen_range(k.max(2)..9);
            let a = random_pm(&mut rng, &[n, c, h, wd]);
            let w = random_pm(&mut rng, &[o, c, k, k]);
            let gamma: Vec<f64> = (0..o).map(|_| rng.gen_range(0.01..2.0)).collect();
            let pa = PackedBitTensor::from_values(&a, vec![1.0]).unwrap();
            let pw = PackedBitTensor::from_values(&w, gamma.clone()).unwrap();
            let got = binary_conv2d(&pa, &pw, &gamma, stride, pad).unwrap();
            let want = float_reference(&a, &w, &gamma, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (x, y) in got.data().iter().zip(want.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn scaling_gamma_scales_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_pm(&mut rng, &[1, 4, 5, 5]);
        let w = random_pm(&mut rng, &[2, 4, 3, 3]);
        let pa = PackedBitTensor::from_values(&a, vec![1.0]).unwrap();
        let pw = PackedBitTensor::from_values(&w, vec![1.0]).unwrap();
        let base = binary_conv2d(&pa, &pw, &[0.75, 1.5], 1, 1).unwrap();
        let scaled = binary_conv2d(&pa, &pw, &[1.5, 3.0], 1, 1).unwrap();
        for (x, y) in base.data().iter().zip(scaled.data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn linear_matches_float() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_pm(&mut rng, &[5, 130]);
        let w = random_pm(&mut rng, &[7, 130]);
        let gamma: Vec<f64> = (0..7).map(|i| 0.1 * (i + 1) as f64).collect();
        let got = binary_linear(
            &PackedBitTensor::from_values(&a, vec![1.0]).unwrap(),
            &PackedBitTensor::from_values(&w, vec![1.0]).unwrap(),
            &gamma,
        )
        .unwrap();
        let mut raw = vec![0.0; 35];
        gemm_nt(5, 130, 7, a.data(), w.data(), &mut raw);
        for (i, v) in raw.iter().enumerate() {
            assert_eq!(got.data()[i], v * gamma[i % 7]);
        }
    }

    #[test]
    fn bench_reports_median_and_agrees() {
        let rows = bench_gemm(&[64, 256], 5, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.float_seconds > 0.0 && r.packed_seconds > 0.0));
        // the packed product does 64 MACs per popcount; it must win at this size
        assert!(rows[1].ratio > 1.0, "ratio {}", rows[1].ratio);
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("n,float_seconds"));
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(bits in prop::collection::vec(any::<bool>(), 1..1000)) {
            let t = Tensor::from_vec(bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect());
            let p = PackedBitTensor::from_values(&t, vec![1.0]).unwrap();
            prop_assert_eq!(p.unpack(), t);
            let last = *p.words().last().unwrap();
            if p.pad_bits() > 0 {
                prop_assert_eq!(last >> (64 - p.pad_bits()), 0);
            }
        }
    }
}
