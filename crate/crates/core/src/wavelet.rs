//! Orthonormal Haar wavelet pooling and unpooling.
//!
//! Kernel `K_XY` is the outer product of filter `X` along rows (the vertical
//! axis) with filter `Y` along columns (the horizontal axis):
//!
//! ```text
//! K_LL = ½[[ 1,  1], [ 1, 1]]    K_LH = ½[[-1, 1], [-1, 1]]
//! K_HL = ½[[-1, -1], [ 1, 1]]    K_HH = ½[[ 1,-1], [-1, 1]]
//! ```
//!
//! Pooling applies each kernel depthwise with stride 2. The four flattened
//! kernels are an orthonormal basis of R⁴, so unpooling (the transposed
//! convolution) inverts pooling exactly and preserves energy.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::moments::check_feature_map;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const LOW_PASS: [f64; 2] = [FRAC_1_SQRT_2, FRAC_1_SQRT_2];
pub const HIGH_PASS: [f64; 2] = [-FRAC_1_SQRT_2, FRAC_1_SQRT_2];

/// The filter pair and the four 2×2 kernels derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarFilters {
    pub low: [f64; 2],
    pub high: [f64; 2],
}

impl Default for HaarFilters {
    fn default() -> Self {
        Self {
            low: LOW_PASS,
            high: HIGH_PASS,
        }
    }
}

impl HaarFilters {
    /// Kernels in band order LL, LH, HL, HH, each row-major `[k00, k01, k10, k11]`.
    pub fn kernels(&self) -> [[f64; 4]; 4] {
        let outer = |row: [f64; 2], col: [f64; 2]| {
            [row[0] * col[0], row[0] * col[1], row[1] * col[0], row[1] * col[1]]
        };
        [
            outer(self.low, self.low),
            outer(self.low, self.high),
            outer(self.high, self.low),
            outer(self.high, self.high),
        ]
    }

    /// Gram matrix of the flattened kernels.
    pub fn gram(&self) -> [[f64; 4]; 4] {
        let k = self.kernels();
        let mut g = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                g[i][j] = (0..4).map(|t| k[i][t] * k[j][t]).sum();
            }
        }
        g
    }
}

// The exact kernel values; ±0.5 avoids rounding in 1/√2 · 1/√2.
const KERNELS: [[f64; 4]; 4] = [
    [0.5, 0.5, 0.5, 0.5],
    [-0.5, 0.5, -0.5, 0.5],
    [-0.5, -0.5, 0.5, 0.5],
    [0.5, -0.5, -0.5, 0.5],
];

/// The four half-resolution bands of one pooling step.
#[derive(Clone, Copy, Debug)]
pub struct WaveletBands<'t> {
    pub ll: Var<'t>,
    pub lh: Var<'t>,
    pub hl: Var<'t>,
    pub hh: Var<'t>,
}

impl<'t> WaveletBands<'t> {
    pub fn as_array(&self) -> [Var<'t>; 4] {
        [self.ll, self.lh, self.hl, self.hh]
    }

    pub fn high(&self) -> [Var<'t>; 3] {
        [self.lh, self.hl, self.hh]
    }

    pub fn shape(&self) -> Vec<usize> {
        self.ll.shape()
    }
}

/// Band `b` of the depthwise stride-2 transform of an `(N, C, H, W)` tensor.
fn analyze(x: &Tensor, band: usize) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (ho, wo) = (h / 2, w / 2);
    let k = KERNELS[band];
    let xd = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &xd[plane * h * w..][..h * w];
        let dst = &mut out[plane * ho * wo..][..ho * wo];
        for i in 0..ho {
            let (r0, r1) = (&src[2 * i * w..][..w], &src[(2 * i + 1) * w..][..w]);
            for j in 0..wo {
                dst[i * wo + j] = k[0] * r0[2 * j]
                    + k[1] * r0[2 * j + 1]
                    + k[2] * r1[2 * j]
                    + k[3] * r1[2 * j + 1];
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out).expect("band shape")
}

/// Adds `Σ_b band_b · K_b` into each 2×2 output block.
fn synthesize(bands: [Option<&Tensor>; 4], shape: &[usize]) -> Tensor {
    let [n, c, ho, wo] = [shape[0], shape[1], shape[2], shape[3]];
    let (h, w) = (2 * ho, 2 * wo);
    let mut out = vec![0.0; n * c * h * w];
    for (b, band) in bands.iter().enumerate() {
        let Some(band) = band else { continue };
        let k = KERNELS[b];
        let bd = band.data();
        for plane in 0..n * c {
            let src = &bd[plane * ho * wo..][..ho * wo];
            let dst = &mut out[plane * h * w..][..h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let v = src[i * wo + j];
                    dst[2 * i * w + 2 * j] += k[0] * v;
                    dst[2 * i * w + 2 * j + 1] += k[1] * v;
                    dst[(2 * i + 1) * w + 2 * j] += k[2] * v;
                    dst[(2 * i + 1) * w + 2 * j + 1] += k[3] * v;
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out).expect("unpooled shape")
}

/// Splits a feature map into its LL, LH, HL and HH bands.
pub fn wavelet_pool<'t>(x: Var<'t>) -> Result<WaveletBands<'t>> {
    let [_, _, h, w] = check_feature_map("wavelet_pool", &x)?;
    if h % 2 != 0 {
        return Err(Error::OddExtent { axis: "height", extent: h });
    }
    if w % 2 != 0 {
        return Err(Error::OddExtent { axis: "width", extent: w });
    }
    let value = x.value();
    let band = |b: usize| {
        x.tape().op(analyze(&value, b), &[x], move |g, _, _| {
            let mut bands = [None; 4];
            bands[b] = Some(g);
            vec![synthesize(bands, g.shape())]
        })
    };
    Ok(WaveletBands {
        ll: band(0),
        lh: band(1),
        hl: band(2),
        hh: band(3),
    })
}

/// Reassembles a map at twice the band resolution; the exact inverse of
/// [`wavelet_pool`].
pub fn wavelet_unpool<'t>(bands: &WaveletBands<'t>) -> Result<Var<'t>> {
    let shape = bands.ll.shape();
    check_feature_map("wavelet_unpool", &bands.ll)?;
    for b in bands.high() {
        if b.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "wavelet_unpool",
                lhs: shape,
                rhs: b.shape(),
            });
        }
    }
    let vals = bands.as_array().map(|b| b.value());
    let out = synthesize(
        [Some(&vals[0]), Some(&vals[1]), Some(&vals[2]), Some(&vals[3])],
        &shape,
    );
    Ok(bands.ll.tape().op(out, &bands.as_array(), |g, _, _| {
        (0..4).map(|b| analyze(g, b)).collect()
    }))
}

/// Total squared magnitude across all four bands.
pub fn wavelet_energy(bands: &WaveletBands<'_>) -> f64 {
    bands.as_array().iter().map(|b| b.value().sum_squares()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::SplitMix64;
    use crate::tape::Tape;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn filters_are_orthonormal() {
        let f = HaarFilters::default();
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        assert!((dot(f.low, f.low) - 1.0).abs() < 1e-15);
        assert!((dot(f.high, f.high) - 1.0).abs() < 1e-15);
        assert_eq!(dot(f.low, f.high), 0.0);
        let g = f.gram();
        for (i, row) in g.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_kernels_match_filter_products() {
        let derived = HaarFilters::default().kernels();
        for (d, k) in derived.iter().zip(KERNELS) {
            for (a, b) in d.iter().zip(k) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn golden_two_by_two() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = wavelet_pool(x).unwrap();
        let got: Vec<f64> = b.as_array().iter().map(|v| v.value().data()[0]).collect();
        assert_eq!(got, vec![5.0, 1.0, 2.0, 0.0]);
        assert_eq!(wavelet_energy(&b), 30.0);
        let back = wavelet_unpool(&b).unwrap();
        assert_eq!(back.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn constant_image() {
        let tape = Tape::new();
        let b = wavelet_pool(tape.constant(Tensor::full(&[1, 2, 4, 6], 3.0))).unwrap();
        assert!(b.ll.value().data().iter().all(|&v| v == 6.0));
        for band in b.high() {
            assert!(band.value().data().iter().all(|&v| v == 0.0));
        }

        let v = 1.75;
        let bands = WaveletBands {
            ll: tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0 * v)),
            lh: tape.constant(Tensor::zeros(&[1, 1, 1, 1])),
            hl: tape.constant(Tensor::zeros(&[1, 1, 1, 1])),
            hh: tape.constant(Tensor::zeros(&[1, 1, 1, 1])),
        };
        assert_eq!(wavelet_unpool(&bands).unwrap().value().data(), &[v; 4]);
    }

    #[test]
    fn shapes_and_errors() {
        let tape = Tape::new();
        let b = wavelet_pool(tape.constant(Tensor::zeros(&[2, 8, 16, 16]))).unwrap();
        for band in b.as_array() {
            assert_eq!(band.shape(), vec![2, 8, 8, 8]);
        }
        let odd = tape.constant(Tensor::zeros(&[1, 1, 4, 3]));
        match wavelet_pool(odd) {
            Err(Error::OddExtent { axis, extent }) => assert_eq!((axis, extent), ("width", 3)),
            other => panic!("{other:?}"),
        }
        let bad = WaveletBands {
            hh: tape.constant(Tensor::zeros(&[2, 8, 4, 8])),
            ..b
        };
        assert!(matches!(wavelet_unpool(&bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matches_depthwise_conv2d() {
        // independent route: per-channel conv2d with the filter-product kernels
        let x = random(&[2, 3, 6, 4], 5);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bands = wavelet_pool(xv).unwrap();
        let kernels = HaarFilters::default().kernels();
        for (b, band) in bands.as_array().iter().enumerate() {
            let k = tape.constant(Tensor::new(&[1, 1, 2, 2], kernels[b].to_vec()).unwrap());
            for n in 0..2 {
                for c in 0..3 {
                    let plane = Tensor::new(
                        &[1, 1, 6, 4],
                        x.data()[(n * 3 + c) * 24..][..24].to_vec(),
                    )
                    .unwrap();
                    let conv = tape.constant(plane).conv2d(k, 2, 0).unwrap().value();
                    let bv = band.value();
                    let got = &bv.data()[(n * 3 + c) * 6..][..6];
                    for (a, e) in got.iter().zip(conv.data()) {
                        assert!((a - e).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn roundtrip_energy_and_linearity() {
        let x = random(&[1, 3, 8, 8], 17);
        let y = random(&[1, 3, 8, 8], 18);
        let tape = Tape::new();
        let bx = wavelet_pool(tape.constant(x.clone())).unwrap();
        let back = wavelet_unpool(&bx).unwrap().value();
        assert!(back.max_abs_diff(&x) < 1e-12);
        assert!((wavelet_energy(&bx) - x.sum_squares()).abs() < 1e-9);

        let (a, b) = (0.7, -1.3);
        let mix = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let bm = wavelet_pool(tape.constant(mix)).unwrap();
        let by = wavelet_pool(tape.constant(y)).unwrap();
        for k in 0..4 {
            let (m, px, py) = (
                bm.as_array()[k].value(),
                bx.as_array()[k].value(),
                by.as_array()[k].value(),
            );
            for i in 0..m.len() {
                let want = a * px.data()[i] + b * py.data()[i];
                assert!((m.data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random(&[1, 2, 4, 4], 23);
        let weights = random(&[1, 2, 2, 2], 24);
        let err = grad_check(
            move |tape, x| {
                let b = wavelet_pool(x)?;
                let w = tape.constant(weights.clone());
                // weight the bands differently so every backward path matters
                let mixed = b.ll.mul(w)?.add(b.lh.square())?.add(b.hl.scale(3.0))?.sub(b.hh)?;
                Ok(mixed.square().sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let bands = random(&[4, 1, 2, 2], 25);
        let err = grad_check(
            |tape, v| {
                let parts: Vec<_> = (0..4).map(|i| v.narrow_batch(i)).collect::<Result<_>>()?;
                let out = wavelet_unpool(&WaveletBands {
                    ll: parts[0],
                    lh: parts[1],
                    hl: parts[2],
                    hh: parts[3],
                })?;
                let w = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 - 7.5));
                Ok(out.mul(w)?.square().sum())
            },
            &bands,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
