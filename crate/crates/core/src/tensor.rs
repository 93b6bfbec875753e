//! Dense row-major `f64` tensors and the forward kernels used by the tape.

use rand::Rng;

use crate::error::{Error, Result};

/// Smallest argument passed to `ln` by [`log_clamped`].
pub const LOG_EPSILON: f64 = 1e-12;

/// An n-dimensional array of `f64` values in row-major order.
///
/// A rank-0 shape `[]` is a scalar holding one value. Every dimension of a
/// non-scalar shape is strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Config(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension { op: "tensor", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let n: usize = shape.iter().product();
        Self { shape, data: (0..n).map(&mut f).collect() }
    }

    /// Uniform samples in `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`.
    pub fn glorot_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::from_fn(shape, |_| rng.gen_range(-limit..=limit))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension { op: "reshape", lhs: self.shape, rhs: shape });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute element-wise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Matrix product of `[m, k]` by `[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
    }
    Ok((a.shape[0], a.shape[1], b.shape[1]))
}

/// Geometry of a same-padded convolution over an `H×W×Cin` map.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvGeometry {
    pub fn check(input: &Tensor, filter: &Tensor, bias: &Tensor) -> Result<Self> {
        if input.shape.len() != 3 {
            return Err(Error::Dimension { op: "conv", lhs: input.shape.clone(), rhs: filter.shape.clone() });
        }
        if filter.shape.len() != 4 || filter.shape[0] != filter.shape[1] {
            return Err(Error::Config(format!("conv filter must be k×k×Cin×Cout, got {:?}", filter.shape)));
        }
        let k = filter.shape[0];
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("same-padded conv needs an odd kernel size, got {k}")));
        }
        let (h, w, cin) = (input.shape[0], input.shape[1], input.shape[2]);
        if filter.shape[2] != cin {
            return Err(Error::Dimension { op: "conv", lhs: input.shape.clone(), rhs: filter.shape.clone() });
        }
        let cout = filter.shape[3];
        if bias.shape != [cout] {
            return Err(Error::Dimension { op: "conv bias", lhs: filter.shape.clone(), rhs: bias.shape.clone() });
        }
        Ok(Self { h, w, cin, cout, k })
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for every in-bounds kernel tap.
    #[inline]
    pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = (self.k / 2) as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        for y in 0..h {
            for x in 0..w {
                let out_px = (y * w + x) as usize;
                for dy in -r..=r {
                    let iy = y + dy;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for dx in -r..=r {
                        let ix = x + dx;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        let tap = ((dy + r) as usize) * self.k + (dx + r) as usize;
                        f(out_px, (iy * w + ix) as usize, tap);
                    }
                }
            }
        }
    }
}

/// Same-padded 2-D convolution of an `H×W×Cin` map with a `k×k×Cin×Cout`
/// filter (`k` odd, zero padding of `(k-1)/2`).
pub fn conv_same(input: &Tensor, filter: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = ConvGeometry::check(input, filter, bias)?;
    let mut out = vec![0.0; g.h * g.w * g.cout];
    for px in 0..g.h * g.w {
        out[px * g.cout..(px + 1) * g.cout].copy_from_slice(&bias.data);
    }
    let tap_stride = g.cin * g.cout;
    g.for_each_tap(|out_px, in_px, tap| {
        let x = &input.data[in_px * g.cin..(in_px + 1) * g.cin];
        let o = &mut out[out_px * g.cout..(out_px + 1) * g.cout];
        let fw = &filter.data[tap * tap_stride..(tap + 1) * tap_stride];
        for (ci, &xv) in x.iter().enumerate() {
            let frow = &fw[ci * g.cout..(ci + 1) * g.cout];
            for (ov, &fv) in o.iter_mut().zip(frow) {
                *ov += xv * fv;
            }
        }
    });
    Ok(Tensor { shape: vec![g.h, g.w, g.cout], data: out })
}

/// 1×1 convolution: each output channel vector is `filterᵀ · input + bias`.
pub fn conv1x1(input: &Tensor, filter: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if filter.shape.len() != 4 || filter.shape[0] != 1 || filter.shape[1] != 1 {
        return Err(Error::Dimension { op: "conv1x1", lhs: input.shape.clone(), rhs: filter.shape.clone() });
    }
    conv_same(input, filter, bias)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `ln(max(x, LOG_EPSILON))`; NaN stays NaN.
pub fn log_clamped(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    x.max(LOG_EPSILON).ln()
}

/// Numerically stable softmax over all elements (max-subtracted).
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor { shape: logits.shape.clone(), data: exps.into_iter().map(|e| e / total).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros([m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    fn sliding_window(input: &Tensor, filter: &Tensor, bias: &Tensor) -> Tensor {
        let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (k, cout) = (filter.shape()[0], filter.shape()[3]);
        let pad = (k as i64 - 1) / 2;
        let mut out = Tensor::zeros([h, w, cout]);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for co in 0..cout {
                    let mut s = bias.data()[co];
                    for ky in 0..k as i64 {
                        for kx in 0..k as i64 {
                            let (iy, ix) = (y + ky - pad, x + kx - pad);
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            for ci in 0..cin {
                                let iv = input.data()[((iy as usize) * w + ix as usize) * cin + ci];
                                let fv = filter.data()[(((ky as usize) * k + kx as usize) * cin + ci) * cout + co];
                                s += iv * fv;
                            }
                        }
                    }
                    out.data_mut()[((y as usize) * w + x as usize) * cout + co] = s;
                }
            }
        }
        out
    }

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([0, 3], vec![]).is_err());
        assert_eq!(Tensor::new([], vec![4.0]).unwrap().item(), 4.0);
    }

    #[test]
    fn matmul_hand_cases() {
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let col = Tensor::new([2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &col).unwrap(), col);
        let row = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = random(&[4, 5], &mut rng);
            let b = random(&[5, 3], &mut rng);
            assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        }
    }

    #[test]
    fn conv1x1_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 3, 4], &mut rng);
        let mut eye = Tensor::zeros([1, 1, 4, 4]);
        for c in 0..4 {
            eye.data_mut()[c * 4 + c] = 1.0;
        }
        assert_eq!(conv1x1(&x, &eye, &Tensor::zeros([4])).unwrap(), x);

        let px = Tensor::new([1, 1, 2], vec![2.0, 5.0]).unwrap();
        let f = Tensor::new([1, 1, 2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new([1], vec![0.5]).unwrap();
        assert_eq!(conv1x1(&px, &f, &b).unwrap().data(), &[7.5]);

        for _ in 0..100 {
            let x = random(&[3, 3, 4], &mut rng);
            let f = random(&[1, 1, 4, 2], &mut rng);
            let b = random(&[2], &mut rng);
            let got = conv1x1(&x, &f, &b).unwrap();
            for px in 0..9 {
                for co in 0..2 {
                    let dot: f64 = (0..4).map(|ci| x.data()[px * 4 + ci] * f.data()[ci * 2 + co]).sum();
                    assert!((got.data()[px * 2 + co] - (dot + b.data()[co])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv1x1_channel_mismatch() {
        let err = conv1x1(&Tensor::zeros([2, 2, 3]), &Tensor::zeros([1, 1, 4, 2]), &Tensor::zeros([2]));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_same_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zero = Tensor::zeros([3, 3, 2, 2]);
        let b = Tensor::new([2], vec![0.25, -1.0]).unwrap();
        let out = conv_same(&random(&[4, 4, 2], &mut rng), &zero, &b).unwrap();
        for px in 0..16 {
            assert_eq!(&out.data()[px * 2..px * 2 + 2], b.data());
        }
        assert!(matches!(
            conv_same(&Tensor::zeros([4, 4, 2]), &Tensor::zeros([2, 2, 2, 2]), &Tensor::zeros([2])),
            Err(Error::Config(_))
        ));
        for _ in 0..100 {
            let x = random(&[4, 4, 2], &mut rng);
            let f = random(&[3, 3, 2, 2], &mut rng);
            let b = random(&[2], &mut rng);
            assert!(conv_same(&x, &f, &b).unwrap().max_abs_diff(&sliding_window(&x, &f, &b)) < 1e-12);
            let f1 = random(&[1, 1, 2, 3], &mut rng);
            let b1 = random(&[3], &mut rng);
            assert_eq!(conv_same(&x, &f1, &b1).unwrap(), conv1x1(&x, &f1, &b1).unwrap());
        }
    }

    #[test]
    fn scalar_functions() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(3.0), 3.0);
        assert_eq!(log_clamped(0.0), 1e-12f64.ln());
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::zeros([3]));
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::new([2], vec![1000.0, 0.0]).unwrap());
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
    }
}
