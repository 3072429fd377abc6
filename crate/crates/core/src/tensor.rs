//! Dense multi-dimensional array type and the numeric kernels the rest of
//! the crate is built on: same-padded 2-D convolution, elementwise ops,
//! activations and reductions.
//!
//! Values are 64-bit reals in row-major order. Tensors are immutable once
//! constructed; every kernel returns a fresh tensor.

use crate::error::{Error, Result};

/// Elementwise nonlinearity applied by [`activation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Linear,
}

/// Dense row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "Tensor::from_vec",
                "element count",
                format!("{:?} (= {} elements, all extents positive)", shape, expect),
                data.len(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a rank-1-or-scalar tensor. Panics if more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        debug_assert_eq!(self.rank(), 3);
        let (s1, s2) = (self.shape[1], self.shape[2]);
        self.data[(i * s1 + j) * s2 + k] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| v * alpha)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Reinterpret the flat data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// Extract index `idx` along the last axis; result drops that axis.
    pub fn select_last_axis(&self, idx: usize) -> Tensor {
        let c = *self.shape.last().expect("select on rank-0 tensor");
        assert!(idx < c, "channel {} out of {}", idx, c);
        let lead: usize = self.data.len() / c;
        let mut data = Vec::with_capacity(lead);
        for p in 0..lead {
            data.push(self.data[p * c + idx]);
        }
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[..self.shape.len() - 1].to_vec()
        };
        Tensor { shape, data }
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(
            op,
            "shape",
            format!("{:?}", a.shape),
            format!("{:?}", b.shape),
        ));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("add", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("sub", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    })
}

/// Elementwise (Hadamard) product of two same-shape tensors.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("hadamard", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // exp underflow can saturate to exactly 0 or 1; keep the open interval
    // so downstream gate invariants (|H| < 1) hold.
    s.max(f64::MIN_POSITIVE).min(1.0_f64.next_down())
}

/// Elementwise activation. Sigmoid maps into (0,1), tanh into (-1,1),
/// linear is the identity.
pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(f64::tanh),
        Activation::Linear => x.clone(),
    }
}

/// Matrix product of a `(r, k)` by a `(k, c)` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::invalid(
            "matmul",
            format!("expected rank-2 operands, got {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (r, k) = (a.shape[0], a.shape[1]);
    let (k2, c) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape("matmul", "inner extent", k, k2));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * c..(p + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![r, c],
        data: out,
    })
}

/// Broadcast-add a bias vector along the last axis.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = *x.shape.last().unwrap();
    if bias.rank() != 1 || bias.shape[0] != c {
        return Err(Error::shape("add_bias", "bias extent", c, bias.len()));
    }
    let mut out = x.data.clone();
    for chunk in out.chunks_mut(c) {
        for (o, &b) in chunk.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Zero-padded stride-1 2-D convolution preserving spatial extent.
///
/// * `input` is `H x W x Cin`, `kernels` is `Kh x Kw x Cin x Cout` with odd
///   `Kh`, `Kw`, and `bias` has `Cout` entries. Out-of-bounds taps read zero.
pub fn conv2d_same(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::invalid(
            "conv2d_same",
            format!("input must be H x W x Cin, got {:?}", input.shape),
        ));
    }
    if kernels.rank() != 4 {
        return Err(Error::invalid(
            "conv2d_same",
            format!("kernels must be Kh x Kw x Cin x Cout, got {:?}", kernels.shape),
        ));
    }
    let (h, w, cin) = (input.shape[0], input.shape[1], input.shape[2]);
    let (kh, kw, kcin, cout) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(
            "conv2d_same",
            format!("kernel extents must be odd, got {}x{}", kh, kw),
        ));
    }
    if kcin != cin {
        return Err(Error::shape("conv2d_same", "input channels", cin, kcin));
    }
    if bias.rank() != 1 || bias.shape[0] != cout {
        return Err(Error::shape("conv2d_same", "bias extent", cout, bias.len()));
    }

    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; h * w * cout];
    for oy in 0..h {
        for ox in 0..w {
            let orow = &mut out[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
            orow.copy_from_slice(&bias.data);
            for dy in 0..kh {
                let iy = oy as isize + dy as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ix = ox as isize + dx as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = ((iy as usize) * w + ix as usize) * cin;
                    let kbase = (dy * kw + dx) * cin * cout;
                    for ci in 0..cin {
                        let iv = input.data[ibase + ci];
                        let krow = &kernels.data[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += iv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![h, w, cout],
        data: out,
    })
}

/// Gradient of `conv2d_same` with respect to its input.
///
/// `grad` is the upstream `H x W x Cout` gradient; returns `H x W x Cin`.
pub fn conv2d_same_grad_input(grad: &Tensor, kernels: &Tensor) -> Tensor {
    let (h, w, cout) = (grad.shape[0], grad.shape[1], grad.shape[2]);
    let (kh, kw, cin) = (kernels.shape[0], kernels.shape[1], kernels.shape[2]);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; h * w * cin];
    for iy in 0..h {
        for ix in 0..w {
            let orow = &mut out[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
            for dy in 0..kh {
                let oy = iy as isize - (dy as isize - ph as isize);
                if oy < 0 || oy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ox = ix as isize - (dx as isize - pw as isize);
                    if ox < 0 || ox >= w as isize {
                        continue;
                    }
                    let gbase = ((oy as usize) * w + ox as usize) * cout;
                    let kbase = (dy * kw + dx) * cin * cout;
                    for (ci, o) in orow.iter_mut().enumerate() {
                        let krow = &kernels.data[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let grow = &grad.data[gbase..gbase + cout];
                        let mut acc = 0.0;
                        for (&g, &kv) in grow.iter().zip(krow) {
                            acc += g * kv;
                        }
                        *o += acc;
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![h, w, cin],
        data: out,
    }
}

/// Gradient of `conv2d_same` with respect to the kernels.
pub fn conv2d_same_grad_kernels(grad: &Tensor, input: &Tensor, kh: usize, kw: usize) -> Tensor {
    let (h, w, cout) = (grad.shape[0], grad.shape[1], grad.shape[2]);
    let cin = input.shape[2];
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; kh * kw * cin * cout];
    for oy in 0..h {
        for ox in 0..w {
            let grow = &grad.data[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
            for dy in 0..kh {
                let iy = oy as isize + dy as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ix = ox as isize + dx as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = ((iy as usize) * w + ix as usize) * cin;
                    let kbase = (dy * kw + dx) * cin * cout;
                    for ci in 0..cin {
                        let iv = input.data[ibase + ci];
                        let orow = &mut out[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (o, &g) in orow.iter_mut().zip(grow) {
                            *o += iv * g;
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![kh, kw, cin, cout],
        data: out,
    }
}

/// Gradient of `conv2d_same` with respect to the bias: per-channel sum.
pub fn conv2d_same_grad_bias(grad: &Tensor) -> Tensor {
    let cout = grad.shape[2];
    let mut out = vec![0.0; cout];
    for chunk in grad.data.chunks(cout) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    Tensor {
        shape: vec![cout],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity_for_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let h = rng.random_range(1..6);
            let w = rng.random_range(1..6);
            let c = rng.random_range(1..4);
            let input = random_tensor(&mut rng, &[h, w, c]);
            // 1x1 kernel mapping each channel to itself.
            let mut k = Tensor::zeros(&[1, 1, c, c]);
            for ci in 0..c {
                k.data_mut()[ci * c + ci] = 1.0;
            }
            let out = conv2d_same(&input, &k, &Tensor::zeros(&[c])).unwrap();
            assert_eq!(out, input);
        }
    }

    #[test]
    fn all_ones_3x3_kernel_on_ones_input() {
        let input = Tensor::ones(&[3, 3, 1]);
        let k = Tensor::ones(&[3, 3, 1, 1]);
        let out = conv2d_same(&input, &k, &Tensor::zeros(&[1])).unwrap();
        // Zero padding: corners see 4 taps, edge midpoints 6, center 9.
        assert_eq!(out.at3(1, 1, 0), 9.0);
        assert_eq!(out.at3(0, 1, 0), 6.0);
        assert_eq!(out.at3(1, 0, 0), 6.0);
        assert_eq!(out.at3(0, 0, 0), 4.0);
        assert_eq!(out.at3(2, 2, 0), 4.0);
    }

    #[test]
    fn zero_kernel_broadcasts_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, &[4, 5, 2]);
        let k = Tensor::zeros(&[3, 3, 2, 3]);
        let bias = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = conv2d_same(&input, &k, &bias).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.at3(y, x, 0), 0.5);
                assert_eq!(out.at3(y, x, 1), -1.0);
                assert_eq!(out.at3(y, x, 2), 2.0);
            }
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = random_tensor(&mut rng, &[4, 4, 2]);
            let y = random_tensor(&mut rng, &[4, 4, 2]);
            let k = random_tensor(&mut rng, &[3, 3, 2, 2]);
            let b0 = Tensor::zeros(&[2]);
            let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let lhs = conv2d_same(
                &add(&x.scale(alpha), &y.scale(beta)).unwrap(),
                &k,
                &b0,
            )
            .unwrap();
            let rhs = add(
                &conv2d_same(&x, &k, &b0).unwrap().scale(alpha),
                &conv2d_same(&y, &k, &b0).unwrap().scale(beta),
            )
            .unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                assert!((l - r).abs() < 1e-12, "linearity violated: {} vs {}", l, r);
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let input = Tensor::ones(&[3, 3, 2]);
        let even = Tensor::ones(&[2, 2, 2, 1]);
        assert!(conv2d_same(&input, &even, &Tensor::zeros(&[1])).is_err());
        let wrong_cin = Tensor::ones(&[3, 3, 3, 1]);
        let err = conv2d_same(&input, &wrong_cin, &Tensor::zeros(&[1])).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn hadamard_basics() {
        let a = Tensor::from_vec(vec![2], vec![2.0, 3.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![4.0, 5.0]).unwrap();
        assert_eq!(hadamard(&a, &b).unwrap().data(), &[8.0, 15.0]);
        assert_eq!(hadamard(&a, &Tensor::ones(&[2])).unwrap(), a);
        assert_eq!(
            hadamard(&a, &Tensor::zeros(&[2])).unwrap(),
            Tensor::zeros(&[2])
        );
        let c = Tensor::zeros(&[3]);
        assert!(hadamard(&a, &c).is_err());
    }

    #[test]
    fn activation_values() {
        let x = Tensor::scalar(0.0);
        assert_eq!(activation(&x, Activation::Sigmoid).item(), 0.5);
        assert_eq!(activation(&x, Activation::Tanh).item(), 0.0);
        let y = Tensor::from_vec(vec![3], vec![-2.0, 0.5, 7.0]).unwrap();
        assert_eq!(activation(&y, Activation::Linear), y);
    }

    #[test]
    fn sigmoid_strictly_inside_unit_interval() {
        let xs = Tensor::from_vec(vec![7], vec![-750.0, -30.0, -1.0, 0.0, 1.0, 30.0, 750.0]).unwrap();
        let s = activation(&xs, Activation::Sigmoid);
        for &v in s.data() {
            assert!(v > 0.0 && v < 1.0, "sigmoid escaped (0,1): {}", v);
        }
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn select_last_axis_picks_channel() {
        let x = Tensor::from_vec(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let c1 = x.select_last_axis(1);
        assert_eq!(c1.shape(), &[2, 2]);
        assert_eq!(c1.data(), &[1.0, 3.0, 5.0, 7.0]);
    }
}
