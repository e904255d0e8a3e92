//! Dense row-major `f64` tensors plus the raw kernels shared by forward ops
//! and their gradient rules.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense n-dimensional array of 64-bit floats, row-major.
///
/// Invariant: `shape.iter().product() == data.len()`, and every stored value
/// is finite after any public operation on finite inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::contract(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn rand_normal<R: Rng>(shape: &[usize], mean: f64, sd: f64, rng: &mut R) -> Self {
        let dist = Normal::new(mean, sd).expect("finite normal parameters");
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
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

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::DimensionMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// `self += scale * other`, elementwise over identical shapes.
    pub fn scaled_add_assign(&mut self, scale: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    /// Flat inner product over identical shapes.
    pub fn dot_flat(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        dot(&self.data, &other.data)
    }

    pub fn l2_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }
}

/// Inner product with four-lane accumulation. The fixed summation order keeps
/// results reproducible run to run.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let o = i * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m,p] += a[m,k] · b[k,p]`.
pub fn mm_accum(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += av * bv;
            }
        }
    }
}

/// `out[m,p] += a[m,k] · b[p,k]ᵀ` (rows of `a` dotted with rows of `b`).
pub fn mm_abt_accum(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), p * k);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * p..(i + 1) * p];
        for (j, c) in crow.iter_mut().enumerate() {
            *c += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k,p] += a[m,k]ᵀ · b[m,p]`.
pub fn mm_atb_accum(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * p);
    debug_assert_eq!(out.len(), k * p);
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * p..(r + 1) * p];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut out[i * p..(i + 1) * p];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += av * bv;
            }
        }
    }
}

/// 2-D transpose into a fresh buffer.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a 2-D cross-correlation with zero padding.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn resolve(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        let mismatch = || Error::DimensionMismatch {
            op: "conv2d",
            lhs: input_shape.to_vec(),
            rhs: kernel_shape.to_vec(),
        };
        if input_shape.len() != 4 || kernel_shape.len() != 4 {
            return Err(mismatch());
        }
        let (n, c, h, w) = (
            input_shape[0],
            input_shape[1],
            input_shape[2],
            input_shape[3],
        );
        let (f, kc, kh, kw) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
        );
        if kc != c {
            return Err(mismatch());
        }
        if stride < 1 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(mismatch());
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_rows(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfold padded input windows into a `[n·oh·ow, c·kh·kw]` matrix.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.out_rows() * plen];
    let (h, w) = (g.h as isize, g.w as isize);
    for n in 0..g.n {
        let in_base = n * g.c * g.h * g.w;
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let row = ((n * g.oh + oh) * g.ow + ow) * plen;
                let mut col = 0;
                for c in 0..g.c {
                    let ch_base = in_base + c * g.h * g.w;
                    for ki in 0..g.kh {
                        let i = (oh * g.stride + ki) as isize - g.pad as isize;
                        for kj in 0..g.kw {
                            let j = (ow * g.stride + kj) as isize - g.pad as isize;
                            if i >= 0 && i < h && j >= 0 && j < w {
                                cols[row + col] =
                                    input[ch_base + (i as usize) * g.w + j as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the column matrix back onto input geometry (adjoint of
/// [`im2col`]).
pub fn col2im_accum(cols: &[f64], g: &ConvGeom, input_grad: &mut [f64]) {
    let plen = g.patch_len();
    debug_assert_eq!(cols.len(), g.out_rows() * plen);
    debug_assert_eq!(input_grad.len(), g.n * g.c * g.h * g.w);
    let (h, w) = (g.h as isize, g.w as isize);
    for n in 0..g.n {
        let in_base = n * g.c * g.h * g.w;
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let row = ((n * g.oh + oh) * g.ow + ow) * plen;
                let mut col = 0;
                for c in 0..g.c {
                    let ch_base = in_base + c * g.h * g.w;
                    for ki in 0..g.kh {
                        let i = (oh * g.stride + ki) as isize - g.pad as isize;
                        for kj in 0..g.kw {
                            let j = (ow * g.stride + kj) as isize - g.pad as isize;
                            if i >= 0 && i < h && j >= 0 && j < w {
                                input_grad[ch_base + (i as usize) * g.w + j as usize] +=
                                    cols[row + col];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_is_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn mm_matches_hand_product() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut out = vec![0.0; 2];
        mm_accum(&a, &b, 2, 2, 1, &mut out);
        assert_eq!(out, vec![3.0, 7.0]);
    }

    #[test]
    fn mm_variants_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        use rand::SeedableRng;
        let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let mut c0 = vec![0.0; 6];
        mm_accum(a.data(), b.data(), 3, 4, 2, &mut c0);

        let bt = transpose(b.data(), 4, 2);
        let mut c1 = vec![0.0; 6];
        mm_abt_accum(a.data(), &bt, 3, 4, 2, &mut c1);

        let at = transpose(a.data(), 3, 4);
        let mut c2 = vec![0.0; 6];
        mm_atb_accum(&at, b.data(), 4, 3, 2, &mut c2);

        for i in 0..6 {
            assert!((c0[i] - c1[i]).abs() < 1e-12);
            assert!((c0[i] - c2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeom::resolve(&[2, 3, 5, 5], &[4, 3, 3, 3], 2, 1).unwrap();
        let x = Tensor::rand_uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng);
        let y: Vec<f64> = (0..g.out_rows() * g.patch_len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let cols = im2col(x.data(), &g);
        let lhs = dot(&cols, &y);
        let mut back = vec![0.0; x.numel()];
        col2im_accum(&y, &g, &mut back);
        let rhs = dot(x.data(), &back);
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::resolve(&[1, 1, 28, 28], &[16, 1, 3, 3], 1, 1).unwrap();
        assert_eq!((g.oh, g.ow), (28, 28));
        let g = ConvGeom::resolve(&[1, 1, 28, 28], &[16, 1, 3, 3], 1, 0).unwrap();
        assert_eq!((g.oh, g.ow), (26, 26));
        assert!(ConvGeom::resolve(&[1, 1, 2, 2], &[1, 1, 5, 5], 1, 0).is_err());
    }
}
