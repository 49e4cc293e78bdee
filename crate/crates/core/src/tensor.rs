//! Dense row-major f64 tensors and the kernels everything else is built on.
//!
//! All arithmetic is 64-bit and single-threaded; given identical inputs the
//! outputs are bit-identical across runs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(
                format!("{shape:?}"),
                format!("data of length {}", data.len()),
            ));
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

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let m = rows.len();
        let n = if m == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            assert_eq!(r.len(), n, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![m, n],
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Number of rows when viewed as a matrix ([n] counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let n = self.cols();
        self.data[i * n + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Raw little-endian byte image of the payload, for fingerprints and
    /// bitwise comparisons.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn shape_err(a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension(format!("{:?}", a.shape()), format!("{:?}", b.shape()))
}

// ── Matrix kernels ───────────────────────────────────────────────────

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Two banks of lane-wise accumulators: the fixed-size inner loops map
    // onto vector registers and the banks keep two chains in flight.
    const L: usize = 8;
    let mut acc0 = [0.0f64; L];
    let mut acc1 = [0.0f64; L];
    let mut ca = a.chunks_exact(2 * L);
    let mut cb = b.chunks_exact(2 * L);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..L {
            acc0[l] += xa[l] * xb[l];
        }
        for l in 0..L {
            acc1[l] += xa[L + l] * xb[L + l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let mut s = tail;
    for l in 0..L {
        s += acc0[l] + acc1[l];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a [m,k] × b [k,n] → [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() > 2 || b.rank() > 2 || a.cols() != b.rows() {
        return Err(shape_err(a, b));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let crow = &mut c[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            axpy(av, &b.data[t * n..(t + 1) * n], crow);
        }
    }
    let shape = if a.rank() == 1 && b.rank() == 2 {
        vec![n]
    } else {
        vec![m, n]
    };
    debug_assert_eq!(k, b.rows());
    Tensor::new(shape, c)
}

/// `a [m,k] × bᵀ where b is [n,k] → [m,n]`. Row-dot-row, cache friendly.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() > 2 || b.rank() > 2 || a.cols() != b.cols() {
        return Err(shape_err(a, b));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv = dot(arow, b.row(j));
        }
    }
    let shape = if a.rank() == 1 { vec![n] } else { vec![m, n] };
    Tensor::new(shape, c)
}

/// `aᵀ × b` where a is [m,k], b is [m,n] → [k,n].
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() > 2 || a.rows() != b.rows() {
        return Err(shape_err(a, b));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = &b.data[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            axpy(av, brow, &mut c[t * n..(t + 1) * n]);
        }
    }
    let _ = m;
    Tensor::new(vec![k, n], c)
}

/// Matrix-vector product `a [m,n] × x [n] → [m]`.
pub fn matvec(a: &Tensor, x: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || x.rank() != 1 || a.cols() != x.numel() {
        return Err(shape_err(a, x));
    }
    let m = a.rows();
    let mut out = vec![0.0; m];
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(a.row(i), x.data());
    }
    Ok(Tensor::vector(out))
}

/// Outer product `u [m] ⊗ v [n] → [m,n]`.
pub fn outer(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    if u.rank() != 1 || v.rank() != 1 {
        return Err(shape_err(u, v));
    }
    let (m, n) = (u.numel(), v.numel());
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        let ui = u.data()[i];
        for j in 0..n {
            data[i * n + j] = ui * v.data()[j];
        }
    }
    Tensor::new(vec![m, n], data)
}

pub fn transpose(a: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2);
    let (m, n) = (a.rows(), a.cols());
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor {
        shape: vec![n, m],
        data,
    }
}

// ── Elementwise and reductions ───────────────────────────────────────

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(shape_err(a, b));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(shape_err(a, b));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    })
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(shape_err(a, b));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

pub fn sum(a: &Tensor) -> f64 {
    a.data.iter().sum()
}

// ── Nonlinearities ───────────────────────────────────────────────────

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Elementwise GELU (tanh form).
pub fn gelu(a: &Tensor) -> Tensor {
    a.map(gelu_scalar)
}

/// Row-wise softmax over the last axis. Rows sum to 1 within 1e-12.
pub fn softmax(a: &Tensor) -> Result<Tensor> {
    let n = a.cols();
    if n == 0 {
        return Err(Error::Contract("softmax over empty axis".into()));
    }
    let m = a.numel() / n;
    let mut out = a.data.clone();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: out,
    })
}

pub const LAYERNORM_EPS: f64 = 1e-12;

/// Row standardization (mean 0, variance 1) followed by the learned affine.
pub fn layernorm(a: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let n = a.cols();
    if n == 0 {
        return Err(Error::Contract("layernorm over empty axis".into()));
    }
    if gain.numel() != n || shift.numel() != n {
        return Err(shape_err(a, gain));
    }
    let mut out = standardize_rows(a)?;
    let m = out.numel() / n;
    for i in 0..m {
        let row = &mut out.data[i * n..(i + 1) * n];
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * gain.data()[j] + shift.data()[j];
        }
    }
    Ok(out)
}

/// The normalization core without the affine part.
pub fn standardize_rows(a: &Tensor) -> Result<Tensor> {
    let n = a.cols();
    if n == 0 {
        return Err(Error::Contract("layernorm over empty axis".into()));
    }
    let m = a.numel() / n;
    let mut out = a.data.clone();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: out,
    })
}

/// `−log softmax(logits)[target]` for a single logit row.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    if logits.rank() != 1 {
        return Err(Error::Contract(format!(
            "cross_entropy expects a logit vector, got shape {:?}",
            logits.shape()
        )));
    }
    if target >= logits.numel() {
        return Err(Error::Contract(format!(
            "target {target} out of range for {} logits",
            logits.numel()
        )));
    }
    let max = logits.data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let z: f64 = logits.data.iter().map(|&v| (v - max).exp()).sum();
    Ok(z.ln() + max - logits.data[target])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::identity(2);
        let b = t2(&[&[3.0], &[5.0]]);
        let c = matmul(&i, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 5.0]);
    }

    #[test]
    fn matmul_worked_example() {
        // Oracle: triple-loop multiply by hand.
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t2(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "bad message: {msg}");
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = crate::rng::CounterRng::seed(2);
        let a = Tensor::new(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(vec![4, 5], (0..20).map(|_| rng.normal()).collect()).unwrap();
        let c = matmul(&a, &b).unwrap();
        let c_nt = matmul_nt(&a, &transpose(&b)).unwrap();
        let c_tn = matmul_tn(&transpose(&a), &b).unwrap();
        for i in 0..15 {
            assert!((c.data()[i] - c_nt.data()[i]).abs() < 1e-12);
            assert!((c.data()[i] - c_tn.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_associative_on_random_triples() {
        let mut rng = crate::rng::CounterRng::seed(42);
        for _ in 0..20 {
            let a = Tensor::new(vec![4, 3], (0..12).map(|_| rng.normal()).collect()).unwrap();
            let b = Tensor::new(vec![3, 5], (0..15).map(|_| rng.normal()).collect()).unwrap();
            let c = Tensor::new(vec![5, 2], (0..10).map(|_| rng.normal()).collect()).unwrap();
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            for (l, r) in left.data().iter().zip(right.data()) {
                assert!((l - r).abs() / scale < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_symmetry() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::CounterRng::seed(8);
        let a = Tensor::new(vec![7, 11], (0..77).map(|_| 4.0 * rng.normal()).collect()).unwrap();
        let s = softmax(&a).unwrap();
        for i in 0..7 {
            let total: f64 = s.row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_axis_is_contract_error() {
        let a = Tensor::zeros(&[3, 0]);
        assert!(matches!(softmax(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_uniform_two_way() {
        let l = Tensor::vector(vec![0.0, 0.0]);
        let ce = cross_entropy(&l, 0).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn layernorm_rows_standardized_before_affine() {
        let mut rng = crate::rng::CounterRng::seed(3);
        let a = Tensor::new(vec![5, 16], (0..80).map(|_| 2.0 * rng.normal() + 1.0).collect())
            .unwrap();
        let s = standardize_rows(&a).unwrap();
        for i in 0..5 {
            let row = s.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "var {var}");
        }
    }

    #[test]
    fn outer_and_matvec() {
        let u = Tensor::vector(vec![1.0, 2.0]);
        let v = Tensor::vector(vec![3.0, 4.0, 5.0]);
        let o = outer(&u, &v).unwrap();
        assert_eq!(o.shape(), &[2, 3]);
        assert_eq!(o.at(1, 2), 10.0);
        let a = t2(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let y = matvec(&a, &u).unwrap();
        assert_eq!(y.data(), &[1.0, 4.0]);
    }
}
