//! Forward kernels shared by the tape and the tape-free inference path, so
//! both produce bit-identical values.

use super::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2("matmul")?;
    let (k2, m) = b.dims2("matmul")?;
    if a.shape().len() != 2 || b.shape().len() != 2 || k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(n, m, out)
}

/// `a · bᵀ` without materialising the transpose.
pub(crate) fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let m = b.rows();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::matrix(n, m, out).expect("matmul_bt shape")
}

/// `aᵀ · b` without materialising the transpose.
pub(crate) fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let m = b.cols();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &bd[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(k, m, out).expect("matmul_at shape")
}

/// Adds a length-`k` row vector to every row of an `[n, k]` matrix.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2("add_row")?;
    if row.len() != k || row.shape().len() > 2 || (row.shape().len() == 2 && row.shape()[0] != 1) {
        return Err(Error::ShapeMismatch {
            op: "add_row",
            left: a.shape().to_vec(),
            right: row.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    let rd = row.data();
    for i in 0..n {
        for (o, &r) in out.data_mut()[i * k..(i + 1) * k].iter_mut().zip(rd) {
            *o += r;
        }
    }
    Ok(out)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2("softmax")?;
    if !a.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = a.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

pub fn log_clamped(a: &Tensor) -> Tensor {
    a.map(|v| v.max(LOG_FLOOR).ln())
}

/// Sum of each row, as an `[n, 1]` column.
pub fn sum_rows(a: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2("sum_rows")?;
    let data = (0..n).map(|i| a.data()[i * k..(i + 1) * k].iter().sum()).collect();
    Tensor::matrix(n, 1, data)
}

/// Concatenates two matrices with equal row counts side by side.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ka) = a.dims2("concat_cols")?;
    let (n2, kb) = b.dims2("concat_cols")?;
    if n != n2 {
        return Err(Error::ShapeMismatch {
            op: "concat_cols",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(n * (ka + kb));
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ka..(i + 1) * ka]);
        data.extend_from_slice(&b.data()[i * kb..(i + 1) * kb]);
    }
    Tensor::matrix(n, ka + kb, data)
}

pub fn column(a: &Tensor, j: usize) -> Result<Tensor> {
    let (n, k) = a.dims2("column")?;
    if j >= k {
        return Err(Error::InvalidShape {
            op: "column",
            msg: format!("column {j} out of range for shape {:?}", a.shape()),
        });
    }
    Tensor::matrix(n, 1, (0..n).map(|i| a.data()[i * k + j]).collect())
}

/// `sqrt(x² + ε²) − ε`: an everywhere-differentiable stand-in for `|x|`.
pub fn smooth_abs(x: f64, eps: f64) -> f64 {
    (x * x + eps * eps).sqrt() - eps
}
