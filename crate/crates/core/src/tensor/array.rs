use super::{Result, Scalar, TensorError};

/// Dense row-major array. Shapes are mostly 2-D in this codebase (rows of
/// feature vectors); raw images are 3-D `[H, W, C]` and never enter the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Array<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Array {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let numel = shape.iter().product();
        Array {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: F) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 1 x n row vector.
    pub fn row(data: Vec<F>) -> Self {
        Array {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Array::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Collapse all leading axes: (rows, last-axis length).
    pub fn dims2(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.numel() / cols, cols)
    }

    /// Strict 2-D interpretation.
    pub fn as_mat(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "as_mat",
                shape: self.shape.clone(),
                reason: "expected a 2-D array".into(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Array::new(shape, self.data.clone())
    }
}

/// c += a @ b with a: p x q, b: q x r.
pub(crate) fn matmul_acc<F: Scalar>(c: &mut [F], a: &[F], b: &[F], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let crow = &mut c[i * r..(i + 1) * r];
        let arow = &a[i * q..(i + 1) * q];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * r..(k + 1) * r];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// c += a @ b^T with a: p x q, b: r x q.
pub(crate) fn matmul_nt_acc<F: Scalar>(
    c: &mut [F],
    a: &[F],
    b: &[F],
    p: usize,
    q: usize,
    r: usize,
) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            let dot: F = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            c[i * r + j] += dot;
        }
    }
}

/// c += a^T @ b with a: m x p, b: m x r.
pub(crate) fn matmul_tn_acc<F: Scalar>(
    c: &mut [F],
    a: &[F],
    b: &[F],
    m: usize,
    p: usize,
    r: usize,
) {
    for k in 0..m {
        let arow = &a[k * p..(k + 1) * p];
        let brow = &b[k * r..(k + 1) * r];
        for (i, &aki) in arow.iter().enumerate() {
            let crow = &mut c[i * r..(i + 1) * r];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aki * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_data_mismatch() {
        assert!(Array::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Array::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_kernels_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        matmul_acc(&mut c, &a, &b, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // a @ b == a @ (b^T)^T via matmul_nt
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0]; // 2x3
        let mut c2 = [0.0f64; 4];
        matmul_nt_acc(&mut c2, &a, &bt, 2, 3, 2);
        assert_eq!(c, c2);

        // a @ b == (a^T)^T @ b via matmul_tn
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        let mut c3 = [0.0f64; 4];
        matmul_tn_acc(&mut c3, &at, &b, 3, 2, 2);
        assert_eq!(c, c3);
    }
}
