//! Analytic vector-Jacobian products for the kernels in [`super`].
//!
//! Each function takes what the forward pass produced (or consumed) plus the
//! upstream gradient, and returns the gradient with respect to the inputs.

use super::Matrix;
use crate::error::{Error, Result};

/// For `c = a · b`: returns `(dc · bᵀ, aᵀ · dc)`.
pub fn matmul(a: &Matrix, b: &Matrix, dc: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((dc.matmul_t(b)?, a.t_matmul(dc)?))
}

/// For `c = a ⊙ b`.
pub fn hadamard(a: &Matrix, b: &Matrix, dc: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((dc.hadamard(b)?, dc.hadamard(a)?))
}

pub fn scale(factor: f64, dc: &Matrix) -> Matrix {
    dc.scale(factor)
}

pub fn transpose(dc: &Matrix) -> Matrix {
    dc.transpose()
}

/// For the 1×cols mean of `rows` rows: every input row receives `dmean / rows`.
pub fn row_mean(rows: usize, dmean: &Matrix) -> Result<Matrix> {
    if dmean.rows() != 1 {
        return Err(Error::shape("row_mean backward", (1, dmean.cols()), dmean.shape()));
    }
    let mut out = Matrix::zeros(rows, dmean.cols());
    if rows == 0 {
        return Ok(out);
    }
    let inv = 1.0 / rows as f64;
    for r in 0..rows {
        for (o, d) in out.row_mut(r).iter_mut().zip(dmean.data()) {
            *o = d * inv;
        }
    }
    Ok(out)
}

/// For `s = sigmoid(x)`, given the forward output `s`.
pub fn sigmoid(s: &Matrix, ds: &Matrix) -> Result<Matrix> {
    s.same_shape(ds, "sigmoid backward")?;
    let data = s
        .data()
        .iter()
        .zip(ds.data())
        .map(|(&s, &d)| d * s * (1.0 - s))
        .collect();
    Matrix::from_vec(s.rows(), s.cols(), data)
}

/// For `y = relu(x)`, given the forward input `x`. The subgradient at 0 is 0.
pub fn relu(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    x.same_shape(dy, "relu backward")?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// For `s = softmax_rows(x)`, given the forward output `s`.
pub fn softmax_rows(s: &Matrix, ds: &Matrix) -> Result<Matrix> {
    s.same_shape(ds, "softmax backward")?;
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let (sr, dr) = (s.row(r), ds.row(r));
        let dot: f64 = sr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((o, &sv), &dv) in out.row_mut(r).iter_mut().zip(sr).zip(dr) {
            *o = sv * (dv - dot);
        }
    }
    Ok(out)
}

/// For `y = x + 1ᵀ·row`: the row receives the column sums of `dy`.
pub fn add_row_broadcast(dy: &Matrix) -> Matrix {
    dy.sum_rows()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numeric_gradient};
    use crate::tensor::Rng;

    const TOL: f64 = 1e-3;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Scalar objective `sum(out ⊙ weights)` so the upstream gradient is `weights`.
    fn dot(m: &Matrix, w: &Matrix) -> f64 {
        m.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = Rng::new(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let w = random(&mut rng, 3, 2);
        let (da, db) = matmul(&a, &b, &w).unwrap();
        let na = numeric_gradient(&a, |x| dot(&x.matmul(&b).unwrap(), &w));
        let nb = numeric_gradient(&b, |x| dot(&a.matmul(x).unwrap(), &w));
        assert!(max_relative_error(&da, &na) < TOL);
        assert!(max_relative_error(&db, &nb) < TOL);
    }

    #[test]
    fn hadamard_and_scale_gradients() {
        let mut rng = Rng::new(2);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 4);
        let w = random(&mut rng, 3, 4);
        let (da, db) = hadamard(&a, &b, &w).unwrap();
        let na = numeric_gradient(&a, |x| dot(&x.hadamard(&b).unwrap(), &w));
        let nb = numeric_gradient(&b, |x| dot(&a.hadamard(x).unwrap(), &w));
        assert!(max_relative_error(&da, &na) < TOL);
        assert!(max_relative_error(&db, &nb) < TOL);
        let ns = numeric_gradient(&a, |x| dot(&x.scale(-1.7), &w));
        assert!(max_relative_error(&scale(-1.7, &w), &ns) < TOL);
        let wt = random(&mut rng, 4, 3);
        let nt = numeric_gradient(&a, |x| dot(&x.transpose(), &wt));
        assert!(max_relative_error(&transpose(&wt), &nt) < TOL);
    }

    #[test]
    fn row_mean_gradient() {
        let mut rng = Rng::new(3);
        let x = random(&mut rng, 3, 4);
        let w = random(&mut rng, 1, 4);
        let analytic = row_mean(3, &w).unwrap();
        let numeric = numeric_gradient(&x, |m| dot(&m.row_mean(), &w));
        assert!(max_relative_error(&analytic, &numeric) < TOL);
    }

    #[test]
    fn sigmoid_relu_softmax_gradients() {
        let mut rng = Rng::new(4);
        let x = random(&mut rng, 3, 4).scale(3.0);
        let w = random(&mut rng, 3, 4);
        let s = x.sigmoid();
        let numeric = numeric_gradient(&x, |m| dot(&m.sigmoid(), &w));
        assert!(max_relative_error(&sigmoid(&s, &w).unwrap(), &numeric) < TOL);

        let numeric = numeric_gradient(&x, |m| dot(&m.relu(), &w));
        assert!(max_relative_error(&relu(&x, &w).unwrap(), &numeric) < TOL);

        let sm = x.softmax_rows();
        let numeric = numeric_gradient(&x, |m| dot(&m.softmax_rows(), &w));
        assert!(max_relative_error(&softmax_rows(&sm, &w).unwrap(), &numeric) < TOL);
    }

    #[test]
    fn bias_broadcast_gradient() {
        let mut rng = Rng::new(5);
        let x = random(&mut rng, 3, 4);
        let bias = random(&mut rng, 1, 4);
        let w = random(&mut rng, 3, 4);
        let numeric = numeric_gradient(&bias, |b| {
            let mut y = x.clone();
            y.add_row_broadcast(b).unwrap();
            dot(&y, &w)
        });
        assert!(max_relative_error(&add_row_broadcast(&w), &numeric) < TOL);
    }
}
