//! RBF kernels and the biased HSIC estimator used as the bottleneck penalty.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Rows with a smaller norm are divided by this instead.
pub const NORM_FLOOR: f64 = 1e-12;

/// Symmetric RBF Gram matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: Array2<f64>,
    sigma2: f64,
}

impl KernelMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    /// Wraps an arbitrary square matrix, e.g. for testing the estimator.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::Shape(format!("kernel matrix {:?} is not square", values.dim())));
        }
        Ok(Self {
            values,
            sigma2: f64::NAN,
        })
    }
}

/// `K_ij = exp(−‖x_i − x_j‖² / (2σ²))`.
pub fn rbf_kernel(samples: ArrayView2<'_, f64>, sigma2: f64) -> Result<KernelMatrix> {
    if !(sigma2 > 0.0) {
        return Err(Error::Config(format!("kernel bandwidth must be positive, got {sigma2}")));
    }
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::Shape(format!("kernel needs at least 2 samples, got {n}")));
    }
    let sq: Array1<f64> = samples.map_axis(Axis(1), |r| r.dot(&r));
    let gram = samples.dot(&samples.t());
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        values[[i, i]] = 1.0;
        for j in i + 1..n {
            let dist = (sq[i] + sq[j] - 2.0 * gram[[i, j]]).max(0.0);
            let k = (-dist / (2.0 * sigma2)).exp();
            values[[i, j]] = k;
            values[[j, i]] = k;
        }
    }
    Ok(KernelMatrix { values, sigma2 })
}

/// `H K H` without forming `H = I − 11ᵀ/n`.
fn double_center(k: &Array2<f64>) -> Array2<f64> {
    let n = k.nrows() as f64;
    let row_mean = k.mean_axis(Axis(1)).expect("non-empty");
    let col_mean = k.mean_axis(Axis(0)).expect("non-empty");
    let total = row_mean.sum() / n;
    let mut out = k.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        *v += total - row_mean[i] - col_mean[j];
    }
    out
}

/// Biased estimator `(n−1)⁻² Tr(K_X H K_Y H)`.
pub fn hsic_estimate(kx: &KernelMatrix, ky: &KernelMatrix) -> Result<f64> {
    let n = kx.size();
    if n != ky.size() {
        return Err(Error::Shape(format!("kernel sizes {n} and {} differ", ky.size())));
    }
    if n < 2 {
        return Err(Error::Shape("HSIC needs at least 2 samples".into()));
    }
    // Tr(K_X H K_Y H) = Σ_ij (H K_X H)_ij (K_Y)_ji
    let centered = double_center(&kx.values);
    let trace: f64 = centered
        .indexed_iter()
        .map(|((i, j), &c)| c * ky.values[[j, i]])
        .sum();
    Ok(trace / ((n - 1) as f64).powi(2))
}

/// Row-aligned samples from the denoised-graph and original-graph
/// representations for a batch of distinct users.
#[derive(Debug, Clone, PartialEq)]
pub struct HsicBatch {
    pub users: Vec<usize>,
    pub denoised: Array2<f64>,
    pub original: Array2<f64>,
}

impl HsicBatch {
    /// Deduplicates `users` (sorted) and gathers their rows.
    pub fn gather(
        denoised: ArrayView2<'_, f64>,
        original: ArrayView2<'_, f64>,
        users: &[usize],
    ) -> Result<Self> {
        if denoised.dim() != original.dim() {
            return Err(Error::Shape(format!(
                "representation shapes {:?} and {:?} differ",
                denoised.dim(),
                original.dim()
            )));
        }
        let mut users = users.to_vec();
        users.sort_unstable();
        users.dedup();
        if users.len() < 2 {
            return Err(Error::Data(format!(
                "bottleneck needs at least 2 distinct users, got {}",
                users.len()
            )));
        }
        if let Some(&u) = users.iter().find(|&&u| u >= denoised.nrows()) {
            return Err(Error::Data(format!("user {u} out of range")));
        }
        Ok(Self {
            denoised: denoised.select(Axis(0), &users),
            original: original.select(Axis(0), &users),
            users,
        })
    }
}

fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_FLOOR));
    let mut out = x.clone();
    for (mut row, &n) in out.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row /= n;
    }
    (out, norms)
}

/// HSIC between the batch users' denoised-graph and original-graph rows,
/// L2-normalizing each row first.
pub fn bottleneck_loss(
    reps_denoised: ArrayView2<'_, f64>,
    reps_original: ArrayView2<'_, f64>,
    batch_users: &[usize],
    sigma2: f64,
) -> Result<f64> {
    let batch = HsicBatch::gather(reps_denoised, reps_original, batch_users)?;
    Ok(bottleneck_with_grad(&batch, sigma2, true, false)?.0)
}

/// Bottleneck value and, when `want_grad`, gradients with respect to the
/// (unnormalized) denoised and original batch rows.
pub(crate) fn bottleneck_with_grad(
    batch: &HsicBatch,
    sigma2: f64,
    normalize: bool,
    want_grad: bool,
) -> Result<(f64, Option<(Array2<f64>, Array2<f64>)>)> {
    let (x, x_norms) = if normalize {
        let (x, n) = normalize_rows(&batch.denoised);
        (x, Some(n))
    } else {
        (batch.denoised.clone(), None)
    };
    let (y, y_norms) = if normalize {
        let (y, n) = normalize_rows(&batch.original);
        (y, Some(n))
    } else {
        (batch.original.clone(), None)
    };
    let kx = rbf_kernel(x.view(), sigma2)?;
    let ky = rbf_kernel(y.view(), sigma2)?;
    let value = hsic_estimate(&kx, &ky)?;
    if !want_grad {
        return Ok((value, None));
    }

    let n = batch.users.len();
    let scale = 1.0 / ((n - 1) as f64).powi(2);
    // ∂HSIC/∂K_X = (n−1)⁻² H K_Y H, and symmetrically for K_Y.
    let gkx = double_center(&ky.values) * scale;
    let gky = double_center(&kx.values) * scale;
    let gx = kernel_input_grad(&x, &kx.values, &gkx, sigma2);
    let gy = kernel_input_grad(&y, &ky.values, &gky, sigma2);
    let gx = match x_norms {
        Some(norms) => normalize_backward(&x, &norms, gx),
        None => gx,
    };
    let gy = match y_norms {
        Some(norms) => normalize_backward(&y, &norms, gy),
        None => gy,
    };
    Ok((value, Some((gx, gy))))
}

/// `∂/∂x_i Σ_jk G_jk K_jk` for an RBF kernel and symmetric `G`:
/// `−(2/σ²) Σ_j G_ij K_ij (x_i − x_j)`.
fn kernel_input_grad(x: &Array2<f64>, k: &Array2<f64>, g: &Array2<f64>, sigma2: f64) -> Array2<f64> {
    let p = g * k;
    let row_sums = p.sum_axis(Axis(1));
    let mut out = p.dot(x);
    for (mut row, (&s, xi)) in out
        .axis_iter_mut(Axis(0))
        .zip(row_sums.iter().zip(x.axis_iter(Axis(0))))
    {
        row.zip_mut_with(&xi, |o, &xv| *o -= s * xv);
    }
    out * (2.0 / sigma2)
}

/// Backward of `x̂ = x / max(‖x‖, floor)` given the normalized rows.
fn normalize_backward(unit: &Array2<f64>, norms: &Array1<f64>, grad_unit: Array2<f64>) -> Array2<f64> {
    let mut out = grad_unit;
    for ((mut g, u), &n) in out
        .axis_iter_mut(Axis(0))
        .zip(unit.axis_iter(Axis(0)))
        .zip(norms.iter())
    {
        if n > NORM_FLOOR {
            let proj = g.dot(&u);
            g.zip_mut_with(&u, |gv, &uv| *gv -= proj * uv);
        }
        g /= n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn identical_rows_give_ones() {
        let x = array![[0.3, 1.0], [0.3, 1.0], [0.3, 1.0]];
        let k = rbf_kernel(x.view(), 1.0).unwrap();
        assert!(k.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_point_kernel() {
        let x = array![[0.0], [1.0]];
        let k = rbf_kernel(x.view(), 0.5).unwrap();
        assert_abs_diff_eq!(k.values()[[0, 1]], 0.367879, epsilon = 1e-6);
        assert_eq!(k.values()[[0, 0]], 1.0);
    }

    #[test]
    fn wide_bandwidth_tends_to_ones() {
        let x = array![[0.0, 5.0], [1.0, -3.0], [2.0, 2.0]];
        let k = rbf_kernel(x.view(), 1e12).unwrap();
        assert!(k.values().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn bad_bandwidth_and_sizes() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(rbf_kernel(x.view(), 0.0), Err(Error::Config(_))));
        assert!(rbf_kernel(x.slice(ndarray::s![..1, ..]), 1.0).is_err());
        let k2 = rbf_kernel(x.view(), 1.0).unwrap();
        let k3 = rbf_kernel(array![[0.0], [1.0], [2.0]].view(), 1.0).unwrap();
        assert!(matches!(hsic_estimate(&k2, &k3), Err(Error::Shape(_))));
    }

    #[test]
    fn closed_form_two_point_hsic() {
        let x = array![[0.0], [1.0]];
        let k = rbf_kernel(x.view(), 0.5).unwrap();
        let expected = (1.0 - (-1f64).exp()).powi(2);
        assert_abs_diff_eq!(hsic_estimate(&k, &k).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.399576, epsilon = 1e-6);
    }

    #[test]
    fn constant_kernel_annihilated() {
        let x = array![[0.0, 1.0], [2.0, 0.5], [1.0, -1.0], [0.2, 0.2]];
        let kx = rbf_kernel(x.view(), 0.7).unwrap();
        let ones = KernelMatrix::from_values(Array2::ones((4, 4))).unwrap();
        assert_abs_diff_eq!(hsic_estimate(&kx, &ones).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn repeated_user_is_rejected() {
        let r = array![[0.1, 0.2], [0.3, 0.4]];
        assert!(matches!(
            bottleneck_loss(r.view(), r.view(), &[1, 1, 1], 1.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn identical_representations_are_maximally_dependent() {
        let r = array![[0.1, 0.2], [0.3, -0.4], [-0.5, 0.1], [0.9, 0.9]];
        let v = bottleneck_loss(r.view(), r.view(), &[0, 1, 2, 3], 0.25).unwrap();
        assert!(v > 0.0);
    }
}
