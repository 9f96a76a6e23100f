//! Gaussian product-kernel density estimation in log space.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::Tensor2;

/// Dimension above which the estimate is dominated by the `d·log h` term
/// and becomes numerically uninformative.
pub const HIGH_DIMENSION_WARNING: usize = 64;

/// Rule-of-thumb bandwidth `1.05·N^(−1/5)`.
pub fn bandwidth(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("bandwidth of an empty sample".into()));
    }
    Ok(1.05 * (n as f64).powf(-0.2))
}

/// `P(x) = 1/(N·h^d) Σ_i Π_k φ((x_k − x_ik)/h)` over a fixed support set.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeModel {
    support: Tensor2,
    bandwidth: f64,
    /// `−log N − d·log h − (d/2)·log 2π`
    log_norm: f64,
}

impl KdeModel {
    /// Fits on `support` with the rule-of-thumb bandwidth.
    pub fn fit(support: Tensor2) -> Result<Self> {
        let h = bandwidth(support.rows())?;
        Self::with_bandwidth(support, h)
    }

    pub fn with_bandwidth(support: Tensor2, bandwidth: f64) -> Result<Self> {
        if support.rows() == 0 || support.cols() == 0 {
            return Err(Error::InvalidArgument("KDE support must be non-empty".into()));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidArgument(format!("bandwidth must be > 0, got {bandwidth}")));
        }
        if !support.is_finite() {
            return Err(Error::NonFinite("KDE support"));
        }
        let d = support.cols() as f64;
        if support.cols() > HIGH_DIMENSION_WARNING {
            log::warn!(
                "KDE over {} dimensions: density differences are dominated by dimension",
                support.cols()
            );
        }
        let log_norm =
            -(support.rows() as f64).ln() - d * bandwidth.ln() - 0.5 * d * (2.0 * PI).ln();
        Ok(Self {
            support,
            bandwidth,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.support.cols()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn support(&self) -> &Tensor2 {
        &self.support
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape("KDE query", self.dim(), x.len()));
        }
        Ok(())
    }

    /// Kernel exponents `−‖x − x_i‖²/(2h²)` and their maximum.
    fn exponents(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let two_h2 = 2.0 * self.bandwidth * self.bandwidth;
        let mut max = f64::NEG_INFINITY;
        let e: Vec<f64> = self
            .support
            .iter_rows()
            .map(|xi| {
                let sq: f64 = xi.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                let v = -sq / two_h2;
                max = max.max(v);
                v
            })
            .collect();
        (e, max)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("KDE query"));
        }
        let (e, max) = self.exponents(x);
        let sum: f64 = e.iter().map(|v| (v - max).exp()).sum();
        Ok(max + sum.ln() + self.log_norm)
    }

    /// `∇ log P(x) = Σ_i w_i (x_i − x)/h²` with `w = softmax(exponents)`.
    pub fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("KDE query"));
        }
        let (e, max) = self.exponents(x);
        let w: Vec<f64> = e.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let h2 = self.bandwidth * self.bandwidth;
        let mut grad = vec![0.0; x.len()];
        for (wi, xi) in w.iter().zip(self.support.iter_rows()) {
            let coef = wi / total / h2;
            for (g, (a, b)) in grad.iter_mut().zip(xi.iter().zip(x)) {
                *g += coef * (a - b);
            }
        }
        Ok(grad)
    }

    pub fn log_density_rows(&self, x: &Tensor2) -> Result<Vec<f64>> {
        x.iter_rows().map(|r| self.log_density(r)).collect()
    }

    pub fn grad_log_density_rows(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.dim() {
            return Err(Error::shape("KDE batch", self.dim(), x.cols()));
        }
        let mut data = Vec::with_capacity(x.rows() * x.cols());
        for r in x.iter_rows() {
            data.extend(self.grad_log_density(r)?);
        }
        Tensor2::new(x.rows(), x.cols(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandwidth_values() {
        assert_eq!(bandwidth(1).unwrap(), 1.05);
        // 100^-0.2 = 10^-0.4
        assert!((bandwidth(100).unwrap() - 1.05 * 10f64.powf(-0.4)).abs() < 1e-15);
        assert!((bandwidth(100).unwrap() - 0.41801).abs() < 1e-4);
        assert!(bandwidth(0).is_err());
        for n in 1..200 {
            assert!(bandwidth(n).unwrap() > bandwidth(n + 1).unwrap());
        }
    }

    #[test]
    fn single_kernel_at_its_centre() {
        let kde = KdeModel::fit(Tensor2::new(1, 1, vec![0.3]).unwrap()).unwrap();
        let h = kde.bandwidth();
        let want = (1.0 / (h * (2.0 * PI).sqrt())).ln();
        assert!((kde.log_density(&[0.3]).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn single_kernel_gradient_closed_form() {
        let kde = KdeModel::with_bandwidth(Tensor2::new(1, 2, vec![1.0, -1.0]).unwrap(), 0.5).unwrap();
        let g = kde.grad_log_density(&[0.5, 0.0]).unwrap();
        assert_eq!(g, vec![0.5 / 0.25, -1.0 / 0.25]);
    }

    #[test]
    fn symmetric_support_has_zero_gradient() {
        let kde = KdeModel::fit(Tensor2::new(2, 1, vec![-0.7, 0.7]).unwrap()).unwrap();
        assert_eq!(kde.grad_log_density(&[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn far_query_stays_finite() {
        let kde = KdeModel::fit(Tensor2::new(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let lp = kde.log_density(&[1e3, -1e3, 1e3]).unwrap();
        assert!(lp.is_finite());
        assert!(kde.grad_log_density(&[1e3, -1e3, 1e3]).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn dimension_mismatch() {
        let kde = KdeModel::fit(Tensor2::new(2, 2, vec![0.0; 4]).unwrap()).unwrap();
        assert!(kde.log_density(&[0.0]).is_err());
        assert!(kde.grad_log_density(&[0.0, 0.0, 0.0]).is_err());
    }
}
