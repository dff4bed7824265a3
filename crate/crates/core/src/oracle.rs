//! Independent numerical ground truth: finite differences and dense
//! symmetric eigenvalues.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    Absolute,
    /// `h_i = base_step * (1 + |x_i|)`.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Central2,
    Central4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub step_mode: StepMode,
    pub base_step: f64,
    pub scheme: Scheme,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step_mode: StepMode::Relative,
            base_step: 1e-5,
            scheme: Scheme::Central2,
        }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1e-9..=1e-2).contains(&self.base_step) {
            return Err(Error::Config(format!(
                "finite-difference base step {} outside [1e-9, 1e-2]",
                self.base_step
            )));
        }
        Ok(())
    }

    fn step(&self, xi: f64) -> f64 {
        match self.step_mode {
            StepMode::Absolute => self.base_step,
            StepMode::Relative => self.base_step * (1.0 + xi.abs()),
        }
    }

    /// Stencil as `(offset multiple, weight)`; the derivative is
    /// `sum(weight * g(x + multiple * h)) / h`.
    fn stencil(&self) -> &'static [(f64, f64)] {
        match self.scheme {
            Scheme::Central2 => &[(1.0, 0.5), (-1.0, -0.5)],
            Scheme::Central4 => &[
                (-2.0, 1.0 / 12.0),
                (-1.0, -8.0 / 12.0),
                (1.0, 8.0 / 12.0),
                (2.0, -1.0 / 12.0),
            ],
        }
    }
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(eval: F, x: &DVector<f64>, cfg: &FdConfig) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    cfg.validate()?;
    let mut out = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = cfg.step(x[i]);
        let mut acc = 0.0;
        for &(mult, weight) in cfg.stencil() {
            probe[i] = x[i] + mult * h;
            let v = eval(&probe)?;
            if !v.is_finite() {
                return Err(Error::NonFiniteProbe {
                    coordinate: i,
                    offset: mult * h,
                });
            }
            acc += weight * v;
        }
        probe[i] = x[i];
        out[i] = acc / h;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdHessian {
    /// `(H + H^T) / 2`.
    pub matrix: DMatrix<f64>,
    /// `max |H - H^T| / max(1, max |H|)` before symmetrization.
    pub asymmetry: f64,
}

/// Jacobian of a gradient map by central differences, symmetrized.
pub fn fd_hessian<F>(grad: F, x: &DVector<f64>, cfg: &FdConfig) -> Result<FdHessian>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    cfg.validate()?;
    let d = x.len();
    let mut raw = DMatrix::zeros(d, d);
    let mut probe = x.clone();
    for j in 0..d {
        let h = cfg.step(x[j]);
        let mut col = DVector::zeros(d);
        for &(mult, weight) in cfg.stencil() {
            probe[j] = x[j] + mult * h;
            let g = grad(&probe)?;
            if let Some(_) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteProbe {
                    coordinate: j,
                    offset: mult * h,
                });
            }
            col.axpy(weight, &g, 1.0);
        }
        probe[j] = x[j];
        raw.set_column(j, &(col / h));
    }
    let scale = raw.amax().max(1.0);
    let asymmetry = (&raw - raw.transpose()).amax() / scale;
    Ok(FdHessian {
        matrix: symmetrize(&raw),
        asymmetry,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub min: f64,
    pub max: f64,
    /// Ascending.
    pub values: Vec<f64>,
}

impl Spectrum {
    /// Largest eigenvalue magnitude, i.e. the spectral norm of a symmetric matrix.
    pub fn abs_max(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn spectral(m: &DMatrix<f64>) -> Spectrum {
    assert!(m.is_square(), "spectral() needs a square matrix");
    if m.is_empty() {
        return Spectrum {
            min: 0.0,
            max: 0.0,
            values: Vec::new(),
        };
    }
    let sym = symmetrize(m);
    let mut values: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().cloned().collect();
    values.sort_by(f64::total_cmp);
    Spectrum {
        min: values[0],
        max: values[values.len() - 1],
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = fd_gradient(|_| Ok(3.5), &dvector![1.0, -2.0], &FdConfig::default()).unwrap();
        assert_eq!(g, dvector![0.0, 0.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_exact() {
        for scheme in [Scheme::Central2, Scheme::Central4] {
            let cfg = FdConfig {
                scheme,
                ..FdConfig::default()
            };
            let g = fd_gradient(|x| Ok(0.5 * x.norm_squared()), &dvector![1.0, 2.0], &cfg).unwrap();
            assert!((g - dvector![1.0, 2.0]).amax() <= 1e-9);
        }
    }

    #[test]
    fn linear_gradient_map_recovers_matrix() {
        let m = dmatrix![2.0, 0.5; 0.5, -1.0];
        let h = fd_hessian(|x| Ok(&m * x), &dvector![0.3, 0.7], &FdConfig::default()).unwrap();
        assert!((h.matrix - &m).amax() <= 1e-8);
        assert!(h.asymmetry <= 1e-9);
    }

    #[test]
    fn cubic_second_derivative() {
        let h = fd_hessian(
            |x| Ok(dvector![3.0 * x[0] * x[0]]),
            &dvector![2.0],
            &FdConfig::default(),
        )
        .unwrap();
        assert!((h.matrix[(0, 0)] - 12.0).abs() <= 1e-6);
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        let err = fd_gradient(
            |x| Ok(if x[1] > 1.0 { f64::NAN } else { 0.0 }),
            &dvector![0.0, 1.0],
            &FdConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteProbe { coordinate: 1, .. }));
    }

    #[test]
    fn step_bounds_are_enforced() {
        let cfg = FdConfig {
            base_step: 0.1,
            ..FdConfig::default()
        };
        assert!(fd_gradient(|_| Ok(0.0), &dvector![0.0], &cfg).is_err());
    }

    #[test]
    fn spectra_of_simple_matrices() {
        let s = spectral(&DMatrix::identity(3, 3));
        assert_eq!((s.min, s.max), (1.0, 1.0));
        assert_eq!(s.values, vec![1.0, 1.0, 1.0]);
        let s = spectral(&dmatrix![-2.0, 0.0; 0.0, 5.0]);
        assert_eq!((s.min, s.max), (-2.0, 5.0));
        assert_eq!(s.abs_max(), 5.0);
    }

    #[test]
    fn central4_is_more_accurate_on_smooth_function() {
        let f = |x: &DVector<f64>| Ok((x[0] * 1.3).sin() * x[1].exp());
        let x = dvector![0.4, -0.2];
        let exact = dvector![
            1.3 * (0.52f64).cos() * (-0.2f64).exp(),
            (0.52f64).sin() * (-0.2f64).exp()
        ];
        let c2 = fd_gradient(
            f,
            &x,
            &FdConfig {
                base_step: 1e-3,
                ..FdConfig::default()
            },
        )
        .unwrap();
        let c4 = fd_gradient(
            f,
            &x,
            &FdConfig {
                base_step: 1e-3,
                scheme: Scheme::Central4,
                ..FdConfig::default()
            },
        )
        .unwrap();
        assert!((&c4 - &exact).amax() < (&c2 - &exact).amax() * 1e-2);
    }
}
