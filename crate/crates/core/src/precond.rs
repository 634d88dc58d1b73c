//! Karras preconditioner with v-prediction scalings.
//!
//! A raw network `F` is wrapped into a clean-image denoiser
//!
//! ```text
//! D(x; sigma) = c_skip(sigma) * x + c_out(sigma) * F(c_in(sigma) * x; sigma)
//! ```
//!
//! with `c_out` negative, which is what turns `F` into a velocity predictor.
//! All scalings are evaluated in `f64`.

use crate::error::{Error, Result};

/// A network mapping a preconditioned input to an output of the same length.
///
/// `sigma` is the raw noise level used for conditioning; implementations are
/// free to featurize it (e.g. `ln sigma`) as long as equal sigmas give equal
/// conditioning.
pub trait RawNetwork: Send + Sync {
    fn evaluate(&self, input: &[f64], sigma: f64, cond: Option<&[f64]>) -> Vec<f64>;
}

impl<F> RawNetwork for F
where
    F: Fn(&[f64], f64, Option<&[f64]>) -> Vec<f64> + Send + Sync,
{
    fn evaluate(&self, input: &[f64], sigma: f64, cond: Option<&[f64]>) -> Vec<f64> {
        self(input, sigma, cond)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scalings {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioner {
    pub sigma_data: f64,
}

impl Default for Preconditioner {
    fn default() -> Self {
        Self { sigma_data: 1.0 }
    }
}

impl Preconditioner {
    pub fn new(sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::param(format!("sigma_data must be positive, got {sigma_data}")));
        }
        Ok(Self { sigma_data })
    }

    pub fn scalings(&self, sigma: f64) -> Result<Scalings> {
        if !sigma.is_finite() {
            return Err(Error::NonFiniteSigma(sigma));
        }
        if sigma < 0.0 {
            return Err(Error::param(format!("sigma must be >= 0, got {sigma}")));
        }
        let sd = self.sigma_data;
        let total = sigma * sigma + sd * sd;
        let root = total.sqrt();
        Ok(Scalings {
            c_skip: sd * sd / total,
            c_out: -sigma * sd / root,
            c_in: 1.0 / root,
        })
    }

    /// `c_skip * x + c_out * F(c_in * x, sigma)`. At sigma = 0 the network is
    /// not evaluated and `x` is returned unchanged.
    pub fn denoise(
        &self,
        net: &dyn RawNetwork,
        x: &[f64],
        sigma: f64,
        cond: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let s = self.scalings(sigma)?;
        if sigma == 0.0 {
            return Ok(x.to_vec());
        }
        let input: Vec<f64> = x.iter().map(|v| s.c_in * v).collect();
        let out = net.evaluate(&input, sigma, cond);
        check_shape(x.len(), out.len())?;
        Ok(x.iter().zip(&out).map(|(xi, fi)| s.c_skip * xi + s.c_out * fi).collect())
    }

    /// Denoiser in the sigma -> infinity limit, where `c_skip -> 0`,
    /// `c_out -> -sigma_data` and `c_in * sigma -> 1`:
    /// `D = -sigma_data * F(n; sigma_cond)` for the unit-Gaussian factor `n`.
    pub fn denoise_infinite(
        &self,
        net: &dyn RawNetwork,
        noise: &[f64],
        sigma_cond: f64,
        cond: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let out = net.evaluate(noise, sigma_cond, cond);
        check_shape(noise.len(), out.len())?;
        Ok(out.into_iter().map(|f| -self.sigma_data * f).collect())
    }

    /// The network output that makes `denoise` return `x0` exactly:
    /// `(x0 - c_skip * x_noised) / c_out`.
    pub fn training_target(&self, x0: &[f64], x_noised: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if sigma == 0.0 {
            return Err(Error::ZeroSigma);
        }
        check_shape(x0.len(), x_noised.len())?;
        let s = self.scalings(sigma)?;
        Ok(x0
            .iter()
            .zip(x_noised)
            .map(|(a, x)| (a - s.c_skip * x) / s.c_out)
            .collect())
    }

    /// Target at infinite noise, the inverse of [`Self::denoise_infinite`]:
    /// `-x0 / sigma_data`.
    pub fn training_target_infinite(&self, x0: &[f64]) -> Vec<f64> {
        x0.iter().map(|a| -a / self.sigma_data).collect()
    }
}

fn check_shape(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch { expected, got });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_net(x: &[f64], _: f64, _: Option<&[f64]>) -> Vec<f64> {
        vec![0.0; x.len()]
    }

    fn echo_net(x: &[f64], _: f64, _: Option<&[f64]>) -> Vec<f64> {
        x.to_vec()
    }

    #[test]
    fn scalings_at_zero_and_one() {
        let p = Preconditioner::default();
        let s = p.scalings(0.0).unwrap();
        assert_eq!((s.c_skip, s.c_out, s.c_in), (1.0, 0.0, 1.0));
        let s = p.scalings(1.0).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.c_skip - 0.5).abs() < 1e-15);
        assert!((s.c_out + r).abs() < 1e-15);
        assert!((s.c_in - r).abs() < 1e-15);
    }

    #[test]
    fn scalings_reject_bad_sigma() {
        let p = Preconditioner::default();
        assert!(matches!(p.scalings(f64::INFINITY), Err(Error::NonFiniteSigma(_))));
        assert!(p.scalings(f64::NAN).is_err());
        assert!(p.scalings(-1.0).is_err());
        assert!(Preconditioner::new(0.0).is_err());
    }

    #[test]
    fn large_sigma_limits() {
        let s = Preconditioner::default().scalings(20000.0).unwrap();
        assert!(s.c_skip.abs() < 1e-8);
        assert!((s.c_out + 1.0).abs() < 1e-8);
        assert!((s.c_in - 5e-5).abs() < 1e-12);
    }

    #[test]
    fn zero_network_keeps_skip() {
        let p = Preconditioner::new(0.5).unwrap();
        let x = [1.0, -2.0, 3.0];
        let d = p.denoise(&zero_net, &x, 2.0, None).unwrap();
        let c = p.scalings(2.0).unwrap().c_skip;
        for (di, xi) in d.iter().zip(x) {
            assert_eq!(*di, c * xi);
        }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let p = Preconditioner::default();
        let nan_net = |x: &[f64], _: f64, _: Option<&[f64]>| vec![f64::NAN; x.len()];
        assert_eq!(p.denoise(&nan_net, &[1.5, -0.25], 0.0, None).unwrap(), vec![1.5, -0.25]);
    }

    #[test]
    fn hand_evaluated_denoise() {
        let p = Preconditioner::default();
        let one = |x: &[f64], _: f64, _: Option<&[f64]>| vec![1.0; x.len()];
        let d = p.denoise(&one, &[2.0], 1.0, None).unwrap();
        assert!((d[0] - 0.292_893_218_813_452_5).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let p = Preconditioner::default();
        let short = |_: &[f64], _: f64, _: Option<&[f64]>| vec![0.0];
        assert!(matches!(
            p.denoise(&short, &[1.0, 2.0], 1.0, None),
            Err(Error::ShapeMismatch { expected: 2, got: 1 })
        ));
        assert!(p.denoise_infinite(&short, &[1.0, 2.0], 2e4, None).is_err());
    }

    #[test]
    fn infinite_denoiser_sign() {
        let p = Preconditioner::default();
        assert_eq!(p.denoise_infinite(&zero_net, &[1.0, 2.0], 2e4, None).unwrap(), vec![-0.0, -0.0]);
        assert_eq!(p.denoise_infinite(&echo_net, &[1.0, -2.0], 2e4, None).unwrap(), vec![-1.0, 2.0]);
    }

    #[test]
    fn hand_evaluated_target() {
        let p = Preconditioner::default();
        let t = p.training_target(&[0.0], &[1.0], 1.0).unwrap();
        assert!((t[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(p.training_target(&[0.0], &[1.0], 0.0), Err(Error::ZeroSigma)));
    }

    #[test]
    fn target_round_trip() {
        let p = Preconditioner::new(0.7).unwrap();
        let x0 = [0.3, -1.2, 2.5];
        let xn = [4.0, 1.0, -3.0];
        for sigma in [1e-3, 0.5, 3.0, 80.0, 2e4] {
            let target = p.training_target(&x0, &xn, sigma).unwrap();
            let oracle = move |_: &[f64], _: f64, _: Option<&[f64]>| target.clone();
            let d = p.denoise(&oracle, &xn, sigma, None).unwrap();
            for (a, b) in d.iter().zip(x0) {
                assert!((a - b).abs() < 1e-10, "sigma {sigma}: {a} vs {b}");
            }
        }
    }
}
