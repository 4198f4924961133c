//! Perturbation kernel of the augmented-dimension Poisson flow.
//!
//! Data in `N` dimensions is perturbed by `x_sigma = x + R v`, where `v` is
//! uniform on the unit sphere and the radius follows
//!
//! ```text
//! p_r(R) ∝ R^(N-1) / (R^2 + r^2)^((N+D)/2),      r = sigma * sqrt(D).
//! ```
//!
//! Substituting `B = R^2 / (R^2 + r^2)` turns this into `B ~ Beta(N/2, D/2)`,
//! so `R = r * sqrt(B / (1 - B))`. The ratio `B / (1 - B)` is drawn as a
//! ratio of two independent gamma variates, which avoids the cancellation in
//! `1 - B` when `N >> D`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{invalid, Result};
use crate::image::ImageTensor;

/// One draw from the kernel: radius, direction and the augmented-norm
/// coordinate it was drawn at.
#[derive(Clone, Debug)]
pub struct AugmentedNoiseDraw {
    pub radius: f64,
    pub direction: Vec<f64>,
    pub r: f64,
    pub d: f64,
}

impl AugmentedNoiseDraw {
    /// The displacement `R v`.
    pub fn displacement(&self) -> impl Iterator<Item = f64> + '_ {
        self.direction.iter().map(move |v| self.radius * v)
    }
}

/// Alignment between the noise level and the augmented-norm coordinate,
/// `r = sigma * sqrt(D)`.
pub fn align_r(sigma: f64, d: f64) -> f64 {
    sigma * d.sqrt()
}

fn check_d(d: f64) -> Result<()> {
    if !(d.is_finite() && d > 2.0) {
        return Err(invalid(format!(
            "augmentation dimension must be finite and > 2, got {d}"
        )));
    }
    Ok(())
}

/// Draws a perturbation radius `R ~ p_r(R)` in `n_dim` data dimensions.
pub fn sample_radius<G: Rng + ?Sized>(r: f64, n_dim: usize, d: f64, rng: &mut G) -> Result<f64> {
    check_d(d)?;
    if n_dim == 0 {
        return Err(invalid("data dimension must be positive"));
    }
    if !(r >= 0.0 && r.is_finite()) {
        return Err(invalid(format!("r must be finite and non-negative, got {r}")));
    }
    let num = Gamma::new(n_dim as f64 / 2.0, 1.0).expect("valid shape").sample(rng);
    let den = Gamma::new(d / 2.0, 1.0).expect("valid shape").sample(rng);
    Ok(r * (num / den).sqrt())
}

/// Uniform direction on the unit sphere in `n_dim` dimensions.
pub fn sample_angle<G: Rng + ?Sized>(n_dim: usize, rng: &mut G) -> Vec<f64> {
    loop {
        let u: Vec<f64> = (0..n_dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            return u.into_iter().map(|v| v / norm).collect();
        }
    }
}

pub fn draw<G: Rng + ?Sized>(n_dim: usize, sigma: f64, d: f64, rng: &mut G) -> Result<AugmentedNoiseDraw> {
    let r = align_r(sigma, d);
    let radius = sample_radius(r, n_dim, d, rng)?;
    let direction = sample_angle(n_dim, rng);
    Ok(AugmentedNoiseDraw {
        radius,
        direction,
        r,
        d,
    })
}

/// `x + R v` with `(R, v)` drawn at noise level `sigma`.
pub fn perturb<G: Rng + ?Sized>(x: &ImageTensor, sigma: f64, d: f64, rng: &mut G) -> Result<ImageTensor> {
    Ok(perturb_with_draw(x, sigma, d, rng)?.0)
}

pub fn perturb_with_draw<G: Rng + ?Sized>(
    x: &ImageTensor,
    sigma: f64,
    d: f64,
    rng: &mut G,
) -> Result<(ImageTensor, AugmentedNoiseDraw)> {
    if !(sigma >= 0.0) {
        return Err(invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    let dr = draw(x.len(), sigma, d, rng)?;
    Ok((apply_draw(x, &dr)?, dr))
}

/// `x + R v` for a given draw.
pub fn apply_draw(x: &ImageTensor, dr: &AugmentedNoiseDraw) -> Result<ImageTensor> {
    if dr.direction.len() != x.len() {
        return Err(invalid(format!(
            "draw has dimension {}, image has {} pixels",
            dr.direction.len(),
            x.len()
        )));
    }
    ImageTensor::new(
        x.n(),
        x.data().iter().zip(dr.displacement()).map(|(a, e)| a + e).collect(),
    )
}

/// Pure-noise starting state on the `r = sigma_max * sqrt(D)` cylinder.
pub fn sample_prior<G: Rng + ?Sized>(sigma_max: f64, d: f64, n: usize, rng: &mut G) -> Result<ImageTensor> {
    let dr = draw(n * n, sigma_max, d, rng)?;
    ImageTensor::new(n, dr.displacement().collect())
}

/// Numerically normalized radial law `p_r(R)`.
///
/// Normalization and the CDF come from trapezoidal quadrature on a log-R
/// grid; the law is reference machinery for checking the sampler and is
/// independent of the gamma-ratio draw.
#[derive(Clone, Debug)]
pub struct RadialLaw {
    r: f64,
    n_dim: f64,
    d: f64,
    log_u: Vec<f64>,
    cdf: Vec<f64>,
    log_norm: f64,
}

impl RadialLaw {
    const GRID: usize = 40_001;

    pub fn new(r: f64, n_dim: usize, d: f64) -> Result<Self> {
        check_d(d)?;
        if !(r > 0.0 && r.is_finite()) || n_dim == 0 {
            return Err(invalid("radial law needs r > 0 and N >= 1"));
        }
        let nf = n_dim as f64;
        // Density of u = ln R peaks at R = r sqrt(N / D) with curvature
        // 2 N D / (N + D); tails decay like exp(N u) and exp(-D u).
        let peak = r.ln() + 0.5 * (nf / d).ln();
        let width = ((nf + d) / (2.0 * nf * d)).sqrt();
        let lo = peak - 80.0 / nf - 12.0 * width;
        let hi = peak + 80.0 / d + 12.0 * width;
        let mut law = Self {
            r,
            n_dim: nf,
            d,
            log_u: Vec::with_capacity(Self::GRID),
            cdf: Vec::with_capacity(Self::GRID),
            log_norm: 0.0,
        };
        let step = (hi - lo) / (Self::GRID - 1) as f64;
        let log_peak = law.log_density_u(peak);
        let mut acc = 0.0;
        let mut prev = 0.0;
        for k in 0..Self::GRID {
            let u = lo + k as f64 * step;
            let g = (law.log_density_u(u) - log_peak).exp();
            if k > 0 {
                acc += 0.5 * (g + prev) * step;
            }
            prev = g;
            law.log_u.push(u);
            law.cdf.push(acc);
        }
        for c in &mut law.cdf {
            *c /= acc;
        }
        law.log_norm = log_peak + acc.ln();
        Ok(law)
    }

    /// Unnormalized log-density of `u = ln R`: `N u - (N+D)/2 ln(e^{2u} + r^2)`.
    fn log_density_u(&self, u: f64) -> f64 {
        let t = 2.0 * (u - self.r.ln());
        let softplus = if t > 30.0 { t } else { t.exp().ln_1p() };
        self.n_dim * u - 0.5 * (self.n_dim + self.d) * (2.0 * self.r.ln() + softplus)
    }

    /// Normalized density at radius `radius`.
    pub fn pdf(&self, radius: f64) -> f64 {
        if radius <= 0.0 {
            return 0.0;
        }
        let u = radius.ln();
        (self.log_density_u(u) - self.log_norm).exp() / radius
    }

    pub fn cdf(&self, radius: f64) -> f64 {
        if radius <= 0.0 {
            return 0.0;
        }
        let u = radius.ln();
        let first = self.log_u[0];
        let last = *self.log_u.last().unwrap();
        if u <= first {
            return 0.0;
        }
        if u >= last {
            return 1.0;
        }
        let step = (last - first) / (self.log_u.len() - 1) as f64;
        let pos = (u - first) / step;
        let k = (pos.floor() as usize).min(self.log_u.len() - 2);
        let frac = pos - k as f64;
        self.cdf[k] + frac * (self.cdf[k + 1] - self.cdf[k])
    }

    /// Closed-form mode `r sqrt((N - 1) / (D + 1))`.
    pub fn mode(&self) -> f64 {
        self.r * ((self.n_dim - 1.0).max(0.0) / (self.d + 1.0)).sqrt()
    }

    /// Integral of the normalized density over the quadrature grid, in R.
    pub fn total_mass(&self) -> f64 {
        let mut acc = 0.0;
        for w in self.log_u.windows(2) {
            let (a, b) = (w[0].exp(), w[1].exp());
            acc += 0.5 * (self.pdf(a) + self.pdf(b)) * (b - a);
        }
        acc
    }
}

/// `p_r(R)` for a single evaluation; builds the normalization on the fly.
pub fn radius_pdf(radius: f64, r: f64, n_dim: usize, d: f64) -> Result<f64> {
    Ok(RadialLaw::new(r, n_dim, d)?.pdf(radius))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::stats::ks_statistic;
    use statrs::function::beta::ln_beta;

    #[test]
    fn alignment() {
        assert!((align_r(380.0, 128.0) - 4299.209229614).abs() < 1e-6);
        assert_eq!(align_r(0.0, 128.0), 0.0);
        assert_eq!(align_r(3.5, 1.0), 3.5);
    }

    #[test]
    fn rejects_small_d() {
        let mut rng = rng_from_seed(0);
        assert!(sample_radius(1.0, 4, 2.0, &mut rng).is_err());
        assert!(sample_radius(1.0, 4, 1.0, &mut rng).is_err());
    }

    #[test]
    fn beta_moment_identity() {
        // E[R^2] / r^2 = E[B / (1 - B)] = (N/2) / (D/2 - 1) = N / (D - 2).
        let mut rng = rng_from_seed(1);
        let (n, d, r) = (4usize, 6.0, 2.0);
        let m: f64 = (0..100_000)
            .map(|_| sample_radius(r, n, d, &mut rng).unwrap().powi(2))
            .sum::<f64>()
            / 100_000.0;
        assert!((m / 4.0 - 1.0).abs() < 0.03, "E[R^2] = {m}");
    }

    #[test]
    fn moment_identity_by_quadrature() {
        // Second moment of the numerically normalized law for N=4, D=6, r=2
        // equals r^2 N / (D - 2) = 4.
        let law = RadialLaw::new(2.0, 4, 6.0).unwrap();
        let mut acc = 0.0;
        for w in law.log_u.windows(2) {
            let (a, b) = (w[0].exp(), w[1].exp());
            acc += 0.5 * (a * a * law.pdf(a) + b * b * law.pdf(b)) * (b - a);
        }
        assert!((acc - 4.0).abs() < 1e-3, "{acc}");
    }

    #[test]
    fn numerical_normalization_matches_beta_function() {
        // ∫ R^{N-1} (R^2 + r^2)^{-(N+D)/2} dR = r^{-D} B(N/2, D/2) / 2
        for &(r, n, d) in &[(1.0, 16usize, 128.0), (10.0, 64, 2048.0), (2.0, 4, 6.0)] {
            let law = RadialLaw::new(r, n, d).unwrap();
            let radius: f64 = r * 0.7;
            let nf = n as f64;
            let log_unnorm = (nf - 1.0) * radius.ln() - 0.5 * (nf + d) * (radius * radius + r * r).ln();
            let log_z = -d * r.ln() + ln_beta(nf / 2.0, d / 2.0) - 2f64.ln();
            let exact = (log_unnorm - log_z).exp();
            assert!((law.pdf(radius) / exact - 1.0).abs() < 1e-6, "({r},{n},{d})");
        }
    }

    #[test]
    fn density_shape() {
        let law = RadialLaw::new(1.0, 16, 128.0).unwrap();
        assert_eq!(law.pdf(0.0), 0.0);
        assert!((law.total_mass() - 1.0).abs() < 1e-6);
        // The closed-form mode beats its neighbours.
        let m = law.mode();
        assert!((m - (15.0f64 / 129.0).sqrt()).abs() < 1e-12);
        assert!(law.pdf(m) > law.pdf(m * 1.001));
        assert!(law.pdf(m) > law.pdf(m * 0.999));
        // Coarse numeric argmax agrees.
        let argmax = (1..20_000)
            .map(|k| k as f64 * 1e-4)
            .max_by(|a, b| law.pdf(*a).total_cmp(&law.pdf(*b)))
            .unwrap();
        assert!((argmax - m).abs() < 2e-4);
    }

    #[test]
    fn sampler_matches_quadrature_cdf() {
        for &(n, d, r) in &[(16usize, 128.0, 1.0), (64, 2048.0, 10.0)] {
            let mut rng = rng_from_seed(7);
            let mut draws: Vec<f64> = (0..100_000).map(|_| sample_radius(r, n, d, &mut rng).unwrap()).collect();
            let law = RadialLaw::new(r, n, d).unwrap();
            let ks = ks_statistic(&mut draws, |x| law.cdf(x));
            assert!(ks < 0.01, "({n},{d},{r}): KS {ks}");
        }
    }

    #[test]
    fn radius_is_a_scale_family() {
        let a = sample_radius(3.0, 32, 64.0, &mut rng_from_seed(5)).unwrap();
        let b = sample_radius(1.5, 32, 64.0, &mut rng_from_seed(5)).unwrap();
        let tiny = sample_radius(1e-12, 32, 64.0, &mut rng_from_seed(5)).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-12 * a);
        assert!(tiny < 1e-10);
    }

    #[test]
    fn angles_are_unit_and_isotropic() {
        let mut rng = rng_from_seed(3);
        let n = 8;
        let draws = 100_000;
        let mut mean = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for _ in 0..draws {
            let v = sample_angle(n, &mut rng);
            let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            for k in 0..n {
                mean[k] += v[k] / draws as f64;
                sq[k] += v[k] * v[k] / draws as f64;
            }
        }
        for k in 0..n {
            assert!(mean[k].abs() < 0.01, "{mean:?}");
            assert!((sq[k] * n as f64 - 1.0).abs() < 0.05, "{sq:?}");
        }
    }

    #[test]
    fn perturbation_radius_is_exact() {
        let x = ImageTensor::from_fn(8, |r, c| (r + c) as f64 / 16.0).unwrap();
        let (xs, dr) = perturb_with_draw(&x, 2.0, 128.0, &mut rng_from_seed(4)).unwrap();
        assert!((xs.distance(&x).unwrap() - dr.radius).abs() < 1e-12 * dr.radius);
        let still = perturb(&x, 0.0, 128.0, &mut rng_from_seed(4)).unwrap();
        assert_eq!(still, x);
    }

    #[test]
    fn prior_draws_differ_by_seed() {
        let a = sample_prior(380.0, 128.0, 8, &mut rng_from_seed(1)).unwrap();
        let b = sample_prior(380.0, 128.0, 8, &mut rng_from_seed(2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn prior_radius_law() {
        let (d, sigma) = (128.0, 380.0);
        let mut rng = rng_from_seed(12);
        let mut radii: Vec<f64> = (0..100_000)
            .map(|_| sample_prior(sigma, d, 8, &mut rng).unwrap().norm())
            .collect();
        let law = RadialLaw::new(align_r(sigma, d), 64, d).unwrap();
        let ks = ks_statistic(&mut radii, |x| law.cdf(x));
        assert!(ks < 0.01, "KS {ks}");
    }

    #[test]
    fn gaussian_limit_second_moment() {
        // D = 1e6: E[||x_sigma - x||^2] / N = sigma^2 D / (D - 2).
        let mut rng = rng_from_seed(8);
        let x = ImageTensor::zeros(16).unwrap();
        let sigma = 0.7;
        let trials = 2000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let xs = perturb(&x, sigma, 1e6, &mut rng).unwrap();
            acc += xs.norm().powi(2) / 256.0;
        }
        let want = sigma * sigma * 1e6 / (1e6 - 2.0);
        assert!((acc / trials as f64 / want - 1.0).abs() < 0.01);
    }
}
