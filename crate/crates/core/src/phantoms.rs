//! Synthetic paired data: ellipse phantoms, a dose-dependent correlated
//! noise degradation, random patch extraction and dihedral augmentation.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{validate_side, ImageTensor};
use crate::rng::{derived_rng, stream};

/// Parameters of the ellipse phantom generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n: usize,
    /// Inclusive range for the number of ellipses.
    pub n_ellipses: (usize, usize),
    /// Inclusive range for ellipse intensities, within `[0, 1]`.
    pub intensity: (f64, f64),
    pub background: f64,
}

impl PhantomSpec {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            n_ellipses: (3, 6),
            intensity: (0.25, 0.9),
            background: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_side(self.n)?;
        if self.n_ellipses.0 > self.n_ellipses.1 {
            return Err(invalid("ellipse count range is empty"));
        }
        let (lo, hi) = self.intensity;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(invalid("intensity range must be an ordered interval within [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(invalid("background must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Generates a piecewise-constant ellipse phantom. Ellipses are painted in
/// draw order and every ellipse lies entirely inside the field of view.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<ImageTensor> {
    spec.validate()?;
    let n = spec.n;
    let nf = n as f64;
    let mut rng = derived_rng(seed, &[stream::PHANTOM]);
    let count = rng.random_range(spec.n_ellipses.0..=spec.n_ellipses.1);
    let mut data = vec![spec.background; n * n];
    for _ in 0..count {
        let a = rng.random_range(0.08 * nf..0.35 * nf);
        let b = rng.random_range(0.08 * nf..0.35 * nf);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        let ex = (a * a * c * c + b * b * s * s).sqrt();
        let ey = (a * a * s * s + b * b * c * c).sqrt();
        let cx = rng.random_range(ex..(nf - 1.0 - ex).max(ex + 1e-9));
        let cy = rng.random_range(ey..(nf - 1.0 - ey).max(ey + 1e-9));
        let value = if spec.intensity.0 == spec.intensity.1 {
            spec.intensity.0
        } else {
            rng.random_range(spec.intensity.0..spec.intensity.1)
        };
        for r in 0..n {
            for col in 0..n {
                let dx = col as f64 - cx;
                let dy = r as f64 - cy;
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    data[r * n + col] = value;
                }
            }
        }
    }
    Ok(ImageTensor::new(n, data)?.clip(0.0, 1.0))
}

/// Dose-dependent noise model. The per-pixel noise standard deviation is
/// `full_dose_std / sqrt(dose_factor)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseModel {
    /// Relative dose; 0.25 is a quarter-dose acquisition.
    pub dose_factor: f64,
    /// Width (in pixels) of the Gaussian kernel that correlates the noise.
    pub kernel_width: f64,
    /// Noise standard deviation at `dose_factor == 1`.
    pub full_dose_std: f64,
}

impl Default for DoseModel {
    fn default() -> Self {
        Self {
            dose_factor: 0.25,
            kernel_width: 1.0,
            full_dose_std: 0.025,
        }
    }
}

impl DoseModel {
    pub fn noise_std(&self) -> f64 {
        if self.dose_factor.is_infinite() {
            0.0
        } else {
            self.full_dose_std / self.dose_factor.sqrt()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dose_factor > 0.0) {
            return Err(invalid("dose_factor must be positive"));
        }
        if !(self.kernel_width >= 0.0 && self.kernel_width.is_finite()) {
            return Err(invalid("kernel_width must be finite and non-negative"));
        }
        if !(self.full_dose_std >= 0.0 && self.full_dose_std.is_finite()) {
            return Err(invalid("full_dose_std must be finite and non-negative"));
        }
        Ok(())
    }
}

/// 1-D Gaussian taps with unit L2 norm, so that circularly filtering white
/// noise with the separable 2-D kernel keeps unit variance.
fn unit_energy_kernel(width: f64, n: usize) -> Vec<f64> {
    if width == 0.0 {
        return vec![1.0];
    }
    let radius = ((3.0 * width).ceil() as usize).min((n - 1) / 2);
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|k| {
            let d = k as f64 - radius as f64;
            (-0.5 * d * d / (width * width)).exp()
        })
        .collect();
    let energy = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    taps.into_iter().map(|t| t / energy).collect()
}

fn circular_filter(field: &[f64], n: usize, taps: &[f64]) -> Vec<f64> {
    let radius = (taps.len() / 2) as isize;
    let ni = n as isize;
    let mut tmp = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let cc = (c as isize + k as isize - radius).rem_euclid(ni) as usize;
                acc += t * field[r * n + cc];
            }
            tmp[r * n + c] = acc;
        }
    }
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let rr = (r as isize + k as isize - radius).rem_euclid(ni) as usize;
                acc += t * tmp[rr * n + c];
            }
            out[r * n + c] = acc;
        }
    }
    out
}

/// Draws the zero-mean correlated noise field used by [`degrade`].
///
/// The DC component is removed so the degradation preserves the image mean
/// exactly before clipping.
pub fn noise_field(n: usize, dose: &DoseModel, seed: u64) -> Result<Vec<f64>> {
    validate_side(n)?;
    dose.validate()?;
    let std = dose.noise_std();
    if std == 0.0 {
        return Ok(vec![0.0; n * n]);
    }
    let mut rng = derived_rng(seed, &[stream::DEGRADE]);
    let white: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut field = circular_filter(&white, n, &unit_energy_kernel(dose.kernel_width, n));
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    for v in &mut field {
        *v = std * (*v - mean);
    }
    Ok(field)
}

/// Simulates a low-dose observation `y = clip(x + eta, 0, 1)`.
pub fn degrade(x: &ImageTensor, dose: &DoseModel, seed: u64) -> Result<ImageTensor> {
    let eta = noise_field(x.n(), dose, seed)?;
    let y = ImageTensor::new(x.n(), x.data().iter().zip(&eta).map(|(a, e)| a + e).collect())?;
    Ok(y.clip(0.0, 1.0))
}

/// Provenance carried with every pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub dose_factor: f64,
    /// Dihedral transform id, see [`Dihedral`].
    pub transform: u8,
}

/// A clean image and its low-dose counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub clean: ImageTensor,
    pub noisy: ImageTensor,
    pub meta: SampleMeta,
}

impl PairedSample {
    pub fn new(clean: ImageTensor, noisy: ImageTensor, meta: SampleMeta) -> Result<Self> {
        clean.ensure_same_shape(&noisy)?;
        Ok(Self { clean, noisy, meta })
    }

    pub fn n(&self) -> usize {
        self.clean.n()
    }
}

/// Generates `phantom(seed)` and its degraded copy.
pub fn generate_pair(spec: &PhantomSpec, dose: &DoseModel, seed: u64) -> Result<PairedSample> {
    let clean = generate_phantom(spec, seed)?;
    let noisy = degrade(&clean, dose, seed)?;
    PairedSample::new(
        clean,
        noisy,
        SampleMeta {
            seed,
            dose_factor: dose.dose_factor,
            transform: 0,
        },
    )
}

/// Top-left offsets of a random `patch_n` window inside an `n` image.
pub fn crop_offsets(n: usize, patch_n: usize, seed: u64) -> Result<(usize, usize)> {
    if patch_n > n {
        return Err(invalid(format!("patch size {patch_n} exceeds image side {n}")));
    }
    let mut rng = derived_rng(seed, &[stream::PATCH]);
    let span = n - patch_n;
    Ok((rng.random_range(0..=span), rng.random_range(0..=span)))
}

/// Cuts the same window from both images.
pub fn extract_patch_at(
    x: &ImageTensor,
    y: &ImageTensor,
    patch_n: usize,
    row: usize,
    col: usize,
) -> Result<(ImageTensor, ImageTensor)> {
    x.ensure_same_shape(y)?;
    validate_side(patch_n)?;
    Ok((x.crop(row, col, patch_n)?, y.crop(row, col, patch_n)?))
}

/// Random `patch_n x patch_n` crop applied identically to clean and noisy.
pub fn extract_patch(
    x: &ImageTensor,
    y: &ImageTensor,
    patch_n: usize,
    seed: u64,
) -> Result<PairedSample> {
    let (row, col) = crop_offsets(x.n(), patch_n, seed)?;
    let (clean, noisy) = extract_patch_at(x, y, patch_n, row, col)?;
    PairedSample::new(
        clean,
        noisy,
        SampleMeta {
            seed,
            dose_factor: f64::NAN,
            transform: 0,
        },
    )
}

/// An element of the symmetry group of the square: `id % 4` quarter turns
/// clockwise, preceded by a horizontal mirror when `id >= 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);
    pub const MIRROR: Dihedral = Dihedral(4);

    pub fn new(id: u8) -> Result<Self> {
        if id >= 8 {
            return Err(invalid(format!("dihedral id {id} outside 0..8")));
        }
        Ok(Dihedral(id))
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn is_reflection(self) -> bool {
        self.0 >= 4
    }

    pub fn apply(self, img: &ImageTensor) -> ImageTensor {
        let n = img.n();
        let mut data = img.data().to_vec();
        if self.is_reflection() {
            for row in data.chunks_mut(n) {
                row.reverse();
            }
        }
        for _ in 0..self.0 % 4 {
            let src = data.clone();
            for r in 0..n {
                for c in 0..n {
                    data[r * n + c] = src[(n - 1 - c) * n + r];
                }
            }
        }
        ImageTensor::new(n, data).expect("permutation of a valid image is valid")
    }
}

/// Applies one uniformly drawn dihedral transform to both images of a pair.
pub fn augment(s: &PairedSample, seed: u64) -> Result<PairedSample> {
    let mut rng = derived_rng(seed, &[stream::AUGMENT]);
    let t = Dihedral(rng.random_range(0..8u8));
    Ok(augment_with(s, t))
}

pub fn augment_with(s: &PairedSample, t: Dihedral) -> PairedSample {
    PairedSample {
        clean: t.apply(&s.clean),
        noisy: t.apply(&s.noisy),
        meta: SampleMeta {
            transform: t.id(),
            ..s.meta.clone()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn spec64() -> PhantomSpec {
        PhantomSpec::new(64)
    }

    #[test]
    fn zero_ellipses_gives_uniform_background() {
        let spec = PhantomSpec {
            n_ellipses: (0, 0),
            ..PhantomSpec::new(32)
        };
        let img = generate_phantom(&spec, 11).unwrap();
        assert!(img.data().iter().all(|&v| v == spec.background));
    }

    #[test]
    fn phantom_is_deterministic_and_bounded() {
        let a = generate_phantom(&spec64(), 3).unwrap();
        let b = generate_phantom(&spec64(), 3).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, generate_phantom(&spec64(), 4).unwrap());
    }

    #[test]
    fn phantom_histogram_has_two_modes() {
        let img = generate_phantom(&spec64(), 7).unwrap();
        let mut hist = [0usize; 20];
        for &v in img.data() {
            hist[((v * 20.0) as usize).min(19)] += 1;
        }
        // A mode here is a bin holding >= 5% of the pixels; at least two
        // such bins must be separated by a less populated bin.
        let heavy: Vec<usize> = (0..20).filter(|&k| hist[k] * 20 >= img.len()).collect();
        assert!(heavy.len() >= 2, "histogram {hist:?}");
        let separated = heavy.windows(2).any(|w| {
            (w[0] + 1..w[1]).any(|k| hist[k] < hist[w[0]].min(hist[w[1]]))
        });
        assert!(separated, "histogram {hist:?}");
    }

    #[test]
    fn infinite_dose_is_identity() {
        let x = generate_phantom(&spec64(), 1).unwrap();
        let dose = DoseModel {
            dose_factor: f64::INFINITY,
            ..DoseModel::default()
        };
        assert_eq!(degrade(&x, &dose, 5).unwrap(), x);
    }

    #[test]
    fn noise_std_scales_with_inverse_sqrt_dose() {
        let x = ImageTensor::filled(128, 0.5).unwrap();
        let quarter = DoseModel {
            dose_factor: 0.25,
            full_dose_std: 0.02,
            ..DoseModel::default()
        };
        let full = DoseModel {
            dose_factor: 1.0,
            ..quarter.clone()
        };
        let yq = degrade(&x, &quarter, 9).unwrap().sub(&x).unwrap();
        let yf = degrade(&x, &full, 9).unwrap().sub(&x).unwrap();
        let ratio = yq.std() / yf.std();
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
        // Per-pixel std matches the model to a few percent.
        assert!((yf.std() / 0.02 - 1.0).abs() < 0.05, "std {}", yf.std());
    }

    #[test]
    fn degradation_clips_to_unit_range() {
        let x = ImageTensor::filled(32, 1.0).unwrap();
        let y = degrade(&x, &DoseModel::default(), 2).unwrap();
        assert!(y.data().iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn degradation_preserves_mean_before_clipping() {
        for seed in 0..20 {
            let field = noise_field(64, &DoseModel::default(), seed).unwrap();
            let mean = field.iter().sum::<f64>() / field.len() as f64;
            let std = DoseModel::default().noise_std();
            assert!(mean.abs() < 3.0 * std / 64.0, "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn full_size_patch_is_identity() {
        let x = generate_phantom(&PhantomSpec::new(16), 1).unwrap();
        let y = degrade(&x, &DoseModel::default(), 1).unwrap();
        let p = extract_patch(&x, &y, 16, 3).unwrap();
        assert_eq!(p.clean, x);
        assert_eq!(p.noisy, y);
        assert!(extract_patch(&x, &y, 32, 3).is_err());
    }

    #[test]
    fn zero_offset_patch_is_top_left_window() {
        let x = ImageTensor::from_fn(16, |r, c| (r * 16 + c) as f64).unwrap();
        let y = x.scale(2.0).unwrap();
        let seed = (0..10_000u64)
            .find(|&s| crop_offsets(16, 8, s).unwrap() == (0, 0))
            .expect("some seed lands on the corner");
        let p = extract_patch(&x, &y, 8, seed).unwrap();
        assert_eq!(p.clean, x.crop(0, 0, 8).unwrap());
        assert_eq!(p.noisy, y.crop(0, 0, 8).unwrap());
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 1000 crops of an 8-window in a 16 image: 9 possible offsets per axis.
        let mut counts = [0f64; 9];
        for s in 0..1000 {
            let (r, c) = crop_offsets(16, 8, s).unwrap();
            counts[r] += 1.0;
            counts[c] += 1.0;
        }
        let expected = 2000.0 / 9.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(8.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn dihedral_group_laws() {
        let img = generate_phantom(&PhantomSpec::new(16), 5).unwrap();
        assert_eq!(Dihedral::IDENTITY.apply(&img), img);
        for t in Dihedral::all().filter(|t| t.is_reflection()) {
            assert_eq!(t.apply(&t.apply(&img)), img, "reflection {t:?}");
        }
        let quarter = Dihedral::new(1).unwrap();
        let mut acc = img.clone();
        for _ in 0..4 {
            acc = quarter.apply(&acc);
        }
        assert_eq!(acc, img);
        // All eight elements act differently on a generic image.
        let images: Vec<_> = Dihedral::all().map(|t| t.apply(&img).into_data()).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(images[i], images[j]);
            }
        }
    }

    #[test]
    fn augmentation_keeps_pairs_aligned_and_is_uniform() {
        let pair = generate_pair(&PhantomSpec::new(16), &DoseModel::default(), 4).unwrap();
        let mut freq = [0usize; 8];
        for s in 0..10_000u64 {
            let a = augment(&pair, s).unwrap();
            let t = Dihedral::new(a.meta.transform).unwrap();
            freq[t.id() as usize] += 1;
            if s < 64 {
                assert_eq!(a.clean, t.apply(&pair.clean));
                assert_eq!(a.noisy, t.apply(&pair.noisy));
            }
        }
        for f in freq {
            assert!((f as f64 / 10_000.0 - 0.125).abs() < 0.02, "{freq:?}");
        }
    }
}
