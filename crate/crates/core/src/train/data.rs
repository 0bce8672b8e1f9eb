//! Seeded synthetic spectral scenes.
//!
//! Each cube is the sum of 3 to 6 spatial Gaussian blobs, each carrying a
//! Gaussian spectral profile over band index, plus 1 to 3 axis-aligned
//! rectangles with a constant spatial value and a linear spectral ramp. The
//! result is divided by its maximum so values lie in `[0, 1]`.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optics::{simulate, DispersionSpec, Mask, MaskStack, Measurement, SpectralCube};

pub fn synthetic_cube<R: Rng + ?Sized>(nx: usize, ny: usize, n_lambda: usize, rng: &mut R) -> Result<SpectralCube> {
    let mut data = vec![0.0; nx * ny * n_lambda];
    let at = |b: usize, x: usize, y: usize| (b * nx + x) * ny + y;
    let extent = nx.min(ny) as f64;

    let blobs = rng.random_range(3..=6);
    for _ in 0..blobs {
        let amp = rng.random_range(0.3..1.0);
        let cx = rng.random_range(0.0..nx as f64);
        let cy = rng.random_range(0.0..ny as f64);
        let sigma = rng.random_range(0.06 * extent..0.25 * extent).max(0.5);
        let mu = rng.random_range(0.0..n_lambda as f64);
        let spread = rng.random_range(0.15..0.6) * n_lambda as f64 + 0.5;
        for b in 0..n_lambda {
            let spectral = (-(b as f64 - mu).powi(2) / (2.0 * spread * spread)).exp();
            for x in 0..nx {
                for y in 0..ny {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    data[at(b, x, y)] += amp * spectral * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }

    let rects = rng.random_range(1..=3);
    for _ in 0..rects {
        let x0 = rng.random_range(0..nx);
        let y0 = rng.random_range(0..ny);
        let x1 = rng.random_range(x0 + 1..=nx);
        let y1 = rng.random_range(y0 + 1..=ny);
        let lo = rng.random_range(0.05..0.5);
        let hi = rng.random_range(0.05..0.5);
        for b in 0..n_lambda {
            let frac = if n_lambda > 1 { b as f64 / (n_lambda - 1) as f64 } else { 0.0 };
            let level = lo + (hi - lo) * frac;
            for x in x0..x1 {
                for y in y0..y1 {
                    data[at(b, x, y)] += level;
                }
            }
        }
    }

    let max = data.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        data.iter_mut().for_each(|v| *v /= max);
    }
    SpectralCube::new(nx, ny, n_lambda, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub cube: SpectralCube,
    pub measurement: Measurement,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub masks: MaskStack,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub nx: usize,
    pub ny: usize,
    pub n_lambda: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub noise_sigma: f64,
    pub mask_p_open: f64,
    pub step_px: usize,
    pub ref_band: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// The 32x32x8 desk dataset.
    fn default() -> Self {
        DatasetSpec { nx: 32, ny: 32, n_lambda: 8, n_train: 8, n_eval: 4, noise_sigma: 0.0, mask_p_open: 0.5, step_px: 1, ref_band: 0, seed: 0 }
    }
}

impl Dataset {
    pub fn synthesize(spec: &DatasetSpec) -> Result<Dataset> {
        if spec.n_train == 0 {
            return Err(Error::Config("dataset needs at least one training sample".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mask = Mask::random_binary(spec.nx, spec.ny, spec.mask_p_open, &mut rng)?;
        let masks = MaskStack::new(mask, DispersionSpec { step_px: spec.step_px, ref_band: spec.ref_band }, spec.n_lambda)?;
        let mut make = |prefix: &str, n: usize| -> Result<Vec<Sample>> {
            (0..n)
                .map(|i| {
                    let cube = synthetic_cube(spec.nx, spec.ny, spec.n_lambda, &mut rng)?;
                    let measurement = simulate(&cube, &masks, spec.noise_sigma, &mut rng)?;
                    Ok(Sample { name: format!("{prefix}{i:03}"), cube, measurement })
                })
                .collect()
        };
        let train = make("train", spec.n_train)?;
        let eval = make("eval", spec.n_eval)?;
        Ok(Dataset { masks, train, eval })
    }

    /// Wraps externally loaded cubes, simulating their measurements.
    pub fn from_cubes<R: Rng + ?Sized>(
        masks: MaskStack,
        train: Vec<(String, SpectralCube)>,
        eval: Vec<(String, SpectralCube)>,
        noise_sigma: f64,
        rng: &mut R,
    ) -> Result<Dataset> {
        if train.is_empty() {
            return Err(Error::Config("dataset needs at least one training sample".into()));
        }
        let mut wrap = |items: Vec<(String, SpectralCube)>| -> Result<Vec<Sample>> {
            items
                .into_iter()
                .map(|(name, cube)| {
                    let measurement = simulate(&cube, &masks, noise_sigma, rng)?;
                    Ok(Sample { name, cube, measurement })
                })
                .collect()
        };
        let train = wrap(train)?;
        let eval = wrap(eval)?;
        Ok(Dataset { masks, train, eval })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubes_are_normalized_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let x = synthetic_cube(16, 16, 4, &mut a).unwrap();
        let y = synthetic_cube(16, 16, 4, &mut b).unwrap();
        assert_eq!(x, y);
        let max = x.data().iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 1.0).abs() < 1e-15);
        assert!(x.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn dataset_shapes() {
        let spec = DatasetSpec { nx: 8, ny: 8, n_lambda: 3, n_train: 2, n_eval: 1, ..DatasetSpec::default() };
        let d = Dataset::synthesize(&spec).unwrap();
        assert_eq!(d.train.len(), 2);
        assert_eq!(d.eval.len(), 1);
        assert_eq!(d.train[0].measurement.ny_ext(), 10);
        let err = Dataset::synthesize(&DatasetSpec { n_train: 0, ..spec });
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
