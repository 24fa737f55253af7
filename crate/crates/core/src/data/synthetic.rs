use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::seed::{self, Rng, Stream};

/// Where class means are placed before scaling by the separation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanLayout {
    /// Gaussian draws kept at pairwise distance >= 1.
    #[default]
    Spread,
    /// Distinct corners of the `{-1, 1}` hypercube.
    Hypercube,
}

/// Gaussian class blobs, optionally seen through a shared nonlinear map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// `[d]` or `[c, h, w]`.
    pub sample_shape: Vec<usize>,
    /// Minimum pairwise distance between class means.
    pub separation: f64,
    /// Per-coordinate standard deviation around each mean.
    pub noise: f64,
    /// When set, blobs live in a latent space of this size and every class
    /// is observed through one fixed random map `x = tanh(M z)`.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    #[serde(default)]
    pub means: MeanLayout,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let dim: usize = self.sample_shape.iter().product();
        let latent = self.latent_dim.unwrap_or(dim);
        if self.num_classes == 0 || dim == 0 || latent == 0 {
            return Err(Error::Config(
                "synthetic data needs classes, a non-empty sample shape and latent size".into(),
            ));
        }
        if self.means == MeanLayout::Hypercube && latent < 32 && (1usize << latent) < self.num_classes {
            return Err(Error::Config(format!(
                "{} classes do not fit on the corners of a {latent}-cube",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Class means sit at pairwise distance at least `separation`; samples are
/// isotropic Gaussians around them. Deterministic in `seed`. Panics on a
/// spec rejected by [`SyntheticSpec::validate`].
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> SplitDataset {
    spec.validate().expect("valid synthetic spec");
    let mut rng = seed::rng(seed, Stream::Data);
    let dim: usize = spec.sample_shape.iter().product();
    let latent = spec.latent_dim.unwrap_or(dim);
    let means = match spec.means {
        MeanLayout::Spread => unit_spread_points(spec.num_classes, latent, &mut rng),
        MeanLayout::Hypercube => hypercube_corners(spec.num_classes, latent, &mut rng),
    };
    // Row-major [dim, latent]; entries N(0, 1/latent).
    let map: Option<Vec<f64>> = spec.latent_dim.map(|k| {
        let s = 1.0 / (k as f64).sqrt();
        (0..dim * k).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    });
    let draw = |per_class: usize, rng: &mut Rng| {
        let mut features = Vec::with_capacity(spec.num_classes * per_class * dim);
        let mut labels = Vec::with_capacity(spec.num_classes * per_class);
        let mut z = vec![0.0; latent];
        for _ in 0..per_class {
            for (c, mean) in means.iter().enumerate() {
                for (zi, &m) in z.iter_mut().zip(mean) {
                    *zi = spec.separation * m + spec.noise * rng.sample::<f64, _>(StandardNormal);
                }
                match &map {
                    None => features.extend(z.iter().map(|&v| v as f32)),
                    Some(m) => features.extend(m.chunks(latent).map(|row| {
                        row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>().tanh() as f32
                    })),
                }
                labels.push(c as u32);
            }
        }
        Dataset::new(spec.sample_shape.clone(), features, labels).expect("consistent sizes")
    };
    let train = draw(spec.train_per_class, &mut rng);
    let test = draw(spec.test_per_class, &mut rng);
    SplitDataset {
        train: Arc::new(train),
        test: Arc::new(test),
    }
}

/// `n` points in `dim` dimensions with pairwise distance >= 1, by rejection
/// sampling from a Gaussian whose scale grows after repeated rejections.
fn unit_spread_points(n: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut scale = 1.0 / (2.0 * dim as f64).sqrt();
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut rejects = 0;
    while points.len() < n {
        let p: Vec<f64> = (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let ok = points
            .iter()
            .all(|q| q.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= 1.0);
        if ok {
            points.push(p);
            rejects = 0;
        } else {
            rejects += 1;
            if rejects >= 200 {
                scale *= 1.1;
                rejects = 0;
            }
        }
    }
    points
}

/// `n` distinct random corners of `{-1, 1}^dim`.
fn hypercube_corners(n: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(n);
    while points.len() < n {
        let p: Vec<f64> = (0..dim).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        if !points.contains(&p) {
            points.push(p);
        }
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(super) fn spec(sep: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 6,
            train_per_class: 20,
            test_per_class: 5,
            sample_shape: vec![16],
            separation: sep,
            noise: 1.0,
            latent_dim: None,
            means: MeanLayout::Spread,
        }
    }

    #[test]
    fn means_are_separated() {
        let mut rng = seed::rng(3, Stream::Data);
        let pts = unit_spread_points(20, 4, &mut rng);
        for i in 0..20 {
            for j in 0..i {
                let d: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d >= 1.0);
            }
        }
    }

    #[test]
    fn hypercube_corners_are_distinct() {
        let mut rng = seed::rng(1, Stream::Data);
        let pts = hypercube_corners(16, 4, &mut rng);
        for i in 0..16 {
            assert!(pts[i].iter().all(|v| v.abs() == 1.0));
            assert!(!pts[..i].contains(&pts[i]));
        }
        let mut s = spec(1.0);
        s.means = MeanLayout::Hypercube;
        s.latent_dim = Some(2);
        assert!(s.validate().unwrap_err().is_config());
        s.num_classes = 4;
        assert_eq!(make_synthetic(&s, 0).train.classes().len(), 4);
    }

    #[test]
    fn deterministic_checksum() {
        let a = make_synthetic(&spec(10.0), 5);
        let b = make_synthetic(&spec(10.0), 5);
        assert_eq!(a.train.checksum(), b.train.checksum());
        assert_eq!(a.test.checksum(), b.test.checksum());
        assert_ne!(a.train.checksum(), make_synthetic(&spec(10.0), 6).train.checksum());
    }

    #[test]
    fn sizes_and_image_shape() {
        let mut s = spec(1.0);
        s.sample_shape = vec![1, 4, 4];
        let d = make_synthetic(&s, 0);
        assert_eq!(d.train.len(), 120);
        assert_eq!(d.test.len(), 30);
        assert_eq!(d.train.sample_shape(), &[1, 4, 4]);
        assert_eq!(d.train.classes(), (0..6).collect::<Vec<_>>());
    }
}
