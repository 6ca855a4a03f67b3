//! Synthetic classification datasets, deterministic given a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Blobs,
    Spirals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gaussian clusters with mild overlap: one cluster per class, centers drawn
/// once from the seed.
pub fn blobs(n: usize, dim: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| normal(&mut rng) * 2.0).collect())
        .collect();
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        inputs.push(
            centers[c]
                .iter()
                .map(|&mu| mu + normal(&mut rng) * 1.0)
                .collect(),
        );
        labels.push(c);
    }
    Dataset {
        inputs,
        labels,
        classes,
    }
}

/// Interleaved 2-D spirals embedded in the first two coordinates; remaining
/// coordinates carry noise only.
pub fn spirals(n: usize, dim: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let per_class = n.div_ceil(classes);
    for i in 0..n {
        let c = i % classes;
        let t = (i / classes) as f64 / per_class as f64;
        let r = 0.2 + 2.0 * t;
        let phi = 3.0 * std::f64::consts::PI * t + std::f64::consts::TAU * c as f64 / classes as f64;
        let mut row = vec![0.0; dim.max(2)];
        row[0] = r * phi.cos() + normal(&mut rng) * 0.1;
        row[1] = r * phi.sin() + normal(&mut rng) * 0.1;
        for v in row.iter_mut().skip(2) {
            *v = normal(&mut rng) * 0.1;
        }
        row.truncate(dim.max(2));
        inputs.push(row);
        labels.push(c);
    }
    Dataset {
        inputs,
        labels,
        classes,
    }
}

pub fn generate(generator: Generator, n: usize, dim: usize, classes: usize, seed: u64) -> Dataset {
    match generator {
        Generator::Blobs => blobs(n, dim, classes, seed),
        Generator::Spirals => spirals(n, dim, classes, seed),
    }
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, |r| r.len())
    }

    /// Partition into `mini * micro` equal chunks following a seeded
    /// per-epoch shuffle. Errors if the dataset does not divide evenly.
    pub fn micro_batches(
        &self,
        mini: usize,
        micro: usize,
        seed: u64,
        epoch: usize,
    ) -> Result<Vec<Vec<Vec<usize>>>> {
        let parts = mini * micro;
        let n = self.inputs.len();
        if n % parts != 0 {
            return Err(Error::UnevenDataset { n, parts });
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        // Fisher-Yates.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let micro_size = n / parts;
        let mut out = Vec::with_capacity(mini);
        let mut it = order.into_iter();
        for _ in 0..mini {
            let mut batch = Vec::with_capacity(micro);
            for _ in 0..micro {
                batch.push((&mut it).take(micro_size).collect());
            }
            out.push(batch);
        }
        Ok(out)
    }
}
