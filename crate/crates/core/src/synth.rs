//! A two-class temporal-order task: class 0 shows pattern A then B, class 1 shows B then A.
//!
//! Both patterns draw the same number of events per frame, so the time-summed
//! frame carries no class information and only the order separates the classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::events::{Event, EventStream};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Even rows.
    Horizontal,
    /// Even columns.
    Vertical,
    Checker,
    /// Anti-diagonal bands two pixels wide.
    Diagonal,
}

impl Pattern {
    pub fn active(self, x: usize, y: usize) -> bool {
        match self {
            Pattern::Horizontal => y.is_multiple_of(2),
            Pattern::Vertical => x.is_multiple_of(2),
            Pattern::Checker => (x + y).is_multiple_of(2),
            Pattern::Diagonal => (x + y) % 4 < 2,
        }
    }

    fn pixels(self, grid: usize) -> Vec<(u16, u16)> {
        (0..grid)
            .flat_map(|y| (0..grid).map(move |x| (x, y)))
            .filter(|&(x, y)| self.active(x, y))
            .map(|(x, y)| (x as u16, y as u16))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub samples: usize,
    pub time_steps: usize,
    pub grid: usize,
    pub pattern_a: Pattern,
    pub pattern_b: Pattern,
    /// Pattern events per frame.
    pub pattern_events: usize,
    /// Mean number of uniformly placed noise events per frame.
    pub noise_rate: f64,
    /// Frame duration in microseconds.
    pub frame_us: u32,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            num_classes: 2,
            samples: 1200,
            time_steps: 10,
            grid: 8,
            pattern_a: Pattern::Horizontal,
            pattern_b: Pattern::Vertical,
            pattern_events: 12,
            noise_rate: 4.0,
            frame_us: 1000,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::config(
                "the temporal-order task has exactly 2 classes",
            ));
        }
        if self.samples == 0 || !self.samples.is_multiple_of(2) {
            return Err(Error::config("samples must be a positive even number"));
        }
        if self.time_steps < 2 {
            return Err(Error::config("time_steps must be at least 2"));
        }
        if self.grid < 2 || !self.grid.is_multiple_of(2) || self.grid > u16::MAX as usize {
            return Err(Error::config("grid must be an even size of at least 2"));
        }
        if self.pattern_a == self.pattern_b {
            return Err(Error::config("patterns A and B must differ"));
        }
        let (na, nb) = (
            self.pattern_a.pixels(self.grid).len(),
            self.pattern_b.pixels(self.grid).len(),
        );
        if na != nb {
            return Err(Error::config(format!(
                "patterns cover {na} and {nb} pixels on a {} grid; budgets must match",
                self.grid
            )));
        }
        if self.pattern_events == 0 {
            return Err(Error::config("pattern_events must be at least 1"));
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return Err(Error::config("noise_rate must be finite and non-negative"));
        }
        if self.frame_us == 0 || (self.frame_us as u64) * (self.time_steps as u64) > u32::MAX as u64
        {
            return Err(Error::config(
                "frame_us must be positive and fit T frames in u32 microseconds",
            ));
        }
        Ok(())
    }

    /// Pattern shown at frame `k` for `label`.
    pub fn pattern_at(&self, label: usize, k: usize) -> Pattern {
        let first_half = k < self.time_steps / 2;
        if first_half == (label == 0) {
            self.pattern_a
        } else {
            self.pattern_b
        }
    }
}

/// Generates `spec.samples` labelled streams, labels alternating 0, 1, 0, ...
///
/// Frame `k` covers `[k·Δ, (k+1)·Δ)`; the first event is moved to `t = 0` and the
/// last to `t = T·Δ` so equal-duration binning recovers the frames exactly.
pub fn synth_temporal_order(spec: &SyntheticTaskSpec) -> Result<Vec<EventStream>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pixels_a = spec.pattern_a.pixels(spec.grid);
    let pixels_b = spec.pattern_b.pixels(spec.grid);
    let noise = if spec.noise_rate > 0.0 {
        Some(Poisson::new(spec.noise_rate).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };
    let grid = spec.grid as u16;
    let dt = spec.frame_us;
    (0..spec.samples)
        .map(|i| {
            let label = i % 2;
            let mut s = EventStream::new(grid, grid, Some(label as i32));
            for k in 0..spec.time_steps {
                let px = if spec.pattern_at(label, k) == spec.pattern_a {
                    &pixels_a
                } else {
                    &pixels_b
                };
                let t0 = k as u32 * dt;
                for _ in 0..spec.pattern_events {
                    let (x, y) = px[rng.random_range(0..px.len())];
                    s.events.push(Event {
                        t: t0 + rng.random_range(0..dt),
                        x,
                        y,
                        p: rng.random_range(0..2),
                    });
                }
                let n_noise = noise.map_or(0, |d| d.sample(&mut rng) as usize);
                for _ in 0..n_noise {
                    s.events.push(Event {
                        t: t0 + rng.random_range(0..dt),
                        x: rng.random_range(0..grid),
                        y: rng.random_range(0..grid),
                        p: rng.random_range(0..2),
                    });
                }
            }
            s.events.sort_by_key(|e| e.t);
            s.events[0].t = 0;
            s.events.last_mut().unwrap().t = spec.time_steps as u32 * dt;
            Ok(s)
        })
        .collect()
}

/// Order-blind reference: L2-regularized logistic regression on the time-summed frame.
///
/// Returns accuracy on `test` after full-batch gradient descent on `train`.
pub fn order_blind_oracle<F: Element>(
    train: &Dataset<F>,
    test: &Dataset<F>,
    iterations: usize,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::contract(
            "oracle needs non-empty train and test sets",
        ));
    }
    let features = |ds: &Dataset<F>| -> Vec<Vec<f64>> {
        ds.samples
            .iter()
            .map(|s| {
                let steps = s.frames.shape()[0];
                let per = s.frames.numel() / steps;
                let mut f = vec![0.0; per];
                for (i, v) in s.frames.data().iter().enumerate() {
                    f[i % per] += v.as_f64();
                }
                f
            })
            .collect()
    };
    let (xtr, xte) = (features(train), features(test));
    let ytr: Vec<f64> = train
        .labels()
        .iter()
        .map(|&l| (l == 1) as u8 as f64)
        .collect();
    let dim = xtr[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|j| xtr.iter().map(|r| r[j]).sum::<f64>() / xtr.len() as f64)
        .collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| {
            let v = xtr.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / xtr.len() as f64;
            v.sqrt().max(1e-8)
        })
        .collect();
    let norm = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean[j]) / std[j])
                    .collect()
            })
            .collect()
    };
    let (xtr, xte) = (norm(&xtr), norm(&xte));
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let (lr, l2) = (0.1, 1e-3);
    let n = xtr.len() as f64;
    for _ in 0..iterations {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in xtr.iter().zip(&ytr) {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * (g / n + l2 * *wi);
        }
        b -= lr * gb / n;
    }
    let correct = xte
        .iter()
        .zip(test.labels())
        .filter(|(x, l)| {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) == (*l == 1)
        })
        .count();
    Ok(correct as f64 / xte.len() as f64)
}
