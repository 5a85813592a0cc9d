//! Labelled frame datasets, deterministic splitting and time-major batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{bin_to_frames, Accumulate, EventStream};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<F> {
    /// `[T, 2, H, W]`
    pub frames: Tensor<F>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset<F> {
    pub samples: Vec<Sample<F>>,
}

impl<F: Element> Dataset<F> {
    pub fn new(samples: Vec<Sample<F>>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = first.frames.shape();
            if shape.len() != 4 {
                return Err(Error::shape("dataset frames", shape, &[0, 2, 0, 0]));
            }
            if let Some(bad) = samples.iter().find(|s| s.frames.shape() != shape) {
                return Err(Error::shape("dataset frames", shape, bad.frames.shape()));
            }
        }
        Ok(Dataset { samples })
    }

    /// Bins labelled streams; every stream must carry a label.
    pub fn from_streams(
        streams: &[EventStream],
        steps: usize,
        height: usize,
        width: usize,
        accumulate: Accumulate,
    ) -> Result<Self> {
        let samples = streams
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let label = s
                    .label
                    .ok_or_else(|| Error::config(format!("stream {i} has no label")))?;
                Ok(Sample {
                    frames: bin_to_frames(s, steps, height, width, accumulate)?,
                    label: label as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Stacks samples into time-major `[T, N, 2, H, W]` frames plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<F>, Vec<usize>)> {
        let first = indices
            .first()
            .and_then(|&i| self.samples.get(i))
            .ok_or_else(|| Error::contract("empty or out-of-range batch"))?;
        let shape = first.frames.shape().to_vec();
        let steps = shape[0];
        let per_step: usize = shape[1..].iter().product();
        let n = indices.len();
        let mut data = vec![F::zero(); steps * n * per_step];
        let mut labels = Vec::with_capacity(n);
        for (j, &i) in indices.iter().enumerate() {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::contract(format!("sample {i} out of range")))?;
            for t in 0..steps {
                let src = &s.frames.data()[t * per_step..(t + 1) * per_step];
                data[(t * n + j) * per_step..(t * n + j + 1) * per_step].copy_from_slice(src);
            }
            labels.push(s.label);
        }
        let mut out_shape = vec![steps, n];
        out_shape.extend_from_slice(&shape[1..]);
        Ok((Tensor::from_vec(&out_shape, data)?, labels))
    }
}

/// Disjoint, exhaustive two-way split under `seed`.
pub fn split<F: Element>(
    ds: &Dataset<F>,
    fractions: [f64; 2],
    seed: u64,
) -> Result<(Dataset<F>, Dataset<F>)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions[0] + fractions[1] - 1.0).abs() > 1e-9
    {
        return Err(Error::config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = ds.len();
    let n_first = (n as f64 * fractions[0]).round() as usize;
    if n_first == 0 || n_first == n {
        return Err(Error::config(format!(
            "split {fractions:?} of {n} samples leaves a side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = order.split_at(n_first);
    Ok((ds.subset(a), ds.subset(b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset<f64> {
        Dataset::new(
            (0..n)
                .map(|i| Sample {
                    frames: Tensor::full(&[2, 2, 1, 1], i as f64),
                    label: i % 2,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ninety_ten_split() {
        let ds = toy(100);
        let (a, b) = split(&ds, [0.9, 0.1], 3).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        let mut ids: Vec<f64> = a
            .samples
            .iter()
            .chain(&b.samples)
            .map(|s| s.frames.data()[0])
            .collect();
        ids.sort_by(f64::total_cmp);
        assert_eq!(ids, (0..100).map(|i| i as f64).collect::<Vec<_>>());
        let (a2, _) = split(&ds, [0.9, 0.1], 3).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn empty_side_is_a_config_error() {
        assert!(matches!(
            split(&toy(5), [1.0, 0.0], 0),
            Err(Error::Config(_))
        ));
        assert!(split(&toy(5), [0.5, 0.4], 0).is_err());
    }

    #[test]
    fn batch_is_time_major() {
        let ds = toy(3);
        let (x, labels) = ds.batch(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 2, 1, 1]);
        assert_eq!(labels, vec![0, 0]);
        assert_eq!(x.to_f64_vec(), vec![2., 2., 0., 0., 2., 2., 0., 0.]);
    }
}
