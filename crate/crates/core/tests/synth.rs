use spiketim::data::{split, Dataset};
use spiketim::events::Accumulate;
use spiketim::synth::{order_blind_oracle, synth_temporal_order, SyntheticTaskSpec};

fn dataset(samples: usize, seed: u64) -> Dataset<f64> {
    let spec = SyntheticTaskSpec {
        samples,
        seed,
        ..Default::default()
    };
    Dataset::from_streams(
        &synth_temporal_order(&spec).unwrap(),
        10,
        8,
        8,
        Accumulate::Count,
    )
    .unwrap()
}

#[test]
fn per_frame_sums_match_across_classes() {
    let ds = dataset(1000, 3);
    for k in 0..10 {
        let sums: Vec<Vec<f64>> = (0..2)
            .map(|c| {
                ds.samples
                    .iter()
                    .filter(|s| s.label == c)
                    .map(|s| s.frames.select0(k).unwrap().sum())
                    .collect()
            })
            .collect();
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var / v.len() as f64)
        };
        let ((m0, se0), (m1, se1)) = (stats(&sums[0]), stats(&sums[1]));
        let sigma = (se0 + se1).sqrt();
        assert!(
            (m0 - m1).abs() <= 3.0 * sigma,
            "frame {k}: {m0} vs {m1} (σ {sigma})"
        );
    }
}

#[test]
fn binning_recovers_the_frames() {
    let spec = SyntheticTaskSpec {
        samples: 4,
        noise_rate: 0.0,
        ..Default::default()
    };
    let ds: Dataset<f64> = Dataset::from_streams(
        &synth_temporal_order(&spec).unwrap(),
        10,
        8,
        8,
        Accumulate::Count,
    )
    .unwrap();
    for s in &ds.samples {
        for k in 0..10 {
            assert_eq!(
                s.frames.select0(k).unwrap().sum(),
                spec.pattern_events as f64
            );
            let frame = s.frames.select0(k).unwrap();
            let pattern = spec.pattern_at(s.label, k);
            for c in 0..2 {
                for y in 0..8 {
                    for x in 0..8 {
                        if frame.at(&[c, y, x]) > 0.0 {
                            assert!(pattern.active(x, y));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn order_blind_oracle_is_near_chance() {
    let ds = dataset(1200, 0);
    let (train, test) = split(&ds, [1000.0 / 1200.0, 200.0 / 1200.0], 0).unwrap();
    let acc = order_blind_oracle(&train, &test, 300).unwrap();
    assert!(acc <= 0.55, "{acc}");
}
