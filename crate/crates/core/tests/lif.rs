use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spiketim::autodiff::{NormMode, Tape};
use spiketim::model::{Model, ModelConfig};
use spiketim::neuron::{lif_forward, lif_multistep, lif_step, LifConfig, LifState, NeuronMode};
use spiketim::Tensor;

#[test]
fn constant_subthreshold_input_follows_closed_form() {
    let cfg = LifConfig::default();
    let mode = NeuronMode::spiking();
    let tape = Tape::<f64>::new();
    let x_val = 0.8;
    let x = tape.constant(Tensor::scalar(x_val));
    let mut state: Option<LifState<f64>> = None;
    for t in 1..=50 {
        let (s, next) = lif_step(state.as_ref(), x, &cfg, &mode).unwrap();
        assert_eq!(s.value().item(), 0.0);
        let v = next.v.value().item();
        let expect = x_val * (1.0 - (1.0 - 1.0 / cfg.tau).powi(t));
        assert!(
            ((v - expect) / expect).abs() <= 1e-6,
            "t={t}: {v} vs {expect}"
        );
        state = Some(next);
    }
}

#[test]
fn reset_to_zero_is_exact() {
    let cfg = LifConfig::default();
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[3], &[2.0, 3.7, 0.5]).unwrap());
    let (s, next) = lif_step(None, x, &cfg, &NeuronMode::spiking()).unwrap();
    assert_eq!(s.value().to_f64_vec(), vec![1.0, 1.0, 0.0]);
    assert_eq!(next.v.value().to_f64_vec(), vec![0.0, 0.0, 0.25]);
}

#[test]
fn fused_and_composed_agree() {
    let cfg = LifConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::uniform(&[6, 10], 0.0, 3.0, &mut rng);
    let w = Tensor::<f64>::uniform(&[6, 10], -1.0, 1.0, &mut rng);

    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let fused = lif_multistep(xv, &cfg, &NeuronMode::spiking()).unwrap();
    tape.backward(fused.mul(tape.constant(w.clone())).unwrap().sum())
        .unwrap();
    let g_fused = xv.grad().unwrap();

    let tape2 = Tape::new();
    let xv2 = tape2.leaf(x, true);
    let steps: Vec<_> = (0..6).map(|t| xv2.select0(t).unwrap()).collect();
    let out = lif_forward(&steps, &cfg, &NeuronMode::spiking()).unwrap();
    let composed = spiketim::autodiff::Var::stack0(&out).unwrap();
    tape2
        .backward(composed.mul(tape2.constant(w)).unwrap().sum())
        .unwrap();

    assert_eq!(*fused.value(), *composed.value());
    let g_comp = xv2.grad().unwrap();
    for (a, b) in g_fused.data().iter().zip(g_comp.data()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn tape_grows_linearly_in_time_steps() {
    let nodes = |t: usize| {
        let mut cfg = ModelConfig::micro();
        cfg.time_steps = t;
        let mut m = Model::<f32>::new(cfg, 0).unwrap();
        let tape = Tape::new();
        let f = m
            .store
            .bind(&tape, true, NormMode::Train, NeuronMode::spiking());
        let x = Tensor::zeros(&[t, 1, 2, 8, 8]);
        m.net.forward(&f, tape.constant(x)).unwrap();
        (tape.len(), tape.elements())
    };
    let (a, b, c) = (nodes(2), nodes(4), nodes(6));
    assert_eq!(b.0 - a.0, c.0 - b.0);
    assert_eq!(b.1 - a.1, c.1 - b.1);
}

proptest! {
    #[test]
    fn spikes_are_binary(
        xs in prop::collection::vec(-5.0f64..5.0, 24),
        tau in 1.1f64..8.0,
        th in 0.1f64..3.0,
    ) {
        let cfg = LifConfig { tau, v_threshold: th, ..Default::default() };
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[4, 6], xs).unwrap());
        let s = lif_multistep(x, &cfg, &NeuronMode::spiking()).unwrap();
        prop_assert!(s.value().data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
