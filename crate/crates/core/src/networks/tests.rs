use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::Tape;
use crate::tensor::Tensor;

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        resolution: 16,
        widths: [2, 8, 32],
        spade_hidden: 4,
        audio_dim: 6,
        disc_base: 4,
        mouth_crop: 8,
        ..ArchConfig::desk()
    }
}

struct Inputs {
    driving: Tensor,
    image: Tensor,
    map: Tensor,
    audio: Tensor,
}

fn inputs(arch: &ArchConfig, n: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = arch.resolution;
    Inputs {
        driving: Tensor::randn(&[n, arch.driving_channels(), r, r], 0.5, &mut rng),
        image: Tensor::randn(&[n, 3, r, r], 0.5, &mut rng),
        map: Tensor::randn(&[n, 3, r, r], 0.5, &mut rng),
        audio: Tensor::randn(&[n, arch.audio_dim], 1.0, &mut rng),
    }
}

fn place(tape: &mut Tape, x: &Inputs) -> GeneratorInput {
    GeneratorInput {
        driving: tape.constant(x.driving.clone()),
        reference_image: tape.constant(x.image.clone()),
        reference_map: tape.constant(x.map.clone()),
        audio: tape.constant(x.audio.clone()),
    }
}

fn rows(trace: &[TraceRow]) -> Vec<(&str, (usize, usize, usize))> {
    trace.iter().map(|r| (r.block.as_str(), r.shape)).collect()
}

/// Reference trace rewritten for widths (8, 32, 128) at 64×64.
#[test]
fn desk_traces_follow_scaled_tables() {
    let arch = ArchConfig::desk();
    let g = Generator::new(&arch, 1).unwrap();
    let x = inputs(&arch, 1, 2);
    let mut tape = Tape::new();
    let input = place(&mut tape, &x);
    let out = g.forward(&mut tape, &input).unwrap();
    assert_eq!(
        rows(&out.flow_trace),
        vec![
            ("Input", (64, 64, 6)),
            ("7x7 conv-8", (64, 64, 8)),
            ("3x3 conv-32", (32, 32, 32)),
            ("3x3 conv-128", (16, 16, 128)),
            ("SPADE Block", (16, 16, 128)),
            ("SPADE Block", (16, 16, 128)),
            ("SPADE Block", (16, 16, 128)),
            ("Pixel Shuffle", (32, 32, 32)),
            ("SPADE Block", (32, 32, 32)),
            ("Pixel Shuffle", (64, 64, 8)),
            ("7x7 conv-2", (64, 64, 2)),
        ]
    );
    assert_eq!(
        rows(&out.render_trace),
        vec![
            ("Input", (64, 64, 9)),
            ("7x7 conv-8", (64, 64, 8)),
            ("3x3 conv-32", (32, 32, 32)),
            ("3x3 conv-128", (16, 16, 128)),
            ("SPADE Block", (16, 16, 128)),
            ("AdaIN Block", (16, 16, 128)),
            ("Pixel Shuffle", (32, 32, 32)),
            ("SPADE Block", (32, 32, 32)),
            ("AdaIN Block", (32, 32, 32)),
            ("Pixel Shuffle", (64, 64, 8)),
            ("SPADE Block", (64, 64, 8)),
            ("AdaIN Block", (64, 64, 8)),
            ("SPADE Block", (64, 64, 8)),
            ("LReLU 7x7 conv-3 tanh", (64, 64, 3)),
        ]
    );
    assert!(tape.value(out.frame).data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn zero_flow_generator_keeps_reference() {
    let arch = tiny_arch();
    let mut g = Generator::new(&arch, 3).unwrap();
    g.use_flow = false;
    let x = inputs(&arch, 2, 4);
    let mut tape = Tape::new();
    let input = place(&mut tape, &x);
    let out = g.forward(&mut tape, &input).unwrap();
    assert_eq!(tape.value(out.warped_reference), &x.image);
    assert!(tape.value(out.flow).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(out.frame).data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn zeroed_flow_head_gives_identity_warp() {
    let arch = tiny_arch();
    let mut g = Generator::new(&arch, 3).unwrap();
    for (name, id) in g
        .store
        .ids()
        .map(|id| (g.store.name(id).to_owned(), id))
        .collect::<Vec<_>>()
    {
        if name.starts_with("flow.out.") {
            g.store.value_mut(id).data_mut().fill(0.0);
        }
    }
    let x = inputs(&arch, 1, 4);
    let mut tape = Tape::new();
    let input = place(&mut tape, &x);
    let out = g.forward(&mut tape, &input).unwrap();
    assert_eq!(tape.value(out.warped_reference), &x.image);
}

#[test]
fn audio_changes_frame() {
    let arch = tiny_arch();
    let g = Generator::new(&arch, 5).unwrap();
    let x = inputs(&arch, 1, 6);
    let a = g.generate(&x.driving, &x.image, &x.map, &x.audio).unwrap();
    let audio2 = x.audio.map(|v| v + 0.5);
    let b = g.generate(&x.driving, &x.image, &x.map, &audio2).unwrap();
    assert_ne!(a, b);
}

#[test]
fn forward_is_deterministic() {
    let arch = tiny_arch();
    let x = inputs(&arch, 2, 8);
    let a = Generator::new(&arch, 7)
        .unwrap()
        .generate(&x.driving, &x.image, &x.map, &x.audio)
        .unwrap();
    let b = Generator::new(&arch, 7)
        .unwrap()
        .generate(&x.driving, &x.image, &x.map, &x.audio)
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn bad_inputs_rejected() {
    let arch = tiny_arch();
    let g = Generator::new(&arch, 1).unwrap();
    let x = inputs(&arch, 1, 2);
    let short_audio = Tensor::zeros(&[1, 5]);
    assert!(g
        .generate(&x.driving, &x.image, &x.map, &short_audio)
        .is_err());
    let wrong_stack = Tensor::zeros(&[1, 6, 16, 16]);
    assert!(g
        .generate(&wrong_stack, &x.image, &x.map, &x.audio)
        .is_err());
    let bad = ArchConfig {
        widths: [2, 8, 16],
        ..tiny_arch()
    };
    assert!(Generator::new(&bad, 1).is_err());
}

/// Every named parameter of the generator receives some gradient from a
/// loss touching the frame and the flow.
#[test]
fn every_generator_weight_is_live() {
    let arch = tiny_arch();
    let g = Generator::new(&arch, 9).unwrap();
    let x = inputs(&arch, 2, 10);
    let mut tape = Tape::new();
    let input = place(&mut tape, &x);
    let out = g.forward(&mut tape, &input).unwrap();
    let target = tape.constant(x.image.clone());
    let l1 = tape.mean_abs_diff(out.frame, target).unwrap();
    let l2 = tape.mean_abs_diff(out.warped_reference, target).unwrap();
    let loss = tape.add(l1, l2).unwrap();
    let grads = tape.backward(loss).param_grads(&g.store);
    for (id, grad) in g.store.ids().zip(&grads) {
        let name = g.store.name(id);
        // Biases directly before instance normalization cancel; the SPADE
        // output biases of non-final blocks feed such a normalization.
        let cancels = name.ends_with("conv.bias") && !name.starts_with("render.spade_ref");
        if !cancels {
            assert!(grad.max_abs() > 0.0, "dead parameter {name}");
        }
    }
}

#[test]
fn discriminator_outputs_patch_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = Discriminator::new(6, 4, 4, 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[2, 6, 32, 32], 1.0, &mut rng));
    let out = d.forward(&mut tape, x).unwrap();
    let (n, c, h, w) = tape.value(out.score).dims4().unwrap();
    assert_eq!((n, c), (2, 1));
    assert!(h > 1 && w > 1);
    assert_eq!(out.features.len(), 4);
    let bad = tape.constant(Tensor::zeros(&[1, 5, 32, 32]));
    assert!(d.forward(&mut tape, bad).is_err());
}

#[test]
fn mouth_input_replicates_audio() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let audio = Tensor::randn(&[2, 5], 1.0, &mut rng);
    let av = tape.constant(audio.clone());
    let crop = tape.constant(Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng));
    let x = Discriminator::mouth_input(&mut tape, av, crop).unwrap();
    let v = tape.value(x);
    assert_eq!(v.shape(), &[2, 8, 4, 4]);
    for i in 0..2 {
        for d in 0..5 {
            let plane = &v.sample(i)[(3 + d) * 16..(4 + d) * 16];
            assert!(plane.iter().all(|&p| p == audio.data()[i * 5 + d]));
        }
    }
}

#[test]
fn discriminator_weights_are_live() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = Discriminator::new(6, 4, 4, 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[2, 6, 32, 32], 1.0, &mut rng));
    let out = d.forward(&mut tape, x).unwrap();
    let loss = tape.mean(out.score);
    let grads = tape.backward(loss).param_grads(&d.store);
    for (id, g) in d.store.ids().zip(&grads) {
        assert!(g.max_abs() > 0.0, "dead parameter {}", d.store.name(id));
    }
}
