mod common;

use common::random_inputs;
use unfused::audio::generate_synthetic_dataset;
use unfused::distill::{distill_gradients, run_distillation, DistillConfig, LossWeights, PseudoLabels};
use unfused::encoder::{init_encoder, EncoderConfig, ParamGroup};
use unfused::pretrain::{pretrain_optimizer, pretrain_step};
use unfused::rng::derive_seed;

#[test]
fn prototype_head_is_bit_identical_through_training_phase() {
    let cfg = EncoderConfig::desk(4);
    let mut p = init_encoder(&cfg, 2).unwrap();
    let before = p.prot.clone();
    let opt = pretrain_optimizer(0.5);
    for step in 0..3 {
        let x = random_inputs(2, cfg.input_frames * cfg.input_mels, step);
        pretrain_step(&mut p, &x, &[step as usize, 7], &opt).unwrap();
    }
    assert_eq!(p.prot.data, before.data);
}

#[test]
fn distillation_never_touches_the_prototype_head() {
    let data = generate_synthetic_dataset(2, 8, 1).unwrap();
    let cfg = EncoderConfig::desk(2);
    let labels = PseudoLabels {
        labels: (0..data.len()).map(|i| i % 2).collect(),
        classes: 2,
        purity: None,
    };
    let dc = DistillConfig {
        epochs: 1,
        batch: 8,
        ..DistillConfig::desk()
    };
    let run = run_distillation(&dc, &cfg, &data, &labels, 4, |_| {}).unwrap();
    let init = init_encoder(&cfg, derive_seed(4, "distill-init")).unwrap();
    assert_eq!(run.params.prot.data, init.prot.data);
    assert_ne!(run.params.blocks[0].weight, init.blocks[0].weight);
}

#[test]
fn detached_terms_give_exact_zero_teacher_gradient() {
    let cfg = EncoderConfig::desk(4);
    let p = init_encoder(&cfg, 6).unwrap();
    let x = random_inputs(2, cfg.input_frames * cfg.input_mels, 9);
    let w = LossWeights {
        ce: 0.0,
        aux_ce: 0.0,
        kl: 1.0 - 0.7,
        mse: 0.003,
    };
    let (_, g) = distill_gradients(&p, &x, &[0, 3], &w).unwrap();
    let mut teacher = 0usize;
    g.visit(|name, b| {
        if name.starts_with("block4.") || ParamGroup::of(name) == ParamGroup::Classifier {
            assert!(b.data.iter().all(|&v| v == 0.0), "{name} has gradient");
            teacher += 1;
        }
    });
    assert_eq!(teacher, 4);
    assert!(g.blocks[0].weight.norm_sq() > 0.0);
}
