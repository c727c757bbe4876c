//! Section timing for one training step at the toy-ViT scale.

use std::time::Instant;

use d2v2::config::RunConfig;
use d2v2::checkpoint::build_state_with_dataset;
use d2v2::graph::Graph;
use d2v2::masking::{plan_seed, sample_mask, seeded_rng};
use d2v2::model::student_forward;
use d2v2::teacher::{build_targets, embed_full};
use d2v2::trainer::l2_masked_loss;

const CFG: &str = r#"
modality = "image"
precision = "f32"
seed = 3
[model]
depth = 6
width = 192
heads = 3
[decoder]
layers = 4
kernel = 3
groups = 16
width = 96
[teacher]
k_top = 3
[train]
masks_per_sample = 4
lr = 1e-3
total_updates = 20
batch_size = 4
[data]
kind = "synthetic_images"
n = 64
holdout = 16
"#;

fn main() {
    let cfg = RunConfig::from_str_validated(CFG).unwrap();
    let dataset = cfg.load_dataset().unwrap();
    let state = build_state_with_dataset::<f32>(&cfg, &dataset).unwrap();
    let params = cfg.train_params();
    let batch = dataset.batch::<f32>(&[0, 1, 2, 3], None);

    for round in 0..3 {
        let t0 = Instant::now();
        let targets = build_targets(&state.teacher, &state.model.encoder, &batch.raw(), 3, true).unwrap();
        let t_teacher = t0.elapsed();

        let t1 = Instant::now();
        let mut g: Graph<f32> = Graph::new();
        let bound = state.bank.bind(&mut g, true);
        let features = embed_full(&mut g, &bound, &state.model.encoder, &batch.raw()).unwrap();
        let mut losses = Vec::new();
        for m in 0..params.masks_per_sample {
            let plans: Vec<_> = (0..4)
                .map(|b| {
                    sample_mask(
                        &params.mask,
                        features.layout,
                        &mut seeded_rng(plan_seed(3, 0, b as u64, m as u64)),
                    )
                    .unwrap()
                })
                .collect();
            let mut nrng = seeded_rng(99 + m as u64);
            let out = student_forward(&mut g, &bound, &state.model, &features, &plans, &mut nrng).unwrap();
            losses.push(l2_masked_loss(&mut g, out.pred, &targets.y, &plans).unwrap());
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l);
        }
        let total = g.scale(total, 0.25);
        let t_student_fwd = t1.elapsed();

        let t2 = Instant::now();
        g.backward(total).unwrap();
        let t_backward = t2.elapsed();

        let t3 = Instant::now();
        let grads: Vec<_> = bound.vars().iter().map(|&v| g.grad(v)).collect();
        let t_grads = t3.elapsed();

        println!(
            "round {round}: teacher {:.0}ms | student fwd {:.0}ms | backward {:.0}ms | collect {:.0}ms | graph nodes {} | flops {:.2}G",
            t_teacher.as_secs_f64() * 1e3,
            t_student_fwd.as_secs_f64() * 1e3,
            t_backward.as_secs_f64() * 1e3,
            t_grads.as_secs_f64() * 1e3,
            g.len(),
            g.flops() as f64 / 1e9,
        );
        drop(grads);
    }
}
