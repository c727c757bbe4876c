//! Where the speed comes from: sparse student encoding ((1-R)^2 attention
//! cost), the cheap convolutional decoder, and teacher amortization over M
//! mask versions. Closed-form estimates side by side with the measured
//! meters from a real step.

use d2v2::checkpoint::build_state_with_dataset;
use d2v2::config::RunConfig;
use d2v2::decoder::DecoderConfig;
use d2v2::network::{AlibiConfig, BackboneConfig};
use d2v2::trainer::{flop_report, train_step};

fn main() {
    let backbone = BackboneConfig {
        depth: 6,
        width: 192,
        heads: 3,
        ffn_mult: 4,
        alibi: AlibiConfig::default(),
    };
    let decoder = DecoderConfig::image_default(96);

    println!("closed-form forward FLOPs per sample (L = 64 tokens):\n");
    println!("{:>6} {:>6} {:>14} {:>14} {:>12} {:>14}", "R", "M", "teacher", "student/mask", "decoder", "teacher share");
    for (r, m) in [(0.0, 1), (0.5, 8), (0.8, 1), (0.8, 8), (0.8, 16)] {
        let rep = flop_report(&backbone, &decoder, true, 64, r, m);
        println!(
            "{:>6.1} {:>6} {:>14.3e} {:>14.3e} {:>12.3e} {:>14.3}",
            r, m, rep.teacher_backbone, rep.student_backbone_per_mask, rep.decoder_per_mask,
            rep.amortized_teacher_share
        );
    }
    let rep = flop_report(&backbone, &decoder, true, 64, 0.8, 8);
    println!(
        "\nattention-score cost ratio at R=0.8: {:.4} (= (1-R)^2)",
        rep.student_attn_scores_per_mask / rep.teacher_attn_scores
    );

    // measured meters from an instrumented step (1-D layout, L = 100, so
    // (1-R)L is exact)
    let cfg = RunConfig::from_str_validated(
        r#"
modality = "speech"
precision = "f64"
seed = 3
[model]
depth = 2
width = 32
heads = 2
alibi = false
conv_dim = 16
conv_layers = [[10, 10]]
rel_kernel = 3
[masking]
strategy = "inverse_block"
mask_ratio = 0.8
block = 3
[decoder]
layers = 2
kernel = 7
groups = 8
width = 32
[train]
masks_per_sample = 8
lr = 1e-3
total_updates = 1
batch_size = 2
[data]
kind = "synthetic_speech"
n = 8
samples = 1000
holdout = 2
"#,
    )
    .unwrap();
    let dataset = cfg.load_dataset().unwrap();
    let mut state = build_state_with_dataset::<f64>(&cfg, &dataset).unwrap();
    let params = cfg.train_params();
    let batch = dataset.batch::<f64>(&[0, 1], None);
    let metrics = train_step(&mut state, &batch.raw(), &params).unwrap();

    println!("\nmeasured on one real step (speech, 100 frames, R=0.8, M=8):");
    println!("  forwards      teacher : feature : student = {} : {} : {}",
        metrics.teacher_fwd, metrics.feat_fwd, metrics.student_fwd);
    let per_mask = metrics.score_flops_student as f64 / params.masks_per_sample as f64;
    println!(
        "  attention-score FLOPs   student/mask / teacher = {:.4}",
        per_mask / metrics.score_flops_teacher as f64
    );
    println!("  forward FLOPs           teacher {:.3e}, student backbone {:.3e}, decoder {:.3e}",
        metrics.flops_teacher as f64, metrics.flops_student_backbone as f64, metrics.flops_decoder as f64);
}
