//! A short end-to-end pretraining run on the synthetic shape images, driven
//! through the library API. Prints the loss trajectory and the metrics CSV
//! location; takes well under a minute.

use d2v2::config::RunConfig;
use d2v2::harness::{cmd_pretrain, read_metrics_csv, CliOpts};

fn main() {
    let out_dir = std::env::temp_dir().join("d2v2_example_pretrain");
    let cfg = RunConfig::from_str_validated(&format!(
        r#"
modality = "image"
precision = "f32"
seed = 5

[model]
depth = 3
width = 64
heads = 2

[masking]
strategy = "inverse_block"
mask_ratio = 0.8
adjust = 0.1
block = 3

[decoder]
layers = 3
kernel = 3
groups = 16
width = 64

[teacher]
tau0 = 0.95
tau_end = 0.999
tau_steps = 300

[train]
masks_per_sample = 4
loss = "d2v2+cls"
cls_weight = 0.01
lr = 1e-3
total_updates = 300
batch_size = 4

[data]
kind = "synthetic_images"
n = 256
holdout = 64

[out]
dir = "{}"
checkpoint_every = 0
"#,
        out_dir.display()
    ))
    .unwrap();

    println!("pretraining: ViT depth 3 / width 64, M=4 masks per sample, R=0.8, 300 updates");
    let out = cmd_pretrain::<f32>(&cfg, &CliOpts::default(), None).unwrap();

    let table = read_metrics_csv(&out.csv).unwrap();
    let loss = table.column("total_loss").unwrap();
    println!("\n  step   total_loss");
    for i in (0..loss.len()).step_by(50) {
        println!("  {:>4}   {:.5}", i, loss[i]);
    }
    println!("  {:>4}   {:.5}", loss.len() - 1, loss[loss.len() - 1]);
    println!("\nfinal holdout loss: {:.5}", out.final_eval_loss);
    println!("checkpoint: {}", out.checkpoint.display());
    println!("metrics:    {}", out.csv.display());
}
