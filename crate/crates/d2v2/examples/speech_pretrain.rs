//! Speech-modality pretraining on synthetic tone mixtures: the strided
//! convolutional feature encoder, the masked relative-position convolution,
//! and the per-head distance-penalty attention are all in play.

use d2v2::config::RunConfig;
use d2v2::harness::{cmd_pretrain, read_metrics_csv, CliOpts};
use d2v2::network::alibi_slopes;

fn main() {
    println!("frozen distance-penalty slopes for 4 heads: {:?}\n", alibi_slopes(4));

    let out_dir = std::env::temp_dir().join("d2v2_example_speech");
    let cfg = RunConfig::from_str_validated(&format!(
        r#"
modality = "speech"
precision = "f32"
seed = 11

[model]
depth = 3
width = 64
heads = 4
# distance-penalty attention defaults ON for speech
conv_dim = 32
conv_layers = [[10, 5], [4, 2], [4, 2]]
rel_kernel = 9

[masking]
strategy = "inverse_block"
mask_ratio = 0.5
adjust = 0.1
block = 3

[decoder]
layers = 3
kernel = 7
groups = 16
width = 64

[teacher]
tau0 = 0.95
tau_end = 0.999
tau_steps = 200

[train]
masks_per_sample = 4
lr = 1e-3
total_updates = 200
batch_size = 4

[data]
kind = "synthetic_speech"
n = 128
samples = 2048
holdout = 32

[out]
dir = "{}"
checkpoint_every = 0
"#,
        out_dir.display()
    ))
    .unwrap();
    assert!(cfg.alibi_enabled(), "speech runs use the distance penalty by default");

    println!("pretraining on tone/noise mixtures (2048 samples -> 101 frames), M=4, R=0.5");
    let out = cmd_pretrain::<f32>(&cfg, &CliOpts::default(), None).unwrap();

    let table = read_metrics_csv(&out.csv).unwrap();
    let loss = table.column("total_loss").unwrap();
    println!("\n  step   total_loss");
    for i in (0..loss.len()).step_by(40) {
        println!("  {:>4}   {:.5}", i, loss[i]);
    }
    println!("\nfinal holdout loss: {:.5}", out.final_eval_loss);
    println!("checkpoint: {}", out.checkpoint.display());
}
