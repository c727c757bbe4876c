//! Character-level text pretraining against a fixed vocabulary file. The
//! corpus here is synthetic patterned text written to a temp directory;
//! swap in any real corpus with one sample per line.

use d2v2::config::RunConfig;
use d2v2::harness::{cmd_pretrain, read_metrics_csv, CliOpts};

fn main() {
    let dir = std::env::temp_dir().join("d2v2_example_text");
    std::fs::create_dir_all(&dir).unwrap();

    // vocabulary: one token per line, id = line number
    let vocab_path = dir.join("vocab.txt");
    let chars = "abcdefghij ";
    std::fs::write(
        &vocab_path,
        chars.chars().map(|c| format!("{c}\n")).collect::<String>(),
    )
    .unwrap();

    // corpus: repeated word patterns so masked prediction has structure
    let corpus_path = dir.join("corpus.txt");
    let words = ["abad", "cefa", "hijab", "gig", "decade", "fig"];
    let mut corpus = String::new();
    let mut k = 0usize;
    for _ in 0..128 {
        let mut line = String::new();
        while line.len() < 70 {
            line.push_str(words[k % words.len()]);
            line.push(' ');
            k += 1;
        }
        corpus.push_str(line.trim_end());
        corpus.push('\n');
    }
    std::fs::write(&corpus_path, corpus).unwrap();

    let cfg = RunConfig::from_str_validated(&format!(
        r#"
modality = "text"
precision = "f32"
seed = 23

[model]
depth = 3
width = 64
heads = 2
max_len = 64

[masking]
strategy = "inverse_block"
mask_ratio = 0.42
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
# averaged targets stay un-normalized for text
target_layer_norm = false

[train]
masks_per_sample = 4
lr = 1e-3
total_updates = 200
batch_size = 4

[data]
kind = "text_file"
path = "{}"
vocab = "{}"
tokenize = "char"
seq_len = 64
holdout = 16

[out]
dir = "{}"
checkpoint_every = 0
"#,
        corpus_path.display(),
        vocab_path.display(),
        dir.join("run").display()
    ))
    .unwrap();

    println!("character-level pretraining, 64-token sequences, R=0.42, M=4");
    let out = cmd_pretrain::<f32>(&cfg, &CliOpts::default(), None).unwrap();

    let table = read_metrics_csv(&out.csv).unwrap();
    let loss = table.column("total_loss").unwrap();
    println!("\n  step   total_loss");
    for i in (0..loss.len()).step_by(40) {
        println!("  {:>4}   {:.5}", i, loss[i]);
    }
    println!("\nfinal holdout loss: {:.5}", out.final_eval_loss);
}
