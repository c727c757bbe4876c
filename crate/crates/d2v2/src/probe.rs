//! Linear-probe evaluation: freeze the encoder, mean-pool the final
//! backbone outputs of the full (unmasked) samples, and train only a linear
//! classifier on top. The desk-scale stand-in for fine-tuning.

use std::rc::Rc;

use crate::data::Dataset;
use crate::error::{D2v2Error, Result};
use crate::graph::Graph;
use crate::masking::seeded_rng;
use crate::model::Model;
use crate::network::{encode, ParamBank};
use crate::optim::AdamW;
use crate::teacher::embed_full;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub classes: usize,
    pub probe_params: usize,
    pub seed: u64,
}

/// Frozen features: mean over positions of the final backbone output.
pub fn extract_features<E: Scalar>(
    bank: &ParamBank<E>,
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Tensor<E>> {
    let width = model.encoder.backbone.width;
    let mut out = Vec::with_capacity(indices.len() * width);
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.batch::<E>(chunk, None);
        let mut g: Graph<E> = Graph::new();
        let bound = bank.bind(&mut g, false);
        let tokens = embed_full(&mut g, &bound, &model.encoder, &batch.raw())?;
        let trace = encode(&mut g, &bound, &model.encoder, &tokens, false)?;
        let val = g.value(trace.output);
        let (b, l, w) = (val.shape()[0], val.shape()[1], val.shape()[2]);
        let inv = E::from_f64(1.0 / l as f64);
        for bi in 0..b {
            let mut pooled = vec![E::zero(); w];
            for t in 0..l {
                let row = &val.data()[(bi * l + t) * w..(bi * l + t + 1) * w];
                for (o, &v) in pooled.iter_mut().zip(row.iter()) {
                    *o += v;
                }
            }
            out.extend(pooled.into_iter().map(|v| v * inv));
        }
    }
    Ok(Tensor::new(vec![indices.len(), width], out))
}

/// Multinomial logistic regression on frozen features, trained full-batch
/// with Adam. Deterministic for a given seed.
pub fn linear_probe<E: Scalar>(
    train_x: &Tensor<E>,
    train_y: &[usize],
    test_x: &Tensor<E>,
    test_y: &[usize],
    classes: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let n = train_x.shape()[0];
    let dim = train_x.shape()[1];
    if n != train_y.len() || test_x.shape()[0] != test_y.len() {
        return Err(D2v2Error::data("feature/label count mismatch"));
    }
    if classes < 2 {
        return Err(D2v2Error::config("probe needs at least two classes"));
    }
    if let Some(&bad) = train_y.iter().chain(test_y.iter()).find(|&&y| y >= classes) {
        return Err(D2v2Error::data(format!("unknown class id {bad} (classes = {classes})")));
    }

    // standardize with train statistics
    let mut mean = vec![E::zero(); dim];
    for row in train_x.data().chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    let inv_n = E::from_f64(1.0 / n as f64);
    for m in mean.iter_mut() {
        *m = *m * inv_n;
    }
    let mut var = vec![E::zero(); dim];
    for row in train_x.data().chunks_exact(dim) {
        for ((s, &v), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            let d = v - m;
            *s += d * d;
        }
    }
    let eps = E::from_f64(1e-6);
    let rstd: Vec<E> = var.iter().map(|&v| E::one() / (v * inv_n + eps).sqrt()).collect();
    let standardize = |x: &Tensor<E>| -> Tensor<E> {
        let mut d = x.data().to_vec();
        for row in d.chunks_exact_mut(dim) {
            for ((v, &m), &r) in row.iter_mut().zip(mean.iter()).zip(rstd.iter()) {
                *v = (*v - m) * r;
            }
        }
        Tensor::new(x.shape().to_vec(), d)
    };
    let train_x = standardize(train_x);
    let test_x = standardize(test_x);

    let mut probe = ParamBank::<E>::new();
    let mut rng = seeded_rng(seed ^ 0x9806e);
    probe.add("w", crate::network::init_normal(&mut rng, vec![dim, classes], 0.01));
    probe.add("b", Tensor::zeros(vec![classes]));
    let mut opt = AdamW::new(&probe, 1e-4);
    let labels = Rc::new(train_y.to_vec());

    let epochs = 300;
    for step in 0..epochs {
        let mut g: Graph<E> = Graph::new();
        let bound = probe.bind(&mut g, true);
        let x = g.constant(train_x.clone());
        let logits = g.matmul(x, bound.var(probe.pid_of("w").unwrap()), false);
        let logits = g.add(logits, bound.var(probe.pid_of("b").unwrap()));
        let loss = g.softmax_cross_entropy(logits, labels.clone());
        g.backward(loss)
            .map_err(|e| D2v2Error::numeric(format!("probe step {step}: {e}")))?;
        let grads: Vec<Option<Tensor<E>>> = bound.vars().iter().map(|&v| g.grad(v)).collect();
        opt.step(&mut probe, &grads, 0.05);
    }

    // held-out accuracy by plain argmax
    let w = probe.by_name("w").unwrap();
    let b = probe.by_name("b").unwrap();
    let mut correct = 0usize;
    for (row, &label) in test_x.data().chunks_exact(dim).zip(test_y.iter()) {
        let mut best = (E::from_f64(f64::NEG_INFINITY), 0usize);
        for cidx in 0..classes {
            let mut score = b.data()[cidx];
            for (j, &v) in row.iter().enumerate() {
                score += v * w.data()[j * classes + cidx];
            }
            if score > best.0 {
                best = (score, cidx);
            }
        }
        if best.1 == label {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        accuracy: correct as f64 / test_y.len().max(1) as f64,
        classes,
        probe_params: dim * classes + classes,
        seed,
    })
}

/// Split a labeled dataset into probe train / test index sets: the last
/// `holdout` samples are the test split.
pub fn probe_split(dataset: &Dataset, holdout: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = dataset.len();
    if dataset.labels().is_none() {
        return Err(D2v2Error::data("probe needs a labeled dataset"));
    }
    let test_n = holdout.clamp(1, n.saturating_sub(1));
    let split = n - test_n;
    Ok(((0..split).collect(), (split..n).collect()))
}

/// Extract features and run the probe in one call.
pub fn probe_dataset<E: Scalar>(
    bank: &ParamBank<E>,
    model: &Model,
    dataset: &Dataset,
    holdout: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let (train_idx, test_idx) = probe_split(dataset, holdout)?;
    let labels = dataset.labels().expect("checked");
    let train_y: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let test_y: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
    let train_x = extract_features(bank, model, dataset, &train_idx, 32)?;
    let test_x = extract_features(bank, model, dataset, &test_idx, 32)?;
    linear_probe(&train_x, &train_y, &test_x, &test_y, dataset.classes(), seed)
}
