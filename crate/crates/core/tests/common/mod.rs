// SPDX-License-Identifier: Apache-2.0

//! Oracles and fixtures shared by the integration test targets.

#![allow(dead_code)]

use craft_core::retrieval::{QuerySpectrum, RetrievedReference};
use craft_core::train::{backward, mse_loss, Batch, Gradients};
use craft_core::{
    sliding_windows, CraftModel, KnowledgeBase, ModelConfig, MultivariateSeries, OpCounter, RelationGraph,
    Retriever,
};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_series(t: usize, c: usize, seed: u64) -> MultivariateSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_simple_fn((t, c), || rng.random_range(-1.0..1.0));
    MultivariateSeries::from_values(values, 0).unwrap()
}

pub fn kb_for(series: &MultivariateSeries, l: usize, h: usize, m: usize, f: usize) -> KnowledgeBase {
    let memory = sliding_windows(series, l, h, 1).unwrap();
    let graph = RelationGraph::build(&memory, m).unwrap();
    KnowledgeBase::build(&memory, graph, f).unwrap()
}

/// Exhaustive scan of every (channel, entry) key with the scoring rule
/// written out longhand, then a full sort with the documented tie order.
pub fn brute_force_top<'kb>(kb: &'kb KnowledgeBase, q: &QuerySpectrum, r: usize, eps: f64) -> Vec<RetrievedReference<'kb>> {
    let cfg = kb.config();
    let mut all = Vec::with_capacity(cfg.channels * cfg.entries);
    for c in 0..cfg.channels {
        for e in 0..cfg.entries {
            let key = kb.key(c, e);
            let mut re = 0.0;
            for (a, b) in q.spectrum.iter().zip(key.spectrum) {
                re += a.re * b.re + a.im * b.im;
            }
            all.push(RetrievedReference {
                value: kb.value(c, e),
                score: re / (q.norm * key.norm + eps),
                source_channel: c,
                source_entry: e,
            });
        }
    }
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.source_channel.cmp(&b.source_channel))
            .then(a.source_entry.cmp(&b.source_entry))
    });
    all.truncate(r);
    all
}

/// Batch-mean fused MSE through the public forward path.
pub fn batch_loss(model: &CraftModel, batch: &Batch<'_, '_>) -> f64 {
    let outs = model.forecast_batch(&batch.inputs, &batch.refs).unwrap();
    let total: f64 = outs
        .iter()
        .zip(&batch.targets)
        .map(|(o, t)| mse_loss(o, *t).unwrap())
        .sum();
    total / outs.len() as f64
}

fn param_mut(model: &mut CraftModel, idx: usize) -> &mut [f64] {
    match idx {
        0 => model.w1.as_slice_mut().unwrap(),
        1 => model.b1.as_slice_mut().unwrap(),
        2 => model.w2.as_slice_mut().unwrap(),
        3 => model.b2.as_slice_mut().unwrap(),
        4 => model.head_w.as_slice_mut().unwrap(),
        _ => model.head_b.as_slice_mut().unwrap(),
    }
}

/// `|g - fd| / max(|g|, |fd|, 1e-6)`
pub fn rel_err(g: f64, fd: f64) -> f64 {
    (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6)
}

/// Max relative error per tensor between backprop and central differences.
pub fn gradient_check(model: &CraftModel, batch: &Batch<'_, '_>, step: f64) -> [f64; 6] {
    let (_, grads) = backward(model, batch).unwrap();
    let analytic = grads.tensors();
    let mut worst = [0.0f64; 6];
    let mut probe = model.clone();
    for t in 0..6 {
        for (i, &g) in analytic[t].iter().enumerate() {
            let orig = param_mut(&mut probe, t)[i];
            param_mut(&mut probe, t)[i] = orig + step;
            let up = batch_loss(&probe, batch);
            param_mut(&mut probe, t)[i] = orig - step;
            let down = batch_loss(&probe, batch);
            param_mut(&mut probe, t)[i] = orig;
            let fd = (up - down) / (2.0 * step);
            worst[t] = worst[t].max(rel_err(g, fd));
        }
    }
    worst
}

pub struct TinySetup {
    pub series: MultivariateSeries,
    pub kb: KnowledgeBase,
}

/// `L=8, H=3, C=2` data with a knowledge base over all of it.
pub fn tiny_setup(seed: u64) -> TinySetup {
    let series = random_series(60, 2, seed);
    let kb = kb_for(&series, 8, 3, 1, 3);
    TinySetup { series, kb }
}

/// Batch of `n` windows with `r` references each, plus a random model.
pub fn tiny_batch<'a>(setup: &'a TinySetup, n: usize, r: usize) -> Batch<'a, 'a> {
    let windows = sliding_windows(&setup.series, 8, 3, 7).unwrap();
    let retriever = Retriever::new(&setup.kb);
    let picked = &windows[..n];
    let mut refs = Vec::new();
    for w in picked {
        let mut counter = OpCounter::new(2);
        refs.push(retriever.retrieve_all(w.x, r, Some(w.span()), &mut counter).unwrap());
    }
    Batch {
        inputs: picked.iter().map(|w| w.x).collect(),
        targets: picked.iter().map(|w| w.y).collect(),
        refs,
    }
}

pub fn tiny_model(seed: u64, alpha: f64) -> CraftModel {
    let cfg = ModelConfig {
        lookback: 8,
        horizon: 3,
        hidden: 4,
    };
    CraftModel::init(cfg, alpha, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn bits(a: ArrayView2<'_, f64>) -> Vec<u64> {
    a.iter().map(|v| v.to_bits()).collect()
}

pub fn all_zero(g: &Gradients, idx: &[usize]) -> bool {
    let t = g.tensors();
    idx.iter().all(|&i| t[i].iter().all(|v| *v == 0.0))
}
