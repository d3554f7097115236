//! Operation counts and timings of the top-k channel attention across
//! spatial sizes at fixed channel count and K.

use std::time::Instant;

use irdet_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamBuilder, ParamStore, Session};
use crate::serank::{effective_k, SeRankBlock};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub channels: usize,
    pub k: usize,
    /// Projections and attention matrix.
    pub attention_ops: u64,
    pub total_ops: u64,
    /// Fastest of the repeats.
    pub seconds: f64,
}

pub fn bench_serank(
    channels: usize,
    offset: i32,
    stage: usize,
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let block = SeRankBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), channels, offset, stage, true)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let x = Tensor::from_fn(&[1, channels, size, size], |_| rng.random_range(-1.0f32..1.0));
        let mut best = f64::INFINITY;
        let mut profile = Default::default();
        for _ in 0..repeats.max(1) {
            let tape = Tape::new();
            let s = Session::inference(&tape, &store);
            let start = Instant::now();
            let (_, p) = block.forward_profiled(&s, tape.constant(x.clone()))?;
            best = best.min(start.elapsed().as_secs_f64());
            profile = p;
        }
        rows.push(BenchRow {
            size,
            channels,
            k: effective_k(block.k, size, size),
            attention_ops: profile.attention_ops,
            total_ops: profile.total_ops,
            seconds: best,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("size,channels,k,attention_ops,total_ops,seconds\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            r.size, r.channels, r.k, r.attention_ops, r.total_ops, r.seconds
        ));
    }
    s
}
