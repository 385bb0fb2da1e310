//! Thread-parallel dissection and evaluation over contiguous sample chunks.
//!
//! Chunks are merged in order, so a fixed thread count always gives the same
//! bits; one thread reproduces the sequential library functions exactly.

use std::thread;

use depth_dissect_core::bins::BinningScheme;
use depth_dissect_core::dissect::ResponseTable;
use depth_dissect_core::eval::{
    accumulate_metrics, dissect_network, DepthMetrics, MetricsAccumulator,
};
use depth_dissect_core::net::Network;
use depth_dissect_core::scene::Sample;

use crate::error::Result;

fn chunks(samples: &[Sample], threads: usize) -> Vec<&[Sample]> {
    let size = samples.len().div_ceil(threads.max(1)).max(1);
    samples.chunks(size).collect()
}

fn run<T: Send>(
    samples: &[Sample],
    threads: usize,
    job: impl Fn(&[Sample]) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if threads <= 1 || samples.is_empty() {
        return Ok(vec![job(samples)?]);
    }
    let parts = chunks(samples, threads);
    thread::scope(|s| {
        let handles: Vec<_> = parts.iter().map(|part| s.spawn(|| job(part))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

pub fn dissect(
    net: &Network<f32>,
    samples: &[Sample],
    layer: &str,
    scheme: &BinningScheme,
    threads: usize,
) -> Result<ResponseTable> {
    let mut parts = run(samples, threads, |part| {
        Ok(dissect_network(net, part, layer, scheme)?)
    })?
    .into_iter();
    let mut table = parts.next().expect("at least one chunk");
    for t in parts {
        table.merge(&t)?;
    }
    Ok(table)
}

pub fn evaluate(net: &Network<f32>, samples: &[Sample], threads: usize) -> Result<DepthMetrics> {
    let parts = run(samples, threads, |part| Ok(accumulate_metrics(net, part)?))?;
    let mut acc = MetricsAccumulator::default();
    for p in &parts {
        acc.merge(p);
    }
    Ok(acc.finish()?)
}
