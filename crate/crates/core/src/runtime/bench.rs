use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::Result;
use crate::model::Model;
use crate::numerics::{rng, AdamW, Tape};
use crate::runtime::count_params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub batch_sizes: Vec<usize>,
    pub repetitions: usize,
    pub warmup_batches: usize,
    /// Worker threads for the separately reported parallel run; 1 disables it.
    pub threads: usize,
    /// Batch size of the timed training step.
    pub train_batch_size: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1, 8, 128],
            repetitions: 5,
            warmup_batches: 3,
            threads: 1,
            train_batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub batch_size: usize,
    pub instances: usize,
    /// Median over repetitions of the wall time per sentence.
    pub ms_per_instance: f64,
    /// Median wall time of one pass over all sentences.
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub param_count: usize,
    pub single_thread: Vec<BenchEntry>,
    pub parallel: Vec<BenchEntry>,
    pub threads: usize,
    /// Median wall time of one optimizer step, when the corpus has data.
    pub iteration_ms: Option<f64>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn run_pass(model: &Model, batches: &[&[Vec<usize>]], threads: usize) -> Result<()> {
    if threads <= 1 {
        for b in batches {
            model.extract_ids(b)?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let workers: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || -> Result<()> {
                    for b in batches.iter().skip(t).step_by(threads) {
                        model.extract_ids(b)?;
                    }
                    Ok(())
                })
            })
            .collect();
        workers.into_iter().try_for_each(|w| w.join().expect("benchmark worker panicked"))
    })
}

fn time_batch_size(model: &Model, ids: &[Vec<usize>], batch_size: usize, opts: &BenchOptions, threads: usize) -> Result<BenchEntry> {
    let batches: Vec<&[Vec<usize>]> = ids.chunks(batch_size.max(1)).collect();
    for b in batches.iter().take(opts.warmup_batches) {
        model.extract_ids(b)?;
    }
    let mut totals = Vec::with_capacity(opts.repetitions.max(1));
    for _ in 0..opts.repetitions.max(1) {
        let start = Instant::now();
        run_pass(model, &batches, threads)?;
        totals.push(start.elapsed().as_secs_f64());
    }
    let total = median(totals);
    Ok(BenchEntry {
        batch_size,
        instances: ids.len(),
        ms_per_instance: total * 1000.0 / ids.len() as f64,
        total_seconds: total,
    })
}

fn time_train_step(model: &Model, corpus: &[Example], opts: &BenchOptions) -> Result<Option<f64>> {
    let items = corpus
        .iter()
        .filter(|e| !e.is_empty())
        .take(opts.train_batch_size.max(1))
        .map(|e| model.prepare(e))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Ok(None);
    }
    let batch: Vec<_> = items.iter().collect();
    let mut scratch = model.clone();
    let optimizer = AdamW::default();
    let mut drop_rng = rng::seeded(0);
    let mut times = Vec::new();
    for _ in 0..opts.repetitions.max(1) + 1 {
        let start = Instant::now();
        let grads = {
            let mut tape = Tape::new(scratch.params());
            let (loss, _) = scratch.batch_loss(&mut tape, &batch, Some(&mut drop_rng))?;
            tape.backward(loss)?
        };
        let store = scratch.params_mut();
        store.zero_grad();
        grads.accumulate_into(store);
        optimizer.step(store, 1e-6)?;
        times.push(start.elapsed().as_secs_f64() * 1000.0);
    }
    times.remove(0);
    Ok(Some(median(times)))
}

/// Inference latency per batch size, in a fixed sentence order, after a
/// few untimed warmup batches. An empty corpus gives an empty report.
pub fn benchmark(model: &Model, corpus: &[Example], opts: &BenchOptions) -> Result<BenchReport> {
    let mut report = BenchReport {
        param_count: count_params(model.params()).total,
        single_thread: Vec::new(),
        parallel: Vec::new(),
        threads: opts.threads.max(1),
        iteration_ms: None,
    };
    let ids: Vec<Vec<usize>> = corpus.iter().filter(|e| !e.is_empty()).map(|e| model.encode_tokens(&e.tokens)).collect();
    if ids.is_empty() {
        return Ok(report);
    }
    for &b in &opts.batch_sizes {
        report.single_thread.push(time_batch_size(model, &ids, b, opts, 1)?);
    }
    if report.threads > 1 {
        for &b in &opts.batch_sizes {
            report.parallel.push(time_batch_size(model, &ids, b, opts, report.threads)?);
        }
    }
    report.iteration_ms = time_train_step(model, corpus, opts)?;
    Ok(report)
}
