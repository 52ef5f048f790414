//! Thread-backed execution for shard gradients and data generation.
//!
//! Results are always combined in job order, so the thread count never
//! changes a number.

use std::thread;

use csinet_core::channel::{assemble_splits, generate_delay_batch, ChannelDims, Dataset, DftPlan, SplitSizes, SyntheticProfile};
use csinet_core::train::{ShardExecutor, ShardOutput};
use csinet_core::{CMatrix, Result};

/// Samples per generation job. Fixed so partial sums do not depend on threads.
pub const GEN_CHUNK: usize = 256;

/// Runs indexed jobs on up to `threads` scoped threads.
#[derive(Debug, Clone, Copy)]
pub struct ThreadPool {
    threads: usize,
}

impl ThreadPool {
    pub fn new(threads: usize) -> Self {
        Self { threads: threads.max(1) }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// `f(0..jobs)` with results in index order. Job `i` runs on worker `i % threads`.
    pub fn map<R: Send>(&self, jobs: usize, f: &(dyn Fn(usize) -> R + Sync)) -> Vec<R> {
        let workers = self.threads.min(jobs);
        if workers <= 1 {
            return (0..jobs).map(f).collect();
        }
        let mut slots: Vec<Option<R>> = (0..jobs).map(|_| None).collect();
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| s.spawn(move || (w..jobs).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>()))
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every job ran")).collect()
    }
}

impl ShardExecutor for ThreadPool {
    fn run(&self, jobs: usize, job: &(dyn Fn(usize) -> Result<ShardOutput<f32>> + Sync)) -> Vec<Result<ShardOutput<f32>>> {
        self.map(jobs, job)
    }
}

/// Generates and normalizes the three splits; the result does not depend on
/// the thread count.
pub fn generate_splits(profile: &SyntheticProfile, dims: ChannelDims, sizes: SplitSizes, pool: &ThreadPool) -> Result<[Dataset; 3]> {
    profile.validate(&dims)?;
    let plan = DftPlan::new(dims)?;
    let mut delay: [Vec<CMatrix>; 3] = Default::default();
    let mut retained = [0.0; 3];
    for (k, (_, first, count)) in sizes.ranges().into_iter().enumerate() {
        let jobs = count.div_ceil(GEN_CHUNK);
        let parts = pool.map(jobs, &|j| {
            let start = j * GEN_CHUNK;
            let len = GEN_CHUNK.min(count - start);
            generate_delay_batch(profile, &plan, first + start as u64, len)
        });
        for part in parts {
            let (m, r) = part?;
            delay[k].extend(m);
            retained[k] += r;
        }
    }
    assemble_splits(profile, dims, sizes, delay, retained)
}
