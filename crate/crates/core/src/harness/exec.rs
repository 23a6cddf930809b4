//! Trial-parallel execution. Trials are cut into fixed batches; each batch
//! folds into its own accumulator and accumulators are merged in batch
//! order, so results never depend on the thread count.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::register::{RegisterState, TrialRecord, TrialSimulator};

use super::io::LabelRecord;
use super::rng::stream_for;
use crate::emccd::Frame;
use crate::register::Protocol;

pub struct Executor {
    pool: rayon::ThreadPool,
    batch_size: u64,
}

impl Executor {
    /// `threads == 0` uses every available core.
    pub fn new(threads: usize, batch_size: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self { pool, batch_size })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Folds trials `0..n` batch by batch. Batches are processed a few
    /// per thread at a time to bound the number of live accumulators.
    pub fn fold<A, I, B, M>(&self, n: u64, init: I, body: B, mut merge: M) -> A
    where
        A: Send,
        I: Fn() -> A + Sync,
        B: Fn(&mut A, Range<u64>) + Sync,
        M: FnMut(&mut A, A),
    {
        let n_batches = n.div_ceil(self.batch_size);
        let wave = (self.threads() as u64 * 4).max(1);
        let mut total = init();
        let mut start = 0;
        while start < n_batches {
            let end = (start + wave).min(n_batches);
            let parts: Vec<A> = self.pool.install(|| {
                (start..end)
                    .into_par_iter()
                    .map(|b| {
                        let mut acc = init();
                        let lo = b * self.batch_size;
                        body(&mut acc, lo..(lo + self.batch_size).min(n));
                        acc
                    })
                    .collect()
            });
            for p in parts {
                merge(&mut total, p);
            }
            start = end;
        }
        total
    }
}

/// Anything that can hand out trials by index.
pub trait TrialSource: Sync {
    fn len(&self) -> u64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn n_ions(&self) -> usize;

    fn protocol(&self) -> Protocol;

    /// Overwrites `rec` with trial `index`.
    fn fill(&self, index: u64, rec: &mut TrialRecord);

    fn record(&self) -> TrialRecord {
        TrialRecord::empty(self.protocol(), self.n_ions())
    }
}

/// Trials generated on demand; trial i always comes from the stream for
/// (seed, i, tag).
pub struct SimulatedSource<'a> {
    pub sim: &'a TrialSimulator,
    pub seed: u64,
    pub tag: &'static str,
    pub trials: u64,
}

impl TrialSource for SimulatedSource<'_> {
    fn len(&self) -> u64 {
        self.trials
    }

    fn n_ions(&self) -> usize {
        self.sim.n_ions()
    }

    fn protocol(&self) -> Protocol {
        self.sim.protocol
    }

    fn fill(&self, index: u64, rec: &mut TrialRecord) {
        let mut rng = stream_for(self.seed, index, self.tag);
        self.sim.run_into(index, &mut rng, rec);
    }
}

/// Trials read back from an IRF1 file and its label sidecar.
pub struct LoadedSource {
    protocol: Protocol,
    n_ions: usize,
    frames: Vec<Frame>,
    labels: Vec<LabelRecord>,
}

impl LoadedSource {
    pub fn new(protocol: Protocol, frames: Vec<Frame>, labels: Vec<LabelRecord>) -> Result<Self> {
        let per = protocol.n_frames();
        if labels.is_empty() {
            return Err(Error::Empty("label file"));
        }
        if frames.len() != labels.len() * per {
            return Err(Error::format(
                "IRF1",
                format!(
                    "{} frames for {} trials of {} frames each",
                    frames.len(),
                    labels.len(),
                    per
                ),
            ));
        }
        let n_ions = labels[0].state.n_ions();
        if labels.iter().any(|l| l.state.n_ions() != n_ions) {
            return Err(Error::format("labels", "trials disagree on ion count"));
        }
        Ok(Self {
            protocol,
            n_ions,
            frames,
            labels,
        })
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.frames[0].width, self.frames[0].height)
    }

    pub fn label(&self, index: u64) -> RegisterState {
        self.labels[index as usize].state
    }
}

impl TrialSource for LoadedSource {
    fn len(&self) -> u64 {
        self.labels.len() as u64
    }

    fn n_ions(&self) -> usize {
        self.n_ions
    }

    fn protocol(&self) -> Protocol {
        self.protocol
    }

    fn fill(&self, index: u64, rec: &mut TrialRecord) {
        let per = self.protocol.n_frames();
        let l = &self.labels[index as usize];
        rec.protocol = self.protocol;
        rec.prepared_state = l.state;
        rec.initial_state = l.state;
        rec.decay_events.clone_from(&l.decays);
        let i = index as usize * per;
        rec.frames.clear();
        rec.frames.extend_from_slice(&self.frames[i..i + per]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_is_ordered_and_thread_independent() {
        let collect = |threads| {
            Executor::new(threads, 7)
                .unwrap()
                .fold(100, Vec::new, |v, r| v.extend(r), |a, b| a.extend(b))
        };
        let one = collect(1);
        assert_eq!(one, (0..100).collect::<Vec<u64>>());
        assert_eq!(collect(3), one);
    }

    #[test]
    fn empty_range() {
        let e = Executor::new(1, 4).unwrap();
        assert_eq!(e.fold(0, || 0u64, |a, r| *a += r.count() as u64, |a, b| *a += b), 0);
    }
}
