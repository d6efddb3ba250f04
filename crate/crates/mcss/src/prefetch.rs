use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::error::Result;
use crate::sample::{assemble_training_sample, Dataset, SamplerConfig, TrainingSample};

/// Assembles samples `first..first + count` on worker threads and yields
/// them in id order. Worker `k` builds ids congruent to `k` modulo the
/// worker count and feeds its own bounded queue, so the consumer simply
/// reads the queues round-robin.
pub struct SampleStream {
    queues: Vec<Receiver<Result<TrainingSample>>>,
    workers: Vec<JoinHandle<()>>,
    next: u64,
    first: u64,
    end: u64,
}

impl SampleStream {
    pub fn spawn(
        data: Arc<Dataset>,
        config: SamplerConfig,
        seed: u64,
        first: u64,
        count: u64,
        workers: usize,
        depth: usize,
    ) -> Self {
        let workers = workers.max(1);
        let mut queues = Vec::with_capacity(workers);
        let mut handles = Vec::with_capacity(workers);
        for k in 0..workers as u64 {
            let (tx, rx) = sync_channel(depth.max(1));
            let data = data.clone();
            let config = config.clone();
            handles.push(std::thread::spawn(move || {
                let mut id = first + k;
                while id < first + count {
                    let s = assemble_training_sample(&data, &config, seed, id);
                    if tx.send(s).is_err() {
                        break;
                    }
                    id += workers as u64;
                }
            }));
            queues.push(rx);
        }
        Self {
            queues,
            workers: handles,
            next: first,
            first,
            end: first + count,
        }
    }
}

impl Iterator for SampleStream {
    type Item = Result<TrainingSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.end {
            return None;
        }
        let q = ((self.next - self.first) % self.queues.len() as u64) as usize;
        self.next += 1;
        self.queues[q].recv().ok()
    }
}

impl Drop for SampleStream {
    fn drop(&mut self) {
        // closing the queues unblocks any worker waiting on a full channel
        self.queues.clear();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
