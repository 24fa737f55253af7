//! Fixed-capacity replay memory filled by reservoir sampling.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::seed::Rng;
use crate::tensor::Tensor;

/// One stored task sample with the logits the model produced for it when it
/// was inserted.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    /// Un-augmented input, flattened.
    pub input: Vec<f64>,
    /// Global class id; never an auxiliary class.
    pub label: u32,
    pub stored_logits: Vec<f64>,
    pub insertion_step: usize,
}

#[derive(Clone, Debug)]
pub struct Reservoir {
    capacity: usize,
    entries: Vec<BufferEntry>,
    seen: usize,
}

impl Reservoir {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity.min(4096)),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Offers one stream item. The first `capacity` items are kept; the
    /// `i`-th (1-based) afterwards replaces a uniform slot with probability
    /// `capacity / i`.
    pub fn insert(&mut self, entry: BufferEntry, rng: &mut Rng) {
        self.seen += 1;
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return;
        }
        let j = rng.gen_range(0..self.seen);
        if j < self.capacity {
            self.entries[j] = entry;
        }
    }

    /// `k` entries drawn uniformly with replacement; empty when the buffer is.
    pub fn sample(&self, k: usize, rng: &mut Rng) -> Vec<&BufferEntry> {
        if self.entries.is_empty() {
            return vec![];
        }
        (0..k)
            .map(|_| &self.entries[rng.gen_range(0..self.entries.len())])
            .collect()
    }

    /// Debug dump: one `label,insertion_step,logit;logit;...` line per entry.
    pub fn dump(&self) -> String {
        let mut out = String::from("label,insertion_step,logits\n");
        for e in &self.entries {
            let logits: Vec<String> = e.stored_logits.iter().map(|l| l.to_string()).collect();
            writeln!(out, "{},{},{}", e.label, e.insertion_step, logits.join(";")).unwrap();
        }
        out
    }
}

/// Stacks sampled entries into `(inputs, stored_logits)` tensors.
pub fn stack(entries: &[&BufferEntry], sample_shape: &[usize]) -> (Tensor, Tensor) {
    let mut shape = vec![entries.len()];
    shape.extend_from_slice(sample_shape);
    let inputs = Tensor::new(shape, entries.iter().flat_map(|e| e.input.iter().copied()).collect())
        .expect("stored inputs match the sample shape");
    let heads = entries.first().map_or(0, |e| e.stored_logits.len());
    let logits = Tensor::new(
        vec![entries.len(), heads],
        entries.iter().flat_map(|e| e.stored_logits.iter().copied()).collect(),
    )
    .expect("stored logits have one width");
    (inputs, logits)
}
