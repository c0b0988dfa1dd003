//! Trailing path segments `φ: [-r, 0] → ℝⁿ` on a uniform grid.
//!
//! A [`SegmentPath`] stores `m + 1` nodes `φ(-r + k·h)`, `k = 0..=m`, in a ring
//! buffer so that sliding the window by one grid step is O(1). The sup-norm and
//! `∫|φ(s)| ds` are maintained incrementally because rate kernels read them on
//! every simulation step.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error("delay must be positive and finite, got {0}")]
    BadDelay(f64),
    #[error("grid step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("grid step {step} does not divide delay {delay}")]
    StepMismatch { delay: f64, step: f64 },
    #[error("segment needs at least two nodes, got {0}")]
    TooFewNodes(usize),
    #[error("expected vectors of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("evaluation point s = {s} lies outside [-{delay}, 0]")]
    OutOfWindow { s: f64, delay: f64 },
    #[error("segment values must be finite")]
    NonFinite,
}

/// Uniformly sampled memory segment.
#[derive(Debug, Clone)]
pub struct SegmentPath {
    dim: usize,
    delay: f64,
    step: f64,
    intervals: usize,
    /// Ring of `(m + 1) * dim` coordinates; node `k` lives at ring slot `(head + k) % (m + 1)`.
    data: Vec<f64>,
    norms: Vec<f64>,
    head: usize,
    /// Sequence number of the newest node.
    newest: u64,
    /// Monotone deque of `(sequence, norm)` with decreasing norms; front is the window maximum.
    max_queue: VecDeque<(u64, f64)>,
    norm_sum: f64,
    advances_since_resum: usize,
}

impl SegmentPath {
    /// Builds a segment from node values `values[k] = φ(-r + k·step)`.
    pub fn new(delay: f64, step: f64, values: Vec<Vec<f64>>) -> Result<Self, SegmentError> {
        if !(delay.is_finite() && delay > 0.0) {
            return Err(SegmentError::BadDelay(delay));
        }
        if !(step.is_finite() && step > 0.0) {
            return Err(SegmentError::BadStep(step));
        }
        if values.len() < 2 {
            return Err(SegmentError::TooFewNodes(values.len()));
        }
        let intervals = values.len() - 1;
        if (intervals as f64 * step - delay).abs() > 4.0 * f64::EPSILON * delay {
            return Err(SegmentError::StepMismatch { delay, step });
        }
        let dim = values[0].len();
        if dim == 0 {
            return Err(SegmentError::DimensionMismatch { expected: 1, got: 0 });
        }
        let mut data = Vec::with_capacity(values.len() * dim);
        for v in &values {
            if v.len() != dim {
                return Err(SegmentError::DimensionMismatch { expected: dim, got: v.len() });
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(SegmentError::NonFinite);
            }
            data.extend_from_slice(v);
        }
        let mut seg = SegmentPath {
            dim,
            delay,
            step,
            intervals,
            data,
            norms: Vec::new(),
            head: 0,
            newest: intervals as u64,
            max_queue: VecDeque::new(),
            norm_sum: 0.0,
            advances_since_resum: 0,
        };
        seg.rebuild_caches();
        Ok(seg)
    }

    /// Segment with `intervals` grid steps whose nodes are `f(t_k)`.
    pub fn from_fn(delay: f64, intervals: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self, SegmentError> {
        if intervals == 0 {
            return Err(SegmentError::TooFewNodes(1));
        }
        let step = delay / intervals as f64;
        let values = (0..=intervals).map(|k| f(node_time(delay, step, intervals, k))).collect();
        Self::new(delay, step, values)
    }

    /// Constant segment `φ ≡ value`.
    pub fn constant(delay: f64, intervals: usize, value: &[f64]) -> Result<Self, SegmentError> {
        Self::from_fn(delay, intervals, |_| value.to_vec())
    }

    /// Number of grid intervals implied by `delay / step`, if it is an integer.
    pub fn intervals_for(delay: f64, step: f64) -> Result<usize, SegmentError> {
        if !(step.is_finite() && step > 0.0) {
            return Err(SegmentError::BadStep(step));
        }
        let m = (delay / step).round();
        if m < 1.0 || ((m * step) - delay).abs() > 1e-9 * delay.max(step) {
            return Err(SegmentError::StepMismatch { delay, step });
        }
        Ok(m as usize)
    }

    fn rebuild_caches(&mut self) {
        let n = self.intervals + 1;
        self.norms = vec![0.0; n];
        for slot in 0..n {
            let v = &self.data[slot * self.dim..(slot + 1) * self.dim];
            self.norms[slot] = euclid(v);
        }
        self.max_queue.clear();
        let oldest = self.newest - self.intervals as u64;
        for k in 0..n {
            let norm = self.norms[self.slot(k)];
            self.push_norm(oldest + k as u64, norm);
        }
        self.resum();
    }

    fn resum(&mut self) {
        self.norm_sum = self.norms.iter().sum();
        self.advances_since_resum = 0;
    }

    fn push_norm(&mut self, seq: u64, norm: f64) {
        while let Some(&(_, back)) = self.max_queue.back() {
            if back <= norm {
                self.max_queue.pop_back();
            } else {
                break;
            }
        }
        self.max_queue.push_back((seq, norm));
    }

    #[inline]
    fn slot(&self, k: usize) -> usize {
        let n = self.intervals + 1;
        let s = self.head + k;
        if s >= n {
            s - n
        } else {
            s
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Number of grid intervals `m`; there are `m + 1` nodes.
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node `k`, i.e. `φ(-r + k·h)`.
    #[inline]
    pub fn node(&self, k: usize) -> &[f64] {
        let s = self.slot(k);
        &self.data[s * self.dim..(s + 1) * self.dim]
    }

    /// Time coordinate of node `k`.
    #[inline]
    pub fn node_time(&self, k: usize) -> f64 {
        node_time(self.delay, self.step, self.intervals, k)
    }

    /// `φ(0)`.
    #[inline]
    pub fn current(&self) -> &[f64] {
        self.node(self.intervals)
    }

    /// `φ(-r)`.
    #[inline]
    pub fn oldest(&self) -> &[f64] {
        self.node(0)
    }

    /// Node values in time order.
    pub fn values(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..=self.intervals).map(move |k| self.node(k))
    }

    /// Piecewise-linear reconstruction `φ(s)`.
    pub fn eval_at(&self, s: f64) -> Result<Vec<f64>, SegmentError> {
        let half = 0.5 * self.step;
        if !s.is_finite() || s < -self.delay - half || s > half {
            return Err(SegmentError::OutOfWindow { s, delay: self.delay });
        }
        let mut pos = ((s + self.delay) / self.step).clamp(0.0, self.intervals as f64);
        // Node times carry rounding from `-r + k·h`; snap them back onto the node.
        let nearest = pos.round();
        if (pos - nearest).abs() <= 8.0 * f64::EPSILON * nearest.max(1.0) {
            pos = nearest;
        }
        let k = pos.floor() as usize;
        if k >= self.intervals {
            return Ok(self.current().to_vec());
        }
        let w = pos - k as f64;
        if w == 0.0 {
            return Ok(self.node(k).to_vec());
        }
        let (a, b) = (self.node(k), self.node(k + 1));
        Ok(a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect())
    }

    /// `‖φ‖ = max_k |φ(t_k)|`.
    #[inline]
    pub fn sup_norm(&self) -> f64 {
        self.max_queue.front().map_or(0.0, |&(_, n)| n)
    }

    /// Trapezoidal `∫_{-r}^0 |φ(s)| ds`.
    #[inline]
    pub fn int_abs(&self) -> f64 {
        let ends = 0.5 * (self.norms[self.slot(0)] + self.norms[self.slot(self.intervals)]);
        (self.step * (self.norm_sum - ends)).max(0.0)
    }

    /// Trapezoidal `∫_{-r}^0 g(t, i) f2(φ(t), i) dt`.
    pub fn weighted_integral(
        &self,
        f2: impl Fn(&[f64], usize) -> f64,
        g: impl Fn(f64, usize) -> f64,
        regime: usize,
    ) -> f64 {
        let m = self.intervals;
        let mut acc = 0.0;
        for k in 0..=m {
            let w = if k == 0 || k == m { 0.5 } else { 1.0 };
            acc += w * g(self.node_time(k), regime) * f2(self.node(k), regime);
        }
        acc * self.step
    }

    /// Slides the window one grid step: drops `φ(-r)`, appends `new_value` as `φ(0)`.
    pub fn advance(&mut self, new_value: &[f64]) -> Result<(), SegmentError> {
        if new_value.len() != self.dim {
            return Err(SegmentError::DimensionMismatch { expected: self.dim, got: new_value.len() });
        }
        if new_value.iter().any(|c| !c.is_finite()) {
            return Err(SegmentError::NonFinite);
        }
        let slot = self.head;
        let dropped = self.norms[slot];
        self.data[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(new_value);
        let norm = euclid(new_value);
        self.norms[slot] = norm;
        self.head = if slot == self.intervals { 0 } else { slot + 1 };
        self.newest += 1;
        let oldest = self.newest - self.intervals as u64;
        while let Some(&(seq, _)) = self.max_queue.front() {
            if seq < oldest {
                self.max_queue.pop_front();
            } else {
                break;
            }
        }
        self.push_norm(self.newest, norm);
        self.norm_sum += norm - dropped;
        self.advances_since_resum += 1;
        if self.advances_since_resum > self.intervals {
            self.resum();
        }
        Ok(())
    }

    /// Value-semantics variant of [`SegmentPath::advance`].
    pub fn advanced(&self, new_value: &[f64]) -> Result<SegmentPath, SegmentError> {
        let mut next = self.clone();
        next.advance(new_value)?;
        Ok(next)
    }

    /// Node values as CSV rows `t, x_1..x_n`.
    pub fn csv_rows(&self) -> Vec<Vec<f64>> {
        (0..=self.intervals)
            .map(|k| {
                let mut row = Vec::with_capacity(self.dim + 1);
                row.push(self.node_time(k));
                row.extend_from_slice(self.node(k));
                row
            })
            .collect()
    }
}

#[inline]
fn node_time(delay: f64, step: f64, intervals: usize, k: usize) -> f64 {
    if k == intervals {
        0.0
    } else {
        -delay + k as f64 * step
    }
}

#[inline]
pub(crate) fn euclid(v: &[f64]) -> f64 {
    if v.len() == 1 {
        v[0].abs()
    } else {
        v.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}
