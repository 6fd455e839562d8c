use super::Axis;

/// Post-softmax weights of one attention head in one layer.
///
/// `shape` is `[batch, n_q, n_k]`: `[S, T, T]` for target attention (one
/// block per source row) and `[T, S, S]` for source attention (one block per
/// target column).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub axis: Axis,
    pub head: usize,
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl AttentionRecord {
    /// The distribution of query `q` in batch slice `b`.
    pub fn row(&self, b: usize, q: usize) -> &[f64] {
        let [_, nq, nk] = self.shape;
        let start = (b * nq + q) * nk;
        &self.data[start..start + nk]
    }
}

/// Collects attention weights during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct AttentionDump {
    pub records: Vec<AttentionRecord>,
}

impl AttentionDump {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: AttentionRecord) {
        self.records.push(record);
    }

    pub fn get(&self, layer: usize, axis: Axis, head: usize) -> Option<&AttentionRecord> {
        self.records
            .iter()
            .find(|r| r.layer == layer && r.axis == axis && r.head == head)
    }
}
