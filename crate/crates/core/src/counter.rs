/// Deterministic operation counters threaded through every forward.
///
/// All counters only ever grow; `attention_pairs` counts query-key pairs
/// once regardless of head count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    macs: u64,
    attention_pairs: u64,
    query_tokens: u64,
    projection_calls: u64,
    cache_hits: u64,
    cache_misses: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiply-accumulate operations.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn attention_pairs(&self) -> u64 {
        self.attention_pairs
    }

    /// Query tokens that went through an attention operation.
    pub fn query_tokens(&self) -> u64 {
        self.query_tokens
    }

    /// Linear projections of one window (or token group) for one role.
    pub fn projection_calls(&self) -> u64 {
        self.projection_calls
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits
    }

    pub fn cache_misses(&self) -> u64 {
        self.cache_misses
    }

    pub fn record_projection(&mut self, rows: usize, in_dim: usize, out_dim: usize) {
        self.projection_calls += 1;
        self.macs += (rows * in_dim * out_dim) as u64;
    }

    pub fn record_linear(&mut self, rows: usize, in_dim: usize, out_dim: usize) {
        self.macs += (rows * in_dim * out_dim) as u64;
    }

    /// Scores and weighted sum over `channels` for `queries x keys` pairs.
    pub fn record_attention(&mut self, queries: usize, keys: usize, channels: usize) {
        self.query_tokens += queries as u64;
        self.attention_pairs += (queries * keys) as u64;
        self.macs += 2 * (queries * keys * channels) as u64;
    }

    pub fn record_cache_hit(&mut self) {
        self.cache_hits += 1;
    }

    pub fn record_cache_miss(&mut self) {
        self.cache_misses += 1;
    }

    pub fn absorb(&mut self, other: &OpCounter) {
        self.macs += other.macs;
        self.attention_pairs += other.attention_pairs;
        self.query_tokens += other.query_tokens;
        self.projection_calls += other.projection_calls;
        self.cache_hits += other.cache_hits;
        self.cache_misses += other.cache_misses;
    }
}
