//! Generation configuration and instrumentation.

/// Which generation engine to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMode {
    /// Full forward pass over the whole sequence for every symbol.
    Naive,
    /// One full pass per token, decoder-only steps inside a token.
    TokenAware,
}

impl GenerationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GenerationMode::Naive => "naive",
            GenerationMode::TokenAware => "token-aware",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    /// Softmax sampling at the given temperature (> 0).
    Temperature(f64),
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub mode: GenerationMode,
    pub sampling: Sampling,
    /// Stop once this many raw characters have been generated (EOT symbols
    /// do not count).
    pub max_chars: usize,
    /// Stop once this many tokens have been completed.
    pub max_tokens: usize,
    /// Force a token boundary after this many characters without an EOT.
    pub max_token_length: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            mode: GenerationMode::TokenAware,
            sampling: Sampling::Greedy,
            max_chars: 256,
            max_tokens: usize::MAX / 2,
            max_token_length: 32,
            seed: 0,
        }
    }
}

/// Layer executions per stage, in (layer x pass/step) units: a full pass
/// adds the stage's layer count once, a decoder-only step adds the decoder
/// layer count once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCounts {
    pub tokenizer: u64,
    pub token_model: u64,
    pub decoder: u64,
}

impl LayerCounts {
    pub fn total(&self) -> u64 {
        self.tokenizer + self.token_model + self.decoder
    }
}

/// One generated token: its index, character length, and text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTrace {
    pub index: usize,
    pub length: usize,
    pub text: String,
}

/// Instrumentation for one generation run.
///
/// `trace` lists completed tokens plus, when generation stops mid-token, one
/// final partial entry; character counts always reconcile with the trace.
#[derive(Debug, Clone, Default)]
pub struct DecodeStats {
    pub chars_generated: usize,
    pub tokens_generated: usize,
    pub layer_invocations: LayerCounts,
    pub wall_seconds: f64,
    pub trace: Vec<TokenTrace>,
    /// Tokens closed by the runaway-length cap rather than a sampled EOT.
    pub forced_boundaries: usize,
}

impl DecodeStats {
    pub fn layer_units(&self) -> u64 {
        self.layer_invocations.total()
    }

    /// Mean characters per completed token.
    pub fn shortening_factor(&self) -> f64 {
        if self.tokens_generated == 0 {
            0.0
        } else {
            let completed: usize = self
                .trace
                .iter()
                .take(self.tokens_generated)
                .map(|t| t.length)
                .sum();
            completed as f64 / self.tokens_generated as f64
        }
    }
}
