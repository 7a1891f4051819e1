//! Token-cost accounting in exact decimal arithmetic.

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("price {field} must be non-negative, got {value}")]
pub struct PricingError {
    pub field: &'static str,
    pub value: Decimal,
}

/// USD prices per 1,000 tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricingTable {
    pub embed_usd_per_1k: Decimal,
    pub input_usd_per_1k: Decimal,
    pub output_usd_per_1k: Decimal,
}

impl Default for PricingTable {
    /// Embedding at $0.0001, input at $0.01 and output at $0.03 per 1k tokens.
    fn default() -> Self {
        Self {
            embed_usd_per_1k: Decimal::new(1, 4),
            input_usd_per_1k: Decimal::new(1, 2),
            output_usd_per_1k: Decimal::new(3, 2),
        }
    }
}

impl PricingTable {
    pub fn validate(&self) -> Result<(), PricingError> {
        for (field, value) in [
            ("embed_usd_per_1k", self.embed_usd_per_1k),
            ("input_usd_per_1k", self.input_usd_per_1k),
            ("output_usd_per_1k", self.output_usd_per_1k),
        ] {
            if value.is_sign_negative() && !value.is_zero() {
                return Err(PricingError { field, value });
            }
        }
        Ok(())
    }
}

fn tokens_cost(tokens: u64, usd_per_1k: Decimal) -> Decimal {
    (Decimal::from(tokens) * usd_per_1k / Decimal::ONE_THOUSAND).normalize()
}

/// Whether token counts came from the provider or from the words heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSource {
    Reported,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(with = "rust_decimal::serde::float")]
    pub input_usd: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub output_usd: Decimal,
    #[serde(with = "rust_decimal::serde::float")]
    pub total_usd: Decimal,
    pub token_source: TokenSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonthlyCost {
    pub input_usd: Decimal,
    pub output_usd: Decimal,
    pub total_usd: Decimal,
}

/// `total_tokens / 1000 * embed_usd_per_1k`.
pub fn embedding_corpus_cost(total_tokens: u64, pricing: &PricingTable) -> Decimal {
    tokens_cost(total_tokens, pricing.embed_usd_per_1k)
}

pub fn monthly_query_cost(
    n_in: u64,
    avg_in_tokens: u64,
    n_out: u64,
    avg_out_tokens: u64,
    pricing: &PricingTable,
) -> MonthlyCost {
    let input_usd = tokens_cost(n_in * avg_in_tokens, pricing.input_usd_per_1k);
    let output_usd = tokens_cost(n_out * avg_out_tokens, pricing.output_usd_per_1k);
    MonthlyCost {
        input_usd,
        output_usd,
        total_usd: input_usd + output_usd,
    }
}

pub fn per_query_cost(in_tokens: u64, out_tokens: u64, pricing: &PricingTable) -> CostEstimate {
    cost_with_source(in_tokens, out_tokens, pricing, TokenSource::Estimated)
}

pub(crate) fn cost_with_source(
    in_tokens: u64,
    out_tokens: u64,
    pricing: &PricingTable,
    token_source: TokenSource,
) -> CostEstimate {
    let input_usd = tokens_cost(in_tokens, pricing.input_usd_per_1k);
    let output_usd = tokens_cost(out_tokens, pricing.output_usd_per_1k);
    CostEstimate {
        input_tokens: in_tokens,
        output_tokens: out_tokens,
        input_usd,
        output_usd,
        total_usd: input_usd + output_usd,
        token_source,
    }
}
