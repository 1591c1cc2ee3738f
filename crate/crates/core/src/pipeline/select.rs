use serde::{Deserialize, Serialize};

use super::{Category, CategoryChoice, GenerationQuery, PipelineRegistry};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelectError {
    #[error("query count must be at least 1")]
    ZeroCount,
    #[error("query text is empty")]
    EmptyQuery,
    #[error("no pipeline is registered for category {0}")]
    NoPipelines(Category),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resolution {
    Explicit,
    Keyword,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub pipeline_id: String,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub category: Category,
    pub resolution: Resolution,
    /// One entry per spec of the category, in id order (zero counts included).
    pub allocations: Vec<Allocation>,
}

/// Picks the category's specs and splits `query.count` across them by
/// weight with the largest-remainder method; equal remainders go to the
/// smaller spec id.
pub fn select_pipelines(
    query: &GenerationQuery,
    registry: &PipelineRegistry,
) -> Result<Selection, SelectError> {
    if query.count == 0 {
        return Err(SelectError::ZeroCount);
    }
    if query.text.trim().is_empty() {
        return Err(SelectError::EmptyQuery);
    }
    let (category, resolution) = match query.category {
        CategoryChoice::Fixed(c) => (c, Resolution::Explicit),
        CategoryChoice::Auto => match registry.match_keywords(&query.text) {
            Some(c) => (c, Resolution::Keyword),
            None => (registry.fallback_category(), Resolution::Fallback),
        },
    };
    let specs = registry.by_category(category);
    if specs.is_empty() {
        return Err(SelectError::NoPipelines(category));
    }
    let weights: Vec<f64> = specs.iter().map(|s| s.weight).collect();
    let counts = largest_remainder(query.count, &weights);
    Ok(Selection {
        category,
        resolution,
        allocations: specs
            .iter()
            .zip(counts)
            .map(|(s, count)| Allocation {
                pipeline_id: s.id.clone(),
                count,
            })
            .collect(),
    })
}

/// Splits `total` proportionally to `weights` (all positive). Ties in the
/// fractional part are resolved by position.
pub fn largest_remainder(total: u32, weights: &[f64]) -> Vec<u32> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| f64::from(total) * w / sum).collect();
    let mut counts: Vec<u32> = quotas.iter().map(|q| q.floor() as u32).collect();
    let assigned: u32 = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let frac = |i: usize| quotas[i] - quotas[i].floor();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (frac(a), frac(b));
        if (fa - fb).abs() <= 1e-9 {
            a.cmp(&b)
        } else {
            fb.total_cmp(&fa)
        }
    });
    for &i in order
        .iter()
        .cycle()
        .take(total.saturating_sub(assigned) as usize)
    {
        counts[i] += 1;
    }
    counts
}
