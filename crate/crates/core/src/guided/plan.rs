use alloc::format;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::numerics::Real;

/// How the `tokens` of a grid are split into `rates.len()` equal sub-regions
/// of ascending significance, and how many tokens each sub-region merges
/// into one. `rates[0]` belongs to the least significant region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReallocationPlan {
    tokens: usize,
    rates: Vec<usize>,
}

impl ReallocationPlan {
    pub fn new(tokens: usize, rates: &[usize]) -> Result<Self> {
        let n = rates.len();
        if n == 0 || tokens == 0 || tokens % n != 0 {
            return Err(config_err(format!("{tokens} tokens do not split into {n} sub-regions")));
        }
        let group = tokens / n;
        for &r in rates {
            if r == 0 || group % r != 0 {
                return Err(config_err(format!("rate {r} does not divide sub-region size {group}")));
            }
        }
        if rates.windows(2).any(|p| p[1] > p[0]) {
            return Err(config_err(format!("rates {rates:?} must not increase toward salient regions")));
        }
        Ok(Self {
            tokens,
            rates: rates.to_vec(),
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn regions(&self) -> usize {
        self.rates.len()
    }

    pub fn rates(&self) -> &[usize] {
        &self.rates
    }

    pub fn group_size(&self) -> usize {
        self.tokens / self.rates.len()
    }

    /// Aggregated tokens per sub-region, minor region first.
    pub fn output_counts(&self) -> Vec<usize> {
        self.rates.iter().map(|r| self.group_size() / r).collect()
    }

    /// Total key/value length after aggregation.
    pub fn output_len(&self) -> usize {
        self.output_counts().iter().sum()
    }
}

/// Flat positions sorted by ascending `(significance, position)`, split
/// into `n` equal groups; the last group is the most salient.
pub fn rank_and_group<T: Real>(s_map: &[T], n: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || s_map.len() % n != 0 {
        return Err(config_err(format!("{} positions do not split into {n} groups", s_map.len())));
    }
    let order = ascending_order(s_map);
    Ok(order.chunks(s_map.len() / n).map(<[usize]>::to_vec).collect())
}

pub(crate) fn ascending_order<T: Real>(s_map: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s_map.len()).collect();
    order.sort_by(|&a, &b| {
        s_map[a]
            .to_f64()
            .total_cmp(&s_map[b].to_f64())
            .then(a.cmp(&b))
    });
    order
}
