use serde::{Deserialize, Serialize};

use super::task::{accuracy, LabeledSet};
use crate::error::Result;
use crate::numnet::{NetworkParams, NetworkSpec, StatsMode};
use crate::par::{self, Exec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainError {
    pub domain_id: usize,
    pub error: f64,
    pub samples: usize,
}

/// Frozen-source error per domain (running statistics), sorted from lowest
/// to highest error. The sort is stable, so equal errors keep input order.
pub fn rank_by_source_error(
    spec: &NetworkSpec,
    source: &NetworkParams,
    domains: &[(usize, LabeledSet)],
    exec: Exec,
) -> Result<Vec<DomainError>> {
    let errors = par::map_slice(exec, domains, |(id, data)| -> Result<DomainError> {
        let acc = accuracy(spec, source, data, StatsMode::Running)?;
        Ok(DomainError { domain_id: *id, error: 1.0 - acc, samples: data.len() })
    });
    let mut out = errors.into_iter().collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.error.total_cmp(&b.error));
    Ok(out)
}
