//! Link model for transfer time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub bandwidth_bytes_per_s: f64,
    pub latency_s: f64,
}

impl Default for LinkModel {
    /// 100 Gbit/s with 10 µs latency.
    fn default() -> Self {
        Self {
            bandwidth_bytes_per_s: 12.5e9,
            latency_s: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferMetrics {
    pub bytes: u64,
    pub time_s: f64,
}

/// `time = latency + bytes / bandwidth`.
pub fn transfer_metrics(bytes: u64, link: &LinkModel) -> Result<TransferMetrics> {
    if link.bandwidth_bytes_per_s.is_nan()
        || link.bandwidth_bytes_per_s <= 0.0
        || link.latency_s.is_nan()
        || link.latency_s < 0.0
    {
        return Err(Error::Argument(format!(
            "link needs positive bandwidth and non-negative latency, got {link:?}"
        )));
    }
    Ok(TransferMetrics {
        bytes,
        time_s: link.latency_s + bytes as f64 / link.bandwidth_bytes_per_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let link = LinkModel {
            bandwidth_bytes_per_s: 1e6,
            latency_s: 0.25,
        };
        assert_eq!(transfer_metrics(0, &link).unwrap().time_s, 0.25);
        let no_lat = LinkModel {
            latency_s: 0.0,
            ..link
        };
        assert_eq!(transfer_metrics(3_000_000, &no_lat).unwrap().time_s, 3.0);
        let bad = LinkModel {
            bandwidth_bytes_per_s: 0.0,
            ..link
        };
        assert!(transfer_metrics(1, &bad).is_err());
    }
}
