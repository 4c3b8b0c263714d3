//! Storage cost arithmetic for the shared-storage architecture: the
//! savings factor from replacing N full cloud-disk replicas with one
//! object-store copy plus a hot-data cache, and the monthly-cost
//! comparison between the shared-nothing and shared-storage layouts.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("spatial utilization must be in (0, 1], got {0}")]
    BadUtilization(f64),
    #[error("hot data ratio must be in [0, 1], got {0}")]
    BadHotRatio(f64),
    #[error("replica count must be at least 1")]
    BadReplicas,
}

/// Inputs to the savings formula: how full the disks run, how much data
/// is hot enough to cache, and how many full replicas the shared-nothing
/// layout keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostInputs {
    pub spatial_utilization: f64,
    pub hot_data_ratio: f64,
    pub replica_count: u32,
}

impl CostInputs {
    pub fn validate(&self) -> Result<(), CostError> {
        if !(self.spatial_utilization > 0.0 && self.spatial_utilization <= 1.0) {
            return Err(CostError::BadUtilization(self.spatial_utilization));
        }
        if !(0.0..=1.0).contains(&self.hot_data_ratio) {
            return Err(CostError::BadHotRatio(self.hot_data_ratio));
        }
        if self.replica_count < 1 {
            return Err(CostError::BadReplicas);
        }
        Ok(())
    }
}

/// Savings factor of the shared-storage layout over N cloud-disk
/// replicas, with object storage priced at 15% of a cloud disk per unit:
///
/// ```text
/// save = (1 * N) / ((0.15 + P * 1 * N) * S)
/// ```
///
/// where S is spatial utilization, P the hot data ratio, and N the
/// replica count.
pub fn cost_savings(inputs: CostInputs) -> Result<f64, CostError> {
    inputs.validate()?;
    let n = inputs.replica_count as f64;
    let p = inputs.hot_data_ratio;
    let s = inputs.spatial_utilization;
    Ok(n / ((0.15 + p * n) * s))
}

/// Monthly prices and capacity for the cost comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct PricingTable {
    pub cloud_disk_per_gb_month: f64,
    pub object_store_per_gb_month: f64,
    pub capacity_gb: f64,
    pub shared_nothing_replicas: u32,
    pub shared_storage_replicas: u32,
}

impl Default for PricingTable {
    /// EBS (GP2) at $0.10/GB-month, S3 Standard at $0.023/GB-month,
    /// 100 TB of data, three replicas shared-nothing versus one.
    fn default() -> Self {
        PricingTable {
            cloud_disk_per_gb_month: 0.10,
            object_store_per_gb_month: 0.023,
            capacity_gb: 100_000.0,
            shared_nothing_replicas: 3,
            shared_storage_replicas: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    Oltp,
    Olap,
}

impl Scenario {
    /// Fraction of capacity kept on cloud disk as cache: all of it for
    /// OLTP, a tenth for OLAP. Chosen per business needs; overridable.
    pub fn default_cache_ratio(self) -> f64 {
        match self {
            Scenario::Oltp => 1.0,
            Scenario::Olap => 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostComparison {
    pub shared_nothing_monthly: f64,
    pub shared_storage_disk_monthly: f64,
    pub shared_storage_object_monthly: f64,
    pub shared_storage_monthly: f64,
    /// 1 - shared / shared-nothing, as a fraction.
    pub savings_fraction: f64,
}

impl CostComparison {
    pub fn savings_percent(&self) -> f64 {
        self.savings_fraction * 100.0
    }
}

/// Monthly totals per architecture: the shared-nothing side pays for N
/// full disk replicas; the shared-storage side pays for one disk-backed
/// cache slice plus the full object-store copy.
pub fn storage_cost_compare(pricing: &PricingTable, cache_ratio: f64) -> CostComparison {
    let shared_nothing_monthly = pricing.cloud_disk_per_gb_month
        * pricing.capacity_gb
        * pricing.shared_nothing_replicas as f64;
    let shared_storage_disk_monthly = pricing.cloud_disk_per_gb_month
        * pricing.capacity_gb
        * cache_ratio
        * pricing.shared_storage_replicas as f64;
    let shared_storage_object_monthly = pricing.object_store_per_gb_month * pricing.capacity_gb;
    let shared_storage_monthly = shared_storage_disk_monthly + shared_storage_object_monthly;
    let savings_fraction = if shared_nothing_monthly > 0.0 {
        1.0 - shared_storage_monthly / shared_nothing_monthly
    } else {
        0.0
    };
    CostComparison {
        shared_nothing_monthly,
        shared_storage_disk_monthly,
        shared_storage_object_monthly,
        shared_storage_monthly,
        savings_fraction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn savings(s: f64, p: f64, n: u32) -> f64 {
        cost_savings(CostInputs {
            spatial_utilization: s,
            hot_data_ratio: p,
            replica_count: n,
        })
        .unwrap()
    }

    #[test]
    fn worked_examples() {
        assert!((savings(0.8, 0.10, 3) - 8.33).abs() < 0.01);
        assert!((savings(0.8, 0.20, 3) - 5.00).abs() < 0.01);
        assert!((savings(0.8, 0.50, 3) - 2.27).abs() < 0.01);
    }

    #[test]
    fn domain_errors() {
        assert_eq!(
            cost_savings(CostInputs {
                spatial_utilization: 0.0,
                hot_data_ratio: 0.1,
                replica_count: 3
            }),
            Err(CostError::BadUtilization(0.0))
        );
        assert!(cost_savings(CostInputs {
            spatial_utilization: 0.8,
            hot_data_ratio: 1.5,
            replica_count: 3
        })
        .is_err());
    }

    #[test]
    fn table_reproduction() {
        let pricing = PricingTable::default();
        let oltp = storage_cost_compare(&pricing, Scenario::Oltp.default_cache_ratio());
        assert_eq!(oltp.shared_nothing_monthly, 30_000.0);
        assert_eq!(oltp.shared_storage_monthly, 12_300.0);
        assert!((oltp.savings_percent() - 59.0).abs() < 1e-9);

        let olap = storage_cost_compare(&pricing, Scenario::Olap.default_cache_ratio());
        assert_eq!(olap.shared_storage_monthly, 3_300.0);
        assert!((olap.savings_percent() - 89.0).abs() < 1e-9);
    }

    #[test]
    fn free_object_store_and_no_cache_saves_everything() {
        let pricing = PricingTable {
            object_store_per_gb_month: 0.0,
            ..PricingTable::default()
        };
        let cmp = storage_cost_compare(&pricing, 0.0);
        assert_eq!(cmp.savings_percent(), 100.0);
    }
}
