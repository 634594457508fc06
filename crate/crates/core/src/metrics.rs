//! Tap-IoU metrics over (instance, click) prediction records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const TOTAL_ROW: &str = "Category Total";
pub const UNKNOWN_CATEGORY: &str = "unknown";

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let u = a.union_count(b)?;
    if u == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_count(b)? as f64 / u as f64)
}

/// One prediction for one click on one instance, reduced to pixel counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub click_index: usize,
    pub intersection: u64,
    pub union: u64,
    pub gt_area: u64,
    pub category: Option<String>,
    pub band: Option<usize>,
}

impl EvalRecord {
    pub fn new(
        instance_id: impl Into<String>,
        click_index: usize,
        pred: &BinaryMask,
        gt: &BinaryMask,
    ) -> Result<Self> {
        Ok(EvalRecord {
            instance_id: instance_id.into(),
            click_index,
            intersection: pred.intersection_count(gt)? as u64,
            union: pred.union_count(gt)? as u64,
            gt_area: gt.area() as u64,
            category: None,
            band: None,
        })
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }

    pub fn with_band(mut self, band: usize) -> Self {
        self.band = Some(band);
        self
    }

    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub beta: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { beta: 0.7 }
    }
}

impl MetricsConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must lie in (0, 1), got {beta}"
            )));
        }
        Ok(MetricsConfig { beta })
    }
}

/// How the clicks of an instance relate to its ground-truth pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClickProtocol {
    /// Every ground-truth pixel is clicked once.
    Exhaustive,
    /// A fixed sample of clicks; each instance's pass count is scaled by
    /// its area over its click count.
    Sampled,
}

/// Summed intersections over summed unions.
pub fn miou_t(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Metric("no records".into()));
    }
    let inter: u64 = records.iter().map(|r| r.intersection).sum();
    let union: u64 = records.iter().map(|r| r.union).sum();
    if union == 0 {
        return Err(Error::Metric("every prediction and ground truth is empty".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// Mean of per-record IoUs.
pub fn miou_t_mean_variant(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Metric("no records".into()));
    }
    Ok(records.iter().map(EvalRecord::iou).sum::<f64>() / records.len() as f64)
}

/// Per instance: (ground-truth area, clicks, clicks passing `beta`).
fn per_instance(records: &[EvalRecord], beta: f64) -> Result<BTreeMap<&str, (u64, u64, u64)>> {
    let mut out: BTreeMap<&str, (u64, u64, u64)> = BTreeMap::new();
    for r in records {
        let e = out.entry(&r.instance_id).or_insert((r.gt_area, 0, 0));
        if e.0 != r.gt_area {
            return Err(Error::Metric(format!(
                "instance '{}' has records with ground-truth areas {} and {}",
                r.instance_id, e.0, r.gt_area
            )));
        }
        e.1 += 1;
        e.2 += (r.iou() >= beta) as u64;
    }
    Ok(out)
}

/// Passing clicks over total ground-truth area, each instance's area counted
/// once.
pub fn mta(records: &[EvalRecord], cfg: MetricsConfig, protocol: ClickProtocol) -> Result<f64> {
    let inst = per_instance(records, cfg.beta)?;
    let area: u64 = inst.values().map(|v| v.0).sum();
    if area == 0 {
        return Err(Error::Metric("total ground-truth area is zero".into()));
    }
    let passed: f64 = match protocol {
        ClickProtocol::Exhaustive => inst.values().map(|v| v.2).sum::<u64>() as f64,
        ClickProtocol::Sampled => inst
            .values()
            .map(|&(a, n, p)| p as f64 * a as f64 / n as f64)
            .sum(),
    };
    Ok(passed / area as f64)
}

/// mIoU-T per category plus a total row over all records. Records without a
/// category are grouped as `unknown`.
pub fn per_category_report(records: &[EvalRecord]) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        let key = r.category.clone().unwrap_or_else(|| UNKNOWN_CATEGORY.to_string());
        groups.entry(key).or_default().push(r.clone());
    }
    let mut out = BTreeMap::new();
    for (k, rs) in &groups {
        out.insert(k.clone(), miou_t(rs)?);
    }
    out.insert(TOTAL_ROW.to_string(), miou_t(records)?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub clicks: usize,
    pub miou_t: f64,
    pub miou_t_mean_variant: f64,
}

/// Metrics of the records carrying a band label, keyed `band1`..`band5`.
pub fn per_band_report(records: &[EvalRecord]) -> Result<BTreeMap<String, BandStats>> {
    let mut groups: BTreeMap<usize, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        if let Some(b) = r.band {
            groups.entry(b).or_default().push(r.clone());
        }
    }
    groups
        .into_iter()
        .map(|(b, rs)| {
            Ok((
                format!("band{b}"),
                BandStats {
                    clicks: rs.len(),
                    miou_t: miou_t(&rs)?,
                    miou_t_mean_variant: miou_t_mean_variant(&rs)?,
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: usize,
    pub instances: usize,
    pub miou_t: f64,
    pub miou_t_mean_variant: f64,
    pub mta: f64,
    pub beta: f64,
    pub protocol: ClickProtocol,
    pub per_category: BTreeMap<String, f64>,
    pub per_band: BTreeMap<String, BandStats>,
}

pub fn evaluate(
    records: &[EvalRecord],
    cfg: MetricsConfig,
    protocol: ClickProtocol,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        records: records.len(),
        instances: per_instance(records, cfg.beta)?.len(),
        miou_t: miou_t(records)?,
        miou_t_mean_variant: miou_t_mean_variant(records)?,
        mta: mta(records, cfg, protocol)?,
        beta: cfg.beta,
        protocol,
        per_category: per_category_report(records)?,
        per_band: per_band_report(records)?,
    })
}
