//! Raw per-run rows and the aggregates derived from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::spec::ExperimentSpec;

/// One measured value. `x` is the sweep coordinate (SNR in dB, or the
/// NLoS excess length in m for resolvability); `y` a second coordinate
/// (relative NLoS power in dB) or 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub scenario: usize,
    pub repeat: usize,
    pub seed: u64,
    pub scatterers: usize,
    pub x: f64,
    pub y: f64,
    pub method: String,
    pub metric: String,
    pub value: f64,
    /// Weight in the aggregate (bits for BER rows, 1 otherwise).
    pub weight: f64,
}

impl RunRow {
    pub fn new(scenario: usize, repeat: usize, seed: u64, scatterers: usize, method: &str, metric: &str, value: f64) -> Self {
        Self { scenario, repeat, seed, scatterers, x: 0.0, y: 0.0, method: method.into(), metric: metric.into(), value, weight: 1.0 }
    }

    pub fn at(mut self, x: f64, y: f64) -> Self {
        self.x = x;
        self.y = y;
        self
    }

    pub fn weighted(mut self, w: f64) -> Self {
        self.weight = w;
        self
    }
}

/// Aggregate of one `(metric, method, scatterers, x, y)` group.
///
/// `range_error_m` groups aggregate as RMSE; every other metric as the
/// weighted mean. `std_err` is the Monte Carlo standard error of `value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub method: String,
    pub scatterers: usize,
    pub x: f64,
    pub y: f64,
    pub stat: String,
    pub value: f64,
    pub std_err: f64,
    pub count: usize,
    pub weight: f64,
}

/// Empirical CDF point of `|range error|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub error_m: f64,
    pub cdf: f64,
    pub method: String,
    #[serde(rename = "L")]
    pub l: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub spec: ExperimentSpec,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
    #[serde(default)]
    pub cdf: Vec<CdfPoint>,
    /// Extra per-experiment curves (CRLB), already aggregated.
    #[serde(default)]
    pub curves: Vec<Aggregate>,
    /// Every seed the run consumed, in consumption order.
    pub seeds: Vec<u64>,
}

impl ResultRecord {
    pub fn find(&self, metric: &str, method: &str, scatterers: usize, x: f64, y: f64) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .chain(&self.curves)
            .find(|a| a.metric == metric && a.method == method && a.scatterers == scatterers && a.x == x && a.y == y)
    }

    pub fn select<'a>(&'a self, metric: &'a str, method: &'a str) -> impl Iterator<Item = &'a Aggregate> + 'a {
        self.aggregates.iter().chain(&self.curves).filter(move |a| a.metric == metric && a.method == method)
    }
}

type Key = (String, String, usize, u64, u64);

fn key(r: &RunRow) -> Key {
    (r.metric.clone(), r.method.clone(), r.scatterers, r.x.to_bits(), r.y.to_bits())
}

/// Group rows and reduce. Output is ordered by metric, method, scatterers,
/// then by first appearance of `(x, y)` in `rows`.
pub fn aggregate(rows: &[RunRow]) -> Vec<Aggregate> {
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        let k = key(r);
        let g = groups.entry(k.clone()).or_default();
        if g.is_empty() {
            order.push(k);
        }
        g.push(r);
    }
    order.sort_by(|a, b| (&a.0, &a.1, a.2).cmp(&(&b.0, &b.1, b.2)));
    order
        .into_iter()
        .map(|k| {
            let g = &groups[&k];
            let w: f64 = g.iter().map(|r| r.weight).sum();
            let count = g.len();
            let (stat, value, std_err) = if k.0 == "range_error_m" {
                let ms = g.iter().map(|r| r.weight * r.value * r.value).sum::<f64>() / w;
                let rmse = ms.sqrt();
                // delta method on the mean square
                let var = g.iter().map(|r| (r.value * r.value - ms).powi(2)).sum::<f64>() / (count.max(2) - 1) as f64;
                let se = if rmse > 0.0 { (var / count as f64).sqrt() / (2.0 * rmse) } else { 0.0 };
                ("rmse", rmse, se)
            } else {
                let mean = g.iter().map(|r| r.weight * r.value).sum::<f64>() / w;
                let var = g.iter().map(|r| (r.value - mean).powi(2)).sum::<f64>() / (count.max(2) - 1) as f64;
                ("mean", mean, (var / count as f64).sqrt())
            };
            Aggregate {
                metric: k.0.clone(),
                method: k.1.clone(),
                scatterers: k.2,
                x: f64::from_bits(k.3),
                y: f64::from_bits(k.4),
                stat: stat.into(),
                value,
                std_err,
                count,
                weight: w,
            }
        })
        .collect()
}

/// Empirical CDF of `|value|` for each `(method, scatterers)` among
/// `range_error_m` rows.
pub fn error_cdf(rows: &[RunRow]) -> Vec<CdfPoint> {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == "range_error_m") {
        groups.entry((r.method.clone(), r.scatterers)).or_default().push(r.value.abs());
    }
    let mut out = Vec::new();
    for ((method, l), mut v) in groups {
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        for (i, e) in v.iter().enumerate() {
            out.push(CdfPoint { error_m: *e, cdf: (i + 1) as f64 / n, method: method.clone(), l: l + 1 });
        }
    }
    out
}

/// Median of `|range error|` per `(method, scatterers)`.
pub fn median_error(cdf: &[CdfPoint], method: &str, l: usize) -> Option<f64> {
    cdf.iter().filter(|p| p.method == method && p.l == l).find(|p| p.cdf >= 0.5).map(|p| p.error_m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(metric: &str, x: f64, v: f64) -> RunRow {
        RunRow::new(0, 0, 1, 0, "m", metric, v).at(x, 0.0)
    }

    #[test]
    fn rmse_and_mean() {
        let rows = vec![row("range_error_m", 1.0, 3.0), row("range_error_m", 1.0, -4.0), row("nmae", 1.0, 0.5), row("nmae", 1.0, 1.5)];
        let a = aggregate(&rows);
        assert_eq!(a.len(), 2);
        let nm = a.iter().find(|a| a.metric == "nmae").unwrap();
        assert_eq!(nm.value, 1.0);
        let r = a.iter().find(|a| a.metric == "range_error_m").unwrap();
        assert!((r.value - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.stat, "rmse");
    }

    #[test]
    fn weighted_mean_is_pooled_rate() {
        let rows = vec![row("ber", 0.0, 0.1).weighted(100.0), row("ber", 0.0, 0.2).weighted(300.0)];
        let a = aggregate(&rows);
        assert!((a[0].value - 0.175).abs() < 1e-15);
        assert_eq!(a[0].weight, 400.0);
    }

    #[test]
    fn cdf_monotone_and_complete() {
        let rows: Vec<RunRow> = [0.3, -0.1, 0.2, 0.5].iter().map(|&v| row("range_error_m", 0.0, v)).collect();
        let c = error_cdf(&rows);
        assert_eq!(c.len(), 4);
        assert!(c.windows(2).all(|w| w[0].cdf <= w[1].cdf && w[0].error_m <= w[1].error_m));
        assert_eq!(c.last().unwrap().cdf, 1.0);
        assert_eq!(median_error(&c, "m", 1), Some(0.2));
    }
}
