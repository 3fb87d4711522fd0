//! Spearman and Pearson correlation between distances and quality targets.

use std::collections::BTreeMap;
use std::path::Path;

use crate::distances::{DistanceRecord, ABSENT};
use crate::{plot, Error, Result};

/// Minimum number of paired samples for a defined correlation.
pub const MIN_SAMPLES: usize = 3;

/// Product-moment correlation. `None` when fewer than [`MIN_SAMPLES`] points,
/// lengths differ, any value is non-finite, or either variable is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < MIN_SAMPLES || xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: Pearson of the average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < MIN_SAMPLES || xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return None;
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationCell {
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    /// Records with both fields present.
    pub n: usize,
}

/// Distances as rows, targets as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub distances: Vec<String>,
    pub targets: Vec<String>,
    pub cells: Vec<Vec<CorrelationCell>>,
}

impl CorrelationReport {
    pub fn cell(&self, distance: &str, target: &str) -> Option<&CorrelationCell> {
        let r = self.distances.iter().position(|d| d == distance)?;
        let c = self.targets.iter().position(|t| t == target)?;
        Some(&self.cells[r][c])
    }

    /// Writes the grid (one `<target>_spearman`, `<target>_pearson` column
    /// pair per target) and, alongside it, `<stem>_n.csv` with sample counts.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| ABSENT.to_string());

        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["distance".to_string()];
        for t in &self.targets {
            header.push(format!("{t}_spearman"));
            header.push(format!("{t}_pearson"));
        }
        w.write_record(&header)?;
        for (d, row) in self.distances.iter().zip(&self.cells) {
            let mut rec = vec![d.clone()];
            for c in row {
                rec.push(fmt(c.spearman));
                rec.push(fmt(c.pearson));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(n_grid_path(path))?;
        let mut header = vec!["distance".to_string()];
        header.extend(self.targets.iter().cloned());
        w.write_record(&header)?;
        for (d, row) in self.distances.iter().zip(&self.cells) {
            let mut rec = vec![d.clone()];
            rec.extend(row.iter().map(|c| c.n.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Path of the sample-count grid written next to a report CSV.
pub fn n_grid_path(report_path: &Path) -> std::path::PathBuf {
    let stem = report_path.file_stem().and_then(|s| s.to_str()).unwrap_or("correlation");
    report_path.with_file_name(format!("{stem}_n.csv"))
}

fn paired(records: &[DistanceRecord], distance: &str, target: &str) -> (Vec<f64>, Vec<f64>) {
    records
        .iter()
        .filter_map(|r| Some((r.distance(distance)?, r.target(target)?)))
        .filter(|(d, t)| d.is_finite() && t.is_finite())
        .unzip()
}

/// Distance columns present in any record, in first-seen order.
pub fn distance_names(records: &[DistanceRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records {
        for d in r.distance_names() {
            if !out.contains(&d) {
                out.push(d);
            }
        }
    }
    out
}

/// Correlates every distance present in `records` with every target, using
/// pairwise deletion. Cells with too little data hold `None`.
pub fn correlation_report(records: &[DistanceRecord], targets: &[String]) -> Result<CorrelationReport> {
    if records.is_empty() {
        return Err(Error::EmptyResultSet("no distance records to correlate".into()));
    }
    let distances = distance_names(records);
    let cells = distances
        .iter()
        .map(|d| {
            targets
                .iter()
                .map(|t| {
                    let (xs, ys) = paired(records, d, t);
                    CorrelationCell { spearman: spearman(&xs, &ys), pearson: pearson(&xs, &ys), n: xs.len() }
                })
                .collect()
        })
        .collect();
    Ok(CorrelationReport { distances, targets: targets.to_vec(), cells })
}

/// Copies target values from a per-utterance table into the records' metric
/// maps (`mos` goes to the MOS field). Returns how many records matched.
pub fn attach_targets(records: &mut [DistanceRecord], table: &BTreeMap<String, BTreeMap<String, f64>>) -> usize {
    let mut matched = 0;
    for r in records.iter_mut() {
        if let Some(values) = table.get(&r.utterance_id) {
            matched += 1;
            for (k, v) in values {
                if k == "mos" {
                    r.mos = Some(*v);
                } else {
                    r.metrics.insert(k.clone(), *v);
                }
            }
        }
    }
    matched
}

/// Writes `<path>.png` and `<path>.csv` with the points where both fields are
/// present.
pub fn export_scatter(records: &[DistanceRecord], distance: &str, target: &str, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let mut ids = Vec::new();
    let mut points = Vec::new();
    for r in records {
        if let (Some(d), Some(t)) = (r.distance(distance), r.target(target)) {
            if d.is_finite() && t.is_finite() {
                ids.push(r.utterance_id.as_str());
                points.push((d, t));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyResultSet(format!("no records with both {distance} and {target}")));
    }
    let mut w = csv::Writer::from_path(path.with_extension("csv"))?;
    w.write_record(["utterance_id", distance, target])?;
    for (id, (d, t)) in ids.iter().zip(&points) {
        w.write_record([id.to_string(), d.to_string(), t.to_string()])?;
    }
    w.flush()?;
    plot::scatter_png(&points, path.with_extension("png"))?;
    Ok(points.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_linear() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &down).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_pearson() {
        // means 2.5, 2.75; cov sum 5.5; sxx 5; syy 8.75
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 5.0]).unwrap();
        assert!((r - 5.5 / (5.0f64.sqrt() * 8.75f64.sqrt())).abs() < 1e-14);
    }

    #[test]
    fn monotone_and_reversed() {
        let xs = [0.3, -1.0, 2.0, 0.7, 1.1];
        let ex: Vec<f64> = xs.iter().map(|x: &f64| x.exp()).collect();
        assert!((spearman(&xs, &ex).unwrap() - 1.0).abs() < 1e-12);
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rev: Vec<f64> = sorted.iter().rev().copied().collect();
        assert!((spearman(&sorted, &rev).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_use_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0, 30.0, 20.0]), vec![2.0, 4.0, 4.0, 1.0, 6.0, 4.0]);
        let xs = [1.0, 2.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0];
        let rx = [1.0, 2.5, 2.5, 4.0, 5.0, 6.0];
        let ry = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0];
        assert_eq!(spearman(&xs, &ys), pearson(&rx, &ry));
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(pearson(&[1.0, 2.0], &[1.0, 2.0]), None);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]), None);
        assert_eq!(pearson(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 3.0]), None);
    }

    fn record(id: &str, d: Option<f64>, pesq: Option<f64>) -> DistanceRecord {
        let mut r = DistanceRecord { utterance_id: id.into(), d_sg: d, ..Default::default() };
        if let Some(p) = pesq {
            r.metrics.insert("pesq".into(), p);
        }
        r
    }

    #[test]
    fn report_pairwise_deletion() {
        let mut recs: Vec<DistanceRecord> = (0..6).map(|i| record(&format!("u{i}"), Some(i as f64), Some(5.0 - i as f64))).collect();
        recs.push(record("x", Some(9.0), None));
        recs.push(record("y", None, Some(1.0)));
        let rep = correlation_report(&recs, &["pesq".into(), "mos".into()]).unwrap();
        let c = rep.cell("d_sg", "pesq").unwrap();
        assert_eq!(c.n, 6);
        assert!((c.spearman.unwrap() + 1.0).abs() < 1e-12);
        assert!((c.pearson.unwrap() + 1.0).abs() < 1e-12);
        let m = rep.cell("d_sg", "mos").unwrap();
        assert_eq!((m.spearman, m.pearson, m.n), (None, None, 0));

        recs.reverse();
        assert_eq!(correlation_report(&recs, &["pesq".into(), "mos".into()]).unwrap(), rep);
        assert!(correlation_report(&[], &["pesq".into()]).is_err());
    }

    #[test]
    fn report_and_scatter_files() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<DistanceRecord> = (0..3).map(|i| record(&format!("u{i}"), Some(i as f64), Some(i as f64 * 0.5))).collect();
        let rep = correlation_report(&recs, &["pesq".into()]).unwrap();
        let p = dir.path().join("table.csv");
        rep.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "distance,pesq_spearman,pesq_pearson\nd_sg,1.000000,1.000000\n");
        assert_eq!(std::fs::read_to_string(dir.path().join("table_n.csv")).unwrap(), "distance,pesq\nd_sg,3\n");

        assert_eq!(export_scatter(&recs, "d_sg", "pesq", dir.path().join("sc")).unwrap(), 3);
        let csv = std::fs::read_to_string(dir.path().join("sc.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(dir.path().join("sc.png").exists());
        assert!(export_scatter(&recs, "d_sg", "stoi", dir.path().join("none")).is_err());
    }

    #[test]
    fn attach_targets_fills_metrics_and_mos() {
        let mut recs = vec![record("a", Some(1.0), None), record("b", Some(2.0), None)];
        let table = BTreeMap::from([("a".to_string(), BTreeMap::from([("mos".to_string(), 3.5), ("pesq".to_string(), 2.0)]))]);
        assert_eq!(attach_targets(&mut recs, &table), 1);
        assert_eq!(recs[0].mos, Some(3.5));
        assert_eq!(recs[0].target("pesq"), Some(2.0));
        assert_eq!(recs[1].target("pesq"), None);
    }

    proptest! {
        #[test]
        fn affine_and_monotone_invariance(
            xs in prop::collection::vec(-100.0f64..100.0, 5..40),
            a in 0.1f64..10.0, b in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.sin() + i as f64 * 0.1).collect();
            let xa: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let xm: Vec<f64> = xs.iter().map(|x| x.powi(3)).collect();
            if let (Some(p0), Some(p1)) = (pearson(&xs, &ys), pearson(&xa, &ys)) {
                prop_assert!((p0 - p1).abs() < 1e-9);
            }
            prop_assert_eq!(spearman(&xs, &ys), spearman(&xm, &ys));
            if let Some(s) = spearman(&xs, &ys) {
                prop_assert!(s.abs() <= 1.0);
            }
        }
    }
}
