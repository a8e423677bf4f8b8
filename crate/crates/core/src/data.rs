//! Curves, datasets and CSV ingestion.
//!
//! Input files carry one observation per row with the header
//! `curve_id,u,y`. Rows are grouped by id in order of first appearance and
//! each curve's points are sorted by `u` (stable, so duplicate abscissae keep
//! their file order). Lines starting with `#` are ignored.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{DomainGrid, Interval};

pub const DEFAULT_GRID_LEN: usize = 51;
pub const DEFAULT_COMPLETE_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObservationPair {
    pub u: f64,
    pub y: f64,
}

impl ObservationPair {
    pub fn new(u: f64, y: f64) -> Self {
        Self { u, y }
    }
}

/// A single partially observed function.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    id: String,
    points: Vec<ObservationPair>,
    observed: Interval,
    segments: Vec<Interval>,
}

impl Curve {
    pub fn new(id: impl Into<String>, mut points: Vec<ObservationPair>) -> Result<Self> {
        let id = id.into();
        if let Some(p) = points.iter().find(|p| !(p.u.is_finite() && p.y.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "curve {id}: non-finite observation ({}, {})",
                p.u, p.y
            )));
        }
        points.sort_by(|p, q| p.u.total_cmp(&q.u));
        let (lo, hi) = match (points.first(), points.last()) {
            (Some(first), Some(last)) if last.u > first.u => (first.u, last.u),
            _ => return Err(Error::DegenerateCurve(id)),
        };
        let observed = Interval { lo, hi };
        Ok(Self {
            id,
            points,
            observed,
            segments: vec![observed],
        })
    }

    /// Replace the single observed interval by a union of disjoint segments.
    /// Every observation must fall inside one of them.
    pub fn with_segments(mut self, mut segments: Vec<Interval>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidArgument("empty segment list".into()));
        }
        segments.sort_by(|p, q| p.lo.total_cmp(&q.lo));
        for w in segments.windows(2) {
            if w[1].lo <= w[0].hi {
                return Err(Error::InvalidArgument(format!(
                    "segments [{}, {}] and [{}, {}] overlap",
                    w[0].lo, w[0].hi, w[1].lo, w[1].hi
                )));
            }
        }
        let tol = 1e-12 * (segments[segments.len() - 1].hi - segments[0].lo).max(1.0);
        if let Some(p) = self
            .points
            .iter()
            .find(|p| !segments.iter().any(|s| s.contains_tol(p.u, tol)))
        {
            return Err(Error::InvalidArgument(format!(
                "curve {}: observation at u={} lies outside the observed segments",
                self.id, p.u
            )));
        }
        self.segments = segments;
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn points(&self) -> &[ObservationPair] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `[min u, max u]`.
    pub fn observed_interval(&self) -> Interval {
        self.observed
    }

    /// Observed segments; a single `[min u, max u]` unless overridden.
    pub fn segments(&self) -> &[Interval] {
        &self.segments
    }
}

/// A sample of curves sharing a common domain and evaluation grid.
#[derive(Debug, Clone)]
pub struct FunctionalDataset {
    curves: Vec<Curve>,
    domain: Interval,
    grid: DomainGrid,
}

impl FunctionalDataset {
    /// Builds a dataset. Without an explicit `domain` the global extrema of
    /// the observations are used; with one, observations outside it are an
    /// error.
    pub fn new(curves: Vec<Curve>, domain: Option<Interval>, grid_len: usize) -> Result<Self> {
        if curves.is_empty() {
            return Err(Error::NoCurves);
        }
        let domain = match domain {
            Some(d) => {
                for c in &curves {
                    for p in c.points() {
                        if !d.contains(p.u) {
                            return Err(Error::OutsideDomain {
                                curve: c.id().to_string(),
                                u: p.u,
                                a: d.lo,
                                b: d.hi,
                            });
                        }
                    }
                }
                d
            }
            None => {
                let lo = curves
                    .iter()
                    .map(|c| c.observed_interval().lo)
                    .fold(f64::INFINITY, f64::min);
                let hi = curves
                    .iter()
                    .map(|c| c.observed_interval().hi)
                    .fold(f64::NEG_INFINITY, f64::max);
                Interval::new(lo, hi)?
            }
        };
        let grid = DomainGrid::new(domain, grid_len)?;
        Ok(Self {
            curves,
            domain,
            grid,
        })
    }

    pub fn curves(&self) -> &[Curve] {
        &self.curves
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    pub fn grid(&self) -> &DomainGrid {
        &self.grid
    }

    pub fn curve(&self, id: &str) -> Option<&Curve> {
        self.curves.iter().find(|c| c.id() == id)
    }

    pub fn total_observations(&self) -> usize {
        self.curves.iter().map(Curve::len).sum()
    }

    /// Serializes the dataset in the ingestion format.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io {
            path: "<writer>".into(),
            message: e.to_string(),
        };
        w.write_record(["curve_id", "u", "y"]).map_err(io)?;
        for c in &self.curves {
            for p in c.points() {
                w.write_record([c.id().to_string(), p.u.to_string(), p.y.to_string()])
                    .map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::Io {
            path: "<writer>".into(),
            message: e.to_string(),
        })
    }
}

/// Reads a `curve_id,u,y` CSV file.
pub fn load_dataset(
    path: &Path,
    domain: Option<Interval>,
    grid_len: usize,
) -> Result<FunctionalDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    read_dataset(file, domain, grid_len)
}

pub fn read_dataset<R: Read>(
    input: R,
    domain: Option<Interval>,
    grid_len: usize,
) -> Result<FunctionalDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<ObservationPair>> = HashMap::new();
    let mut seen_header = false;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if !seen_header {
            let fields: Vec<&str> = record.iter().collect();
            if fields != ["curve_id", "u", "y"] {
                return Err(Error::Parse {
                    line,
                    message: format!("expected header curve_id,u,y, found {}", fields.join(",")),
                });
            }
            seen_header = true;
            continue;
        }
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let parse = |idx: usize, name: &str| -> Result<f64> {
            let v: f64 = record[idx].parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid {name} value {:?}", &record[idx]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite {name} value {:?}", &record[idx]),
                });
            }
            Ok(v)
        };
        let u = parse(1, "u")?;
        let y = parse(2, "y")?;
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty curve_id".into(),
            });
        }
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(ObservationPair::new(u, y));
    }
    if order.is_empty() {
        return Err(Error::NoCurves);
    }
    let curves = order
        .into_iter()
        .map(|id| {
            let pts = groups.remove(&id).unwrap_or_default();
            Curve::new(id, pts)
        })
        .collect::<Result<Vec<_>>>()?;
    FunctionalDataset::new(curves, domain, grid_len)
}

/// Indices of curves observed (approximately) over the whole domain: the
/// smallest abscissa within `margin·(b-a)` of `a` and the largest within
/// `margin·(b-a)` of `b`.
pub fn classify_complete(dataset: &FunctionalDataset, margin_fraction: f64) -> Vec<usize> {
    let d = dataset.domain();
    let slack = margin_fraction * d.len();
    dataset
        .curves()
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let iv = c.observed_interval();
            iv.lo <= d.lo + slack && iv.hi >= d.hi - slack
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveSummary {
    pub id: String,
    pub observations: usize,
    pub interval: [f64; 2],
    pub complete: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub curves: usize,
    pub domain: [f64; 2],
    pub grid_len: usize,
    pub per_curve: Vec<CurveSummary>,
}

pub fn summarize(dataset: &FunctionalDataset, margin_fraction: f64) -> DatasetSummary {
    let complete = classify_complete(dataset, margin_fraction);
    DatasetSummary {
        curves: dataset.curves().len(),
        domain: [dataset.domain().lo, dataset.domain().hi],
        grid_len: dataset.grid().len(),
        per_curve: dataset
            .curves()
            .iter()
            .enumerate()
            .map(|(i, c)| CurveSummary {
                id: c.id().to_string(),
                observations: c.len(),
                interval: [c.observed_interval().lo, c.observed_interval().hi],
                complete: complete.binary_search(&i).is_ok(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(s: &str) -> Result<FunctionalDataset> {
        read_dataset(s.as_bytes(), None, DEFAULT_GRID_LEN)
    }

    #[test]
    fn sorts_points_and_sets_interval() {
        let d = read("curve_id,u,y\nc,0.1,1\nc,0.5,2\nc,0.3,3\n").unwrap();
        assert_eq!(d.curves().len(), 1);
        let c = &d.curves()[0];
        let us: Vec<f64> = c.points().iter().map(|p| p.u).collect();
        assert_eq!(us, vec![0.1, 0.3, 0.5]);
        assert_eq!(c.points()[1].y, 3.0);
        assert_eq!(c.observed_interval(), Interval { lo: 0.1, hi: 0.5 });
    }

    #[test]
    fn empty_file_has_no_curves() {
        assert_eq!(read("").unwrap_err(), Error::NoCurves);
        assert_eq!(read("curve_id,u,y\n").unwrap_err(), Error::NoCurves);
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = read("curve_id,u,y\na,0.1,1\na,zero,2\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let err = read("curve_id,u,y\na,0.1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn single_abscissa_curve_rejected_with_id() {
        let err = read("curve_id,u,y\nok,0,1\nok,1,1\nbad,0.5,1\nbad,0.5,2\n").unwrap_err();
        assert_eq!(err, Error::DegenerateCurve("bad".into()));
    }

    #[test]
    fn duplicate_abscissae_keep_file_order() {
        let d = read("curve_id,u,y\na,0.2,1\na,0.2,2\na,0.0,0\n").unwrap();
        let ys: Vec<f64> = d.curves()[0].points().iter().map(|p| p.y).collect();
        assert_eq!(ys, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn explicit_domain_rejects_outside_points() {
        let dom = Interval::new(0.0, 1.0).unwrap();
        let err = read_dataset("curve_id,u,y\na,0.2,1\na,1.2,2\n".as_bytes(), Some(dom), 11)
            .unwrap_err();
        assert!(matches!(err, Error::OutsideDomain { .. }));
    }

    #[test]
    fn classify_examples() {
        let dom = Interval::new(0.0, 1.0).unwrap();
        let csv = "curve_id,u,y\nfull,0.0,1\nfull,1.0,1\nlate,0.2,1\nlate,1.0,1\n";
        let d = read_dataset(csv.as_bytes(), Some(dom), 11).unwrap();
        assert_eq!(classify_complete(&d, 0.1), vec![0]);
    }

    #[test]
    fn segments_must_cover_points() {
        let c = Curve::new(
            "a",
            vec![ObservationPair::new(0.1, 0.0), ObservationPair::new(0.8, 0.0)],
        )
        .unwrap();
        let ok = c.clone().with_segments(vec![
            Interval::new(0.6, 1.0).unwrap(),
            Interval::new(0.0, 0.3).unwrap(),
        ]);
        assert_eq!(ok.unwrap().segments()[0].lo, 0.0);
        assert!(c
            .with_segments(vec![Interval::new(0.0, 0.3).unwrap()])
            .is_err());
    }
}
