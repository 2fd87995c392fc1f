//! Group-level analyses over finished sessions.

use std::collections::BTreeMap;
use std::io;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    sweep_durations, AcceptRegion, Direction, Response, TrialRecord, DUTY_LEVELS, MAX_DURATION_MS, MIN_DURATION_MS,
};
use crate::session::SessionRecord;
use crate::subject::{Answer, Percept};

pub const MAP_MIN_DUTY: u32 = 5;
pub const MAP_MAX_DUTY: u32 = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("region has no accepted duty level")]
    EmptyRegion,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("all points share one duration; the quadratic is not identifiable")]
    RankDeficient,
    #[error("no sessions to analyse")]
    NoSessions,
}

// ─── regions ───────────────────────────────────────────────────────────

/// Acceptable region joined linearly between neighbouring duty levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPolygon {
    /// `(duty, min, max)` sorted by duty.
    pub levels: Vec<(f64, f64, f64)>,
}

impl RegionPolygon {
    /// Boundary in (duration, duty) space, counter-clockwise from the
    /// lowest-duty minimum.
    pub fn vertices(&self) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self.levels.iter().map(|&(duty, lo, _)| (lo, duty)).collect();
        v.extend(self.levels.iter().rev().map(|&(duty, _, hi)| (hi, duty)));
        v
    }

    /// Interpolated `(min, max)` at `duty`; `None` outside the sampled duties.
    pub fn bounds_at(&self, duty: f64) -> Option<(f64, f64)> {
        let first = self.levels.first()?;
        let last = self.levels.last()?;
        if duty < first.0 || duty > last.0 {
            return None;
        }
        if self.levels.len() == 1 {
            return Some((first.1, first.2));
        }
        let k = self.levels.windows(2).position(|w| duty <= w[1].0)?;
        let (a, b) = (self.levels[k], self.levels[k + 1]);
        let f = (duty - a.0) / (b.0 - a.0);
        Some((a.1 + f * (b.1 - a.1), a.2 + f * (b.2 - a.2)))
    }

    pub fn contains(&self, duty: f64, duration: f64) -> bool {
        self.bounds_at(duty).is_some_and(|(lo, hi)| lo <= duration && duration <= hi)
    }
}

pub fn subject_region_polygon(region: &AcceptRegion) -> Result<RegionPolygon, AnalysisError> {
    let levels: Vec<(f64, f64, f64)> = region
        .duties()
        .map(|(d, r)| (f64::from(d), r.min_ms, r.max_ms))
        .collect();
    if levels.is_empty() {
        return Err(AnalysisError::EmptyRegion);
    }
    Ok(RegionPolygon { levels })
}

/// Per-cell count of subjects whose region covers the cell, on a
/// 1 % × 1 ms grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMap {
    pub n_subjects: usize,
    pub duties: Vec<u32>,
    pub durations: Vec<u32>,
    /// `counts[duty_index][duration_index]`.
    pub counts: Vec<Vec<u32>>,
}

impl OverlapMap {
    pub fn count(&self, duty: u32, duration: u32) -> Option<u32> {
        let i = self.duties.iter().position(|&d| d == duty)?;
        let j = self.durations.iter().position(|&d| d == duration)?;
        Some(self.counts[i][j])
    }

    fn row(&self, duty: u32) -> Option<&[u32]> {
        let i = self.duties.iter().position(|&d| d == duty)?;
        Some(&self.counts[i])
    }

    /// First and last duration where every subject agrees.
    pub fn unanimous_span(&self, duty: u32) -> Option<(u32, u32)> {
        let row = self.row(duty)?;
        let n = self.n_subjects as u32;
        let first = row.iter().position(|&c| c == n)?;
        let last = row.iter().rposition(|&c| c == n)?;
        Some((self.durations[first], self.durations[last]))
    }

    /// Longest duration any subject still accepts.
    pub fn last_nonzero(&self, duty: u32) -> Option<u32> {
        let row = self.row(duty)?;
        row.iter().rposition(|&c| c > 0).map(|j| self.durations[j])
    }

    pub fn max_count(&self) -> u32 {
        self.counts.iter().flatten().copied().max().unwrap_or(0)
    }

    /// Long format: `duty_pct,duration_ms,count`.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["duty_pct", "duration_ms", "count"])?;
        for (i, duty) in self.duties.iter().enumerate() {
            for (j, duration) in self.durations.iter().enumerate() {
                w.write_record([duty.to_string(), duration.to_string(), self.counts[i][j].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Subjects with no accepted stimulus at any duty contribute nothing.
pub fn overlap_map(regions: &[AcceptRegion]) -> OverlapMap {
    let polygons: Vec<RegionPolygon> = regions.iter().filter_map(|r| subject_region_polygon(r).ok()).collect();
    let duties: Vec<u32> = (MAP_MIN_DUTY..=MAP_MAX_DUTY).collect();
    let durations: Vec<u32> = (MIN_DURATION_MS..=MAX_DURATION_MS).collect();
    let counts = duties
        .iter()
        .map(|&duty| {
            durations
                .iter()
                .map(|&d| {
                    polygons
                        .iter()
                        .filter(|p| p.contains(f64::from(duty), f64::from(d)))
                        .count() as u32
                })
                .collect()
        })
        .collect();
    OverlapMap {
        n_subjects: regions.len(),
        duties,
        durations,
        counts,
    }
}

// ─── percentage curves ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentagePoint {
    pub duty_pct: u32,
    pub duration_ms: u32,
    pub n_trials: usize,
    pub expected_trials: usize,
    pub pct_good: f64,
    pub pct_pulse: f64,
    /// False when trials are missing; percentages then cover only what was seen.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentageCurves {
    pub points: Vec<PercentagePoint>,
}

impl PercentageCurves {
    pub fn at(&self, duty: u32, duration: u32) -> Option<&PercentagePoint> {
        self.points.iter().find(|p| p.duty_pct == duty && p.duration_ms == duration)
    }

    /// Longest sweep duration up to which every presentation at this duty
    /// was felt as a single pulse.
    pub fn unanimous_pulse_threshold(&self, duty: u32) -> Option<u32> {
        let mut last = None;
        for d in sweep_durations(Direction::Increasing) {
            match self.at(duty, d) {
                Some(p) if p.complete && p.pct_pulse >= 100.0 => last = Some(d),
                _ => break,
            }
        }
        last
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["duty_pct", "duration_ms", "n_trials", "pct_good", "pct_pulse", "complete"])?;
        for p in &self.points {
            w.write_record([
                p.duty_pct.to_string(),
                p.duration_ms.to_string(),
                p.n_trials.to_string(),
                format!("{:.2}", p.pct_good),
                format!("{:.2}", p.pct_pulse),
                p.complete.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Share of section-1 presentations judged good and felt as a pulse, per
/// (duty, duration). Each subject contributes two presentations per cell.
pub fn percentage_curves(sessions: &[&[TrialRecord]]) -> PercentageCurves {
    let expected = 2 * sessions.len();
    let mut cells: BTreeMap<(u32, u32), (usize, usize, usize)> = BTreeMap::new();
    for duty in DUTY_LEVELS {
        for d in sweep_durations(Direction::Increasing) {
            cells.insert((duty, d), (0, 0, 0));
        }
    }
    for trials in sessions {
        for t in trials.iter().filter(|t| t.section == 1) {
            if let Response::Judgment { acceptable, percept } = t.response {
                let e = cells.entry((t.duty_pct(), t.duration_ms())).or_insert((0, 0, 0));
                e.0 += 1;
                e.1 += usize::from(acceptable == Answer::Yes);
                e.2 += usize::from(percept == Percept::Pulse);
            }
        }
    }
    let pct = |k: usize, n: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
    PercentageCurves {
        points: cells
            .into_iter()
            .map(|((duty_pct, duration_ms), (n, good, pulse))| PercentagePoint {
                duty_pct,
                duration_ms,
                n_trials: n,
                expected_trials: expected,
                pct_good: pct(good, n),
                pct_pulse: pct(pulse, n),
                complete: n == expected && n > 0,
            })
            .collect(),
    }
}

// ─── rating fits ───────────────────────────────────────────────────────

/// `rating ≈ a·d² + b·d + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub residual_rms: f64,
    pub argmax_ms: f64,
    pub span_ms: (f64, f64),
}

impl QuadFit {
    pub fn eval(&self, d: f64) -> f64 {
        (self.a * d + self.b) * d + self.c
    }
}

/// Least-squares quadratic through `(duration, rating)` points. With only
/// two distinct durations the curvature is unidentifiable and a straight
/// line is fitted instead (`a = 0`).
pub fn fit_quadratic(points: &[(f64, f64)]) -> Result<QuadFit, AnalysisError> {
    if points.len() < 3 {
        return Err(AnalysisError::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(AnalysisError::RankDeficient);
    }
    let lo = distinct[0];
    let hi = distinct[distinct.len() - 1];
    // centred and scaled so the normal matrix stays well conditioned
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let degree = if distinct.len() == 2 { 1 } else { 2 };
    let x = DMatrix::from_fn(points.len(), degree + 1, |i, j| ((points[i].0 - mid) / half).powi((degree - j) as i32));
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let qr = x.qr();
    let qty = qr.q().transpose() * &y;
    let coef = qr.r().solve_upper_triangular(&qty).ok_or(AnalysisError::RankDeficient)?;
    let (qa, qb, qc) = if degree == 2 {
        (coef[0], coef[1], coef[2])
    } else {
        (0.0, coef[0], coef[1])
    };
    // undo u = (d - mid) / half
    let a = qa / (half * half);
    let b = qb / half - 2.0 * qa * mid / (half * half);
    let c = qa * mid * mid / (half * half) - qb * mid / half + qc;
    let mut fit = QuadFit {
        a,
        b,
        c,
        residual_rms: 0.0,
        argmax_ms: lo,
        span_ms: (lo, hi),
    };
    let sse: f64 = points.iter().map(|&(d, r)| (fit.eval(d) - r).powi(2)).sum();
    fit.residual_rms = (sse / points.len() as f64).sqrt();
    let vertex = -b / (2.0 * a);
    fit.argmax_ms = if a < 0.0 && (lo..=hi).contains(&vertex) {
        vertex
    } else if fit.eval(hi) > fit.eval(lo) {
        hi
    } else {
        lo
    };
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectFit {
    pub subject: String,
    pub duty_pct: u32,
    pub n_points: usize,
    pub fit: Option<QuadFit>,
    pub error: Option<String>,
}

/// One fit per (subject, duty) over all section-2 ratings.
pub fn rating_fits(sessions: &[SessionRecord]) -> Vec<SubjectFit> {
    let mut out = Vec::new();
    for s in sessions {
        let mut by_duty: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
        for t in s.trials.iter().filter(|t| t.section == 2) {
            if let Response::Rating { rating } = t.response {
                by_duty
                    .entry(t.duty_pct())
                    .or_default()
                    .push((f64::from(t.duration_ms()), f64::from(rating)));
            }
        }
        for (duty_pct, points) in by_duty {
            let (fit, error) = match fit_quadratic(&points) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            out.push(SubjectFit {
                subject: s.subject_label.clone(),
                duty_pct,
                n_points: points.len(),
                fit,
                error,
            });
        }
    }
    out
}

// ─── grouping ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectBests {
    pub subject: String,
    /// Final pick per duty.
    pub bests: BTreeMap<u32, u32>,
    pub region: AcceptRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub subject: String,
    /// `None` when a duty level is missing.
    pub group: Option<u8>,
    pub bests: BTreeMap<u32, u32>,
    pub initial_widths_ms: BTreeMap<u32, f64>,
    /// Position of each pick inside its acceptable range, 0 = shortest.
    pub positions: BTreeMap<u32, f64>,
}

const TERCILE: f64 = 1.0 / 3.0;

/// Classifies each subject by where its favourite clicks sit.
///
/// Group 2 picks lie in the shortest third of every acceptable range and
/// group 3 in the longest third; group 1 picks get strictly shorter as the
/// duty level rises. Anything else goes to the group whose rule it misses
/// by the least.
pub fn pulse_width_grouping(subjects: &[SubjectBests]) -> Vec<GroupAssignment> {
    subjects
        .iter()
        .map(|s| {
            let mut bests = BTreeMap::new();
            let mut widths = BTreeMap::new();
            let mut positions = BTreeMap::new();
            for duty in DUTY_LEVELS {
                if let Some(&b) = s.bests.get(&duty) {
                    bests.insert(duty, b);
                    widths.insert(duty, f64::from(duty) / 100.0 * f64::from(b));
                    let pos = s.region.get(duty).map_or(0.5, |r| {
                        if r.max_ms > r.min_ms {
                            ((f64::from(b) - r.min_ms) / (r.max_ms - r.min_ms)).clamp(0.0, 1.0)
                        } else {
                            0.5
                        }
                    });
                    positions.insert(duty, pos);
                }
            }
            let group = (bests.len() == DUTY_LEVELS.len()).then(|| classify(&bests, &positions));
            GroupAssignment {
                subject: s.subject.clone(),
                group,
                bests,
                initial_widths_ms: widths,
                positions,
            }
        })
        .collect()
}

fn classify(bests: &BTreeMap<u32, u32>, positions: &BTreeMap<u32, f64>) -> u8 {
    let short: f64 = positions.values().map(|p| (p - TERCILE).max(0.0)).sum();
    let long: f64 = positions.values().map(|p| (1.0 - TERCILE - p).max(0.0)).sum();
    let picks: Vec<f64> = bests.values().map(|&b| f64::from(b)).collect();
    let span = f64::from(MAX_DURATION_MS - MIN_DURATION_MS);
    let decreasing: f64 = picks.windows(2).map(|w| (w[1] - w[0] + 1.0).max(0.0) / span).sum();
    if short == 0.0 {
        2
    } else if long == 0.0 {
        3
    } else if decreasing == 0.0 {
        1
    } else {
        [(decreasing, 1u8), (short, 2), (long, 3)]
            .into_iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map_or(1, |(_, g)| g)
    }
}

// ─── summary ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DutySummary {
    pub duty_pct: u32,
    pub unanimous_span_ms: Option<(u32, u32)>,
    pub last_accepted_ms: Option<u32>,
    pub unanimous_pulse_ms: Option<u32>,
    pub peak_pct_good: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub n_subjects: usize,
    pub duties: Vec<DutySummary>,
    pub group_counts: BTreeMap<String, usize>,
    pub max_rating_per_subject: BTreeMap<String, u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub summary: AnalysisSummary,
    pub overlap: OverlapMap,
    pub curves: PercentageCurves,
    pub fits: Vec<SubjectFit>,
    pub groups: Vec<GroupAssignment>,
}

pub fn analyze(sessions: &[SessionRecord]) -> Result<AnalysisReport, AnalysisError> {
    if sessions.is_empty() {
        return Err(AnalysisError::NoSessions);
    }
    let regions: Vec<AcceptRegion> = sessions.iter().map(|s| s.region.clone().unwrap_or_default()).collect();
    let overlap = overlap_map(&regions);
    let logs: Vec<&[TrialRecord]> = sessions.iter().map(|s| s.trials.as_slice()).collect();
    let curves = percentage_curves(&logs);
    let fits = rating_fits(sessions);
    let groups = pulse_width_grouping(
        &sessions
            .iter()
            .map(|s| SubjectBests {
                subject: s.subject_label.clone(),
                bests: s.bests.clone(),
                region: s.region.clone().unwrap_or_default(),
            })
            .collect::<Vec<_>>(),
    );
    let duties = DUTY_LEVELS
        .iter()
        .map(|&duty| DutySummary {
            duty_pct: duty,
            unanimous_span_ms: overlap.unanimous_span(duty),
            last_accepted_ms: overlap.last_nonzero(duty),
            unanimous_pulse_ms: curves.unanimous_pulse_threshold(duty),
            peak_pct_good: curves
                .points
                .iter()
                .filter(|p| p.duty_pct == duty)
                .map(|p| p.pct_good)
                .fold(0.0, f64::max),
        })
        .collect();
    let mut group_counts = BTreeMap::new();
    for g in &groups {
        let key = g.group.map_or("ungrouped".to_string(), |g| g.to_string());
        *group_counts.entry(key).or_insert(0) += 1;
    }
    let max_rating_per_subject = sessions
        .iter()
        .map(|s| {
            let m = s
                .trials
                .iter()
                .filter_map(|t| match t.response {
                    Response::Rating { rating } => Some(rating),
                    Response::Judgment { .. } => None,
                })
                .max()
                .unwrap_or(0);
            (s.subject_label.clone(), m)
        })
        .collect();
    Ok(AnalysisReport {
        summary: AnalysisSummary {
            n_subjects: sessions.len(),
            duties,
            group_counts,
            max_rating_per_subject,
        },
        overlap,
        curves,
        fits,
        groups,
    })
}

impl AnalysisReport {
    /// `subject,duty_pct,n_points,a,b,c,residual_rms,argmax_ms`.
    pub fn write_fits_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subject", "duty_pct", "n_points", "a", "b", "c", "residual_rms", "argmax_ms"])?;
        for f in &self.fits {
            let cols = match &f.fit {
                Some(q) => vec![
                    format!("{:e}", q.a),
                    format!("{:e}", q.b),
                    format!("{:e}", q.c),
                    format!("{:.6}", q.residual_rms),
                    format!("{:.3}", q.argmax_ms),
                ],
                None => vec![String::new(); 5],
            };
            let mut rec = vec![f.subject.clone(), f.duty_pct.to_string(), f.n_points.to_string()];
            rec.extend(cols);
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `subject,group,best_5,best_25,best_50,width_5,width_25,width_50`.
    pub fn write_groups_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["subject".to_string(), "group".to_string()];
        header.extend(DUTY_LEVELS.iter().map(|d| format!("best_{d}")));
        header.extend(DUTY_LEVELS.iter().map(|d| format!("width_{d}")));
        w.write_record(&header)?;
        for g in &self.groups {
            let mut rec = vec![g.subject.clone(), g.group.map_or(String::new(), |g| g.to_string())];
            rec.extend(DUTY_LEVELS.iter().map(|d| g.bests.get(d).map_or(String::new(), |b| b.to_string())));
            rec.extend(
                DUTY_LEVELS
                    .iter()
                    .map(|d| g.initial_widths_ms.get(d).map_or(String::new(), |w| format!("{w:.2}"))),
            );
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::DurationRange;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn region(levels: &[(u32, f64, f64)]) -> AcceptRegion {
        AcceptRegion {
            bounds: levels
                .iter()
                .map(|&(d, lo, hi)| (d, Some(DurationRange { min_ms: lo, max_ms: hi })))
                .collect(),
        }
    }

    fn reference() -> AcceptRegion {
        region(&[(5, 70.0, 130.0), (25, 25.0, 55.0), (50, 10.0, 30.0)])
    }

    #[test]
    fn polygon_examples() {
        let p = subject_region_polygon(&reference()).unwrap();
        assert!(p.contains(25.0, 40.0));
        assert!(!p.contains(50.0, 95.0));
        assert_eq!(p.bounds_at(15.0).unwrap().0, 47.5);
        assert_eq!(p.bounds_at(60.0), None);
        assert_eq!(p.vertices().len(), 6);
    }

    #[test]
    fn single_duty_region_is_a_segment() {
        let p = subject_region_polygon(&region(&[(25, 20.0, 40.0)])).unwrap();
        assert!(p.contains(25.0, 30.0));
        assert!(!p.contains(24.0, 30.0));
        assert!(subject_region_polygon(&AcceptRegion::default()).is_err());
    }

    #[test]
    fn single_subject_map_is_binary() {
        let m = overlap_map(&[reference()]);
        assert_eq!(m.max_count(), 1);
        assert!(m.counts.iter().flatten().all(|&c| c <= 1));
        assert_eq!(m.unanimous_span(5), Some((70, 130)));
        assert_eq!(m.last_nonzero(50), Some(30));
        assert_eq!(m.count(5, 210), Some(0));
    }

    #[test]
    fn all_no_curves_are_zero() {
        let trials: Vec<TrialRecord> = Vec::new();
        let c = percentage_curves(&[&trials]);
        assert!(c.points.iter().all(|p| p.pct_good == 0.0 && !p.complete));
        assert_eq!(c.unanimous_pulse_threshold(5), None);
    }

    #[test]
    fn fit_recovers_exact_parabola() {
        let pts: Vec<(f64, f64)> = (0..8)
            .map(|i| {
                let d = 10.0 + 20.0 * i as f64;
                (d, -0.01 * d * d + 1.4 * d + 2.0)
            })
            .collect();
        let f = fit_quadratic(&pts).unwrap();
        assert_relative_eq!(f.a, -0.01, max_relative = 1e-9);
        assert_relative_eq!(f.b, 1.4, max_relative = 1e-9);
        assert_relative_eq!(f.c, 2.0, max_relative = 1e-9);
        assert_relative_eq!(f.argmax_ms, 70.0, max_relative = 1e-9);
        assert!(f.residual_rms < 1e-9);
    }

    #[test]
    fn fit_through_three_points_interpolates() {
        let pts = [(10.0, 3.0), (50.0, 7.0), (90.0, 2.0)];
        let f = fit_quadratic(&pts).unwrap();
        for (d, r) in pts {
            assert_relative_eq!(f.eval(d), r, epsilon = 1e-9);
        }
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        assert!(matches!(
            fit_quadratic(&[(5.0, 1.0), (5.0, 2.0), (5.0, 3.0)]),
            Err(AnalysisError::RankDeficient)
        ));
        assert!(matches!(
            fit_quadratic(&[(5.0, 1.0), (6.0, 2.0)]),
            Err(AnalysisError::TooFewPoints { .. })
        ));
        let line = fit_quadratic(&[(5.0, 1.0), (5.0, 1.0), (15.0, 3.0)]).unwrap();
        assert_eq!(line.a, 0.0);
        assert_relative_eq!(line.b, 0.2, max_relative = 1e-12);
        assert_eq!(line.argmax_ms, 15.0);
    }

    #[test]
    fn argmax_falls_back_to_best_endpoint() {
        // convex: best endpoint wins
        let f = fit_quadratic(&[(10.0, 5.0), (20.0, 1.0), (30.0, 6.0)]).unwrap();
        assert_eq!(f.argmax_ms, 30.0);
        // concave with vertex beyond the data
        let f = fit_quadratic(&[(10.0, 1.0), (20.0, 4.0), (30.0, 6.0)]).unwrap();
        assert_eq!(f.argmax_ms, 30.0);
    }

    fn bests(subject: &str, picks: [u32; 3], region: AcceptRegion) -> SubjectBests {
        SubjectBests {
            subject: subject.into(),
            bests: DUTY_LEVELS.iter().copied().zip(picks).collect(),
            region,
        }
    }

    #[test]
    fn grouping_examples() {
        let wide = region(&[(5, 20.0, 200.0), (25, 10.0, 150.0), (50, 5.0, 120.0)]);
        let out = pulse_width_grouping(&[
            bests("a", [100, 40, 20], wide.clone()),
            bests("b", [25, 20, 10], wide.clone()),
            bests("c", [195, 150, 115], wide.clone()),
        ]);
        assert_eq!(out[0].group, Some(1));
        assert_eq!(out[0].initial_widths_ms.values().copied().collect::<Vec<_>>(), vec![5.0, 10.0, 10.0]);
        assert_eq!(out[1].group, Some(2));
        assert_eq!(out[2].group, Some(3));
        let mut missing = bests("d", [10, 10, 10], wide);
        missing.bests.remove(&25);
        assert_eq!(pulse_width_grouping(&[missing])[0].group, None);
    }

    #[test]
    fn identical_short_picks_are_group_two() {
        let r = region(&[(5, 10.0, 100.0), (25, 10.0, 100.0), (50, 10.0, 100.0)]);
        assert_eq!(pulse_width_grouping(&[bests("s", [12, 12, 12], r)])[0].group, Some(2));
    }

    fn arb_region() -> impl Strategy<Value = AcceptRegion> {
        prop::collection::vec(prop::option::of((1.0f64..200.0, 0.0f64..80.0)), 3).prop_map(|v| AcceptRegion {
            bounds: DUTY_LEVELS
                .iter()
                .zip(v)
                .map(|(&d, r)| {
                    (
                        d,
                        r.map(|(lo, w)| DurationRange {
                            min_ms: lo,
                            max_ms: lo + w,
                        }),
                    )
                })
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn adding_a_subject_never_lowers_counts(regions in prop::collection::vec(arb_region(), 1..5), extra in arb_region()) {
            let before = overlap_map(&regions);
            let mut more = regions.clone();
            more.push(extra);
            let after = overlap_map(&more);
            for (a, b) in before.counts.iter().flatten().zip(after.counts.iter().flatten()) {
                prop_assert!(b >= a);
                prop_assert!(*b as usize <= more.len());
            }
        }

        #[test]
        fn shifting_durations_shifts_the_vertex(
            a in -0.05f64..-0.001, b in -2.0f64..2.0, c in -5.0f64..5.0, shift in -50.0f64..50.0,
            noise in prop::collection::vec(-0.3f64..0.3, 9),
        ) {
            let pts: Vec<(f64, f64)> = noise.iter().enumerate()
                .map(|(i, n)| { let d = 60.0 + 10.0 * i as f64; (d, a * d * d + b * d + c + n) })
                .collect();
            let moved: Vec<(f64, f64)> = pts.iter().map(|&(d, r)| (d + shift, r)).collect();
            let f0 = fit_quadratic(&pts).unwrap();
            let f1 = fit_quadratic(&moved).unwrap();
            let v0 = -f0.b / (2.0 * f0.a);
            let v1 = -f1.b / (2.0 * f1.a);
            prop_assert!((v1 - v0 - shift).abs() < 1e-6 * (1.0 + v0.abs()));
        }

        #[test]
        fn fit_beats_random_parabolas(
            pts in prop::collection::vec((1.0f64..251.0, 0.0f64..7.0), 6..20),
            alt in prop::collection::vec((-0.01f64..0.01, -1.0f64..1.0, -5.0f64..10.0), 50),
        ) {
            prop_assume!(pts.iter().any(|p| (p.0 - pts[0].0).abs() > 1.0));
            let f = fit_quadratic(&pts).unwrap();
            let rms = |a: f64, b: f64, c: f64| (pts.iter().map(|&(d, r)| (a * d * d + b * d + c - r).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
            for (a, b, c) in alt {
                prop_assert!(f.residual_rms <= rms(a, b, c) + 1e-9);
            }
        }
    }
}
