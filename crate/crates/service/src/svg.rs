//! Static SVG figures for analysis reports.
//!
//! Output is plain text built from fixed-precision numbers, so the same
//! report always renders to the same bytes.

use std::fmt::Write;

use clicksim_core::analysis::{AnalysisReport, OverlapMap, PercentageCurves};
use clicksim_core::protocol::{DUTY_LEVELS, MAX_DURATION_MS};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

struct Panel {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Panel {
    fn px(&self, v: f64) -> f64 {
        self.x + (v - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    fn py(&self, v: f64) -> f64 {
        self.y + self.h - (v - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }

    fn axes(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str, xticks: &[f64], yticks: &[f64]) {
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#000"/>"##,
            self.x, self.y, self.w, self.h
        );
        for &t in xticks {
            let x = self.px(t);
            let _ = writeln!(
                out,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#000"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{t}</text>"##,
                self.y + self.h,
                self.y + self.h + 4.0,
                self.y + self.h + 16.0
            );
        }
        for &t in yticks {
            let y = self.py(t);
            let _ = writeln!(
                out,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#000"/><text x="{:.2}" y="{:.2}" text-anchor="end">{t}</text>"##,
                self.x - 4.0,
                self.x,
                self.x - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            self.x + self.w / 2.0,
            self.y - 8.0,
            escape(title)
        );
        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            self.x + self.w / 2.0,
            self.y + self.h + 32.0,
            escape(xlabel)
        );
        let _ = writeln!(
            out,
            r##"<text transform="translate({:.2},{:.2}) rotate(-90)" text-anchor="middle">{}</text>"##,
            self.x - 36.0,
            self.y + self.h / 2.0,
            escape(ylabel)
        );
    }

    fn polyline(&self, out: &mut String, pts: &[(f64, f64)], color: &str, dashed: bool) {
        if pts.is_empty() {
            return;
        }
        let mut d = String::new();
        for (x, y) in pts {
            let _ = write!(d, "{:.2},{:.2} ", self.px(*x), self.py(*y));
        }
        let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            d.trim_end()
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n{body}</svg>\n"
    )
}

fn duration_ticks() -> Vec<f64> {
    (0..=5).map(|k| f64::from(k * 50)).collect()
}

/// Grey-level map of how many subjects accept each (duty, duration) cell.
pub fn overlap_svg(map: &OverlapMap) -> String {
    let panel = Panel {
        x: 60.0,
        y: 30.0,
        w: 460.0,
        h: 502.0,
        xr: (4.5, 50.5),
        yr: (0.5, f64::from(MAX_DURATION_MS) + 0.5),
    };
    let mut body = String::new();
    let n = map.n_subjects.max(1) as f64;
    for (i, &duty) in map.duties.iter().enumerate() {
        for (j, &dur) in map.durations.iter().enumerate() {
            let c = map.counts[i][j];
            if c == 0 {
                continue;
            }
            let level = (255.0 * (1.0 - f64::from(c) / n)).round() as u8;
            let x0 = panel.px(f64::from(duty) - 0.5);
            let x1 = panel.px(f64::from(duty) + 0.5);
            let y0 = panel.py(f64::from(dur) + 0.5);
            let y1 = panel.py(f64::from(dur) - 0.5);
            let _ = writeln!(
                body,
                r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="rgb({level},{level},{level})"/>"#,
                x1 - x0,
                y1 - y0
            );
        }
    }
    let duties: Vec<f64> = DUTY_LEVELS.iter().map(|&d| f64::from(d)).collect();
    panel.axes(
        &mut body,
        &format!("acceptance overlap ({} subjects)", map.n_subjects),
        "duty cycle (%)",
        "duration (ms)",
        &duties,
        &duration_ticks(),
    );
    document(560.0, 580.0, &body)
}

/// Percentage of good (solid) and pulse (dashed) answers per duty.
pub fn percentage_svg(curves: &PercentageCurves) -> String {
    let mut body = String::new();
    for (k, &duty) in DUTY_LEVELS.iter().enumerate() {
        let panel = Panel {
            x: 60.0 + 300.0 * k as f64,
            y: 30.0,
            w: 240.0,
            h: 200.0,
            xr: (0.0, 260.0),
            yr: (0.0, 100.0),
        };
        let pts: Vec<_> = curves.points.iter().filter(|p| p.duty_pct == duty).collect();
        let good: Vec<(f64, f64)> = pts.iter().map(|p| (f64::from(p.duration_ms), p.pct_good)).collect();
        let pulse: Vec<(f64, f64)> = pts.iter().map(|p| (f64::from(p.duration_ms), p.pct_pulse)).collect();
        panel.polyline(&mut body, &good, PALETTE[0], false);
        panel.polyline(&mut body, &pulse, PALETTE[3], true);
        panel.axes(
            &mut body,
            &format!("{duty}% duty"),
            "duration (ms)",
            "% of presentations",
            &duration_ticks(),
            &[0.0, 25.0, 50.0, 75.0, 100.0],
        );
    }
    document(960.0, 280.0, &body)
}

/// Fitted rating curves over each subject's tested span.
pub fn fits_svg(report: &AnalysisReport) -> String {
    let mut subjects: Vec<&str> = report.fits.iter().map(|f| f.subject.as_str()).collect();
    subjects.dedup();
    let mut body = String::new();
    for (k, &duty) in DUTY_LEVELS.iter().enumerate() {
        let panel = Panel {
            x: 60.0 + 300.0 * k as f64,
            y: 30.0,
            w: 240.0,
            h: 200.0,
            xr: (0.0, 260.0),
            yr: (0.0, 7.5),
        };
        for f in report.fits.iter().filter(|f| f.duty_pct == duty) {
            let Some(q) = f.fit else { continue };
            let color = PALETTE[subjects.iter().position(|s| *s == f.subject).unwrap_or(0) % PALETTE.len()];
            let (lo, hi) = q.span_ms;
            let pts: Vec<(f64, f64)> = (0..=40)
                .map(|i| {
                    let d = lo + (hi - lo) * f64::from(i) / 40.0;
                    (d, q.eval(d).clamp(0.0, 7.5))
                })
                .collect();
            panel.polyline(&mut body, &pts, color, false);
        }
        panel.axes(
            &mut body,
            &format!("{duty}% duty"),
            "duration (ms)",
            "rating",
            &duration_ticks(),
            &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        );
    }
    for (i, s) in subjects.iter().enumerate() {
        let _ = writeln!(
            body,
            r#"<text x="{:.2}" y="272" fill="{}">{}</text>"#,
            60.0 + 60.0 * i as f64,
            PALETTE[i % PALETTE.len()],
            escape(s)
        );
    }
    document(960.0, 290.0, &body)
}
