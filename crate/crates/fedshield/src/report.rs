//! Detection metrics per round window, plus the running total, from a
//! round log.

use fedshield_core::defense::DefenseMode;
use fedshield_core::probe::DetectionMetrics;
use fedshield_core::simulator::RoundLog;

pub const HEADER: [&str; 14] = [
    "first_round",
    "last_round",
    "tp",
    "fp",
    "tn",
    "fn",
    "tpr",
    "fpr",
    "precision",
    "mcc",
    "cum_tpr",
    "cum_fpr",
    "cum_precision",
    "cum_mcc",
];

#[derive(Clone, Debug, PartialEq)]
pub struct WindowMetrics {
    pub first_round: usize,
    pub last_round: usize,
    pub window: DetectionMetrics,
    /// Pooled over every round up to `last_round`.
    pub cumulative: DetectionMetrics,
}

impl WindowMetrics {
    /// Any rate the window cannot define is reported as undefined.
    pub fn has_undefined(&self) -> bool {
        let w = &self.window;
        w.tpr.is_none() || w.fpr.is_none() || w.precision.is_none() || w.mcc.is_none()
    }
}

/// Mode whose detector the log exercised (from its first round).
pub fn log_mode(logs: &[RoundLog]) -> DefenseMode {
    logs.first().map_or(DefenseMode::None, |l| l.mode)
}

/// Consecutive windows of `window` rounds (the last may be shorter).
pub fn windowed(logs: &[RoundLog], window: usize) -> Vec<WindowMetrics> {
    let mode = log_mode(logs);
    let mut cumulative = DetectionMetrics::default();
    logs.chunks(window.max(1))
        .map(|chunk| {
            let w = chunk
                .iter()
                .fold(DetectionMetrics::default(), |acc, l| acc.merge(&l.detection(mode)));
            cumulative = cumulative.merge(&w);
            WindowMetrics {
                first_round: chunk[0].round,
                last_round: chunk[chunk.len() - 1].round,
                window: w,
                cumulative,
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub fn fields(m: &WindowMetrics) -> [String; 14] {
    let (w, c) = (&m.window, &m.cumulative);
    [
        m.first_round.to_string(),
        m.last_round.to_string(),
        w.tp.to_string(),
        w.fp.to_string(),
        w.tn.to_string(),
        w.fn_.to_string(),
        cell(w.tpr),
        cell(w.fpr),
        cell(w.precision),
        cell(w.mcc),
        cell(c.tpr),
        cell(c.fpr),
        cell(c.precision),
        cell(c.mcc),
    ]
}

pub fn write_report<W: std::io::Write>(out: W, rows: &[WindowMetrics]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record(fields(r))?;
    }
    w.flush()?;
    Ok(())
}
