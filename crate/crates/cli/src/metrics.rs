//! Per-round metrics CSV.

use std::io::Write;

use sparsebyz::sim::RoundMetrics;

pub const HEADER: &str =
    "round,epoch,train_loss,test_acc,escape_cm,escape_tm,byz_selected_frac,drift_norm,angle_deg,temporal_cos";

/// Names of the columns that can be plotted.
pub const METRIC_COLUMNS: [&str; 8] = [
    "train_loss",
    "test_acc",
    "escape_cm",
    "escape_tm",
    "byz_selected_frac",
    "drift_norm",
    "angle_deg",
    "temporal_cos",
];

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_row(m: &RoundMetrics) -> String {
    let values = [
        m.train_loss,
        m.test_acc,
        m.escape_cm,
        m.escape_tm,
        m.byz_selected_frac,
        m.drift_norm,
        m.angle_deg,
        m.temporal_cos,
    ];
    let mut row = format!("{},{}", m.round, m.epoch);
    for v in values {
        row.push(',');
        row.push_str(&field(v));
    }
    row
}

/// Writes the header on creation and flushes after every row, so an
/// interrupted run leaves a readable prefix.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn write(&mut self, m: &RoundMetrics) -> std::io::Result<()> {
        writeln!(self.out, "{}", format_row(m))?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
