use std::fmt::Write as _;
use std::time::Duration;

/// Accounting for one decode run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeStats {
    pub forwards: usize,
    pub emitted: usize,
    /// Tokens emitted by each forward, in order.
    pub per_forward: Vec<usize>,
    /// `acceptance_hist[a]`: verification rounds that accepted `a` drafts.
    pub acceptance_hist: Vec<usize>,
    pub wall: Duration,
    /// Decoding stopped early at the position limit.
    pub truncated: bool,
}

impl DecodeStats {
    pub(crate) fn record(&mut self, forwards: usize, emitted: usize) {
        self.forwards += forwards;
        self.emitted += emitted;
        self.per_forward.push(emitted);
        self.per_forward.extend(std::iter::repeat_n(0, forwards.saturating_sub(1)));
    }

    pub(crate) fn record_acceptance(&mut self, accepted: usize) {
        if self.acceptance_hist.len() <= accepted {
            self.acceptance_hist.resize(accepted + 1, 0);
        }
        self.acceptance_hist[accepted] += 1;
    }

    pub fn tokens_per_forward(&self) -> f64 {
        if self.forwards == 0 {
            0.0
        } else {
            self.emitted as f64 / self.forwards as f64
        }
    }

    /// Mean accepted drafts per verification round.
    pub fn mean_acceptance(&self) -> f64 {
        let rounds: usize = self.acceptance_hist.iter().sum();
        if rounds == 0 {
            return 0.0;
        }
        let total: usize = self.acceptance_hist.iter().enumerate().map(|(a, n)| a * n).sum();
        total as f64 / rounds as f64
    }

    pub fn merge(&mut self, other: &DecodeStats) {
        self.forwards += other.forwards;
        self.emitted += other.emitted;
        self.per_forward.extend_from_slice(&other.per_forward);
        if self.acceptance_hist.len() < other.acceptance_hist.len() {
            self.acceptance_hist.resize(other.acceptance_hist.len(), 0);
        }
        for (a, n) in other.acceptance_hist.iter().enumerate() {
            self.acceptance_hist[a] += n;
        }
        self.wall += other.wall;
        self.truncated |= other.truncated;
    }

    /// Single-line `key=value` record.
    pub fn to_record(&self, label: &str) -> String {
        let hist: Vec<String> = self.acceptance_hist.iter().enumerate().map(|(a, n)| format!("{a}:{n}")).collect();
        format!(
            "mode={label} forwards={} emitted={} tokens_per_forward={:.4} mean_accepted={:.4} wall_ms={:.3} truncated={} accept_hist={}",
            self.forwards,
            self.emitted,
            self.tokens_per_forward(),
            self.mean_acceptance(),
            self.wall.as_secs_f64() * 1e3,
            self.truncated,
            hist.join(","),
        )
    }
}

/// Fixed-width comparison table; speedups are relative to the first row.
pub fn summary_table(rows: &[(String, DecodeStats)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:>9} {:>9} {:>10} {:>10} {:>11} {:>12} {:>11}",
        "mode", "forwards", "emitted", "tok/fwd", "accepted", "wall_ms", "fwd_speedup", "wall_speedup"
    );
    let base = rows.first().map(|(_, s)| s.clone());
    for (label, s) in rows {
        let (fwd, wall) = match &base {
            Some(b) if s.forwards > 0 && s.wall.as_secs_f64() > 0.0 => {
                (b.forwards as f64 / s.forwards as f64, b.wall.as_secs_f64() / s.wall.as_secs_f64())
            }
            _ => (1.0, 1.0),
        };
        let _ = writeln!(
            out,
            "{:<20} {:>9} {:>9} {:>10.3} {:>10.3} {:>11.1} {:>11.2}x {:>10.2}x",
            label,
            s.forwards,
            s.emitted,
            s.tokens_per_forward(),
            s.mean_acceptance(),
            s.wall.as_secs_f64() * 1e3,
            fwd,
            wall
        );
    }
    out
}
