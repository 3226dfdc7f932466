//! Token-lifecycle tracing and the per-step metrics stream, both as CSV.

use std::io::{self, Write};

use crate::controller::{BreakRecord, HaltMode};

pub const TRACE_HEADER: &str =
    "step,layer,token,p,restart,b_raw,b_reg,cumulation,mask_before,mask_after,halted";

pub const METRICS_HEADER: &str =
    "step,task,ponder,distribution,final,mean_depth,active_tokens_mean,lr";

/// One token at one layer: gate readings, cumulative break mass after the
/// layer, and the mask transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub step: u64,
    pub layer: usize,
    pub token: usize,
    pub p: f64,
    pub restart: f64,
    pub b_raw: f64,
    pub b_reg: f64,
    pub cumulation: f64,
    pub mask_before: bool,
    pub mask_after: bool,
    pub halted: bool,
}

/// Replay the cumulative rule over a forward pass's break records to attach
/// cumulation and mask columns.
pub fn events_from_records(
    step: u64,
    records: &[BreakRecord],
    delta: f64,
    mode: HaltMode,
) -> Vec<TraceEvent> {
    let tokens = records.iter().map(|r| r.token).max().map_or(0, |m| m + 1);
    let threshold = 1.0 - delta;
    let init = match mode {
        HaltMode::CumulativeProduct => 1.0,
        _ => 0.0,
    };
    let mut cum = vec![init; tokens];
    let mut events: Vec<TraceEvent> = Vec::with_capacity(records.len());
    let mut ordered: Vec<&BreakRecord> = records.iter().collect();
    ordered.sort_by_key(|r| (r.layer, r.token));
    for r in ordered {
        let before = cum[r.token];
        let (after, crossed) = match mode {
            HaltMode::CumulativeProduct => {
                let c = before * r.b_reg;
                // b == 1.0 exactly only occurs through final-layer forcing
                // (sigmoid outputs are clamped strictly below 1)
                (c, c > threshold || r.b_reg == 1.0 && r.b_raw == 1.0)
            }
            _ => {
                let c = before + r.b_reg;
                (c, c >= threshold)
            }
        };
        cum[r.token] = after;
        events.push(TraceEvent {
            step,
            layer: r.layer,
            token: r.token,
            p: r.pause,
            restart: r.restart,
            b_raw: r.b_raw,
            b_reg: r.b_reg,
            cumulation: after,
            mask_before: !crossed_before(before, threshold, mode),
            mask_after: !crossed,
            halted: crossed,
        });
    }
    events
}

fn crossed_before(cum: f64, threshold: f64, mode: HaltMode) -> bool {
    match mode {
        HaltMode::CumulativeProduct => cum > threshold && cum < 1.0,
        _ => cum >= threshold,
    }
}

/// Write the fixed header plus one row per event in (step, layer, token)
/// order. Bool columns are 1/0.
pub fn emit_trace<W: Write>(events: &[TraceEvent], w: &mut W) -> io::Result<()> {
    let mut sorted: Vec<&TraceEvent> = events.iter().collect();
    sorted.sort_by_key(|e| (e.step, e.layer, e.token));
    writeln!(w, "{TRACE_HEADER}")?;
    for e in sorted {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            e.step,
            e.layer,
            e.token,
            e.p,
            e.restart,
            e.b_raw,
            e.b_reg,
            e.cumulation,
            e.mask_before as u8,
            e.mask_after as u8,
            e.halted as u8,
        )?;
    }
    Ok(())
}

/// One line of the training metrics stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub task: f64,
    pub ponder: f64,
    pub distribution: f64,
    pub final_loss: f64,
    pub mean_depth: f64,
    pub active_tokens_mean: f64,
    pub lr: f64,
}

pub fn write_metrics_header<W: Write>(w: &mut W) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")
}

pub fn write_metrics_row<W: Write>(w: &mut W, r: &MetricsRow) -> io::Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{},{}",
        r.step,
        r.task,
        r.ponder,
        r.distribution,
        r.final_loss,
        r.mean_depth,
        r.active_tokens_mean,
        r.lr
    )
}
