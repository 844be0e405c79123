//! Consolidated metrics table and weight-trajectory CSV from training traces.

use crate::trainer::{TrainTiming, TrainTrace};

pub const MISSING: &str = "-";

pub const TRAJECTORY_HEADER: &str = "step,lambda_i,lambda_w,rho_t,mu_t,branch";

/// One run's trace plus its optional timing sidecar.
#[derive(Clone, Debug)]
pub struct ReportEntry {
    pub name: String,
    pub trace: TrainTrace,
    pub timing: Option<TrainTiming>,
}

fn fmt_opt(v: Option<String>) -> String {
    v.unwrap_or_else(|| MISSING.to_string())
}

/// Rows of `(run, Params, ACC, PSNR, AT-99, FNR)` as display strings.
pub fn table_rows(entries: &[ReportEntry]) -> Vec<[String; 6]> {
    entries
        .iter()
        .map(|e| {
            let s = &e.trace.summary;
            let share = 100.0 * s.trainable_params as f64 / s.decoder_params.max(1) as f64;
            let at99 = s.at99_step.map(|step| match e.timing.as_ref().and_then(|t| t.at99_seconds) {
                Some(sec) => format!("{:.2} min (step {step})", sec / 60.0),
                None => format!("step {step}"),
            });
            [
                e.name.clone(),
                format!("{} ({share:.2}%)", s.trainable_params),
                format!("{:.2}", 100.0 * s.final_acc),
                format!("{:.2}", s.final_psnr),
                fmt_opt(at99),
                fmt_opt(s.fnr.map(|f| format!("{:.3}", f))),
            ]
        })
        .collect()
}

/// Fixed-width text table.
pub fn render_table(entries: &[ReportEntry]) -> String {
    let header = ["run", "Params", "ACC", "PSNR", "AT-99", "FNR@0.5%FPR"].map(String::from);
    let rows = table_rows(entries);
    let mut widths = header.clone().map(|h| h.chars().count());
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String; 6]| {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// Same table as CSV.
pub fn table_csv(entries: &[ReportEntry]) -> String {
    let mut out = String::from("run,params,acc,psnr,at99,fnr\n");
    for r in table_rows(entries) {
        out.push_str(&r.iter().map(|c| c.replace(',', ";")).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

/// Controller trajectory: one line per evaluation with the weights in effect
/// at that step.
pub fn trajectory_csv(trace: &TrainTrace) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in &trace.rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.step, r.lambda_i, r.lambda_w, r.psnr, r.acc, r.branch));
    }
    out
}
