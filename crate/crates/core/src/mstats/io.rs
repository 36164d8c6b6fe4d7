//! Plot-ready CSV output of ensemble statistics and increment pdfs.

use super::{EnsembleStats, IncrementPdf};
use crate::error::Result;
use std::io::Write;

pub const STATS_CSV_HEADER: &str = "scale,logS2_mean,logS2_std,skew_mean,skew_std,logF3_mean,logF3_std";
pub const PDF_CSV_HEADER: &str = "scale,bin_center,log_density";

pub fn write_stats_csv<W: Write>(mut out: W, stats: &EnsembleStats) -> Result<()> {
    writeln!(out, "{STATS_CSV_HEADER}")?;
    let zeros = vec![0.0; stats.log_s2.values.len()];
    let std_of = |c: &super::StatCurve| c.std.clone().unwrap_or_else(|| zeros.clone());
    let (s2d, skd, f3d) = (std_of(&stats.log_s2), std_of(&stats.skewness), std_of(&stats.log_f3));
    for (i, l) in stats.log_s2.scales.values().iter().enumerate() {
        writeln!(
            out,
            "{l},{},{},{},{},{},{}",
            stats.log_s2.values[i], s2d[i], stats.skewness.values[i], skd[i], stats.log_f3.values[i], f3d[i]
        )?;
    }
    Ok(())
}

pub fn write_pdf_csv<W: Write>(mut out: W, pdfs: &[IncrementPdf]) -> Result<()> {
    writeln!(out, "{PDF_CSV_HEADER}")?;
    for pdf in pdfs {
        for (c, ld) in pdf.centers().iter().zip(&pdf.log_density) {
            writeln!(out, "{},{c},{ld}", pdf.scale)?;
        }
    }
    Ok(())
}
