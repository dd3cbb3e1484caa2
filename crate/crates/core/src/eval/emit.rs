//! Deterministic text exports: markdown tables, TSV surfaces and series.
//! All floats are formatted with 6 significant digits, locale-independent.

use std::path::Path;

use super::EvalReport;
use crate::attacks::{LinearFit, LossSurface};
use crate::error::{CoreError, Result};

/// %g-style formatting with a fixed number of significant digits.
pub fn fmt_sig(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let digits = digits.max(1);
    let exp = v.abs().log10().floor() as i32;
    if exp >= -4 && (exp as i64) < digits as i64 {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, v);
        trim_zeros(s)
    } else {
        let s = format!("{:.*e}", digits - 1, v);
        // normalize "1.200000e5" -> "1.2e5"
        match s.split_once('e') {
            Some((mant, e)) => format!("{}e{}", trim_zeros(mant.to_string()), e),
            None => s,
        }
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

/// Markdown accuracy table plus a TSV twin; byte-stable for identical inputs.
pub fn emit_tables(report: &EvalReport, base: &Path) -> Result<()> {
    let md_path = base.with_extension("md");
    let tsv_path = base.with_extension("tsv");

    let mut md = String::new();
    md.push_str("| model |");
    for (label, _) in &report.entries {
        md.push_str(&format!(" {label} |"));
    }
    md.push('\n');
    md.push_str("|---|");
    for _ in &report.entries {
        md.push_str("---|");
    }
    md.push('\n');
    md.push_str(&format!("| {} |", report.model_id));
    for (_, acc) in &report.entries {
        md.push_str(&format!(" {} |", fmt_sig(*acc, 6)));
    }
    md.push('\n');
    std::fs::write(&md_path, md)?;

    let mut tsv = String::from("attack\taccuracy\n");
    for (label, acc) in &report.entries {
        tsv.push_str(&format!("{label}\t{}\n", fmt_sig(*acc, 6)));
    }
    std::fs::write(&tsv_path, tsv)?;
    Ok(())
}

/// Loss surface as TSV: one (alpha, steps, loss) row per grid point.
pub fn emit_surface(surface: &LossSurface, path: &Path) -> Result<()> {
    let mut out = String::from("alpha\tsteps\tloss\n");
    for (ai, &alpha) in surface.alphas.iter().enumerate() {
        for (mi, &m) in surface.steps.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                fmt_sig(alpha as f64, 6),
                m,
                fmt_sig(surface.loss_at(ai, mi), 6)
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a surface TSV back into (alpha, steps, loss) triples.
pub fn parse_surface_tsv(path: &Path) -> Result<Vec<(f64, usize, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(CoreError::Format {
                path: path.display().to_string(),
                detail: format!("line {}: expected 3 columns", i + 1),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| CoreError::Format {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", i + 1),
            })
        };
        rows.push((parse(parts[0])?, parse(parts[1])? as usize, parse(parts[2])?));
    }
    Ok(rows)
}

/// (eps, alpha-hat) pairs plus the fitted line, as TSV with a trailing
/// comment row carrying the fit summary.
pub fn write_alpha_fit(path: &Path, points: &[(f64, f64)], fit: &LinearFit) -> Result<()> {
    let mut out = String::from("eps\talpha_hat\n");
    for &(e, a) in points {
        out.push_str(&format!("{}\t{}\n", fmt_sig(e, 6), fmt_sig(a, 6)));
    }
    out.push_str(&format!(
        "# fit\tslope={}\tintercept={}\tr2={}\n",
        fmt_sig(fit.slope, 6),
        fmt_sig(fit.intercept, 6),
        fmt_sig(fit.r2, 6)
    ));
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-epoch (train, val, gap) series for generalization-gap plots.
pub fn write_epoch_series(path: &Path, series: &super::EpochSeries) -> Result<()> {
    let mut out = String::from("epoch\ttrain_acc\tval_acc\tgap\n");
    for &(e, tr, va) in &series.rows {
        out.push_str(&format!(
            "{e}\t{}\t{}\t{}\n",
            fmt_sig(tr, 6),
            fmt_sig(va, 6),
            fmt_sig(tr - va, 6)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_sig_cases() {
        assert_eq!(fmt_sig(0.0, 6), "0");
        assert_eq!(fmt_sig(1.0, 6), "1");
        assert_eq!(fmt_sig(0.25, 6), "0.25");
        assert_eq!(fmt_sig(1.0 / 3.0, 6), "0.333333");
        assert_eq!(fmt_sig(123456.789, 6), "123457");
        assert_eq!(fmt_sig(1.23456789e-7, 6), "1.23457e-7");
        assert_eq!(fmt_sig(-0.5, 6), "-0.5");
        assert_eq!(fmt_sig(4.615, 4), "4.615");
    }

    #[test]
    fn emitted_files_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let report = EvalReport {
            model_id: "toy".to_string(),
            entries: vec![("clean".to_string(), 0.91), ("pgd:8".to_string(), 0.23456789)],
            clip_count: 100,
            seed: 7,
        };
        let base = dir.path().join("report");
        emit_tables(&report, &base).unwrap();
        let md1 = std::fs::read(base.with_extension("md")).unwrap();
        let tsv1 = std::fs::read(base.with_extension("tsv")).unwrap();
        emit_tables(&report, &base).unwrap();
        assert_eq!(md1, std::fs::read(base.with_extension("md")).unwrap());
        assert_eq!(tsv1, std::fs::read(base.with_extension("tsv")).unwrap());
        let text = String::from_utf8(tsv1).unwrap();
        assert!(text.contains("pgd:8\t0.234568"), "{text}");
    }

    #[test]
    fn surface_tsv_roundtrip_and_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let surface = LossSurface {
            eps: 8.0,
            alphas: vec![0.5, 1.0, 2.0],
            steps: vec![0, 1, 5],
            mean_loss: (0..9).map(|i| 0.1 + i as f64 * 0.731).collect(),
        };
        let path = dir.path().join("surface.tsv");
        emit_surface(&surface, &path).unwrap();
        let rows = parse_surface_tsv(&path).unwrap();
        assert_eq!(rows.len(), 9);
        for (ai, &alpha) in surface.alphas.iter().enumerate() {
            for (mi, &m) in surface.steps.iter().enumerate() {
                let row = rows[ai * 3 + mi];
                assert_eq!(row.1, m);
                assert!((row.0 - alpha as f64).abs() < 1e-5);
                let want = surface.loss_at(ai, mi);
                assert!(
                    (row.2 - want).abs() <= want.abs().max(1.0) * 1e-5,
                    "{} vs {want}",
                    row.2
                );
            }
        }
    }
}
