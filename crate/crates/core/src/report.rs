//! Report emission: CSV, Markdown, SVG CMC plot and a PCA embedding scatter.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::Modality;
use crate::eval::{cmc_at, mean_std, EvalReport, REPORTED_RANKS};
use crate::{Error, Matrix, Result};

pub const CSV_HEADER: &str = "trial,direction,r1,r10,r20,mAP,r1_std,r10_std,r20_std,mAP_std";

/// Per-trial rows (empty spread columns) followed by one `mean` row per
/// direction carrying the sample standard deviations.
pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for rep in reports {
        for (t, trial) in rep.trials.iter().enumerate() {
            let ranks: Vec<String> = REPORTED_RANKS
                .iter()
                .map(|&r| cmc_at(&trial.cmc, r).to_string())
                .collect();
            let _ = writeln!(out, "{t},{},{},{},,,,", rep.direction, ranks.join(","), trial.map);
        }
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for &r in &REPORTED_RANKS {
            let vals: Vec<f64> = rep.trials.iter().map(|t| cmc_at(&t.cmc, r)).collect();
            let (m, s) = mean_std(&vals);
            means.push(m.to_string());
            stds.push(s.to_string());
        }
        let _ = writeln!(
            out,
            "mean,{},{},{},{},{}",
            rep.direction,
            means.join(","),
            rep.map_mean,
            stds.join(","),
            rep.map_std
        );
    }
    out
}

pub fn report_markdown(reports: &[EvalReport]) -> String {
    let mut out = String::from("| direction | trials | rank-1 | rank-10 | rank-20 | mAP |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for rep in reports {
        let _ = write!(out, "| {} | {} |", rep.direction, rep.trials.len());
        for &r in &REPORTED_RANKS {
            let vals: Vec<f64> = rep.trials.iter().map(|t| cmc_at(&t.cmc, r)).collect();
            let (m, s) = mean_std(&vals);
            let _ = write!(out, " {:.2} ± {:.2} |", 100.0 * m, 100.0 * s);
        }
        let _ = writeln!(out, " {:.2} ± {:.2} |", 100.0 * rep.map_mean, 100.0 * rep.map_std);
    }
    out
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Mean CMC curves, one polyline per report.
pub fn cmc_svg(reports: &[EvalReport]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let max_rank = reports.iter().map(|r| r.mean_cmc.len()).max().unwrap_or(1).max(2);
    let x = |r: usize| pad + (r - 1) as f64 / (max_rank - 1) as f64 * (w - 2.0 * pad);
    let y = |v: f64| h - pad - v * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<path d=\"M{pad} {pad} L{pad} {b} L{r} {b}\" stroke=\"black\" fill=\"none\"/>",
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">rank</text>", w / 2.0, h - 10.0);
    let _ = writeln!(s, "<text x=\"12\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">matching rate</text>", h / 2.0, h / 2.0);
    for (i, rep) in reports.iter().enumerate() {
        let pts: Vec<String> = rep
            .mean_cmc
            .iter()
            .enumerate()
            .map(|(r, &v)| format!("{:.2},{:.2}", x(r + 1), y(v)))
            .collect();
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, "<polyline points=\"{}\" stroke=\"{color}\" fill=\"none\" stroke-width=\"2\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>",
            w - pad - 40.0,
            pad + 16.0 * (i as f64 + 1.0),
            rep.direction
        );
    }
    s.push_str("</svg>\n");
    s
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Leading eigenvector of a symmetric matrix by power iteration, sign fixed so
/// the largest-magnitude entry is positive.
fn leading_eigenvector(cov: &Matrix) -> Vec<f64> {
    let d = cov.rows();
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
    for _ in 0..1000 {
        let mut next: Vec<f64> = (0..d).map(|i| dot(cov.row(i), &v)).collect();
        let norm = dot(&next, &next).sqrt();
        if norm < 1e-300 {
            break;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let diff: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if diff < 1e-13 {
            break;
        }
    }
    let norm = dot(&v, &v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    let lead = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Projection onto the top two principal components; one row per input row.
pub fn pca_2d(data: &Matrix) -> Result<Matrix> {
    let (n, d) = (data.rows(), data.cols());
    if n == 0 || d == 0 {
        return Err(Error::invalid("PCA needs a non-empty matrix"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(data.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| data.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = Matrix::zeros(d, d);
    for row in &centered {
        for a in 0..d {
            for b in 0..d {
                let c = cov.get(a, b) + row[a] * row[b];
                cov.set(a, b, c);
            }
        }
    }
    let first = leading_eigenvector(&cov);
    let lambda: f64 = (0..d).map(|i| first[i] * dot(cov.row(i), &first)).sum();
    let mut deflated = cov.clone();
    for a in 0..d {
        for b in 0..d {
            deflated.set(a, b, cov.get(a, b) - lambda * first[a] * first[b]);
        }
    }
    let second = leading_eigenvector(&deflated);
    let mut out = Matrix::zeros(n, 2);
    for (i, row) in centered.iter().enumerate() {
        out.set(i, 0, dot(row, &first));
        out.set(i, 1, dot(row, &second));
    }
    Ok(out)
}

/// Embeddings to scatter, with identity and modality per row.
#[derive(Debug, Clone)]
pub struct ScatterData {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    pub modalities: Vec<Modality>,
}

/// Circles for visible images, squares for infrared, hue by identity.
pub fn scatter_svg(data: &ScatterData) -> Result<String> {
    let n = data.embeddings.rows();
    if data.labels.len() != n || data.modalities.len() != n {
        return Err(Error::Shape(format!(
            "{n} embeddings with {} labels and {} modalities",
            data.labels.len(),
            data.modalities.len()
        )));
    }
    let pts = pca_2d(&data.embeddings)?;
    let (w, h, pad) = (480.0, 480.0, 20.0);
    let range = |c: usize| {
        let vals = (0..n).map(|i| pts.get(i, c));
        let lo = vals.clone().fold(f64::INFINITY, f64::min);
        let hi = vals.fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let (x0, xs) = range(0);
    let (y0, ys) = range(1);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    for i in 0..n {
        let px = pad + (pts.get(i, 0) - x0) / xs * (w - 2.0 * pad);
        let py = h - pad - (pts.get(i, 1) - y0) / ys * (h - 2.0 * pad);
        let hue = (data.labels[i] * 137) % 360;
        let fill = format!("hsl({hue},70%,45%)");
        match data.modalities[i] {
            Modality::Visible => {
                let _ = writeln!(s, "<circle class=\"point visible\" cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"{fill}\"/>");
            }
            Modality::Infrared => {
                let _ = writeln!(
                    s,
                    "<rect class=\"point infrared\" x=\"{:.2}\" y=\"{:.2}\" width=\"6\" height=\"6\" fill=\"{fill}\"/>",
                    px - 3.0,
                    py - 3.0
                );
            }
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes `report.csv`, `report.md`, `cmc.svg` and optionally `scatter.svg`.
pub fn emit_report(reports: &[EvalReport], out_dir: &Path, scatter: Option<&ScatterData>) -> Result<Vec<PathBuf>> {
    if reports.is_empty() || reports.iter().any(|r| r.trials.is_empty()) {
        return Err(Error::invalid("nothing to report"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    write(out_dir.join("report.csv"), &report_csv(reports), &mut written)?;
    write(out_dir.join("report.md"), &report_markdown(reports), &mut written)?;
    write(out_dir.join("cmc.svg"), &cmc_svg(reports), &mut written)?;
    if let Some(data) = scatter {
        write(out_dir.join("scatter.svg"), &scatter_svg(data)?, &mut written)?;
    }
    Ok(written)
}
