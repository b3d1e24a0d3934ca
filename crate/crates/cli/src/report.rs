use std::fmt::Write as _;

use recdiff::frame::{ImageTensor, VideoClip};
use recdiff::metrics::MetricsReport;
use recdiff::{Error, Result};

pub const COLUMNS: [&str; 5] = ["FVD", "PSNR", "SSIM", "ACD", "ACD-I"];

fn cell(v: Option<f64>, precision: usize) -> String {
    match v {
        Some(x) if x.is_infinite() => if x > 0.0 { "inf" } else { "-inf" }.to_string(),
        Some(x) => format!("{x:.precision$}"),
        None => "-".to_string(),
    }
}

/// One row per report: FVD of the corpus and per-clip means of the rest.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                cell(Some(r.fvd), 4),
                cell(r.mean(|c| Some(c.psnr_db)), 2),
                cell(r.mean(|c| Some(c.ssim)), 4),
                cell(r.mean(|c| c.acd), 4),
                cell(r.mean(|c| Some(c.acd_i)), 4),
            ]
        })
        .collect();
    let mut header = vec!["Method".to_string()];
    header.extend(COLUMNS.iter().map(|c| c.to_string()));
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::from("|");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(s, " {c:<w$} |");
        }
        s.push('\n');
        s
    };
    let mut out = line(&header);
    out.push('|');
    for w in &widths {
        out.push_str(&"-".repeat(w + 2));
        out.push('|');
    }
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r));
    }
    out
}

/// Tiles the first `cols` frames of each clip into a rows×cols image.
/// Clips shorter than `cols` leave black cells.
pub fn frame_grid(clips: &[VideoClip], cols: usize) -> Result<ImageTensor> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Input("frame grid needs at least one clip".into()))?;
    if cols == 0 {
        return Err(Error::config("report.grid_cols", "must be at least 1"));
    }
    let (fh, fw) = first.resolution();
    for (i, c) in clips.iter().enumerate() {
        if c.resolution() != (fh, fw) {
            return Err(Error::Shape(format!(
                "grid row {i} is {:?}, row 0 is {:?}",
                c.resolution(),
                (fh, fw)
            )));
        }
    }
    Ok(ImageTensor::from_fn(clips.len() * fh, cols * fw, |y, x, ch| {
        let (row, col) = (y / fh, x / fw);
        match clips[row].frames().get(col) {
            Some(f) => f.get(y % fh, x % fw, ch),
            None => -1.0,
        }
    }))
}
