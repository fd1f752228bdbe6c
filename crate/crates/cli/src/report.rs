//! Markdown summary of the evaluation CSVs plus mid-slice PGM figures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use robnoddi_core::dataio::{params_from_rvol, RvolTensor};
use robnoddi_core::metrics::{parse_csv, CsvRow};
use robnoddi_core::phantom::{voxel_index, ParameterVolume};
use robnoddi_core::{Error, Result};

use crate::commands::{monotone_flag, Dataset, Layout, Method};

/// Binary 8-bit PGM of a `width × height` image with values in [0, 1].
pub fn pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Mid-z slice grid: rows vic, viso, od; columns truth, prediction,
/// absolute error. One-pixel gaps between panels.
pub fn slice_grid(pred: &ParameterVolume, truth: &ParameterVolume) -> Result<(usize, usize, Vec<f64>)> {
    if pred.dims != truth.dims {
        return Err(Error::Dimension(format!("prediction {:?} vs truth {:?}", pred.dims, truth.dims)));
    }
    let [nx, ny, nz] = truth.dims;
    let z = nz / 2;
    let (width, height) = (3 * nx + 2, 3 * ny + 2);
    let mut img = vec![0.0; width * height];
    for k in 0..3 {
        for y in 0..ny {
            for x in 0..nx {
                let i = voxel_index(truth.dims, x, y, z);
                let m = truth.mask[i] && pred.mask[i];
                let t = if m { truth.channel(k)[i] } else { 0.0 };
                let p = if m { pred.channel(k)[i] } else { 0.0 };
                let row = k * (ny + 1) + y;
                for (col, v) in [t, p, (p - t).abs()].into_iter().enumerate() {
                    img[row * width + col * (nx + 1) + x] = v;
                }
            }
        }
    }
    Ok((width, height, img))
}

fn read_rows(dir: &Path) -> Result<Vec<(PathBuf, Vec<CsvRow>)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "csv"));
    paths.sort();
    for p in paths {
        out.push((p.clone(), parse_csv(&fs::read_to_string(&p)?)?));
    }
    Ok(out)
}

fn row_line(r: &CsvRow) -> String {
    format!(
        "| {} | {} | {}/{} | {:.5} | {:.3} | {:.4} |",
        r.method, r.sampling_mode, r.n_dirs_shell1, r.n_dirs_shell2, r.mse, r.psnr, r.ssim
    )
}

pub struct ReportOutcome {
    pub path: PathBuf,
    pub warnings: Vec<String>,
    pub figures: Vec<PathBuf>,
}

pub fn cmd_report(out_dir: &Path) -> Result<ReportOutcome> {
    let layout = Layout::new(out_dir);
    let mut warnings = Vec::new();
    let mut eval: Vec<CsvRow> = read_rows(&layout.eval_dir())?.into_iter().flat_map(|(_, r)| r).collect();
    let method_rank = |m: &str| Method::ALL.iter().position(|x| x.name() == m).unwrap_or(usize::MAX);
    eval.sort_by(|a, b| {
        (method_rank(&a.method), &a.sampling_mode, a.n_dirs_shell1, a.n_dirs_shell2)
            .cmp(&(method_rank(&b.method), &b.sampling_mode, b.n_dirs_shell1, b.n_dirs_shell2))
    });
    let mut ablations = Vec::new();
    for m in Method::ALL {
        let p = layout.ablation(m);
        if p.exists() {
            ablations.push((m, parse_csv(&fs::read_to_string(&p)?)?));
        }
    }
    if eval.is_empty() && ablations.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    for m in Method::ALL {
        for mode in ["ss", "rs"] {
            if !eval.iter().any(|r| r.method == m.name() && r.sampling_mode == mode) {
                warnings.push(format!("no {mode} evaluation for {}", m.name()));
            }
        }
    }

    let mut md = String::from("# Results\n\n## Same vs random sampling\n\n");
    md.push_str("| method | mode | S1/S2 | MSE | PSNR (dB) | SSIM |\n|---|---|---|---|---|---|\n");
    for r in &eval {
        let _ = writeln!(md, "{}", row_line(r));
    }
    for m in Method::ALL {
        let ss = eval.iter().find(|r| r.method == m.name() && r.sampling_mode == "ss");
        let rs = eval.iter().find(|r| r.method == m.name() && r.sampling_mode == "rs");
        if let (Some(ss), Some(rs)) = (ss, rs) {
            let _ = writeln!(md, "\n{}: RS/SS MSE ratio {:.3}", m.name(), rs.mse / ss.mse);
        }
    }
    for (m, rows) in &ablations {
        let _ = write!(
            md,
            "\n## Direction-count ablation: {}\n\n| method | mode | S1/S2 | MSE | PSNR (dB) | SSIM |\n|---|---|---|---|---|---|\n",
            m.name()
        );
        for r in rows {
            let _ = writeln!(md, "{}", row_line(r));
        }
        let _ = writeln!(md, "\nEqual-count rows non-increasing within 5%: {}", if monotone_flag(rows) { "yes" } else { "no" });
    }

    let mut figures = Vec::new();
    let pred_dir = layout.pred_dir();
    if pred_dir.exists() {
        let data = Dataset::open(&layout)?;
        let tests = data.split("test");
        let truth = match tests.first() {
            Some(e) => Some(data.load(e)?.1.crop(1)?),
            None => None,
        };
        let mut preds: Vec<PathBuf> = fs::read_dir(&pred_dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        preds.retain(|p| p.extension().is_some_and(|e| e == "rvol"));
        preds.sort();
        if let Some(truth) = truth {
            if !preds.is_empty() {
                md.push_str("\n## Figures\n\nMid-slice maps of the first test volume. Rows: vic, viso, od. Columns: truth, prediction, absolute error.\n\n");
            }
            for p in preds {
                let pred = params_from_rvol(&RvolTensor::from_bytes(&fs::read(&p)?)?)?;
                let (w, h, img) = slice_grid(&pred, &truth)?;
                let name = format!("{}.pgm", p.file_stem().unwrap().to_string_lossy());
                let path = layout.figures().join(&name);
                fs::create_dir_all(layout.figures())?;
                fs::write(&path, pgm(w, h, &img))?;
                let _ = writeln!(md, "- figures/{name}");
                figures.push(path);
            }
        }
    }
    if !warnings.is_empty() {
        md.push_str("\n## Missing rows\n\n");
        for w in &warnings {
            let _ = writeln!(md, "- {w}");
        }
    }
    fs::write(layout.report(), md)?;
    Ok(ReportOutcome { path: layout.report(), warnings, figures })
}
