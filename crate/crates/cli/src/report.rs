//! PNG plots for a run directory: loss curves, a confusion heatmap for
//! plane runs and input / prediction / ground-truth panels for saliency runs.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};

use clipforge::config::RunConfig;
use clipforge::evalmetrics::ConfusionMatrix;
use clipforge::experiment::Dataset;
use clipforge::nn::load;
use clipforge::transfer::{eval_frames, saliency_panel, MetricsReport, Task};
use clipforge::{Error, Result};

pub const LOG_FILES: [&str; 2] = ["train_log.csv", "finetune_log.csv"];
pub const CELL_PX: u32 = 32;
pub const MAX_PANELS: usize = 8;
const PANEL_SCALE: u32 = 3;
const PLOT_W: u32 = 640;
const PLOT_H: u32 = 400;
const MARGIN: u32 = 30;
const SERIES_COLOURS: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

/// Writes every plot the run directory supports into `out` and returns
/// the written paths.
pub fn write_report(run: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let logs: Vec<PathBuf> = LOG_FILES.iter().map(|f| run.join(f)).filter(|p| p.is_file()).collect();
    if logs.is_empty() {
        return Err(Error::NotFound(format!(
            "{} has none of the expected logs: {}",
            run.display(),
            LOG_FILES.join(", ")
        )));
    }
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let mut written = Vec::new();
    for log in &logs {
        let (names, rows) = read_csv(log)?;
        let stem = log.file_stem().expect("file name").to_string_lossy();
        let path = out.join(format!("{stem}_loss.png"));
        // column 0 is the epoch; plot the loss columns only
        let series: Vec<Vec<f64>> = (1..names.len())
            .filter(|&c| names[c].starts_with("loss"))
            .map(|c| rows.iter().map(|r| r[c]).collect())
            .collect();
        save_png(&line_plot(&series), &path)?;
        written.push(path);
    }

    let metrics_path = run.join("metrics.json");
    if !metrics_path.is_file() {
        return Ok(written);
    }
    let text = fs::read_to_string(&metrics_path).map_err(|e| io_error(&metrics_path, e))?;
    let report: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: metrics_path.clone(),
        source: e,
    })?;
    if let Some(cm) = &report.confusion {
        let path = out.join("confusion.png");
        save_png(&confusion_heatmap(cm), &path)?;
        written.push(path);
    }
    if report.task == Task::Saliency {
        written.extend(saliency_panels(run, out)?);
    }
    Ok(written)
}

fn saliency_panels(run: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let needed = [run.join("config.json"), run.join("final")];
    let missing: Vec<String> = needed.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::NotFound(format!("saliency panels need {}", missing.join(", "))));
    }
    let cfg = RunConfig::load(&needed[0])?;
    let net = load(&needed[1])?;
    let data = Dataset::load(&cfg)?;
    let ft = data.finetune_data();
    let frames = eval_frames(&ft, cfg.finetune.eval_frames_per_video);
    let count = frames.len().min(MAX_PANELS);
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let f = frames[i * frames.len() / count];
        let panel = saliency_panel(&net, &ft, f, cfg.finetune.saliency_sigma)?;
        let n = panel.target.width as u32;
        let mut img = RgbImage::new(3 * n, n);
        let input: Vec<f64> = panel.input.iter().map(|&v| v as f64).collect();
        for (slot, values) in [&input, &panel.predicted, &panel.target.density].into_iter().enumerate() {
            let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            for (j, &v) in values.iter().enumerate() {
                let g = (255.0 * (v - lo) / span).round() as u8;
                img.put_pixel(slot as u32 * n + j as u32 % n, j as u32 / n, Rgb([g, g, g]));
            }
        }
        for p in &panel.target.points {
            let (x, y) = (p[0].round() as i64, p[1].round() as i64);
            if (0..n as i64).contains(&x) && (0..n as i64).contains(&y) {
                img.put_pixel(2 * n + x as u32, y as u32, Rgb([220, 30, 30]));
            }
        }
        let img = imageops::resize(&img, 3 * n * PANEL_SCALE, n * PANEL_SCALE, imageops::FilterType::Nearest);
        let path = out.join(format!("saliency_panel_{i}.png"));
        save_png(&img, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Row-normalized counts, white to dark blue, `CELL_PX` pixels per cell.
pub fn confusion_heatmap(cm: &ConfusionMatrix) -> RgbImage {
    let n = cm.num_classes() as u32;
    let mut img = RgbImage::new(n * CELL_PX, n * CELL_PX);
    for (t, row) in cm.counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (p, &c) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            let shade = |full: f64| (255.0 - frac * (255.0 - full)).round() as u8;
            let colour = Rgb([shade(8.0), shade(48.0), shade(107.0)]);
            fill_rect(&mut img, p as u32 * CELL_PX, t as u32 * CELL_PX, CELL_PX, CELL_PX, colour);
        }
    }
    img
}

/// Curves share one y range; x runs over epochs.
pub fn line_plot(series: &[Vec<f64>]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (MARGIN as f64, MARGIN as f64), (MARGIN as f64, (PLOT_H - MARGIN) as f64), axis);
    draw_line(
        &mut img,
        (MARGIN as f64, (PLOT_H - MARGIN) as f64),
        ((PLOT_W - MARGIN) as f64, (PLOT_H - MARGIN) as f64),
        axis,
    );
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    let (w, h) = ((PLOT_W - 2 * MARGIN) as f64, (PLOT_H - 2 * MARGIN) as f64);
    let point = |i: usize, v: f64| {
        let x = MARGIN as f64 + if len > 1 { w * i as f64 / (len - 1) as f64 } else { w / 2.0 };
        (x, MARGIN as f64 + h * (1.0 - (v - lo) / span))
    };
    for (s, values) in series.iter().enumerate() {
        let colour = Rgb(SERIES_COLOURS[s % SERIES_COLOURS.len()]);
        for i in 0..values.len() {
            let a = point(i, values[i]);
            let b = if i + 1 < values.len() { point(i + 1, values[i + 1]) } else { a };
            if a.1.is_finite() && b.1.is_finite() {
                draw_line(&mut img, a, b, colour);
            }
        }
    }
    img
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), colour: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        let (x, y) = (x.round() as i64, y.round() as i64);
        if (0..img.width() as i64).contains(&x) && (0..img.height() as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, colour);
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, colour: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, colour);
        }
    }
}

/// Header names and numeric rows; empty cells read as NaN.
fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::CorruptDataset(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let row: Vec<f64> = l.split(',').map(|c| c.trim().parse().unwrap_or(f64::NAN)).collect();
            if row.len() == header.len() {
                Ok(row)
            } else {
                Err(Error::CorruptDataset(format!("{}: ragged row '{l}'", path.display())))
            }
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}
