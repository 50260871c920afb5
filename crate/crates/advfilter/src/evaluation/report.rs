//! Report bundle rendering: accuracy/quality tables (text + CSV), accuracy
//! plots, uncertainty-map strips and per-pixel kernel visualizations.
//!
//! Bundle layout under the output directory:
//! `tables/*.csv`, `tables/*.txt`, `plots/*.png`,
//! `figures/uncertainty/*`, `figures/kernels/*`, `manifest.json`.

use super::{SweepResult, SweepSpec, TestCells};
use crate::attack::eps_label;
use crate::backbone::UNetDenoiser;
use crate::error::{Error, Result};
use crate::filtering::{uncertainty_map, KernelField};
use crate::imaging::ImageTensor;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub root: PathBuf,
    pub files: Vec<PathBuf>,
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Config(format!("plot rendering failed: {e}"))
}

/// Candidate system fonts for plot text; labels are skipped when none load.
const FONT_CANDIDATES: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/local/share/fonts/DejaVuSans.ttf",
];

fn try_register_font() -> bool {
    use std::sync::OnceLock;
    static REGISTERED: OnceLock<bool> = OnceLock::new();
    *REGISTERED.get_or_init(|| {
        for path in FONT_CANDIDATES {
            if let Ok(bytes) = std::fs::read(path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font(
                    "sans-serif",
                    plotters::style::FontStyle::Normal,
                    leaked,
                )
                .is_ok()
                {
                    return true;
                }
            }
        }
        false
    })
}

/// Render the full bundle for a set of sweep results.
pub fn render_report(
    out: &Path,
    results: &[SweepResult],
    sweep: &SweepSpec,
) -> Result<ReportBundle> {
    if results.is_empty() {
        return Err(Error::Config("no results to render".into()));
    }
    let tables = out.join("tables");
    let plots = out.join("plots");
    std::fs::create_dir_all(&tables)?;
    std::fs::create_dir_all(&plots)?;
    let mut files = Vec::new();

    let acc_csv = tables.join("accuracy.csv");
    std::fs::write(&acc_csv, accuracy_csv(results, sweep))?;
    files.push(acc_csv);
    let acc_txt = tables.join("accuracy.txt");
    std::fs::write(&acc_txt, accuracy_txt(results, sweep))?;
    files.push(acc_txt);

    let q_csv = tables.join("quality.csv");
    std::fs::write(&q_csv, quality_csv(results, sweep))?;
    files.push(q_csv);
    let q_txt = tables.join("quality.txt");
    std::fs::write(&q_txt, quality_txt(results, sweep))?;
    files.push(q_txt);

    if sweep.iteration_grid.len() > 1 {
        let it_csv = tables.join("iterations.csv");
        std::fs::write(&it_csv, iterations_csv(results, sweep))?;
        files.push(it_csv);
    }

    let plot = plots.join("accuracy_vs_eps.png");
    render_accuracy_plot(&plot, results, sweep)?;
    files.push(plot);

    let manifest = out.join("manifest.json");
    let meta = serde_json::json!({
        "sweep": sweep,
        "pipelines": results.iter().map(|r| serde_json::json!({
            "name": r.pipeline,
            "classifier_fingerprint": r.classifier_fingerprint,
            "denoiser_fingerprint": r.denoiser_fingerprint,
            "seed": r.seed,
        })).collect::<Vec<_>>(),
    });
    std::fs::write(&manifest, serde_json::to_string_pretty(&meta)?)?;
    files.push(manifest);

    Ok(ReportBundle {
        root: out.to_path_buf(),
        files,
    })
}

fn sorted_eps(sweep: &SweepSpec) -> Vec<f64> {
    let mut eps = sweep.epsilon_grid.clone();
    eps.sort_by(|a, b| a.partial_cmp(b).expect("finite eps"));
    eps
}

/// Accuracy CSV: pipelines as rows, strengths as columns. Fractions are
/// written in shortest round-trip form so re-parsing is exact.
pub fn accuracy_csv(results: &[SweepResult], sweep: &SweepSpec) -> String {
    let eps = sorted_eps(sweep);
    let n0 = sweep.iteration_grid.first().copied().unwrap_or(40);
    let mut out = String::from("pipeline");
    for e in &eps {
        out.push(',');
        out.push_str(&eps_label(*e));
    }
    out.push('\n');
    for r in results {
        out.push_str(&r.pipeline);
        for e in &eps {
            out.push(',');
            match r.accuracy_at(*e, n0) {
                Some(f) => out.push_str(&format!("{f}")),
                None => out.push_str("NA"),
            }
        }
        out.push('\n');
    }
    out
}

/// Parse an accuracy CSV back into (pipeline, fractions) rows.
pub fn parse_accuracy_csv(text: &str) -> Result<Vec<(String, Vec<Option<f64>>)>> {
    let mut lines = text.lines();
    let _header = lines
        .next()
        .ok_or_else(|| Error::Config("empty accuracy csv".into()))?;
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let name = parts
            .next()
            .ok_or_else(|| Error::Config("bad csv row".into()))?
            .to_string();
        let vals = parts
            .map(|p| {
                if p == "NA" {
                    Ok(None)
                } else {
                    p.parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::Config(format!("bad csv value {p}: {e}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((name, vals));
    }
    Ok(out)
}

fn accuracy_txt(results: &[SweepResult], sweep: &SweepSpec) -> String {
    let eps = sorted_eps(sweep);
    let n0 = sweep.iteration_grid.first().copied().unwrap_or(40);
    let name_w = results
        .iter()
        .map(|r| r.pipeline.len())
        .max()
        .unwrap_or(8)
        .max(8);
    let mut out = format!("Top-1 accuracy, PGD(n={n0}, eps)\n\n");
    out.push_str(&format!("{:<name_w$}", "pipeline"));
    for e in &eps {
        out.push_str(&format!(" {:>7}", eps_label(*e)));
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w + 8 * eps.len()));
    out.push('\n');
    for r in results {
        out.push_str(&format!("{:<name_w$}", r.pipeline));
        for e in &eps {
            match r.accuracy_at(*e, n0) {
                Some(f) => out.push_str(&format!(" {f:>7.3}")),
                None => out.push_str(&format!(" {:>7}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

fn quality_csv(results: &[SweepResult], sweep: &SweepSpec) -> String {
    let eps = sorted_eps(sweep);
    let mut out = String::from("pipeline,metric");
    for e in &eps {
        out.push(',');
        out.push_str(&eps_label(*e));
    }
    out.push('\n');
    for r in results {
        for (metric, pick) in [
            ("psnr", 0usize),
            ("ssim", 1),
            ("psnr_attacked", 2),
            ("ssim_attacked", 3),
        ] {
            out.push_str(&format!("{},{metric}", r.pipeline));
            for e in &eps {
                out.push(',');
                let q = r
                    .quality
                    .iter()
                    .find(|q| eps_label(q.eps) == eps_label(*e));
                match q {
                    Some(q) => {
                        let v = match pick {
                            0 => q.psnr_denoised,
                            1 => q.ssim_denoised,
                            2 => q.psnr_attacked,
                            _ => q.ssim_attacked,
                        };
                        out.push_str(&format!("{v}"));
                    }
                    None => out.push_str("NA"),
                }
            }
            out.push('\n');
        }
    }
    out
}

fn quality_txt(results: &[SweepResult], sweep: &SweepSpec) -> String {
    let eps = sorted_eps(sweep);
    let mut out = String::from("Image quality of denoised outputs vs clean\n\n");
    for r in results {
        out.push_str(&format!("[{}]\n", r.pipeline));
        out.push_str(&format!("{:<6}", "eps"));
        out.push_str(&format!(" {:>8} {:>7} | {:>8} {:>7}\n", "PSNR", "SSIM", "in-PSNR", "in-SSIM"));
        for e in &eps {
            if let Some(q) = r.quality.iter().find(|q| eps_label(q.eps) == eps_label(*e)) {
                out.push_str(&format!(
                    "{:<6} {:>8.3} {:>7.4} | {:>8.3} {:>7.4}\n",
                    eps_label(*e),
                    q.psnr_denoised,
                    q.ssim_denoised,
                    q.psnr_attacked,
                    q.ssim_attacked
                ));
            }
        }
        out.push('\n');
    }
    out
}

fn iterations_csv(results: &[SweepResult], sweep: &SweepSpec) -> String {
    let eps = sweep.iteration_sweep_epsilon;
    let mut out = format!("pipeline (eps={})", eps_label(eps));
    for n in &sweep.iteration_grid {
        out.push_str(&format!(",n={n}"));
    }
    out.push('\n');
    for r in results {
        out.push_str(&r.pipeline);
        for n in &sweep.iteration_grid {
            out.push(',');
            match r.accuracy_at(eps, *n) {
                Some(f) => out.push_str(&format!("{f}")),
                None => out.push_str("NA"),
            }
        }
        out.push('\n');
    }
    out
}

fn render_accuracy_plot(path: &Path, results: &[SweepResult], sweep: &SweepSpec) -> Result<()> {
    use plotters::prelude::*;
    let have_font = try_register_font();
    let eps = sorted_eps(sweep);
    let n0 = sweep.iteration_grid.first().copied().unwrap_or(40);
    let min_pos = eps
        .iter()
        .copied()
        .filter(|e| *e > 0.0)
        .fold(f64::INFINITY, f64::min);
    // clean sits one slot left of the smallest strength on the log axis
    let clean_x = min_pos.log10() - 0.8;
    let xmax = eps.iter().copied().fold(0.0f64, f64::max).log10() + 0.2;
    let x_of = |e: f64| if e == 0.0 { clean_x } else { e.log10() };

    let root = BitMapBackend::new(path, (1000, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder
        .margin(24)
        .set_label_area_size(LabelAreaPosition::Left, 56)
        .set_label_area_size(LabelAreaPosition::Bottom, 48);
    if have_font {
        builder.caption("Top-1 accuracy vs attack strength", ("sans-serif", 24));
    }
    let mut chart = builder
        .build_cartesian_2d(clean_x - 0.2..xmax, 0.0..1.0f64)
        .map_err(plot_err)?;
    let label_fmt = |x: &f64| {
        if (*x - clean_x).abs() < 1e-9 {
            "clean".to_string()
        } else {
            format!("{x:.1}")
        }
    };
    let mut mesh = chart.configure_mesh();
    if have_font {
        mesh.x_desc("log10 attack strength (leftmost point: clean)")
            .y_desc("top-1 accuracy")
            .x_label_formatter(&label_fmt);
    } else {
        mesh.disable_x_axis().disable_y_axis();
    }
    mesh.draw().map_err(plot_err)?;
    for (i, r) in results.iter().enumerate() {
        let color = Palette99::pick(i).mix(0.95);
        let pts: Vec<(f64, f64)> = eps
            .iter()
            .filter_map(|e| r.accuracy_at(*e, n0).map(|a| (x_of(*e), a)))
            .collect();
        let series = chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?;
        if have_font {
            series
                .label(r.pipeline.clone())
                .legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
                });
        }
        chart
            .draw_series(pts.iter().map(|p| Circle::new(*p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    if have_font {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .position(SeriesLabelPosition::LowerLeft)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Figure strips
// ---------------------------------------------------------------------------

fn to_rgb_scaled(img: &ImageTensor, scale: usize) -> image::RgbImage {
    let (h, w, _) = img.data.dim();
    image::RgbImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        let (sy, sx) = (y as usize / scale, x as usize / scale);
        let px = |c: usize| (img.data[(sy, sx, c)].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn gray_scaled(values: &ndarray::Array2<f64>, lo: f64, hi: f64, scale: usize) -> image::RgbImage {
    let (h, w) = values.dim();
    let span = (hi - lo).max(1e-12);
    image::RgbImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        let v = values[(y as usize / scale, x as usize / scale)];
        let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([g, g, g])
    })
}

/// Uncertainty strip: for each strength, one attacked image above its
/// uncertainty map (all maps share one gray scale so brightness tracks
/// strength). Also writes the per-strength mean uncertainty statistics and
/// returns them.
pub fn render_uncertainty_figures(
    out: &Path,
    filt: &UNetDenoiser,
    cells: &TestCells,
    sweep: &SweepSpec,
    stat_images: usize,
) -> Result<Vec<(String, f64)>> {
    let dir = out.join("figures").join("uncertainty");
    std::fs::create_dir_all(&dir)?;
    let eps = sorted_eps(sweep);
    let n0 = cells.default_iterations;
    let k = filt.head_cfg.filter_size;
    let scale = 4usize;

    let mut maps = Vec::new();
    let mut stats = Vec::new();
    for e in &eps {
        let pairs = cells.get(*e, n0)?;
        let sample = &pairs[0];
        let batch = ImageTensor::batch(&[&sample.adversarial]);
        let logits = filt.forward(&batch);
        let field = KernelField::from_batch(&logits, 0, k)?;
        let umap = uncertainty_map(&field);

        // mean statistic over a sample of the cell
        let m = pairs.len().min(stat_images.max(1));
        let mut mean = 0.0f64;
        for chunk in pairs[..m].chunks(32) {
            let advs: Vec<&ImageTensor> = chunk.iter().map(|p| &p.adversarial).collect();
            let lb = filt.forward(&ImageTensor::batch(&advs));
            for bi in 0..chunk.len() {
                let f = KernelField::from_batch(&lb, bi, k)?;
                mean += uncertainty_map(&f).mean();
            }
        }
        stats.push((eps_label(*e), mean / m as f64));
        maps.push((sample.adversarial.clone(), umap));
    }

    let lo = maps
        .iter()
        .flat_map(|(_, u)| u.values.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let hi = maps
        .iter()
        .flat_map(|(_, u)| u.values.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);

    let (h, w, _) = maps[0].0.data.dim();
    let (th, tw) = (h * scale, w * scale);
    let gap = 2usize;
    let total_w = maps.len() * tw + (maps.len() - 1) * gap;
    let mut strip = image::RgbImage::from_pixel(
        total_w as u32,
        (2 * th + gap) as u32,
        image::Rgb([255, 255, 255]),
    );
    for (i, (adv, umap)) in maps.iter().enumerate() {
        let x0 = (i * (tw + gap)) as u32;
        let top = to_rgb_scaled(adv, scale);
        let bottom = gray_scaled(&umap.values, lo, hi, scale);
        image::imageops::overlay(&mut strip, &top, x0 as i64, 0);
        image::imageops::overlay(&mut strip, &bottom, x0 as i64, (th + gap) as i64);
    }
    strip
        .save(dir.join("strip.png"))
        .map_err(crate::error::Error::Image)?;

    let mut csv = String::from("eps,mean_uncertainty\n");
    for (label, v) in &stats {
        csv.push_str(&format!("{label},{v}\n"));
    }
    std::fs::write(dir.join("stats.csv"), csv)?;
    Ok(stats)
}

/// Kernel visualizations: the softmax-normalized kernel of the center pixel
/// per channel, one PNG per strength.
pub fn render_kernel_figures(
    out: &Path,
    filt: &UNetDenoiser,
    cells: &TestCells,
    sweep: &SweepSpec,
) -> Result<Vec<PathBuf>> {
    let dir = out.join("figures").join("kernels");
    std::fs::create_dir_all(&dir)?;
    let eps = sorted_eps(sweep);
    let n0 = cells.default_iterations;
    let k = filt.head_cfg.filter_size;
    let cell_px = 24usize;
    let mut files = Vec::new();
    for e in &eps {
        let pairs = cells.get(*e, n0)?;
        let sample = &pairs[0];
        let batch = ImageTensor::batch(&[&sample.adversarial]);
        let logits = filt.forward(&batch);
        let field = KernelField::from_batch(&logits, 0, k)?;
        let (y, x) = (field.height() / 2, field.width() / 2);
        let gap = 4usize;
        let total_w = 3 * k * cell_px + 2 * gap;
        let mut img = image::RgbImage::from_pixel(
            total_w as u32,
            (k * cell_px) as u32,
            image::Rgb([255, 255, 255]),
        );
        for c in 0..3 {
            let kern = field.normalized_kernel(y, x, c);
            let mx = kern.iter().copied().fold(0.0f64, f64::max).max(1e-12);
            for di in 0..k {
                for dj in 0..k {
                    let v = (kern[di * k + dj] / mx * 255.0).round() as u8;
                    let x0 = c * (k * cell_px + gap) + dj * cell_px;
                    let y0 = di * cell_px;
                    for yy in 0..cell_px {
                        for xx in 0..cell_px {
                            img.put_pixel(
                                (x0 + xx) as u32,
                                (y0 + yy) as u32,
                                image::Rgb([v, v, v]),
                            );
                        }
                    }
                }
            }
        }
        let path = dir.join(format!("kernel_eps_{}.png", eps_label(*e)));
        img.save(&path).map_err(crate::error::Error::Image)?;
        files.push(path);
    }
    Ok(files)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vs: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vs.len()).collect();
        idx.sort_by(|&a, &b| vs[a].partial_cmp(&vs[b]).expect("finite"));
        let mut ranks = vec![0.0; vs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vs[idx[j + 1]] == vs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &ii in &idx[i..=j] {
                ranks[ii] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    cov / (vx.sqrt() * vy.sqrt()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{CellAccuracy, CellQuality};

    fn fake_result(name: &str, accs: &[(f64, f64)]) -> SweepResult {
        SweepResult {
            pipeline: name.to_string(),
            classifier_fingerprint: "cf".into(),
            denoiser_fingerprint: None,
            seed: 1,
            accuracy: accs
                .iter()
                .map(|(e, a)| CellAccuracy {
                    eps: *e,
                    iterations: 40,
                    correct: (a * 1000.0).round() as usize,
                    total: 1000,
                })
                .collect(),
            quality: accs
                .iter()
                .map(|(e, _)| CellQuality {
                    eps: *e,
                    psnr_denoised: 30.0,
                    ssim_denoised: 0.9,
                    psnr_attacked: 25.0,
                    ssim_attacked: 0.8,
                })
                .collect(),
        }
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let sweep = SweepSpec {
            epsilon_grid: vec![0.0, 1e-4, 3e-1],
            iteration_grid: vec![40],
            iteration_sweep_epsilon: 0.3,
            images_per_cell: 1000,
        };
        let results = vec![
            fake_result("none", &[(0.0, 0.913), (1e-4, 0.866), (3e-1, 0.0)]),
            fake_result("filt", &[(0.0, 0.928), (1e-4, 0.899), (3e-1, 0.278)]),
        ];
        let csv = accuracy_csv(&results, &sweep);
        let parsed = parse_accuracy_csv(&csv).unwrap();
        assert_eq!(parsed.len(), 2);
        for (row, r) in parsed.iter().zip(&results) {
            assert_eq!(row.0, r.pipeline);
            for (v, cell) in row.1.iter().zip(&r.accuracy) {
                assert_eq!(v.unwrap(), cell.fraction());
            }
        }
    }

    #[test]
    fn bundle_renders_tables_and_plot() {
        let dir = tempfile::tempdir().unwrap();
        let sweep = SweepSpec {
            epsilon_grid: vec![0.0, 1e-2],
            iteration_grid: vec![40],
            iteration_sweep_epsilon: 0.3,
            images_per_cell: 10,
        };
        let results = vec![fake_result("none", &[(0.0, 0.9), (1e-2, 0.2)])];
        let bundle = render_report(dir.path(), &results, &sweep).unwrap();
        assert!(bundle.files.iter().any(|f| f.ends_with("accuracy.csv")));
        for f in &bundle.files {
            assert!(f.exists(), "{} missing", f.display());
        }
        // one result set: one table + one plot exist
        assert!(dir.path().join("plots/accuracy_vs_eps.png").exists());
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn spearman_correlation_behaves() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [2.0, 4.0, 5.0, 9.0, 30.0];
        assert!((spearman_rho(&xs, &ys) - 1.0).abs() < 1e-12);
        let ys_rev = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman_rho(&xs, &ys_rev) + 1.0).abs() < 1e-12);
        let flat = [1.0, 1.0, 1.0, 1.0, 1.0];
        assert!(spearman_rho(&xs, &flat).abs() < 1e-6);
    }
}
