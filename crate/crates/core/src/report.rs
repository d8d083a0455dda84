//! Cross-run comparison tables and plots.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquire::Strategy;
use crate::datagen::{load_label, load_manifest, Domain, Split, MANIFEST_FILE};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{selection_frequency_report, FrequencyReport};
use crate::trainer::{read_csv_rows, ExperimentConfig, Mode, RunSummary, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE};

pub const BUDGET_CURVE_FILE: &str = "budget_curve.csv";
pub const BUDGET_MEAN_FILE: &str = "budget_curve_mean.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const FREQUENCY_FILE: &str = "selection_frequency.csv";
pub const BUDGET_PLOT_FILE: &str = "budget_curve.svg";
pub const TRAINING_PLOT_FILE: &str = "val_miou_by_epoch.svg";

#[derive(Debug, Deserialize)]
struct StoredConfig {
    config: ExperimentConfig,
}

/// A finished run as read back from disk.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub summary: RunSummary,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let read_json = |name: &str| -> Result<String> {
            let p = dir.join(name);
            fs::read_to_string(&p).at(&p)
        };
        let parse_err = |name: &str, e: serde_json::Error| Error::Parse {
            path: dir.join(name),
            line: Some(e.line()),
            msg: e.to_string(),
        };
        let stored: StoredConfig =
            serde_json::from_str(&read_json(CONFIG_FILE)?).map_err(|e| parse_err(CONFIG_FILE, e))?;
        let summary: RunSummary =
            serde_json::from_str(&read_json(SUMMARY_FILE)?).map_err(|e| parse_err(SUMMARY_FILE, e))?;
        Ok(RunRecord {
            dir: dir.to_path_buf(),
            config: stored.config,
            summary,
        })
    }

    /// Name of the method variant, e.g. `ss_ada(entropy)` or `+semi+active`.
    pub fn variant(&self) -> String {
        variant_label(&self.config)
    }

    /// `(epoch, target-val mIoU)` per epoch.
    pub fn val_curve(&self) -> Result<Vec<(usize, f64)>> {
        let path = self.dir.join(METRICS_FILE);
        read_csv_rows(&path)?
            .into_iter()
            .filter(|r| r.get(1).map(String::as_str) == Some("target_val"))
            .map(|r| {
                let bad = || Error::Parse {
                    path: path.clone(),
                    line: None,
                    msg: format!("malformed metrics row {r:?}"),
                };
                Ok((r[0].parse().map_err(|_| bad())?, r[2].parse().map_err(|_| bad())?))
            })
            .collect()
    }
}

/// Finished runs under each path: the path itself if it is a run, else its subdirectories.
pub fn load_runs(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(CONFIG_FILE).is_file() {
            out.push(RunRecord::load(p)?);
            continue;
        }
        let mut subs: Vec<PathBuf> = fs::read_dir(p)
            .at(p)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join(CONFIG_FILE).is_file() && d.join(SUMMARY_FILE).is_file())
            .collect();
        subs.sort();
        for d in subs {
            out.push(RunRecord::load(&d)?);
        }
    }
    if out.is_empty() {
        return Err(Error::validation("no finished run directories found"));
    }
    Ok(out)
}

pub fn variant_label(cfg: &ExperimentConfig) -> String {
    match cfg.mode {
        Mode::SsAda => {
            let t = cfg.toggles;
            let mut s = String::new();
            if t.use_semi {
                s.push_str("+semi");
            }
            if t.use_active {
                s.push_str("+active");
            }
            if t.use_weighting {
                s.push_str("+weighting");
            }
            if s.is_empty() {
                s.push_str("joint");
            }
            if t.use_active && cfg.strategy != Strategy::Entropy {
                s.push_str(&format!("({})", cfg.strategy));
            }
            if t.use_weighting && (cfg.u != 2.0 || cfg.weighting_scheme != crate::weighting::WeightingScheme::Iou) {
                let scheme = serde_json::to_value(cfg.weighting_scheme).expect("serializes");
                s.push_str(&format!("[{}, u={}]", scheme.as_str().unwrap_or("?"), cfg.u));
            }
            s
        }
        Mode::SemiRandom => "+semi".into(),
        m => m.name().into(),
    }
}

/// Curve label: mode, plus the acquisition strategy where one is used.
pub fn curve_label(cfg: &ExperimentConfig) -> String {
    match cfg.mode {
        Mode::SsAda if cfg.toggles == Mode::SsAda.default_toggles() => format!("ss_ada({})", cfg.strategy),
        Mode::SsAda => format!("ss_ada{}", variant_label(cfg)),
        m => m.name().into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub mode: String,
    pub budget_fraction: f64,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub miou: f64,
}

pub fn budget_rows(runs: &[RunRecord]) -> Vec<BudgetRow> {
    let mut rows: Vec<BudgetRow> = runs
        .iter()
        .map(|r| BudgetRow {
            mode: curve_label(&r.config),
            budget_fraction: r.config.budget_fraction,
            labeled_fraction: r.summary.labeled_count as f64 / r.summary.target_count.max(1) as f64,
            seed: r.config.seed,
            miou: r.summary.final_miou,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.mode
            .cmp(&b.mode)
            .then(a.budget_fraction.total_cmp(&b.budget_fraction))
            .then(a.seed.cmp(&b.seed))
    });
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanRow {
    pub group: String,
    pub budget_fraction: f64,
    pub seeds: usize,
    pub mean_miou: f64,
    pub std_miou: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn grouped(items: impl Iterator<Item = (String, f64, f64)>) -> Vec<MeanRow> {
    let mut groups: BTreeMap<(String, u64), (f64, Vec<f64>)> = BTreeMap::new();
    for (g, budget, v) in items {
        groups.entry((g, budget.to_bits())).or_insert((budget, Vec::new())).1.push(v);
    }
    let mut rows: Vec<MeanRow> = groups
        .into_iter()
        .map(|((group, _), (budget, vals))| {
            let (mean, std) = mean_std(&vals);
            MeanRow {
                group,
                budget_fraction: budget,
                seeds: vals.len(),
                mean_miou: mean,
                std_miou: std,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.group.cmp(&b.group).then(a.budget_fraction.total_cmp(&b.budget_fraction)));
    rows
}

/// Mean final mIoU per (mode, budget).
pub fn budget_means(runs: &[RunRecord]) -> Vec<MeanRow> {
    grouped(budget_rows(runs).into_iter().map(|r| (r.mode, r.budget_fraction, r.miou)))
}

/// Mean final mIoU per method variant and budget.
pub fn ablation_grid(runs: &[RunRecord]) -> Vec<MeanRow> {
    grouped(
        runs.iter()
            .map(|r| (r.variant(), r.config.budget_fraction, r.summary.final_miou)),
    )
}

/// Class frequencies of all actively selected images vs the whole target pool.
///
/// This is post-hoc analysis: it reads target-train labels straight from the
/// dataset, which the trainer itself never does.
pub fn selection_frequency(run: &RunRecord) -> Result<Option<FrequencyReport>> {
    let selected: BTreeSet<&String> = run.summary.selections.iter().flat_map(|(_, ids)| ids).collect();
    if selected.is_empty() {
        return Ok(None);
    }
    let root = &run.config.dataset;
    let records = load_manifest(&root.join(MANIFEST_FILE))?;
    let mut pool = Vec::new();
    let mut chosen = Vec::new();
    for r in records.iter().filter(|r| r.domain == Domain::Target && r.split == Split::Train) {
        let label = load_label(&root.join(&r.label_path))?;
        if selected.contains(&r.sample_id) {
            chosen.push(label.clone());
        }
        pool.push(label);
    }
    selection_frequency_report(&chosen, &pool, run.config.model.num_classes).map(Some)
}

fn csv_of<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::validation(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

/// Line plot of several named series.
pub fn line_plot(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Err(Error::validation("nothing to plot"));
    }
    let pad = |a: f64, b: f64| if b - a < 1e-9 { (a - 0.5, b + 0.5) } else { (a - 0.05 * (b - a), b + 0.05 * (b - a)) };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);

    let root = SVGBackend::new(path, (800, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Writes every table and plot into `out_dir`.
pub fn write_report(runs: &[RunRecord], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, text).at(&p)
    };
    let rows = budget_rows(runs);
    write(BUDGET_CURVE_FILE, csv_of(&rows)?)?;
    let means = budget_means(runs);
    write(BUDGET_MEAN_FILE, csv_of(&means)?)?;
    write(ABLATION_FILE, csv_of(&ablation_grid(runs))?)?;

    let mut freq = String::from("run,epoch_count,class_id,selected_freq,pool_freq,ratio\n");
    for r in runs {
        if let Some(rep) = selection_frequency(r)? {
            let name = r.dir.file_name().and_then(|n| n.to_str()).unwrap_or("run");
            for row in &rep.rows {
                let ratio = row.ratio.map(|v| format!("{v:.8}")).unwrap_or_else(|| "undef".into());
                freq.push_str(&format!(
                    "{name},{},{},{:.8},{:.8},{ratio}\n",
                    r.summary.selections.len(),
                    row.class_id,
                    row.selected,
                    row.pool
                ));
            }
        }
    }
    write(FREQUENCY_FILE, freq)?;

    // mIoU vs labeled fraction, one line per mode.
    let mut by_mode: BTreeMap<String, Vec<(f64, Vec<f64>)>> = BTreeMap::new();
    for r in &rows {
        let pts = by_mode.entry(r.mode.clone()).or_default();
        let x = 100.0 * r.labeled_fraction;
        match pts.iter_mut().find(|(px, _)| (*px - x).abs() < 1e-9) {
            Some((_, v)) => v.push(r.miou),
            None => pts.push((x, vec![r.miou])),
        }
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = by_mode
        .into_iter()
        .map(|(m, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (m, pts.into_iter().map(|(x, v)| (x, mean_std(&v).0)).collect())
        })
        .collect();
    line_plot(
        &out_dir.join(BUDGET_PLOT_FILE),
        "Target-val mIoU vs labeled target data",
        "labeled target images (%)",
        "mIoU",
        &series,
    )?;

    let curves = runs
        .iter()
        .map(|r| {
            let name = format!("{} s{} b{}", r.variant(), r.config.seed, r.config.budget_fraction);
            Ok((name, r.val_curve()?.into_iter().map(|(e, m)| (e as f64, m)).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    line_plot(&out_dir.join(TRAINING_PLOT_FILE), "Target-val mIoU by epoch", "epoch", "mIoU", &curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Toggles;

    #[test]
    fn variant_names_follow_the_ablation_lattice() {
        let c = |mode, toggles| ExperimentConfig {
            toggles,
            ..ExperimentConfig::for_mode(mode)
        };
        assert_eq!(variant_label(&c(Mode::SourceOnly, Toggles::none())), "source_only");
        assert_eq!(variant_label(&c(Mode::SemiRandom, Mode::SemiRandom.default_toggles())), "+semi");
        let semi_active = Toggles {
            use_weighting: false,
            ..Toggles::all()
        };
        assert_eq!(variant_label(&c(Mode::SsAda, semi_active)), "+semi+active");
        assert_eq!(variant_label(&c(Mode::SsAda, Toggles::all())), "+semi+active+weighting");
        assert_eq!(curve_label(&c(Mode::SsAda, Toggles::all())), "ss_ada(entropy)");
    }

    #[test]
    fn plot_writes_svg() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.svg");
        line_plot(&p, "t", "x", "y", &[("a".into(), vec![(0.0, 0.1), (1.0, 0.4)])]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg"));
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}
