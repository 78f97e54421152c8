//! Dice reports, paired comparisons, and their table and chart files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::mean_sd;
use super::wilcoxon::{wilcoxon_signed_rank, Direction};
use crate::data::io::write_atomic;
use crate::error::{Error, Result};
use crate::grid::Class;

/// Footer stating how degenerate masks and the grand mean are handled.
pub const DICE_CONVENTION: &str = "Dice is 1.0 when prediction and annotation are both empty for a class and 0.0 when exactly one is empty. \
Cells are per (fold, class) means over images; fold, class and grand summaries are means and sample standard deviations over cells.";

/// Foreground Dice of one evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDice {
    pub fold_id: String,
    /// `"{group}#{frame}"`.
    pub image_id: String,
    /// In [`Class::FOREGROUND`] order.
    pub dice: [f64; 4],
}

impl ImageDice {
    /// Mean over the foreground classes; the pairing unit of comparisons.
    pub fn mean(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 4.0
    }
}

/// Mean Dice of one class over the images of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceCell {
    pub fold_id: String,
    pub class: String,
    pub n_images: usize,
    pub dice_mean: f64,
    pub dice_sd: f64,
}

/// Mean and standard deviation over a set of cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub key: String,
    pub n_cells: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Per-fold, per-class Dice of one method.
///
/// Cells are ordered fold by fold (in first-seen fold order) and, within a
/// fold, by class. Fold, class and grand summaries reduce over cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub method: String,
    pub cells: Vec<DiceCell>,
    pub folds: Vec<Summary>,
    pub classes: Vec<Summary>,
    pub grand: Summary,
    pub images: Vec<ImageDice>,
}

fn summarize(key: String, cells: &[&DiceCell]) -> Summary {
    let v: Vec<f64> = cells.iter().map(|c| c.dice_mean).collect();
    let (mean, sd) = mean_sd(&v);
    Summary {
        key,
        n_cells: v.len(),
        mean,
        sd,
    }
}

impl DiceReport {
    pub fn from_images(method: &str, images: Vec<ImageDice>) -> Result<DiceReport> {
        if images.is_empty() {
            return Err(Error::Eval("a Dice report needs at least one image".into()));
        }
        if let Some(bad) = images.iter().find(|i| i.dice.iter().any(|d| !(0.0..=1.0).contains(d))) {
            return Err(Error::Eval(format!("Dice outside [0, 1] for image {}", bad.image_id)));
        }
        let mut fold_ids: Vec<String> = Vec::new();
        for i in &images {
            if !fold_ids.contains(&i.fold_id) {
                fold_ids.push(i.fold_id.clone());
            }
        }
        let mut cells = Vec::new();
        for f in &fold_ids {
            let fold: Vec<&ImageDice> = images.iter().filter(|i| &i.fold_id == f).collect();
            for (k, class) in Class::FOREGROUND.into_iter().enumerate() {
                let v: Vec<f64> = fold.iter().map(|i| i.dice[k]).collect();
                let (dice_mean, dice_sd) = mean_sd(&v);
                cells.push(DiceCell {
                    fold_id: f.clone(),
                    class: class.name().to_string(),
                    n_images: v.len(),
                    dice_mean,
                    dice_sd,
                });
            }
        }
        let folds = fold_ids
            .iter()
            .map(|f| summarize(f.clone(), &cells.iter().filter(|c| &c.fold_id == f).collect::<Vec<_>>()))
            .collect();
        let classes = Class::FOREGROUND
            .iter()
            .map(|c| summarize(c.name().into(), &cells.iter().filter(|x| x.class == c.name()).collect::<Vec<_>>()))
            .collect();
        let grand = summarize("all".into(), &cells.iter().collect::<Vec<_>>());
        Ok(DiceReport {
            method: method.to_string(),
            cells,
            folds,
            classes,
            grand,
            images,
        })
    }

    /// Per-image mean foreground Dice, keyed by image id.
    pub fn image_means(&self) -> Vec<(String, f64)> {
        self.images.iter().map(|i| (format!("{}/{}", i.fold_id, i.image_id), i.mean())).collect()
    }
}

/// Wilcoxon comparison of two methods on the same images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub method_a: String,
    pub method_b: String,
    /// Paired per-image mean foreground Dice.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub n: usize,
    pub n_nonzero: usize,
    pub statistic: f64,
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
    pub all_zero: bool,
    pub direction: Direction,
}

impl ComparisonResult {
    /// Tests paired values of two methods.
    pub fn new(method_a: &str, a: Vec<f64>, method_b: &str, b: Vec<f64>) -> Result<ComparisonResult> {
        let t = wilcoxon_signed_rank(&a, &b)?;
        Ok(ComparisonResult {
            method_a: method_a.into(),
            method_b: method_b.into(),
            n: a.len(),
            a,
            b,
            n_nonzero: t.n_nonzero,
            statistic: t.statistic,
            w_plus: t.w_plus,
            p_value: t.p_value,
            exact: t.exact,
            all_zero: t.all_zero,
            direction: t.direction,
        })
    }

    /// Pairs the per-image means of two reports by image id.
    pub fn from_reports(a: &DiceReport, b: &DiceReport) -> Result<ComparisonResult> {
        let (ma, mb) = (a.image_means(), b.image_means());
        let mut va = Vec::with_capacity(ma.len());
        let mut vb = Vec::with_capacity(ma.len());
        for (id, x) in &ma {
            let y = mb
                .iter()
                .find(|(j, _)| j == id)
                .ok_or_else(|| Error::Eval(format!("image {id} of {} is missing from {}", a.method, b.method)))?;
            va.push(*x);
            vb.push(y.1);
        }
        if ma.len() != mb.len() {
            return Err(Error::Eval(format!(
                "reports cover different images ({} vs {})",
                ma.len(),
                mb.len()
            )));
        }
        ComparisonResult::new(&a.method, va, &b.method, vb)
    }
}

/// Anything [`emit_report`] can write.
#[derive(Clone, Debug, PartialEq)]
pub enum Report {
    /// One or more methods evaluated on the same protocol.
    Dice(Vec<DiceReport>),
    /// Two methods with their Wilcoxon comparison.
    Comparison {
        result: ComparisonResult,
        arms: Vec<DiceReport>,
    },
}

/// One line of the report table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Cell {
        method: String,
        #[serde(flatten)]
        cell: DiceCell,
    },
    Fold {
        method: String,
        #[serde(flatten)]
        summary: Summary,
    },
    Class {
        method: String,
        #[serde(flatten)]
        summary: Summary,
    },
    Grand {
        method: String,
        #[serde(flatten)]
        summary: Summary,
    },
    Image {
        method: String,
        #[serde(flatten)]
        image: ImageDice,
    },
    Comparison(ComparisonResult),
    Footer {
        convention: String,
    },
}

/// Paths written by [`emit_report`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub chart: PathBuf,
}

fn arms(report: &Report) -> &[DiceReport] {
    match report {
        Report::Dice(r) => r,
        Report::Comparison { arms, .. } => arms,
    }
}

/// Writes `{stem}.jsonl` (one JSON record per line) and `{stem}.png`, a
/// grouped bar chart of per-fold, per-class and overall mean Dice with
/// standard-deviation error bars, one bar per method in each group.
pub fn emit_report(report: &Report, stem: &Path) -> Result<ReportFiles> {
    let reports = arms(report);
    if reports.is_empty() {
        return Err(Error::Eval("nothing to report".into()));
    }
    let mut lines = Vec::new();
    for r in reports {
        let m = || r.method.clone();
        lines.extend(r.cells.iter().map(|c| Line::Cell { method: m(), cell: c.clone() }));
        lines.extend(r.folds.iter().map(|s| Line::Fold { method: m(), summary: s.clone() }));
        lines.extend(r.classes.iter().map(|s| Line::Class { method: m(), summary: s.clone() }));
        lines.push(Line::Grand { method: m(), summary: r.grand.clone() });
        lines.extend(r.images.iter().map(|i| Line::Image { method: m(), image: i.clone() }));
    }
    if let Report::Comparison { result, .. } = report {
        lines.push(Line::Comparison(result.clone()));
    }
    lines.push(Line::Footer {
        convention: DICE_CONVENTION.into(),
    });
    let mut text = String::new();
    for l in &lines {
        let json = serde_json::to_string(l).map_err(|e| Error::Eval(format!("report serialization: {e}")))?;
        let _ = writeln!(text, "{json}");
    }
    let table = stem.with_extension("jsonl");
    let chart = stem.with_extension("png");
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(&table, text.as_bytes())?;
    write_chart(reports, &chart)?;
    Ok(ReportFiles { table, chart })
}

/// Parses a table written by [`emit_report`].
pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reports: Vec<DiceReport> = Vec::new();
    let mut comparison = None;
    let slot = |reports: &mut Vec<DiceReport>, method: &str| -> usize {
        if let Some(i) = reports.iter().position(|r| r.method == method) {
            return i;
        }
        reports.push(DiceReport {
            method: method.into(),
            cells: Vec::new(),
            folds: Vec::new(),
            classes: Vec::new(),
            grand: Summary {
                key: String::new(),
                n_cells: 0,
                mean: f64::NAN,
                sd: 0.0,
            },
            images: Vec::new(),
        });
        reports.len() - 1
    };
    for (no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed: Line = serde_json::from_str(line)
            .map_err(|e| Error::Eval(format!("{}:{}: {e}", path.display(), no + 1)))?;
        match parsed {
            Line::Cell { method, cell } => {
                let i = slot(&mut reports, &method);
                reports[i].cells.push(cell)
            }
            Line::Fold { method, summary } => {
                let i = slot(&mut reports, &method);
                reports[i].folds.push(summary)
            }
            Line::Class { method, summary } => {
                let i = slot(&mut reports, &method);
                reports[i].classes.push(summary)
            }
            Line::Grand { method, summary } => {
                let i = slot(&mut reports, &method);
                reports[i].grand = summary
            }
            Line::Image { method, image } => {
                let i = slot(&mut reports, &method);
                reports[i].images.push(image)
            }
            Line::Comparison(c) => comparison = Some(c),
            Line::Footer { .. } => {}
        }
    }
    Ok(match comparison {
        Some(result) => Report::Comparison { result, arms: reports },
        None => Report::Dice(reports),
    })
}

const CHART_H: u32 = 360;
const MARGIN: u32 = 30;
const BAR_W: u32 = 14;
const GROUP_GAP: u32 = 18;
/// Bar colour of the i-th method (cycled).
pub const CHART_PALETTE: [[u8; 3]; 6] = [
    [52, 101, 164],
    [204, 102, 51],
    [78, 154, 6],
    [117, 80, 123],
    [196, 160, 0],
    [85, 87, 83],
];

fn fill(img: &mut image::RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: [u8; 3]) {
    for y in y0.min(y1)..=y0.max(y1).min(img.height() - 1) {
        for x in x0.min(x1)..=x0.max(x1).min(img.width() - 1) {
            img.put_pixel(x, y, image::Rgb(color));
        }
    }
}

fn write_chart(reports: &[DiceReport], path: &Path) -> Result<()> {
    // Groups: every fold, then a gap, every class, then the grand mean.
    let mut groups: Vec<Vec<Option<(f64, f64)>>> = Vec::new();
    let lookup = |pick: &dyn Fn(&DiceReport) -> Option<&Summary>| -> Vec<Option<(f64, f64)>> {
        reports.iter().map(|r| pick(r).map(|s| (s.mean, s.sd))).collect()
    };
    let fold_keys: Vec<String> = reports[0].folds.iter().map(|s| s.key.clone()).collect();
    for k in &fold_keys {
        groups.push(lookup(&|r| r.folds.iter().find(|s| &s.key == k)));
    }
    let n_fold_groups = groups.len();
    for c in Class::FOREGROUND {
        groups.push(lookup(&|r| r.classes.iter().find(|s| s.key == c.name())));
    }
    groups.push(lookup(&|r| Some(&r.grand)));

    let m = reports.len() as u32;
    let group_w = m * BAR_W + GROUP_GAP;
    let width = 2 * MARGIN + groups.len() as u32 * group_w + 2 * GROUP_GAP;
    let mut img = image::RgbImage::from_pixel(width, CHART_H, image::Rgb([255, 255, 255]));
    let plot_h = CHART_H - 2 * MARGIN;
    let y_of = |v: f64| -> u32 { MARGIN + plot_h - (v.clamp(0.0, 1.0) * plot_h as f64).round() as u32 };
    for tick in 0..=4 {
        let y = y_of(tick as f64 / 4.0);
        fill(&mut img, MARGIN, y, width - MARGIN, y, [225, 225, 225]);
    }
    fill(&mut img, MARGIN, MARGIN, MARGIN, MARGIN + plot_h, [0, 0, 0]);
    fill(&mut img, MARGIN, MARGIN + plot_h, width - MARGIN, MARGIN + plot_h, [0, 0, 0]);
    let mut x = MARGIN + GROUP_GAP / 2;
    for (gi, g) in groups.iter().enumerate() {
        if gi == n_fold_groups || gi == groups.len() - 1 {
            x += GROUP_GAP;
        }
        for (mi, v) in g.iter().enumerate() {
            let bx = x + mi as u32 * BAR_W;
            if let Some((mean, sd)) = v.filter(|(mean, _)| mean.is_finite()) {
                fill(&mut img, bx + 1, y_of(mean), bx + BAR_W - 2, MARGIN + plot_h - 1, CHART_PALETTE[mi % CHART_PALETTE.len()]);
                let cx = bx + BAR_W / 2;
                let (top, bottom) = (y_of(mean + sd), y_of(mean - sd));
                fill(&mut img, cx, top, cx, bottom, [0, 0, 0]);
                fill(&mut img, cx - 2, top, cx + 2, top, [0, 0, 0]);
                fill(&mut img, cx - 2, bottom, cx + 2, bottom, [0, 0, 0]);
            }
        }
        x += group_w;
    }
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    write_atomic(path, &bytes)
}
