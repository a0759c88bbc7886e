//! Render persisted run records into tables and a plot.
//!
//! The reporter only reads `result.txt` / `report.txt` records from run
//! directories; it never touches models or recomputes metrics, so
//! reports can be regenerated without retraining.

use anyhow::{bail, Context, Result};
use dfgr_core::trainer::{load_task_result, TaskResult};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// One loaded run: its label (ablation/method id) and per-repeat task records.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub label: String,
    pub repeats: Vec<Vec<TaskResult>>,
}

fn read_report_field(dir: &Path, key: &str) -> Option<String> {
    let text = fs::read_to_string(dir.join("report.txt")).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .map(|v| v.to_string())
}

/// Load a run directory: `repeat_k/task_t/result.txt` records plus the
/// run-level report for the label.
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let label = read_report_field(dir, "label")
        .or_else(|| read_report_field(dir, "ablation"))
        .unwrap_or_else(|| {
            dir.file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_else(|| "run".into())
        });
    let mut repeats = Vec::new();
    for repeat in 0.. {
        let rdir = dir.join(format!("repeat_{repeat}"));
        if !rdir.exists() {
            break;
        }
        let mut tasks = Vec::new();
        for task in 0.. {
            let record = rdir.join(format!("task_{task}")).join("result.txt");
            if !record.exists() {
                break;
            }
            tasks.push(load_task_result(&record).with_context(|| {
                format!("reading {}", record.display())
            })?);
        }
        if tasks.is_empty() {
            bail!("run {} repeat {repeat} has no task records", dir.display());
        }
        repeats.push(tasks);
    }
    if repeats.is_empty() {
        bail!("run {} has no repeat directories", dir.display());
    }
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        label,
        repeats,
    })
}

/// Load many runs, skipping unreadable ones with a warning on stderr.
pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<LoadedRun>> {
    let mut runs = Vec::new();
    for dir in dirs {
        match load_run(dir) {
            Ok(run) => runs.push(run),
            Err(e) => eprintln!("warning: skipping {}: {e}", dir.display()),
        }
    }
    if runs.is_empty() {
        bail!("no readable runs");
    }
    Ok(runs)
}

fn group_by_label(runs: &[LoadedRun]) -> BTreeMap<String, Vec<&LoadedRun>> {
    let mut groups: BTreeMap<String, Vec<&LoadedRun>> = BTreeMap::new();
    for run in runs {
        groups.entry(run.label.clone()).or_default().push(run);
    }
    groups
}

/// Class rows ordered by first task appearance, then label.
fn class_rows(tasks: &[TaskResult]) -> Vec<u8> {
    let mut seen = Vec::new();
    for task in tasks {
        let mut new: Vec<u8> = task
            .per_class_accuracy
            .keys()
            .copied()
            .filter(|c| !seen.contains(c))
            .collect();
        new.sort_unstable();
        seen.extend(new);
    }
    seen
}

/// Per-class-by-task accuracy grid (dashes for classes not yet seen),
/// averaged over every repeat of every run in the group.
pub fn per_class_table(group: &[&LoadedRun]) -> String {
    let num_tasks = group
        .iter()
        .flat_map(|r| r.repeats.iter().map(|t| t.len()))
        .max()
        .unwrap_or(0);
    // mean per (class, task) across repeats
    let mut acc: BTreeMap<(u8, usize), (f64, usize)> = BTreeMap::new();
    let mut row_order: Vec<u8> = Vec::new();
    for run in group {
        for tasks in &run.repeats {
            for c in class_rows(tasks) {
                if !row_order.contains(&c) {
                    row_order.push(c);
                }
            }
            for (t, task) in tasks.iter().enumerate() {
                for (&c, &a) in &task.per_class_accuracy {
                    let e = acc.entry((c, t)).or_insert((0.0, 0));
                    e.0 += a;
                    e.1 += 1;
                }
            }
        }
    }
    let mut out = String::from("class");
    for t in 0..num_tasks {
        let _ = write!(out, "\ttask_{}", t + 1);
    }
    out.push('\n');
    for &c in &row_order {
        let _ = write!(out, "{c}");
        for t in 0..num_tasks {
            match acc.get(&(c, t)) {
                Some((sum, n)) => {
                    let _ = write!(out, "\t{:.1}", 100.0 * sum / *n as f64);
                }
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    // average row over the classes present per task
    out.push_str("average");
    for t in 0..num_tasks {
        let vals: Vec<f64> = row_order
            .iter()
            .filter_map(|&c| acc.get(&(c, t)).map(|(s, n)| s / *n as f64))
            .collect();
        if vals.is_empty() {
            out.push_str("\t-");
        } else {
            let _ = write!(out, "\t{:.1}", 100.0 * vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    out.push('\n');
    out
}

/// Final accuracy (mean over repeats and runs) and mean runtime per label.
pub fn ablation_table(runs: &[LoadedRun]) -> String {
    let mut out = String::from("label\tfinal_accuracy\truns\tavg_runtime_secs\n");
    for (label, group) in group_by_label(runs) {
        let mut finals = Vec::new();
        let mut runtimes = Vec::new();
        for run in &group {
            for tasks in &run.repeats {
                finals.push(tasks.last().unwrap().average_accuracy);
                runtimes.push(tasks.iter().map(|t| t.wall_time.as_secs_f64()).sum::<f64>());
            }
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        let runtime = runtimes.iter().sum::<f64>() / runtimes.len() as f64;
        let _ = writeln!(
            out,
            "{label}\t{:.1}\t{}\t{:.1}",
            100.0 * mean,
            finals.len(),
            runtime
        );
    }
    out
}

// ------------------------------------------------------------------ plotting

const GLYPHS: [(char, [u8; 7]); 13] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b001, 0b111, 0b100, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b001, 0b111, 0b001, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b101, 0b111, 0b001, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b100, 0b111, 0b001, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b100, 0b111, 0b101, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b001, 0b010, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b101, 0b111, 0b101, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b101, 0b111, 0b001, 0b001, 0b111]),
    ('.', [0b000, 0b000, 0b000, 0b000, 0b000, 0b000, 0b010]),
    ('t', [0b010, 0b010, 0b111, 0b010, 0b010, 0b010, 0b011]),
    (' ', [0; 7]),
];

fn draw_text(img: &mut image::RgbImage, x: u32, y: u32, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some((_, rows)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if row & (0b100 >> dx) != 0 {
                        let (px, py) = (cx + dx, y + dy as u32);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, image::Rgb(color));
                        }
                    }
                }
            }
        }
        cx += 4;
    }
}

fn draw_line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
}

const SERIES_COLORS: [[u8; 3]; 8] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
    [188, 189, 34],
    [140, 86, 75],
];

/// Line plot of average accuracy vs. task, one series per label. The
/// legend (label -> color) goes into an adjacent text file because the
/// bitmap font only covers digits.
pub fn accuracy_plot(runs: &[LoadedRun], png_path: &Path, legend_path: &Path) -> Result<()> {
    let groups = group_by_label(runs);
    let (w, h) = (640u32, 440u32);
    let (left, right, top, bottom) = (50.0, 20.0, 20.0, 40.0);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));

    let num_tasks = runs
        .iter()
        .flat_map(|r| r.repeats.iter().map(|t| t.len()))
        .max()
        .unwrap_or(1);
    let plot_w = w as f64 - left - right;
    let plot_h = h as f64 - top - bottom;
    let x_of = |task: usize| left + plot_w * task as f64 / (num_tasks.max(2) - 1) as f64;
    let y_of = |acc: f64| top + plot_h * (1.0 - acc);

    // axes and ticks
    let axis = [0u8, 0, 0];
    draw_line(&mut img, (left, top), (left, top + plot_h), axis);
    draw_line(&mut img, (left, top + plot_h), (left + plot_w, top + plot_h), axis);
    for i in 0..=10 {
        let yy = y_of(i as f64 / 10.0);
        draw_line(&mut img, (left - 4.0, yy), (left, yy), axis);
        if i % 2 == 0 {
            draw_text(
                &mut img,
                (left - 24.0) as u32,
                (yy - 3.0) as u32,
                &format!("0.{}", i),
                axis,
            );
        }
        draw_line(&mut img, (left, yy), (left + plot_w, yy), [230, 230, 230]);
    }
    for t in 0..num_tasks {
        let xx = x_of(t);
        draw_line(&mut img, (xx, top + plot_h), (xx, top + plot_h + 4.0), axis);
        draw_text(
            &mut img,
            (xx - 6.0) as u32,
            (top + plot_h + 8.0) as u32,
            &format!("t{}", t + 1),
            axis,
        );
    }

    let mut legend = String::from("series\tcolor_rgb\n");
    for (gi, (label, group)) in groups.iter().enumerate() {
        let color = SERIES_COLORS[gi % SERIES_COLORS.len()];
        // mean accuracy per task over all repeats in the group
        let mut sums: Vec<(f64, usize)> = vec![(0.0, 0); num_tasks];
        for run in group {
            for tasks in &run.repeats {
                for (t, task) in tasks.iter().enumerate() {
                    sums[t].0 += task.average_accuracy;
                    sums[t].1 += 1;
                }
            }
        }
        let means: Vec<Option<f64>> = sums
            .iter()
            .map(|(s, n)| (*n > 0).then(|| s / *n as f64))
            .collect();
        let mut prev: Option<(f64, f64)> = None;
        for (t, mean) in means.iter().enumerate() {
            if let Some(acc) = mean {
                let p = (x_of(t), y_of(*acc));
                for dx in -1i64..=1 {
                    for dy in -1i64..=1 {
                        let (px, py) = (p.0 + dx as f64, p.1 + dy as f64);
                        if px >= 0.0 && py >= 0.0 {
                            img.put_pixel(px as u32, py as u32, image::Rgb(color));
                        }
                    }
                }
                if let Some(q) = prev {
                    draw_line(&mut img, q, p, color);
                }
                prev = Some(p);
            }
        }
        let _ = writeln!(legend, "{label}\t{},{},{}", color[0], color[1], color[2]);
    }

    if let Some(parent) = png_path.parent() {
        fs::create_dir_all(parent)?;
    }
    img.save(png_path)
        .with_context(|| format!("writing {}", png_path.display()))?;
    fs::write(legend_path, legend)?;
    Ok(())
}

/// Write every report artifact for the given run directories.
pub fn write_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<()> {
    let runs = load_runs(run_dirs)?;
    fs::create_dir_all(out_dir)?;
    for (label, group) in group_by_label(&runs) {
        let table = per_class_table(&group);
        fs::write(out_dir.join(format!("per_class_{label}.tsv")), table)?;
    }
    fs::write(out_dir.join("ablation_grid.tsv"), ablation_table(&runs))?;
    accuracy_plot(
        &runs,
        &out_dir.join("accuracy_vs_task.png"),
        &out_dir.join("accuracy_vs_task_legend.txt"),
    )?;
    Ok(())
}
