//! The `report` command: gather `eval.json` files from run directories,
//! group them by run id, and emit mean/std tables to stdout, a markdown
//! report, and a bar chart.

use clap::Parser;
use slotkit::SlotError;
use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use slotkit::evals::EvalSummary;
use crate::plots::{bar_chart, Bar};

#[derive(Parser)]
pub struct Args {
    /// Run directories (or a parent directory containing them).
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Where to write report.md and plots (default: current directory).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

struct Group {
    ious: Vec<f64>,
    aps: Vec<f64>,
    seeds: Vec<u64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn collect(args: &Args) -> anyhow::Result<BTreeMap<String, Group>> {
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    let mut dirs = Vec::new();
    for p in &args.runs {
        if p.join("eval.json").exists() {
            dirs.push(p.clone());
        } else if p.is_dir() {
            // parent directory: take every child with an eval.json
            for entry in fs::read_dir(p)? {
                let child = entry?.path();
                if child.join("eval.json").exists() {
                    dirs.push(child);
                }
            }
        }
    }
    if dirs.is_empty() {
        return Err(SlotError::Config("no run directories with eval.json found".into()).into());
    }
    for dir in dirs {
        let text = fs::read_to_string(dir.join("eval.json"))?;
        let s: EvalSummary = serde_json::from_str(&text)?;
        let g = groups.entry(s.run_id.clone()).or_insert(Group {
            ious: Vec::new(),
            aps: Vec::new(),
            seeds: Vec::new(),
        });
        if let Some(iou) = s.iou {
            g.ious.push(iou);
        }
        g.aps.push(s.ap);
        g.seeds.push(s.seed);
    }
    Ok(groups)
}

pub fn exec(args: Args) -> anyhow::Result<()> {
    let groups = collect(&args)?;
    fs::create_dir_all(&args.out)?;

    let mut md = String::from("# Evaluation report\n\n");
    md.push_str("| run | seeds | IoU mean | IoU std | AP mean | AP std |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    println!("{:<24} {:>5} {:>10} {:>8} {:>10} {:>8}", "run", "seeds", "iou", "std", "ap", "std");

    let mut iou_bars = Vec::new();
    let mut ap_bars = Vec::new();
    for (run_id, g) in &groups {
        let (ap_mean, ap_std) = mean_std(&g.aps);
        let (iou_txt, iou_cells) = if g.ious.is_empty() {
            ("         -        -".to_string(), " - | - ".to_string())
        } else {
            let (m, s) = mean_std(&g.ious);
            iou_bars.push(Bar { value: m, err: s });
            (format!("{m:>10.4} {s:>8.4}"), format!(" {m:.4} | {s:.4} "))
        };
        ap_bars.push(Bar { value: ap_mean, err: ap_std });
        println!(
            "{run_id:<24} {:>5} {iou_txt} {ap_mean:>10.4} {ap_std:>8.4}",
            g.seeds.len()
        );
        md.push_str(&format!(
            "| {run_id} | {} |{iou_cells}| {ap_mean:.4} | {ap_std:.4} |\n",
            g.seeds.len()
        ));
    }

    md.push_str("\nBars in iou.png / ap.png follow the table's row order.\n");
    if !iou_bars.is_empty() {
        bar_chart(&iou_bars, &args.out.join("iou.png"))?;
    }
    bar_chart(&ap_bars, &args.out.join("ap.png"))?;
    fs::write(args.out.join("report.md"), md)?;
    println!("wrote {}", args.out.join("report.md").display());
    Ok(())
}
