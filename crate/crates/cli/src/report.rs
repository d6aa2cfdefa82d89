//! `report`: CSV tables and SVG plots from one or more run directories.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use omdet::train::{EvalLog, RunInfo, StepLog};
use omdet::{Error, Result};

use crate::plot::{Chart, Series};
use crate::write_file;

struct Run {
    name: String,
    steps: Vec<StepLog>,
    evals: Vec<EvalLog>,
    vocab_size: usize,
}

fn run_dirs(logdir: &Path) -> Result<Vec<PathBuf>> {
    if logdir.join("metrics.jsonl").is_file() {
        return Ok(vec![logdir.to_path_buf()]);
    }
    let entries = fs::read_dir(logdir).map_err(|e| Error::io(format!("reading {}", logdir.display()), e))?;
    let mut dirs: Vec<PathBuf> =
        entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("metrics.jsonl").is_file()).collect();
    dirs.sort();
    Ok(dirs)
}

fn load_run(dir: &Path) -> Result<Run> {
    let path = dir.join("metrics.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let (mut steps, mut evals) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        if let Ok(s) = serde_json::from_str::<StepLog>(line) {
            steps.push(s);
        } else {
            let e = serde_json::from_str::<EvalLog>(line)
                .map_err(|e| Error::Data(format!("{}:{}: not a metrics record: {e}", path.display(), i + 1)))?;
            evals.push(e);
        }
    }
    let info = dir.join("run.json");
    let vocab: BTreeSet<String> = if info.is_file() {
        let text = fs::read_to_string(&info).map_err(|e| Error::io(format!("reading {}", info.display()), e))?;
        let info: RunInfo =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", info.display())))?;
        info.datasets.into_iter().flat_map(|d| d.vocabulary).collect()
    } else {
        evals.iter().flat_map(|e| &e.eval).flat_map(|(_, r)| r.classes.iter().map(|c| c.name.clone())).collect()
    };
    let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Run { name, steps, evals, vocab_size: vocab.len() })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Everything is parsed before anything is written, so a bad log leaves no
/// partial report behind.
pub fn run(logdir: &Path, out: Option<&Path>) -> Result<()> {
    if !logdir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", logdir.display())));
    }
    let runs: Vec<Run> = run_dirs(logdir)?.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let runs: Vec<Run> = runs.into_iter().filter(|r| !r.steps.is_empty() || !r.evals.is_empty()).collect();
    if runs.is_empty() {
        return Err(Error::Data(format!("no training logs under {}", logdir.display())));
    }
    let out = out.map_or_else(|| logdir.join("report"), Path::to_path_buf);

    let mut loss = String::from("run,step,epoch,lr,grad_norm,total,cls,l1,giou\n");
    for r in &runs {
        for s in &r.steps {
            let l = &s.loss;
            loss.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                csv_field(&r.name),
                s.step,
                s.epoch,
                s.lr,
                s.grad_norm,
                l.total,
                l.cls,
                l.l1,
                l.giou
            ));
        }
    }
    let mut eval = String::from("run,step,dataset,class,ap,ap50,ap75,recall50\n");
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in &runs {
        for e in &r.evals {
            for (ds, rep) in &e.eval {
                let prefix = format!("{},{},{}", csv_field(&r.name), e.step, csv_field(ds));
                eval.push_str(&format!("{prefix},,{},{},{},{}\n", rep.ap, rep.ap50, rep.ap75, rep.recall50));
                for c in &rep.classes {
                    eval.push_str(&format!(
                        "{prefix},{},{},{},{},{}\n",
                        csv_field(&c.name),
                        cell(c.ap),
                        cell(c.ap50),
                        cell(c.ap75),
                        cell(c.recall50)
                    ));
                }
            }
        }
    }
    // final evaluation of each run, averaged over its datasets
    let mut vocab = String::from("run,vocab_size,step,ap,ap50\n");
    let mut points: Vec<(f64, f64, f64)> = Vec::new();
    for r in &runs {
        let Some(last) = r.evals.last() else { continue };
        let ap = mean(last.eval.iter().map(|(_, rep)| rep.ap));
        let ap50 = mean(last.eval.iter().map(|(_, rep)| rep.ap50));
        vocab.push_str(&format!("{},{},{},{ap},{ap50}\n", csv_field(&r.name), r.vocab_size, last.step));
        points.push((r.vocab_size as f64, ap, ap50));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));

    let loss_svg = Chart { title: "Training loss", x_label: "step", y_label: "total loss", log_x: false, log_y: true, markers: false }
        .render(
            &runs
                .iter()
                .map(|r| Series { name: r.name.clone(), points: r.steps.iter().map(|s| (s.step as f64, s.loss.total)).collect() })
                .collect::<Vec<_>>(),
        );
    let vocab_svg =
        Chart { title: "AP against vocabulary size", x_label: "vocabulary size", y_label: "AP", log_x: true, log_y: false, markers: true }
            .render(&[
                Series { name: "AP".into(), points: points.iter().map(|p| (p.0, p.1)).collect() },
                Series { name: "AP50".into(), points: points.iter().map(|p| (p.0, p.2)).collect() },
            ]);

    write_file(&out.join("loss.csv"), loss)?;
    write_file(&out.join("eval.csv"), eval)?;
    write_file(&out.join("vocab_ap.csv"), vocab)?;
    write_file(&out.join("loss.svg"), loss_svg)?;
    write_file(&out.join("vocab_ap.svg"), vocab_svg)?;
    println!("{} runs -> {}", runs.len(), out.display());
    Ok(())
}
