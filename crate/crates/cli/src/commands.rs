//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sbdm_core::bridge::BridgeSchedule;
use sbdm_core::cohort::{
    load_cohort, save_cohort, split_cohort, Cohort, Condition, Diagnosis, FieldKind, Sex, VertexField,
};
use sbdm_core::evalx::{
    evaluate_linear, evaluate_model, evaluate_no_change, export_error_map, EvalReport, GroupBy, LinearBaseline,
};
use sbdm_core::icosphere::build_icosphere;
use sbdm_core::sampler::{predict_cth, predict_delta, trajectory, Model, SampleConfig};
use sbdm_core::selfcheck;
use sbdm_core::trainer::{Checkpoint, TrainConfig, Trainer};
use sbdm_core::Error;

use crate::config::{RunConfig, RESOLVED_NAME};

fn log_config(what: &str, value: &impl Serialize) {
    eprintln!("[sbdm] {what}: {}", serde_json::to_string(value).expect("serialisable"));
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn mesh_info(level: u32) -> Result<()> {
    let mesh = build_icosphere(level)?;
    println!(
        "vertices={} faces={} edges={}",
        mesh.num_vertices(),
        mesh.faces().len(),
        mesh.edges().len()
    );
    Ok(())
}

pub fn mesh_export(level: u32, out: &Path) -> Result<()> {
    let mesh = build_icosphere(level)?;
    write_text(out, &mesh.to_obj())?;
    println!("{}", out.display());
    Ok(())
}

pub fn data_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    log_config("synthetic", &cfg.synthetic);
    let cohort = sbdm_core::cohort::generate_synthetic_cohort(&cfg.synthetic)?;
    let manifest = save_cohort(&cohort, out)?;
    println!("{}", manifest.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitIds {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn data_split(manifest: &Path, fractions: [f64; 3], seed: u64, out: &Path) -> Result<()> {
    log_config(
        "split",
        &json!({ "manifest": manifest, "fractions": fractions, "seed": seed }),
    );
    let cohort = load_cohort(manifest)?;
    let s = split_cohort(&cohort, fractions, seed)?;
    let ids = |c: &Cohort| c.subject_ids().into_iter().map(String::from).collect();
    let doc = SplitIds {
        seed,
        fractions,
        train: ids(&s.train),
        val: ids(&s.val),
        test: ids(&s.test),
    };
    write_text(out, &serde_json::to_string_pretty(&doc)?)?;
    println!(
        "train={} val={} test={}",
        doc.train.len(),
        doc.val.len(),
        doc.test.len()
    );
    Ok(())
}

pub fn data_inspect(manifest: &Path) -> Result<()> {
    let c = load_cohort(manifest)?;
    let valid = c.mask.iter().filter(|&&m| m).count();
    println!("level={} vertices={} valid={}", c.level, c.mask.len(), valid);
    println!("subjects={} scans={}", c.subjects.len(), c.num_scans());
    let mut paths: BTreeMap<String, usize> = BTreeMap::new();
    for s in &c.subjects {
        let (a, b) = s.dx_path();
        *paths.entry(format!("{a}->{b}")).or_default() += 1;
    }
    for (p, n) in paths {
        println!("path {p}: {n}");
    }
    let mut by_t: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in &c.subjects {
        for (j, v) in s.visits.iter().enumerate() {
            let d = s.delta(j);
            let mean = d.iter().zip(&c.mask).filter(|(_, &m)| m).map(|(x, _)| x).sum::<f64>() / valid as f64;
            let e = by_t.entry(format!("{}", v.t_months)).or_default();
            e.0 += mean;
            e.1 += 1;
        }
    }
    for (t, (sum, n)) in by_t {
        println!("t={t} scans={n} mean_change={:.4}", sum / n as f64);
    }
    Ok(())
}

pub struct TrainArgs {
    pub resume: Option<PathBuf>,
}

pub fn train(cfg: &RunConfig, args: TrainArgs) -> Result<()> {
    log_config("config", cfg);
    let cohort = cfg.cohort()?;
    let splits = cfg.splits(&cohort)?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join(RESOLVED_NAME), &cfg.to_json())?;

    let mut trainer = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::read(p)?;
            // Only the epoch target may change on resume.
            let same = TrainConfig {
                epochs: cfg.train.epochs,
                ..ck.config.clone()
            };
            if same != cfg.train {
                bail!(Error::Config(format!(
                    "checkpoint {} was trained with a different configuration",
                    p.display()
                )));
            }
            let mut t = ck.resume()?;
            t.config.epochs = cfg.train.epochs;
            t
        }
        None => Trainer::new(cfg.train.clone(), &cohort.mask)?,
    };
    trainer.workers = cfg.workers;
    eprintln!(
        "[sbdm] train={} val={} test={} subjects, {} parameters",
        splits.train.subjects.len(),
        splits.val.subjects.len(),
        splits.test.subjects.len(),
        trainer.params.num_scalars()
    );
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(args.resume.is_some())
            .write(true)
            .truncate(args.resume.is_none())
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?,
    );
    let ck_path = out.join("checkpoint.sbdm");
    let start = Instant::now();
    trainer.train(&splits.train, &splits.val, |t, rec| {
        let line = serde_json::to_string(rec).expect("serialisable");
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))?;
        eprintln!(
            "[sbdm] epoch {:>4} train {:.6} val {:.6} lr {:.2e} ({:.0}s)",
            rec.epoch,
            rec.train_loss,
            rec.val_loss,
            rec.lr,
            start.elapsed().as_secs_f64()
        );
        if rec.epoch % 10 == 0 || rec.epoch == t.config.epochs {
            Checkpoint::from_trainer(t).write(&ck_path)?;
        }
        Ok(())
    })?;
    Checkpoint::from_trainer(&trainer).write(&ck_path)?;
    println!("{}", ck_path.display());
    Ok(())
}

struct Loaded {
    model: Model,
    sched: BridgeSchedule,
    mask: Vec<bool>,
}

fn load_model(path: &Path) -> Result<Loaded> {
    let ck = Checkpoint::read(path)?;
    Ok(Loaded {
        sched: BridgeSchedule::new(ck.config.horizon)?,
        model: ck.model()?,
        mask: ck.mask,
    })
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub baseline: PathBuf,
    pub t_months: f64,
    pub age: f64,
    pub sex: Sex,
    pub dx0: Diagnosis,
    pub dxt: Option<Diagnosis>,
    pub out: Option<PathBuf>,
}

pub fn predict(sample: &SampleConfig, a: PredictArgs) -> Result<()> {
    log_config("sample", sample);
    let Loaded { model, sched, mask } = load_model(&a.checkpoint)?;
    let base = VertexField::read(&a.baseline)?;
    if base.kind() != FieldKind::Thickness {
        bail!(Error::Config(format!(
            "{} is not a thickness field",
            a.baseline.display()
        )));
    }
    if base.mask() != mask {
        bail!(Error::Config("baseline mask differs from the model mask".into()));
    }
    if !(a.t_months > 0.0) {
        bail!(Error::range("t", a.t_months, "> 0 months"));
    }
    let cond = Condition {
        age: a.age,
        sex: a.sex,
        dx0: a.dx0,
        dxt: a.dxt,
    };
    let tau0 = base.to_f64();
    let delta = predict_delta(&model, &sched, sample, &tau0, base.mask(), a.t_months, &cond, "predict")?;
    let field = predict_cth(&base, &delta)?;
    if let Some(out) = &a.out {
        create_parent(out)?;
        field.write(out)?;
    }
    println!(
        "{}",
        json!({ "t": a.t_months, "dxt": a.dxt, "mean_cth_unmasked": field.mean_valid(), "mean_change": field.mean_valid() - base.mean_valid() })
    );
    Ok(())
}

pub struct TrajectoryArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub subjects: Vec<String>,
    pub times: Vec<f64>,
    pub target_dx: Option<Diagnosis>,
    pub out: Option<PathBuf>,
}

pub fn trajectories(sample: &SampleConfig, a: TrajectoryArgs) -> Result<()> {
    log_config("sample", sample);
    let Loaded { model, sched, mask } = load_model(&a.checkpoint)?;
    let cohort = load_cohort(&a.manifest)?;
    if cohort.mask != mask {
        bail!(Error::Config("cohort mask differs from the model mask".into()));
    }
    let chosen: Vec<_> = if a.subjects.is_empty() {
        cohort.subjects.iter().collect()
    } else {
        a.subjects
            .iter()
            .map(|id| {
                cohort
                    .subjects
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::Config(format!("unknown subject {id}")))
            })
            .collect::<Result<_, _>>()?
    };
    let stdout = std::io::stdout();
    let mut lines = stdout.lock();
    for s in chosen {
        let points = trajectory(&model, &sched, sample, s, &a.times, a.target_dx)?;
        for p in points {
            if let Some(dir) = &a.out {
                let tag = p.target_dx.map_or("factual".to_string(), |d| d.to_string());
                let path = dir.join(format!("{}_t{}_{}.sbdf", s.id, p.t_months, tag));
                create_parent(&path)?;
                p.cth.write(&path)?;
            }
            let line = json!({
                "subject": s.id,
                "t": p.t_months,
                "target_dx": p.target_dx,
                "mean_cth_unmasked": p.mean_cth,
            });
            writeln!(lines, "{line}")?;
        }
    }
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub split: String,
    pub baselines: Vec<String>,
    pub group_by: GroupBy,
    pub out: Option<PathBuf>,
}

pub fn eval(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    log_config("config", cfg);
    let Loaded { model, sched, mask } = load_model(&a.checkpoint)?;
    let cohort = cfg.cohort()?;
    if cohort.mask != mask {
        bail!(Error::Config("cohort mask differs from the model mask".into()));
    }
    let splits = cfg.splits(&cohort)?;
    let part = match a.split.as_str() {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => bail!(Error::range("split", other, "train, val or test")),
    };
    let start = Instant::now();
    let ev = evaluate_model(&model, &sched, &cfg.sample, part)?;
    eprintln!(
        "[sbdm] sampled {} scans in {:.1}s",
        ev.scans.len(),
        start.elapsed().as_secs_f64()
    );
    let mut baselines = Vec::new();
    let mut warnings = Vec::new();
    for b in &a.baselines {
        match b.as_str() {
            "zero" => baselines.push(("zero".to_string(), evaluate_no_change(part)?)),
            "linreg" => {
                let lr = LinearBaseline::fit(&splits.train)?;
                if lr.underdetermined {
                    warnings.push("linear baseline is underdetermined; using the minimum-norm solution".to_string());
                }
                baselines.push(("linreg".to_string(), evaluate_linear(&lr, part)?));
            }
            other => bail!(Error::range("baseline", other, "linreg or zero")),
        }
    }
    let mut report = EvalReport::build(ev, baselines, a.group_by)?;
    report.warnings = warnings;
    for w in &report.warnings {
        eprintln!("[sbdm] warning: {w}");
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(format!("eval_{}", a.split)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("report.json"), &report.to_json()?)?;
    export_error_map(&report.error_map, &cohort.mask, cohort.level, &out.join("error_map"))?;

    let line = |name: &str, agg: &sbdm_core::evalx::Aggregate| {
        let groups: Vec<String> = agg
            .groups
            .iter()
            .map(|(k, s)| format!("{k} {:.4}±{:.4} (n={})", s.mean, s.sd, s.n))
            .collect();
        println!(
            "{name:<8} all {:.4}±{:.4} (n={}) | {}",
            agg.all.mean,
            agg.all.sd,
            agg.all.n,
            groups.join(" | ")
        );
    };
    line("model", &report.model.aggregate);
    for b in &report.baselines {
        line(&b.name, &b.aggregate);
    }
    for c in &report.comparisons {
        match &c.wilcoxon {
            Some(w) => println!(
                "wilcoxon model vs {}: p={:.3e} (n={}, {:?})",
                c.baseline, w.p_value, w.n, w.method
            ),
            None => println!(
                "wilcoxon model vs {}: {}",
                c.baseline,
                c.note.as_deref().unwrap_or("undefined")
            ),
        }
    }
    println!("{}", out.join("report.json").display());
    Ok(())
}

/// Returns whether every check passed.
pub fn selfcheck(seed: u64) -> Result<bool> {
    eprintln!("[sbdm] selfcheck seed={seed}");
    let checks = selfcheck::run_all(seed);
    for c in &checks {
        println!(
            "[{}] {:<24} {:.3e} (tol {:.0e}) {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance,
            c.detail
        );
    }
    Ok(checks.iter().all(|c| c.passed))
}
