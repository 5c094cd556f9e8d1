use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use collossl::data::{normalize, sample_label_fraction, save_dataset, save_raw, MultiDeviceDataset, NormStats};
use collossl::eval::{
    export_embeddings, fingerprint, run_logo_cv, run_robustness, sweep_label_fractions, ExperimentReport, RobustnessSource,
};
use collossl::mmd::{pairwise_mmd, to_f64};
use collossl::nn::checkpoint::{self, ModelKind};
use collossl::rng;
use collossl::sampling::NegativeSampling;
use collossl::selection::{select_from_scores, SelectionStrategy};
use collossl::synth::{inject_heterogeneity, inject_misalignment, inject_missing, segment_config, Perturbation, PerturbationSpec};
use collossl::train::{finetune, pretrain_collossl, train_baseline, Convergence, Method, TrainConfig, TrainLog};
use collossl::{Error, ErrorCategory, Result};
use serde::Serialize;

use crate::config::{DataSource, RunConfig};
use crate::{category_name, Cli, Command, Global, PerturbationKind, OUTPUT_ROOT_ENV};

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::SynthGen => "synth-gen",
        Command::Inject(_) => "inject",
        Command::MmdReport { .. } => "mmd-report",
        Command::Pretrain => "pretrain",
        Command::Finetune { .. } => "finetune",
        Command::Baseline { .. } => "baseline",
        Command::Evaluate { .. } => "evaluate",
        Command::Sweep { .. } => "sweep",
        Command::Ablate(_) => "ablate",
        Command::Robustness(_) => "robustness",
        Command::ExportEmbeddings { .. } => "export-embeddings",
    }
}

fn apply_flags(cfg: &mut RunConfig, g: &Global) {
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    cfg.apply_seed();
    if let Some(p) = &g.data {
        cfg.data.source = DataSource::Dir;
        cfg.data.path = Some(p.clone());
    }
    if let Some(a) = &g.anchor {
        cfg.train.anchor_id = a.clone();
    }
    if let Some(f) = g.label_fraction {
        cfg.train.label_fraction = f;
    }
    if let Some(e) = g.max_epochs {
        cfg.train.max_epochs = e;
        cfg.train.finetune_max_epochs = e;
    }
    if let Some(o) = &g.output {
        cfg.output_dir = Some(o.clone());
    }
}

/// Output directory of one invocation and the files written into it.
struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn prepare(dir: PathBuf, overwrite: bool) -> Result<Self> {
        if let Ok(mut entries) = fs::read_dir(&dir) {
            if entries.next().is_some() && !overwrite {
                return Err(Error::Config(format!("output directory {} is not empty; pass --overwrite to replace its files", dir.display())));
            }
        }
        fs::create_dir_all(&dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(value).expect("serializable output"))
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    command: &'a str,
    status: &'a str,
    error: Option<serde_json::Value>,
    config_fingerprint: String,
    config: &'a RunConfig,
    runtime_seconds: f64,
    outputs: &'a [String],
    version: &'a str,
}

pub fn run(cli: &Cli) -> Result<()> {
    let name = command_name(&cli.command);
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    apply_flags(&mut cfg, &cli.global);
    let dir = match &cfg.output_dir {
        Some(d) => d.clone(),
        None => std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(name),
    };
    let mut out = Output::prepare(dir, cli.global.overwrite)?;
    let started = Instant::now();
    let result = dispatch(&cli.command, &mut cfg, &mut out);
    let error = result.as_ref().err().map(|e: &Error| {
        let cat: ErrorCategory = e.category();
        serde_json::json!({ "category": category_name(cat), "message": e.to_string() })
    });
    let files = out.files.clone();
    let summary = RunSummary {
        command: name,
        status: if result.is_ok() { "ok" } else { "error" },
        error,
        config_fingerprint: fingerprint(&RunConfig { output_dir: None, ..cfg.clone() }),
        config: &cfg,
        runtime_seconds: started.elapsed().as_secs_f64(),
        outputs: &files,
        version: env!("CARGO_PKG_VERSION"),
    };
    out.json("run.json", &summary)?;
    result
}

/// Fills in the first device as anchor when none is configured.
fn resolve_anchor(cfg: &mut RunConfig, ds: &MultiDeviceDataset) -> Result<()> {
    if cfg.train.anchor_id.is_empty() {
        cfg.train.anchor_id = ds.devices()[0].device_id.clone();
        log::info!("anchor device defaults to {}", cfg.train.anchor_id);
    }
    ds.device_index(&cfg.train.anchor_id).map(|_| ())
}

/// Dataset normalized with its own statistics, which are saved alongside.
fn normalized(cfg: &mut RunConfig, out: &mut Output) -> Result<(MultiDeviceDataset, NormStats)> {
    let ds = cfg.load_dataset()?;
    resolve_anchor(cfg, &ds)?;
    let (n, stats) = normalize(&ds, None)?;
    out.json("norm_stats.json", &stats)?;
    Ok((n, stats))
}

fn write_log(out: &mut Output, log: &TrainLog) -> Result<()> {
    let path = out.path(&format!("{}_log.csv", log.phase));
    log.write_csv(&path)?;
    if !log.selections.is_empty() {
        let path = out.path(&format!("{}_selections.csv", log.phase));
        log.write_selection_csv(&path)?;
    }
    Ok(())
}

fn report_files(out: &mut Output, stem: &str, r: &ExperimentReport) -> Result<()> {
    out.write(&format!("{stem}.json"), r.to_json())?;
    out.write(&format!("{stem}.csv"), r.to_csv())
}

fn parse_method(s: &str) -> Result<Method> {
    Method::parse(s)
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| Error::Config(format!("unknown {what} '{s}'")))
}

fn dispatch(command: &Command, cfg: &mut RunConfig, out: &mut Output) -> Result<()> {
    match command {
        Command::SynthGen => {
            let raw = collossl::synth::generate_raw(&cfg.synth)?;
            let path = out.path("dataset");
            save_raw(&raw, &path, Some(&segment_config(&cfg.synth)))?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Inject(a) => inject(a, cfg, out),
        Command::MmdReport { max_windows } => mmd_report(*max_windows, cfg, out),
        Command::Pretrain => {
            let (ds, _) = normalized(cfg, out)?;
            cfg.train.validate()?;
            let (extractor, log) = pretrain_collossl(&ds.unlabeled(), &cfg.train)?;
            write_log(out, &log)?;
            let path = out.path("extractor.ckpt");
            checkpoint::save_extractor(&path, &extractor, cfg.train.seed, log.final_step)?;
            if log.convergence == Convergence::NonFiniteLoss {
                return Err(Error::Numerical(format!(
                    "pretraining aborted ({}); last good state saved to {}",
                    log.abort_reason.as_deref().unwrap_or("non-finite loss"),
                    path.display()
                )));
            }
            println!("{}", path.display());
            Ok(())
        }
        Command::Finetune { checkpoint: ckpt } => {
            let (extractor, _) = checkpoint::load_extractor(ckpt)?;
            let (ds, _) = normalized(cfg, out)?;
            if extractor.in_channels() != ds.channels() {
                return Err(Error::Config(format!("checkpoint expects {} channels, data has {}", extractor.in_channels(), ds.channels())));
            }
            let seed = rng::derive(cfg.train.seed, &[rng::tag("labels")]);
            let subset = sample_label_fraction(&ds, &cfg.train.anchor_id, cfg.train.label_fraction, seed)?;
            let (model, log) = finetune(extractor, &ds, &subset, &cfg.train)?;
            log.ensure_finite()?;
            write_log(out, &log)?;
            let path = out.path("classifier.ckpt");
            checkpoint::save_classifier(&path, &model, cfg.train.seed, log.final_step)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Baseline { kind } => {
            let method = parse_method(kind)?;
            let (ds, _) = normalized(cfg, out)?;
            let trained = train_baseline(method, &ds, &cfg.train)?;
            for log in &trained.logs {
                log.ensure_finite()?;
                write_log(out, log)?;
            }
            let path = out.path("classifier.ckpt");
            checkpoint::save_classifier(&path, &trained.classifier, cfg.train.seed, 0)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Evaluate { method } => {
            let method = parse_method(method.as_deref().or(cfg.method.as_deref()).unwrap_or("collossl"))?;
            let ds = cfg.load_dataset()?;
            resolve_anchor(cfg, &ds)?;
            let r = run_logo_cv(&ds, method, &cfg.eval_config())?;
            report_files(out, "report", &r)?;
            println!("{}: mean macro-F1 {:.4} ± {:.4}", r.method, r.mean_f1, r.std_f1);
            Ok(())
        }
        Command::Sweep { fractions, methods } => {
            if let Some(f) = fractions {
                cfg.sweep.fractions = f.clone();
            }
            if let Some(m) = methods {
                cfg.sweep.methods = m.clone();
            }
            let methods = cfg.sweep.methods.iter().map(|m| parse_method(m)).collect::<Result<Vec<_>>>()?;
            let ds = cfg.load_dataset()?;
            resolve_anchor(cfg, &ds)?;
            let table = sweep_label_fractions(&ds, &methods, &cfg.sweep.fractions, &cfg.eval_config())?;
            out.write("sweep.csv", table.to_csv())?;
            out.json("sweep.json", &table)?;
            let series: Vec<_> = table
                .rows
                .iter()
                .map(|r| (r.method.clone(), table.fractions.iter().zip(&r.cells).filter_map(|(&f, c)| c.map(|(m, _)| (f, m))).collect()))
                .collect();
            let path = out.path("sweep.svg");
            crate::plot::line_chart(&path, "Macro-F1 by labeled fraction", "labeled fraction", "macro-F1", &series, Some(table.reference.mean_f1))?;
            print!("{}", table.to_csv());
            Ok(())
        }
        Command::Ablate(a) => ablate(a, cfg, out),
        Command::Robustness(a) => robustness(a, cfg, out),
        Command::ExportEmbeddings { checkpoint: ckpt, device } => {
            let manifest = checkpoint::read_manifest(ckpt)?;
            let extractor = match manifest.kind {
                ModelKind::Extractor => checkpoint::load_extractor(ckpt)?.0,
                ModelKind::Classifier => checkpoint::load_classifier(ckpt)?.0.extractor,
            };
            let (ds, _) = normalized(cfg, out)?;
            let device = device.clone().unwrap_or_else(|| cfg.train.anchor_id.clone());
            let path = out.path("embeddings.f32");
            out.files.push("embeddings.f32.shape".into());
            out.files.push("embeddings.f32.labels.csv".into());
            let rows = export_embeddings(&extractor, &ds, &device, &path)?;
            println!("{rows} embeddings of {device} written to {}", path.display());
            Ok(())
        }
    }
}

fn spec_for(kind: PerturbationKind, level: f64, targets: &[String], cfg: &RunConfig) -> PerturbationSpec {
    let perturbation = match kind {
        PerturbationKind::Heterogeneity => Perturbation::Heterogeneity { sigma_scale: level, sigma_bias: level },
        PerturbationKind::Missing => Perturbation::Missing { p_u: level },
        PerturbationKind::Misalignment => Perturbation::Misalignment { shift_seconds: level },
    };
    PerturbationSpec {
        perturbation,
        target_devices: targets.to_vec(),
        anchor: (!cfg.train.anchor_id.is_empty()).then(|| cfg.train.anchor_id.clone()),
        seed: cfg.train.seed,
    }
}

fn inject(a: &crate::InjectArgs, cfg: &mut RunConfig, out: &mut Output) -> Result<()> {
    let spec = spec_for(a.kind, a.level, &a.targets, cfg);
    let ds = match a.kind {
        PerturbationKind::Misalignment => {
            let (raw, seg) = cfg.load_raw()?.ok_or_else(|| Error::Config("misalignment needs raw streams, not a windowed archive".into()))?;
            inject_misalignment(&raw, &spec, &seg)?
        }
        PerturbationKind::Heterogeneity => inject_heterogeneity(&cfg.load_dataset()?, &spec)?,
        PerturbationKind::Missing => {
            let (ds, zeroed) = inject_missing(&cfg.load_dataset()?, &spec)?;
            println!("zeroed {zeroed} device windows");
            ds
        }
    };
    let path = out.path("dataset");
    save_dataset(&ds, &path)?;
    println!("{}: {}", spec.describe(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct MmdRow {
    device: String,
    mmd: f64,
    positive: bool,
    negative_weight: Option<f64>,
}

fn mmd_report(max_windows: usize, cfg: &mut RunConfig, out: &mut Output) -> Result<()> {
    let (ds, _) = normalized(cfg, out)?;
    if ds.num_devices() < 2 {
        return Err(Error::Config(format!("need ≥ 2 devices for an MMD report, have {}", ds.num_devices())));
    }
    if max_windows == 0 {
        return Err(Error::Config("max_windows must be positive".into()));
    }
    let t = ds.num_windows();
    let take = max_windows.min(t);
    let picks: Vec<usize> = (0..take).map(|i| i * t / take).collect();
    let rows_of = |d: usize| -> Vec<f64> { picks.iter().flat_map(|&i| to_f64(ds.window(d, i))).collect() };
    let anchor = ds.device_index(&cfg.train.anchor_id)?;
    let others: Vec<usize> = (0..ds.num_devices()).filter(|&d| d != anchor).collect();
    let ids: Vec<String> = others.iter().map(|&d| ds.devices()[d].device_id.clone()).collect();
    let sets: Vec<Vec<f64>> = others.iter().map(|&d| rows_of(d)).collect();
    let refs: Vec<&[f64]> = sets.iter().map(|s| s.as_slice()).collect();
    let p = pairwise_mmd(&rows_of(anchor), &refs, ds.window_size(), &cfg.train.selection.kernel)?;
    let mut r = rng::seeded(rng::derive(cfg.train.seed, &[rng::tag("mmd-report")]));
    let sel = select_from_scores(&cfg.train.anchor_id, &ids, Some(&p.scores), &cfg.train.selection, &mut r)?;
    let rows: Vec<MmdRow> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| MmdRow { device: id.clone(), mmd: p.scores[i], positive: sel.positives.contains(&i), negative_weight: sel.negative_weight(id) })
        .collect();
    let mut csv = String::from("device,mmd,positive,negative_weight\n");
    for row in &rows {
        csv.push_str(&format!("{},{},{},{}\n", row.device, row.mmd, row.positive, row.negative_weight.map(|w| w.to_string()).unwrap_or_default()));
    }
    out.write("mmd.csv", &csv)?;
    out.json("mmd.json", &serde_json::json!({ "anchor": cfg.train.anchor_id, "windows": take, "bandwidth": p.bandwidth, "devices": rows }))?;
    print!("{csv}");
    Ok(())
}

const ALL_STRATEGIES: [&str; 4] = ["collossl", "closest_pos_random_neg", "random", "unweighted"];

fn ablate(a: &crate::AblateArgs, cfg: &mut RunConfig, out: &mut Output) -> Result<()> {
    let strategies: Vec<String> = if a.strategy.is_empty() { ALL_STRATEGIES.iter().map(|s| s.to_string()).collect() } else { a.strategy.clone() };
    let modes: Vec<String> = if a.sampling.is_empty() { vec!["asynchronous".into()] } else { a.sampling.clone() };
    let ds = cfg.load_dataset()?;
    resolve_anchor(cfg, &ds)?;
    let mut csv = String::from("strategy,sampling,mean_f1,std_f1\n");
    let mut reports = Vec::new();
    for s in &strategies {
        let strategy: SelectionStrategy = parse_enum("selection strategy", s)?;
        for m in &modes {
            let sampling: NegativeSampling = parse_enum("sampling mode", m)?;
            let mut ecfg = cfg.eval_config();
            ecfg.train = TrainConfig { sampling_mode: sampling, ..ecfg.train };
            ecfg.train.selection.strategy = strategy;
            let r = run_logo_cv(&ds, Method::Collossl, &ecfg)?;
            csv.push_str(&format!("{s},{m},{},{}\n", r.mean_f1, r.std_f1));
            reports.push(serde_json::json!({ "strategy": s, "sampling": m, "report": r }));
        }
    }
    out.write("ablation.csv", &csv)?;
    out.json("ablation.json", &reports)?;
    print!("{csv}");
    Ok(())
}

fn robustness(a: &crate::RobustnessArgs, cfg: &mut RunConfig, out: &mut Output) -> Result<()> {
    let (levels, default): (&[f64], &[f64]) = match a.kind {
        PerturbationKind::Misalignment => (&a.shifts, &[0.01, 0.1, 0.5, 0.75, 1.5, 2.25, 3.0]),
        PerturbationKind::Missing => (&a.p_u, &[0.1, 0.2, 0.3, 0.4, 0.5]),
        PerturbationKind::Heterogeneity => (&a.sigma, &[0.05, 0.1]),
    };
    let levels = if levels.is_empty() { default.to_vec() } else { levels.to_vec() };
    let method = parse_method(a.method.as_deref().or(cfg.method.as_deref()).unwrap_or("collossl"))?;
    let raw = if a.kind == PerturbationKind::Misalignment {
        Some(cfg.load_raw()?.ok_or_else(|| Error::Config("misalignment needs raw streams, not a windowed archive".into()))?)
    } else {
        None
    };
    let ds = match &raw {
        Some((r, s)) => collossl::data::segment_windows(r, s)?,
        None => cfg.load_dataset()?,
    };
    resolve_anchor(cfg, &ds)?;
    let specs: Vec<PerturbationSpec> = levels.iter().map(|&l| spec_for(a.kind, l, &[], cfg)).collect();
    let source = match &raw {
        Some((raw, segment)) => RobustnessSource::Raw { raw, segment },
        None => RobustnessSource::Windows(&ds),
    };
    let report = run_robustness(source, &specs, method, &cfg.eval_config())?;
    out.write("robustness.csv", report.to_csv())?;
    out.json("robustness.json", &report)?;
    let mut points = vec![(0.0, report.baseline.mean_f1)];
    points.extend(levels.iter().zip(&report.levels).map(|(&l, r)| (l, r.report.mean_f1)));
    let x_label = match a.kind {
        PerturbationKind::Misalignment => "shift (s)",
        PerturbationKind::Missing => "p_u",
        PerturbationKind::Heterogeneity => "sigma",
    };
    let path = out.path("robustness.svg");
    crate::plot::line_chart(&path, &format!("{} robustness", report.method), x_label, "macro-F1", &[(report.method.clone(), points)], None)?;
    print!("{}", report.to_csv());
    Ok(())
}
