use std::io::Write;
use std::path::{Path, PathBuf};

use super::manifest::{sidecar_path, FileRecord, PatternSpec, RunManifest};
use super::settings::Settings;
use super::{write_err, AblateArgs, EvalArgs, ExportArgs, GenSynthArgs, TrainArgs, TrainCmdArgs};
use crate::dataio::{
    apply_pattern, gen_synthetic, generate_pattern, read_dataset, write_dataset, write_export_string, AugmentConfig,
    Dataset, ExportRow, Protocol, SynthConfig,
};
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::promptattn::AttnConfig;
use crate::trainer::{
    apply_split_pattern, evaluate, forward_dataset, split_dataset, train, Ablation, Checkpoint, EvalSettings,
    SplitKind, TrainConfig,
};

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn parsed<T: std::str::FromStr<Err = Error>>(s: &Option<String>) -> Result<Option<T>> {
    s.as_deref().map(str::parse::<T>).transpose()
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(write_err(dir))
}

pub fn cmd_gen_synth(a: &GenSynthArgs, mut s: Settings, out: &mut dyn Write) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n: s.value("n", a.n, d.n)?,
        classes: s.value("classes", a.classes, d.classes)?,
        d1: s.value("d1", a.d1, d.d1)?,
        d2: s.value("d2", a.d2, d.d2)?,
        cluster_sep: s.value("sep", a.sep, d.cluster_sep)?,
        seed: s.value("seed", a.seed, d.seed)?,
    };
    let path = PathBuf::from(s.required::<String>("out", path_flag(&a.out))?);
    let effective = s.finish()?;
    let ds = gen_synthetic(&cfg)?;
    write_dataset(&path, &ds)?;
    let mut m = RunManifest::new("gen-synth", effective, cfg.seed);
    m.add_output(&path)?;
    m.write(&sidecar_path(&path))?;
    emit(out, &format!("wrote {} samples to {}\n", ds.len(), path.display()))
}

/// Applies shared training flags on top of the defaults.
fn train_config(s: &mut Settings, a: &TrainArgs, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let da = AttnConfig::default();
    let dg = AugmentConfig::default();
    let no_prompt = s.switch("no-prompt", a.no_prompt)?;
    let no_fncl = s.switch("no-fncl", a.no_fncl)?;
    let no_cccl = s.switch("no-cccl", a.no_cccl)?;
    let cfg = TrainConfig {
        lr: s.value("lr", a.lr, d.lr)?,
        batch_size: s.value("batch", a.batch, d.batch_size)?,
        epochs: s.value("epochs", a.epochs, d.epochs)?,
        lambda_task: s.value("lambda", a.lambda, d.lambda_task)?,
        alpha: s.value("alpha", a.alpha, d.alpha)?,
        tau: s.value("tau", a.tau, d.tau)?,
        use_prompt: !no_prompt,
        use_fncl: !no_fncl,
        use_cccl: !no_cccl,
        seed,
        val_frac: s.value("val-frac", a.val_frac, d.val_frac)?,
        test_frac: s.value("test-frac", a.test_frac, d.test_frac)?,
        metric: s.value("metric", parsed::<Metric>(&a.metric)?, d.metric)?,
        protocol: s.value("protocol", parsed::<Protocol>(&a.protocol)?, d.protocol)?,
        eta: s.value("eta", a.eta, d.eta)?,
        augment: AugmentConfig {
            noise_std: s.value("noise-std", a.noise_std, dg.noise_std)?,
            dropout_p: s.value("dropout", a.dropout, dg.dropout_p)?,
            ..dg
        },
        attn: AttnConfig {
            d_model: s.value("d-model", a.d_model, da.d_model)?,
            n_heads: s.value("heads", a.heads, da.n_heads)?,
            prompt_len: s.value("prompt-len", a.prompt_len, da.prompt_len)?,
            attn_layers: s.value("attn-layers", a.attn_layers, da.attn_layers)?,
            init_std: s.value("init-std", a.init_std, da.init_std)?,
        },
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainCmdArgs, mut s: Settings, out: &mut dyn Write) -> Result<()> {
    let data = PathBuf::from(s.required::<String>("data", path_flag(&a.data))?);
    let dir = PathBuf::from(s.required::<String>("out", path_flag(&a.out))?);
    let seed = s.value("seed", a.seed, 0)?;
    let cfg = train_config(&mut s, &a.train, seed)?;
    let effective = s.finish()?;

    let ds = read_dataset(&data)?;
    let outcome = train(&ds, &cfg)?;
    create_dir(&dir)?;
    let ckpt = dir.join("model.ckpt");
    let log = dir.join("train_log.csv");
    let report = dir.join("test_report");
    outcome.checkpoint.save(&ckpt)?;
    std::fs::write(&log, outcome.log.to_csv()).map_err(write_err(&log))?;
    outcome.test_report.write(&report)?;

    let mut m = RunManifest::new("train", effective, seed);
    m.dataset = Some(FileRecord::of(&data)?);
    m.pattern = Some(PatternSpec {
        protocol: cfg.protocol.to_string(),
        eta: cfg.eta,
        seed,
    });
    for p in [ckpt.clone(), log, report.with_extension("tsv"), report.with_extension("jsonl")] {
        m.add_output(&p)?;
    }
    m.write(&dir.join("manifest.json"))?;

    let best = outcome
        .checkpoint
        .best_epoch
        .map_or_else(|| "none".to_string(), |e| e.to_string());
    emit(
        out,
        &format!(
            "trained {} epochs, best epoch {best}, test {} {}\ncheckpoint {}\n",
            cfg.epochs,
            cfg.metric,
            outcome.test_report.metric(cfg.metric).map_or_else(|_| "NA".into(), |v| v.to_string()),
            ckpt.display()
        ),
    )
}

fn parse_split(s: &str) -> Result<Option<SplitKind>> {
    match s {
        "train" => Ok(Some(SplitKind::Train)),
        "val" => Ok(Some(SplitKind::Val)),
        "test" => Ok(Some(SplitKind::Test)),
        "all" => Ok(None),
        _ => Err(Error::Argument(format!("unknown split {s:?} (train, val, test, all)"))),
    }
}

/// The requested split of `ds` under the checkpoint's own partition, with a
/// fresh pattern when `protocol`/`eta` are given.
fn select_split(
    ds: &Dataset,
    ck: &Checkpoint,
    split: Option<SplitKind>,
    pattern: Option<(Protocol, f64)>,
    seed: u64,
) -> Result<Dataset> {
    let t = &ck.train;
    let base = match split {
        None => ds.clone(),
        Some(kind) => {
            let parts = split_dataset(ds, t.seed, t.val_frac, t.test_frac)?;
            let idx = match kind {
                SplitKind::Train => 0,
                SplitKind::Val => 1,
                SplitKind::Test => 2,
            };
            parts[idx].clone()
        }
    };
    match (pattern, split) {
        (None, _) => Ok(base),
        (Some((p, eta)), Some(kind)) => Ok(apply_split_pattern(&base, p, eta, seed, kind)?.0),
        (Some((p, eta)), None) => {
            let pat = generate_pattern(&base, p, eta, seed)?;
            apply_pattern(&base, &pat)
        }
    }
}

pub fn cmd_eval(a: &EvalArgs, mut s: Settings, out: &mut dyn Write) -> Result<()> {
    let ckpt_path = PathBuf::from(s.required::<String>("ckpt", path_flag(&a.ckpt))?);
    let data = PathBuf::from(s.required::<String>("data", path_flag(&a.data))?);
    let ck = Checkpoint::load(&ckpt_path)?;
    let t = ck.train.clone();
    let protocol = s.value("protocol", parsed::<Protocol>(&a.protocol)?, t.protocol)?;
    let eta = s.value("eta", a.eta, t.eta)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Argument(format!("eta must lie in [0, 1], got {eta}")));
    }
    let seed = s.value("seed", a.seed, t.seed)?;
    let metric = s.value("metric", parsed::<Metric>(&a.metric)?, t.metric)?;
    let split_name = s.value("split", a.split.clone(), "test".to_string())?;
    let split = parse_split(&split_name)?;
    let threshold = s.value("threshold", a.threshold, 0.5)?;
    let mut stem_name = ckpt_path.clone().into_os_string();
    stem_name.push(".eval");
    let default_stem = PathBuf::from(stem_name).display().to_string();
    let stem = PathBuf::from(s.value("out", path_flag(&a.out), default_stem)?);
    let effective = s.finish()?;

    let ds = read_dataset(&data)?;
    ck.check_compatible(&ds.header)?;
    let part = select_split(&ds, &ck, split, Some((protocol, eta)), seed)?;
    let settings = EvalSettings {
        threshold,
        ..EvalSettings::from_train(&t, seed)
    };
    let report = evaluate(&ck.model, &part, &settings)?;
    let value = report.metric(metric)?;
    let tsv = PathBuf::from(format!("{}.tsv", stem.display()));
    let rec = PathBuf::from(format!("{}.jsonl", stem.display()));
    std::fs::write(&tsv, report.to_table()).map_err(write_err(&tsv))?;
    std::fs::write(&rec, report.to_record()).map_err(write_err(&rec))?;

    let mut m = RunManifest::new("eval", effective, seed);
    m.dataset = Some(FileRecord::of(&data)?);
    m.pattern = Some(PatternSpec {
        protocol: protocol.to_string(),
        eta,
        seed,
    });
    m.add_output(&tsv)?;
    m.add_output(&rec)?;
    m.write(&PathBuf::from(format!("{}.manifest.json", stem.display())))?;
    emit(out, &report.to_table())?;
    emit(out, &format!("\n{metric}\t{value}\n"))
}

/// `a..b` with step 0.1, `a..b:step`, or `a,b,c`.
pub fn parse_etas(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Argument(format!("cannot parse eta grid {s:?}"));
    let vals = if let Some((lo, rest)) = s.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((h, st)) => (h, st.trim().parse::<f64>().map_err(|_| bad())?),
            None => (rest, 0.1),
        };
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        if !(step > 0.0) || hi < lo {
            return Err(bad());
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|k| ((lo + k as f64 * step) * 1e9).round() / 1e9).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?
    };
    if vals.is_empty() || vals.iter().any(|e| !(0.0..=1.0).contains(e)) {
        return Err(Error::Argument(format!("eta grid {s:?} must be non-empty within [0, 1]")));
    }
    Ok(vals)
}

/// `a..b` (inclusive) or `a,b,c`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Argument(format!("cannot parse seed list {s:?}"));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',').map(|x| x.trim().parse::<u64>().map_err(|_| bad())).collect()
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',').map(|x| x.trim().parse::<T>()).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_ablate(a: &AblateArgs, mut s: Settings, out: &mut dyn Write) -> Result<()> {
    let data = PathBuf::from(s.required::<String>("data", path_flag(&a.data))?);
    let dir = PathBuf::from(s.required::<String>("out", path_flag(&a.out))?);
    let etas = parse_etas(&s.value("etas", a.etas.clone(), "0.7".to_string())?)?;
    let protocols: Vec<Protocol> = parse_list(&s.value("protocols", a.protocols.clone(), "balanced".to_string())?)?;
    let configs: Vec<Ablation> = parse_list(&s.value(
        "configs",
        a.configs.clone(),
        "full,prompt_fncl,prompt_cccl,prompt_only,baseline".to_string(),
    )?)?;
    let seeds = parse_seeds(&s.value("seeds", a.seeds.clone(), "0..4".to_string())?)?;
    // Component switches come from the grid; flags would be overridden.
    if a.train.no_prompt || a.train.no_fncl || a.train.no_cccl {
        return Err(Error::Usage("ablate sets component switches per cell; use --configs instead".into()));
    }
    let base = train_config(&mut s, &a.train, 0)?;
    let effective = s.finish()?;
    let ds = read_dataset(&data)?;
    create_dir(&dir)?;

    let m = base.metric.as_str();
    let mut rows = format!(
        "protocol\teta\tconfig\tseed\tstatus\tbest_epoch\tval_{m}\ttest_{m}\ttest_accuracy\ttest_f1_macro\ttest_auroc\n"
    );
    let mut summary = format!("protocol\teta\tconfig\tn_ok\tn_failed\tmean_test_{m}\tstd_test_{m}\ttest_{m}\n");
    for &protocol in &protocols {
        for &eta in &etas {
            for &ab in &configs {
                let mut ok = Vec::new();
                let mut failed = 0;
                for &seed in &seeds {
                    let cfg = TrainConfig {
                        seed,
                        protocol,
                        eta,
                        ..base.clone()
                    }
                    .with_ablation(ab);
                    let cell = train(&ds, &cfg).and_then(|o| {
                        let v = o.test_report.metric(cfg.metric)?;
                        Ok((o, v))
                    });
                    match cell {
                        Ok((o, v)) => {
                            ok.push(v);
                            let best = o.checkpoint.best_epoch.map_or("NA".to_string(), |e| e.to_string());
                            let val = o.val_report.metric(cfg.metric).map_or("NA".to_string(), |x| x.to_string());
                            let au = o.test_report.auroc.map_or("NA".to_string(), |x| x.to_string());
                            rows.push_str(&format!(
                                "{protocol}\t{eta}\t{ab}\t{seed}\tok\t{best}\t{val}\t{v}\t{}\t{}\t{au}\n",
                                o.test_report.accuracy, o.test_report.f1_macro
                            ));
                        }
                        Err(e) => {
                            failed += 1;
                            let msg = e.to_string().replace(['\t', '\n'], " ");
                            rows.push_str(&format!(
                                "{protocol}\t{eta}\t{ab}\t{seed}\terror: {msg}\tNA\tNA\tNA\tNA\tNA\tNA\n"
                            ));
                        }
                    }
                }
                let (cell_mean, cell_std, shown) = if ok.is_empty() {
                    ("NA".to_string(), "NA".to_string(), "NA".to_string())
                } else {
                    let (mu, sd) = mean_std(&ok);
                    (mu.to_string(), sd.to_string(), format!("{:.4}±{:.4}", mu, sd))
                };
                summary.push_str(&format!(
                    "{protocol}\t{eta}\t{ab}\t{}\t{failed}\t{cell_mean}\t{cell_std}\t{shown}\n",
                    ok.len()
                ));
            }
        }
    }
    let rows_path = dir.join("ablation.tsv");
    let summary_path = dir.join("summary.tsv");
    std::fs::write(&rows_path, &rows).map_err(write_err(&rows_path))?;
    std::fs::write(&summary_path, &summary).map_err(write_err(&summary_path))?;
    let mut man = RunManifest::new("ablate", effective, seeds.first().copied().unwrap_or(0));
    man.dataset = Some(FileRecord::of(&data)?);
    man.add_output(&rows_path)?;
    man.add_output(&summary_path)?;
    man.write(&dir.join("manifest.json"))?;
    emit(out, &summary)
}

pub fn cmd_export_emb(a: &ExportArgs, mut s: Settings, out: &mut dyn Write) -> Result<()> {
    let ckpt_path = PathBuf::from(s.required::<String>("ckpt", path_flag(&a.ckpt))?);
    let data = PathBuf::from(s.required::<String>("data", path_flag(&a.data))?);
    let path = PathBuf::from(s.required::<String>("out", path_flag(&a.out))?);
    let ck = Checkpoint::load(&ckpt_path)?;
    let seed = s.value("seed", a.seed, ck.train.seed)?;
    let split = parse_split(&s.value("split", a.split.clone(), "all".to_string())?)?;
    let protocol = parsed::<Protocol>(&a.protocol)?;
    let pattern = match (protocol, a.eta) {
        (None, None) if !s_has_pattern(&s) => None,
        (p, e) => {
            let p = s.value("protocol", p, Protocol::Balanced)?;
            let e = s.value("eta", e, ck.train.eta)?;
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Argument(format!("eta must lie in [0, 1], got {e}")));
            }
            Some((p, e))
        }
    };
    let effective = s.finish()?;

    let ds = read_dataset(&data)?;
    ck.check_compatible(&ds.header)?;
    let part = select_split(&ds, &ck, split, pattern, seed)?;
    let settings = EvalSettings::from_train(&ck.train, seed);
    let fwd = forward_dataset(&ck.model, &part, &settings)?;
    let rows: Vec<ExportRow> = part
        .samples
        .iter()
        .enumerate()
        .map(|(i, smp)| ExportRow {
            id: smp.id.clone(),
            label: smp.label.clone(),
            m1: fwd.m1[i].clone(),
            m2: fwd.m2[i].clone(),
            m1_generated: fwd.generated[i][0],
            m2_generated: fwd.generated[i][1],
        })
        .collect();
    let text = write_export_string(&ds.header, &rows);
    std::fs::write(&path, text).map_err(write_err(&path))?;

    let mut m = RunManifest::new("export-emb", effective, seed);
    m.dataset = Some(FileRecord::of(&data)?);
    m.pattern = pattern.map(|(p, e)| PatternSpec {
        protocol: p.to_string(),
        eta: e,
        seed,
    });
    m.add_output(&path)?;
    m.write(&sidecar_path(&path))?;
    let generated = rows.iter().filter(|r| r.m1_generated || r.m2_generated).count();
    emit(
        out,
        &format!("exported {} rows ({generated} with a generated modality) to {}\n", rows.len(), path.display()),
    )
}

/// Whether the config file asks for a pattern.
fn s_has_pattern(s: &Settings) -> bool {
    s.has_file_key("protocol") || s.has_file_key("eta")
}
