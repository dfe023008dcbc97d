//! Subcommand implementations. Each one reads its inputs, writes artifacts
//! under `--out` and finishes with a run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use fdn_core::baselines::{Baseline, BaselineKind};
use fdn_core::dataset::{
    fit_norm, preprocess_episode, read_episode, split_episodes, synth_corpus, write_episode, Episode, ProcessedEpisode,
    SplitPolicy, WindowIndex, WindowSource,
};
use fdn_core::evaluation::{
    evaluate, plot_reconstruction, reconstruct_episode, summary_table, write_reports_csv, DelayMode, DelaySpec,
    MetricsReport, Predictor, CHANNELS,
};
use fdn_core::model::{Ablation, Ablations, ModelConfig};
use fdn_core::spectral::{energy_spectrum, FilterSpec, Series};
use fdn_core::training::{
    data_subset, pretrain, train, train_scratch, transfer, Checkpoint, Stage, TrainReport, Trainable,
};
use ndarray::s;

use crate::config::{DataConfig, RawConfig};
use crate::manifest::RunManifest;
use crate::{Args, UsageError};

const CHECKPOINT_DIR: &str = "checkpoint";

pub struct Ctx<'a> {
    pub args: &'a Args,
    pub cfg: RawConfig,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.args.seed.unwrap_or(0)
    }

    fn out(&self) -> anyhow::Result<&Path> {
        let out = self.args.out.as_deref().ok_or_else(|| UsageError("--out is required".into()))?;
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }

    fn episodes_dir(&self) -> anyhow::Result<PathBuf> {
        let e = self.args.episodes.as_deref().ok_or_else(|| UsageError("--episodes <DIR> is required".into()))?;
        Ok(PathBuf::from(e))
    }

    fn model_dir(&self) -> anyhow::Result<&Path> {
        Ok(self.args.model.as_deref().ok_or_else(|| UsageError("--model <CHECKPOINT> is required".into()))?)
    }

    fn manifest(&self, command: &str, seed: u64) -> RunManifest {
        RunManifest::new(command, self.args.config.as_deref(), seed)
    }

    fn delays(&self, mode: DelayMode) -> anyhow::Result<Vec<DelaySpec>> {
        let ms = match &self.args.delays {
            Some(d) => crate::config::list::<f64>("--delays", d)?,
            None => self.cfg.eval()?.delays,
        };
        Ok(ms.into_iter().map(|d| DelaySpec::new(d, mode)).collect())
    }

    fn model_config(&self) -> anyhow::Result<ModelConfig> {
        let mut m = self.cfg.model()?;
        if let Some(flags) = &self.args.flags {
            m.ablations = Ablations::parse_list(flags).map_err(|e| UsageError(e.to_string()))?;
            m.validate().map_err(|e| UsageError(e.to_string()))?;
        }
        Ok(m)
    }

    fn baseline(&self) -> anyhow::Result<Option<BaselineKind>> {
        match &self.args.baseline {
            None => Ok(None),
            Some(b) => Ok(Some(b.parse().map_err(|e: fdn_core::FdnError| UsageError(e.to_string()))?)),
        }
    }
}

/// Raw episode tables in `dir`, sorted by file name. Ground-truth tables and
/// derivative tables are skipped.
fn episode_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading episode directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".csv") && !name.ends_with(".truth.csv") && !name.ends_with(".deriv.csv")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no episode tables in {}", dir.display());
    }
    Ok(files)
}

fn load_episodes(dir: &Path, manifest: &mut RunManifest) -> anyhow::Result<Vec<Episode>> {
    let files = episode_files(dir)?;
    let mut out = Vec::with_capacity(files.len());
    for f in &files {
        manifest.input(f)?;
        out.push(read_episode(f).with_context(|| format!("loading {}", f.display()))?);
    }
    Ok(out)
}

fn preprocess_all(eps: &[Episode], spec: &FilterSpec, data: &DataConfig) -> anyhow::Result<Vec<ProcessedEpisode>> {
    eps.iter()
        .enumerate()
        .map(|(i, e)| preprocess_episode(e, spec, data.sg).with_context(|| format!("preprocessing episode {i}")))
        .collect()
}

/// Preprocessed training and held-out episodes of `dir`.
fn split_data(
    dir: &Path,
    spec: &FilterSpec,
    data: &DataConfig,
    manifest: &mut RunManifest,
) -> anyhow::Result<(Vec<ProcessedEpisode>, Vec<ProcessedEpisode>)> {
    let eps = load_episodes(dir, manifest)?;
    let (tr, te) = split_episodes(&eps, SplitPolicy { test_fraction: data.test_fraction, seed: data.split_seed })
        .context("splitting episodes")?;
    let proc = preprocess_all(&eps, spec, data)?;
    manifest.note("train_episodes", join(&tr));
    manifest.note("test_episodes", join(&te));
    Ok((tr.iter().map(|&i| proc[i].clone()).collect(), te.iter().map(|&i| proc[i].clone()).collect()))
}

fn source(episodes: &[ProcessedEpisode], cfg: &ModelConfig) -> anyhow::Result<WindowSource> {
    WindowSource::new(episodes, cfg.n, cfg.history, cfg.horizon, &cfg.spec).context("building windows")
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Step log without wall-clock times, so reruns hash identically.
fn write_loss_log(path: &Path, reports: &[(&str, &TrainReport)]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stage", "step", "total", "trend", "res"])?;
    for (stage, r) in reports {
        for h in &r.history {
            w.write_record([stage.to_string(), h.step.to_string(), h.total.to_string(), h.trend.to_string(), h.res.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn save<M: Trainable>(model: &M, stage: Stage, seed: u64, steps: usize, dir: &Path) -> anyhow::Result<()> {
    model.checkpoint(stage, seed, steps).save(dir).with_context(|| format!("saving checkpoint to {}", dir.display()))
}

pub fn synth(ctx: &Ctx) -> anyhow::Result<()> {
    let count: usize = match &ctx.args.episodes {
        Some(e) => e.parse().map_err(|_| UsageError(format!("synth --episodes takes a count, got `{e}`")))?,
        None => 12,
    };
    let (cfg, dofs) = ctx.cfg.synth()?;
    let out = ctx.out()?;
    let seed = ctx.seed();
    let mut manifest = ctx.manifest("synth", seed);
    let eps = synth_corpus(&cfg, count, seed, &dofs).context("generating episodes")?;
    for (i, e) in eps.iter().enumerate() {
        write_episode(out, &format!("episode_{i:03}"), e).with_context(|| format!("writing episode {i}"))?;
    }
    manifest.note("episodes", count);
    manifest.note("duration_s", cfg.duration_s);
    manifest.note("dofs", if dofs.is_empty() { cfg.n.to_string() } else { join(&dofs) });
    manifest.write(out)?;
    println!("wrote {count} episodes to {}", out.display());
    Ok(())
}

pub fn preprocess(ctx: &Ctx) -> anyhow::Result<()> {
    let dir = ctx.episodes_dir()?;
    let spec = ctx.cfg.model()?.spec;
    let data = ctx.cfg.data(ctx.seed())?;
    let out = ctx.out()?;
    let mut manifest = ctx.manifest("preprocess", ctx.seed());
    let files = episode_files(&dir)?;
    for f in &files {
        manifest.input(f)?;
        let raw = read_episode(f).with_context(|| format!("loading {}", f.display()))?;
        let p = preprocess_episode(&raw, &spec, data.sg).with_context(|| format!("preprocessing {}", f.display()))?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("episode").to_string();
        let ep = Episode { meta: None, ..p.episode.clone() };
        write_episode(out, &stem, &ep)?;
        let path = out.join(format!("{stem}.deriv.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let n = p.n();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|j| format!("qd{j}")));
        header.extend((1..=n).map(|j| format!("qdd{j}")));
        w.write_record(&header)?;
        for i in 0..p.steps() {
            let mut rec = vec![ep.timestamps[i].to_string()];
            rec.extend(p.qd.column(i).iter().map(f64::to_string));
            rec.extend(p.qdd.column(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    manifest.write(out)?;
    println!("preprocessed {} episodes into {}", files.len(), out.display());
    Ok(())
}

pub fn train_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let dir = ctx.episodes_dir()?;
    let cfg = ctx.model_config()?;
    let seed = ctx.seed();
    let data = ctx.cfg.data(seed)?;
    let tc = ctx.cfg.train("train", seed)?;
    let baseline = ctx.baseline()?;
    let out = ctx.out()?;
    let mut manifest = ctx.manifest("train", seed);
    let (tr, _) = split_data(&dir, &cfg.spec, &data, &mut manifest)?;
    let src = source(&tr, &cfg)?;
    let idx = src.indices(data.stride);
    let t0 = Instant::now();
    let report = fit(&cfg, baseline, &src, &idx, &tc, &out.join(CHECKPOINT_DIR))?;
    write_loss_log(&out.join("loss.csv"), &[("train", &report)])?;
    manifest.note("windows", idx.len());
    manifest.note("steps", report.steps());
    manifest.note("train_seconds", format!("{:.1}", t0.elapsed().as_secs_f64()));
    manifest.write(out)?;
    println!("trained {} steps, final loss {:.6}", report.steps(), report.final_loss().unwrap_or(f64::NAN));
    Ok(())
}

/// Trains the FDN or a baseline from scratch and saves its checkpoint.
fn fit(
    cfg: &ModelConfig,
    baseline: Option<BaselineKind>,
    src: &WindowSource,
    idx: &[WindowIndex],
    tc: &fdn_core::training::TrainConfig,
    ck_dir: &Path,
) -> anyhow::Result<TrainReport> {
    match baseline {
        None => {
            let (m, report) = train_scratch(cfg, src, idx, tc, None).context("training")?;
            save(&m, Stage::Scratch, tc.seed, report.steps(), ck_dir)?;
            Ok(report)
        }
        Some(kind) => {
            let mut b = Baseline::new(kind, cfg.clone(), tc.seed)?;
            b.norm = fit_norm(src, idx, cfg.mask_u)?;
            let report = train(&mut b, src, idx, tc, None).context("training baseline")?;
            save(&b, Stage::Scratch, tc.seed, report.steps(), ck_dir)?;
            Ok(report)
        }
    }
}

pub fn pretrain_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let dir = ctx.episodes_dir()?;
    let cfg = ModelConfig { mask_u: true, ..ctx.model_config()? };
    let seed = ctx.seed();
    let data = ctx.cfg.data(seed)?;
    let tc = ctx.cfg.train("train", seed)?;
    let util = ctx.args.data_util.unwrap_or(100.0);
    let out = ctx.out()?;
    let mut manifest = ctx.manifest("pretrain", seed);
    let eps = load_episodes(&dir, &mut manifest)?;
    let proc = preprocess_all(&eps, &cfg.spec, &data)?;
    let src = source(&proc, &cfg)?;
    let idx = data_subset(&src.indices(data.stride), util, seed).map_err(|e| UsageError(e.to_string()))?;
    let (m, report) = pretrain(&cfg, &src, &idx, &tc, None).context("pretraining")?;
    save(&m, Stage::Pretrain, seed, report.steps(), &out.join(CHECKPOINT_DIR))?;
    write_loss_log(&out.join("loss.csv"), &[("pretrain", &report)])?;
    manifest.note("data_util_percent", util);
    manifest.note("windows", idx.len());
    manifest.note("steps", report.steps());
    manifest.write(out)?;
    println!("pretrained {} steps on {} windows", report.steps(), idx.len());
    Ok(())
}

pub fn transfer_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let dir = ctx.episodes_dir()?;
    let ck_dir = ctx.model_dir()?;
    let seed = ctx.seed();
    let stage = match &ctx.args.stage {
        None => Stage::FineTune,
        Some(s) => s.parse().map_err(|e: fdn_core::FdnError| UsageError(e.to_string()))?,
    };
    if !matches!(stage, Stage::LinearProbe | Stage::FineTune) {
        bail!(UsageError(format!("transfer --stage must be linear_probe or fine_tune, got {stage}")));
    }
    let data = ctx.cfg.data(seed)?;
    let probe_cfg = ctx.cfg.train("probe", seed)?;
    let mut fine_cfg = ctx.cfg.train("fine_tune", seed)?;
    if stage == Stage::LinearProbe {
        fine_cfg.max_steps = Some(0);
    }
    let out = ctx.out()?;
    let mut manifest = ctx.manifest("transfer", seed);
    manifest.input(&ck_dir.join(fdn_core::training::BLOB_FILE))?;
    let pre = Checkpoint::load(ck_dir).context("loading pretraining checkpoint")?;
    // The downstream model follows the checkpoint unless a model section asks otherwise.
    let cfg = if ctx.cfg.section("model").is_empty() && ctx.args.flags.is_none() {
        ModelConfig { mask_u: false, ..pre.cfg.clone() }
    } else {
        ModelConfig { mask_u: false, ..ctx.model_config()? }
    };
    let (tr, _) = split_data(&dir, &cfg.spec, &data, &mut manifest)?;
    let src = source(&tr, &cfg)?;
    let idx = src.indices(data.stride);
    let o = transfer(&pre, &cfg, &src, &idx, &probe_cfg, &fine_cfg, None).context("transfer")?;
    save(&o.probe, Stage::LinearProbe, seed, o.probe_report.steps(), &out.join(Stage::LinearProbe.name()))?;
    let mut logs = vec![("linear_probe", &o.probe_report)];
    if stage == Stage::FineTune {
        let steps = o.probe_report.steps() + o.fine_report.steps();
        save(&o.fine, Stage::FineTune, seed, steps, &out.join(Stage::FineTune.name()))?;
        logs.push(("fine_tune", &o.fine_report));
    }
    write_loss_log(&out.join("loss.csv"), &logs)?;
    manifest.note("stage", stage);
    manifest.write(out)?;
    println!("transfer done: probe {} steps, fine-tune {} steps", o.probe_report.steps(), o.fine_report.steps());
    Ok(())
}

/// A loaded checkpoint as a predictor, with the delay mode that suits it.
fn load_predictor(dir: &Path) -> anyhow::Result<(Checkpoint, Box<dyn Predictor>, DelayMode)> {
    let ck = Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if ck.steps == 0 {
        eprintln!("warning: checkpoint {} was never trained", dir.display());
    }
    let (p, mode): (Box<dyn Predictor>, _) = if ck.kind == "fdn" {
        (Box::new(ck.to_fdn()?), DelayMode::DelayCompensated)
    } else {
        let b = ck.to_baseline()?;
        let mode = if b.kind.is_forecaster() { DelayMode::DelayCompensated } else { DelayMode::ZohPoint };
        (Box::new(b), mode)
    };
    Ok((ck, p, mode))
}

fn write_reports(out: &Path, reports: &[MetricsReport]) -> anyhow::Result<String> {
    write_reports_csv(&out.join("report.csv"), reports)?;
    let table = summary_table(reports);
    fs::write(out.join("summary.txt"), &table)?;
    Ok(table)
}

pub fn evaluate_cmd(ctx: &Ctx) -> anyhow::Result<()> {
    let dir = ctx.episodes_dir()?;
    let model = ctx.model_dir()?;
    let out = ctx.out()?;
    let (ck, p, mode) = load_predictor(model)?;
    let seed = ctx.args.seed.unwrap_or(ck.seed);
    let data = ctx.cfg.data(seed)?;
    let eval = ctx.cfg.eval()?;
    let delays = ctx.delays(mode)?;
    let mut manifest = ctx.manifest("evaluate", seed);
    manifest.input(&model.join(fdn_core::training::BLOB_FILE))?;
    let (_, te) = split_data(&dir, &ck.cfg.spec, &data, &mut manifest)?;
    let src = source(&te, &ck.cfg)?;
    let episodes: Vec<usize> = (0..src.num_episodes()).collect();
    let reports = evaluate(p.as_ref(), &src, &episodes, &delays, &ck.norm.w_std, eval.batch_size).context("evaluating")?;
    let table = write_reports(out, &reports)?;
    manifest.note("delays_ms", join(&delays.iter().map(|d| d.delay_ms).collect::<Vec<_>>()));
    manifest.write(out)?;
    print!("{table}");
    Ok(())
}

pub fn ablate(ctx: &Ctx) -> anyhow::Result<()> {
    let dir = ctx.episodes_dir()?;
    let seed = ctx.seed();
    let flags: Vec<Ablation> = match &ctx.args.flags {
        Some(f) => crate::config::list::<String>("--flags", f)?
            .iter()
            .map(|s| s.parse().map_err(|e: fdn_core::FdnError| UsageError(e.to_string())))
            .collect::<Result<_, _>>()?,
        None => Ablation::ALL.to_vec(),
    };
    let base = ctx.cfg.model()?;
    let data = ctx.cfg.data(seed)?;
    let tc = ctx.cfg.train("train", seed)?;
    let eval = ctx.cfg.eval()?;
    let delays = ctx.delays(DelayMode::DelayCompensated)?;
    let out = ctx.out()?;
    let mut manifest = ctx.manifest("ablate", seed);
    let (tr, te) = split_data(&dir, &base.spec, &data, &mut manifest)?;
    let mut variants = vec![("full".to_string(), base.ablations.clone())];
    variants.extend(flags.iter().map(|&f| (f.name().to_string(), base.ablations.clone().with(f))));
    let mut reports = Vec::new();
    for (name, ablations) in variants {
        let cfg = ModelConfig { ablations, ..base.clone() };
        cfg.validate().map_err(|e| UsageError(format!("{name}: {e}")))?;
        let tr_src = source(&tr, &cfg)?;
        let te_src = source(&te, &cfg)?;
        let idx = tr_src.indices(data.stride);
        let (m, report) = train_scratch(&cfg, &tr_src, &idx, &tc, None).with_context(|| format!("training {name}"))?;
        save(&m, Stage::Scratch, seed, report.steps(), &out.join(&name).join(CHECKPOINT_DIR))?;
        write_loss_log(&out.join(&name).join("loss.csv"), &[("train", &report)])?;
        let episodes: Vec<usize> = (0..te_src.num_episodes()).collect();
        let r = evaluate(&m, &te_src, &episodes, &delays, &m.norm.w_std, eval.batch_size)
            .with_context(|| format!("evaluating {name}"))?;
        eprintln!("{name}: {} steps", report.steps());
        reports.extend(r);
    }
    let table = write_reports(out, &reports)?;
    manifest.note("flags", join(&flags.iter().map(|f| f.name()).collect::<Vec<_>>()));
    manifest.write(out)?;
    print!("{table}");
    Ok(())
}

pub fn spectrum(ctx: &Ctx) -> anyhow::Result<()> {
    let dir = ctx.episodes_dir()?;
    let cfg = ctx.cfg.model()?;
    let data = ctx.cfg.data(ctx.seed())?;
    let out = ctx.out()?;
    let mut manifest = ctx.manifest("spectrum", ctx.seed());
    let eps = load_episodes(&dir, &mut manifest)?;
    let proc = preprocess_all(&eps, &cfg.spec, &data)?;
    let len = cfg.horizon;
    let mut windows = Vec::new();
    for p in &proc {
        let w = &p.episode.w;
        let mut start = 0;
        while start + len <= w.ncols() {
            windows.push(Series::new(w.slice(s![.., start..start + len]).to_owned(), cfg.spec.sample_rate)?);
            start += data.stride.max(1);
        }
    }
    let spec = energy_spectrum(&windows).context("computing spectrum")?;
    let mut w = csv::Writer::from_path(out.join("spectrum.csv"))?;
    let mut header = vec!["freq_hz".to_string()];
    header.extend(CHANNELS.iter().map(|c| c.to_string()));
    w.write_record(&header)?;
    for (b, f) in spec.freqs.iter().enumerate() {
        let mut rec = vec![f.to_string()];
        rec.extend(spec.energy.column(b).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let above = spec.fraction_above(cfg.spec.f_c);
    for (c, frac) in CHANNELS.iter().zip(&above) {
        println!("{c}: {:.1}% of energy above {} Hz", 100.0 * frac, cfg.spec.f_c);
    }
    manifest.note("windows", windows.len());
    manifest.note("fraction_above_f_c", join(&above));
    manifest.write(out)?;
    Ok(())
}

pub fn plot(ctx: &Ctx) -> anyhow::Result<()> {
    let dir = ctx.episodes_dir()?;
    let model = ctx.model_dir()?;
    let out = ctx.out()?;
    let (ck, p, mode) = load_predictor(model)?;
    let seed = ctx.args.seed.unwrap_or(ck.seed);
    let data = ctx.cfg.data(seed)?;
    let eval = ctx.cfg.eval()?;
    let delays = ctx.delays(mode)?;
    let mut manifest = ctx.manifest("plot", seed);
    manifest.input(&model.join(fdn_core::training::BLOB_FILE))?;
    let (_, te) = split_data(&dir, &ck.cfg.spec, &data, &mut manifest)?;
    let src = source(&te, &ck.cfg)?;
    let rate = ck.cfg.spec.sample_rate;
    let recs = reconstruct_episode(p.as_ref(), &src, 0, &delays, eval.batch_size).context("reconstructing")?;
    for rec in &recs {
        let len = ((eval.plot_seconds * rate) as usize).max(2);
        let span = rec.valid.start..(rec.valid.start + len).min(rec.valid.end);
        for (c, name) in CHANNELS.iter().enumerate() {
            let path = out.join(format!("{name}_{}ms.svg", rec.delay.delay_ms));
            plot_reconstruction(&path, rec, src.w_raw(0), c, Some(span.clone()), rate)
                .with_context(|| format!("plotting {}", path.display()))?;
        }
    }
    manifest.write(out)?;
    println!("wrote {} plots to {}", recs.len() * CHANNELS.len(), out.display());
    Ok(())
}
