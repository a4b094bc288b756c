use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use strokerig_core::align::{Aligner, CanonicalFrame};
use strokerig_core::datakit::{filter_records, DatasetRecord};
use strokerig_core::json::skeleton_to_string;
use strokerig_core::metrics::{CdReport, EvalReport};
use strokerig_core::stroke::simulate_stroke;
use strokerig_core::SkeletonGraph;
use strokerig_model::experiments::{eval_cases, evaluate, joint_drop_curve, EvalCase};
use strokerig_model::pipeline::Job;
use strokerig_model::preference::{build_pairs, dpo_finetune, CdProxyScorer, PreferenceCondition, PreferencePair};
use strokerig_model::skdit::{train_dit, SamplerConfig, SkDit};
use strokerig_model::skvae::{train_vae, SkVae};

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::io::*;
use crate::manifest::Manifest;
use crate::service::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "strokerig", version, about = "Stroke- and text-conditioned 3D skeleton generation")]
pub struct Cli {
    /// TOML run configuration (all keys optional; unknown keys are errors).
    #[arg(long, short, global = true, env = "STROKERIG_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ModelArgs {
    /// VAE checkpoint (default: `models.vae` from the config).
    #[arg(long, env = "STROKERIG_VAE")]
    pub vae: Option<PathBuf>,
    /// Denoiser checkpoint (default: `models.dit` from the config).
    #[arg(long, env = "STROKERIG_DIT")]
    pub dit: Option<PathBuf>,
}

impl ModelArgs {
    fn paths(&self, cfg: &Config) -> (PathBuf, PathBuf) {
        (
            self.vae.clone().unwrap_or_else(|| cfg.models.vae.clone()),
            self.dit.clone().unwrap_or_else(|| cfg.models.dit.clone()),
        )
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rotate skeletons into the canonical frame (+X left, +Y up, +Z forward).
    Align {
        /// Skeleton JSON, or a `.jsonl` dataset manifest.
        input: PathBuf,
        output: PathBuf,
    },
    /// Drop dataset records that fail the quality criteria.
    Filter { input: PathBuf, output: PathBuf },
    /// Write simulated hand-drawn strokes for every record.
    SimulateStrokes {
        input: PathBuf,
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        per_record: usize,
    },
    /// Train the skeleton VAE.
    TrainVae { input: PathBuf, out_dir: PathBuf },
    /// Train the latent denoiser on top of a trained VAE.
    TrainDit {
        input: PathBuf,
        out_dir: PathBuf,
        #[arg(long, env = "STROKERIG_VAE")]
        vae: Option<PathBuf>,
    },
    /// Generate one skeleton and print it as JSON.
    Sample {
        #[arg(long)]
        stroke: PathBuf,
        /// Prompt; defaults to the stroke's `text` field.
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Write here instead of stdout, with a manifest beside it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Chamfer report of predictions against ground truth.
    Eval {
        /// Directory of predicted skeleton JSON files.
        #[arg(long, requires = "gt", conflicts_with = "manifest")]
        pred: Option<PathBuf>,
        /// Directory of ground-truth skeletons with matching file names.
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Dataset manifest: generate from simulated strokes, then score,
        /// including the dropped-joint curve.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory for report, curve and manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Generate candidate pairs per condition and keep those separated by the margin.
    BuildPairs {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Preference-finetune the denoiser on a pair file.
    DpoFinetune {
        pairs: PathBuf,
        out_dir: PathBuf,
        /// Dataset manifest of held-out conditions scored before and after.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "STROKERIG_BIND")]
        bind: Option<String>,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Summarise run directories (manifests, final losses, reports) as JSON.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Cli {
    pub fn load_config(&self) -> Result<Config> {
        let mut cfg = Config::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.vae_train.seed = s;
            cfg.dit_train.seed = s;
            cfg.dpo.seed = s;
        }
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.load_config()?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::invalid("no subcommand given; see `strokerig --help`"));
    };
    match command {
        Command::Align { input, output } => align(&cfg, &input, &output),
        Command::Filter { input, output } => filter(&cfg, &input, &output),
        Command::SimulateStrokes { input, out_dir, per_record } => simulate(&cfg, &input, &out_dir, per_record),
        Command::TrainVae { input, out_dir } => train_vae_cmd(&cfg, &input, &out_dir),
        Command::TrainDit { input, out_dir, vae } => {
            let vae = vae.unwrap_or_else(|| cfg.models.vae.clone());
            train_dit_cmd(&cfg, &input, &out_dir, &vae)
        }
        Command::Sample { stroke, text, guidance, steps, out, models } => {
            sample(&cfg, &stroke, text, guidance, steps, out.as_deref(), &models)
        }
        Command::Eval { pred, gt, manifest, out, models } => match (pred, gt, manifest) {
            (Some(p), Some(g), None) => eval_dirs(&cfg, &p, &g, out.as_deref()),
            (None, None, Some(m)) => eval_generated(&cfg, &m, out.as_deref(), &models),
            _ => Err(CliError::invalid("eval needs either --pred and --gt, or --manifest")),
        },
        Command::BuildPairs { input, output, models } => build_pairs_cmd(&cfg, &input, &output, &models),
        Command::DpoFinetune { pairs, out_dir, heldout, models } => {
            dpo_cmd(&cfg, &pairs, &out_dir, heldout.as_deref(), &models)
        }
        Command::Serve { bind, models } => serve(cfg, bind, &models),
        Command::Report { runs, out } => report(&runs, out.as_deref()),
    }
}

fn frame_json(f: &CanonicalFrame) -> Value {
    let r = &f.rotation;
    json!({
        "method": format!("{:?}", f.method).to_lowercase(),
        "low_confidence": f.low_confidence,
        "rotation": (0..3).map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]).collect::<Vec<_>>(),
        "notes": f.notes,
    })
}

fn aligner(cfg: &Config) -> Aligner {
    let a = Aligner::new(cfg.align.thresholds.clone());
    if cfg.align.mock_oracle {
        a
    } else {
        a.without_oracle()
    }
}

fn align(cfg: &Config, input: &Path, output: &Path) -> Result<()> {
    let aligner = aligner(cfg);
    let frames_path = sidecar(output, "frames.json");
    let manifest = Manifest::new("align", cfg, cfg.seed, &[input.to_path_buf()], json!({}))?;
    if input.extension().is_some_and(|e| e == "jsonl") {
        let records = read_records(input)?;
        let mut kept = Vec::new();
        let mut frames = Vec::new();
        for r in records {
            match aligner.align(&r.skeleton) {
                Ok((g, f)) => {
                    frames.push(json!({ "source_id": r.source_id, "frame": frame_json(&f) }));
                    kept.push(DatasetRecord { skeleton: g, ..r });
                }
                Err(e) => frames.push(json!({ "source_id": r.source_id, "error": e.to_string() })),
            }
        }
        write_records(output, &kept)?;
        write_json(&frames_path, &frames)?;
    } else {
        let g = read_skeleton(input)?;
        let (aligned, frame) = aligner.align(&g).map_err(|e| CliError::invalid(format!("{}: {e}", input.display())))?;
        write_text(output, &(skeleton_to_string(&aligned) + "\n"))?;
        write_json(&frames_path, &frame_json(&frame))?;
    }
    manifest.finish(&[output.to_path_buf(), frames_path], &sidecar(output, "manifest.json"))
}

fn filter(cfg: &Config, input: &Path, output: &Path) -> Result<()> {
    let manifest = Manifest::new("filter", cfg, cfg.seed, &[input.to_path_buf()], json!({}))?;
    let (kept, stats) = filter_records(&read_records(input)?, &cfg.filter);
    write_records(output, &kept)?;
    let stats_path = sidecar(output, "stats.json");
    write_json(&stats_path, &stats)?;
    manifest.finish(&[output.to_path_buf(), stats_path], &sidecar(output, "manifest.json"))
}

fn simulate(cfg: &Config, input: &Path, out_dir: &Path, per_record: usize) -> Result<()> {
    if per_record == 0 {
        return Err(CliError::invalid("--per-record must be at least 1"));
    }
    let manifest = Manifest::new("simulate-strokes", cfg, cfg.seed, &[input.to_path_buf()], json!({ "per_record": per_record }))?;
    let records = read_records(input)?;
    let dir = out_dir.join("strokes");
    create_dir(&dir)?;
    let mut seen = BTreeMap::<String, usize>::new();
    for (i, r) in records.iter().enumerate() {
        let base = safe_name(&r.source_id);
        let dup = seen.entry(base.clone()).or_default();
        let name = if *dup == 0 { base } else { format!("{base}-{dup}") };
        *dup += 1;
        for k in 0..per_record {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((i * per_record + k) as u64);
            let mut s = simulate_stroke(&r.skeleton, &mut rng, &cfg.stroke);
            s.text = Some(r.caption.clone()).filter(|c| !c.trim().is_empty());
            let text = serde_json::to_string(&s).map_err(CliError::internal)? + "\n";
            write_text(&dir.join(format!("{name}_{k}.json")), &text)?;
        }
    }
    manifest.finish_in(&[dir], out_dir)
}

fn train_vae_cmd(cfg: &Config, input: &Path, out_dir: &Path) -> Result<()> {
    let manifest = Manifest::new("train-vae", cfg, cfg.vae_train.seed, &[input.to_path_buf()], json!({}))?;
    let graphs: Vec<SkeletonGraph> = read_records(input)?.into_iter().map(|r| r.skeleton).collect();
    let mut vae = SkVae::new(cfg.vae.clone(), cfg.vae_train.seed)?;
    let curve = train_vae(&mut vae, &graphs, &cfg.vae_train)?;
    create_dir(out_dir)?;
    let ckpt = out_dir.join("vae.ckpt");
    vae.to_checkpoint().save(&ckpt)?;
    let csv = out_dir.join("vae_loss.csv");
    write_csv(&csv, "step,total,recon,kl", curve.iter().map(|r| format!("{},{},{},{}", r.step, r.total, r.recon, r.kl)))?;
    manifest.finish_in(&[ckpt, csv], out_dir)
}

fn train_dit_cmd(cfg: &Config, input: &Path, out_dir: &Path, vae_path: &Path) -> Result<()> {
    let vae = load_vae(vae_path)?;
    let manifest = Manifest::new("train-dit", cfg, cfg.dit_train.seed, &[input.to_path_buf(), vae_path.to_path_buf()], json!({}))?;
    let records = read_records(input)?;
    let embedder = cfg.text.build()?;
    let mut dit = SkDit::new(cfg.dit.clone(), cfg.dit_train.seed)?;
    let report = train_dit(&mut dit, &vae, &records, embedder.as_ref(), &cfg.dit_train)?;
    create_dir(out_dir)?;
    let ckpt = out_dir.join("dit.ckpt");
    dit.to_checkpoint().save(&ckpt)?;
    let csv = out_dir.join("dit_loss.csv");
    write_csv(&csv, "step,loss", report.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")))?;
    manifest.finish_in(&[ckpt, csv], out_dir)
}

fn sample(
    cfg: &Config,
    stroke_path: &Path,
    text: Option<String>,
    guidance: Option<f64>,
    steps: Option<usize>,
    out: Option<&Path>,
    models: &ModelArgs,
) -> Result<()> {
    let (vae, dit) = models.paths(cfg);
    let stroke = read_stroke(stroke_path)?;
    let model = load_model(cfg, &vae, &dit)?;
    let sampler = SamplerConfig { guidance: guidance.unwrap_or(cfg.sampler.guidance), steps: steps.or(cfg.sampler.steps) };
    let prompt = text.clone().or_else(|| stroke.text.clone());
    let job = Job { stroke, prompt, seed: cfg.seed };
    let mut outs = model.pipeline.generate_batch_with(std::slice::from_ref(&job), &sampler)?;
    let json = skeleton_to_string(&outs.remove(0).skeleton) + "\n";
    match out {
        None => print!("{json}"),
        Some(path) => {
            let args = json!({ "text": text, "guidance": sampler.guidance, "steps": sampler.steps });
            let manifest = Manifest::new("sample", cfg, cfg.seed, &[stroke_path.to_path_buf(), vae, dit], args)?;
            write_text(path, &json)?;
            manifest.finish(&[path.to_path_buf()], &sidecar(path, "manifest.json"))?;
        }
    }
    Ok(())
}

fn json_files(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| CliError::invalid(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();
    Ok(names)
}

fn emit_report<T: Serialize>(value: &T, out: Option<&Path>) -> Result<Option<PathBuf>> {
    match out {
        None => {
            println!("{}", serde_json::to_string_pretty(value).map_err(CliError::internal)?);
            Ok(None)
        }
        Some(dir) => {
            create_dir(dir)?;
            let p = dir.join("report.json");
            write_json(&p, value)?;
            Ok(Some(p))
        }
    }
}

fn eval_dirs(cfg: &Config, pred: &Path, gt: &Path, out: Option<&Path>) -> Result<()> {
    let names = json_files(gt)?;
    if names.is_empty() {
        return Err(CliError::invalid(format!("no .json skeletons in {}", gt.display())));
    }
    let mut items = Vec::with_capacity(names.len());
    for n in &names {
        let g = read_skeleton(&gt.join(n))?;
        let p_path = pred.join(n);
        if !p_path.is_file() {
            return Err(CliError::invalid(format!("no prediction {} for ground truth {n}", p_path.display())));
        }
        let p = read_skeleton(&p_path)?;
        let r = CdReport::compute(&p, &g, cfg.eval.samples_per_bone).map_err(|e| CliError::invalid(format!("{n}: {e}")))?;
        let cat = g.category.as_ref().map(|c| c.as_str().to_string()).unwrap_or_else(|| "other".into());
        items.push((cat, r));
    }
    let report = EvalReport::aggregate(items.iter().map(|(c, r)| (c.as_str(), *r)));
    let manifest = Manifest::new("eval", cfg, cfg.seed, &[pred.to_path_buf(), gt.to_path_buf()], json!({}))?;
    if let (Some(p), Some(dir)) = (emit_report(&report, out)?, out) {
        manifest.finish_in(&[p], dir)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DropRow {
    k: usize,
    overall: CdReport,
    per_category: BTreeMap<String, CdReport>,
    count: usize,
}

#[derive(Serialize)]
struct GeneratedReport {
    #[serde(flatten)]
    report: EvalReport,
    joint_drop: Vec<DropRow>,
}

fn eval_generated(cfg: &Config, manifest_path: &Path, out: Option<&Path>, models: &ModelArgs) -> Result<()> {
    let (vae, dit) = models.paths(cfg);
    let model = load_model(cfg, &vae, &dit)?;
    let manifest = Manifest::new("eval", cfg, cfg.seed, &[manifest_path.to_path_buf(), vae, dit], json!({}))?;
    let cases: Vec<EvalCase> = eval_cases(&read_records(manifest_path)?, &cfg.stroke, cfg.seed);
    let spb = cfg.eval.samples_per_bone;
    let run = evaluate(&model.pipeline, &cases, cfg.seed, spb)?;
    let curve = joint_drop_curve(&model.pipeline, &cases, &cfg.eval.drop_ks, cfg.seed, spb)?;
    let joint_drop: Vec<DropRow> = curve
        .into_iter()
        .map(|p| DropRow { k: p.k, overall: p.report.overall, per_category: p.report.per_category, count: p.report.count })
        .collect();
    let csv_rows: Vec<String> =
        joint_drop.iter().map(|r| format!("{},{},{},{}", r.k, r.overall.cd_j2j, r.overall.cd_j2b, r.overall.cd_b2b)).collect();
    let full = GeneratedReport { report: run.report, joint_drop };
    if let (Some(p), Some(dir)) = (emit_report(&full, out)?, out) {
        let csv = dir.join("joint_drop.csv");
        write_csv(&csv, "k,cd_j2j,cd_j2b,cd_b2b", csv_rows)?;
        let pred_dir = dir.join("predictions");
        create_dir(&pred_dir)?;
        for (c, g) in cases.iter().zip(&run.predictions) {
            write_text(&pred_dir.join(format!("{}.json", safe_name(&c.id))), &(skeleton_to_string(g) + "\n"))?;
        }
        manifest.finish_in(&[p, csv, pred_dir], dir)?;
    }
    Ok(())
}

fn conditions(cfg: &Config, records: &[DatasetRecord], seed: u64) -> Vec<PreferenceCondition> {
    eval_cases(records, &cfg.stroke, seed)
        .into_iter()
        .map(|c| PreferenceCondition { id: c.id, stroke: c.stroke, prompt: c.prompt })
        .collect()
}

fn build_pairs_cmd(cfg: &Config, input: &Path, output: &Path, models: &ModelArgs) -> Result<()> {
    let (vae, dit) = models.paths(cfg);
    let model = load_model(cfg, &vae, &dit)?;
    let manifest = Manifest::new("build-pairs", cfg, cfg.seed, &[input.to_path_buf(), vae, dit], json!({}))?;
    let conds = conditions(cfg, &read_records(input)?, cfg.seed);
    let set = build_pairs(&conds, &model.pipeline, &CdProxyScorer, cfg.dpo.margin, cfg.seed)?;
    write_jsonl(output, &set.pairs)?;
    let stats = sidecar(output, "stats.json");
    write_json(&stats, &json!({ "conditions": conds.len(), "pairs": set.pairs.len(), "skipped": set.skipped, "margin": cfg.dpo.margin }))?;
    manifest.finish(&[output.to_path_buf(), stats], &sidecar(output, "manifest.json"))
}

fn dpo_cmd(cfg: &Config, pairs_path: &Path, out_dir: &Path, heldout: Option<&Path>, models: &ModelArgs) -> Result<()> {
    let (vae, dit) = models.paths(cfg);
    let mut model = load_model(cfg, &vae, &dit)?;
    let mut inputs = vec![pairs_path.to_path_buf(), vae, dit];
    inputs.extend(heldout.map(Path::to_path_buf));
    let manifest = Manifest::new("dpo-finetune", cfg, cfg.dpo.seed, &inputs, json!({}))?;
    let pairs: Vec<PreferencePair> = read_jsonl(pairs_path)?;
    let held = match heldout {
        Some(p) => conditions(cfg, &read_records(p)?, cfg.seed.wrapping_add(1)),
        None => Vec::new(),
    };
    let report = dpo_finetune(&mut model.pipeline, &pairs, &held, &CdProxyScorer, &cfg.dpo)?;
    create_dir(out_dir)?;
    let ckpt = out_dir.join("dit.ckpt");
    model.pipeline.dit.to_checkpoint().save(&ckpt)?;
    let csv = out_dir.join("dpo_loss.csv");
    write_csv(&csv, "step,loss", report.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")))?;
    let rep = out_dir.join("report.json");
    write_json(
        &rep,
        &json!({
            "pairs": report.pairs,
            "heldout": report.heldout,
            "pre_score": report.pre_score,
            "post_score": report.post_score,
            "scorer": "cd-proxy",
        }),
    )?;
    manifest.finish_in(&[ckpt, csv, rep], out_dir)
}

fn serve(mut cfg: Config, bind: Option<String>, models: &ModelArgs) -> Result<()> {
    if let Some(b) = bind {
        cfg.service.bind = b;
    }
    let (vae, dit) = models.paths(&cfg);
    let model = if vae.is_file() && dit.is_file() {
        Some(load_model(&cfg, &vae, &dit)?)
    } else {
        log::warn!("checkpoints {} / {} not found; serving without a model", vae.display(), dit.display());
        None
    };
    let state = AppState::new(model, cfg.seed);
    let rt = tokio::runtime::Runtime::new().map_err(CliError::internal)?;
    rt.block_on(service::serve(state, &cfg.service))
        .map_err(|e| CliError::internal(format!("server on {}: {e}", cfg.service.bind)))
}

fn find_manifests(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_file() {
        out.push(p.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
        .map_err(|e| CliError::invalid(format!("cannot list {}: {e}", p.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for e in entries {
        if e.is_dir() {
            find_manifests(&e, out)?;
        } else if e.file_name().is_some_and(|n| n.to_string_lossy().ends_with("manifest.json")) {
            out.push(e);
        }
    }
    Ok(())
}

/// Last data row of a CSV as a column-name map.
fn last_row(path: &Path) -> Option<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let last = lines.filter(|l| !l.is_empty()).last()?;
    Some(header.iter().zip(last.split(',')).filter_map(|(h, v)| Some((h.to_string(), v.parse().ok()?))).collect())
}

fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut manifests = Vec::new();
    for r in runs {
        find_manifests(r, &mut manifests)?;
    }
    if manifests.is_empty() {
        return Err(CliError::invalid("no run manifests found"));
    }
    let mut rows = Vec::new();
    for m in &manifests {
        let man: Manifest = serde_json::from_str(&read_text(m)?)
            .map_err(|e| CliError::invalid(format!("{}: not a run manifest: {e}", m.display())))?;
        let mut finals = BTreeMap::new();
        let mut reports = BTreeMap::new();
        for o in &man.outputs {
            let p = Path::new(&o.path);
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name.ends_with(".csv") {
                if let Some(row) = last_row(p) {
                    finals.insert(name, row);
                }
            } else if name == "report.json" || name.ends_with(".stats.json") {
                if let Ok(v) = read_text(p).and_then(|t| serde_json::from_str::<Value>(&t).map_err(CliError::internal)) {
                    reports.insert(name, v);
                }
            }
        }
        rows.push(json!({
            "manifest": m.display().to_string(),
            "command": man.command,
            "seed": man.seed,
            "code_version": man.code_version,
            "outputs": man.outputs.len(),
            "final_rows": finals,
            "reports": reports,
        }));
    }
    let summary = json!({ "runs": rows });
    match out {
        None => println!("{}", serde_json::to_string_pretty(&summary).map_err(CliError::internal)?),
        Some(p) => write_json(p, &summary)?,
    }
    Ok(())
}
