//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass substrings as arguments to run a subset.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strokerig_core::align::synthetic::{biped, random_rotation};
use strokerig_core::align::Aligner;
use strokerig_core::datakit::write_manifest;
use strokerig_core::metrics::{CdReport, DEFAULT_SAMPLES_PER_BONE};
use strokerig_core::stroke::StrokeSimConfig;
use strokerig_core::textenc::HashEmbedder;
use strokerig_core::{SkeletonGraph, View};
use strokerig_model::experiments::{
    ablation_data, eval_cases, evaluate, joint_drop_curve, overfit_ablation, toy_dpo, AblationConfig, ToyDpoConfig,
};
use strokerig_model::gradcheck::{check, GradCheck};
use strokerig_model::params::AdamConfig;
use strokerig_model::pipeline::Pipeline;
use strokerig_model::preference::{dpo_loss, dpo_loss_and_grad, Candidate, DpoDraw, PreferenceCondition, PreferencePair};
use strokerig_model::skdit::{train_dit, Conditioning, DitConfig, DitTrainConfig, SkDit};
use strokerig_model::skvae::{mean_joint_error, standard_normal, train_vae, SkVae, VaeConfig, VaeTrainConfig};
use strokerig_model::{toy, ParamSet};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn random_tree(rng: &mut ChaCha8Rng) -> SkeletonGraph {
    let n = rng.random_range(2..=10);
    let joints = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    SkeletonGraph::new(joints, edges).unwrap()
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (random_tree(&mut rng), random_tree(&mut rng));
        let r = CdReport::compute(&a, &b, DEFAULT_SAMPLES_PER_BONE).map_err(|e| e.to_string())?;
        worst = worst
            .max((r.cd_j2j - oracle::j2j(&a.joints, &b.joints)).abs())
            .max((r.cd_j2b - oracle::j2b(&a.joints, &a.bones(), &b.joints, &b.bones())).abs())
            .max((r.cd_b2b - oracle::b2b(&a.bones(), &b.bones(), DEFAULT_SAMPLES_PER_BONE)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-9 && secs < 30.0, format!("1000 graph pairs, max |diff| {worst:.2e}, {secs:.1}s"))
}

fn y_shape() -> SkeletonGraph {
    SkeletonGraph::new(
        vec![[0.0, -0.4, 0.1], [0.0, 0.2, 0.0], [0.5, 0.8, -0.2], [-0.6, 0.7, 0.3], [0.1, -1.0, 0.2]],
        [(0, 1), (1, 2), (1, 3), (0, 4)],
    )
    .unwrap()
}

fn tiny_dit() -> DitConfig {
    DitConfig { width: 8, blocks: 2, heads: 2, latent_dim: 3, text_dim: 6, text_tokens: 2, mlp_ratio: 2, timesteps: 20, zero_init: false, ..DitConfig::default() }
}

fn grad_summary(label: &str, r: &GradCheck) -> (bool, String) {
    let ok = r.points.len() >= 20 && r.max_rel_error() < 1e-4;
    (ok, format!("{label} {} points max rel {:.1e}", r.points.len(), r.max_rel_error()))
}

fn pref_pair(rng: &mut ChaCha8Rng, id: &str, prompt: Option<&str>) -> PreferencePair {
    let g = y_shape();
    let mut cand = |seed| {
        let z = standard_normal(rng, g.len(), 3);
        Candidate { seed, skeleton: g.clone(), latent: (0..z.rows).map(|r| z.row(r).to_vec()).collect() }
    };
    let (winner, loser) = (cand(1), cand(2));
    PreferencePair {
        condition: PreferenceCondition { id: id.into(), stroke: g.project(View::Front).unwrap(), prompt: prompt.map(str::to_string) },
        winner,
        loser,
        scores: [0.9, 0.5],
    }
}

fn gradients() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut push = |(o, l): (bool, String)| {
        ok &= o;
        lines.push(l);
    };

    let mut vae = SkVae::new(VaeConfig { width: 8, heads: 2, latent_dim: 3, ..VaeConfig::default() }, 11).unwrap();
    vae.params.perturb(&mut ChaCha8Rng::seed_from_u64(1), 0.05);
    let g = y_shape();
    let eps = standard_normal(&mut ChaCha8Rng::seed_from_u64(2), g.len(), 3);
    let (_, grads) = vae.loss_and_grad(&g, &eps).unwrap();
    let f = |p: &ParamSet| {
        let mut v = vae.clone();
        v.params = p.clone();
        v.loss(&g, &eps).unwrap().total
    };
    push(grad_summary("vae", &check(&vae.params, &grads, f, 24, 1e-6, 1e-6, 3)));

    let mut dit = SkDit::new(tiny_dit(), 5).unwrap();
    dit.params.perturb(&mut ChaCha8Rng::seed_from_u64(6), 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cond = Conditioning::from_stroke(&g.project(View::Front).unwrap(), Some(HashEmbedder::new(6).embed_vec("a small tree")), 3);
    let z0 = standard_normal(&mut rng, cond.len(), 3);
    let e = standard_normal(&mut rng, cond.len(), 3);
    let (_, grads) = dit.loss_and_grad(&z0, &cond, &e).unwrap();
    let f = |p: &ParamSet| {
        let mut d = dit.clone();
        d.params = p.clone();
        d.loss(&z0, &cond, &e).unwrap()
    };
    push(grad_summary("diffusion", &check(&dit.params, &grads, f, 24, 1e-6, 1e-6, 8)));

    let reference = SkDit::new(tiny_dit(), 9).unwrap();
    let mut theta = reference.clone();
    theta.params.perturb(&mut ChaCha8Rng::seed_from_u64(12), 0.02);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pairs = [pref_pair(&mut rng, "a", Some("a small tree")), pref_pair(&mut rng, "b", None)];
    let refs: Vec<&PreferencePair> = pairs.iter().collect();
    let draws: Vec<DpoDraw> = refs.iter().map(|p| DpoDraw::sample(p, 20, &mut rng)).collect();
    let texts = vec![Some(HashEmbedder::new(6).embed_vec("a small tree")), None];
    let (_, grads) = dpo_loss_and_grad(&theta, &reference, &refs, &draws, &texts, 0.5).unwrap();
    let f = |p: &ParamSet| {
        let mut d = theta.clone();
        d.params = p.clone();
        dpo_loss(&d, &reference, &refs, &draws, &texts, 0.5).unwrap()
    };
    push(grad_summary("dpo", &check(&theta.params, &grads, f, 24, 1e-6, 1e-7, 13)));
    ensure(ok, lines.join("; "))
}

fn dpo_identity() -> Outcome {
    let model = SkDit::new(tiny_dit(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    let mut evaluated = 0;
    for trial in 0..10 {
        let n = rng.random_range(1..=4);
        let pairs: Vec<PreferencePair> =
            (0..n).map(|i| pref_pair(&mut rng, &format!("{trial}-{i}"), (i % 2 == 0).then_some("a bird"))).collect();
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let draws: Vec<DpoDraw> = refs.iter().map(|p| DpoDraw::sample(p, 20, &mut rng)).collect();
        let texts: Vec<_> = pairs.iter().map(|p| p.condition.prompt.as_deref().map(|t| HashEmbedder::new(6).embed_vec(t))).collect();
        for beta in [1e-3, 1.0, 1000.0, rng.random_range(0.1..5000.0)] {
            let l = dpo_loss(&model, &model, &refs, &draws, &texts, beta).map_err(|e| e.to_string())?;
            worst = worst.max((l - std::f64::consts::LN_2).abs());
            evaluated += 1;
        }
    }
    ensure(worst < 1e-9, format!("{evaluated} pair sets and betas, max |loss - ln 2| {worst:.1e}"))
}

fn ablation(label: &str, cfg: AblationConfig) -> Outcome {
    let data = ablation_data(&cfg).map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut slowest: f64 = 0.0;
    let mut runs = Vec::new();
    for seed in 0..5 {
        let r = overfit_ablation(&data, &cfg, seed).map_err(|e| e.to_string())?;
        wins += r.jxy_faster() as usize;
        slowest = slowest.max(r.seconds);
        let show = |s: Option<usize>| s.map_or(format!(">{}", r.without_budget), |v| v.to_string());
        runs.push(format!("{}/{}", show(r.with_jxy), show(r.without_jxy)));
    }
    ensure(
        wins >= 4 && slowest <= 600.0,
        format!("{label}: stroke-conditioned faster in {wins}/5 (steps with/without {}), slowest replicate {slowest:.0}s", runs.join(" ")),
    )
}

fn vae_roundtrip() -> Outcome {
    let graphs: Vec<SkeletonGraph> = toy::dataset(5, 7).into_iter().map(|r| r.skeleton).collect();
    let mut vae = SkVae::new(VaeConfig::default(), 0).unwrap();
    let cfg = VaeTrainConfig { steps: 4000, batch_size: 64, adam: AdamConfig::with_lr(1e-3), seed: 1 };
    train_vae(&mut vae, &graphs, &cfg).map_err(|e| e.to_string())?;
    let err = mean_joint_error(&vae, &graphs).map_err(|e| e.to_string())?;
    ensure(err < 0.01, format!("mean joint error {err:.4} on 5 skeletons"))
}

fn alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let aligner = Aligner::default();
    let (mut within, mut handed) = (0, 0);
    for i in 0..500 {
        let g = biped(&mut rng, i % 2 == 0, 0.01);
        let r = random_rotation(&mut rng);
        let Ok(f) = aligner.frame(&g.rotated_about(&r, [0.0; 3])) else { continue };
        within += (f.max_axis_error_deg(&r.transpose()) < 5.0) as usize;
        let m = f.rotation;
        handed += ((m.determinant() - 1.0).abs() < 1e-6 && (m.transpose() * m - Matrix3::identity()).abs().max() < 1e-6) as usize;
    }
    ensure(within >= 475 && handed == 500, format!("{within}/500 within 5 degrees, {handed}/500 right-handed"))
}

fn dpo_gain() -> Outcome {
    let r = toy_dpo(&ToyDpoConfig::default()).map_err(|e| e.to_string())?;
    ensure(
        r.post_score > r.pre_score,
        format!("{} pairs, held-out score {:.4} -> {:.4} over {} conditions", r.pairs, r.pre_score, r.post_score, r.heldout),
    )
}

fn joint_drop() -> Outcome {
    let records = toy::dataset(40, 31);
    let graphs: Vec<SkeletonGraph> = records.iter().map(|r| r.skeleton.clone()).collect();
    let mut vae = SkVae::new(VaeConfig::default(), 0).unwrap();
    train_vae(&mut vae, &graphs, &VaeTrainConfig { steps: 300, batch_size: 32, adam: AdamConfig::with_lr(1e-3), seed: 1 })
        .map_err(|e| e.to_string())?;
    let mut dit = SkDit::new(DitConfig { timesteps: 20, ..DitConfig::desk() }, 0).unwrap();
    let text = dit.config.text_dim;
    let tcfg = DitTrainConfig { steps: 200, batch_size: 16, adam: AdamConfig::with_lr(1e-3), ..DitTrainConfig::default() };
    train_dit(&mut dit, &vae, &records, &HashEmbedder::new(text), &tcfg).map_err(|e| e.to_string())?;
    let p = Pipeline::new(vae, dit, Box::new(HashEmbedder::new(text))).map_err(|e| e.to_string())?;
    let cases: Vec<_> = eval_cases(&records, &StrokeSimConfig::default(), 32).into_iter().filter(|c| c.stroke.len() > 5).collect();
    let base = evaluate(&p, &cases, 33, DEFAULT_SAMPLES_PER_BONE).map_err(|e| e.to_string())?;
    let curve = joint_drop_curve(&p, &cases, &[0, 1, 2, 3, 4, 5], 33, DEFAULT_SAMPLES_PER_BONE).map_err(|e| e.to_string())?;
    let finite = curve.iter().all(|d| {
        let o = &d.report.overall;
        o.cd_j2j.is_finite() && o.cd_j2b.is_finite() && o.cd_b2b.is_finite()
    });
    let shown: Vec<String> = curve.iter().map(|d| format!("k={} j2j {:.4}", d.k, d.report.overall.cd_j2j)).collect();
    ensure(
        curve.len() == 6 && curve[0].report == base.report && finite,
        format!("{} cases, k=0 equals plain evaluation: {}; {}", cases.len(), curve[0].report == base.report, shown.join(", ")),
    )
}

fn cli_run(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_strokerig"))
        .current_dir(dir)
        .env_remove("STROKERIG_CONFIG")
        .env_remove("STROKERIG_VAE")
        .env_remove("STROKERIG_DIT")
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)));
    }
    Ok(o.stdout)
}

fn pipeline_run(dir: &Path) -> Result<(), String> {
    write_manifest(fs::File::create(dir.join("data.jsonl")).unwrap(), &toy::dataset(6, 5)).map_err(|e| e.to_string())?;
    fs::write(dir.join("s.json"), r#"{"joints2d": [[0,0.8],[0,0.2],[-0.4,-0.6],[0.4,-0.6]], "edges": [[0,1],[1,2],[1,3]]}"#).unwrap();
    cli_run(dir, &["train-vae", "data.jsonl", "models"])?;
    cli_run(dir, &["train-dit", "data.jsonl", "models"])?;
    cli_run(dir, &["sample", "--stroke", "s.json", "--text", "a heron", "--out", "sample.json"])?;
    cli_run(dir, &["eval", "--manifest", "data.jsonl", "--out", "ev"])?;
    cli_run(dir, &["build-pairs", "data.jsonl", "pairs.jsonl"])?;
    cli_run(dir, &["dpo-finetune", "pairs.jsonl", "tuned", "--heldout", "data.jsonl"])?;
    Ok(())
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() { stack.push(p) } else { out.push(p.strip_prefix(root).unwrap().to_path_buf()) }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline_run(a.path())?;
    pipeline_run(b.path())?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    if fa != fb {
        return Err("runs produced different file sets".into());
    }
    let differing: Vec<String> =
        fa.iter().filter(|f| fs::read(a.path().join(f)).unwrap() != fs::read(b.path().join(f)).unwrap()).map(|f| f.display().to_string()).collect();
    ensure(differing.is_empty(), format!("{} files compared, differing: {:?}", fa.len(), differing))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("metric oracle", metric_oracle),
        ("gradient suite", gradients),
        ("dpo identity", dpo_identity),
        ("ablation 1-sample", || ablation("1 sample", AblationConfig::default())),
        ("ablation 5-sample", || ablation("5 samples", AblationConfig::five_samples())),
        ("vae roundtrip", vae_roundtrip),
        ("alignment recovery", alignment),
        ("dpo gain", dpo_gain),
        ("joint-drop curve", joint_drop),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|q| name.contains(q.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
