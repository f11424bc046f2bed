use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ctsae::data::{load_dataset, read_manifest, split_indices, synthesize, GlitchSample};
use ctsae::gradcheck::{model_check_config, model_check_variants, model_grad_check};
use ctsae::io::{latents_to_points, read_latents, read_partition, write_latents, write_partition};
use ctsae::kmeans::{kmeans, DEFAULT_MAX_ITER, DEFAULT_TOL};
use ctsae::metrics::{evaluate, Partition};
use ctsae::pipeline::{encode_samples, prepare, run_benchmark, BenchmarkRun};
use ctsae::train::{last_path, train_loop, TrainState};
use ctsae::{BlockKind, Error, FusionMode, ModelConfig};
use ctsae_tensor::gradcheck::{op_suite, GradCheckConfig};
use ctsae_tensor::OpKind;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::run_config::{model_diff, RunConfig};

/// Resolved configuration written into an output directory.
pub const RUN_CONFIG_FILE: &str = "run.conf";

/// Resolved configuration path for a single-file output.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.conf");
    out.with_file_name(name)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn labels_of(samples: &[GlitchSample]) -> Vec<Option<usize>> {
    samples.iter().map(|s| s.label).collect()
}

pub fn synth(cfg: &RunConfig) -> CliResult<()> {
    let out = cfg.path("out")?;
    let spec = cfg.synth()?;
    create_dir(&out)?;
    cfg.write_resolved(&out.join(RUN_CONFIG_FILE))?;
    let rows = synthesize(&spec, &out)?;
    println!("wrote {} samples ({} classes x {}) to {}", rows.len(), spec.classes.len(), spec.samples_per_class, out.join("manifest.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    steps: usize,
    initial_val: f64,
    best_val: f64,
    best_checkpoint: PathBuf,
    last_checkpoint: PathBuf,
}

pub fn train(cfg: &RunConfig, resume: bool) -> CliResult<()> {
    let data = cfg.path("data")?;
    let out = cfg.path("out")?;
    let model_cfg = cfg.model()?;
    let train_cfg = cfg.train()?;
    let fractions = cfg.split()?;
    let mut state = if resume {
        let mut s = TrainState::<f32>::load(&last_path(&out))?;
        if cfg.sets_model() && s.model.config() != &model_cfg {
            return Err(mismatch(&last_path(&out), s.model.config(), &model_cfg));
        }
        s.train.epochs = train_cfg.epochs;
        s
    } else {
        TrainState::new(model_cfg, train_cfg)?
    };
    create_dir(&out)?;
    cfg.write_resolved(&out.join(RUN_CONFIG_FILE))?;

    let samples = prepare(&load_dataset(&data)?, state.model.config().input_size)?;
    let split = split_indices(&labels_of(&samples), fractions, state.train.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>();
    let (train, val) = (pick(&split.train), pick(&split.val));
    eprintln!("training on {} samples, validating on {}, epochs {}..={}", train.len(), val.len(), state.epoch + 1, state.train.epochs);
    let run = train_loop(&mut state, &train, &val, &out, &mut |_| {})?;
    for row in &run.curve {
        println!("epoch {:>4}  train {:.6}  val {:.6}", row.epoch, row.train, row.val);
    }
    println!("best validation loss {:.6} (initial {:.6}); checkpoint {}", run.best_val, run.initial_val, run.best_path.display());
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            epochs: state.epoch,
            steps: run.steps,
            initial_val: run.initial_val,
            best_val: run.best_val,
            best_checkpoint: run.best_path,
            last_checkpoint: run.last_path,
        },
    )
}

fn mismatch(ckpt: &Path, found: &ModelConfig, requested: &ModelConfig) -> CliError {
    let json = |m: &ModelConfig| serde_json::to_string(m).expect("config serializes");
    CliError::Config(format!(
        "model config of checkpoint {} does not match the requested one ({})\n  checkpoint: {}\n  requested:  {}",
        ckpt.display(),
        model_diff(found, requested).join("; "),
        json(found),
        json(requested),
    ))
}

pub fn encode(cfg: &RunConfig) -> CliResult<()> {
    let ckpt = cfg.path("checkpoint")?;
    let data = cfg.path("data")?;
    let out = cfg.path("out")?;
    let batch: usize = cfg.get("batch_size")?;
    let mut model = TrainState::<f32>::load(&ckpt)?.model;
    if cfg.sets_model() {
        let requested = cfg.model()?;
        if model.config() != &requested {
            return Err(mismatch(&ckpt, model.config(), &requested));
        }
    }
    let samples = prepare(&load_dataset(&data)?, model.config().input_size)?;
    let refs: Vec<&GlitchSample> = samples.iter().collect();
    let codes = encode_samples(&mut model, &refs, batch)?;
    let d = model.config().latent_dim;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_latents(&out, samples.len(), d, &codes)?;
    let ids_path = out.with_extension("ids");
    let ids: String = samples.iter().map(|s| format!("{}\n", s.id)).collect();
    fs::write(&ids_path, ids).map_err(|e| CliError::io(&ids_path, e))?;
    cfg.write_resolved(&sidecar(&out))?;
    println!("encoded {} samples to {} ({}x{}); ids in {}", samples.len(), out.display(), samples.len(), d, ids_path.display());
    Ok(())
}

pub fn cluster(cfg: &RunConfig) -> CliResult<()> {
    let latents = cfg.path("latents")?;
    let out = cfg.path("out")?;
    let k: usize = cfg.get("k")?;
    let seed: u64 = cfg.get("seed")?;
    let (n, d, values) = read_latents(&latents)?;
    let points = latents_to_points(n, d, &values)?;
    let km = kmeans(&points, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    write_partition(&out, &km.labels)?;
    cfg.write_resolved(&sidecar(&out))?;
    let mut sizes = vec![0usize; k];
    km.labels.iter().for_each(|&l| sizes[l] += 1);
    println!("k-means on {n} points in {d} dims: inertia {:.6} after {} iterations; sizes {sizes:?}", km.inertia, km.iterations);
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    n: u64,
    nmi: f64,
    ri: f64,
    ari: f64,
    detail: ctsae::metrics::ClusteringEvaluation,
}

pub fn evaluate_cmd(cfg: &RunConfig) -> CliResult<()> {
    let pred_path = cfg.path("pred")?;
    let pred = read_partition(&pred_path)?;
    let truth = match (cfg.raw("truth"), cfg.raw("data")) {
        (Some(t), _) => read_partition(Path::new(t))?,
        (None, Some(m)) => read_manifest(Path::new(m))?
            .into_iter()
            .map(|r| r.label.ok_or_else(|| CliError::Config(format!("manifest {m}: sample {} has no label", r.id))))
            .collect::<CliResult<_>>()?,
        (None, None) => return Err(CliError::Config("evaluate needs truth (a partition file) or data (a labelled manifest)".into())),
    };
    if truth.len() != pred.len() {
        return Err(CliError::Config(format!("truth has {} labels but prediction has {}", truth.len(), pred.len())));
    }
    let e = evaluate(&Partition::new(&truth)?, &Partition::new(&pred)?)?;
    println!("NMI {:.4}", e.nmi);
    println!("RI  {:.4}", e.ri);
    println!("ARI {:.4}", e.ari);
    let report = cfg.raw("report").map(PathBuf::from).unwrap_or_else(|| pred_path.with_extension("eval.json"));
    write_json(&report, &EvalReport { n: e.n, nmi: e.nmi, ri: e.ri, ari: e.ari, detail: e })?;
    cfg.write_resolved(&sidecar(&report))
}

/// The six ablation arms, named as in the printed table.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    vec![
        ("CNN-only", base.clone().single_branch(BlockKind::CnnOnly)),
        ("ViT-only", base.clone().single_branch(BlockKind::VitOnly)),
        ("CNN-ViT", base.clone().single_branch(BlockKind::CnnVit)),
        ("CNN-ViT none", base.clone().with_fusion(FusionMode::None)),
        ("CNN-ViT all_attention", base.clone().with_fusion(FusionMode::AllAttention)),
        ("CNN-ViT cls_fusion", base.clone().with_fusion(FusionMode::ClsFusion)),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub model: String,
    pub branches: usize,
    /// Means over the seeds that finished; `None` if any diverged.
    pub recon_mse: Option<f64>,
    pub ari: Option<f64>,
    pub nmi: Option<f64>,
    pub runs: Vec<BenchmarkRun>,
    pub diverged: Vec<u64>,
}

fn slug(name: &str) -> String {
    name.to_lowercase().replace([' ', '-'], "_")
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<22} {:>8} {:>10} {:>8} {:>8}\n", "Model", "Branches", "Recon-MSE", "ARI", "NMI");
    for r in rows {
        let f = |v: Option<f64>| v.map_or("diverged".to_string(), |v| format!("{v:.4}"));
        s += &format!("{:<22} {:>8} {:>10} {:>8} {:>8}\n", r.model, r.branches, f(r.recon_mse), f(r.ari), f(r.nmi));
    }
    s
}

pub fn ablate(cfg: &RunConfig) -> CliResult<()> {
    let data = cfg.path("data")?;
    let out = cfg.path("out")?;
    let base = cfg.model()?;
    let train_cfg = cfg.train()?;
    let seeds: Vec<u64> = cfg.list("seeds")?;
    if seeds.is_empty() {
        return Err(CliError::Config("seeds is empty".into()));
    }
    let fractions = cfg.split()?;
    create_dir(&out)?;
    cfg.write_resolved(&out.join(RUN_CONFIG_FILE))?;
    let samples = prepare(&load_dataset(&data)?, base.input_size)?;
    let labels = labels_of(&samples);

    let mut rows = Vec::new();
    for (name, model_cfg) in ablation_variants(&base) {
        let mut row = AblationRow {
            model: name.into(),
            branches: model_cfg.branches(),
            recon_mse: None,
            ari: None,
            nmi: None,
            runs: vec![],
            diverged: vec![],
        };
        for &seed in &seeds {
            let split = split_indices(&labels, fractions, seed)?;
            let tc = ctsae::train::TrainConfig { seed, ..train_cfg.clone() };
            let dir = out.join(slug(name)).join(format!("seed_{seed}"));
            match run_benchmark(&samples, &split, &model_cfg, &tc, &dir, &mut |_| {}) {
                Ok(run) => {
                    eprintln!("{name} seed {seed}: recon {:.4} ARI {:.4} NMI {:.4} ({:.0} s)", run.recon_mse, run.ari, run.nmi, run.seconds);
                    row.runs.push(run);
                }
                Err(e @ Error::Divergence { .. }) => {
                    eprintln!("{name} seed {seed}: {e}");
                    row.diverged.push(seed);
                }
                Err(e) => return Err(e.into()),
            }
        }
        if row.diverged.is_empty() {
            let mean = |f: fn(&BenchmarkRun) -> f64| Some(row.runs.iter().map(f).sum::<f64>() / row.runs.len() as f64);
            row.recon_mse = mean(|r| r.recon_mse);
            row.ari = mean(|r| r.ari);
            row.nmi = mean(|r| r.nmi);
        }
        rows.push(row);
    }
    let table = format_table(&rows);
    print!("{table}");
    fs::write(out.join("ablation.txt"), &table).map_err(|e| CliError::io(out.join("ablation.txt"), e))?;
    write_json(&out.join("ablation.json"), &rows)?;
    let diverged: Vec<&str> = rows.iter().filter(|r| !r.diverged.is_empty()).map(|r| r.model.as_str()).collect();
    if diverged.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("diverged: {}", diverged.join(", "))))
    }
}

pub fn gradcheck(cfg: &RunConfig, inject_bug: bool) -> CliResult<()> {
    let seed: u64 = cfg.get("seed")?;
    let corrupt = inject_bug.then_some(OpKind::Linear);
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut line = |name: &str, err: f64, tol: f64| {
        let ok = err < tol;
        println!("{:<4} {name:<34} max_rel_err {err:.3e} (tolerance {tol:.0e})", if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name.to_string());
        }
    };
    let op_cfg = GradCheckConfig { seed, corrupt, ..GradCheckConfig::default() };
    for case in op_suite(&op_cfg).map_err(ctsae::Error::from)? {
        line(&format!("op/{}", case.name), case.report.max_rel_err, op_cfg.tolerance);
    }
    let model_cfg = GradCheckConfig { corrupt, ..model_check_config(seed) };
    for (name, m) in model_check_variants() {
        let r = model_grad_check(&m, 2, &model_cfg)?;
        line(&format!("model/{name}"), r.max_rel_err, model_cfg.tolerance);
    }
    println!("{:.1} s", start.elapsed().as_secs_f64());
    if failed.is_empty() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradcheck failed: {}", failed.join(", "))))
    }
}
