use std::path::PathBuf;

use clap::Args;

use unite::analysis;
use unite::config::RunConfig;
use unite::data::eval::{balanced_labels, evaluate_gen, evaluate_recon, psnr};
use unite::data::probe::{Probe, ProbeConfig};
use unite::data::synth::Dataset;
use unite::data::tensor_file;
use unite::flow;
use unite::rng::{Purpose, RngStream};
use unite::tensor::Tensor;
use unite::trainer::{load_model, Trainer};
use unite::{Result, UniteError};

/// Output root: --run-dir flag, else the config's run_dir, else
/// $UNITE_RUN_DIR/run-<seed>, else ./runs/run-<seed>.
pub fn resolve_run_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    if !cfg.run_dir.is_empty() {
        return PathBuf::from(&cfg.run_dir);
    }
    let root = std::env::var("UNITE_RUN_DIR").unwrap_or_else(|_| "runs".into());
    PathBuf::from(root).join(format!("run-{}", cfg.seed))
}

fn load_config(path: &Option<PathBuf>, sets: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| UniteError::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.apply_override(k, v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON config file; defaults apply for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted overrides, e.g. --set lr=0.001 (repeatable).
    #[arg(long = "set")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Continue bit-exactly from a checkpoint (config comes from it).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let ck = unite::data::checkpoint::load(ckpt)?;
            let mut cfg: RunConfig = serde_json::from_value(ck.config.clone())
                .map_err(|e| UniteError::Config(format!("checkpoint config: {e}")))?;
            if let Some(dir) = &a.run_dir {
                cfg.run_dir = dir.display().to_string();
            }
            let mut tr = Trainer::new(&cfg)?;
            tr.load_state(&ck)?;
            tr
        }
        None => {
            let mut cfg = load_config(&a.config, &a.sets, a.seed)?;
            cfg.run_dir = resolve_run_dir(&a.run_dir, &cfg).display().to_string();
            Trainer::new(&cfg)?
        }
    };
    std::fs::create_dir_all(&trainer.cfg.run_dir)?;
    println!("training to step {} in {}", trainer.cfg.total_steps, trainer.cfg.run_dir);
    let final_ckpt = trainer.run()?;
    if let Some(p) = final_ckpt {
        println!("final checkpoint: {}", p.display());
    }
    Ok(())
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fixed class index; mutually exclusive with --balanced.
    #[arg(long, conflicts_with = "balanced")]
    pub class: Option<usize>,
    /// Exactly n/num_classes samples per class.
    #[arg(long)]
    pub balanced: bool,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long)]
    pub solver: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f32>,
    #[arg(long)]
    pub t_start: Option<f32>,
    #[arg(long)]
    pub t_end: Option<f32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_sample(a: SampleArgs) -> Result<()> {
    let (mut cfg, model) = load_model(&a.checkpoint, true)?;
    if let Some(s) = &a.solver {
        cfg.apply_override("solver", s)?;
    }
    if let Some(v) = a.steps {
        cfg.sample_steps = v;
    }
    if let Some(v) = a.cfg_scale {
        cfg.cfg_scale = v;
    }
    if let Some(v) = a.t_start {
        cfg.t_start = v;
    }
    if let Some(v) = a.t_end {
        cfg.t_end = v;
    }
    let sc = cfg.sampler_config()?;

    let labels: Vec<Option<usize>> = if a.balanced {
        balanced_labels(a.n).into_iter().map(Some).collect()
    } else {
        match a.class {
            Some(c) if c >= cfg.num_classes => {
                return Err(UniteError::Index(format!("class {c} out of range")))
            }
            Some(c) => vec![Some(c); a.n],
            None => vec![None; a.n],
        }
    };
    let mut rng = RngStream::new(a.seed, Purpose::Sample);
    let out = flow::sample(&model, &labels, &sc, &mut rng)?;
    let images = model.decode(&out.latents)?;

    let dir = a.out.unwrap_or_else(|| {
        resolve_run_dir(&None, &cfg).join("samples-cli")
    });
    std::fs::create_dir_all(&dir)?;
    tensor_file::write(dir.join("latents.unte"), &out.latents)?;
    let stacked = Tensor::new(
        vec![images.len(), cfg.channels, cfg.image_size, cfg.image_size],
        images.iter().flat_map(|t| t.data.iter().copied()).collect(),
    );
    tensor_file::write(dir.join("images.unte"), &stacked)?;
    tensor_file::write_pgm_grid(dir.join("grid.pgm"), &images)?;
    let report = serde_json::json!({
        "n": labels.len(),
        "nfe_per_sample": out.nfe_per_sample,
        "solver": cfg.solver,
        "steps": sc.steps,
        "cfg_scale": sc.cfg_scale,
        "interval": [sc.t_start, sc.t_end],
        "seed": a.seed,
    });
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report).unwrap())?;
    println!(
        "wrote {} samples to {} ({} NFE/sample)",
        labels.len(),
        dir.display(),
        out.nfe_per_sample
    );
    Ok(())
}

#[derive(Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Tensor file of images [N,C,H,W]; defaults to held-out synthetic data.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let (cfg, model) = load_model(&a.checkpoint, true)?;
    let images: Vec<Tensor> = match &a.images {
        Some(p) => {
            let t = tensor_file::read(p)?;
            let (n, c, h, w) = match t.shape.as_slice() {
                [n, c, h, w] => (*n, *c, *h, *w),
                other => {
                    return Err(UniteError::Format(format!(
                        "expected [N,C,H,W] image tensor, got {other:?}"
                    )))
                }
            };
            (0..n)
                .map(|i| {
                    Tensor::new(vec![c, h, w], t.data[i * c * h * w..(i + 1) * c * h * w].to_vec())
                })
                .collect()
        }
        None => {
            let ds = Dataset::heldout(&cfg.synth_spec(), cfg.seed, a.n.max(1))?;
            ds.images
        }
    };
    let refs: Vec<&Tensor> = images.iter().take(a.n).collect();
    let mut rng = RngStream::new(a.seed, Purpose::Sample);
    let z = model.tokenize(&refs, &mut rng)?;
    let decoded = model.decode(&z)?;

    let mut sum = 0.0;
    for (i, (img, real)) in decoded.iter().zip(refs.iter()).enumerate() {
        let p = psnr(img, real);
        sum += p;
        println!("image {i}: psnr {p:.2} dB");
    }
    println!("mean psnr: {:.2} dB over {}", sum / refs.len() as f64, refs.len());

    let dir = a.out.unwrap_or_else(|| resolve_run_dir(&None, &cfg).join("recon-cli"));
    std::fs::create_dir_all(&dir)?;
    let stacked = Tensor::new(
        vec![decoded.len(), cfg.channels, cfg.image_size, cfg.image_size],
        decoded.iter().flat_map(|t| t.data.iter().copied()).collect(),
    );
    tensor_file::write(dir.join("reconstructions.unte"), &stacked)?;
    tensor_file::write_pgm_grid(dir.join("grid.pgm"), &decoded)?;
    Ok(())
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// cka | cknna | cosine | trajectory | entropy
    #[arg(long)]
    pub which: String,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    /// Comma-separated noise levels.
    #[arg(long, default_value = "0.1,0.3,0.5,0.8")]
    pub t_list: String,
    /// Mutual-kNN neighborhood size for cknna.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 256)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let (cfg, model) = load_model(&a.checkpoint, true)?;
    let dir = a.out.clone().unwrap_or_else(|| resolve_run_dir(&None, &cfg).join("reports"));
    std::fs::create_dir_all(&dir)?;
    let t_list: Vec<f32> = a
        .t_list
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f32>()
                .map_err(|_| UniteError::Config(format!("bad t value `{s}`")))
        })
        .collect::<Result<_>>()?;
    let ds = Dataset::heldout(&cfg.synth_spec(), cfg.seed, a.n.max(2))?;
    let refs: Vec<&Tensor> = ds.images.iter().take(a.n).collect();
    let mut rng = RngStream::new(a.seed, Purpose::Analysis);

    match a.which.as_str() {
        "cka" | "cknna" | "cosine" => {
            let k = if a.which == "cknna" { Some(a.k) } else { None };
            let rows = analysis::pathway_alignment(&model, &refs, &t_list, k, &mut rng)?;
            let rows: Vec<_> = match a.which.as_str() {
                "cosine" => rows.into_iter().filter(|r| r.metric == "cosine").collect(),
                "cknna" => rows.into_iter().filter(|r| r.metric != "cka").collect(),
                _ => rows,
            };
            analysis::write_jsonl(dir.join(format!("{}.jsonl", a.which)), &rows)?;
            analysis::write_alignment_csv(dir.join(format!("{}.csv", a.which)), &rows)?;
            println!("{} rows -> {}", rows.len(), dir.display());
        }
        "trajectory" => {
            let labels: Vec<Option<usize>> =
                ds.labels.iter().take(a.n).map(|&l| Some(l)).collect();
            let points = analysis::trajectory_decode(&model, &refs, &labels, &t_list, &mut rng)?;
            let rows: Vec<analysis::AlignmentRow> = points
                .iter()
                .map(|p| analysis::AlignmentRow {
                    layer: 0,
                    t: p.t.unwrap_or(1.0),
                    metric: if p.t.is_some() { "psnr".into() } else { "psnr_direct".into() },
                    value: p.psnr_mean,
                })
                .collect();
            analysis::write_jsonl(dir.join("trajectory.jsonl"), &rows)?;
            analysis::write_alignment_csv(dir.join("trajectory.csv"), &rows)?;
            for p in &points {
                let grid: Vec<Tensor> = p.decoded.iter().take(16).cloned().collect();
                let tag = p.t.map_or("direct".to_string(), |t| format!("t{t:.2}"));
                tensor_file::write_pgm_grid(dir.join(format!("trajectory-{tag}.pgm")), &grid)?;
            }
            println!("{} trajectory points -> {}", points.len(), dir.display());
        }
        "entropy" => {
            let rep = analysis::model_description_length(&model.params, a.bins);
            analysis::write_jsonl(dir.join("entropy.jsonl"), &rep.per_tensor)?;
            std::fs::write(
                dir.join("entropy-summary.json"),
                serde_json::to_string_pretty(&rep).unwrap(),
            )?;
            println!(
                "total {:.1} KB (norm {:.1}, attn+mlp {:.1}, embed+proj {:.1}) -> {}",
                rep.total_bytes / 1024.0,
                rep.group_norm_bytes / 1024.0,
                rep.group_attention_mlp_bytes / 1024.0,
                rep.group_embedding_projection_bytes / 1024.0,
                dir.display()
            );
        }
        other => {
            return Err(UniteError::Config(format!(
                "unknown analysis `{other}` (expected cka|cknna|cosine|trajectory|entropy)"
            )))
        }
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// recon | gen
    #[arg(long)]
    pub mode: String,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value = "probe.ckpt")]
    pub probe: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (cfg, model) = load_model(&a.checkpoint, true)?;
    let probe = Probe::load(&a.probe)?;
    let heldout = Dataset::heldout(&cfg.synth_spec(), cfg.seed, cfg.heldout_size)?;
    let mut rng = RngStream::new(a.seed, Purpose::Sample);
    let dir = a.out.clone().unwrap_or_else(|| resolve_run_dir(&None, &cfg).join("reports"));
    std::fs::create_dir_all(&dir)?;

    match a.mode.as_str() {
        "recon" => {
            let n = a.n.unwrap_or(cfg.eval_recon_n);
            let rep = evaluate_recon(&model, &heldout, &probe, n, &mut rng)?;
            let line = serde_json::to_string(&rep).unwrap();
            std::fs::write(dir.join("eval-recon.json"), &line)?;
            println!("{line}");
        }
        "gen" => {
            let n = a.n.unwrap_or(cfg.eval_n);
            let sc = cfg.sampler_config()?;
            let rep = evaluate_gen(&model, &heldout, &probe, n, &sc, &mut rng)?;
            let line = serde_json::to_string(&rep).unwrap();
            std::fs::write(dir.join("eval-gen.json"), &line)?;
            println!("{line}");
        }
        other => return Err(UniteError::Config(format!("unknown eval mode `{other}`"))),
    }
    Ok(())
}

#[derive(Args)]
pub struct TrainProbeArgs {
    #[arg(long, default_value = "probe.ckpt")]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
    /// Match these to the run config if they differ from defaults.
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
}

pub fn cmd_train_probe(a: TrainProbeArgs) -> Result<()> {
    let mut pc = ProbeConfig {
        image_size: a.image_size,
        channels: a.channels,
        seed: a.seed,
        ..ProbeConfig::default()
    };
    if let Some(s) = a.steps {
        pc.steps = s;
    }
    let spec = unite::data::synth::SyntheticSpec {
        image_size: a.image_size,
        channels: a.channels,
        ..Default::default()
    };
    let probe = Probe::train(&pc, &spec)?;
    let ds = Dataset::build(&spec, a.seed.wrapping_add(1), 0xacc, 1000)?;
    let refs: Vec<&Tensor> = ds.images.iter().collect();
    let acc = probe.accuracy(&refs, &ds.labels)?;
    probe.save(&a.out)?;
    println!("probe accuracy on 1000 fresh samples: {acc:.4}; saved to {}", a.out.display());
    Ok(())
}
