//! Ablation matrix: weight sharing x stop-gradient x flow-step ratio as the
//! core axes, plus reconstruction-noise and timestep-shift sweeps. Each cell
//! trains in its own run directory; a comparison CSV aggregates recon PSNR,
//! generation Fréchet, and probe accuracy per cell.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;

use unite::config::RunConfig;
use unite::data::eval::{evaluate_gen, evaluate_recon};
use unite::data::probe::{Probe, ProbeConfig};
use unite::data::synth::Dataset;
use unite::rng::{Purpose, RngStream};
use unite::trainer::{load_model, Trainer};
use unite::{Result, UniteError};

use crate::commands::resolve_run_dir;

#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

/// Expand an axes spec into cells. `core` is weight_share x stop_grad x
/// R in {1,4,14} (12 cells); `sigma` sweeps the reconstruction noise;
/// `alpha` sweeps the timestep shift (0 = no shift).
pub fn expand_cells(axes: &str) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    match axes {
        "core" => {
            for ws in [true, false] {
                for sg in [true, false] {
                    for r in [1usize, 4, 14] {
                        cells.push(Cell {
                            name: format!(
                                "ws{}-sg{}-r{:02}",
                                ws as u8, sg as u8, r
                            ),
                            overrides: vec![
                                ("weight_share".into(), ws.to_string()),
                                ("stop_grad".into(), sg.to_string()),
                                ("flow_minibatches".into(), r.to_string()),
                            ],
                        });
                    }
                }
            }
        }
        "sigma" => {
            for s in ["0.0", "0.6", "0.7", "0.8", "1.0"] {
                cells.push(Cell {
                    name: format!("sigma{s}"),
                    overrides: vec![("recon_sigma".into(), s.to_string())],
                });
            }
        }
        "alpha" => {
            for a in ["0.0", "0.5", "0.75"] {
                cells.push(Cell {
                    name: format!("alpha{a}"),
                    overrides: vec![("shift_alpha".into(), a.to_string())],
                });
            }
        }
        other => {
            return Err(UniteError::Config(format!(
                "unknown axes `{other}` (expected core|sigma|alpha)"
            )))
        }
    }
    Ok(cells)
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set")]
    pub sets: Vec<String>,
    /// core | sigma | alpha
    #[arg(long, default_value = "core")]
    pub axes: String,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Shrink per-cell training for quick sweeps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Child processes to run cells in parallel (1 = in-process).
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn base_config(a: &AblateArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &a.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| UniteError::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.apply_override(k, v)?;
    }
    cfg.seed = a.seed;
    if let Some(s) = a.steps {
        cfg.total_steps = s;
        cfg.warmup_steps = cfg.warmup_steps.min(s / 10);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cell_config(base: &RunConfig, root: &Path, cell: &Cell) -> Result<RunConfig> {
    let mut cfg = base.clone();
    for (k, v) in &cell.overrides {
        cfg.apply_override(k, v)?;
    }
    cfg.run_dir = root.join("cells").join(&cell.name).display().to_string();
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_probe(root: &Path, base: &RunConfig) -> Result<PathBuf> {
    let path = root.join("probe.ckpt");
    if !path.exists() {
        let pc = ProbeConfig {
            image_size: base.image_size,
            channels: base.channels,
            ..ProbeConfig::default()
        };
        let probe = Probe::train(&pc, &base.synth_spec())?;
        probe.save(&path)?;
    }
    Ok(path)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CellResult {
    cell: String,
    recon_psnr: f64,
    gen_frechet: f64,
    probe_accuracy: f64,
}

fn run_cell(base: &RunConfig, root: &Path, cell: &Cell, probe_path: &Path) -> Result<CellResult> {
    let cfg = cell_config(base, root, cell)?;
    std::fs::create_dir_all(&cfg.run_dir)?;
    let mut tr = Trainer::new(&cfg)?;
    let ckpt = tr
        .run()?
        .ok_or_else(|| UniteError::State("cell trainer produced no checkpoint".into()))?;

    let (cfg, model) = load_model(&ckpt, true)?;
    let probe = Probe::load(probe_path)?;
    let heldout = Dataset::heldout(&cfg.synth_spec(), cfg.seed, cfg.heldout_size)?;
    let mut rng = RngStream::new(cfg.seed, Purpose::Sample);
    let recon = evaluate_recon(&model, &heldout, &probe, cfg.eval_recon_n, &mut rng)?;
    let sc = cfg.sampler_config()?;
    let gen = evaluate_gen(&model, &heldout, &probe, cfg.eval_n, &sc, &mut rng)?;

    let result = CellResult {
        cell: cell.name.clone(),
        recon_psnr: recon.psnr_mean,
        gen_frechet: gen.frechet_gen,
        probe_accuracy: gen.probe_accuracy,
    };
    std::fs::write(
        PathBuf::from(&cfg.run_dir).join("cell-result.json"),
        serde_json::to_string(&result).unwrap(),
    )?;
    Ok(result)
}

pub fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = base_config(&a)?;
    let root = resolve_run_dir(&a.run_dir, &base).join(format!("ablate-{}", a.axes));
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("base-config.json"), base.to_json_pretty())?;
    let cells = expand_cells(&a.axes)?;
    let probe_path = ensure_probe(&root, &base)?;

    let mut results: Vec<CellResult> = Vec::new();
    if a.parallel <= 1 {
        for cell in &cells {
            println!("cell {}", cell.name);
            results.push(run_cell(&base, &root, cell, &probe_path)?);
        }
    } else {
        let exe = std::env::current_exe()?;
        let mut pending: Vec<&Cell> = cells.iter().collect();
        let mut running: Vec<(String, std::process::Child)> = Vec::new();
        while !pending.is_empty() || !running.is_empty() {
            while running.len() < a.parallel && !pending.is_empty() {
                let cell = pending.remove(0);
                println!("spawn cell {}", cell.name);
                let child = std::process::Command::new(&exe)
                    .args([
                        "ablate-cell",
                        "--root",
                        &root.display().to_string(),
                        "--cell",
                        &cell.name,
                        "--axes",
                        &a.axes,
                        "--probe",
                        &probe_path.display().to_string(),
                    ])
                    .spawn()?;
                running.push((cell.name.clone(), child));
            }
            let (name, mut child) = running.remove(0);
            let status = child.wait()?;
            if !status.success() {
                return Err(UniteError::State(format!("cell {name} failed: {status}")));
            }
            let text =
                std::fs::read_to_string(root.join("cells").join(&name).join("cell-result.json"))?;
            results.push(
                serde_json::from_str(&text)
                    .map_err(|e| UniteError::Format(format!("cell result: {e}")))?,
            );
        }
        results.sort_by(|a, b| a.cell.cmp(&b.cell));
    }

    let mut csv = std::io::BufWriter::new(std::fs::File::create(root.join("comparison.csv"))?);
    writeln!(csv, "cell,recon_psnr,gen_frechet,probe_accuracy")?;
    for r in &results {
        writeln!(csv, "{},{},{},{}", r.cell, r.recon_psnr, r.gen_frechet, r.probe_accuracy)?;
    }
    csv.flush()?;
    println!("comparison: {}", root.join("comparison.csv").display());
    Ok(())
}

#[derive(Args)]
pub struct AblateCellArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub cell: String,
    #[arg(long)]
    pub axes: String,
    #[arg(long)]
    pub probe: PathBuf,
}

pub fn cmd_ablate_cell(a: AblateCellArgs) -> Result<()> {
    let base = RunConfig::from_file(a.root.join("base-config.json"))?;
    let cells = expand_cells(&a.axes)?;
    let cell = cells
        .iter()
        .find(|c| c.name == a.cell)
        .ok_or_else(|| UniteError::Config(format!("unknown cell `{}`", a.cell)))?;
    run_cell(&base, &a.root, cell, &a.probe)?;
    Ok(())
}
