//! Pipeline stages. Each stage reads the artifacts of the stages it depends
//! on and writes only its own files under the run directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mvrc_core::diffusion::{decode_sample, read_dataset, sample_finals, sft_train, write_dataset};
use mvrc_core::imgproc::{write_png, Image};
use mvrc_core::mrc::{metric_comparison_report, reconstruct_views, DistortionKind};
use mvrc_core::nncore::{read_checkpoint, write_checkpoint, DenoiserParams, FrozenDenoiser};
use mvrc_core::rlft::{curate_prompts, evaluate_prompts, run_rlft, scaling_run, EpochLog, TrainingEnv};
use mvrc_core::rng::{hash_keys, tag};
use mvrc_core::sceneworld::{tile_views, untile, PromptId};
use serde::Serialize;

use crate::config::RunConfig;
use crate::plot::{cmd_plot, PlotKind};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Sft,
    Curate,
    Rlft,
    Eval,
    Distort,
    Scale,
    Plot,
}

impl Stage {
    pub const PIPELINE: [Stage; 5] = [Stage::GenData, Stage::Sft, Stage::Curate, Stage::Rlft, Stage::Eval];

    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "gen-data" => Stage::GenData,
            "sft" => Stage::Sft,
            "curate" => Stage::Curate,
            "rlft" => Stage::Rlft,
            "eval" => Stage::Eval,
            "distort" => Stage::Distort,
            "scale" => Stage::Scale,
            "plot" => Stage::Plot,
            other => return Err(CliError::Config(format!("unknown stage {other:?}"))),
        })
    }
}

/// Fixed layout: `config.toml`, `data/`, `logs/`, `checkpoints/`,
/// `samples/`, `plots/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        for sub in ["data", "logs", "checkpoints", "samples", "plots"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn sample(&self, name: &str) -> PathBuf {
        self.root.join("samples").join(name)
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(name)
    }
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingPrerequisite(format!("{what} ({})", path.display())))
    }
}

fn load_params(path: &Path, what: &str) -> Result<DenoiserParams, CliError> {
    require(path, what)?;
    Ok(read_checkpoint(path)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Stage(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Stage(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Generated tile next to the re-rendering of its reconstruction.
pub fn comparison_image(x: &[f64], cfg: &RunConfig) -> Result<Image, CliError> {
    let tile = decode_sample(x)?;
    let world = cfg.world()?;
    let views = untile(&tile)?;
    let right = match reconstruct_views(&views, world.poses(), &cfg.mrc()?) {
        Ok(rv) => tile_views(&rv.rerendered)?,
        Err(_) => Image::filled(tile.width(), tile.height(), 1.0),
    };
    let w = tile.width();
    Ok(Image::from_fn(2 * w, tile.height(), |r, c| if c < w { tile.get(r, c) } else { right.get(r, c - w) }))
}

fn write_samples(params: &DenoiserParams, cfg: &RunConfig, dir: &RunDir, prefix: &str) -> Result<(), CliError> {
    let n = cfg.sample_pngs.min(cfg.catalog_size as usize);
    if n == 0 {
        return Ok(());
    }
    let reqs: Vec<(PromptId, u64)> = (0..n as u64).map(|p| (PromptId(p), hash_keys(&[tag::TRAJ, cfg.seed, p]))).collect();
    let finals = sample_finals(params, &reqs, &cfg.schedule()?, cfg.cfg_scale)?;
    for ((p, _), x) in reqs.iter().zip(&finals) {
        write_png(&comparison_image(x, cfg)?, &dir.sample(&format!("{prefix}_prompt{:03}.png", p.0)))?;
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, dir: &RunDir) -> Result<usize, CliError> {
    let rows = write_dataset(&dir.data(), &cfg.world()?, cfg.catalog_size)?;
    Ok(rows.len())
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

pub fn sft(cfg: &RunConfig, dir: &RunDir) -> Result<DenoiserParams, CliError> {
    require(&dir.data().join("manifest.csv"), "dataset from gen-data")?;
    let data = read_dataset(&dir.data())?;
    let init = DenoiserParams::init(cfg.arch()?, cfg.seed);
    let (params, report) = sft_train(init, &data, &cfg.schedule()?, &cfg.sft())?;
    write_checkpoint(&dir.checkpoint("sft.crv3"), &params)?;
    let rows: Vec<LossRow> = report.losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
    write_csv(&dir.log("sft_loss.csv"), &rows)?;
    if !rows.is_empty() {
        cmd_plot(&dir.log("sft_loss.csv"), PlotKind::Lines, &dir.plot("sft_loss.svg"))?;
    }
    write_samples(&params, cfg, dir, "sft")?;
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct CurateRow {
    pub rank: usize,
    pub prompt: u64,
    pub mean_reward: f64,
    pub selected: bool,
}

/// Catalog ranked by ascending mean reward under the SFT model.
pub fn curate(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<CurateRow>, CliError> {
    let params = load_params(&dir.checkpoint("sft.crv3"), "SFT checkpoint")?;
    let n = cfg.catalog_size as usize;
    let (ranked, means) = curate_prompts(
        &params,
        &cfg.catalog(),
        n,
        cfg.curate_samples,
        &cfg.world()?,
        &cfg.mrc()?,
        &cfg.schedule()?,
        cfg.cfg_scale,
        cfg.seed,
    )?;
    let rows: Vec<CurateRow> = ranked
        .iter()
        .enumerate()
        .map(|(rank, p)| CurateRow {
            rank,
            prompt: p.0,
            mean_reward: means.iter().find(|m| m.0 == *p).expect("ranked prompt has a mean").1,
            selected: rank < cfg.curate_k,
        })
        .collect();
    write_csv(&dir.log("curate.csv"), &rows)?;
    Ok(rows)
}

fn read_curation(dir: &RunDir) -> Result<Vec<CurateRow>, CliError> {
    let path = dir.log("curate.csv");
    require(&path, "curation from the curate stage")?;
    let mut rd = csv::Reader::from_path(&path).map_err(|e| CliError::Parse(e.to_string()))?;
    rd.deserialize().map(|r| r.map_err(|e| CliError::Parse(e.to_string()))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RlftSummary {
    pub prompts: Vec<u64>,
    pub epochs_run: usize,
    pub stopped_at: Option<usize>,
    pub final_reward: f64,
    pub final_kl: f64,
}

pub fn rlft(cfg: &RunConfig, dir: &RunDir) -> Result<(DenoiserParams, Vec<EpochLog>, RlftSummary), CliError> {
    let sft = load_params(&dir.checkpoint("sft.crv3"), "SFT checkpoint")?;
    let prompts: Vec<PromptId> = read_curation(dir)?.iter().filter(|r| r.selected).map(|r| PromptId(r.prompt)).collect();
    let (world, mrc, schedule, trainer) = (cfg.world()?, cfg.mrc()?, cfg.schedule()?, cfg.trainer()?);
    let base = FrozenDenoiser::freeze(sft);
    let env = TrainingEnv { base: &base, world: &world, mrc: &mrc, schedule: &schedule, cfg: &trainer };
    let mut log = BufWriter::new(File::create(dir.log("rlft.jsonl"))?);
    let run = run_rlft(&env, &prompts, trainer.epochs_max, |l, st| {
        writeln!(log, "{}", serde_json::to_string(l).expect("log serializes"))?;
        log.flush()?;
        write_checkpoint(&dir.checkpoint("rlft_latest.crv3"), &st.params)?;
        Ok(())
    })?;
    drop(log);
    write_checkpoint(&dir.checkpoint("rlft.crv3"), &run.state.params)?;
    let last = run.logs.last();
    let summary = RlftSummary {
        prompts: prompts.iter().map(|p| p.0).collect(),
        epochs_run: run.logs.len(),
        stopped_at: run.stopped_at,
        final_reward: last.map_or(f64::NAN, |l| l.reward_mean),
        final_kl: last.map_or(f64::NAN, |l| l.kl_mean),
    };
    write_json(&dir.log("rlft_summary.json"), &summary)?;
    if !run.logs.is_empty() {
        cmd_plot(&dir.log("rlft.jsonl"), PlotKind::Reward, &dir.plot("rlft_reward.svg"))?;
        cmd_plot(&dir.log("rlft.jsonl"), PlotKind::Kl, &dir.plot("rlft_kl.svg"))?;
    }
    write_samples(&run.state.params, cfg, dir, "rlft")?;
    Ok((run.state.params, run.logs, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub prompt: u64,
    pub mean_mrc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub checkpoint: String,
    pub prompts: usize,
    pub samples_per_prompt: usize,
    pub mean_mrc: f64,
    pub mean_reward: f64,
}

/// Per-prompt mean MRC over the whole catalog. The noise keys depend only
/// on the seed, so checkpoints are compared on identical starting noise.
pub fn eval(cfg: &RunConfig, dir: &RunDir) -> Result<EvalSummary, CliError> {
    let name = cfg.eval_checkpoint.as_str();
    let params = load_params(&dir.checkpoint(&format!("{name}.crv3")), &format!("{name} checkpoint"))?;
    let means = evaluate_prompts(
        &params,
        &cfg.catalog(),
        cfg.eval_samples,
        &cfg.world()?,
        &cfg.mrc()?,
        &cfg.schedule()?,
        cfg.cfg_scale,
        cfg.seed,
    )?;
    let rows: Vec<EvalRow> = means.iter().map(|(p, r)| EvalRow { prompt: p.0, mean_mrc: -r }).collect();
    write_csv(&dir.log(&format!("eval_{name}.csv")), &rows)?;
    let mean_reward = means.iter().map(|m| m.1).sum::<f64>() / means.len() as f64;
    let summary = EvalSummary {
        checkpoint: name.into(),
        prompts: means.len(),
        samples_per_prompt: cfg.eval_samples,
        mean_mrc: -mean_reward,
        mean_reward,
    };
    write_json(&dir.log(&format!("eval_{name}_summary.json")), &summary)?;
    Ok(summary)
}

pub fn distort(cfg: &RunConfig, dir: &RunDir) -> Result<(), CliError> {
    let prompts: Vec<PromptId> = cfg.distort_prompts.iter().map(|&p| PromptId(p)).collect();
    let (world, mrc) = (cfg.world()?, cfg.mrc()?);
    for kind in DistortionKind::ALL {
        let cmp = metric_comparison_report(&world, &prompts, kind, &kind.default_intensities(), &mrc, cfg.distort_seed)?;
        let name = kind.name();
        fs::write(dir.log(&format!("distort_{name}.csv")), cmp.to_csv())?;
        fs::write(dir.log(&format!("distort_{name}_smoothness.csv")), cmp.smoothness_csv())?;
        cmd_plot(&dir.log(&format!("distort_{name}.csv")), PlotKind::Distortion, &dir.plot(&format!("distort_{name}.svg")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingSummary {
    /// Per batch size, the data size with the best seed-mean final reward.
    pub best_data_per_batch: Vec<(usize, usize)>,
    pub best_data_nondecreasing: bool,
    /// Across-seed std of the final reward per (batch, data) cell.
    pub final_spread: Vec<((usize, usize), f64)>,
}

pub fn scale(cfg: &RunConfig, dir: &RunDir) -> Result<ScalingSummary, CliError> {
    let sft = load_params(&dir.checkpoint("sft.crv3"), "SFT checkpoint")?;
    let ranked: Vec<PromptId> = read_curation(dir)?.iter().map(|r| PromptId(r.prompt)).collect();
    let (world, mrc, schedule, trainer) = (cfg.world()?, cfg.mrc()?, cfg.schedule()?, cfg.trainer()?);
    let base = FrozenDenoiser::freeze(sft);
    let env = TrainingEnv { base: &base, world: &world, mrc: &mrc, schedule: &schedule, cfg: &trainer };
    let grid: Vec<(usize, usize)> = cfg.scale_grid.iter().map(|c| (c[0], c[1])).collect();
    let table = scaling_run(&env, &grid, cfg.scale_epochs, &cfg.scale_seeds, &ranked)?;
    fs::write(dir.log("scaling.csv"), table.to_csv())?;
    cmd_plot(&dir.log("scaling.csv"), PlotKind::Scaling, &dir.plot("scaling.svg"))?;
    let best: Vec<(usize, usize)> = table.best_data_per_batch().into_iter().collect();
    let summary = ScalingSummary {
        best_data_nondecreasing: best.windows(2).all(|w| w[1].1 >= w[0].1),
        best_data_per_batch: best,
        final_spread: table.final_spread().into_iter().collect(),
    };
    write_json(&dir.log("scaling_summary.json"), &summary)?;
    Ok(summary)
}

pub fn plot(cfg: &RunConfig, dir: &RunDir) -> Result<PathBuf, CliError> {
    let input = cfg.plot_input.as_ref().ok_or_else(|| CliError::Config("plot stage needs plot_input".into()))?;
    require(input, "plot input")?;
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into());
    let out = dir.plot(&format!("{stem}_{}.svg", cfg.plot_kind));
    cmd_plot(input, PlotKind::parse(&cfg.plot_kind)?, &out)?;
    Ok(out)
}

/// Runs one stage and returns a one-line summary for the console.
pub fn run_stage(stage: Stage, cfg: &RunConfig, dir: &RunDir) -> Result<String, CliError> {
    Ok(match stage {
        Stage::GenData => format!("gen-data: {} tiles", gen_data(cfg, dir)?),
        Stage::Sft => {
            sft(cfg, dir)?;
            format!("sft: {} steps", cfg.sft_steps)
        }
        Stage::Curate => {
            let rows = curate(cfg, dir)?;
            let sel: Vec<u64> = rows.iter().filter(|r| r.selected).map(|r| r.prompt).collect();
            format!("curate: selected {sel:?}")
        }
        Stage::Rlft => {
            let (_, _, s) = rlft(cfg, dir)?;
            match s.stopped_at {
                Some(e) => format!("rlft: early stop at epoch {e}, reward {:.6}, kl {:.3e}", s.final_reward, s.final_kl),
                None => format!("rlft: {} epochs, reward {:.6}, kl {:.3e}", s.epochs_run, s.final_reward, s.final_kl),
            }
        }
        Stage::Eval => {
            let s = eval(cfg, dir)?;
            format!("eval {}: mean MRC {:.6} over {} prompts", s.checkpoint, s.mean_mrc, s.prompts)
        }
        Stage::Distort => {
            distort(cfg, dir)?;
            "distort: curves written".into()
        }
        Stage::Scale => {
            let s = scale(cfg, dir)?;
            format!("scale: best data per batch {:?}", s.best_data_per_batch)
        }
        Stage::Plot => format!("plot: {}", plot(cfg, dir)?.display()),
    })
}
