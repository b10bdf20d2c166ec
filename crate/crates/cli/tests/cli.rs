use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mvrc_cli::stages::{gen_data, RunDir};
use mvrc_cli::{CliError, RunConfig};

const TINY: &str = r#"
catalog_size = 4
scene_res = 8
view_res = 16
hidden = 8
emb_dim = 4
freqs = 2
sft_steps = 20
sft_batch = 4
batch_size = 4
sample_minibatch = 2
train_minibatch = 2
epochs_max = 2
curate_k = 2
curate_samples = 1
eval_samples = 1
sample_pngs = 1
distort_prompts = [0]
scale_grid = [[2, 1], [4, 2]]
scale_seeds = [0]
scale_epochs = 1
"#;

fn mvrc(config: &Path, out: &Path, stage: &str) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_mvrc"))
        .args(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--stage", stage])
        .output()
        .unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stdout).into_owned() + &String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.effective.toml" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "catalog_sise = 3\n");
    assert_eq!(mvrc(&bad, &tmp.path().join("a"), "gen-data").0, 2);
    let good = write_config(tmp.path(), TINY);
    assert_eq!(mvrc(&good, &tmp.path().join("b"), "launch").0, 2);
    let (code, msg) = mvrc(&good, &tmp.path().join("c"), "rlft");
    assert_eq!(code, 3, "{msg}");
    assert_eq!(mvrc(&good, &tmp.path().join("c"), "sft").0, 3);
    assert_eq!(mvrc(&good, &tmp.path().join("c"), "plot").0, 2);
}

#[test]
fn gen_data_counts_and_empty_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_toml(TINY).unwrap();
    let dir = RunDir::create(tmp.path()).unwrap();
    assert_eq!(gen_data(&cfg, &dir).unwrap(), 4);
    let manifest = fs::read_to_string(dir.data().join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    assert_eq!(fs::read_dir(dir.data().join("tiles")).unwrap().count(), 4);
    cfg.catalog_size = 0;
    assert!(matches!(
        gen_data(&cfg, &dir),
        Err(CliError::Core(mvrc_core::Error::EmptyCatalog))
    ));
}

#[test]
fn full_pipeline_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let mut snaps = Vec::new();
    for run in ["r1", "r2"] {
        let out = tmp.path().join(run);
        for stage in ["all", "distort", "scale"] {
            let (code, msg) = mvrc(&cfg, &out, stage);
            assert_eq!(code, 0, "{stage}: {msg}");
        }
        let eval_sft = format!("{TINY}eval_checkpoint = \"sft\"\n");
        let c2 = write_config(&out, &eval_sft);
        assert_eq!(mvrc(&c2, &out, "eval").0, 0);
        snaps.push(snapshot(&out));
    }
    let s = &snaps[0];
    for f in [
        "config.toml",
        "data/manifest.csv",
        "checkpoints/sft.crv3",
        "checkpoints/rlft.crv3",
        "checkpoints/rlft_latest.crv3",
        "logs/sft_loss.csv",
        "logs/curate.csv",
        "logs/rlft.jsonl",
        "logs/rlft_summary.json",
        "logs/eval_rlft.csv",
        "logs/eval_sft.csv",
        "logs/distort_patch.csv",
        "logs/scaling.csv",
        "plots/rlft_reward.svg",
        "plots/rlft_kl.svg",
        "plots/distort_azimuth.svg",
        "plots/scaling.svg",
        "samples/rlft_prompt000.png",
    ] {
        assert!(s.contains_key(Path::new(f)), "missing {f}");
    }
    assert_eq!(snaps[0], snaps[1]);
    let log = fs::read_to_string(tmp.path().join("r1/logs/rlft.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let eval = fs::read_to_string(tmp.path().join("r1/logs/eval_sft.csv")).unwrap();
    assert!(eval.starts_with("prompt,mean_mrc\n"));
    assert_eq!(eval.lines().count(), 5);
}

#[test]
fn early_stop_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{TINY}kl_stop_threshold = 0.0\n");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("run");
    for stage in ["gen-data", "sft", "curate", "rlft"] {
        let (code, msg) = mvrc(&cfg, &out, stage);
        assert_eq!(code, 0, "{stage}: {msg}");
    }
    let summary = fs::read_to_string(out.join("logs/rlft_summary.json")).unwrap();
    assert!(summary.contains("\"stopped_at\": 0"), "{summary}");
    assert_eq!(fs::read_to_string(out.join("logs/rlft.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn plot_stage_renders_a_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("curve.csv");
    fs::write(&csv, "x,y\n0,0\n1,1\n").unwrap();
    let text = format!("{TINY}plot_input = {:?}\nplot_kind = \"lines\"\n", csv.to_str().unwrap());
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("run");
    assert_eq!(mvrc(&cfg, &out, "plot").0, 0);
    let svg = fs::read_to_string(out.join("plots/curve_lines.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert_eq!(mvrc(&cfg, &out, "plot").0, 0);
    assert_eq!(fs::read_to_string(out.join("plots/curve_lines.svg")).unwrap(), svg);
}
