//! Public-API runs across modules on a small world.

use mvrc_core::diffusion::{decode_sample, encode_image, sample_finals, sft_train, Dataset, NoiseSchedule, SftConfig};
use mvrc_core::mrc::{compute_mrc, mrc_reward, MrcConfig, World};
use mvrc_core::nncore::{read_checkpoint, write_checkpoint, AdamW, Arch, DenoiserParams, FrozenDenoiser};
use mvrc_core::rlft::{curate_prompts, run_rlft, TrainerConfig, TrainingEnv};
use mvrc_core::sceneworld::{generate_scene, render_multiview, tile_views, untile, PromptId};

fn small_world() -> World {
    World::new(8, 16).unwrap()
}

#[test]
fn tiles_survive_encoding_and_score_like_their_views() {
    let w = small_world();
    let cfg = MrcConfig::default();
    for p in 0..3 {
        let (views, tile) = render_multiview(&generate_scene(PromptId(p), w.scene_res), &w.rig);
        assert_eq!(tile_views(&views).unwrap(), tile);
        let back = untile(&decode_sample(&encode_image(&tile)).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&views) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let score = compute_mrc(&views, w.poses(), &cfg).unwrap().score;
        assert_eq!(mrc_reward(&back, w.poses(), &cfg), -compute_mrc(&back, w.poses(), &cfg).unwrap().score);
        assert!(score >= 0.0 && score < 0.05, "{score}");
    }
}

#[test]
fn sft_checkpoint_curation_and_finetuning_chain() {
    let w = small_world();
    let mrc = MrcConfig::default();
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.05, 5, 1.0).unwrap();
    let data = Dataset::render(&w, 4);
    let arch = Arch::new(4 * 16 * 16, 16, 4, 2, 4).unwrap();
    let sft = SftConfig { steps: 60, batch: 4, ..SftConfig::default() };
    let (params, report) = sft_train(DenoiserParams::init(arch, 0), &data, &schedule, &sft).unwrap();
    assert!(report.window_mean(40, 20) < report.window_mean(0, 20));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sft.crv3");
    write_checkpoint(&path, &params).unwrap();
    let params = read_checkpoint(&path).unwrap();

    let catalog: Vec<PromptId> = (0..4).map(PromptId).collect();
    let (chosen, means) = curate_prompts(&params, &catalog, 2, 1, &w, &mrc, &schedule, 3.0, 0).unwrap();
    assert_eq!(chosen.len(), 2);
    let mut ranked = means.clone();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    assert_eq!(chosen, ranked[..2].iter().map(|m| m.0).collect::<Vec<_>>());

    let base = FrozenDenoiser::freeze(params);
    let cfg = TrainerConfig {
        batch_size: 4,
        sample_minibatch: 2,
        train_minibatch: 2,
        cfg_scale: 3.0,
        opt: AdamW { lr: 1e-3, ..AdamW::default() },
        ..TrainerConfig::default()
    };
    let env = TrainingEnv { base: &base, world: &w, mrc: &mrc, schedule: &schedule, cfg: &cfg };
    let mut seen = 0;
    let run = run_rlft(&env, &chosen, 3, |log, _| {
        assert_eq!(log.epoch, seen);
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(run.logs.len(), 3);
    assert_eq!(run.stopped_at, None);
    assert_eq!(run.logs[0].kl_mean, 0.0);
    assert!(run.logs[2].kl_mean > 0.0);
    let finals = sample_finals(&run.state.params, &[(chosen[0], 5)], &schedule, 3.0).unwrap();
    assert_eq!(finals[0].len(), arch.d);
}
