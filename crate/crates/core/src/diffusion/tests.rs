use super::*;
use crate::mrc::World;
use crate::nncore::{Arch, DenoiserParams};
use crate::sceneworld::PromptId;

fn tiny_arch(d: usize) -> Arch {
    Arch::new(d, 8, 4, 2, 4).unwrap()
}

fn short_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(10, 0.02, 0.4, 4, 1.0).unwrap()
}

#[test]
fn toy_schedule_is_sane() {
    let s = NoiseSchedule::toy();
    assert_eq!(s.t_train, 1000);
    assert_eq!(s.steps(), 20);
    assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    assert!(s.sigmas.iter().all(|&v| v > 0.0));
    assert_eq!(*s.timesteps.last().unwrap(), 999);
    assert_eq!(s.timesteps[0], 49);
    assert!(s.timesteps.windows(2).all(|w| w[1] > w[0]));
    assert!(s.alpha_bars[999] < 1e-4, "{}", s.alpha_bars[999]);
    assert!((s.betas[0] - 1e-4).abs() < 1e-18 && (s.betas[999] - 0.02).abs() < 1e-15);
}

#[test]
fn schedule_rejects_degenerate_settings() {
    assert!(NoiseSchedule::linear(10, 0.01, 0.2, 11, 1.0).is_err());
    assert!(NoiseSchedule::linear(10, 0.3, 0.2, 4, 1.0).is_err());
    // every training step used: the last step would land on itself
    assert!(NoiseSchedule::linear(10, 0.01, 0.2, 10, 1.0).is_err());
    assert!(NoiseSchedule::linear(10, 0.01, 0.2, 10, 0.0).is_ok());
}

#[test]
fn q_sample_formula() {
    let mut s = short_schedule();
    s.alpha_bars[3] = 0.25;
    let x0 = [0.5, -1.0, 2.0];
    let eps = [1.0, 0.25, -0.5];
    let xt = q_sample(&x0, 3, &eps, &s).unwrap();
    for i in 0..3 {
        assert_eq!(xt[i], 0.5 * x0[i] + 0.75f64.sqrt() * eps[i]);
    }
    let zero = q_sample(&x0, 3, &[0.0; 3], &s).unwrap();
    assert_eq!(zero, vec![0.25, -0.5, 1.0]);
    let clean = NoiseSchedule::linear(10, 1e-14, 0.1, 4, 1.0).unwrap();
    let near = q_sample(&x0, 0, &eps, &clean).unwrap();
    for (a, b) in near.iter().zip(&x0) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(matches!(q_sample(&x0, 0, &[0.0; 2], &s), Err(Error::DimensionMismatch(_))));
}

#[test]
fn log_prob_examples() {
    let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((gaussian_log_prob(&[0.3], &[0.3], 1.0).unwrap() - c).abs() < 1e-15);
    assert!((c + 0.918_938_533_204_672_7).abs() < 1e-15);
    assert!((gaussian_log_prob(&[1.3], &[0.3], 1.0).unwrap() - (c - 0.5)).abs() < 1e-15);
    assert!(matches!(gaussian_log_prob(&[0.0], &[0.0], 0.0), Err(Error::NonPositiveSigma(_))));
}

#[test]
fn log_prob_matches_direct_sum() {
    let mut r = crate::rng::stream(&[5]);
    use rand::Rng;
    let a: Vec<f64> = (0..4096).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
    let m: Vec<f64> = (0..4096).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
    let sigma = 0.37;
    let mut direct = 0.0;
    for i in 0..4096 {
        let z = (a[i] - m[i]) / sigma;
        direct += -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    let got = gaussian_log_prob(&a, &m, sigma).unwrap();
    assert!((got - direct).abs() <= 1e-10 * direct.abs().max(1.0), "{got} {direct}");
}

#[test]
fn log_density_integrates_to_one() {
    // trapezoid over +-12 sigma
    let (sigma, mean) = (0.7, 0.2);
    let n = 200_000;
    let (lo, hi) = (mean - 12.0 * sigma, mean + 12.0 * sigma);
    let h = (hi - lo) / n as f64;
    let mut total = 0.0;
    for i in 0..=n {
        let x = lo + h * i as f64;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        total += w * gaussian_log_prob(&[x], &[mean], sigma).unwrap().exp();
    }
    assert!((total * h - 1.0).abs() < 1e-6);
}

#[test]
fn guidance_endpoints_use_one_branch() {
    let d = 16;
    let s = short_schedule();
    let p = DenoiserParams::init(tiny_arch(d), 3);
    let x: Vec<f64> = (0..d).map(|i| (i as f64 * 0.3).sin()).collect();
    let lay = p.arch().layout();
    let null_row = lay.emb.start + 4 * 4;
    let mut other_null = p.clone();
    other_null.as_mut_slice()[null_row] += 1.0;
    let mut other_prompt = p.clone();
    other_prompt.as_mut_slice()[lay.emb.start + 4] += 1.0; // prompt 1
    let pr = PromptId(1);
    let at = |q: &DenoiserParams, w: f64| ddim_step_distribution(q, &x, 2, pr, &s, w).unwrap().0;
    assert_eq!(at(&p, 1.0), at(&other_null, 1.0));
    assert_ne!(at(&p, 1.0), at(&other_prompt, 1.0));
    assert_eq!(at(&p, 0.0), at(&other_prompt, 0.0));
    assert_ne!(at(&p, 0.0), at(&other_null, 0.0));
    // manual mean at w = 1
    let out = crate::nncore::forward(&p, &x, s.timesteps[2], crate::nncore::Cond::Prompt(pr)).unwrap();
    let (a, ap, sg) = (s.alpha_bar(2), s.alpha_bar_prev(2), s.sigmas[2]);
    let (mu, sigma) = ddim_step_distribution(&p, &x, 2, pr, &s, 1.0).unwrap();
    assert_eq!(sigma, sg);
    for i in 0..d {
        let eps = (x[i] - a.sqrt() * out[i]) / (1.0 - a).sqrt();
        let x0 = out[i];
        let want = ap.sqrt() * x0 + (1.0 - ap - sg * sg).sqrt() * eps;
        assert!((mu[i] - want).abs() < 1e-12);
    }
}

#[test]
fn trajectories_record_consistent_policies() {
    let d = 16;
    let s = short_schedule();
    let p = DenoiserParams::init(tiny_arch(d), 4);
    let tr = sample_trajectory(&p, &p, PromptId(2), 77, &s, 5.0).unwrap();
    assert_eq!(tr.steps.len(), s.steps());
    assert_eq!(tr.steps[0].x_t, tr.x_t_init);
    assert_eq!(&tr.x0, &tr.steps.last().unwrap().action);
    for (i, st) in tr.steps.iter().enumerate() {
        assert_eq!(st.k, s.steps() - 1 - i);
        assert_eq!(st.logp_current, st.logp_base);
        assert_eq!(st.logp_current, gaussian_log_prob(&st.action, &st.mean, st.sigma).unwrap());
        if i > 0 {
            assert_eq!(st.x_t, tr.steps[i - 1].action);
        }
    }
    assert_eq!(tr, sample_trajectory(&p, &p, PromptId(2), 77, &s, 5.0).unwrap());
    assert_ne!(tr.x0, sample_trajectory(&p, &p, PromptId(2), 78, &s, 5.0).unwrap().x0);
}

#[test]
fn batching_does_not_change_samples() {
    let d = 16;
    let s = short_schedule();
    let p = DenoiserParams::init(tiny_arch(d), 5);
    let mut q = p.clone();
    q.as_mut_slice()[3] += 0.05;
    let reqs = [(PromptId(0), 1), (PromptId(3), 2), (PromptId(1), 3)];
    let batch = sample_trajectories(&q, &p, &reqs, &s, 5.0).unwrap();
    for (r, tr) in reqs.iter().zip(&batch) {
        assert_eq!(tr, &sample_trajectory(&q, &p, r.0, r.1, &s, 5.0).unwrap());
        assert!(tr.steps.iter().any(|st| st.logp_current != st.logp_base));
    }
    let finals = sample_finals(&q, &reqs, &s, 5.0).unwrap();
    for (f, tr) in finals.iter().zip(&batch) {
        assert_eq!(f, &tr.x0);
    }
}

#[test]
fn recomputed_log_probs_match_records() {
    let d = 16;
    let s = short_schedule();
    let p = DenoiserParams::init(tiny_arch(d), 6);
    let trs = sample_trajectories(&p, &p, &[(PromptId(0), 9), (PromptId(1), 10)], &s, 5.0).unwrap();
    let refs: Vec<StepRef> = trs.iter().flat_map(|t| t.steps.iter().map(|st| StepRef::from((st, t.prompt)))).collect();
    let ev = policy_forward(&p, &refs, &s, 5.0).unwrap();
    let want: Vec<f64> = trs.iter().flat_map(|t| t.steps.iter().map(|st| st.logp_current)).collect();
    assert_eq!(ev.logps, want);
}

#[test]
fn policy_gradient_matches_differences() {
    let d = 16;
    let s = short_schedule();
    let p = DenoiserParams::init(tiny_arch(d), 7);
    let tr = sample_trajectory(&p, &p, PromptId(1), 5, &s, 3.0).unwrap();
    let refs: Vec<StepRef> = tr.steps.iter().map(|st| StepRef::from((st, tr.prompt))).collect();
    let weights: Vec<f64> = (0..refs.len()).map(|i| 0.5 - 0.3 * i as f64).collect();
    let objective = |q: &DenoiserParams| -> f64 {
        let ev = policy_forward(q, &refs, &s, 3.0).unwrap();
        ev.logps.iter().zip(&weights).map(|(l, w)| l * w).sum()
    };
    let ev = policy_forward(&p, &refs, &s, 3.0).unwrap();
    let mut g = vec![0.0; p.len()];
    policy_backward(&p, &ev, &weights, &s, &mut g).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in (0..p.len()).step_by(7) {
        let mut q = p.clone();
        q.as_mut_slice()[k] += h;
        let up = objective(&q);
        q.as_mut_slice()[k] -= 2.0 * h;
        let dn = objective(&q);
        let num = (up - dn) / (2.0 * h);
        worst = worst.max((num - g[k]).abs() / num.abs().max(g[k].abs()).max(1e-3));
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn codec_round_trip() {
    let img = Image::from_fn(4, 4, |r, c| (r * 4 + c) as f64 / 15.0);
    let x = encode_image(&img);
    assert_eq!(x[0], -1.0);
    assert_eq!(x[15], 1.0);
    let back = decode_sample(&x).unwrap();
    for (a, b) in back.data().iter().zip(img.data()) {
        assert!((a - b).abs() < 1e-15);
    }
    let wild = decode_sample(&[5.0, -5.0, 0.0, 1.0]).unwrap();
    assert_eq!(wild.data(), &[1.0, 0.0, 0.5, 1.0]);
    assert!(decode_sample(&[0.0; 3]).is_err());
}

fn tiny_world() -> World {
    World::new(8, 16).unwrap()
}

#[test]
fn sft_zero_steps_is_identity_and_empty_data_fails() {
    let w = tiny_world();
    let data = Dataset::render(&w, 2);
    let p = DenoiserParams::init(tiny_arch(1024), 1);
    let cfg = SftConfig { steps: 0, ..Default::default() };
    let (q, rep) = sft_train(p.clone(), &data, &short_schedule(), &cfg).unwrap();
    assert_eq!(p, q);
    assert!(rep.losses.is_empty());
    let empty = Dataset::default();
    assert!(matches!(sft_train(p, &empty, &short_schedule(), &cfg), Err(Error::EmptyDataset)));
}

#[test]
fn sft_reduces_loss_on_tiny_world() {
    let w = tiny_world();
    let data = Dataset::render(&w, 4);
    let p = DenoiserParams::init(Arch::new(1024, 32, 4, 2, 4).unwrap(), 2);
    let cfg = SftConfig { steps: 400, batch: 8, opt: crate::nncore::AdamW { lr: 1e-3, ..Default::default() }, ..Default::default() };
    let (q, rep) = sft_train(p, &data, &short_schedule(), &cfg).unwrap();
    assert!(rep.window_mean(300, 100) < 0.8 * rep.window_mean(0, 100), "{} {}", rep.window_mean(0, 100), rep.window_mean(300, 100));
    let (q2, rep2) = sft_train(DenoiserParams::init(q.arch(), 2), &data, &short_schedule(), &cfg).unwrap();
    assert_eq!(q, q2);
    assert_eq!(rep, rep2);
}

#[test]
fn dataset_round_trip() {
    let w = tiny_world();
    let dir = tempfile::tempdir().unwrap();
    let rows = write_dataset(dir.path(), &w, 3).unwrap();
    assert_eq!(rows.len(), 3);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("prompt_id,tile_path\n"));
    let data = read_dataset(dir.path()).unwrap();
    assert_eq!(data, Dataset::render(&w, 3));
    let first = std::fs::read(dir.path().join("tiles/00001.raw")).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    write_dataset(dir2.path(), &w, 3).unwrap();
    assert_eq!(std::fs::read(dir2.path().join("tiles/00001.raw")).unwrap(), first);
    assert_eq!(std::fs::read_to_string(dir2.path().join("manifest.csv")).unwrap(), manifest);
    assert!(matches!(write_dataset(dir.path(), &w, 0), Err(Error::EmptyCatalog)));
}
