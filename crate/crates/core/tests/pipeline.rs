mod common;

use common::{knee_samples, overfit_fixture, split, tiny_config};
use stereoseg::losses::{depth_loss, seg_loss};
use stereoseg::model::{Model, DISP_HEAD_PREFIX, ENCODER_PREFIX, SEG_HEAD_PREFIX};
use stereoseg::pipeline::{
    checkpoint, forward_batch, read_log, LogRecord, LossSettings, RunConfig, Stage, StepRecord, Trainer,
    CHECKPOINT_FILE, METRICS_FILE,
};
use stereoseg::Error;

const SIZE: usize = 32;

fn losses(r: &[StepRecord]) -> Vec<f64> {
    r.iter().map(|s| s.losses.total).collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn pretrained(seed: u64) -> Model {
    let (stereo, _) = split(&knee_samples(SIZE, 1, 1, 2));
    let mut t = Trainer::pretrain(tiny_config(Stage::Pretrain, SIZE, seed), stereo).unwrap();
    t.run_steps(2).unwrap();
    t.into_state().model
}

#[test]
fn pretraining_never_touches_segmentation_heads() {
    let (stereo, _) = split(&knee_samples(SIZE, 1, 1, 3));
    let mut t = Trainer::pretrain(tiny_config(Stage::Pretrain, SIZE, 4), stereo).unwrap();
    let snapshot = |m: &Model| -> Vec<(String, Vec<f32>)> {
        m.params().iter().map(|(_, p)| (p.name.clone(), p.value.data().to_vec())).collect()
    };
    let before = snapshot(&t.state().model);
    t.run_steps(3).unwrap();
    let after = snapshot(&t.state().model);
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if name.starts_with(SEG_HEAD_PREFIX) {
            assert_eq!(a, b, "{name} changed");
        }
    }
    // everything on the depth path does move
    for prefix in [ENCODER_PREFIX, DISP_HEAD_PREFIX] {
        assert!(before.iter().zip(&after).any(|((n, a), (_, b))| n.starts_with(prefix) && a != b));
    }
}

#[test]
fn finetune_total_is_sum_of_independent_losses() {
    let samples = knee_samples(SIZE, 2, 1, 4);
    let (stereo, labeled) = split(&samples);
    let cfg = tiny_config(Stage::Finetune, SIZE, 5);
    let model = Model::build(&cfg.model, 5).unwrap();
    let settings = LossSettings::from_config(&cfg);
    let fwd = forward_batch(&model, &labeled[..2], &stereo[2..], &settings, true, false).unwrap();
    let mut seg = 0.0;
    for (heads, l) in fwd.seg_heads.iter().zip(&labeled[..2]) {
        assert_eq!(heads.len(), 4);
        for p in heads {
            seg += seg_loss(&l.mask, p, &cfg.seg_loss).unwrap() / 8.0;
        }
    }
    let mut dep = 0.0;
    for (p, s) in fwd.pyramids.iter().zip(&stereo[2..]) {
        dep += depth_loss(s, p, &cfg.depth_loss).unwrap() / 2.0;
    }
    assert!((fwd.losses.total - (seg + dep)).abs() < 1e-9);
    assert!((fwd.losses.seg - seg).abs() < 1e-9);
    assert!((fwd.losses.depth - dep).abs() < 1e-9);
}

#[test]
fn zero_depth_weight_leaves_disparity_heads_without_gradient() {
    let (stereo, labeled) = split(&knee_samples(SIZE, 3, 1, 2));
    let mut cfg = tiny_config(Stage::Finetune, SIZE, 6);
    cfg.train.depth_weight = 0.0;
    let mut t = Trainer::finetune(cfg.clone(), &pretrained(6), stereo.clone(), labeled.clone()).unwrap();
    let heads_before: Vec<Vec<f32>> = heads(&t.state().model);
    t.run_steps(2).unwrap();
    assert_eq!(t.state().model.params().grad_norm(DISP_HEAD_PREFIX), 0.0);
    assert!(t.state().model.params().grad_norm(SEG_HEAD_PREFIX) > 0.0);
    assert_eq!(heads(&t.state().model), heads_before);

    cfg.train.depth_weight = 1.0;
    let mut t = Trainer::finetune(cfg, &pretrained(6), stereo, labeled).unwrap();
    t.run_steps(1).unwrap();
    assert!(t.state().model.params().grad_norm(DISP_HEAD_PREFIX) > 0.0);
}

fn heads(m: &Model) -> Vec<Vec<f32>> {
    m.params()
        .iter()
        .filter(|(_, p)| p.name.starts_with(DISP_HEAD_PREFIX))
        .map(|(_, p)| p.value.data().to_vec())
        .collect()
}

#[test]
fn finetune_starts_from_pretrained_encoder_only() {
    let (stereo, labeled) = split(&knee_samples(SIZE, 3, 1, 2));
    let init = pretrained(7);
    let cfg = tiny_config(Stage::Finetune, SIZE, 8);
    let fresh = Model::build(&cfg.model, 8).unwrap();
    let t = Trainer::finetune(cfg, &init, stereo.clone(), labeled.clone()).unwrap();
    for (_, p) in t.state().model.params().iter() {
        let src = if p.name.starts_with(ENCODER_PREFIX) { &init } else { &fresh };
        assert_eq!(p.value.data(), src.params().by_name(&p.name).unwrap().value.data(), "{}", p.name);
    }
    for (name, buf) in t.state().model.params().buffers() {
        if name.starts_with(ENCODER_PREFIX) {
            assert_eq!(buf, init.params().buffer(name));
        }
    }

    let mut other = tiny_config(Stage::Finetune, SIZE, 8);
    other.model.base_channels = 8;
    assert!(matches!(Trainer::finetune(other, &init, stereo, labeled), Err(Error::Checkpoint(_))));
}

#[test]
fn fixed_seed_reproduces_across_runs_and_thread_counts() {
    let (stereo, labeled) = split(&knee_samples(SIZE, 4, 1, 5));
    let mut cfg = tiny_config(Stage::Finetune, SIZE, 9);
    cfg.augment.depth.enabled = true;
    cfg.augment.seg.enabled = true;
    cfg.train.batch_size = 2;
    let init = pretrained(9);
    let run = |threads: usize| {
        let mut c = cfg.clone();
        c.threads = threads;
        let mut t = Trainer::finetune(c, &init, stereo.clone(), labeled.clone()).unwrap();
        losses(&t.run_steps(10).unwrap())
    };
    let a = run(1);
    assert_close(&a, &run(1), 1e-6);
    assert_close(&a, &run(3), 1e-6);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (stereo, labeled) = split(&knee_samples(SIZE, 5, 1, 5));
    let mut cfg = tiny_config(Stage::Finetune, SIZE, 10);
    cfg.augment.depth.enabled = true;
    cfg.augment.seg.enabled = true;
    cfg.train.lr_schedule = stereoseg::pipeline::LrSchedule::Polynomial { gamma: 0.9 };
    cfg.train.epochs = 20;
    let init = pretrained(10);

    let mut full = Trainer::finetune(cfg.clone(), &init, stereo.clone(), labeled.clone()).unwrap();
    let all = losses(&full.run_steps(14).unwrap());

    let mut first = Trainer::finetune(cfg, &init, stereo.clone(), labeled.clone()).unwrap();
    first.run_steps(4).unwrap();
    let bytes = checkpoint::to_bytes(first.state());
    let restored = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(restored.step, 4);
    // the saved state re-serialises to the same bytes
    assert!(checkpoint::to_bytes(&restored) == bytes);
    let mut second = Trainer::resume(restored, stereo, labeled).unwrap();
    let rest = losses(&second.run_steps(10).unwrap());
    assert_close(&all[4..], &rest, 1e-6);
    assert_eq!(second.state().history, full.state().history);
}

#[test]
fn checkpoints_reject_mismatch_and_corruption() {
    let (stereo, _) = split(&knee_samples(SIZE, 1, 1, 2));
    let mut t = Trainer::pretrain(tiny_config(Stage::Pretrain, SIZE, 11), stereo).unwrap();
    t.run_steps(1).unwrap();
    let bytes = checkpoint::to_bytes(t.state());

    let mut other = tiny_config(Stage::Pretrain, SIZE, 11);
    other.model.d_max = 0.2;
    assert!(matches!(t.state().check_compatible(&other), Err(Error::Checkpoint(_))));
    assert!(t.state().check_compatible(&tiny_config(Stage::Pretrain, SIZE, 11)).is_ok());

    let mut v = bytes.clone();
    v[8] = 99;
    let err = checkpoint::from_bytes(&v).unwrap_err();
    assert!(err.to_string().contains("version 99"), "{err}");

    let mut c = bytes.clone();
    let last = c.len() - 1;
    c[last] ^= 0x40;
    assert!(checkpoint::from_bytes(&c).unwrap_err().to_string().contains("checksum"));
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    assert!(checkpoint::from_bytes(b"garbage").is_err());
}

#[test]
fn non_finite_loss_reports_batch_and_terms() {
    let (stereo, _) = split(&knee_samples(SIZE, 1, 1, 1));
    let mut cfg = tiny_config(Stage::Pretrain, SIZE, 12);
    cfg.train.batch_size = 1;
    let mut t = Trainer::pretrain(cfg, stereo.clone()).unwrap();
    t.run_steps(1).unwrap();
    // a diverged weight poisons every output
    let mut state = t.into_state();
    state.model.params_mut().by_name_mut("enc.0.weight").unwrap().value.data_mut()[0] = f32::NAN;
    let mut t = Trainer::resume(state, stereo, Vec::new()).unwrap();
    match t.step() {
        Err(Error::NonFinite { step, batch_ids, terms }) => {
            assert_eq!(step, 1);
            assert_eq!(batch_ids, vec!["knee0_0000#0".to_string()]);
            assert!(terms.contains("not finite"), "{terms}");
        }
        other => panic!("expected a non-finite error, got {:?}", other.map(|r| r.losses)),
    }
}

#[test]
fn pretrain_overfits_two_samples() {
    let (stereo, _, cfg) = overfit_fixture(Stage::Pretrain);
    let mut t = Trainer::pretrain(cfg, stereo).unwrap();
    let rec = t.run_steps(200).unwrap();
    let first = rec[0].losses.depth;
    let last = rec.last().unwrap().losses.depth;
    eprintln!("pretrain overfit: depth loss {first:.5} -> {last:.5} ({:.3})", last / first);
    assert!(last < 0.1 * first, "depth loss {first} -> {last}");
}

#[test]
fn run_writes_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (stereo, _) = split(&knee_samples(SIZE, 1, 1, 3));
    let mut cfg = tiny_config(Stage::Pretrain, SIZE, 14);
    cfg.train.epochs = 2;
    cfg.train.checkpoint_every = 1;
    let mut t = Trainer::pretrain(cfg.clone(), stereo.clone()).unwrap().with_output(dir.path()).unwrap();
    t.run().unwrap();
    let state = t.into_state();
    assert_eq!((state.epoch, state.step), (2, 4));
    let log = read_log(&dir.path().join(METRICS_FILE)).unwrap();
    assert!(matches!(&log[0], LogRecord::Config { config, .. } if RunConfig::parse(config, &[]).unwrap() == cfg));
    assert_eq!(log.iter().filter(|r| matches!(r, LogRecord::Step(_))).count(), 4);
    let epochs: Vec<_> = log.iter().filter_map(|r| if let LogRecord::Epoch(e) = r { Some(*e) } else { None }).collect();
    assert_eq!(epochs, state.history);
    let saved = checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(saved.step, 4);
    assert!(checkpoint::to_bytes(&saved) == checkpoint::to_bytes(&state));
    assert!(Trainer::pretrain(cfg, Vec::new()).is_err());
}
