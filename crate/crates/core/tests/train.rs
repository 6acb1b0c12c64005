use std::cell::Cell;

use auscultqa_core::audio::AudioClip;
use auscultqa_core::encoder::{EncoderConfig, RawInit};
use auscultqa_core::eval::HashEmbedder;
use auscultqa_core::lm::{LmConfig, TextVocab, LM_GROUP};
use auscultqa_core::resampler::{PatientBag, QaKind, QaPair, ResamplerConfig};
use auscultqa_core::train::{
    ablate_context, evaluate_split, make_splits, predict, step_gradients, train, BagSource, FusionModel, MainRun,
    MemorySource, TrainConfig,
};
use auscultqa_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 16;

fn lm_config() -> LmConfig {
    LmConfig {
        n_layers: 1,
        d_model: D,
        n_heads: 2,
        d_ffn: 32,
        max_seq: 48,
        cross_attn_every: 1,
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        lr_encoder: 1e-3,
        lr_adapter: 1e-3,
        micro_batch: 2,
        accum_steps: 1,
        epochs: 2,
        max_seconds: 0.2,
        split: [0.5, 0.25, 0.25],
        max_answer_tokens: 3,
        encoder: EncoderConfig {
            d_embed: D,
            d_proj: D,
            raw_init: RawInit::Random,
            ..Default::default()
        },
        resampler: ResamplerConfig {
            n_latents: 4,
            n_heads: 2,
            depth: 1,
            ffn_mult: 2,
        },
        ..Default::default()
    }
}

fn bag(i: usize, n_clips: usize, seconds: f64) -> PatientBag {
    let id = format!("p{i:02}");
    let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
    let n = (16_000.0 * seconds) as usize;
    let clips = (0..n_clips)
        .map(|k| AudioClip {
            waveform: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            valid_len: n,
            site: ["AV", "MV", "TV"][k % 3].into(),
            patient_id: id.clone(),
        })
        .collect();
    let yes = i % 2 == 0;
    let qa = vec![
        QaPair::new("is a murmur present?", if yes { "yes" } else { "no" }, QaKind::Binary).unwrap(),
        QaPair::new("which site shows the abnormality?", if yes { "mitral" } else { "none" }, QaKind::Open).unwrap(),
    ];
    PatientBag::new(id, clips, qa, "synth").unwrap()
}

fn vocab() -> TextVocab {
    let corpus = [
        "you are given heart sound recordings from sites AV MV TV <audio> question: is a murmur present? answer: yes no",
        "which site shows the abnormality? mitral none",
    ];
    TextVocab::build(&corpus, 1).unwrap()
}

fn model(cfg: &TrainConfig) -> (FusionModel, auscultqa_core::numeric::ParamStore) {
    FusionModel::build(cfg, lm_config(), vocab()).unwrap()
}

fn source(n: usize) -> MemorySource {
    MemorySource::new((0..n).map(|i| bag(i, 1 + i % 3, 0.2)).collect())
}

#[test]
fn accumulation_matches_a_single_large_batch() {
    let cfg = config();
    let (m, store) = model(&cfg);
    let (a, b) = (bag(0, 2, 0.12), bag(1, 1, 0.2));
    let (g1, l1) = step_gradients(&m, &store, &[vec![a.clone()], vec![b.clone()]]).unwrap();
    let (g2, l2) = step_gradients(&m, &store, &[vec![a, b]]).unwrap();
    assert!((l1 - l2).abs() < 1e-10);
    let mut seen = 0;
    for id in store.ids() {
        match (g1.get(id), g2.get(id)) {
            (Some(x), Some(y)) => {
                assert!(x.max_abs_diff(y) < 1e-10, "{}", store.param(id).name);
                seen += 1;
            }
            (None, None) => {}
            _ => panic!("gradient present in one run only: {}", store.param(id).name),
        }
    }
    assert!(seen > 10);
}

#[test]
fn empty_step_is_rejected() {
    let cfg = config();
    let (m, store) = model(&cfg);
    assert!(matches!(step_gradients(&m, &store, &[]), Err(Error::Empty(_))));
}

#[test]
fn two_runs_log_identically_and_leave_the_decoder_untouched() {
    let src = source(8);
    let split = make_splits(&src.patients(), [0.5, 0.25, 0.25], 3).unwrap();
    let cfg = TrainConfig {
        max_steps: Some(3),
        ..config()
    };
    let run = || {
        let (m, mut store) = model(&cfg);
        let lm = store.find_group(LM_GROUP).unwrap();
        let before = store.group_digest(lm);
        let r = train(&m, &mut store, &src, &split, None).unwrap();
        assert_eq!(before, store.group_digest(lm));
        assert_eq!(r.lm_digest_before, r.lm_digest_after);
        r
    };
    let (a, b) = (run(), run());
    assert_eq!(a.steps, 3);
    let key = |r: &auscultqa_core::train::TrainReport| serde_json::to_string(&r.log).unwrap();
    assert_eq!(key(&a), key(&b));
    assert!(a.log.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn training_writes_log_and_checkpoints_that_reload() {
    let src = source(8);
    let split = make_splits(&src.patients(), [0.5, 0.25, 0.25], 0).unwrap();
    let cfg = config();
    let (m, mut store) = model(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let r = train(&m, &mut store, &src, &split, Some(dir.path())).unwrap();
    assert_eq!(r.val_losses.len(), 2);
    assert!(dir.path().join("train_log.jsonl").is_file());
    assert!(dir.path().join("epoch1.ckpt").is_file());
    let best = r.best_checkpoint.unwrap();
    let (m2, s2) = FusionModel::load(&best).unwrap();
    assert_eq!(m2.config, cfg);
    for id in store.ids() {
        assert!(store.get(id).bit_eq(s2.get(id)), "{}", store.param(id).name);
    }
    let lm = s2.find_group(LM_GROUP).unwrap();
    assert!(s2.group_info(lm).frozen);
    let p1 = predict(&m, &store, &src, &split.test, true).unwrap();
    let p2 = predict(&m2, &s2, &src, &split.test, true).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn predictions_cover_every_question() {
    let src = source(6);
    let cfg = config();
    let (m, store) = model(&cfg);
    let ids: Vec<String> = src.patients().into_iter().map(|p| p.0).collect();
    let preds = predict(&m, &store, &src, &ids, false).unwrap();
    assert_eq!(preds.len(), 12);
    let (rep, _) = evaluate_split(&m, &store, &src, &ids, true, &HashEmbedder::default()).unwrap();
    assert!(rep.overall.binary.is_some() && rep.overall.open.is_some());
}

#[test]
fn ablation_reuses_the_matching_main_run() {
    let src = source(8);
    let split = make_splits(&src.patients(), [0.5, 0.25, 0.25], 0).unwrap();
    let base = TrainConfig {
        max_steps: Some(1),
        epochs: 1,
        ..config()
    };
    let (m, store) = model(&base);
    let (main_report, _) = evaluate_split(&m, &store, &src, &split.test, true, &HashEmbedder::default()).unwrap();
    let builds = Cell::new(0);
    let build = |c: &TrainConfig| {
        builds.set(builds.get() + 1);
        Ok(model(c))
    };
    let source_for = |_s: f64| Ok(Box::new(source(8)) as Box<dyn BagSource>);
    let rep = ablate_context(
        &base,
        &[0.2, 0.1],
        &build,
        &source_for,
        &split,
        &HashEmbedder::default(),
        Some(MainRun {
            config: &base,
            report: &main_report,
        }),
        None,
    )
    .unwrap();
    assert_eq!(rep.rows.len(), 2);
    assert!(rep.rows[0].reused && !rep.rows[1].reused);
    assert_eq!(builds.get(), 1);
    assert!(rep.to_table().lines().count() == 3);
    assert!(ablate_context(&base, &[], &build, &source_for, &split, &HashEmbedder::default(), None, None).is_err());
}

#[test]
fn width_mismatch_is_a_config_error() {
    let mut cfg = config();
    cfg.encoder.d_proj = D + 1;
    assert!(matches!(FusionModel::build(&cfg, lm_config(), vocab()), Err(Error::Config(_))));
}
