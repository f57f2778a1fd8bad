mod common;

use std::collections::BTreeSet;

use ehtl::corpus::{Split, SyntheticCorpus, ALPHABET};
use ehtl::model::{parameter_census, Architecture, AsrModel, DepressionModel, TaskKind};
use ehtl::tensor::Rng;
use ehtl::trainer::{
    asr_examples, evaluate_sessions, pretrain_asr, run_experiment, sessions_from_synthetic, train_downstream, Arm,
    SessionData, TrainConfig,
};
use ehtl::transfer::{transfer_encoder, Checkpoint, CheckpointMeta, FreezePolicy};
use ehtl::ErrorKind;

fn sessions(cfg: &ehtl::trainer::ExperimentConfig) -> Vec<SessionData> {
    let corpus = SyntheticCorpus::generate(&cfg.corpus).unwrap();
    sessions_from_synthetic(&corpus, &cfg.features).unwrap()
}

fn split(all: &[SessionData], s: Split) -> Vec<SessionData> {
    all.iter().filter(|x| x.split == s).cloned().collect()
}

fn meta() -> CheckpointMeta {
    CheckpointMeta {
        model_kind: "asr".into(),
        seed: 0,
        step: 0,
        freeze_policy: Some(FreezePolicy::Tl1),
        config: serde_json::json!({}),
        extra: Default::default(),
    }
}

#[test]
fn encoder_only_transfer_is_exact() {
    let cfg = common::tiny_experiment();
    let asr = AsrModel::new(&cfg.model, ALPHABET.len(), &mut Rng::new(3)).unwrap();
    let ck = Checkpoint::from_store(&asr.store, meta());
    let mut down =
        DepressionModel::new(&cfg.model, Architecture::Ehac, TaskKind::Classification, &mut Rng::new(4)).unwrap();
    let before = down.store.clone();
    let rep = transfer_encoder(&ck, &mut down.store).unwrap();
    assert!(!rep.copied.is_empty());

    for (_, p) in down.store.iter() {
        let now: Vec<u64> = p.tensor.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = if p.name.starts_with("encoder.") {
            ck.get(&p.name).unwrap().data().iter().map(|v| v.to_bits()).collect()
        } else {
            let id = before.id(&p.name).unwrap();
            before.get(id).tensor.data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(now, want, "{}", p.name);
    }
    let up = parameter_census(&asr.store);
    let dn = parameter_census(&down.store);
    assert!(!dn.contains_key("decoder") && !dn.contains_key("ctc_head"));
    assert!(dn["total"] < up["total"]);
    assert_eq!(dn["encoder"], up["encoder"]);
}

#[test]
fn checkpoint_file_round_trip() {
    let cfg = common::tiny_experiment();
    let asr = AsrModel::new(&cfg.model, ALPHABET.len(), &mut Rng::new(9)).unwrap();
    let ck = Checkpoint::from_store(&asr.store, meta());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("asr.ehck");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn speakers_never_cross_splits() {
    let cfg = common::tiny_experiment();
    let corpus = SyntheticCorpus::generate(&cfg.corpus).unwrap();
    let sets: Vec<BTreeSet<&str>> = Split::ALL.iter().map(|&s| corpus.manifest.speakers(s)).collect();
    for i in 0..3 {
        assert!(!sets[i].is_empty());
        for j in i + 1..3 {
            assert!(sets[i].is_disjoint(&sets[j]));
        }
    }
}

#[test]
fn pretraining_is_deterministic_and_records_policy() {
    let cfg = common::tiny_experiment();
    let all = sessions(&cfg);
    let (train, dev) = (split(&all, Split::Train), split(&all, Split::Dev));
    let a = asr_examples(&train, Split::Train).unwrap();
    let d = asr_examples(&dev, Split::Dev).unwrap();
    let pcfg = TrainConfig {
        freeze_policy: FreezePolicy::Tl2,
        ..cfg.pretrain.clone()
    };
    let x = pretrain_asr(&a, &d, ALPHABET.len(), &cfg.model, &pcfg).unwrap();
    let y = pretrain_asr(&a, &d, ALPHABET.len(), &cfg.model, &pcfg).unwrap();
    assert_eq!(x.checkpoint.to_bytes().unwrap(), y.checkpoint.to_bytes().unwrap());
    assert_eq!(x.checkpoint.meta.freeze_policy, Some(FreezePolicy::Tl2));

    // TL-2 leaves the decoder and CTC head at their initialization.
    let init = AsrModel::new(&cfg.model, ALPHABET.len(), &mut Rng::new(pcfg.seed).derive(1)).unwrap();
    for t in &x.checkpoint.tensors {
        if t.name.starts_with("decoder.") || t.name.starts_with("ctc_head.") {
            let id = init.store.id(&t.name).unwrap();
            assert_eq!(&t.tensor, &init.store.get(id).tensor, "{}", t.name);
        }
    }
}

#[test]
fn pretraining_rejects_downstream_policies() {
    let cfg = common::tiny_experiment();
    let all = sessions(&cfg);
    let (train, dev) = (split(&all, Split::Train), split(&all, Split::Dev));
    let a = asr_examples(&train, Split::Train).unwrap();
    let d = asr_examples(&dev, Split::Dev).unwrap();
    let pcfg = TrainConfig {
        freeze_policy: FreezePolicy::FinetuneEncoder,
        ..cfg.pretrain.clone()
    };
    let err = pretrain_asr(&a, &d, ALPHABET.len(), &cfg.model, &pcfg).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
}

#[test]
fn untranscribed_session_is_named() {
    let cfg = common::tiny_experiment();
    let mut all = split(&sessions(&cfg), Split::Train);
    for seg in &mut all[0].segments {
        seg.transcript = None;
    }
    let err = asr_examples(&all, Split::Train).unwrap_err();
    assert!(err.to_string().contains(&all[0].session_id), "{err}");
}

#[test]
fn downstream_refuses_test_sessions() {
    let cfg = common::tiny_experiment();
    let all = sessions(&cfg);
    let (train, test) = (split(&all, Split::Train), split(&all, Split::Test));
    let err = train_downstream(&train, &test, &cfg.model, Architecture::Ehac, None, &cfg.downstream).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    let withheld: Vec<SessionData> = split(&all, Split::Dev).iter().map(|s| s.withheld()).collect();
    assert!(train_downstream(&train, &withheld, &cfg.model, Architecture::Ehac, None, &cfg.downstream).is_err());
}

#[test]
fn downstream_outputs_are_probabilities_and_reproducible() {
    let cfg = common::tiny_experiment();
    let all = sessions(&cfg);
    let (train, dev) = (split(&all, Split::Train), split(&all, Split::Dev));
    for arch in [Architecture::Ehac, Architecture::Lstm] {
        let a = train_downstream(&train, &dev, &cfg.model, arch, None, &cfg.downstream).unwrap();
        let b = train_downstream(&train, &dev, &cfg.model, arch, None, &cfg.downstream).unwrap();
        let (ra, sa) = evaluate_sessions(&a.model, &dev, "x", "dev").unwrap();
        let (rb, sb) = evaluate_sessions(&b.model, &dev, "x", "dev").unwrap();
        assert_eq!(ra, rb);
        assert_eq!(sa, sb);
        assert_eq!(sa.len(), dev.len());
        assert!(sa.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn regression_task_trains() {
    let cfg = common::tiny_experiment();
    let all = sessions(&cfg);
    let (train, dev) = (split(&all, Split::Train), split(&all, Split::Dev));
    let dcfg = TrainConfig {
        task: TaskKind::Regression,
        ..cfg.downstream.clone()
    };
    let out = train_downstream(&train, &dev, &cfg.model, Architecture::Ehac, None, &dcfg).unwrap();
    let (rep, _) = evaluate_sessions(&out.model, &dev, "scratch", "dev").unwrap();
    assert!(rep.metrics["rmse"].is_finite() && rep.metrics["rmse"] > 0.0);
    assert!(rep.metrics.contains_key("pcc"));
}

#[test]
fn experiment_report_is_byte_identical_on_rerun() {
    let mut cfg = common::tiny_experiment();
    cfg.arms = vec![Arm::Scratch, Arm::Tl1, Arm::Tl2, Arm::LstmBaseline];
    let all = sessions(&cfg);
    let a = run_experiment(&cfg, &all).unwrap();
    let b = run_experiment(&cfg, &all).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.render_table(), b.render_table());

    for &seed in &cfg.seeds {
        for &arm in &cfg.arms {
            assert_eq!(a.comparison(arm, arm, seed).unwrap().delong.p_value, 1.0);
        }
        assert!(a.run(Arm::Tl1, seed).unwrap().pretrain_cer.is_some());
        assert!(a.run(Arm::Scratch, seed).unwrap().pretrain_cer.is_none());
    }
    let table = a.render_table();
    for arm in &cfg.arms {
        for s in ["dev", "test"] {
            assert!(table.contains(&format!("{}/{s}", arm.display())), "{table}");
        }
    }
}

#[test]
fn null_corpus_carries_no_signal() {
    let mut aucs = Vec::new();
    for seed in 1..=5u64 {
        let mut cfg = common::tiny_experiment();
        cfg.corpus = ehtl::corpus::SyntheticCorpusConfig {
            n_speakers: 150,
            sessions_per_speaker: (1, 1),
            responses_per_session: (1, 1),
            seed,
            ..cfg.corpus.null()
        };
        cfg.downstream.seed = seed;
        let all = sessions(&cfg);
        let (train, dev) = (split(&all, Split::Train), split(&all, Split::Dev));
        let out = train_downstream(&train, &dev, &cfg.model, Architecture::Ehac, None, &cfg.downstream).unwrap();
        let (rep, _) = evaluate_sessions(&out.model, &dev, "scratch", "dev").unwrap();
        aucs.push(rep.metrics["auc"]);
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((0.4..=0.6).contains(&mean), "{aucs:?}");
}
