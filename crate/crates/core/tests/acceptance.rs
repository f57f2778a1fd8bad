//! One PASS/FAIL line per acceptance criterion, at the stated tolerances.
//! Runs the full five-seed experiment on the default corpus, so it takes a
//! while; everything else finishes in seconds.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use ehtl::corpus::{phq8_to_binary, Split, SyntheticCorpus, ALPHABET};
use ehtl::diagnostics::{run_gradcheck_suite, sign_flip_fixture};
use ehtl::eval::{auc, cer, delong_test, eer_point, paired_bootstrap_test, roc_curve, trapezoidal_auc};
use ehtl::losses::ctc_forward_backward;
use ehtl::model::{parameter_census, Architecture, AsrModel, DepressionModel, TaskKind};
use ehtl::tensor::Rng;
use ehtl::trainer::{
    asr_examples, pretrain_asr, run_experiment, sessions_from_synthetic, Arm, ExperimentConfig, ExperimentReport,
    TrainConfig,
};
use ehtl::transfer::{transfer_encoder, Checkpoint, CheckpointMeta, FreezePolicy};

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: &'static str, pass: bool, detail: String) {
    println!("criterion {id:>2}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, pass, detail });
}

fn gradients(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let results = run_gradcheck_suite().expect("suite builds");
    let secs = t.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let mutant_caught = !sign_flip_fixture().unwrap().passed();
    report(
        out,
        "1",
        failed.is_empty() && worst < 1e-4 && secs < 60.0 && mutant_caught,
        format!(
            "{} checks, max rel err {worst:.2e} (< 1e-4), {secs:.1} s (< 60 s), failing {failed:?}, sign-flip caught {mutant_caught}",
            results.len()
        ),
    );
}

fn ctc_oracle(out: &mut Vec<Outcome>) {
    let mut rng = Rng::new(0xc7c);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 500 {
        let t = rng.int_range(1, 6);
        let a = rng.int_range(1, 4);
        let l = rng.int_range(0, 3);
        let labels: Vec<usize> = (0..l).map(|_| rng.int_range(1, a)).collect();
        let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
        if labels.len() + repeats > t {
            continue;
        }
        let lp = common::random_log_probs(t, a + 1, &mut rng);
        let fb = ctc_forward_backward(&lp, &labels, 0).unwrap().loss;
        let bf = common::ctc_brute_force(&lp, &labels, 0);
        worst = worst.max((fb - bf).abs());
        done += 1;
    }
    report(out, "2", worst <= 1e-8, format!("500 instances, max |Δloss| {worst:.2e} (≤ 1e-8)"));
}

fn auc_oracle(out: &mut Vec<Outcome>) {
    let mut rng = Rng::new(0xa0c);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.int_range(2, 200);
        let (s, l) = common::tied_scored_set(&mut rng, n, 6);
        let d = (auc(&s, &l).unwrap() - trapezoidal_auc(&roc_curve(&s, &l).unwrap())).abs();
        worst = worst.max(d);
    }
    let fixed = auc(&[0.9, 0.4, 0.5, 0.1], &[true, true, false, false]).unwrap();
    report(
        out,
        "3",
        worst <= 1e-12 && fixed == 0.75,
        format!("200 tied sets, max |Δ| {worst:.2e} (≤ 1e-12); reference case {fixed} (= 0.75)"),
    );
}

fn delong(out: &mut Vec<Outcome>) {
    let mut rng = Rng::new(0xde1);
    let (a, _, l) = common::paired_scores(&mut rng, 12, 15, 1.0, 0.5);
    let same = delong_test(&a, &a, &l).unwrap().p_value;

    // 3 positives then 3 negatives; AUCs 8/9 and 7/9, var(diff) = 11/81.
    let ha = [0.9, 0.6, 0.4, 0.5, 0.3, 0.1];
    let hb = [0.8, 0.3, 0.7, 0.2, 0.6, 0.4];
    let hl = [true, true, true, false, false, false];
    let h = delong_test(&ha, &hb, &hl).unwrap();
    let z_want = 1.0 / 11f64.sqrt();
    let p_want = 0.763024600552995; // erfc(1/sqrt(22))
    let hand_err = (h.z - z_want)
        .abs()
        .max((h.p_value - p_want).abs())
        .max((h.auc_a - 8.0 / 9.0).abs())
        .max((h.auc_b - 7.0 / 9.0).abs())
        .max((h.variance - 11.0 / 81.0).abs());

    let mut worst = 0.0f64;
    for case in 0..20 {
        let np = rng.int_range(15, 30);
        let nn = rng.int_range(15, 30);
        let sep = rng.uniform_range(0.0, 0.8);
        let (a, b, l) = common::paired_scores(&mut rng, np, nn, 1.0, 1.0 - sep);
        let d = delong_test(&a, &b, &l).unwrap().p_value;
        let bs = paired_bootstrap_test(&a, &b, &l, 100_000, 1000 + case).unwrap();
        worst = worst.max((d - bs).abs());
    }
    report(
        out,
        "4",
        same == 1.0 && hand_err <= 1e-10 && worst <= 0.02,
        format!("(a) p(a,a) = {same}; (b) hand case err {hand_err:.1e} (≤ 1e-10); (c) max |Δp| vs 1e5 bootstrap {worst:.4} (≤ 0.02)"),
    );
}

fn eer(out: &mut Vec<Outcome>) {
    let mut rng = Rng::new(0xee7);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.int_range(2, 120);
        let levels = 1 + rng.int_range(1, 20);
        let (s, l) = common::tied_scored_set(&mut rng, n, levels);
        let e = eer_point(&s, &l).unwrap();
        worst = worst.max((e.sensitivity - e.specificity).abs());
    }
    let sep = eer_point(&[0.9, 0.8, 0.7, 0.3, 0.2], &[true, true, true, false, false]).unwrap();
    report(
        out,
        "5",
        worst < 1e-6 && sep.sensitivity == 1.0 && sep.specificity == 1.0,
        format!(
            "500 sets, max |sens − spec| {worst:.1e} (< 1e-6); separable → {}/{}",
            sep.sensitivity, sep.specificity
        ),
    );
}

fn transfer(out: &mut Vec<Outcome>) {
    let cfg = ExperimentConfig::default();
    let asr = AsrModel::new(&cfg.model, ALPHABET.len(), &mut Rng::new(5)).unwrap();
    let meta = CheckpointMeta {
        model_kind: "asr".into(),
        seed: 5,
        step: 0,
        freeze_policy: Some(FreezePolicy::Tl1),
        config: serde_json::json!({}),
        extra: Default::default(),
    };
    let ck = Checkpoint::from_bytes(&Checkpoint::from_store(&asr.store, meta).to_bytes().unwrap()).unwrap();
    let mut down =
        DepressionModel::new(&cfg.model, Architecture::Ehac, TaskKind::Classification, &mut Rng::new(6)).unwrap();
    let before = down.store.clone();
    transfer_encoder(&ck, &mut down.store).unwrap();
    let bits = |d: &[f64]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let (mut enc_ok, mut other_ok, mut n_enc) = (true, true, 0);
    for (_, p) in down.store.iter() {
        if p.name.starts_with("encoder.") {
            n_enc += 1;
            enc_ok &= bits(p.tensor.data()) == bits(ck.get(&p.name).unwrap().data());
        } else {
            other_ok &= bits(p.tensor.data()) == bits(before.by_name(&p.name).unwrap().tensor.data());
        }
    }
    let up = parameter_census(&asr.store);
    let dn = parameter_census(&down.store);
    let no_asr = !dn.contains_key("decoder") && !dn.contains_key("ctc_head");
    report(
        out,
        "6",
        enc_ok && other_ok && no_asr && dn["total"] < up["total"] && n_enc > 0,
        format!(
            "{n_enc} encoder tensors bitwise equal {enc_ok}; others unchanged {other_ok}; no decoder./ctc_head. {no_asr}; census {} < {}",
            dn["total"], up["total"]
        ),
    );
}

fn cer_oracle(out: &mut Vec<Outcome>) {
    let fixed = cer("a", "abcd").unwrap();
    let mut rng = Rng::new(0xce4);
    let alphabet: Vec<char> = "abcde".chars().collect();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mut r = common::random_string(&mut rng, 10, &alphabet);
        if r.is_empty() {
            r.push('a');
        }
        let h = common::random_string(&mut rng, 10, &alphabet);
        let (rc, hc): (Vec<char>, Vec<char>) = (r.chars().collect(), h.chars().collect());
        let want = common::levenshtein(&rc, &hc) as f64 / rc.len() as f64;
        if cer(&r, &h).unwrap() != want {
            mismatches += 1;
        }
    }
    report(
        out,
        "7",
        fixed == 3.0 && mismatches == 0,
        format!("cer(a, abcd) = {fixed}; {mismatches}/1000 disagreements with brute-force DP"),
    );
}

fn mean_diff(rep: &ExperimentReport, a: Arm, b: Arm) -> f64 {
    rep.mean_metric(a, Split::Test, "auc").unwrap() - rep.mean_metric(b, Split::Test, "auc").unwrap()
}

fn experiment(out: &mut Vec<Outcome>) {
    let cfg = ExperimentConfig::default();
    let t = Instant::now();
    let corpus = SyntheticCorpus::generate(&cfg.corpus).unwrap();
    let sessions = sessions_from_synthetic(&corpus, &cfg.features).unwrap();
    let rep = run_experiment(&cfg, &sessions).unwrap();
    let secs = t.elapsed().as_secs_f64();
    print!("{}", rep.render_table());

    let gain = mean_diff(&rep, Arm::Tl1, Arm::Scratch);
    let p_gain: Vec<f64> = cfg
        .seeds
        .iter()
        .map(|&s| rep.comparison(Arm::Scratch, Arm::Tl1, s).unwrap().delong.p_value)
        .collect();
    let sig = p_gain.iter().filter(|&&p| p < 0.05).count();
    report(
        out,
        "8",
        gain >= 0.03 && sig >= 3 && secs < 1800.0,
        format!(
            "{} speakers / {} sessions; mean AUC(TL-1) − AUC(scratch) = {gain:.3} (≥ 0.03); DeLong p {p_gain:.3?}, {sig}/5 < 0.05 (≥ 3); {:.0} s (< 1800 s)",
            cfg.corpus.n_speakers,
            sessions.len(),
            secs
        ),
    );

    let cers: Vec<(f64, f64)> = cfg
        .seeds
        .iter()
        .map(|&s| {
            (
                rep.run(Arm::Tl1, s).unwrap().pretrain_cer.unwrap(),
                rep.run(Arm::Tl2, s).unwrap().pretrain_cer.unwrap(),
            )
        })
        .collect();
    let cer_ok = cers.iter().all(|(c1, c2)| c2 > c1);
    let gap = mean_diff(&rep, Arm::Tl1, Arm::Tl2).abs();
    let p_same: Vec<f64> = cfg
        .seeds
        .iter()
        .map(|&s| rep.comparison(Arm::Tl1, Arm::Tl2, s).unwrap().delong.p_value)
        .collect();
    let ns = p_same.iter().filter(|&&p| p > 0.05).count();
    report(
        out,
        "9",
        cer_ok && gap <= 0.05 && ns >= 3,
        format!(
            "dev CER (TL-1, TL-2) per seed {cers:.2?}, TL-2 worse on all {cer_ok}; mean |ΔAUC| {gap:.3} (≤ 0.05); DeLong p {p_same:.3?}, {ns}/5 > 0.05 (≥ 3)"
        ),
    );
}

fn hygiene(out: &mut Vec<Outcome>) {
    let cfg = common::tiny_experiment();
    let default_corpus = SyntheticCorpus::generate(&ExperimentConfig::default().corpus).unwrap();
    let sets: Vec<BTreeSet<&str>> = Split::ALL.iter().map(|&s| default_corpus.manifest.speakers(s)).collect();
    let overlap = sets[0].intersection(&sets[1]).count()
        + sets[0].intersection(&sets[2]).count()
        + sets[1].intersection(&sets[2]).count();

    let m1 = SyntheticCorpus::generate(&cfg.corpus).unwrap().manifest.to_jsonl().unwrap();
    let m2 = SyntheticCorpus::generate(&cfg.corpus).unwrap().manifest.to_jsonl().unwrap();

    let corpus = SyntheticCorpus::generate(&cfg.corpus).unwrap();
    let sessions = sessions_from_synthetic(&corpus, &cfg.features).unwrap();
    let pick = |s| sessions.iter().filter(|x| x.split == s).cloned().collect::<Vec<_>>();
    let (train, dev) = (pick(Split::Train), pick(Split::Dev));
    let (a, d) = (asr_examples(&train, Split::Train).unwrap(), asr_examples(&dev, Split::Dev).unwrap());
    let pcfg = TrainConfig { ..cfg.pretrain.clone() };
    let c1 = pretrain_asr(&a, &d, ALPHABET.len(), &cfg.model, &pcfg).unwrap().checkpoint.to_bytes().unwrap();
    let c2 = pretrain_asr(&a, &d, ALPHABET.len(), &cfg.model, &pcfg).unwrap().checkpoint.to_bytes().unwrap();

    let r1 = run_experiment(&cfg, &sessions).unwrap();
    let r2 = run_experiment(&cfg, &sessions).unwrap();
    let reports_equal = r1.to_json().unwrap() == r2.to_json().unwrap() && r1.render_table() == r2.render_table();
    let side_by_side = cfg.arms.iter().all(|a| {
        let t = r1.render_table();
        t.contains(&format!("{}/dev", a.display())) && t.contains(&format!("{}/test", a.display()))
    });
    report(
        out,
        "10",
        overlap == 0 && m1 == m2 && c1 == c2 && reports_equal && side_by_side,
        format!(
            "speaker overlap {overlap}; manifests identical {}; checkpoints identical {}; reports identical {reports_equal}; dev/test rows side by side {side_by_side}",
            m1 == m2,
            c1 == c2
        ),
    );
}

fn phq8(out: &mut Vec<Outcome>) {
    let all_ok = (0..=24).all(|s| phq8_to_binary(s).unwrap() == (s >= 10));
    let edge = phq8_to_binary(10).unwrap() && !phq8_to_binary(9).unwrap();
    report(out, "11", all_ok && edge, format!("25 scores checked; 10 → +dep, 9 → −dep: {edge}"));
}

fn main() {
    // `cargo test` passes harness flags; a name filter that excludes this
    // target's name skips the run.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let mut out = Vec::new();
    gradients(&mut out);
    ctc_oracle(&mut out);
    auc_oracle(&mut out);
    delong(&mut out);
    eer(&mut out);
    transfer(&mut out);
    cer_oracle(&mut out);
    phq8(&mut out);
    hygiene(&mut out);
    experiment(&mut out);
    let failed: Vec<&str> = out.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!("acceptance: {}/{} criteria pass", out.len() - failed.len(), out.len());
    if !failed.is_empty() {
        for o in out.iter().filter(|o| !o.pass) {
            eprintln!("failed criterion {}: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
