//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS] criterion N` line (run with `--nocapture` to see them). Every
//! tolerance is pinned here in code.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use advchan::agent::Repeat;
use advchan::countermeasures::{bit_alphabet, run_vocab_transfer, vocab_decode, vocab_encode, Policy};
use advchan::medium::{AdvPayload, LossModel, MediumConfig};
use advchan::metrics::CurvePoint;
use advchan::pdu::{build_pdu, parse_pdu, serialize_pdu, PduKind, ServiceUuid};
use advchan::protocol::{segment_payload, ChannelMessage};
use advchan::scenario::{
    execute_run, load_scenario, random_payload, run_scenario, RunOptions, RunResult, Scenario,
};
use advchan::NodeId;

fn legacy_scenario(name: &str, payload_len: usize, payload_seed: u64, r: u32) -> Scenario {
    let mut scn = Scenario::basic(
        name,
        PduKind::LegacyNonConnectable,
        12,
        random_payload(payload_len, payload_seed),
    );
    scn.repeat = Repeat::Count(r);
    scn
}

fn agent_segment_events(run: &RunResult) -> Vec<(advchan::SimTime, u8, bool)> {
    run.trace
        .advertisements()
        .filter(|ev| ev.sender == NodeId(1))
        .filter_map(|ev| match &ev.msg {
            AdvPayload::Message(ChannelMessage::Segment(seg)) => Some((
                ev.at,
                seg.number.value(),
                ev.delivered_to.contains(&NodeId(0)),
            )),
            _ => None,
        })
        .collect()
}

#[test]
fn criterion_1_segmentation_exactness() {
    let started = Instant::now();
    let cases = [(1236usize, 12usize, 103usize), (6180, 237, 27), (6180, 170, 37)];
    for (len, z, want) in cases {
        let n = segment_payload(&vec![0xAB; len], z).unwrap().len();
        assert_eq!(n, want, "{len} B at z={z}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}, budget 1 s");
    println!(
        "[PASS] criterion 1: segmentation exactness (1236/12->103, 6180/237->27, 6180/170->37) in {elapsed:?}"
    );
}

#[test]
fn criterion_2_end_to_end_fidelity() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1DE);
    for i in 0..200u64 {
        let len = rng.random_range(1..=3000);
        let (mode, z) = if i % 2 == 0 {
            (PduKind::LegacyNonConnectable, 12)
        } else {
            (PduKind::ExtendedNonConnectable, 237)
        };
        let mut scn = Scenario::basic("fidelity", mode, z, random_payload(len, i));
        scn.repeat = Repeat::Count(1);
        let run = execute_run(&scn, 50, i).unwrap();
        assert!(
            run.completed,
            "run {i} ({} B, {}) did not reconstruct byte-exactly: {:?}",
            len,
            mode.label(),
            run.failure
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}, budget 30 s");
    println!("[PASS] criterion 2: 200 payloads (1 B..3 KB, legacy+extended) byte-exact in {elapsed:?}");
}

#[test]
fn criterion_3_recovery_convergence() {
    let started = Instant::now();
    let mut scn = legacy_scenario("recovery", 1236, 7, 3);
    scn.loss = LossModel::Bernoulli(0.3);
    scn.recovery_round_cap = 50;
    for seed in 0..20u64 {
        let run = execute_run(&scn, 1000, seed).unwrap();
        assert!(
            run.completed,
            "seed {seed} failed after {} rounds: {:?}",
            run.rounds_used, run.failure
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 60 s");
    println!("[PASS] criterion 3: 20 seeds at p=0.3 all complete byte-exact in {elapsed:?}");
}

#[test]
fn criterion_4_analytic_rate_oracle() {
    // expected rate: payload over (R·n − 1) advertisement slots of
    // t + E[delay] seconds; the hardware-measured ~3 B/s embeds platform
    // overheads this simulator deliberately does not model
    let scn = legacy_scenario("rate", 1236, 7, 3);
    let run_t1 = execute_run(&scn, 1000, 1).unwrap();
    assert!(run_t1.completed);
    let expected = 1236.0 / ((3.0 * 103.0 - 1.0) * 1.005);
    let rel = (run_t1.metrics.data_rate_bps - expected).abs() / expected;
    assert!(
        rel <= 0.02,
        "rate {} vs analytic {expected}: {:.2}% off",
        run_t1.metrics.data_rate_bps,
        rel * 100.0
    );

    let run_t3 = execute_run(&scn, 3000, 1).unwrap();
    assert!(run_t3.completed);
    let ratio = run_t1.metrics.data_rate_bps / run_t3.metrics.data_rate_bps;
    assert!(
        (ratio - 3.0).abs() / 3.0 <= 0.02,
        "rate(t=1)/rate(t=3) = {ratio}, expected 3 +/- 2%"
    );
    println!(
        "[PASS] criterion 4: rate {:.4} B/s within 2% of {:.4}; t-ratio {:.4} within 2% of 3",
        run_t1.metrics.data_rate_bps, expected, ratio
    );
}

#[test]
fn criterion_5_loss_statistics() {
    // (a) raw Bernoulli loss across >= 1000 advertisements
    let p = 0.1;
    let trials = 2000u32;
    let mut cfg = MediumConfig::new(0xCAFE);
    cfg.loss = LossModel::Bernoulli(p);
    let mut medium = advchan::medium::Medium::new(cfg).unwrap();
    medium.register_node(NodeId(0));
    medium.register_node(NodeId(1));
    let pdu = build_pdu(
        PduKind::LegacyNonConnectable,
        [1, 2, 3, 4, 5, 6],
        ServiceUuid([9; 16]),
        &[0x55; 4],
        None,
    )
    .unwrap();
    let mut dropped = 0u32;
    for i in 0..trials {
        let ev = medium.schedule_advertisement(
            NodeId(1),
            pdu.clone(),
            AdvPayload::Raw(vec![0x55]),
            advchan::SimTime::ms(i as u64 * 20),
        );
        if ev.delivered_to.is_empty() {
            dropped += 1;
        }
    }
    let observed = dropped as f64 / trials as f64;
    let half = 1.96 * (p * (1.0 - p) / trials as f64).sqrt();
    assert!(
        (observed - p).abs() <= half,
        "observed loss {observed} outside {p} +/- {half:.5}"
    );

    // (b) never-received fraction after R=3 independent passes, recovery
    // off. The statistic is defined over transfers whose three passes ran:
    // at p=0.3 the selection handshake itself is lossy and, with restarts
    // disabled, roughly half the seeds never start transmitting. Those runs
    // expose no segments to loss at all, so they are excluded; segment-loss
    // draws are independent of handshake fate, which keeps the pool
    // unbiased.
    let p3 = 0.3f64;
    let mut scn = legacy_scenario("passes", 1236, 7, 3);
    scn.loss = LossModel::Bernoulli(p3);
    scn.recovery_round_cap = 0;
    let seeds = 1000u64;
    let mut missing_total = 0.0;
    let mut started = 0u64;
    for seed in 0..seeds {
        let run = execute_run(&scn, 1000, seed).unwrap();
        if agent_segment_events(&run).len() == 3 * 103 {
            started += 1;
            missing_total += run.metrics.packet_loss_pct / 100.0 * 103.0;
        }
    }
    assert!(started >= 300, "only {started} of {seeds} transfers started");
    let draws = started as f64 * 103.0;
    let observed3 = missing_total / draws;
    let expected3 = p3.powi(3);
    let half3 = 1.96 * (expected3 * (1.0 - expected3) / draws).sqrt();
    assert!(
        (observed3 - expected3).abs() <= half3,
        "never-received {observed3:.5} outside p^3 = {expected3:.5} +/- {half3:.5}"
    );
    println!(
        "[PASS] criterion 5: loss {observed:.4} in {p} +/- {half:.4}; never-received {observed3:.5} in {expected3:.4} +/- {half3:.5}"
    );
}

#[test]
fn criterion_6_curve_shape() {
    // p = 0.2 calibrates first-pass delivery to ~80%; R=inf with a timeout
    // wide enough for the blind-retransmission tail plus recovery
    let mut scn = legacy_scenario("curve", 1236, 7, 3);
    scn.loss = LossModel::Bernoulli(0.2);
    scn.repeat = Repeat::Infinite;
    scn.timeout_ms = Some(830_000);
    let mut first_pass_fracs = Vec::new();
    for seed in 100..110u64 {
        let run = execute_run(&scn, 1000, seed).unwrap();
        assert!(run.completed, "seed {seed}: {:?}", run.failure);

        // exact monotonicity of the received-over-time curve
        assert!(run
            .metrics
            .curve
            .windows(2)
            .all(|w: &[CurvePoint]| w[0].pct <= w[1].pct && w[0].at_ms <= w[1].at_ms));
        assert_eq!(run.metrics.curve.last().unwrap().pct, 100.0);

        let events = agent_segment_events(&run);
        assert!(events.len() >= 103);
        let first_pass = &events[..103];
        let mut uniq = std::collections::BTreeSet::new();
        for (_, num, delivered) in first_pass {
            if *delivered {
                uniq.insert(*num);
            }
        }
        first_pass_fracs.push(uniq.len() as f64 / 103.0);

        // slow tail: full delivery takes well past the first pass
        let start = run
            .trace
            .advertisements()
            .find(|ev| matches!(ev.msg, AdvPayload::Message(ChannelMessage::StartTransfer { .. })))
            .unwrap()
            .at;
        let first_pass_ms = first_pass.last().unwrap().0.since(start);
        let full_ms = run.metrics.curve.last().unwrap().at_ms;
        assert!(
            full_ms as f64 >= 1.5 * first_pass_ms as f64,
            "seed {seed}: tail too short ({full_ms} ms vs pass {first_pass_ms} ms)"
        );
    }
    let mean = first_pass_fracs.iter().sum::<f64>() / first_pass_fracs.len() as f64;
    assert!(
        (mean - 0.8).abs() <= 0.05,
        "mean first-pass delivery {mean:.4} outside 0.80 +/- 0.05"
    );
    println!(
        "[PASS] criterion 6: curves monotone, mean first-pass delivery {:.1}% within 80% +/- 5%, slow tail present",
        mean * 100.0
    );
}

#[test]
fn criterion_7_countermeasure_arithmetic() {
    // baseline: single pass, lossless
    let baseline = legacy_scenario("cm-base", 1236, 7, 1);
    let base = execute_run(&baseline, 1000, 21).unwrap();
    assert!(base.completed);
    let r0 = base.metrics.data_rate_bps;

    // (a) a 3 s minimum-interval rule cuts the rate to a third
    let mut limited = legacy_scenario("cm-rate", 1236, 7, 1);
    limited.policies = vec![Policy::RateLimit { min_interval_ms: 3000 }];
    let lim = execute_run(&limited, 1000, 21).unwrap();
    assert!(lim.completed, "{:?}", lim.failure);
    let ratio = r0 / lim.metrics.data_rate_bps;
    assert!(
        (ratio - 3.0).abs() / 3.0 <= 0.05,
        "rate-limit ratio {ratio:.4}, expected 3 +/- 5%"
    );
    // post-filter spacing holds for every consecutive pair in the event log
    let agent_airs: Vec<u64> = lim
        .trace
        .advertisements()
        .filter(|ev| ev.sender == NodeId(1) && !ev.blocked)
        .map(|ev| ev.at.as_ms())
        .collect();
    assert!(agent_airs.windows(2).all(|w| w[1] - w[0] >= 3000));

    // (b) a two-value vocabulary collapses throughput by 8·z = 96
    let payload = random_payload(1236, 7);
    let mut cfg = MediumConfig::new(33);
    cfg.loss = LossModel::lossless();
    let vocab = run_vocab_transfer(&payload, &bit_alphabet(), 1000, cfg).unwrap();
    assert_eq!(vocab.emitted, 8 * 1236);
    assert_eq!(vocab.blocked, 0, "allowed values must pass the filter");
    assert_eq!(vocab.delivered_symbols.len(), 8 * 1236);
    assert_eq!(vocab_decode(&vocab.delivered_symbols, &bit_alphabet(), 1236).unwrap(), payload);
    let vocab_ratio = r0 / vocab.data_rate_bps(1236);
    assert!(
        (vocab_ratio - 96.0).abs() / 96.0 <= 0.05,
        "vocabulary ratio {vocab_ratio:.4}, expected 96 +/- 5%"
    );

    // (c) exact vocabulary round trip on 100 random payloads
    let mut rng = ChaCha8Rng::seed_from_u64(0x70CA);
    for i in 0..100u64 {
        let len = rng.random_range(1..=400);
        let p = random_payload(len, 9000 + i);
        let symbols = vocab_encode(&p, &bit_alphabet()).unwrap();
        assert_eq!(vocab_decode(&symbols, &bit_alphabet(), len).unwrap(), p);
    }
    println!(
        "[PASS] criterion 7: rate-limit ratio {ratio:.4} ~ 3, vocabulary ratio {vocab_ratio:.3} ~ 96, 100 round trips exact"
    );
}

#[test]
fn criterion_8_determinism() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let scn = load_scenario(&root.join("legacy_baseline.toml")).unwrap();
    let tmp = std::env::temp_dir().join(format!("advchan-accept-{}", std::process::id()));
    let opts_a = RunOptions { out_dir: tmp.join("a"), ..RunOptions::default() };
    let opts_b = RunOptions { out_dir: tmp.join("b"), ..RunOptions::default() };
    let a = run_scenario(&scn, &opts_a).unwrap();
    let b = run_scenario(&scn, &opts_b).unwrap();
    assert_eq!(a.results.len(), 9);
    assert_eq!(a.metrics_csv, b.metrics_csv, "metrics CSV must be byte-identical");
    assert_eq!(a.curves_csv, b.curves_csv, "curves CSV must be byte-identical");
    assert_eq!(a.summary_csv, b.summary_csv);
    for (ra, rb) in a.results.iter().zip(&b.results) {
        assert_eq!(ra.trace.render(), rb.trace.render(), "event log {}", ra.run_id);
    }
    assert!(a.all_complete());
    std::fs::remove_dir_all(&tmp).ok();
    println!("[PASS] criterion 8: identical scenario+seed gives byte-identical CSV and event logs");
}

#[test]
fn criterion_9_parser_robustness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF077);
    // 50k arbitrary buffers
    for _ in 0..50_000 {
        let len = rng.random_range(0..64);
        let mut buf = vec![0u8; len];
        rng.fill(buf.as_mut_slice());
        let _ = parse_pdu(&buf);
    }
    // 50k mutations of valid frames
    let cfg = advchan::pdu::ExtendedConfig::new(254).unwrap();
    for i in 0..50_000u32 {
        let ext = i % 2 == 1;
        let sd_max = if ext { 238 } else { 13 };
        let sd_len = rng.random_range(0..=sd_max);
        let mut sd = vec![0u8; sd_len];
        rng.fill(sd.as_mut_slice());
        let kind = if ext { PduKind::ExtendedNonConnectable } else { PduKind::LegacyNonConnectable };
        let pdu = build_pdu(
            kind,
            [1, 2, 3, 4, 5, 6],
            ServiceUuid([i as u8; 16]),
            &sd,
            ext.then_some(&cfg),
        )
        .unwrap();
        let mut bytes = serialize_pdu(&pdu).unwrap();
        let idx = rng.random_range(0..bytes.len());
        bytes[idx] = rng.random();
        let _ = parse_pdu(&bytes);
        if i % 100 == 0 {
            // unmutated frames round-trip exactly
            let clean = serialize_pdu(&pdu).unwrap();
            assert_eq!(parse_pdu(&clean).unwrap(), pdu);
        }
    }
    println!("[PASS] criterion 9: 100k random/mutated inputs parsed without crash; clean frames round-trip");
}
