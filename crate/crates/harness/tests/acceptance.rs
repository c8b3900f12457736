//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line, even when an earlier one
//! fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsdflow_core::motion::{loss_and_gradient, FeatureExtractor, FramePair, MotionConfig, MotionParams};
use rsdflow_core::optim::{rsd_step, FnObjective};
use rsdflow_core::{
    crop_to_bbox_pair, psnr, run_batched, run_streaming, warp, MotionSession, OnlineOptimizer,
    PhotometricConfig, RsdConfig, SessionConfig, StepOutcome,
};
use rsdflow_harness::flo::{decode_flo, encode_flo, read_flo, write_flo};
use rsdflow_harness::presets::{
    fig3_race, integration_demo, pair_traces, run_preset, Preset, RunOptions, SGD_LRS, SYNTH_MOTION,
};
use rsdflow_harness::synth::{synthesize_sequence, SynthSpec, SyntheticSequence};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn synthetic(frames: usize, seed: u64) -> SyntheticSequence {
    synthesize_sequence(&SynthSpec::translating(64, 64, frames, SYNTH_MOTION, seed)).expect("synthetic sequence")
}

fn f(x: f64) -> f64 {
    (x - 5.0) * (x - 5.0) + 2.0
}

fn fig3() -> Outcome {
    let r = fig3_race(10).map_err(|e| e.to_string())?;
    // Direct iteration oracles.
    let mut rsd = vec![0.0f64];
    let mut gd = vec![0.0f64];
    for _ in 0..10 {
        let x = *rsd.last().unwrap();
        let g = 2.0 * (x - 5.0);
        rsd.push(x - f(x) / (g * g) * g);
        let x = *gd.last().unwrap();
        gd.push(x - 0.2 * 2.0 * (x - 5.0));
    }
    let reach = |xs: &[f64]| xs.iter().position(|&x| f(x) <= 2.6);
    let got_rsd = &r.get("rsd").ok_or("no rsd trajectory")?.xs;
    let got_gd = &r.get("gd-0.2").ok_or("no gd trajectory")?.xs;
    let err = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let (e_rsd, e_gd) = (err(got_rsd, &rsd), err(got_gd, &gd));
    let x1_err = (got_rsd[1] - 2.7).abs();
    let (n_rsd, n_gd) = (reach(got_rsd), reach(got_gd));
    let ok = x1_err <= 1e-9
        && e_rsd <= 1e-9
        && e_gd <= 1e-9
        && got_rsd.len() == rsd.len()
        && n_rsd.is_some_and(|n| n <= 3)
        && n_gd.is_some_and(|n| n >= 4)
        && n_gd == reach(&gd)
        && n_rsd == reach(&rsd);
    ensure(
        ok,
        format!("x1 err {x1_err:.1e}, oracle err rsd {e_rsd:.1e} gd {e_gd:.1e}, reach f<=2.6: rsd {n_rsd:?} gd(0.2) {n_gd:?}"),
    )
}

fn descent_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        // Positive-valued sum of weighted quartic and quadratic terms.
        let dim = rng.random_range(1..12);
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..4.0)).collect();
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let offset = rng.random_range(0.0..2.0);
        let (c1, a1, q1) = (c.clone(), a.clone(), q.clone());
        let value = move |p: &[f64]| {
            offset
                + p.iter()
                    .enumerate()
                    .map(|(i, x)| a1[i] * (x - c1[i]).powi(2) + q1[i] * (x - c1[i]).powi(4))
                    .sum::<f64>()
        };
        let (c2, a2, q2) = (c.clone(), a.clone(), q.clone());
        let grad = move |p: &[f64]| -> Vec<f64> {
            p.iter()
                .enumerate()
                .map(|(i, x)| 2.0 * a2[i] * (x - c2[i]) + 4.0 * q2[i] * (x - c2[i]).powi(3))
                .collect()
        };
        let obj = FnObjective::new(dim, value.clone(), grad.clone());
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let loss = value(&p);
        let j = grad(&p);
        let next = match rsd_step(&obj, &p, &RsdConfig::unclamped()) {
            Ok(StepOutcome::Stepped { params, .. }) => params,
            other => return Err(format!("unexpected step outcome {other:?}")),
        };
        let inner: f64 = next.iter().zip(&p).zip(&j).map(|((n, o), g)| (n - o) * g).sum();
        worst = worst.max((loss + inner).abs() / loss);
    }
    ensure(worst <= 1e-9, format!("worst |L + <dp, J>| / L = {worst:.2e} over 1000 cases"))
}

fn motion_gradient() -> Outcome {
    let seq = synthesize_sequence(&SynthSpec::translating(16, 16, 2, (1.0, -1.0), 5)).map_err(|e| e.to_string())?;
    let frames = seq.frames();
    let masks = seq.masks();
    let motion = MotionConfig {
        scale: 4,
        ..MotionConfig::default()
    };
    let ex = FeatureExtractor::new(4, motion.input_channels / 2, 3, 3).map_err(|e| e.to_string())?;
    let (fc, fp) = (ex.extract(&frames[1]).unwrap(), ex.extract(&frames[0]).unwrap());
    let pair = FramePair {
        current: &frames[1],
        previous: &frames[0],
        feat_current: &fc,
        feat_previous: &fp,
        mask: &masks[1],
    };
    let config = PhotometricConfig::default();
    let base = MotionParams::new(&motion).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let flat: Vec<f64> = (0..base.param_count()).map(|_| rng.random_range(-0.3..0.3)).collect();
    let loss_at = |v: &[f64]| loss_and_gradient(&base.with_values(v).unwrap(), &pair, &config).unwrap().loss;
    let grad = loss_and_gradient(&base.with_values(&flat).unwrap(), &pair, &config)
        .map_err(|e| e.to_string())?
        .grad
        .to_vec();
    let g_inf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let (mut a, mut b) = (flat.clone(), flat.clone());
        a[i] += h;
        b[i] -= h;
        let fd = (loss_at(&a) - loss_at(&b)) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / grad[i].abs().max(fd.abs()).max(1e-4 * g_inf);
        worst = worst.max(rel);
    }
    ensure(
        worst <= 1e-3,
        format!("{} parameters, worst relative error {worst:.2e}", flat.len()),
    )
}

fn flow_recovery() -> Outcome {
    // Flow points from frame t back to t − 1, so the oracle is the negated motion.
    let (tu, tv) = (-SYNTH_MOTION.0, -SYNTH_MOTION.1);
    let mut good = 0;
    let mut worst_epe = 0.0f64;
    let mut worst_gain = f64::INFINITY;
    for seed in 0..20 {
        let seq = synthetic(2, seed);
        let masks = seq.masks();
        let mut session = MotionSession::new(SessionConfig::default(), 3).map_err(|e| e.to_string())?;
        let out = run_streaming(&mut session, seq.frames(), &masks).map_err(|e| e.to_string())?;
        let flow = &out[0].flow;
        let m = &masks[1];
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(y, x) {
                    su += flow.du(y, x);
                    sv += flow.dv(y, x);
                    n += 1.0;
                }
            }
        }
        let epe = (su / n - tu).hypot(sv / n - tv);
        let frames = seq.frames();
        let recon = warp(&frames[0], flow).map_err(|e| e.to_string())?;
        let (a, b) = crop_to_bbox_pair(&frames[1], &recon, m).map_err(|e| e.to_string())?;
        let (c, d) = crop_to_bbox_pair(&frames[1], &frames[0], m).map_err(|e| e.to_string())?;
        let gain = psnr(&a, &b).unwrap() - psnr(&c, &d).unwrap();
        worst_epe = worst_epe.max(epe);
        worst_gain = worst_gain.min(gain);
        if epe <= 0.75 && gain >= 3.0 {
            good += 1;
        }
    }
    ensure(
        good >= 18,
        format!("{good}/20 seeds within 0.75 px and >= 3 dB (worst epe {worst_epe:.3}, worst gain {worst_gain:.2} dB)"),
    )
}

fn rsd_vs_sgd() -> Outcome {
    let session = SessionConfig::default();
    let mut opts = vec![OnlineOptimizer::Rsd(RsdConfig::default())];
    opts.extend(SGD_LRS.iter().map(|&lr| OnlineOptimizer::Sgd { lr }));
    let mut wins = 0;
    for seed in 0..20 {
        let traces = pair_traces(&synthetic(2, seed), &session, &opts, 1).map_err(|e| e.to_string())?;
        let rsd = traces[0].final_loss();
        let best_sgd = traces[1..].iter().map(|t| t.final_loss()).fold(f64::INFINITY, f64::min);
        if rsd < best_sgd {
            wins += 1;
        }
    }
    ensure(wins >= 16, format!("RSD below best SGD on {wins}/20 seeds"))
}

fn algorithm_equivalence() -> Outcome {
    let seq = synthetic(10, 3);
    let masks = seq.masks();
    let mut a = MotionSession::new(SessionConfig::default(), 3).unwrap();
    let mut b = MotionSession::new(SessionConfig::default(), 3).unwrap();
    let s = run_streaming(&mut a, seq.frames(), &masks).map_err(|e| e.to_string())?;
    let t = run_batched(&mut b, seq.frames(), &masks, 1).map_err(|e| e.to_string())?;
    if s.len() != t.len() || s.len() != 9 {
        return Err(format!("{} streaming vs {} batched flows", s.len(), t.len()));
    }
    let mut worst = 0.0f64;
    for (p, q) in s.iter().zip(&t) {
        if p.current != q.current {
            return Err(format!("pair mismatch {} vs {}", p.current, q.current));
        }
        worst = worst.max(p.flow.max_abs_diff(&q.flow).unwrap());
    }
    ensure(worst <= 1e-6, format!("max flow discrepancy {worst:.2e} over 9 pairs"))
}

fn integration_refinement() -> Outcome {
    let opts = RunOptions::default();
    let (full, _) = integration_demo(&opts, 2).map_err(|e| e.to_string())?;
    let (bare, _) = integration_demo(&opts, 0).map_err(|e| e.to_string())?;
    let ok = full.eval_sequences.len() == 10
        && full.median_gain >= 0.01
        && full.depth0_max_abs_diff == 0.0
        && bare.depth0_max_abs_diff == 0.0
        && bare.median_refined == bare.median_uncorrected;
    ensure(
        ok,
        format!(
            "median IoU {:.3} -> {:.3} (gain {:.3}); depth-0 max diff {:e}",
            full.median_uncorrected, full.median_refined, full.median_gain, full.depth0_max_abs_diff
        ),
    )
}

fn flo_fidelity() -> Outcome {
    // width 2, height 1: (1.5, -2.0) then (0.25, 3.0)
    let fixture: [u8; 28] = [
        0x50, 0x49, 0x45, 0x48, // PIEH
        0x02, 0x00, 0x00, 0x00, // width
        0x01, 0x00, 0x00, 0x00, // height
        0x00, 0x00, 0xc0, 0x3f, // 1.5
        0x00, 0x00, 0x00, 0xc0, // -2.0
        0x00, 0x00, 0x80, 0x3e, // 0.25
        0x00, 0x00, 0x40, 0x40, // 3.0
    ];
    let known = rsdflow_core::FlowField::from_fn(1, 2, |_, x| if x == 0 { (1.5, -2.0) } else { (0.25, 3.0) });
    let bytes = encode_flo(&known).map_err(|e| e.to_string())?;
    if bytes != fixture {
        return Err(format!("fixture mismatch: {bytes:02x?}"));
    }
    let decoded = decode_flo(&fixture).map_err(|e| e.to_string())?;
    if decoded.max_abs_diff(&known).unwrap() != 0.0 {
        return Err("fixture decodes to different values".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let random = rsdflow_core::FlowField::from_fn(13, 17, |_, _| {
        (
            f64::from(rng.random_range(-40.0f32..40.0)),
            f64::from(rng.random_range(-40.0f32..40.0)),
        )
    });
    let dir = std::env::temp_dir().join(format!("rsdflow-accept-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("r.flo");
    write_flo(&random, &path).map_err(|e| e.to_string())?;
    let on_disk = std::fs::read(&path).map_err(|e| e.to_string())?;
    let back = read_flo(&path).map_err(|e| e.to_string())?;
    let again = encode_flo(&back).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);
    let same_values = (0..13).all(|y| {
        (0..17).all(|x| {
            back.du(y, x).to_bits() == random.du(y, x).to_bits() && back.dv(y, x).to_bits() == random.dv(y, x).to_bits()
        })
    });
    ensure(
        same_values && again == on_disk,
        format!("2x1 fixture matches; 13x17 roundtrip bit-identical: {}", same_values && again == on_disk),
    )
}

fn determinism() -> Outcome {
    let opts = RunOptions {
        seed: 5,
        ..RunOptions::default()
    };
    let mut sizes = Vec::new();
    for preset in Preset::ALL {
        let a = run_preset(preset, &opts).map_err(|e| e.to_string())?;
        let b = run_preset(preset, &opts).map_err(|e| e.to_string())?;
        let (ja, jb) = (a.report.deterministic_json().unwrap(), b.report.deterministic_json().unwrap());
        if ja != jb {
            return Err(format!("{} reports differ", preset.name()));
        }
        sizes.push(format!("{}={}B", preset.name(), ja.len()));
    }
    Ok(format!("identical reports: {}", sizes.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("closed-form race on (x-5)^2+2", fig3),
        ("descent identity", descent_identity),
        ("motion gradient vs finite differences", motion_gradient),
        ("synthetic flow recovery", flow_recovery),
        ("RSD vs SGD at one iteration", rsd_vs_sgd),
        ("streaming vs batched with N=1", algorithm_equivalence),
        ("integration refinement", integration_refinement),
        (".flo format fidelity", flo_fidelity),
        ("preset determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name} ({secs:.2}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({secs:.2}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
