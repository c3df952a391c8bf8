//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Criteria 5 to 7 share one full ablation (3 seeds, 6 modes, 10 epochs on
//! 64×64 phantoms); its outputs are kept under the cargo target directory.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use cotrain_seg::autodiff::{grad_check, relative_error, worst, Bindings, Graph, NodeId, Tensor};
use cotrain_seg::losses::{
    dice_loss, dice_loss_node, focal_loss, focal_loss_node, make_region_mask, objective_node,
    rampup_weight, soft_consistency_loss, soft_consistency_node, LossWeights, MaskReading,
    RegionMask,
};
use cotrain_seg::mean_teacher::{ema_init, ema_update};
use cotrain_seg::metrics::{dsc, hausdorff, BinaryMask};
use cotrain_seg::phantom::{generate_split, LabelMap, PhantomConfig, Sample};
use cotrain_seg::segnet::{build, init_params, ClassProbMap};
use cotrain_seg::trainer::{
    cotrain, generate_pseudo_dataset, pretrain_individual, Mode, TeacherSource, TrainConfig,
    TrainLog,
};
use cotrain_seg_cli::commands::{run_ablation, AblationRuns};
use cotrain_seg_cli::config::RunConfig;
use cotrain_seg_cli::report::{emit_ablation_report, AblationReport};
use cotrain_seg_cli::run_command;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const INSTANCES: usize = 20;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_labels(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> LabelMap {
    let labels = (0..h * w).map(|_| rng.random_range(0..c as u8)).collect();
    LabelMap::new(h, w, labels).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random normalized `c × h × w` probabilities.
fn random_probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut t = random_tensor(rng, &[c, h, w], 0.05, 1.0);
    let hw = h * w;
    for p in 0..hw {
        let s: f64 = (0..c).map(|k| t.data()[k * hw + p]).sum();
        for k in 0..c {
            t.data_mut()[k * hw + p] /= s;
        }
    }
    t
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RegionMask {
    RegionMask::new(h, w, (0..h * w).map(|_| rng.random_bool(0.6)).collect()).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, c: usize) -> LossWeights {
    let alpha = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
    let mut w = LossWeights::with_alpha(alpha, 10).unwrap();
    w.gamma = [0.0, 1.0, 2.0, 2.5][rng.random_range(0..4)];
    w
}

/// Worst relative error over `INSTANCES` random instances of a loss built on
/// `softmax(logits)`.
fn check_on_logits(
    seed: u64,
    mut build_loss: impl FnMut(
        &mut ChaCha8Rng,
        &mut Graph<f64>,
        NodeId,
        (usize, usize, usize),
    ) -> NodeId,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..INSTANCES)
        .map(|_| {
            let shape = (
                rng.random_range(2..5),
                rng.random_range(2..5),
                rng.random_range(2..5),
            );
            let logits = random_tensor(&mut rng, &[shape.0, shape.1, shape.2], -2.0, 2.0);
            let params = BTreeMap::from([("logits".to_string(), logits)]);
            let mut g = Graph::<f64>::new();
            let z = g.param("logits");
            let p = g.softmax(z);
            let root = build_loss(&mut rng, &mut g, p, shape);
            worst(&grad_check(&mut g, root, &Bindings::new(), &params, GRAD_EPS).unwrap())
        })
        .fold(0.0, f64::max)
}

/// Diagnostic for a failing composite instance: re-evaluates each component whose
/// relative error exceeds the tolerance at a 100× wider step. Agreement there
/// separates finite-difference roundoff from a wrong adjoint. Returns the count of
/// failing components and their worst error at the wide step.
fn recheck_failing(
    g: &mut Graph<f64>,
    root: NodeId,
    image: &Tensor<f64>,
    params: &BTreeMap<String, Tensor<f64>>,
) -> (usize, f64) {
    let mut eval = |g: &mut Graph<f64>, name: &str, k: usize, v: f64| {
        let mut probe = params.clone();
        probe.get_mut(name).unwrap().data_mut()[k] = v;
        let mut b = Bindings::new().with("image", image);
        for (n, t) in &probe {
            b.bind(n, t);
        }
        g.forward(root, &b).unwrap().item()
    };
    let mut b = Bindings::new().with("image", image);
    for (n, t) in params {
        b.bind(n, t);
    }
    g.forward(root, &b).unwrap();
    let grads = g.backward(root).unwrap();
    let (mut count, mut wide) = (0, 0.0f64);
    for (name, base) in params {
        let adj = grads.get(name).unwrap();
        for k in 0..base.len() {
            let (a, x) = (adj.data()[k], base.data()[k]);
            let numeric =
                |g: &mut Graph<f64>,
                 eps: f64,
                 eval: &mut dyn FnMut(&mut Graph<f64>, &str, usize, f64) -> f64| {
                    (eval(g, name, k, x + eps) - eval(g, name, k, x - eps)) / (2.0 * eps)
                };
            if relative_error(a, numeric(g, GRAD_EPS, &mut eval)) > GRAD_TOL {
                count += 1;
                wide = wide.max(relative_error(a, numeric(g, 1e-3, &mut eval)));
            }
        }
    }
    (count, wide)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut report = Vec::new();
    let focal = check_on_logits(101, |rng, g, p, (c, h, w)| {
        let labels = random_labels(rng, c, h, w);
        focal_loss_node(g, p, (c, h, w), &labels, &random_weights(rng, c)).unwrap()
    });
    report.push(("focal", focal));
    let dice = check_on_logits(102, |rng, g, p, (c, h, w)| {
        let labels = random_labels(rng, c, h, w);
        dice_loss_node(g, p, (c, h, w), &labels, &random_weights(rng, c)).unwrap()
    });
    report.push(("dice", dice));
    // the two soft terms differ only in which averaged network supplies the target
    for (name, seed) in [("soft(net1)", 103), ("soft(net2)", 104)] {
        let e = check_on_logits(seed, |rng, g, p, (c, h, w)| {
            let t = g.constant(random_probs(rng, c, h, w));
            let mask = random_mask(rng, h, w);
            soft_consistency_node(g, p, t, (c, h, w), &mask).unwrap()
        });
        report.push((name, e));
    }

    // the pair objective: both students are leaves, teachers are averaged-model outputs
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut pair = 0.0f64;
    for _ in 0..INSTANCES {
        let shape = (
            rng.random_range(2..5),
            rng.random_range(2..5),
            rng.random_range(2..5),
        );
        let (c, h, w) = shape;
        let params = BTreeMap::from([
            (
                "z1".to_string(),
                random_tensor(&mut rng, &[c, h, w], -2.0, 2.0),
            ),
            (
                "z2".to_string(),
                random_tensor(&mut rng, &[c, h, w], -2.0, 2.0),
            ),
        ]);
        let labels = random_labels(&mut rng, c, h, w);
        let weights = random_weights(&mut rng, c);
        let mask = random_mask(&mut rng, h, w);
        let ramp = rng.random_range(0.0..1.0);
        let mut g = Graph::<f64>::new();
        let mut total = None;
        for name in ["z1", "z2"] {
            let z = g.param(name);
            let p = g.softmax(z);
            let t = g.constant(random_probs(&mut rng, c, h, w));
            let nodes = objective_node(&mut g, p, shape, &labels, &weights, Some((t, &mask, ramp)))
                .unwrap();
            total = Some(match total {
                None => nodes.total,
                Some(acc) => g.add(acc, nodes.total),
            });
        }
        let root = total.unwrap();
        let r = grad_check(&mut g, root, &Bindings::new(), &params, GRAD_EPS).unwrap();
        pair = pair.max(worst(&r));
    }
    report.push(("pair objective", pair));

    // network composite: image -> segnet -> full objective with soft term. Biases
    // are randomized so no ReLU sits exactly on its kink.
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut net = 0.0f64;
    let mut failing = Vec::new();
    for i in 0..INSTANCES {
        let organs = 1 + i % 2;
        let (c, h, w) = (organs + 1, 4, 4);
        let params = init_params(1000 + i as u64, organs, 4)
            .unwrap()
            .cast::<f64>();
        let named: BTreeMap<String, Tensor<f64>> = params
            .iter()
            .map(|(n, t)| {
                let t = if n.ends_with(".bias") {
                    random_tensor(&mut rng, t.shape(), -0.1, 0.1)
                } else {
                    t.clone()
                };
                (n.to_string(), t)
            })
            .collect();
        let image = random_tensor(&mut rng, &[1, h, w], 0.0, 1.0);
        let labels = random_labels(&mut rng, c, h, w);
        let weights = random_weights(&mut rng, c);
        let mask = random_mask(&mut rng, h, w);
        let mut g = Graph::<f64>::new();
        let x = g.input("image");
        let p = build(&mut g, x, params.arch(), "");
        let t = g.constant(random_probs(&mut rng, c, h, w));
        let nodes = objective_node(
            &mut g,
            p,
            (c, h, w),
            &labels,
            &weights,
            Some((t, &mask, 0.7)),
        )
        .unwrap();
        let inputs = Bindings::new().with("image", &image);
        let r = grad_check(&mut g, nodes.total, &inputs, &named, GRAD_EPS).unwrap();
        net = net.max(worst(&r));
        if worst(&r) > GRAD_TOL {
            let (count, wide) = recheck_failing(&mut g, nodes.total, &image, &named);
            failing.push(format!(
                "#{i} {:.1e} on {count} component(s), {wide:.1e} at eps 1e-3",
                worst(&r)
            ));
        }
    }
    report.push(("network composite", net));

    let elapsed = start.elapsed().as_secs_f64();
    let detail = report
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(report.iter().all(|(_, e)| *e <= GRAD_TOL), || {
        let failing = failing.join(", ");
        format!("worst relative error above {GRAD_TOL}: {detail}; composite failures {failing}")
    })?;
    ensure(elapsed < 300.0, || {
        format!("took {elapsed:.0}s, limit 300s")
    })?;
    Ok(format!(
        "{INSTANCES} instances each, {detail}; {elapsed:.1}s"
    ))
}

fn criterion_2() -> Outcome {
    let e0 = init_params(21, 3, 4).unwrap();
    let p = init_params(22, 3, 4).unwrap();
    let mut frozen = ema_init(&e0, 1.0).unwrap();
    let mut copy = ema_init(&e0, 0.0).unwrap();
    for _ in 0..3 {
        ema_update(&mut frozen, &p).map_err(|e| e.to_string())?;
        ema_update(&mut copy, &p).map_err(|e| e.to_string())?;
    }
    ensure(frozen.averaged() == &e0, || {
        "α = 1 moved the average".into()
    })?;
    ensure(copy.averaged() == &p, || {
        "α = 0 is not an exact copy".into()
    })?;

    let mut geometric = 0.0f64;
    for (i, alpha) in [0.5, 0.9, 0.99, 0.999].into_iter().enumerate() {
        let e0 = init_params(30 + i as u64, 3, 4).unwrap();
        let p = init_params(40 + i as u64, 3, 4).unwrap();
        let (ef, pf) = (e0.flat(), p.flat());
        let mut state = ema_init(&e0, alpha).unwrap();
        for n in 1..=100 {
            ema_update(&mut state, &p).unwrap();
            let an = alpha.powi(n);
            for ((&e, &a), &b) in state.averaged().flat().iter().zip(&ef).zip(&pf) {
                let expected = b as f64 + an * (a as f64 - b as f64);
                geometric = geometric.max((e as f64 - expected).abs());
            }
        }
    }
    ensure(geometric <= 1e-6, || {
        format!("geometric error {geometric:.2e}")
    })?;

    let phantoms = PhantomConfig {
        height: 32,
        width: 32,
        train_per_organ: 24,
        validation: 6,
        test: 6,
        ..PhantomConfig::default()
    };
    let split = generate_split(2, &phantoms).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        base_channels: 4,
        seed: 2,
        ..TrainConfig::default()
    };
    let models: Vec<_> = pretrain_individual(&split, &cfg)
        .unwrap()
        .into_iter()
        .map(|m| m.params)
        .collect();
    let pseudo = generate_pseudo_dataset(&models, &split).unwrap();
    let mut iterations = 0;
    for mode in [Mode::CtWa, Mode::CtWaRm] {
        let out = cotrain(
            &split,
            &pseudo,
            &TrainConfig {
                mode,
                ..cfg.clone()
            },
        )
        .map_err(|e| format!("{mode}: {e}"))?;
        for r in &out.log.iterations {
            for (net, src) in r.teachers.iter().enumerate() {
                ensure(*src == TeacherSource::OtherAverage(1 - net), || {
                    format!(
                        "{mode} iteration {}: network {net} taught by {src:?}",
                        r.iteration
                    )
                })?;
            }
        }
        for n in &out.nets {
            let avg = n.averaged.as_ref().ok_or("averaged copy missing")?;
            ensure(
                avg.averaged().fingerprint() == n.student.fingerprint(),
                || "fingerprints differ".into(),
            )?;
            ensure(avg.averaged() != &n.student, || {
                "average equals student".into()
            })?;
        }
        iterations += out.log.iterations.len();
    }
    Ok(format!(
        "α ∈ {{0, 1}} exact; geometric error {geometric:.1e} over n ≤ 100; \
         wiring verified on {iterations} iterations of 1-epoch ct_wa and ct_wa_rm runs"
    ))
}

fn criterion_3() -> Outcome {
    let bits = |m: u32| (0..9).map(|i| m >> i & 1 == 1).collect::<Vec<_>>();
    for a in 0u32..512 {
        let p = BinaryMask::new(3, 3, bits(a)).unwrap();
        for b in 0u32..512 {
            let g = BinaryMask::new(3, 3, bits(b)).unwrap();
            let total = (a.count_ones() + b.count_ones()) as f64;
            let expected = if total == 0.0 {
                1.0
            } else {
                2.0 * (a & b).count_ones() as f64 / total
            };
            ensure(dsc(&p, &g).unwrap() == expected, || {
                format!("dsc {a:09b} {b:09b}")
            })?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut hd_err = 0.0f64;
    for _ in 0..1000 {
        let density = rng.random_range(0.02..0.6);
        let mut draw = || {
            let b: Vec<bool> = (0..64).map(|_| rng.random_bool(density)).collect();
            BinaryMask::new(8, 8, b).unwrap()
        };
        let (p, g) = (draw(), draw());
        let pts = |m: &BinaryMask| -> Vec<(f64, f64)> {
            (0..64)
                .filter(|&i| m.bits()[i])
                .map(|i| ((i / 8) as f64, (i % 8) as f64))
                .collect()
        };
        let (pp, gp) = (pts(&p), pts(&g));
        let directed = |a: &[(f64, f64)], b: &[(f64, f64)]| {
            a.iter()
                .map(|&(y, x)| {
                    b.iter()
                        .map(|&(v, u)| ((y - v).powi(2) + (x - u).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        let expected = match (pp.is_empty(), gp.is_empty()) {
            (true, true) => 0.0,
            (false, false) => 0.5 * (directed(&pp, &gp) + directed(&gp, &pp)),
            _ => 98f64.sqrt(),
        };
        hd_err = hd_err.max((hausdorff(&p, &g).unwrap() - expected).abs());
    }
    ensure(hd_err <= 1e-9, || format!("hausdorff error {hd_err:.2e}"))?;

    let (h, w, k) = (6usize, 6usize, 1u8);
    let mut configs = 0;
    for gt_pixel in 0..h * w {
        for fg_pixel in 0..h * w {
            for radius in 0..3 {
                let mut gt = vec![0u8; h * w];
                gt[gt_pixel] = k;
                let mut pseudo = vec![0u8; h * w];
                pseudo[fg_pixel] = 2;
                let expected: Vec<bool> = (0..h * w)
                    .map(|p| {
                        let (y, x) = (p / w, p % w);
                        let (fy, fx) = (fg_pixel / w, fg_pixel % w);
                        y.abs_diff(fy) <= radius && x.abs_diff(fx) <= radius && gt[p] != k
                    })
                    .collect();
                let sample = Sample {
                    image: Tensor::zeros(&[h, w]),
                    mask: LabelMap::new(h, w, gt).unwrap(),
                    annotated_organ: k,
                };
                let labels = LabelMap::new(h, w, pseudo).unwrap();
                let got = make_region_mask(&sample, &labels, radius, MaskReading::Selective)
                    .map_err(|e| e.to_string())?;
                ensure(got.bits() == &expected[..], || {
                    format!("region mask gt {gt_pixel} fg {fg_pixel} r {radius}")
                })?;
                configs += 1;
            }
        }
    }
    Ok(format!(
        "dsc exact on 262144 pairs; hausdorff max error {hd_err:.1e} on 1000 pairs; \
         region mask exact on {configs} configurations"
    ))
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("d.phv");
    let common = [
        "--image-size",
        "32",
        "--train-per-organ",
        "24",
        "--validation",
        "6",
        "--test",
        "6",
        "--epochs",
        "2",
        "--base-channels",
        "4",
        "--seed",
        "4",
        "--mode",
        "ct_wa_rm",
    ];
    let args = |cmd: &str, extra: Vec<String>| -> Vec<String> {
        std::iter::once(cmd.to_string())
            .chain(common.iter().map(|s| s.to_string()))
            .chain(extra)
            .collect()
    };
    let d = data.to_str().unwrap().to_string();
    ensure(
        run_command(args("gen-data", vec!["--out".into(), d.clone()])) == 0,
        || "gen-data failed".into(),
    )?;
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let extra = vec![
            "--data".into(),
            d.clone(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ];
        ensure(run_command(args("cotrain", extra)) == 0, || {
            format!("cotrain run {run} failed")
        })?;
        outs.push(out);
    }
    let files = [
        "individual_1.ckp",
        "individual_2.ckp",
        "individual_3.ckp",
        "net1.ckp",
        "net1_avg.ckp",
        "net2.ckp",
        "net2_avg.ckp",
        "final.ckp",
        "metrics.csv",
        "iterations.csv",
        "summary.csv",
    ];
    for f in files {
        let a = std::fs::read(outs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(outs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!(
        "{} checkpoints and logs bitwise identical across two runs",
        files.len()
    ))
}

/// Full-scale ablation shared by criteria 5 to 7.
struct Ablation {
    report: AblationReport,
    runs: AblationRuns,
    seconds: f64,
    cores: usize,
}

fn run_full_ablation() -> std::result::Result<Ablation, String> {
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-ablation");
    let _ = std::fs::remove_dir_all(&out);
    let mut cfg = RunConfig::default();
    cfg.phantom = PhantomConfig {
        organs: 3,
        height: 64,
        width: 64,
        train_per_organ: 200,
        validation: 100,
        test: 100,
        ..PhantomConfig::default()
    };
    cfg.train.epochs = 10;
    // 750 iterations per run. α = 0.97 gives the teacher a memory of ~33
    // iterations, about the share of the run that α = 0.999 spans at full scale;
    // α = 0.999 here would leave ~47% of the initial weights in the teacher.
    cfg.train.ema_alpha = 0.97;
    cfg.seeds = vec![0, 1, 2];
    cfg.out = Some(out.clone());
    let start = Instant::now();
    let mut progress = Vec::new();
    let runs = run_ablation(&cfg, &mut progress).map_err(|e| format!("ablation failed: {e}"))?;
    let seconds = start.elapsed().as_secs_f64();
    print!("{}", String::from_utf8_lossy(&progress));
    let report = emit_ablation_report(&runs.summaries).map_err(|e| e.to_string())?;
    println!("{}", report.to_text());
    let _ = std::fs::write(out.join("ablation.txt"), report.to_text());
    let cores = cotrain_seg::trainer::thread_pool().current_num_threads();
    Ok(Ablation {
        report,
        runs,
        seconds,
        cores,
    })
}

fn criterion_5(ab: &Ablation) -> Outcome {
    let avg = |m: Mode| ab.report.avg_dsc(m).ok_or(format!("{m} missing"));
    let (ours, st, ind) = (
        avg(Mode::CtWaRm)?,
        avg(Mode::SelfTraining)?,
        avg(Mode::Individual)?,
    );
    // linear-scaling budget: 30 minutes on 4 cores
    let budget = 1800.0 * 4.0 / ab.cores.clamp(1, 4) as f64;
    let detail = format!(
        "avg DSC ct_wa_rm {ours:.2}, self_training {st:.2}, individual {ind:.2} \
         (margin {:.2}); {:.0}s on {} worker thread(s), budget {budget:.0}s",
        ours - st,
        ab.seconds,
        ab.cores
    );
    ensure(ours > st && ours > ind && ours - st >= 0.5, || {
        detail.clone()
    })?;
    ensure(ab.seconds <= budget, || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn criterion_6(ab: &Ablation) -> Outcome {
    let avg = |m: Mode| ab.report.avg_dsc(m).ok_or(format!("{m} missing"));
    let (ct, ct_wa, ours) = (avg(Mode::Ct)?, avg(Mode::CtWa)?, avg(Mode::CtWaRm)?);
    let detail = format!("ct {ct:.2}, ct_wa {ct_wa:.2}, ct_wa_rm {ours:.2} (slack 0.30)");
    ensure(ours >= ct_wa - 0.3 && ct_wa >= ct - 0.3, || detail.clone())?;
    Ok(detail)
}

fn criterion_7(ab: &Ablation) -> Outcome {
    let l = 100u64;
    ensure(rampup_weight(0, l) == (-5f64).exp(), || {
        "λ(0) ≠ e^-5".into()
    })?;
    ensure((l..3 * l).all(|t| rampup_weight(t, l) == 1.0), || {
        "λ(t ≥ L) ≠ 1".into()
    })?;
    let mut checked = 0;
    for (seed, mode, log) in &ab.runs.logs {
        let TrainLog { iterations, .. } = log;
        ensure(
            iterations.first().map(|r| (r.iteration, r.rampup)) == Some((0, (-5f64).exp())),
            || format!("seed {seed} {mode}: first logged ramp-up is not e^-5"),
        )?;
        let total = iterations.len() as u64;
        let len = (total as f64 * 0.3).ceil() as u64;
        for pair in iterations.windows(2) {
            ensure(pair[0].rampup <= pair[1].rampup, || {
                format!(
                    "seed {seed} {mode}: ramp-up drops at iteration {}",
                    pair[1].iteration
                )
            })?;
        }
        for r in iterations.iter().filter(|r| r.iteration >= len) {
            ensure(r.rampup == 1.0, || {
                format!(
                    "seed {seed} {mode}: ramp-up {} at iteration {}",
                    r.rampup, r.iteration
                )
            })?;
        }
        checked += iterations.len();
    }
    ensure(checked > 0, || "no iterations logged".into())?;
    Ok(format!(
        "endpoints exact; monotone over {checked} logged iterations of {} runs",
        ab.runs.logs.len()
    ))
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst_focal = 0.0f64;
    let mut worst_dice = 0.0f64;
    for _ in 0..50 {
        let (c, h, w) = (
            rng.random_range(2..6),
            rng.random_range(1..9),
            rng.random_range(1..9),
        );
        let labels = random_labels(&mut rng, c, h, w);
        let mut onehot = vec![0f32; c * h * w];
        for (p, &y) in labels.labels().iter().enumerate() {
            onehot[y as usize * h * w + p] = 1.0;
        }
        let probs = ClassProbMap::new(Tensor::new(&[c, h, w], onehot).unwrap()).unwrap();
        let weights = random_weights(&mut rng, c);
        worst_focal = worst_focal.max(focal_loss(&probs, &labels, &weights).unwrap().abs());
        worst_dice = worst_dice.max(dice_loss(&probs, &labels, &weights).unwrap().abs());
    }
    ensure(worst_focal <= 1e-8 && worst_dice <= 1e-8, || {
        format!("focal {worst_focal:.1e}, dice {worst_dice:.1e}")
    })?;

    let (c, h, w) = (3, 4, 5);
    let empty = RegionMask::new(h, w, vec![false; h * w]).unwrap();
    let student = random_probs(&mut rng, c, h, w);
    let teacher = random_probs(&mut rng, c, h, w);
    let as_map = |t: &Tensor<f64>| ClassProbMap::new(t.cast()).unwrap();
    let value = soft_consistency_loss(&as_map(&student), &as_map(&teacher), &empty).unwrap();
    let mut g = Graph::<f64>::new();
    let s = g.param("student");
    let t = g.constant(teacher);
    let root = soft_consistency_node(&mut g, s, t, (c, h, w), &empty).unwrap();
    g.forward(root, &Bindings::new().with("student", &student))
        .map_err(|e| e.to_string())?;
    let grads = g.backward(root).map_err(|e| e.to_string())?;
    let grad_zero = grads
        .get("student")
        .is_none_or(|t| t.data().iter().all(|&v| v == 0.0));
    ensure(value == 0.0 && grad_zero, || {
        format!("empty mask gives loss {value} (zero gradient: {grad_zero})")
    })?;
    Ok(format!(
        "one-hot focal ≤ {worst_focal:.1e}, dice ≤ {worst_dice:.1e} on 50 instances; \
         empty region mask gives loss 0 and zero gradient"
    ))
}

fn report(results: &mut Vec<bool>, n: usize, name: &str, outcome: Outcome) {
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    println!("criterion {n} [{tag}] {name}: {detail}");
    results.push(outcome.is_ok());
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    report(&mut results, 1, "gradient correctness", criterion_1());
    report(
        &mut results,
        2,
        "weight averaging algebra and wiring",
        criterion_2(),
    );
    report(&mut results, 3, "oracle equivalence", criterion_3());
    report(&mut results, 4, "determinism", criterion_4());
    match run_full_ablation() {
        Ok(ab) => {
            report(
                &mut results,
                5,
                "co-training beats both baselines",
                criterion_5(&ab),
            );
            report(&mut results, 6, "ablation monotonicity", criterion_6(&ab));
            report(&mut results, 7, "ramp-up contract", criterion_7(&ab));
        }
        Err(e) => {
            for (n, name) in [
                (5, "co-training beats both baselines"),
                (6, "ablation monotonicity"),
                (7, "ramp-up contract"),
            ] {
                report(&mut results, n, name, Err(e.clone()));
            }
        }
    }
    report(&mut results, 8, "loss degeneracies", criterion_8());
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
