//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion.
//!
//! Contract criteria abort the run with a non-zero exit when they fail.
//! Criteria that measure training outcomes (7 to 11) are reported, and only
//! fail the run when `FOGSEG_ACCEPTANCE_STRICT=1` is set.
//!
//! Training budgets: 200 synthetic pairs at 64x64, clean baseline 600 steps,
//! pre-training 2000 steps, fog migration 500 steps, fine-tuning and joint
//! training 600 steps each, seeds 1, 2 and 3.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fogseg::config::RunConfig;
use fogseg::curriculum::*;
use fogseg::evalkit::*;
use fogseg::finetune::{lr_schedule, FinetuneConfig};
use fogseg::fogsim::*;
use fogseg::losses::*;
use fogseg::nets::{build_dfnet, ParamSet};
use fogseg::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Suite {
    start: Instant,
    contract_failures: usize,
    outcome_failures: usize,
}

impl Suite {
    fn record(&mut self, n: usize, contract: bool, o: Outcome) {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n}: {verdict} ({}) [{:.0}s]", o.detail, self.start.elapsed().as_secs_f64());
        if !o.pass {
            if contract {
                self.contract_failures += 1;
            } else {
                self.outcome_failures += 1;
            }
        }
    }
}

// ---- oracles -----------------------------------------------------------------------

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn scalar(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).item()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn channel(z: &[f64], k: usize, hw: usize, p: usize) -> Vec<f64> {
    (0..k).map(|c| z[c * hw + p]).collect()
}

fn spread(n: usize, offset: f64) -> Vec<f64> {
    (0..n).map(|i| ((i * 17 + 5) % 13) as f64 * 0.15 - 0.9 + offset).collect()
}

/// Worst relative error between analytic and central-difference gradients.
fn grad_check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let l = f(&mut g, &vs);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let l = f(&mut g, &vs);
    let grads = g.backward(l).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (i, v) in vs.iter().enumerate() {
        let n = inputs[i].data().len();
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; n]);
        for j in 0..n {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(analytic[j].abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Mean IoU from pixel index sets over classes present in either map.
fn set_miou(pred: &[u8], gt: &[u8], k: u8) -> Option<f64> {
    let mut ious = Vec::new();
    for c in 0..k {
        let valid = |i: &usize| gt[*i] != IGNORE;
        let p: BTreeSet<usize> = (0..pred.len()).filter(valid).filter(|&i| pred[i] == c).collect();
        let g: BTreeSet<usize> = (0..gt.len()).filter(valid).filter(|&i| gt[i] == c).collect();
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(p.intersection(&g).count() as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

// ---- property criteria ---------------------------------------------------------------

fn c1_loss_oracles() -> Outcome {
    let tol = 1e-6;
    let mut bad: Vec<String> = Vec::new();
    fn check(bad: &mut Vec<String>, name: &str, got: f64, want: f64) {
        if (got - want).abs() > 1e-6 {
            bad.push(format!("{name}: {got} vs {want}"));
        }
    }
    let a = vec![1.0, 2.0, 3.0, 4.0];
    let ones = vec![1.0; 4];
    let l1 = |x: &Vec<f64>, y: &Vec<f64>| {
        scalar(|g| {
            let a = g.constant(t(&[4], x.clone()));
            let b = g.constant(t(&[4], y.clone()));
            l1_similarity(g, a, b).unwrap()
        })
    };
    check(&mut bad, "l1 identity", l1(&a, &a), 0.0);
    check(&mut bad, "l1 hand value", l1(&a, &ones), 1.5);
    check(&mut bad, "l1 symmetry", l1(&a, &ones), l1(&ones, &a));

    let pyr = |d: Vec<Vec<f64>>, c: Vec<Vec<f64>>| {
        scalar(|g| {
            let d: Vec<Var> = d.into_iter().map(|v| g.constant(t(&[v.len()], v))).collect();
            let c: Vec<Var> = c.into_iter().map(|v| g.constant(t(&[v.len()], v))).collect();
            dct_loss(g, &d, &c).unwrap()
        })
    };
    let e = vec![vec![0.3, -0.2], vec![0.1, 0.4, -0.5, 0.2]];
    check(&mut bad, "dct identity", pyr(e.clone(), e.clone()), 0.0);
    check(&mut bad, "dct stage sum", pyr(vec![vec![0.5; 2], vec![0.25; 4]], vec![vec![0.0; 2], vec![0.0; 4]]), 0.75);
    let base = pyr(e.clone(), vec![vec![0.0; 2], vec![0.0; 4]]);
    let doubled = pyr(vec![e[0].clone(), e[1].iter().map(|v| v * 2.0).collect()], vec![vec![0.0; 2], vec![0.0; 4]]);
    if doubled <= base {
        bad.push("dct not monotone".into());
    }

    let sed = |d: Vec<f64>, c: Vec<f64>, s: Vec<f64>, z: Vec<f64>| {
        scalar(|g| {
            let d = g.constant(t(&[d.len()], d));
            let c = g.constant(t(&[c.len()], c));
            let s = g.constant(t(&[1, 2, 1, 1], s));
            let z = g.constant(t(&[1, 2, 1, 1], z));
            sed_loss(g, &[d], &[c], s, z).unwrap()
        })
    };
    check(&mut bad, "sed identity", sed(vec![0.2; 3], vec![0.2; 3], vec![1.0, -1.0], vec![1.0, -1.0]), 0.0);
    check(&mut bad, "sed term sum", sed(vec![0.6; 3], vec![0.0; 3], vec![0.1, -0.1], vec![0.0; 2]), 0.7);

    let labels = Labels::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
    let ce = |z: Vec<f64>, l: &Labels| {
        scalar(|g| {
            let v = g.constant(t(&[1, 4, 2, 2], z));
            cross_entropy(g, v, l).unwrap()
        })
    };
    check(&mut bad, "ce uniform", ce(vec![0.0; 16], &labels), 4f64.ln());
    let mut sat = vec![0.0; 16];
    for (p, &y) in labels.data.iter().enumerate() {
        sat[y as usize * 4 + p] = 30.0;
    }
    if ce(sat, &labels) >= 1e-9 {
        bad.push("ce saturated".into());
    }
    let z: Vec<f64> = (0..16).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
    let y = vec![2, IGNORE, 0, IGNORE];
    let kept: Vec<f64> = [0usize, 2]
        .iter()
        .map(|&p| -log_softmax(&channel(&z, 4, 4, p))[y[p] as usize])
        .collect();
    check(
        &mut bad,
        "ce masked",
        ce(z, &Labels::new(1, 2, 2, y).unwrap()),
        kept.iter().sum::<f64>() / kept.len() as f64,
    );

    let kl = |a: Vec<f64>, b: Vec<f64>| {
        scalar(|g| {
            let a = g.constant(t(&[1, 2, 1, 1], a));
            let b = g.constant(t(&[1, 2, 1, 1], b));
            kl_consistency(g, a, b, KlDirection::CleanReference).unwrap()
        })
    };
    check(&mut bad, "kl identity", kl(vec![0.3, -0.4], vec![0.3, -0.4]), 0.0);
    check(&mut bad, "kl bernoulli", kl(vec![0.0, 0.0], vec![50.0, -50.0]), 2f64.ln());

    check(&mut bad, "total weighted", f64::from(finetune_total(1.0, 2.0, 5.0, 1e-4).unwrap()), 3.0005);
    check(&mut bad, "total zero weight", f64::from(finetune_total(1.0, 2.0, 5.0, 0.0).unwrap()), 3.0);

    let pix = |x: f64, y: f64| {
        scalar(|g| {
            let a = g.constant(t(&[1, 3, 2, 2], vec![x; 12]));
            let b = g.constant(t(&[1, 3, 2, 2], vec![y; 12]));
            l1_pixel_loss(g, a, b).unwrap()
        })
    };
    check(&mut bad, "pixel identity", pix(0.4, 0.4), 0.0);
    check(&mut bad, "pixel constant", pix(0.2, 0.5), 0.3);

    // Non-negativity on a fixed random sweep.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let a: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (pa, pb) = (log_softmax(&a), log_softmax(&b));
        let want: f64 = pb.iter().zip(&pa).map(|(lb, la)| lb.exp() * (lb - la)).sum();
        let got = kl(a.clone(), b.clone());
        if got < -tol || (got - want).abs() > tol {
            bad.push(format!("kl sweep {got} vs {want}"));
        }
        if sed(a.iter().chain(&b).cloned().collect(), vec![0.1; 4], a.clone(), b.clone()) < 0.0 {
            bad.push("sed negative".into());
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { "all loss examples within 1e-6".into() } else { bad.join("; ") })
}

fn c2_gradients() -> Outcome {
    let a = t(&[1, 2, 2, 2], spread(8, 0.0));
    let b = t(&[1, 2, 2, 2], spread(8, 0.07));
    let mut worst = Vec::new();
    worst.push((
        "l1_pixel_loss",
        grad_check(vec![a.clone(), b.clone()], |g, v| l1_pixel_loss(g, v[0], v[1]).unwrap()),
    ));
    worst.push((
        "dct_loss",
        grad_check(vec![a.clone(), b.clone(), t(&[4], spread(4, 0.3)), t(&[4], spread(4, 0.0))], |g, v| {
            dct_loss(g, &[v[0], v[2]], &[v[1], v[3]]).unwrap()
        }),
    ));
    worst.push((
        "sed_loss",
        grad_check(vec![a, b, t(&[1, 3, 2, 2], spread(12, 0.0))], |g, v| {
            let c = g.constant(Tensor::new(vec![1, 3, 2, 2], spread(12, 0.11)).unwrap());
            sed_loss(g, &[v[0]], &[v[1]], v[2], c).unwrap()
        }),
    ));
    let labels = Labels::new(1, 2, 2, vec![0, 2, IGNORE, 1]).unwrap();
    worst.push((
        "cross_entropy",
        grad_check(vec![t(&[1, 3, 2, 2], spread(12, 0.0))], |g, v| cross_entropy(g, v[0], &labels).unwrap()),
    ));
    worst.push((
        "kl_consistency",
        grad_check(vec![t(&[1, 3, 2, 2], spread(12, 0.0)), t(&[1, 3, 2, 2], spread(12, 0.4))], |g, v| {
            kl_consistency(g, v[0], v[1], KlDirection::default()).unwrap()
        }),
    ));
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(max <= 1e-3, format!("max rel err {max:.1e}: {detail}"))
}

fn c3_fog_identities() -> Outcome {
    let mut bad = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let px = |v: f32| Raster::new(1, 1, vec![v; 3]).unwrap();
    let dm = |d: f32| DepthMap::new(1, 1, vec![d]).unwrap();
    for i in 0..1000 {
        let c: f32 = rng.random_range(0.0..1.0);
        let a: f32 = rng.random_range(0.0..1.0);
        let d: f32 = rng.random_range(0.0..80.0);
        let b1: f32 = rng.random_range(0.0..0.3);
        let b2 = b1 + rng.random_range(0.0..0.3f32);
        let id = apply_fog(&px(c), &dm(d), 0.0, a).unwrap().data()[0];
        if id != c {
            bad.push(format!("pixel {i}: beta=0 gives {id} for {c}"));
        }
        let lo = apply_fog(&px(c), &dm(d), b1, a).unwrap().data()[0];
        let hi = apply_fog(&px(c), &dm(d), b2, a).unwrap().data()[0];
        // Denser fog never moves a pixel away from the airlight.
        if (hi - a).abs() > (lo - a).abs() + 1e-6 || (lo - a).abs() > (c - a).abs() + 1e-6 {
            bad.push(format!("pixel {i}: not monotone toward airlight"));
        }
    }
    let cfg = DatasetConfig {
        train: 4,
        val: 0,
        test: 2,
        real_fog: 2,
        real_fog_test: 2,
        ..DatasetConfig::default()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m1 = build_dataset(&cfg, d1.path()).unwrap();
    build_dataset(&cfg, d2.path()).unwrap();
    let files = |root: &Path| {
        let mut v = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in std::fs::read_dir(&p).unwrap() {
                let e = e.unwrap().path();
                if e.is_dir() {
                    stack.push(e);
                } else {
                    v.push((e.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&e).unwrap()));
                }
            }
        }
        v.sort();
        v
    };
    if files(d1.path()) != files(d2.path()) {
        bad.push("regenerated dataset differs".into());
    }
    let ds = load_dataset(d1.path()).unwrap();
    let mut n = 0;
    for split in Split::ALL {
        for s in ds.load_split(split, Access::Evaluation).unwrap() {
            n += 1;
            if s.refog().unwrap().to_bytes() != s.fog.to_bytes() {
                bad.push(format!("{} does not round-trip", s.id));
            }
            if s != SceneSample::generate(&cfg, split, s.id.rsplit('_').next().unwrap().parse().unwrap()).unwrap() {
                bad.push(format!("{} differs from regeneration", s.id));
            }
        }
    }
    if n != 10 || m1.samples.len() != 10 {
        bad.push(format!("expected 10 samples, found {n}"));
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            "beta=0 identity and monotonicity on 1000 pixels; 10-sample dataset byte-exact".into()
        } else {
            bad.into_iter().take(5).collect::<Vec<_>>().join("; ")
        },
    )
}

fn c4_miou_bruteforce() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 5u8;
    let mut mismatches = 0;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let pred: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..k)).collect();
        let gt: Vec<u8> = (0..h * w)
            .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..k) })
            .collect();
        let cm = confusion(&LabelMap::new(h, w, pred.clone()).unwrap(), &LabelMap::new(h, w, gt.clone()).unwrap(), k as usize)
            .unwrap();
        let ok = match set_miou(&pred, &gt, k) {
            Some(v) => miou(&cm).ok() == Some(v),
            None => miou(&cm).is_err(),
        };
        mismatches += usize::from(!ok);
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches on 100 random pairs"))
}

fn c5_interpolation() -> Outcome {
    let arch = fogseg::nets::ArchConfig::default();
    let cur = build_dfnet(&arch, 1).unwrap();
    let base = build_dfnet(&arch, 2).unwrap();
    let at0 = interpolate_weights(&cur, &base, 0.0).unwrap() == cur;
    let at1 = interpolate_weights(&cur, &base, 1.0).unwrap() == base;
    let probe = |v: f32| -> ParamSet { [("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap())].into_iter().collect() };
    let v = f64::from(interpolate_weights(&probe(1.0), &probe(0.0), 0.01).unwrap().get("w").unwrap().data()[0]);
    let ok = at0 && at1 && (v - 0.99).abs() <= 1e-7;
    outcome(ok, format!("gamma=0 exact {at0}, gamma=1 exact {at1}, probe {v:.9}"))
}

fn c12_schedule() -> Outcome {
    let mid = lr_schedule(50, 100, 0.01).unwrap();
    let (enc, dec) = FinetuneConfig::default().group_lrs(0).unwrap();
    let ok = (mid - 0.01 * 0.5f64.sqrt()).abs() <= 1e-7 && (mid - 0.0070711).abs() <= 1e-7 && enc == 1e-3 && dec == 1e-2;
    outcome(ok, format!("midpoint {mid:.7}, encoder {enc}, decoder {dec}"))
}

// ---- training criteria ---------------------------------------------------------------

fn profile() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "clean.iterations=600",
        "pretrain.iterations=2000",
        "fdm.iterations=500",
        "joint.iterations=600",
        "finetune.iterations=600",
    ])
    .unwrap();
    cfg
}

fn c6_frozen(wb: &mut Workbench) -> Outcome {
    let fsnetc = wb.fsnetc(1).unwrap();
    let before = fsnetc.params.to_le_bytes();
    let cfg = wb.config().clone();
    let ctx = cfg.context();
    let data = wb.data();
    let pairs = PairSet::from_samples(&data.train).unwrap();
    let pre = PretrainConfig {
        iterations: 50,
        ..cfg.pretrain.clone()
    };
    let basic = pretrain_basic(build_dfnet(&cfg.arch, 1).unwrap(), &fsnetc, &pairs, &cfg.arch, &pre, &ctx).unwrap();
    let after_basic = fsnetc.params.to_le_bytes() == before;
    let pseudo = generate_pseudo_pairs(&basic.checkpoint, &data.real_fog).unwrap();
    let fdm = FdmConfig {
        iterations: 50,
        ..cfg.fdm.clone()
    };
    pretrain_fdm(
        &basic.checkpoint,
        &fsnetc,
        &pairs,
        &pseudo,
        &data.real_fog,
        &fdm,
        cfg.pretrain.losses,
        cfg.pretrain.adam,
        &ctx,
    )
    .unwrap();
    let after_fdm = fsnetc.params.to_le_bytes() == before;
    let reloaded = wb.fsnetc(1).unwrap().params.to_le_bytes() == before;
    outcome(
        after_basic && after_fdm && reloaded,
        format!("bytes unchanged after pretrain_basic {after_basic}, after pretrain_fdm {after_fdm}"),
    )
}

fn c7_defog_psnr(wb: &mut Workbench) -> Outcome {
    let cfg = wb.config().clone();
    let df = wb.dfnet_basic(1, cfg.pretrain.losses, cfg.arch.decoder_depth).unwrap();
    let test = &wb.data().test;
    let fog: Vec<&Raster> = test.iter().map(|s| &s.fog).collect();
    let defogged = defog_all(&df.checkpoint.params, &cfg.arch, &fog).unwrap();
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
    let p_fog = mean(test.iter().map(|s| psnr(&s.fog, s.clean().unwrap()).unwrap().db).collect());
    let p_def = mean(test.iter().zip(&defogged).map(|(s, d)| psnr(d, s.clean().unwrap()).unwrap().db).collect());
    outcome(
        p_def >= p_fog + 2.0,
        format!(
            "{} steps, {} pairs: defogged {p_def:.2} dB vs foggy {p_fog:.2} dB on {} held-out images",
            cfg.pretrain.iterations,
            wb.data().train.len(),
            test.len()
        ),
    )
}

fn table(wb: &mut Workbench, preset: Preset, seeds: &[u64]) -> AblationTable {
    run_ablation_on(wb, &AblationSpec::new(preset, seeds.to_vec())).unwrap().table
}

fn pts(x: f64) -> f64 {
    100.0 * x
}

fn c8_decoupling(t2: &AblationTable) -> Outcome {
    let joint = pts(t2.mean("joint", "fog_test_miou").unwrap());
    let dec = pts(t2.mean("decoupled", "fog_test_miou").unwrap());
    outcome(dec >= joint + 1.0, format!("decoupled {dec:.2} vs joint {joint:.2} fog-test mIoU"))
}

fn c9_fdm(t2: &AblationTable) -> Outcome {
    let dec = pts(t2.mean("decoupled", "fog_test_miou").unwrap());
    let fdm = pts(t2.mean("decoupled+fdm", "fog_test_miou").unwrap());
    outcome(fdm >= dec - 0.5, format!("fdm {fdm:.2} vs decoupled {dec:.2} fog-test mIoU"))
}

fn c10_finetune_losses(t4: &AblationTable) -> Outcome {
    let fog = pts(t4.mean("fog", "clean_test_miou").unwrap());
    let fc = pts(t4.mean("fog+clean", "clean_test_miou").unwrap());
    let fc_fog = pts(t4.mean("fog+clean", "fog_test_miou").unwrap());
    let full = pts(t4.mean("fog+clean+con", "fog_test_miou").unwrap());
    outcome(
        fc >= fog + 2.0 && full >= fc_fog - 0.5,
        format!("clean test: fog+clean {fc:.2} vs fog {fog:.2}; fog test: full {full:.2} vs fog+clean {fc_fog:.2}"),
    )
}

fn c11_table6(wb: &mut Workbench) -> (Outcome, Outcome) {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fogseg"))
        .args(["--smoke", "--out"])
        .arg(dir.path())
        .args(["ablate", "--preset", "table6", "--seeds", "1"])
        .output()
        .unwrap();
    let csv = std::fs::read_to_string(dir.path().join("ablations/table6/tables/table6.csv")).unwrap_or_default();
    let labels: Vec<String> = csv.lines().skip(1).filter_map(|l| l.split(',').nth(2)).map(String::from).collect();
    let structure = o.status.success() && labels == ["full_encoder", "l1_encoder", "clean_encoder"];
    let shape = outcome(structure, format!("cli table6 rows {labels:?}"));

    let t6 = table(wb, Preset::Table6, &SEEDS);
    let v: Vec<f64> = ["full_encoder", "l1_encoder", "clean_encoder"]
        .iter()
        .map(|r| pts(t6.mean(r, "fog_test_miou").unwrap()))
        .collect();
    let lowest = v[1] < v[0] && v[1] < v[2];
    let trend = outcome(
        lowest,
        format!("fog-test mIoU full {:.2}, l1 {:.2}, clean {:.2}", v[0], v[1], v[2]),
    );
    (shape, trend)
}

fn c13_determinism() -> Outcome {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let o = Command::new(env!("CARGO_BIN_EXE_fogseg"))
            .args(["--smoke", "--seed", "1", "--out"])
            .arg(dir.path())
            .arg("pipeline")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(dir.path().join("metrics/segnet.csv")).unwrap()
    };
    let (a, b) = (run(), run());
    outcome(a == b && !a.is_empty(), format!("two smoke pipeline runs, {} bytes of metrics each", a.len()))
}

fn main() {
    // `cargo test` passes harness flags; only a filter that excludes this target skips it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let strict = std::env::var("FOGSEG_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut s = Suite {
        start: Instant::now(),
        contract_failures: 0,
        outcome_failures: 0,
    };
    s.record(1, true, c1_loss_oracles());
    s.record(2, true, c2_gradients());
    s.record(3, true, c3_fog_identities());
    s.record(4, true, c4_miou_bruteforce());
    s.record(5, true, c5_interpolation());
    s.record(12, true, c12_schedule());
    s.record(13, true, c13_determinism());

    let mut wb = Workbench::new(profile()).unwrap();
    let start = s.start;
    wb.on_progress(move |m| eprintln!("  [{:.0}s] training {m}", start.elapsed().as_secs_f64()));
    s.record(6, true, c6_frozen(&mut wb));
    s.record(7, false, c7_defog_psnr(&mut wb));
    let t2 = table(&mut wb, Preset::Table2, &SEEDS);
    println!("{}", t2.render());
    s.record(8, false, c8_decoupling(&t2));
    s.record(9, false, c9_fdm(&t2));
    let t4 = table(&mut wb, Preset::Table4, &SEEDS);
    println!("{}", t4.render());
    s.record(10, false, c10_finetune_losses(&t4));
    let (shape, trend) = c11_table6(&mut wb);
    let pass = shape.pass && trend.pass;
    let detail = format!("{}; {}", shape.detail, trend.detail);
    if !shape.pass {
        s.record(11, true, outcome(false, detail));
    } else {
        s.record(11, false, outcome(pass, detail));
    }

    println!(
        "acceptance: {} contract failures, {} outcome failures",
        s.contract_failures, s.outcome_failures
    );
    if s.contract_failures > 0 || (strict && s.outcome_failures > 0) {
        std::process::exit(1);
    }
}
