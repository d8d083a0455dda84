//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 5 to 10 train on the default synthetic dataset through the `ssada`
//! binary, so this target takes about 45 minutes on one core. Set
//! `SSADA_ACCEPTANCE_REUSE=1` to reuse finished runs (and their recorded
//! timings) from a previous invocation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssada::acquire::{confidence_score, entropy_score};
use ssada::datagen::{load_manifest, load_spec, Domain, Split, MANIFEST_FILE};
use ssada::losses::{weighted_cross_entropy, weighted_cross_entropy_grad};
use ssada::metrics::miou;
use ssada::pools::PoolSnapshot;
use ssada::report::{selection_frequency, RunRecord};
use ssada::trainer::{read_csv_rows, EVENTS_FILE, SELECTION_LOG_FILE, WEIGHTS_LOG_FILE, METRICS_FILE};
use ssada::weighting::{iou_weights, per_class_iou, ClassIoUVector, ClassWeightVector};
use ssada::{LabelMap, ProbabilityMap, Shape, IGNORE};

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

fn random_prob_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ProbabilityMap {
    let n = h * w;
    let mut data = vec![0.0; c * n];
    for px in 0..n {
        // Mix of peaked and flat pixels so both bounds get exercised.
        let sharp = rng.random_range(0.1..8.0);
        let raw: Vec<f64> = (0..c).map(|_| (rng.random::<f64>() * sharp).exp()).collect();
        let s: f64 = raw.iter().sum();
        for k in 0..c {
            data[k * n + px] = raw[k] / s;
        }
    }
    ProbabilityMap::from_data(c, Shape::new(h, w), data).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut bounds_ok = true;
    for _ in 0..200 {
        let c = rng.random_range(2..=8);
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let p = random_prob_map(&mut rng, c, h, w);
        let n = h * w;
        let (mut ent, mut conf) = (0.0, 0.0);
        for px in 0..n {
            let col: Vec<f64> = (0..c).map(|k| p.data[k * n + px]).collect();
            ent += col.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum::<f64>();
            conf += col.iter().cloned().fold(f64::MIN, f64::max);
        }
        ent /= n as f64;
        conf /= n as f64;
        let (e, k) = (entropy_score(&p), confidence_score(&p));
        worst = worst.max((e - ent).abs()).max((k - conf).abs());
        let lnc = (c as f64).ln();
        bounds_ok &= (0.0..=lnc + 1e-12).contains(&e) && (1.0 / c as f64 - 1e-12..=1.0 + 1e-12).contains(&k);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-9 && bounds_ok && secs < 5.0,
        format!("max |score - oracle| = {worst:.2e}, bounds held = {bounds_ok}, {secs:.2} s"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;
    for &u in &[2.0, 5.0] {
        let w = iou_weights(&ClassIoUVector { iou: vec![Some(0.0), Some(1.0)] }, u).unwrap();
        ok &= w.weights == vec![u, 1.0];
    }
    let endpoints = ok;
    let (mut antitone, mut in_range) = (true, true);
    for _ in 0..1000 {
        let c = rng.random_range(2..=10);
        let u = rng.random_range(1.0..6.0);
        let iou: Vec<Option<f64>> = (0..c).map(|_| Some(rng.random::<f64>())).collect();
        let w = iou_weights(&ClassIoUVector { iou: iou.clone() }, u).unwrap().weights;
        for i in 0..c {
            in_range &= (1.0..=u).contains(&w[i]);
            for j in 0..c {
                if iou[i].unwrap() <= iou[j].unwrap() {
                    antitone &= w[i] >= w[j];
                }
            }
        }
    }
    outcome(
        endpoints && antitone && in_range,
        format!("endpoints exact = {endpoints}, antitone = {antitone}, all in [1, u] = {in_range}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..100 {
        let c = rng.random_range(2..=6);
        let shape = Shape::new(8, 8);
        // Classes drawn from a random subset so some are absent.
        let present: Vec<u8> = (0..c as u8).filter(|_| rng.random_bool(0.7)).collect();
        let present = if present.is_empty() { vec![0] } else { present };
        let mut draw = |ignore_p: f64| -> LabelMap {
            let data = (0..64)
                .map(|_| {
                    if rng.random_bool(ignore_p) {
                        IGNORE
                    } else {
                        present[rng.random_range(0..present.len())]
                    }
                })
                .collect();
            LabelMap::from_data(shape, data).unwrap()
        };
        let gt = draw(0.15);
        let pred = draw(0.0);
        let (mut tp, mut fp, mut fnn) = (vec![0u64; c], vec![0u64; c], vec![0u64; c]);
        for (&g, &p) in gt.data.iter().zip(&pred.data) {
            if g == IGNORE {
                continue;
            }
            if g == p {
                tp[g as usize] += 1;
            } else {
                fnn[g as usize] += 1;
                fp[p as usize] += 1;
            }
        }
        let want: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let d = tp[k] + fp[k] + fnn[k];
                (d > 0).then(|| tp[k] as f64 / d as f64)
            })
            .collect();
        let defined: Vec<f64> = want.iter().flatten().cloned().collect();
        let want_mean = defined.iter().sum::<f64>() / defined.len() as f64;
        let got = per_class_iou(std::slice::from_ref(&pred), std::slice::from_ref(&gt), c).unwrap();
        let (got2, got_mean) = miou(std::slice::from_ref(&pred), std::slice::from_ref(&gt), c).unwrap();
        if got.iou != want || got2.iou != want || got_mean != want_mean {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of 100 pairs differ from the confusion-matrix oracle"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, shape) = (3usize, Shape::new(2, 2));
    let n = shape.pixels();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let logits: Vec<f64> = (0..c * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<u8> = (0..n)
            .map(|i| if i == 0 { rng.random_range(0..c as u8) } else if rng.random_bool(0.2) { IGNORE } else { rng.random_range(0..c as u8) })
            .collect();
        let y = LabelMap::from_data(shape, labels).unwrap();
        let w = ClassWeightVector::new((0..c).map(|_| rng.random_range(1.0..2.0)).collect(), 2.0).unwrap();
        let loss = |z: &[f64]| weighted_cross_entropy(&ProbabilityMap::from_logits(c, shape, z), &y, &w).unwrap();
        let count = y.data.iter().filter(|&&v| v != IGNORE).count();
        let p = ProbabilityMap::from_logits(c, shape, &logits);
        let g = weighted_cross_entropy_grad::<f64>(&p, &y, &w, 1.0 / count as f64);
        let h = 1e-5;
        for k in 0..c * n {
            let mut zp = logits.clone();
            let mut zm = logits.clone();
            zp[k] += h;
            zm[k] -= h;
            let fd = (loss(&zp) - loss(&zm)) / (2.0 * h);
            let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over 50 instances"))
}

struct Harness {
    bin: PathBuf,
    root: PathBuf,
    data: PathBuf,
    reuse: bool,
}

struct Run {
    dir: PathBuf,
    secs: f64,
}

impl Harness {
    fn new() -> Self {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let reuse = std::env::var("SSADA_ACCEPTANCE_REUSE").is_ok_and(|v| v == "1");
        let h = Harness {
            bin: PathBuf::from(env!("CARGO_BIN_EXE_ssada")),
            data: root.join("data"),
            root,
            reuse,
        };
        if !(h.reuse && h.data.join(MANIFEST_FILE).is_file()) {
            let out = Command::new(&h.bin)
                .args(["gen", "--force", "--out"])
                .arg(&h.data)
                .output()
                .expect("ssada runs");
            assert!(out.status.success(), "gen failed: {}", String::from_utf8_lossy(&out.stderr));
        }
        h
    }

    fn train(&self, name: &str, args: &[&str]) -> Run {
        let dir = self.root.join("runs").join(name);
        let stamp = args.join(" ");
        let done = dir.join("summary.json").is_file()
            && fs::read_to_string(dir.join("harness_args.txt")).is_ok_and(|s| s == stamp);
        if self.reuse && done {
            if let Some(secs) = fs::read_to_string(dir.join("harness_seconds.txt")).ok().and_then(|s| s.trim().parse().ok()) {
                return Run { dir, secs };
            }
        }
        let start = Instant::now();
        let out = Command::new(&self.bin)
            .arg("train")
            .args(args)
            .arg("--dataset")
            .arg(&self.data)
            .arg("--out")
            .arg(&dir)
            .arg("--force")
            .env("RUST_LOG", "warn")
            .output()
            .expect("ssada runs");
        let secs = start.elapsed().as_secs_f64();
        assert!(out.status.success(), "train {name} failed: {}", String::from_utf8_lossy(&out.stderr));
        fs::write(dir.join("harness_args.txt"), &stamp).unwrap();
        fs::write(dir.join("harness_seconds.txt"), format!("{secs}")).unwrap();
        eprintln!("  trained {name} in {secs:.0} s");
        Run { dir, secs }
    }
}

fn record(run: &Run) -> RunRecord {
    RunRecord::load(&run.dir).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn final_mious(runs: &[Run]) -> Vec<f64> {
    runs.iter().map(|r| record(r).summary.final_miou).collect()
}

fn criterion_5(run: &Run, data: &Path) -> Outcome {
    let rec = record(run);
    let cfg = &rec.config;
    let mut notes = Vec::new();
    if cfg.triggers != [20, 40, 60] || cfg.budget_fraction != 0.25 || cfg.init_fraction != 0.01 {
        notes.push("run config differs from budget 25%, init 1%, triggers 20/40/60".to_string());
    }
    let target: BTreeSet<String> = load_manifest(&data.join(MANIFEST_FILE))
        .unwrap()
        .into_iter()
        .filter(|r| r.domain == Domain::Target && r.split == Split::Train)
        .map(|r| r.sample_id)
        .collect();
    let mut prev: BTreeSet<String> = BTreeSet::new();
    for epoch in [0, 20, 40, 60] {
        let p = run.dir.join("pools").join(format!("pool_epoch{epoch:03}.json"));
        let snap: PoolSnapshot = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        let labeled: BTreeSet<String> = snap.labeled.iter().cloned().collect();
        let partition = labeled.len() == snap.labeled.len()
            && labeled.is_subset(&target)
            && labeled.len() + snap.unlabeled_count == target.len()
            && prev.is_subset(&labeled);
        if !partition {
            notes.push(format!("partition broken at epoch {epoch}"));
        }
        prev = labeled;
    }
    if prev.len() != 52 || rec.summary.labeled_count != 52 {
        notes.push(format!("final |D_t^l| = {} (want 52)", rec.summary.labeled_count));
    }
    let sel = read_csv_rows(&run.dir.join(SELECTION_LOG_FILE)).unwrap();
    if sel.len() != 50 {
        notes.push(format!("selection log has {} rows (want 50)", sel.len()));
    }
    let weight_epochs: BTreeSet<usize> = read_csv_rows(&run.dir.join(WEIGHTS_LOG_FILE))
        .unwrap()
        .iter()
        .map(|r| r[0].parse().unwrap())
        .collect();
    if weight_epochs != BTreeSet::from([20, 40, 60]) {
        notes.push(format!("weight tables at epochs {weight_epochs:?}"));
    }
    let events: Vec<(usize, String)> = read_csv_rows(&run.dir.join(EVENTS_FILE))
        .unwrap()
        .into_iter()
        .map(|r| (r[0].parse().unwrap(), r[1].clone()))
        .collect();
    let pos = |e: usize, name: &str| events.iter().position(|(a, b)| *a == e && b == name);
    for t in [20, 40, 60] {
        match (pos(t, "selection"), pos(t, "weights_refresh"), pos(t, "train_begin")) {
            (Some(s), Some(w), Some(b)) if s < w && w < b => {}
            _ => notes.push(format!("epoch {t}: selection, weight refresh, training not in order")),
        }
    }
    let pass = notes.is_empty();
    let detail = if pass {
        "partition held at epochs 0/20/40/60; |D_t^l| = 52; 50 selections; weights at 20/40/60 before training".to_string()
    } else {
        notes.join("; ")
    };
    outcome(pass, detail)
}

fn criterion_6(a: &Run, b: &Run) -> Outcome {
    let same = |name: &str| fs::read(a.dir.join(name)).unwrap() == fs::read(b.dir.join(name)).unwrap();
    let (sel, met) = (same(SELECTION_LOG_FILE), same(METRICS_FILE));
    outcome(sel && met, format!("selection log identical = {sel}, metrics identical = {met}"))
}

fn criterion_7(ss: &[Run], semi: &[Run], sup: &[Run]) -> Outcome {
    let (a, b, c) = (mean(&final_mious(ss)), mean(&final_mious(semi)), mean(&final_mious(sup)));
    let minutes = ss.iter().chain(semi).chain(sup).map(|r| r.secs).sum::<f64>() / 60.0;
    outcome(
        a >= b && b >= c && minutes < 45.0,
        format!("mean mIoU ss_ada(entropy) {a:.4} vs semi_random {b:.4} vs supervised_target {c:.4}; 9 runs took {minutes:.1} min"),
    )
}

fn criterion_8(src: &[Run], semi: &[Run], semi_active: &[Run], full: &[Run]) -> Outcome {
    let m = [src, semi, semi_active, full].map(|r| mean(&final_mious(r)));
    outcome(
        m[0] < m[1] && m[1] <= m[2] && m[2] <= m[3],
        format!(
            "source_only {:.4} < +semi {:.4} <= +semi+active {:.4} <= +semi+active+weighting {:.4}",
            m[0], m[1], m[2], m[3]
        ),
    )
}

fn rare_classes(data: &Path) -> Vec<usize> {
    load_spec(data).unwrap().rare_class_ids.iter().map(|&c| c as usize).collect()
}

fn criterion_9(ss: &[Run], data: &Path) -> Outcome {
    let rare = rare_classes(data);
    let ratios: Vec<Option<f64>> = ss
        .iter()
        .map(|r| selection_frequency(&record(r)).unwrap().and_then(|rep| rep.group_ratio(&rare)))
        .collect();
    let wins = ratios.iter().filter(|r| r.is_some_and(|v| v > 1.0)).count();
    let shown: Vec<String> = ratios
        .iter()
        .map(|r| r.map(|v| format!("{v:.3}")).unwrap_or_else(|| "undef".into()))
        .collect();
    outcome(wins >= 2, format!("rare-class frequency ratio per seed [{}]; {wins} of 3 exceed 1", shown.join(", ")))
}

fn mean_rare_iou(runs: &[Run], rare: &[usize]) -> f64 {
    let per_run: Vec<f64> = runs
        .iter()
        .map(|r| {
            let iou = record(r).summary.final_iou;
            mean(&rare.iter().map(|&c| iou.iou[c].unwrap_or(0.0)).collect::<Vec<_>>())
        })
        .collect();
    mean(&per_run)
}

fn criterion_10(iou_runs: &[Run], freq_runs: &[Run], data: &Path) -> Outcome {
    let rare = rare_classes(data);
    let (a, b) = (mean_rare_iou(iou_runs, &rare), mean_rare_iou(freq_runs, &rare));
    outcome(a >= b, format!("mean rare-class IoU at u=5: IoU-based {a:.4} vs frequency-based {b:.4}"))
}

fn main() {
    let mut results: BTreeMap<usize, Outcome> = BTreeMap::new();
    results.insert(1, criterion_1());
    results.insert(2, criterion_2());
    results.insert(3, criterion_3());
    results.insert(4, criterion_4());

    let h = Harness::new();
    let seeds = ["0", "1", "2"];
    let many = |prefix: &str, args: &[&str]| -> Vec<Run> {
        seeds
            .iter()
            .map(|s| {
                let mut a: Vec<&str> = args.to_vec();
                a.extend(["--seed", s]);
                h.train(&format!("{prefix}_s{s}"), &a)
            })
            .collect()
    };
    let ss = many("ss_ada", &["--mode", "ss_ada"]);
    let repeat = h.train("ss_ada_s0_repeat", &["--mode", "ss_ada", "--seed", "0"]);
    let semi = many("semi_random", &["--mode", "semi_random"]);
    let sup = many("supervised_target", &["--mode", "supervised_target"]);
    let src = many("source_only", &["--mode", "source_only"]);
    let semi_active = many("semi_active", &["--mode", "ss_ada", "--use-weighting", "false"]);
    let iou5 = many("iou_u5", &["--mode", "ss_ada", "--u", "5"]);
    let freq5 = many("freq_u5", &["--mode", "ss_ada", "--u", "5", "--weighting", "frequency"]);

    results.insert(5, criterion_5(&ss[0], &h.data));
    results.insert(6, criterion_6(&ss[0], &repeat));
    results.insert(7, criterion_7(&ss, &semi, &sup));
    results.insert(8, criterion_8(&src, &semi, &semi_active, &ss));
    results.insert(9, criterion_9(&ss, &h.data));
    results.insert(10, criterion_10(&iou5, &freq5, &h.data));

    println!();
    for (id, o) in &results {
        println!("criterion {id}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(id, _)| *id).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
