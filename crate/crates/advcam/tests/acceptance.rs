//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! The expensive artifacts (standard dataset, trained classifier, climbed
//! test-split trajectories for the compared configurations) are built once in
//! a shared lazy fixture and reused across criteria.

use advcam::cam;
use advcam::climb::{self, ClimbConfig, ClimbTrajectory};
use advcam::metrics::{self, ProbeDirection, ProbeGridConfig};
use advcam::model::{self, ArchConfig, GapClassifier, TrainConfig};
use advcam::synthdata::{self, Dataset, DatasetSpec, Record, Split, NUM_CLASSES};
use advcam::tensor::Tensor;
use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::Command;

const THETAS: [f64; 19] = [
    0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75,
    0.80, 0.85, 0.90, 0.95,
];

struct Fixture {
    dataset_dir: PathBuf,
    dataset: Dataset,
    model: GapClassifier,
    /// Defaults: T=27, xi=0.008, lambda=7, tau=0.5, masking + suppression.
    default_trajs: Vec<(usize, ClimbTrajectory)>,
    /// Plain climbing: Eq. 3 only (no masking, no suppression).
    plain_trajs: Vec<(usize, ClimbTrajectory)>,
    /// Defaults with lambda = 0 (mask recorded but penalty off).
    lambda0_trajs: Vec<(usize, ClimbTrajectory)>,
    /// Masking on, suppression off — multi-object test records only.
    nosuppress_multi_trajs: Vec<(usize, ClimbTrajectory)>,
    /// Indices (into the test-record vector) of multi-object records.
    multi_indices: Vec<usize>,
}

fn slim(mut trajs: Vec<(usize, ClimbTrajectory)>) -> Vec<(usize, ClimbTrajectory)> {
    // drop per-step images and masks: the criteria only read logits, CAMs,
    // and aggregates, and 28 full-resolution images per pair add up fast
    for (_, t) in &mut trajs {
        t.images.clear();
        t.masks.clear();
    }
    trajs
}

static FX: Lazy<Fixture> = Lazy::new(|| {
    let dir = std::env::temp_dir().join("advcam-acceptance-fixture");
    let index = dir.join("index.json");
    let spec = DatasetSpec::default(); // 800/100/100, seed 7, markers on
    if !index.exists() {
        std::fs::create_dir_all(&dir).expect("fixture dir");
        synthdata::generate(&spec, &dir).expect("dataset generation");
    }
    let dataset = synthdata::load(&index).expect("dataset load");

    let ckpt = dir.join("model.ckpt");
    let model = if ckpt.exists() {
        model::load_checkpoint(&ckpt).expect("checkpoint load").0
    } else {
        let (m, report) = model::train(
            &dataset.samples(Split::Train),
            &dataset.samples(Split::Val),
            ArchConfig::standard(NUM_CLASSES),
            &TrainConfig::default(),
        )
        .expect("training must clear the accuracy gate");
        model::save_checkpoint(&m, &report.meta, &ckpt).expect("checkpoint save");
        m
    };

    let records = dataset.split(Split::Test);
    let defaults = ClimbConfig::default();
    let plain = ClimbConfig {
        masking: false,
        suppress_others: false,
        ..defaults.clone()
    };
    let lambda0 = ClimbConfig {
        lambda: 0.0,
        ..defaults.clone()
    };
    let nosuppress = ClimbConfig {
        suppress_others: false,
        ..defaults.clone()
    };
    let multi_indices: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.tags.len() >= 2)
        .map(|(i, _)| i)
        .collect();
    let multi_records: Vec<&Record> = multi_indices.iter().map(|&i| records[i]).collect();

    let default_trajs = slim(metrics::climb_dataset(&model, &records, &defaults).expect("climb"));
    let plain_trajs = slim(metrics::climb_dataset(&model, &records, &plain).expect("climb"));
    let lambda0_trajs = slim(metrics::climb_dataset(&model, &records, &lambda0).expect("climb"));
    let nosuppress_multi_trajs =
        slim(metrics::climb_dataset(&model, &multi_records, &nosuppress).expect("climb"));

    Fixture {
        dataset_dir: dir,
        dataset,
        model,
        default_trajs,
        plain_trajs,
        lambda0_trajs,
        nosuppress_multi_trajs,
        multi_indices,
    }
});

fn test_records(fx: &Fixture) -> Vec<&Record> {
    fx.dataset.split(Split::Test)
}

fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap()
}

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {n:2} [{name}]: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} failed: {detail}");
}

// 1. Input gradients of the full regularized objective match central finite
//    differences on random (model, image) pairs, kink inputs excluded.
#[test]
fn criterion_01_gradient_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    // Step size balances truncation against cancellation: the objective is
    // piecewise linear to good approximation at this scale, so the larger h
    // mainly buys back significant digits in the central difference.
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for pair in 0..10u64 {
        let model = GapClassifier::init(ArchConfig::standard(NUM_CLASSES), 100 + pair);
        let x = rand_image(&mut rng, 16, 16);
        let other = rand_image(&mut rng, 16, 16);
        let cam0 = cam::extract_cam(&model, &other, 0).unwrap();
        let cam_x = cam::extract_cam(&model, &x, 0).unwrap();
        let mask = climb::restricting_mask(&cam_x, 0.5);
        let (_, grad, _) =
            climb::climb_loss_grad(&model, &x, 0, true, 7.0, Some(&mask), Some(&cam0.raw))
                .unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let ep = climb::climb_loss(&model, &xp, 0, true, 7.0, Some(&mask), Some(&cam0.raw))
                .unwrap();
            let em = climb::climb_loss(&model, &xm, 0, true, 7.0, Some(&mask), Some(&cam0.raw))
                .unwrap();
            if ep.signature != em.signature {
                skipped += 1;
                continue;
            }
            let fd = (ep.value - em.value) / (2.0 * h);
            let an = grad.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    verdict(
        1,
        "gradient oracle",
        worst <= 1e-5 && checked > 5000,
        &format!("max rel err {worst:.3e} over {checked} coords ({skipped} kink coords excluded)"),
    );
}

// 2. GAP-CAM identity y_c = mean(signed CAM_c) + b_c on trained and untrained
//    models over 100 images.
#[test]
fn criterion_02_gap_cam_identity() {
    let fx = &*FX;
    let untrained = GapClassifier::init(ArchConfig::standard(NUM_CLASSES), 0xBEEF);
    let mut worst: f64 = 0.0;
    for record in test_records(fx) {
        for m in [&fx.model, &untrained] {
            let (logits, features) = m.forward(&record.image).unwrap();
            for c in 0..NUM_CLASSES {
                let map = cam::extract_cam_from_features(m, &features, c).unwrap();
                let mean = map.signed.data().iter().sum::<f64>() / map.signed.len() as f64;
                worst = worst.max((logits.data()[c] - mean - m.bias.data()[c]).abs());
            }
        }
    }
    verdict(
        2,
        "GAP-CAM identity",
        worst <= 1e-9,
        &format!("max |y_c - mean(CAM) - b_c| = {worst:.3e} on 100 images x 4 classes x 2 models"),
    );
}

// 3. Climbing raises the target logit: over full default climbs and over
//    single plain steps, on >= 95% of test (image, tag) pairs.
#[test]
fn criterion_03_ascent_property() {
    let fx = &*FX;
    let frac = |trajs: &[(usize, ClimbTrajectory)], t: usize| {
        let up = trajs
            .iter()
            .filter(|(_, tr)| {
                tr.logits[t.min(tr.logits.len() - 1)].data()[tr.class_id]
                    > tr.logits[0].data()[tr.class_id]
            })
            .count();
        up as f64 / trajs.len() as f64
    };
    let full = frac(&fx.default_trajs, 27);
    let single = frac(&fx.plain_trajs, 1);
    verdict(
        3,
        "ascent property",
        full >= 0.95 && single >= 0.95,
        &format!(
            "y_c rose on {:.1}% of pairs over T=27 defaults, {:.1}% over single plain steps",
            full * 100.0,
            single * 100.0
        ),
    );
}

// 4. Attack and plain climb displace the input by exactly opposite vectors:
// both steps are x.axpy(+/-xi, g) with one shared gradient, and IEEE
// multiplication gives (-xi)*g == -(xi*g) bitwise. (The round trip
// (x + d) - x is not rounding-symmetric, so the check compares against the
// shared-gradient axpy rather than re-deriving displacements by subtraction.)
#[test]
fn criterion_04_sign_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let mut pairs = 0usize;
    let mut exact = true;
    for seed in 0..5u64 {
        let model = GapClassifier::init(ArchConfig::standard(NUM_CLASSES), 400 + seed);
        let x = rand_image(&mut rng, 16, 16);
        let class = (seed % 4) as usize;
        let xi = 0.008;
        let g = climb::logit_input_grad(&model, &x, class).unwrap();
        let up = climb::climb_step_plain(&model, &x, class, xi).unwrap();
        let down = climb::attack_step(&model, &x, class, xi).unwrap();
        let exp_up = x.axpy(xi, &g).unwrap();
        let exp_down = x.axpy(-xi, &g).unwrap();
        for i in 0..x.len() {
            if (xi * g.data()[i]).to_bits() != (-(-xi * g.data()[i])).to_bits()
                || up.data()[i].to_bits() != exp_up.data()[i].to_bits()
                || down.data()[i].to_bits() != exp_down.data()[i].to_bits()
            {
                exact = false;
            }
        }
        pairs += 1;
    }
    verdict(
        4,
        "sign symmetry",
        exact,
        &format!("displacements bitwise opposite on {pairs} random (model, image) pairs"),
    );
}

/// Mean per-pair masked-region deviation: sum(M .* |cam_T - cam_0|) / sum(M)
/// with M the tau=0.5 restricting mask of the initial CAM.
fn masked_deviation(model: &GapClassifier, trajs: &[(usize, ClimbTrajectory)]) -> f64 {
    let _ = model;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (_, tr) in trajs {
        let cam0 = &tr.cams[0];
        let norm0 = cam::normalize_map(cam0);
        let last = tr.cams.last().unwrap();
        let mut dev = 0.0;
        let mut m = 0usize;
        for i in 0..cam0.len() {
            if norm0.data()[i] > 0.5 {
                dev += (last.data()[i] - cam0.data()[i]).abs();
                m += 1;
            }
        }
        if m > 0 {
            sum += dev / m as f64;
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

// 5. The masking penalty keeps the masked region stable: default deviation
//    <= 0.25x the lambda=0 deviation.
#[test]
fn criterion_05_masking_stability() {
    let fx = &*FX;
    let with = masked_deviation(&fx.model, &fx.default_trajs);
    let without = masked_deviation(&fx.model, &fx.lambda0_trajs);
    verdict(
        5,
        "masking stability",
        with <= 0.25 * without,
        &format!(
            "masked-region deviation {with:.4} (lambda=7) vs {without:.4} (lambda=0), ratio {:.3}",
            with / without.max(1e-300)
        ),
    );
}

/// Pooled final-step amplification-ratio medians over the test split:
/// (median over R_ND, median over R_D).
fn pooled_final_medians(trajs: &[(usize, ClimbTrajectory)]) -> (f64, f64) {
    let mut rnd = Vec::new();
    let mut rd = Vec::new();
    for (_, tr) in trajs {
        let stats = metrics::amplification_stats(tr);
        let last = stats.per_step.last().unwrap();
        rnd.extend_from_slice(&last.ratios_non_discriminative);
        rd.extend_from_slice(&last.ratios_discriminative);
    }
    (
        metrics::median(&rnd).expect("non-empty R_ND pool"),
        metrics::median(&rd).expect("non-empty R_D pool"),
    )
}

// 6. Non-discriminative regions amplify more than discriminative ones under
//    regularized climbing, and more so than without regularization.
#[test]
fn criterion_06_differential_amplification() {
    let fx = &*FX;
    let (rnd_reg, rd_reg) = pooled_final_medians(&fx.default_trajs);
    let (rnd_plain, rd_plain) = pooled_final_medians(&fx.plain_trajs);
    let ratio_reg = rnd_reg / rd_reg;
    let ratio_plain = rnd_plain / rd_plain;
    verdict(
        6,
        "differential amplification",
        rnd_reg > rd_reg && ratio_reg > ratio_plain,
        &format!(
            "regularized medians: R_ND {rnd_reg:.3} vs R_D {rd_reg:.3} (ratio {ratio_reg:.3}); \
             plain ratio {ratio_plain:.3}"
        ),
    );
}

fn best_miou(items: &[metrics::EvalItem]) -> metrics::ThresholdPoint {
    metrics::threshold_sweep(items, &THETAS, NUM_CLASSES)
        .expect("sweep")
        .best
}

/// Once the >= 2.0-point requirement below is met, the measured gap is meant
/// to be pinned here as a +/- 0.5 point regression band. Left unpinned: at
/// this benchmark's scale the measured gap is ~0 points (see the known
/// limitation in the README), so criterion 7 currently fails and there is no
/// passing gap to pin.
const PINNED_GAP_POINTS: Option<f64> = None;

// 7. Best-threshold seed mIoU: aggregates beat the baseline CAM by >= 2.0
//    points, and the measured gap stays within the pinned band.
#[test]
fn criterion_07_seed_improvement() {
    let fx = &*FX;
    let records = test_records(fx);
    let baseline = best_miou(&metrics::eval_items(&fx.default_trajs, &records, Some(0)).unwrap());
    let advcam = best_miou(&metrics::eval_items(&fx.default_trajs, &records, None).unwrap());
    let gap = (advcam.miou - baseline.miou) * 100.0;
    let pinned_ok = match PINNED_GAP_POINTS {
        Some(p) => (gap - p).abs() <= 0.5,
        None => true,
    };
    verdict(
        7,
        "seed improvement",
        gap >= 2.0 && pinned_ok,
        &format!(
            "baseline mIoU {:.2} (theta {:.2}) vs climbed {:.2} (theta {:.2}); gap {gap:.2} points \
             (pinned {:?})",
            baseline.miou * 100.0,
            baseline.theta,
            advcam.miou * 100.0,
            advcam.theta,
            PINNED_GAP_POINTS
        ),
    );
}

// 8. Iteration shape: the un-regularized mIoU-vs-t curve peaks earlier or
//    ends lower, and its final noise proportion is strictly higher.
#[test]
fn criterion_08_iteration_and_noise_shape() {
    let fx = &*FX;
    let records = test_records(fx);
    let ts = [0usize, 1, 3, 6, 9, 13, 17, 21, 24, 27];
    let curve = |trajs: &[(usize, ClimbTrajectory)]| -> Vec<metrics::ThresholdPoint> {
        ts.iter()
            .map(|&t| best_miou(&metrics::eval_items(trajs, &records, Some(t)).unwrap()))
            .collect()
    };
    let reg = curve(&fx.default_trajs);
    let plain = curve(&fx.plain_trajs);
    let peak = |c: &[metrics::ThresholdPoint]| {
        c.iter()
            .enumerate()
            .max_by(|a, b| a.1.miou.partial_cmp(&b.1.miou).unwrap())
            .map(|(i, p)| (ts[i], p.miou))
            .unwrap()
    };
    let (t_reg, _) = peak(&reg);
    let (t_plain, _) = peak(&plain);
    let last_reg = reg.last().unwrap();
    let last_plain = plain.last().unwrap();
    let shape_ok = t_plain < t_reg || last_plain.miou < last_reg.miou;
    let noise_ok = last_reg.noise < last_plain.noise;
    verdict(
        8,
        "iteration/noise shape",
        shape_ok && noise_ok,
        &format!(
            "peaks: plain t={t_plain}, regularized t={t_reg}; final mIoU {:.4} vs {:.4}; \
             final noise {:.4} (reg) vs {:.4} (plain)",
            last_plain.miou, last_reg.miou, last_reg.noise, last_plain.noise
        ),
    );
}

// 9. Other-class suppression does not hurt on multi-object images (masking on
//    in both arms).
#[test]
fn criterion_09_suppression_ablation() {
    let fx = &*FX;
    let records = test_records(fx);
    let multi_records: Vec<&Record> = fx.multi_indices.iter().map(|&i| records[i]).collect();
    // suppression-on arm: default trajectories restricted to multi-object
    // records, record indices remapped into the subset
    let on_trajs: Vec<(usize, ClimbTrajectory)> = fx
        .default_trajs
        .iter()
        .filter_map(|(ri, tr)| {
            fx.multi_indices
                .iter()
                .position(|&m| m == *ri)
                .map(|sub| (sub, tr.clone()))
        })
        .collect();
    let on = best_miou(&metrics::eval_items(&on_trajs, &multi_records, None).unwrap());
    let off = best_miou(&metrics::eval_items(&fx.nosuppress_multi_trajs, &multi_records, None).unwrap());
    verdict(
        9,
        "suppression ablation",
        on.miou >= off.miou,
        &format!(
            "multi-object mIoU {:.4} with suppression vs {:.4} without ({} records)",
            on.miou,
            off.miou,
            multi_records.len()
        ),
    );
}

// 10. Every aggregate map is bounded: min >= 0 and, unless identically zero,
//     max = 1 within 1e-12.
#[test]
fn criterion_10_aggregate_bounds() {
    let fx = &*FX;
    let mut maps = 0usize;
    let mut ok = true;
    for trajs in [
        &fx.default_trajs,
        &fx.plain_trajs,
        &fx.lambda0_trajs,
        &fx.nosuppress_multi_trajs,
    ] {
        for (_, tr) in trajs.iter() {
            let a = &tr.aggregate;
            let max = a.max_value();
            if a.min_value() < 0.0 || !(max == 0.0 || (max - 1.0).abs() <= 1e-12) {
                ok = false;
            }
            maps += 1;
        }
    }
    verdict(
        10,
        "aggregate bounds",
        ok,
        &format!("min >= 0 and max in {{0, 1 +/- 1e-12}} on all {maps} emitted aggregates"),
    );
}

// 11. Landscape probe: exact base-loss cell, descent along the climbing
//     direction, and seed-reproducible CSVs.
#[test]
fn criterion_11_landscape_probe() {
    let fx = &*FX;
    let grid = ProbeGridConfig {
        a_min: 0.0,
        a_max: 0.005,
        b_min: 0.0,
        b_max: 0.0,
        steps: 2,
    };
    let mut exact_cells = true;
    let mut descended = 0usize;
    let mut total = 0usize;
    for record in test_records(fx) {
        let class = record.tags[0];
        let ls = metrics::landscape_probe(
            &fx.model,
            &record.image,
            class,
            ProbeDirection::Climb,
            &grid,
            0,
        )
        .expect("probe");
        // values laid out [a][b]; cell (0,0) is the unperturbed image
        if ls.values[0].to_bits() != ls.base_loss.to_bits() {
            exact_cells = false;
        }
        if ls.values[grid.steps] < ls.base_loss {
            descended += 1;
        }
        total += 1;
    }
    // byte-identical CSVs from identical seeds, through the CLI
    let image = fx.dataset_dir.join("images").join(format!(
        "{}.ppm",
        test_records(fx)[0].id
    ));
    let ckpt = fx.dataset_dir.join("model.ckpt");
    let tmp = tempfile::tempdir().unwrap();
    let run = |out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_advcam"))
            .args([
                "landscape",
                "--model",
                ckpt.to_str().unwrap(),
                "--image",
                image.to_str().unwrap(),
                "--class",
                &test_records(fx)[0].tags[0].to_string(),
                "--steps",
                "5",
                "--seed",
                "42",
                "-o",
                out.to_str().unwrap(),
            ])
            .status()
            .expect("spawn");
        assert!(status.success());
        std::fs::read(out.join("landscape.csv")).unwrap()
    };
    let csv1 = run(&tmp.path().join("l1"));
    let csv2 = run(&tmp.path().join("l2"));
    let frac = descended as f64 / total as f64;
    verdict(
        11,
        "landscape probe",
        exact_cells && frac >= 0.95 && csv1 == csv2,
        &format!(
            "base cell exact on all {total} images; loss fell along the climb direction on \
             {:.1}%; repeated CSVs byte-identical: {}",
            frac * 100.0,
            csv1 == csv2
        ),
    );
}

// 12. The CLI pipeline is byte-for-byte reproducible end to end.
#[test]
fn criterion_12_end_to_end_determinism() {
    let bin = env!("CARGO_BIN_EXE_advcam");
    let tmp = tempfile::tempdir().unwrap();
    let pipeline = |root: &Path| {
        let data = root.join("data");
        let model = root.join("model");
        let maps = root.join("maps");
        let eval = root.join("eval");
        let ok = |args: &[&str]| {
            let status = Command::new(bin).args(args).status().expect("spawn");
            assert!(status.success(), "command failed: {args:?}");
        };
        ok(&[
            "gen-data", "--seed", "3", "--train", "16", "--val", "4", "--test", "4", "-o",
            data.to_str().unwrap(),
        ]);
        ok(&[
            "train", "--data", data.to_str().unwrap(), "--epochs", "2", "--gate", "0", "-o",
            model.to_str().unwrap(),
        ]);
        let ckpt = model.join("model.ckpt");
        ok(&[
            "advcam", "--model", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
            "--split", "test", "--T", "3", "-o", maps.to_str().unwrap(),
        ]);
        ok(&[
            "eval-seed", "--maps", maps.join("maps").to_str().unwrap(), "--data",
            data.to_str().unwrap(), "--split", "test", "--thresholds", "0.1:0.9:0.2", "-o",
            eval.to_str().unwrap(),
        ]);
        let mut artifacts: Vec<(String, Vec<u8>)> = Vec::new();
        artifacts.push(("model.ckpt".into(), std::fs::read(&ckpt).unwrap()));
        let mut map_files: Vec<PathBuf> = std::fs::read_dir(maps.join("maps"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().map(|e| e == "f64").unwrap_or(false))
            .collect();
        map_files.sort();
        assert!(!map_files.is_empty(), "advcam produced no maps");
        for p in map_files {
            artifacts.push((
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            ));
        }
        for f in ["curve.csv", "best.csv"] {
            artifacts.push((f.into(), std::fs::read(eval.join(f)).unwrap()));
        }
        artifacts
    };
    let a = pipeline(&tmp.path().join("run1"));
    let b = pipeline(&tmp.path().join("run2"));
    let identical = a == b;
    verdict(
        12,
        "end-to-end determinism",
        identical,
        &format!(
            "{} artifacts (checkpoint, {} maps, 2 CSVs) byte-identical across repeated runs",
            a.len(),
            a.len() - 3
        ),
    );
}
