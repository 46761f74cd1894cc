//! Acceptance suite. Runs every criterion in sequence (the memory benchmark
//! needs an otherwise idle process) and prints one line per criterion:
//!
//! `criterion N PASS|FAIL <name>: <measurements> [<seconds>s]`
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 3 4`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pneumoseg::baselines::{matched_base_channels, UnetConfig, UnetDims};
use pneumoseg::bench::{benchmark, TrackingAllocator};
use pneumoseg::evaluate::{bland_altman, dice, lesion_dice, spearman, wilcoxon_signed_rank};
use pneumoseg::gradcheck::gradient_check;
use pneumoseg::model::{Model, ModelSpec};
use pneumoseg::network::{conv_lstm_step, forward, init_params, init_store, NetworkConfig};
use pneumoseg::nn::{Mode, Session};
use pneumoseg::ops;
use pneumoseg::quantify::{class_volume, map_prediction_to_source, pneumonia_burden};
use pneumoseg::synthdata::{
    generate_cohort, generate_phantom, jittered_spec, load_truth, PhantomSpec,
};
use pneumoseg::tensor::Tensor;
use pneumoseg::training::{
    ce_dice_loss, make_folds, rmi_loss, train_fold_cases, CaseStore, LossKind, Plateau,
    PlateauConfig, TrainConfig,
};
use pneumoseg::volume_io::{load_mask_any, save_mask, Class, LabelMask};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

/// Outcome of one criterion: pass flag plus a one-line summary.
struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------- helpers

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
}

fn random_windows(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_vec(
        &[n, 11, size, size],
        (0..n * 11 * size * size)
            .map(|_| rng.gen::<f32>())
            .collect(),
    )
}

fn blob_target(n: usize, h: usize, w: usize) -> Vec<u8> {
    (0..n * h * w)
        .map(|i| {
            let (y, x) = ((i / w) % h, i % w);
            if (y as f64 - 3.0).hypot(x as f64 - 3.0) < 2.5 {
                1
            } else if y + 2 >= h {
                2
            } else {
                0
            }
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

// -------------------------------------------------------------- criteria

const FUSION_TRIALS: usize = 100;

fn fusion_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for trial in 0..FUSION_TRIALS {
        let cfg = NetworkConfig {
            dense_layers: rng.gen_range(1..=3),
            dense_growth: rng.gen_range(2..=4),
            lstm_hidden: rng.gen_range(2..=4),
            head_channels: rng.gen_range(2..=4),
            image_size: 8,
            ..NetworkConfig::default()
        };
        let base = init_params(&cfg, trial as u64, None).unwrap();
        let size = rng.gen_range(4..=8);
        let x = random_windows(rng.gen_range(1..=2), size, &mut rng);
        // zero weights plus a saturating (or zero) bias pin the gate
        for (bias, target) in [(800.0f32, 1.0f32), (-800.0, 0.0), (0.0, 0.5)] {
            let mut p = base.clone();
            p.store
                .param_mut("attn_head.out.weight")
                .unwrap()
                .data_mut()
                .fill(0.0);
            p.store
                .param_mut("attn_head.out.bias")
                .unwrap()
                .data_mut()
                .fill(bias);
            let out = p.forward(&x, Mode::Eval).unwrap();
            assert!(out.alpha.value().data().iter().all(|&a| a == target));
            let (m, a, o) = (
                out.s_main.value().data(),
                out.s_attn.value().data(),
                out.s_out.value().data(),
            );
            for j in 0..o.len() {
                let want = match target {
                    t if t == 1.0 => m[j],
                    t if t == 0.0 => a[j],
                    _ => (m[j] + a[j]) / 2.0,
                };
                checked += 1;
                mismatches += usize::from(o[j].to_bits() != want.to_bits());
            }
        }
    }
    Verdict::new(
        mismatches == 0,
        format!("{FUSION_TRIALS} random (params, window) pairs x alpha in {{0, 0.5, 1}}: {mismatches} of {checked} outputs differ bitwise"),
    )
}

const CELL_LOSS_TOL: f64 = 1e-4;
const FULL_NET_TOL: f64 = 1e-3;

fn gradient_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (hd, sz) = (3, 5);
    let cell_inputs = [
        random_tensor(&[2, 2, sz, sz], &mut rng, 1.0),
        random_tensor(&[2, hd, sz, sz], &mut rng, 1.0),
        random_tensor(&[2, hd, sz, sz], &mut rng, 1.0),
        random_tensor(&[4 * hd, 2 + hd, 3, 3], &mut rng, 0.5),
        random_tensor(&[4 * hd], &mut rng, 0.5),
    ];
    let cell = gradient_check(
        &cell_inputs,
        |v| {
            let (h, c) = conv_lstm_step(&v[0], &v[1], &v[2], &v[3], &v[4]).unwrap();
            ops::add(&h, &c)
        },
        1e-6,
    )
    .max_relative_error();

    let t8 = blob_target(2, 8, 8);
    let logits8 = [random_tensor(&[2, 3, 8, 8], &mut rng, 2.0)];
    let rmi =
        gradient_check(&logits8, |v| rmi_loss(&v[0], &t8).unwrap().0, 1e-6).max_relative_error();
    // large enough to take the pooled path
    let t18: Vec<u8> = (0..18 * 21).map(|i| ((i / 7 + i / 40) % 3) as u8).collect();
    let rmi_pooled = gradient_check(
        &[random_tensor(&[1, 3, 18, 21], &mut rng, 1.5)],
        |v| rmi_loss(&v[0], &t18).unwrap().0,
        1e-6,
    )
    .max_relative_error();
    let ced = gradient_check(&logits8, |v| ce_dice_loss(&v[0], &t8).unwrap().0, 1e-6)
        .max_relative_error();

    let cfg = NetworkConfig {
        dense_layers: 2,
        dense_growth: 2,
        lstm_hidden: 3,
        head_channels: 3,
        image_size: 8,
        ..NetworkConfig::default()
    };
    let store = init_store::<f64>(&cfg, 21).unwrap();
    let names: Vec<String> = store.params.keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.params[n].clone()).collect();
    let x = random_windows(2, 8, &mut rng).cast::<f64>();
    let target = blob_target(2, 8, 8);
    let net = gradient_check(
        &inputs,
        |vars| {
            let s = Session::new(&store, Mode::Train, true);
            for (name, v) in names.iter().zip(vars) {
                s.bind(name, v.clone());
            }
            let out = forward(&s, &cfg, &x).unwrap();
            rmi_loss(&out.s_out, &target).unwrap().0
        },
        1e-6,
    )
    .max_relative_error();

    let pass = cell < CELL_LOSS_TOL
        && rmi.max(rmi_pooled) < CELL_LOSS_TOL
        && ced < CELL_LOSS_TOL
        && net < FULL_NET_TOL;
    Verdict::new(
        pass,
        format!(
            "max rel err: convlstm cell {cell:.1e}, rmi {:.1e}, ce+dice {ced:.1e} (tol {CELL_LOSS_TOL:.0e}); full net ({} tensors) {net:.1e} (tol {FULL_NET_TOL:.0e})",
            rmi.max(rmi_pooled),
            names.len()
        ),
    )
}

fn scheduler_protocol() -> Verdict {
    let cfg = PlateauConfig {
        factor: 0.1,
        patience: 10,
        stop_lr: 1e-7,
    };
    let mut p = Plateau::new(1e-3, cfg);
    // epoch 0 sets the best loss; 45 non-improving epochs follow
    p.update(1.0).unwrap();
    let mut reductions = Vec::new();
    let mut stop_epoch = None;
    for epoch in 1..=45 {
        let step = p.update(1.0 + epoch as f64 * 1e-3).unwrap();
        if step.reduced {
            reductions.push((epoch, step.lr));
        }
        if step.stop {
            stop_epoch = Some(epoch);
            break;
        }
    }
    let expected = [1e-4, 1e-5, 1e-6, 1e-7];
    let lrs_ok = reductions.len() == 4
        && reductions
            .iter()
            .zip(expected)
            .all(|((_, lr), want)| rel(*lr, want) < 1e-12);
    let stop_ok = stop_epoch == reductions.last().map(|r| r.0);
    let epochs: Vec<usize> = reductions.iter().map(|r| r.0).collect();
    let lrs: Vec<String> = reductions.iter().map(|r| format!("{:.0e}", r.1)).collect();
    Verdict::new(
        lrs_ok && stop_ok,
        format!(
            "reductions at epochs {epochs:?} to [{}], stop at epoch {stop_epoch:?}",
            lrs.join(", ")
        ),
    )
}

fn fold_protocol() -> Verdict {
    let ids: Vec<String> = (0..197).map(|i| format!("p{i:03}")).collect();
    let all: BTreeSet<&String> = ids.iter().collect();
    let mut failures = Vec::new();
    let mut sizes_ok = true;
    for seed in 0..1000u64 {
        let folds = make_folds(&ids, 5, 32, seed).unwrap();
        let test_sizes: Vec<usize> = folds.iter().map(|f| f.test_ids.len()).collect();
        let train_sizes: Vec<usize> = folds.iter().map(|f| f.train_ids.len()).collect();
        sizes_ok &= test_sizes == [40, 40, 39, 39, 39]
            && train_sizes == [125, 125, 126, 126, 126]
            && folds.iter().all(|f| f.val_ids.len() == 32);
        let mut tested = BTreeSet::new();
        for f in &folds {
            let (tr, va, te): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) = (
                f.train_ids.iter().collect(),
                f.val_ids.iter().collect(),
                f.test_ids.iter().collect(),
            );
            let disjoint = tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te);
            let covers = tr.len() + va.len() + te.len() == ids.len()
                && tr.union(&va).chain(te.iter()).count() == ids.len();
            if !disjoint || !covers {
                failures.push(seed);
            }
            for id in &f.test_ids {
                if !tested.insert(id) {
                    failures.push(seed);
                }
            }
        }
        if tested.len() != all.len() {
            failures.push(seed);
        }
    }
    failures.dedup();
    Verdict::new(
        sizes_ok && failures.is_empty(),
        format!("n=197: test {{40,40,39,39,39}}, val 32, train 125/126 for all seeds: {sizes_ok}; partition violations over 1000 seeds: {}", failures.len()),
    )
}

fn quantification_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dir = tempfile::tempdir().unwrap();
    let (mut volume_mismatch, mut worst_burden) = (0usize, 0.0f64);
    for i in 0..25 {
        let spec = jittered_spec(&PhantomSpec::base(), &mut rng, format!("q{i}"));
        let ph = generate_phantom(&spec).unwrap();
        // independent voxel count straight from the geometry
        let [d, h, w] = spec.shape;
        let mut counts = [0usize; 3];
        let mut lung = 0usize;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z as f64, y as f64, x as f64];
                    lung += usize::from(spec.lungs.iter().any(|l| l.contains(p)));
                    let class = spec
                        .lesions
                        .iter()
                        .rev()
                        .find(|l| l.shape.contains(p))
                        .map_or(Class::Background, |l| l.class);
                    counts[class.code() as usize] += 1;
                }
            }
        }
        let s = spec.spacing;
        let vml = s.dz * s.dy * s.dx / 1000.0;
        let path = dir.path().join(format!("q{i}.mask"));
        save_mask(&ph.mask, &path).unwrap();
        let mask: LabelMask = load_mask_any(&path).unwrap();
        for class in Class::LESIONS {
            if class_volume(&mask, class.code(), s).unwrap()
                != counts[class.code() as usize] as f64 * vml
            {
                volume_mismatch += 1;
            }
        }
        let formula = 100.0 * (counts[1] + counts[2]) as f64 * vml / (lung as f64 * vml);
        worst_burden = worst_burden.max(rel(pneumonia_burden(&mask, s).unwrap(), formula));
    }
    Verdict::new(
        volume_mismatch == 0 && worst_burden <= 1e-12,
        format!("25 phantoms: {volume_mismatch} class volumes differ from voxel-count volumes; worst burden rel err {worst_burden:.1e} (tol 1e-12)"),
    )
}

/// Reference implementations written without the library's helpers.
mod brute {
    pub fn ranks_no_ties(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|x| 1.0 + v.iter().filter(|y| *y < x).count() as f64)
            .collect()
    }

    pub fn spearman_formula(x: &[f64], y: &[f64]) -> f64 {
        let (rx, ry) = (ranks_no_ties(x), ranks_no_ties(y));
        let n = x.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    }

    /// Two-sided exact p by enumerating all 2^n sign patterns.
    pub fn wilcoxon_exhaustive(d: &[f64]) -> (f64, f64) {
        let ranks = ranks_no_ties(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
        let w: f64 = d
            .iter()
            .zip(&ranks)
            .filter(|(v, _)| **v > 0.0)
            .map(|(_, r)| r)
            .sum();
        let n = d.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            let s: f64 = (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            le += u64::from(s <= w);
            ge += u64::from(s >= w);
        }
        let total = (1u64 << n) as f64;
        (w, (2.0 * (le as f64).min(ge as f64) / total).min(1.0))
    }

    pub fn dice(pred: &[u8], gt: &[u8], c: u8) -> f64 {
        let a: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] == c).collect();
        let b: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
        if a.is_empty() && b.is_empty() {
            return 1.0;
        }
        let inter = a.iter().filter(|i| b.binary_search(i).is_ok()).count();
        2.0 * inter as f64 / (a.len() + b.len()) as f64
    }
}

const STAT_TOL: f64 = 1e-12;

fn statistics_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut e_dice, mut e_rho, mut e_ba, mut e_w) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = 10;
        // continuous draws: ties have probability zero
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-30.0..30.0)).collect();
        e_rho = e_rho.max((spearman(&x, &y).unwrap().rho - brute::spearman_formula(&x, &y)).abs());

        let ba = bland_altman(&x, &y).unwrap();
        let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        e_ba = e_ba
            .max(rel(ba.bias, mean))
            .max(rel(ba.loa_low, mean - 1.96 * sd))
            .max(rel(ba.loa_high, mean + 1.96 * sd));

        let w = wilcoxon_signed_rank(&x, &y).unwrap();
        let (w_ref, p_ref) = brute::wilcoxon_exhaustive(&d);
        e_w = e_w.max((w.w_plus - w_ref).abs()).max((w.p - p_ref).abs());

        let len = 200;
        let pred: Vec<u8> = (0..len).map(|_| rng.gen_range(0..3)).collect();
        let gt: Vec<u8> = (0..len).map(|_| rng.gen_range(0..3)).collect();
        let (pm, gm) = (
            LabelMask::new([1, 1, len], pred.clone(), None).unwrap(),
            LabelMask::new([1, 1, len], gt.clone(), None).unwrap(),
        );
        for c in 0..3 {
            e_dice = e_dice.max((dice(&pm, &gm, c).unwrap() - brute::dice(&pred, &gt, c)).abs());
        }
    }
    let pass = e_dice <= STAT_TOL && e_rho <= STAT_TOL && e_ba <= STAT_TOL && e_w <= STAT_TOL;
    Verdict::new(
        pass,
        format!("200 draws, n=10: max |err| dice {e_dice:.1e}, spearman {e_rho:.1e}, bland-altman (rel) {e_ba:.1e}, wilcoxon W/p {e_w:.1e} (tol {STAT_TOL:.0e})"),
    )
}

/// Desk-scale configuration for the end-to-end learning criterion.
pub fn desk_network() -> NetworkConfig {
    NetworkConfig {
        dense_layers: 4,
        dense_growth: 16,
        lstm_hidden: 32,
        head_channels: 16,
        image_size: 48,
        ..NetworkConfig::default()
    }
}

pub fn desk_training() -> TrainConfig {
    TrainConfig {
        lr0: 0.01,
        batch_size: 4,
        samples_per_epoch: 64,
        max_epochs: 50,
        plateau_patience: 5,
        augment: false,
        loss: LossKind::Rmi,
        folds: 10,
        val_size: 4,
        seed: 7,
        workers: 1,
        ..TrainConfig::default()
    }
}

const MIN_LESION_DSC: f64 = 0.80;
const MIN_RHO: f64 = 0.9;

fn end_to_end_learning() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_cohort(40, &PhantomSpec::base(), 7, dir.path()).unwrap();
    let cfg = desk_training();
    // 10 folds of 40 give 4 test, 4 validation and 32 training patients
    let split = make_folds(&data.ids(), cfg.folds, cfg.val_size, cfg.seed)
        .unwrap()
        .remove(0);
    assert_eq!(
        (
            split.train_ids.len(),
            split.val_ids.len(),
            split.test_ids.len()
        ),
        (32, 4, 4)
    );
    let spec = ModelSpec::Ours(desk_network());
    let store = CaseStore::load(&data, &data.ids(), spec.image_size()).unwrap();
    let outcome = train_fold_cases(&split, &store, &spec, &cfg).unwrap();
    let truth = load_truth(dir.path().join("truth.csv")).unwrap();
    let (mut dscs, mut pred_ggo, mut true_ggo) = (Vec::new(), Vec::new(), Vec::new());
    for id in &split.test_ids {
        let case = store.get(id).unwrap();
        let planes = outcome
            .model
            .predict_planes(&case.prepared, cfg.batch_size)
            .unwrap();
        let p = &case.prepared;
        let mask = map_prediction_to_source(&planes, p.size, p.crop_box, p.source_shape).unwrap();
        let (_, gt) = data.load_pair(id).unwrap();
        dscs.push(lesion_dice(&mask, &gt).unwrap());
        pred_ggo.push(class_volume(&mask, Class::Ggo.code(), case.spacing).unwrap());
        true_ggo.push(truth.iter().find(|(t, _)| t == id).unwrap().1.ggo_ml);
    }
    let dsc = dscs.iter().sum::<f64>() / dscs.len() as f64;
    let rho = spearman(&pred_ggo, &true_ggo)
        .map(|c| c.rho)
        .unwrap_or(f64::NAN);
    let h = &outcome.history;
    Verdict::new(
        dsc >= MIN_LESION_DSC && rho >= MIN_RHO,
        format!(
            "{} epochs (best {}), test lesion DSC {dsc:.3} (need >= {MIN_LESION_DSC}), GGO spearman rho {rho:.3} (need >= {MIN_RHO}); per patient DSC {:?}",
            h.records.len(),
            h.best_epoch,
            dscs.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn memory_ordering() -> Verdict {
    let ours = Model::init(ModelSpec::Ours(desk_network()), 0).unwrap();
    let target = ours.store.num_params();
    let mut ucfg = UnetConfig {
        image_size: desk_network().image_size,
        ..UnetConfig::default()
    };
    ucfg.base_channels = matched_base_channels(&ucfg, UnetDims::Three, target);
    let unet3d = Model::init(ModelSpec::Unet3d(ucfg.clone()), 0).unwrap();
    let ratio = unet3d.store.num_params() as f64 / target as f64;
    // one sample per forward pass: a window for ours, a 16-slice chunk for the 3-D net
    let a = benchmark(&ours, 16, 3, 1).unwrap();
    let b = benchmark(&unet3d, 16, 3, 1).unwrap();
    let (ma, mb) = (a.peak_memory_bytes.unwrap(), b.peak_memory_bytes.unwrap());
    // all 16 windows in one pass, reported for context
    let batched = benchmark(&ours, 16, 1, 16)
        .unwrap()
        .peak_memory_bytes
        .unwrap();
    let mib = |b: usize| b as f64 / (1024.0 * 1024.0);
    Verdict::new(
        ma < mb && (0.5..=2.0).contains(&ratio),
        format!(
            "16 slices at {}px: ours {:.1} MiB ({} params) vs unet3d {:.1} MiB ({} params, base {}, ratio {ratio:.2}); ours with all 16 windows batched {:.1} MiB",
            ucfg.image_size,
            mib(ma),
            target,
            mib(mb),
            unet3d.store.num_params(),
            ucfg.base_channels,
            mib(batched)
        ),
    )
}

fn reproducibility() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    assert_eq!(
        pneumoseg::cli::run([
            "pneumoseg",
            "synth",
            "--n",
            "10",
            "--seed",
            "3",
            "--out",
            cohort.to_str().unwrap()
        ]),
        0
    );
    let manifest = cohort.join("manifest.tsv");
    let run = |out: &Path| {
        let args = [
            "pneumoseg",
            "crossval",
            "--data",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "11",
            "--workers",
            "2",
            "--image-size",
            "16",
            "--set",
            "train.val_size=2",
            "--set",
            "train.max_epochs=2",
            "--set",
            "train.batch_size=4",
            "--set",
            "train.samples_per_epoch=8",
            "--set",
            "train.augment=true",
            "--set",
            "network.dense_layers=1",
            "--set",
            "network.dense_growth=2",
            "--set",
            "network.lstm_hidden=2",
            "--set",
            "network.head_channels=2",
        ];
        pneumoseg::cli::run(args)
    };
    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    assert_eq!(run(&a), 0);
    assert_eq!(run(&b), 0);
    let files = |root: &Path| -> Vec<String> {
        let mut names: Vec<String> = fs::read_dir(root.join("predictions"))
            .unwrap()
            .map(|e| format!("predictions/{}", e.unwrap().file_name().to_string_lossy()))
            .chain((0..5).map(|k| format!("fold{k}_history.csv")))
            .collect();
        names.sort();
        names
    };
    let names = files(&a);
    let same_set = names == files(&b);
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| fs::read(a.join(n)).ok() != fs::read(b.join(n)).ok())
        .collect();
    let n_pred = names
        .iter()
        .filter(|n| n.starts_with("predictions/"))
        .count();
    Verdict::new(
        same_set && differing.is_empty() && n_pred == 10,
        format!("two seeded 5-fold crossval runs on 10 phantoms: {n_pred} predictions + 5 histories compared, {} differ", differing.len()),
    )
}

type Criterion = (usize, &'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 9] = [
    (1, "fusion identities", fusion_identities),
    (2, "gradient correctness", gradient_correctness),
    (3, "scheduler and stop protocol", scheduler_protocol),
    (4, "fold protocol", fold_protocol),
    (5, "quantification exactness", quantification_exactness),
    (6, "statistics oracles", statistics_oracles),
    (7, "end-to-end phantom learning", end_to_end_learning),
    (8, "memory ordering", memory_ordering),
    (9, "crossval reproducibility", reproducibility),
];

fn main() {
    let wanted: BTreeSet<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (n, name, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let v = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Verdict::new(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let status = if v.pass { "PASS" } else { "FAIL" };
        let line = format!(
            "criterion {n} {status} {name}: {} [{:.1}s]",
            v.detail,
            t.elapsed().as_secs_f64()
        );
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
        if !v.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
