//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p coda-core --test acceptance` runs everything (about half
//! an hour on one core). `CODA_ACCEPT=1,2,7` runs a subset.
//! `CODA_BLESS=1` rewrites the eigenvector golden file instead of checking it.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use coda_core::bench::{bench_all, write_bench_csv, TrackingAllocator, CSV_HEADER};
use coda_core::data::{load_idx, make_noisy_templates, LabeledImageSet};
use coda_core::dau::{DauParams, RescaleKind};
use coda_core::decomposition::{activation_at, effective_row, AttributionMethod, SpatialContributionMap};
use coda_core::evdemo::{run_evdemo, EvDemoConfig};
use coda_core::metrics::{
    compose_grids, evaluate_localisation, localisation_by_temperature, localisation_score, pixel_removal_curve,
    temperature_study, write_localisation_csv, write_removal_csv, GridTask, RemovalOrder, TemperatureStudy,
};
use coda_core::net::train::{accuracy, train, train_with_eval, TrainConfig};
use coda_core::net::{one_hot, stack, CodaConvLayer, CodaNet, EncodingKind, LayerSpec, NetConfig, Optimizer};
use coda_core::{Graph, Real, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

type Outcome = Result<String, String>;

const ENCODINGS: [EncodingKind; 2] = [EncodingKind::Six, EncodingKind::Embed];

/// Learning setup shared by criteria 9 and 10.
const LEARN_CLASSES: [usize; 3] = [0, 1, 2];
const LEARN_PER_CLASS: usize = 250;
const LEARN_EPOCHS: usize = 12;
const LEARN_LR: Real = 0.003;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k")
}

fn mnist() -> Result<LabeledImageSet, String> {
    let dir = data_dir();
    load_idx(dir.join("images-idx3-ubyte.gz"), dir.join("labels-idx1-ubyte.gz")).map_err(|e| e.to_string())
}

/// Train/test split of a class subset, train capped per class.
fn subset(classes: &[usize], per_class: usize) -> Result<(LabeledImageSet, LabeledImageSet), String> {
    let set = mnist()?.select_classes(classes).map_err(|e| e.to_string())?;
    let (train, test) = set.split(0.2, 17);
    Ok((train.take_per_class(per_class), test))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_kind(r: &mut ChaCha8Rng) -> RescaleKind {
    *RescaleKind::ALL.choose(r).expect("non-empty")
}

/// A small random pure CoDA net with `layers` 3x3 layers.
fn random_config(r: &mut ChaCha8Rng, kind: RescaleKind, encoding: EncodingKind, layers: usize) -> NetConfig {
    let c = r.gen_range(1..=3);
    let classes = r.gen_range(2..=4);
    let mut size = r.gen_range(10..=16);
    let mut specs = Vec::new();
    for i in 0..layers {
        let stride = if i == 0 && size >= 12 { r.gen_range(1..=2) } else { 1 };
        let padding = r.gen_range(0..=1);
        let out = if i + 1 == layers { classes } else { r.gen_range(3..=6) };
        size = (size + 2 * padding - 3) / stride + 1;
        specs.push(LayerSpec {
            kernel: 3,
            stride,
            padding,
            rank: r.gen_range(2..=4),
            out_channels: out,
        });
    }
    let mut cfg = NetConfig::default_for(c, 16, 16, classes, kind);
    cfg.height = 16;
    cfg.width = 16;
    cfg.encoding = encoding;
    cfg.embed_channels = r.gen_range(2..=4);
    cfg.layers = specs;
    cfg.temperature = [1.0, 10.0, 100.0][r.gen_range(0..3)];
    if kind != RescaleKind::Wb {
        cfg.shared_b = Some(r.gen_bool(0.5));
    }
    cfg
}

fn random_image(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::uniform(&[c, h, w], 1.0, r).map(|v| v.abs())
}

fn criterion_1() -> Outcome {
    let mut r = rng(1);
    let mut worst: Real = 0.0;
    for trial in 0..100 {
        let kind = RescaleKind::ALL[trial % 3];
        let encoding = ENCODINGS[(trial / 3) % 2];
        let layers = r.gen_range(2..=3);
        let cfg = random_config(&mut r, kind, encoding, layers);
        let (c, k) = (cfg.in_channels, cfg.classes);
        let mut net = CodaNet::new(cfg, trial as u64).map_err(err)?;
        let calib: Vec<Tensor> = (0..4).map(|_| random_image(&mut r, c, 16, 16)).collect();
        net.calibrate(&calib).map_err(err)?;
        let image = random_image(&mut r, c, 16, 16);
        let class = r.gen_range(0..k);
        let depth = r.gen_range(0..net.depth());
        let dec = effective_row(&net, &image, class, depth).map_err(err)?;
        let e = dec.relative_error();
        if !(e <= 1e-5) {
            return Err(format!("trial {trial} ({kind}, {encoding:?}, depth {depth}): relative error {e:e}"));
        }
        worst = worst.max(e);
    }
    Ok(format!("100 triples, worst relative error {worst:.2e}"))
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let mut report = Vec::new();
    for kind in RescaleKind::ALL {
        let mut worst_out: Real = 0.0;
        let mut worst_w: Real = 0.0;
        let mut worst_edau: Real = 0.0;
        for i in 0..10_000 {
            let d = r.gen_range(2..=32);
            let rank = r.gen_range(1..=d.min(8));
            let scale = |r: &mut ChaCha8Rng| 10f64.powf(r.gen_range(-3.0..3.0)) as Real;
            let (sa, sb, sx) = (scale(&mut r), scale(&mut r), scale(&mut r));
            let a = Tensor::randn(&[d, rank], &mut r).scaled(sa);
            let b = Tensor::randn(&[rank, d], &mut r).scaled(sb);
            let bias = (kind.allows_bias() && r.gen_bool(0.5)).then(|| Tensor::randn(&[d], &mut r).scaled(sa * sb));
            let x = Tensor::randn(&[d], &mut r).scaled(sx);
            let unit = DauParams::new(a.clone(), b.clone(), bias, kind).map_err(err)?;
            let out = unit.output(x.data()).map_err(err)?;
            let w = unit.weight(x.data()).map_err(err)?;
            let wn = w.iter().map(|v| v * v).sum::<Real>().sqrt();
            let xn = x.norm();
            let ratio_out = out.abs() / xn;
            if !(out.abs() <= xn * (1.0 + 1e-9)) || !(wn <= 1.0 + 1e-9) {
                return Err(format!("{kind} evaluation {i}: |out| / |x| = {ratio_out}, |w| = {wn}"));
            }
            worst_out = worst_out.max(ratio_out);
            worst_w = worst_w.max(wn);
            if kind == RescaleKind::Wb {
                let l2 = DauParams::new(a, b, None, RescaleKind::L2).map_err(err)?;
                let reference = l2.output(x.data()).map_err(err)?;
                if !(out.abs() <= reference.abs() * (1.0 + 1e-9)) {
                    return Err(format!("evaluation {i}: |eDAU| = {} > |DAU_L2| = {}", out.abs(), reference.abs()));
                }
                if reference != 0.0 {
                    worst_edau = worst_edau.max(out.abs() / reference.abs());
                }
            }
        }
        report.push(format!("{kind}: max |out|/|x| {worst_out:.6}, max |w| {worst_w:.6}"));
        if kind == RescaleKind::Wb {
            report.push(format!("max |eDAU|/|DAU_L2| {worst_edau:.6}"));
        }
    }
    Ok(report.join("; "))
}

fn to_dmatrix(t: &Tensor) -> Result<DMatrix<Real>, String> {
    let (rows, cols) = t.dims2().map_err(err)?;
    Ok(DMatrix::from_row_slice(rows, cols, t.data()))
}

fn squeeze(t: &Tensor) -> Tensor {
    t.reshape(&t.shape()[1..]).expect("leading batch axis")
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut worst: Real = 0.0;
    let mut max_dims = 0;
    for trial in 0..20u64 {
        let kind = random_kind(&mut r);
        let layers = r.gen_range(2..=3);
        let cfg = random_config(&mut r, kind, EncodingKind::Six, layers);
        let (c, k) = (cfg.in_channels, cfg.classes);
        let net = CodaNet::new(cfg, 100 + trial).map_err(err)?;
        let image = random_image(&mut r, c, 16, 16);
        let mut product: Option<DMatrix<Real>> = None;
        for t in 0..net.depth() {
            let a = squeeze(&activation_at(&net, &image, t).map_err(err)?);
            if t == 0 {
                max_dims = max_dims.max(a.len());
            }
            let w = to_dmatrix(&net.layers[t].assemble_matrix(&a).map_err(err)?)?;
            product = Some(match product {
                None => w,
                Some(p) => w * p,
            });
        }
        let m = product.expect("at least one layer");
        let positions = m.nrows() / k;
        for class in 0..k {
            let explicit: DVector<Real> = m.rows(class * positions, positions).row_sum().transpose();
            let row = effective_row(&net, &image, class, 0).map_err(err)?.weight_row;
            if row.len() != explicit.len() {
                return Err(format!("trial {trial}: row length {} vs {}", row.len(), explicit.len()));
            }
            let dev = row.data().iter().zip(explicit.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, Real::max);
            worst = worst.max(dev);
        }
    }
    if max_dims > 10_000 {
        return Err(format!("input dimension {max_dims} above 10^4"));
    }
    if worst <= 1e-6 {
        Ok(format!("20 nets, max input dims {max_dims}, max abs deviation {worst:.2e}"))
    } else {
        Err(format!("max abs deviation {worst:.2e}"))
    }
}

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let mut worst: Real = 0.0;
    for trial in 0..20 {
        let kind = random_kind(&mut r);
        let c = r.gen_range(1..=4);
        let kernel = r.gen_range(1..=3);
        let layer = CodaConvLayer::init(
            c,
            r.gen_range(2..=5),
            (kernel, kernel),
            r.gen_range(1..=2),
            r.gen_range(0..=1),
            r.gen_range(1..=4),
            kind,
            kind != RescaleKind::Wb && r.gen_bool(0.5),
            &mut r,
        )
        .map_err(err)?;
        let (h, w) = (r.gen_range(4..=9), r.gen_range(4..=9));
        let x = Tensor::randn(&[c, h, w], &mut r);
        let y = layer.forward(&x).map_err(err)?;
        let m = layer.assemble_matrix(&x).map_err(err)?;
        let mx = m.matmul(&x.reshape(&[x.len(), 1]).map_err(err)?).map_err(err)?;
        if mx.len() != y.len() {
            return Err(format!("layer {trial}: {} outputs vs {}", y.len(), mx.len()));
        }
        let dev = y.data().iter().zip(mx.data()).map(|(a, b)| (a - b).abs()).fold(0.0, Real::max);
        worst = worst.max(dev);
    }
    if worst <= 1e-6 {
        Ok(format!("20 layers, max abs deviation {worst:.2e}"))
    } else {
        Err(format!("max abs deviation {worst:.2e}"))
    }
}

/// Worst per-tensor relative error between the recorded parameter
/// gradients and central differences of the loss.
fn net_gradient_error(net: &mut CodaNet, images: &Tensor, targets: &Tensor) -> Result<Real, String> {
    net.zero_grad();
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let vars = net.bind(&mut g, true);
    let trace = net.record(&mut g, x, &vars).map_err(err)?;
    let loss = net.record_loss(&mut g, trace.logits, targets).map_err(err)?;
    let grads = g.backward(loss).map_err(err)?;
    net.accumulate(&grads, &vars).map_err(err)?;
    let analytic: Vec<Tensor> = net.params().iter().map(|p| p.grad.clone()).collect();
    let h: Real = 1e-5;
    let mut worst: Real = 0.0;
    for (pi, auto) in analytic.iter().enumerate() {
        let mut fd = vec![0.0; auto.len()];
        for (j, f) in fd.iter_mut().enumerate() {
            let orig = net.params()[pi].value.data()[j];
            net.params_mut()[pi].value.data_mut()[j] = orig + h;
            let plus = net.loss(images, targets).map_err(err)?;
            net.params_mut()[pi].value.data_mut()[j] = orig - h;
            let minus = net.loss(images, targets).map_err(err)?;
            net.params_mut()[pi].value.data_mut()[j] = orig;
            *f = (plus - minus) / (2.0 * h);
        }
        let diff = auto.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<Real>().sqrt();
        let scale = auto.norm().max(fd.iter().map(|v| v * v).sum::<Real>().sqrt()).max(1e-8);
        worst = worst.max(diff / scale);
    }
    net.zero_grad();
    Ok(worst)
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let mut worst: Real = 0.0;
    let mut nets = 0;
    for kind in RescaleKind::ALL {
        for encoding in ENCODINGS {
            for (hybrid, shared) in [(false, None), (false, Some(false)), (true, None)] {
                if kind == RescaleKind::Wb && shared.is_some() {
                    continue;
                }
                let mut cfg = NetConfig::default_for(2, 7, 7, 3, kind);
                cfg.encoding = encoding;
                cfg.embed_channels = 3;
                cfg.stem_channels = 3;
                cfg.shared_b = shared;
                cfg.temperature = 2.0;
                cfg.layers = vec![
                    LayerSpec { kernel: 3, stride: 1, padding: 0, rank: 2, out_channels: 3 },
                    LayerSpec { kernel: 3, stride: 1, padding: 0, rank: 2, out_channels: 3 },
                ];
                if hybrid {
                    cfg = cfg.hybrid(1, 2);
                }
                let mut net = CodaNet::new(cfg, nets).map_err(err)?;
                let images: Vec<Tensor> = (0..2).map(|_| random_image(&mut r, 2, 7, 7)).collect();
                net.calibrate(&images).map_err(err)?;
                let x = stack(&images).map_err(err)?;
                let targets = one_hot(&[r.gen_range(0..3), r.gen_range(0..3)], 3).map_err(err)?;
                let e = net_gradient_error(&mut net, &x, &targets)?;
                if !(e <= 1e-4) {
                    return Err(format!("{kind} {encoding:?} hybrid={hybrid} shared={shared:?}: relative error {e:e}"));
                }
                worst = worst.max(e);
                nets += 1;
            }
        }
    }
    Ok(format!("{nets} nets, every parameter, worst relative error {worst:.2e}"))
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/evdemo.txt")
}

fn parse_golden(text: &str) -> HashMap<String, Vec<Real>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            let key = it.next()?.to_string();
            Some((key, it.filter_map(|v| v.parse().ok()).collect()))
        })
        .collect()
}

/// Cosines of the templates with the top singular subspace of the raw
/// sample matrix, the subspace an ideal alignment fit would reach.
fn brute_force_cosines(templates: &[Tensor], cfg: &EvDemoConfig) -> Vec<Real> {
    let set = make_noisy_templates(templates, cfg.samples, cfg.sigma, cfg.seed);
    let d = templates[0].len();
    let mut gram = DMatrix::<Real>::zeros(d, d);
    let x = DMatrix::from_fn(set.samples.len(), d, |i, j| set.samples[i][j]);
    gram.gemm_tr(1.0, &x, &x, 0.0);
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis = DMatrix::from_fn(d, cfg.rank, |i, j| eig.eigenvectors[(i, order[j])]);
    templates
        .iter()
        .map(|t| coda_core::dau::subspace_cosine(t.data(), &basis))
        .collect()
}

fn criterion_6() -> Outcome {
    let set = mnist()?;
    let templates: Vec<Tensor> = [0, 1, 2]
        .iter()
        .map(|&c| {
            let i = set.labels.iter().position(|&l| l == c).expect("class present");
            set.images[i].clone()
        })
        .collect();
    let cfg = EvDemoConfig::default();
    let result = run_evdemo(&templates, &cfg).map_err(err)?;
    let oracle = brute_force_cosines(&templates, &cfg);
    let fmt = |v: &[Real]| v.iter().map(|x| format!("{x:.10}")).collect::<Vec<_>>().join(" ");
    if std::env::var_os("CODA_BLESS").is_some() {
        let text = format!(
            "# rank-3 L2 unit, 3072 samples, sigma 0.5, 200 steps, lr 1, first image of digits 0-2\nseed {}\ncosines {}\noracle {}\n",
            cfg.seed,
            fmt(&result.cosines),
            fmt(&oracle)
        );
        std::fs::create_dir_all(golden_path().parent().expect("parent")).map_err(err)?;
        std::fs::write(golden_path(), text).map_err(err)?;
    }
    let golden = parse_golden(&std::fs::read_to_string(golden_path()).map_err(|e| format!("golden file: {e}"))?);
    if golden.get("seed") != Some(&vec![cfg.seed as Real]) {
        return Err("golden file was recorded with a different seed".into());
    }
    let expected = golden.get("cosines").cloned().unwrap_or_default();
    let drift = expected
        .iter()
        .zip(&result.cosines)
        .map(|(a, b)| (a - b).abs())
        .fold(if expected.len() == 3 { 0.0 } else { Real::INFINITY }, Real::max);
    let detail = format!(
        "cosines [{}], brute-force oracle [{}], golden drift {drift:.1e}",
        fmt(&result.cosines),
        fmt(&oracle)
    );
    if result.min_cosine() >= 0.9 && drift <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7() -> Outcome {
    let mut r = rng(7);
    let (n, tile) = (3, 4);
    let side = n * tile;
    let blank = Tensor::zeros(&[1, tile, tile]);
    let mut random_scores = Vec::new();
    let mut delta_worst: Real = 1.0;
    for _ in 0..1000 {
        let mut classes: Vec<usize> = (0..10).collect();
        classes.shuffle(&mut r);
        let tiles: Vec<(usize, usize)> = classes[..n * n].iter().enumerate().map(|(i, &c)| (i, c)).collect();
        let grid = GridTask::from_images(n, &vec![&blank; n * n], tiles).map_err(err)?;
        let noise: Vec<Real> = (0..side * side).map(|_| r.gen_range(0.0..1.0)).collect();
        let map = SpatialContributionMap::new(side, side, noise).map_err(err)?;
        for class in grid.classes().collect::<Vec<_>>() {
            random_scores.push(localisation_score(&map, &grid, class).map_err(err)?);
            let t = grid.tile_of(class).expect("class in grid");
            let (y, x) = ((t / n) * tile + r.gen_range(0..tile), (t % n) * tile + r.gen_range(0..tile));
            let mut delta = vec![0.0; side * side];
            delta[y * side + x] = r.gen_range(0.1..10.0);
            let delta = SpatialContributionMap::new(side, side, delta).map_err(err)?;
            delta_worst = delta_worst.min(localisation_score(&delta, &grid, class).map_err(err)?);
        }
    }
    let mean = random_scores.iter().sum::<Real>() / random_scores.len() as Real;
    let detail = format!("random mean {mean:.4} (target {:.4}), delta minimum {delta_worst}", 1.0 / 9.0);
    if (mean - 1.0 / 9.0).abs() <= 0.02 && delta_worst == 1.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn adam(epochs: usize, lr: Real) -> TrainConfig {
    TrainConfig {
        optimizer: Optimizer::Adam,
        epochs,
        lr,
        ..Default::default()
    }
}

fn criterion_8() -> Outcome {
    let classes = [0, 1, 2, 3];
    let (train_set, test_set) = subset(&classes, 100)?;
    let study = TemperatureStudy {
        net: NetConfig::default_for(1, 28, 28, classes.len(), RescaleKind::Sq),
        train: adam(10, 0.003),
        temperatures: vec![10.0, 1000.0],
        seeds: vec![0, 1, 2],
        grid_n: 2,
        grids: 30,
        pool: 30,
    };
    let rows = temperature_study(&study, &train_set, &test_set).map_err(err)?;
    let by_t = localisation_by_temperature(&rows);
    let get = |t: Real| by_t.iter().find(|(x, _)| *x == t).map(|p| p.1).unwrap_or(Real::NAN);
    let (low, high) = (get(10.0), get(1000.0));
    let accs: Vec<String> = rows
        .iter()
        .map(|r| format!("T={} s{} {:.3}", r.temperature, r.seed, r.accuracy))
        .collect();
    let detail = format!(
        "localisation T=10 {low:.4}, T=1000 {high:.4}, gain {:.4}; accuracy {}",
        high - low,
        accs.join(", ")
    );
    if high - low >= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Learned {
    net: CodaNet,
    test: LabeledImageSet,
    accuracy: Real,
}

fn learn(hybrid: bool) -> Result<Learned, String> {
    let (train_set, test) = subset(&LEARN_CLASSES, LEARN_PER_CLASS)?;
    let cfg = NetConfig::default_for(1, 28, 28, LEARN_CLASSES.len(), RescaleKind::Wb);
    let mut net = if hybrid {
        CodaNet::build_hybrid(2, 2, cfg, 0)
    } else {
        CodaNet::new(cfg, 0)
    }
    .map_err(err)?;
    train(&mut net, &train_set.images, &train_set.labels, &adam(LEARN_EPOCHS, LEARN_LR)).map_err(err)?;
    let accuracy = accuracy(&net, &test.images, &test.labels).map_err(err)?;
    Ok(Learned { net, test, accuracy })
}

fn criterion_9(pure: &mut Option<Learned>) -> Outcome {
    if pure.is_none() {
        *pure = Some(learn(false)?);
    }
    let learned = pure.as_ref().expect("trained above");
    let count = learned.test.len().min(300);
    if count < 200 {
        return Err(format!("only {count} test images"));
    }
    let images = &learned.test.images[..count];
    let targets = &learned.test.labels[..count];
    let fractions: Vec<Real> = (0..=5).map(|i| i as Real / 10.0).collect();
    let curve = |order| pixel_removal_curve(&learned.net, images, targets, AttributionMethod::Inherent, order, &fractions, 9);
    let least = curve(RemovalOrder::LeastFirst).map_err(err)?;
    let random = curve(RemovalOrder::Random).map_err(err)?;
    let pairs: Vec<String> = least
        .mean_confidence
        .iter()
        .zip(&random.mean_confidence)
        .map(|(a, b)| format!("{a:.3}/{b:.3}"))
        .collect();
    let detail = format!("{count} images, least-first/random at 0..0.5: {}", pairs.join(" "));
    if least.mean_confidence.iter().zip(&random.mean_confidence).all(|(a, b)| a >= b) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_10(pure: &mut Option<Learned>) -> Outcome {
    if pure.is_none() {
        *pure = Some(learn(false)?);
    }
    let pure_acc = pure.as_ref().expect("trained above").accuracy;
    let hybrid_acc = learn(true)?.accuracy;
    let detail = format!(
        "pure {:.2}% (>= 95), hybrid K=2/M=2 {:.2}% (>= 90), {LEARN_EPOCHS} epochs",
        100.0 * pure_acc,
        100.0 * hybrid_acc
    );
    if pure_acc >= 0.95 && hybrid_acc >= 0.90 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = NetConfig::default_for(1, 28, 28, 10, RescaleKind::L2);
    let results = bench_all(&config, &[1, 16, 128], 10, 3, 0).map_err(err)?;
    let path = dir.path().join("bench.csv");
    write_bench_csv(&path, &results).map_err(err)?;
    let text = std::fs::read_to_string(&path).map_err(err)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("missing CSV header".into());
    }
    let mut peaks = HashMap::new();
    let mut rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != CSV_HEADER.split(',').count() || fields[1..].iter().any(|f| f.parse::<f64>().is_err()) {
            return Err(format!("malformed row {line:?}"));
        }
        peaks.insert((fields[0].to_string(), fields[1].to_string()), fields[4].parse::<f64>().map_err(err)?);
        rows += 1;
    }
    for kind in RescaleKind::ALL {
        for batch in [1, 16, 128] {
            if !peaks.contains_key(&(kind.to_string(), batch.to_string())) {
                return Err(format!("no row for {kind} at batch {batch}"));
            }
        }
    }
    let peak = |k: &str| peaks[&(k.to_string(), "128".to_string())];
    let (wb, l2, sq) = (peak("wb"), peak("l2"), peak("sq"));
    let detail = format!(
        "{rows} rows; peak at batch 128: wb {:.1} MB, l2 {:.1} MB, sq {:.1} MB",
        wb / 1e6,
        l2 / 1e6,
        sq / 1e6
    );
    if rows == 9 && wb < l2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// History CSV plus localisation and removal CSVs of one small run.
fn deterministic_run(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let classes = [0, 1, 2, 3];
    let (train_set, test) = subset(&classes, 20)?;
    let mut net = CodaNet::new(NetConfig::default_for(1, 28, 28, 4, RescaleKind::Wb), 12).map_err(err)?;
    let cfg = TrainConfig {
        batch_size: 16,
        seed: 12,
        ..adam(2, 0.003)
    };
    let history = train_with_eval(&mut net, &train_set.images, &train_set.labels, &cfg, Some((&test.images, &test.labels)))
        .map_err(err)?;
    let hist: String = history.iter().map(|h| h.csv_row() + "\n").collect();
    let (_, grids) = compose_grids(&test, &net, 2, 5, 5, 12).map_err(err)?;
    let rows = evaluate_localisation(&net, &grids, AttributionMethod::Inherent).map_err(err)?;
    let loc = dir.join("localisation.csv");
    write_localisation_csv(&loc, &rows).map_err(err)?;
    let fractions = [0.0, 0.25, 0.5];
    let curves = [RemovalOrder::LeastFirst, RemovalOrder::Random]
        .into_iter()
        .map(|o| pixel_removal_curve(&net, &test.images[..20], &test.labels[..20], AttributionMethod::Inherent, o, &fractions, 12))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let rem = dir.join("removal.csv");
    write_removal_csv(&rem, &curves).map_err(err)?;
    let params: Vec<u8> = net
        .params()
        .iter()
        .flat_map(|p| p.value.data().iter().flat_map(|v| v.to_bits().to_le_bytes()).collect::<Vec<_>>())
        .collect();
    Ok(vec![
        hist.into_bytes(),
        std::fs::read(loc).map_err(err)?,
        std::fs::read(rem).map_err(err)?,
        params,
    ])
}

fn criterion_12() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let first = deterministic_run(a.path())?;
    let second = deterministic_run(b.path())?;
    let names = ["history", "localisation csv", "removal csv", "parameters"];
    let differing: Vec<&str> = names.iter().zip(first.iter().zip(&second)).filter(|(_, (x, y))| x != y).map(|(n, _)| *n).collect();
    if differing.is_empty() {
        Ok(format!("two runs bit-identical: {}", names.join(", ")))
    } else {
        Err(format!("differ: {}", differing.join(", ")))
    }
}

fn main() {
    if std::mem::size_of::<Real>() != 8 {
        println!("acceptance criteria are defined at 64-bit precision; skipped");
        return;
    }
    let selected: Option<Vec<usize>> = std::env::var("CODA_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().map_or(true, |s| s.contains(&n));
    let mut pure = None;
    let mut failures = 0;
    let budgets: [(usize, &str, u64); 12] = [
        (1, "completeness of decomposition", 120),
        (2, "bound invariants", 60),
        (3, "collapse oracle", 300),
        (4, "conv-as-matrix oracle", 60),
        (5, "gradient checks", 300),
        (6, "eigenvector recovery", 600),
        (7, "metric calibration", 60),
        (8, "temperature trend", 1800),
        (9, "removal trend", 1800),
        (10, "desk-scale learning", 2400),
        (11, "bench harness", 600),
        (12, "determinism", 600),
    ];
    for (n, name, budget) in budgets {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(),
            8 => criterion_8(),
            9 => criterion_9(&mut pure),
            10 => criterion_10(&mut pure),
            11 => criterion_11(),
            _ => criterion_12(),
        };
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > Duration::from_secs(budget) => Err(format!("{d}; over the {budget}s budget")),
            o => o,
        };
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if outcome.is_err() {
            failures += 1;
        }
        println!("criterion {n:>2}: {status} {name} ({detail}; {:.1}s)", elapsed.as_secs_f64());
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
