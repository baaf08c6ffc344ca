use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use coda_core::bench::{bench_all, tracking_enabled, write_bench_csv};
use coda_core::data::load_idx;
use coda_core::decomposition::{
    attribute, effective_row, image_to_rgb, stem_input_x_gradient, write_ppm, write_values_csv, AttributionMethod,
    SpatialContributionMap,
};
use coda_core::dau::RescaleKind;
use coda_core::evdemo::{run_evdemo, EvDemoConfig};
use coda_core::metrics::{
    compose_grids, evaluate_localisation, localisation_by_temperature, mean_std, pixel_removal_curve, temperature_study,
    write_localisation_csv, write_removal_csv, write_temperature_csv, RemovalOrder, TemperatureStudy,
};
use coda_core::net::train::{accuracy, train_with_eval, EpochRecord};
use coda_core::net::{CodaNet, NetConfig};
use coda_core::tensor::{Real, PRECISION};
use serde::Serialize;

use crate::config::{
    BenchSettings, ConfigFile, EvDemoSettings, ExplainSettings, PointingSettings, RemovalSettings, TemperatureSettings,
    TrainSettings,
};
use crate::manifest::{hash_file, Manifest};
use crate::{Cli, Command, THREADS_ENV};

/// Bad invocation: unknown class, missing model file and the like. Exits
/// with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<UsageError>()) {
        2
    } else {
        1
    }
}

struct Ctx {
    file: ConfigFile,
    seed: u64,
    out: PathBuf,
    threads: usize,
}

impl Ctx {
    fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }

    fn finish<S: Serialize>(
        &self,
        command: &str,
        settings: &S,
        inputs: &[PathBuf],
        artifacts: &[PathBuf],
    ) -> Result<()> {
        let mut config = toml::Table::new();
        config.insert("seed".into(), toml::Value::Integer(self.seed as i64));
        config.insert("precision".into(), toml::Value::String(PRECISION.into()));
        config.insert(command.into(), toml::Value::Table(toml::Table::try_from(settings)?));
        let manifest = Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            precision: PRECISION.into(),
            seed: self.seed,
            threads: self.threads,
            config,
            inputs: inputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
            artifacts: artifacts.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
        };
        for p in manifest.write(&self.out)? {
            println!("wrote {}", p.display());
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    let seed = match cli.seed {
        Some(s) => s,
        None => file.global("seed")?.unwrap_or(0),
    };
    let precision: String = match cli.precision {
        Some(p) => p,
        None => file.global("precision")?.unwrap_or_else(|| PRECISION.to_string()),
    };
    if precision != PRECISION {
        return usage(format!(
            "this binary computes in {PRECISION}; rebuild {} the `f32` feature for --precision {precision}",
            if precision == "f32" { "with" } else { "without" }
        ));
    }
    let out = match cli.out {
        Some(o) => o,
        None => file.global("out")?.unwrap_or_else(|| PathBuf::from("out")),
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let threads = configure_threads()?;
    let ctx = Ctx {
        file,
        seed,
        out,
        threads,
    };
    match cli.command {
        Command::Train(f) => cmd_train(&ctx, ctx.file.resolve("train", &f)?),
        Command::Explain(f) => cmd_explain(&ctx, ctx.file.resolve("explain", &f)?),
        Command::Pointing(f) => cmd_pointing(&ctx, ctx.file.resolve("pointing", &f)?),
        Command::Removal(f) => cmd_removal(&ctx, ctx.file.resolve("removal", &f)?),
        Command::Temperature(f) => cmd_temperature(&ctx, ctx.file.resolve("temperature", &f)?),
        Command::Evdemo(f) => cmd_evdemo(&ctx, ctx.file.resolve("evdemo", &f)?),
        Command::Bench(f) => cmd_bench(&ctx, ctx.file.resolve("bench", &f)?),
    }
}

fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = match v.trim().parse() {
            Ok(n) if n > 0 => n,
            _ => return usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")),
        };
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

fn load_model(path: &Path) -> Result<CodaNet> {
    if !path.is_file() {
        return usage(format!("model file not found: {}", path.display()));
    }
    CodaNet::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", EpochRecord::CSV_HEADER)?;
    for r in history {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

fn parse_methods(names: &[String], seed: u64) -> Result<Vec<AttributionMethod>> {
    names
        .iter()
        .map(|s| match s.parse::<AttributionMethod>() {
            Ok(AttributionMethod::Random { .. }) => Ok(AttributionMethod::Random { seed }),
            Ok(m) => Ok(m),
            Err(e) => usage(e.to_string()),
        })
        .collect()
}

fn cmd_train(ctx: &Ctx, s: TrainSettings) -> Result<()> {
    let data = s.data.load()?;
    if data.train.is_empty() || data.test.is_empty() {
        return usage("train and test splits must both be non-empty");
    }
    let cfg = s.model.net_config(&data.train)?;
    let mut net = CodaNet::new(cfg, ctx.seed)?;
    let tc = s.optim.train_config(ctx.seed);
    net.calibrate(&data.train.images[..data.train.len().min(tc.batch_size)])?;
    let initial = accuracy(&net, &data.test.images, &data.test.labels)?;
    log::info!(
        "training {} parameters on {} images ({} test), initial test accuracy {initial:.4}",
        net.parameter_count(),
        data.train.len(),
        data.test.len()
    );
    let history = train_with_eval(
        &mut net,
        &data.train.images,
        &data.train.labels,
        &tc,
        Some((&data.test.images, &data.test.labels)),
    )?;
    let final_acc = accuracy(&net, &data.test.images, &data.test.labels)?;
    let model = ctx.path("model.coda");
    net.save(&model)?;
    let hist = ctx.path("history.csv");
    write_history(&hist, &history)?;
    println!("initial test accuracy {initial:.4}");
    if let Some(last) = history.last() {
        println!("final train accuracy {:.4}, loss {:.6}", last.accuracy, last.loss);
    }
    println!("final test accuracy {final_acc:.4}");
    ctx.finish("train", &s, &data.inputs, &[model, hist])
}

fn cmd_explain(ctx: &Ctx, s: ExplainSettings) -> Result<()> {
    let net = load_model(&s.model)?;
    let data = s.data.load()?;
    let Some(image) = data.test.images.get(s.index) else {
        return usage(format!("index {} out of range for {} test images", s.index, data.test.len()));
    };
    let class = s.class.unwrap_or(data.test.labels[s.index]);
    if class >= net.classes() {
        return usage(format!("class {class} out of range for {} classes", net.classes()));
    }
    if s.depth >= net.depth() {
        return usage(format!("depth {} out of range for {} CoDA layers", s.depth, net.depth()));
    }
    let dec = match s.stem_block {
        Some(b) => {
            let k = net.stem.as_ref().map_or(0, |st| st.depth());
            if net.stem.is_none() || b > k {
                return usage(format!("stem block {b} requires a hybrid with at least {b} stem blocks"));
            }
            stem_input_x_gradient(&net, image, class, b)?
        }
        None => effective_row(&net, image, class, s.depth)?,
    };
    let map = dec.spatial()?;
    let heat = ctx.path("heatmap.ppm");
    map.write_ppm(&heat, s.scale)?;
    let spatial = ctx.path("contributions.csv");
    map.write_csv(&spatial)?;
    let full = ctx.path("contributions_full.csv");
    write_values_csv(&full, dec.contributions.data())?;
    let img = ctx.path("image.ppm");
    let [_, h, w] = image.shape()[..] else {
        unreachable!("validated [C, H, W] image")
    };
    write_ppm(&img, w, h, &image_to_rgb(image)?, s.scale)?;
    let residual = dec.reconstructed_logit() - dec.logit;
    println!("class {class} (label {}) at depth {}", data.test.labels[s.index], dec.depth);
    println!("logit              {:.12e}", dec.logit);
    println!("bias part          {:.12e}", dec.bias_part);
    println!("contribution sum   {:.12e}", dec.contribution_sum());
    println!("temperature        {}", dec.temperature);
    println!("sum/T + bias       {:.12e}", dec.reconstructed_logit());
    println!("residual           {residual:.3e} (relative {:.3e})", dec.relative_error());
    ctx.finish("explain", &s, &data.inputs, &[heat, spatial, full, img])
}

fn cmd_pointing(ctx: &Ctx, s: PointingSettings) -> Result<()> {
    let net = load_model(&s.model)?;
    let data = s.data.load()?;
    let methods = parse_methods(&s.methods, ctx.seed)?;
    let (_, grids) = compose_grids(&data.test, &net, s.grid_n, s.grids, s.pool, ctx.seed)?;
    let mut rows = Vec::new();
    let summary = ctx.path("pointing_summary.csv");
    let mut sf = std::io::BufWriter::new(std::fs::File::create(&summary)?);
    writeln!(sf, "method,mean,std,count")?;
    println!("{:<10} {:>8} {:>8}", "method", "mean", "std");
    for &m in &methods {
        let r = evaluate_localisation(&net, &grids, m)?;
        let scores: Vec<Real> = r.iter().map(|x| x.score).collect();
        let (mean, std) = mean_std(&scores);
        println!("{:<10} {:>8.4} {:>8.4}", m.label(), mean, std);
        writeln!(sf, "{},{:e},{:e},{}", m.label(), mean, std, scores.len())?;
        rows.extend(r);
    }
    sf.flush()?;
    drop(sf);
    let scores = ctx.path("localisation.csv");
    write_localisation_csv(&scores, &rows)?;
    let mut artifacts = vec![scores, summary];
    for (gi, grid) in grids.iter().take(s.heatmaps).enumerate() {
        let [_, h, w] = grid.composite.shape()[..] else {
            unreachable!("grid composites are [C, H, W]")
        };
        let p = ctx.path(format!("grid{gi}.ppm"));
        write_ppm(&p, w, h, &image_to_rgb(&grid.composite)?, 4)?;
        artifacts.push(p);
        for &m in &methods {
            for c in grid.classes() {
                let map: SpatialContributionMap = attribute(&net, &grid.composite, c, m)?;
                let p = ctx.path(format!("grid{gi}_{}_c{c}.ppm", m.label().replace(':', "-")));
                map.write_ppm(&p, 4)?;
                artifacts.push(p);
            }
        }
    }
    ctx.finish("pointing", &s, &data.inputs, &artifacts)
}

fn cmd_removal(ctx: &Ctx, s: RemovalSettings) -> Result<()> {
    let net = load_model(&s.model)?;
    let data = s.data.load()?;
    let n = s.count.min(data.test.len());
    let (images, targets) = (&data.test.images[..n], &data.test.labels[..n]);
    let methods = parse_methods(&s.methods, ctx.seed)?;
    let orders: Vec<RemovalOrder> = s
        .orders
        .iter()
        .map(|o| o.parse().or_else(|e: coda_core::Error| usage(e.to_string())))
        .collect::<Result<_>>()?;
    let mut curves = Vec::new();
    for &order in &orders {
        if order == RemovalOrder::Random {
            // The order ignores the attribution, so one curve suffices.
            let m = AttributionMethod::Random { seed: ctx.seed };
            curves.push(pixel_removal_curve(&net, images, targets, m, order, &s.fractions, ctx.seed)?);
            continue;
        }
        for &m in &methods {
            curves.push(pixel_removal_curve(&net, images, targets, m, order, &s.fractions, ctx.seed)?);
        }
    }
    for c in &curves {
        let cells: Vec<String> = c.mean_confidence.iter().map(|v| format!("{v:.3}")).collect();
        println!("{:<9} {:<11} {}", c.method, c.order, cells.join(" "));
    }
    let path = ctx.path("removal.csv");
    write_removal_csv(&path, &curves)?;
    ctx.finish("removal", &s, &data.inputs, &[path])
}

fn cmd_temperature(ctx: &Ctx, s: TemperatureSettings) -> Result<()> {
    let data = s.data.load()?;
    let net: NetConfig = s.model.net_config(&data.train)?;
    let study = TemperatureStudy {
        net,
        train: s.optim.train_config(ctx.seed),
        temperatures: s.temperatures.clone(),
        seeds: s.seeds.clone(),
        grid_n: s.grid_n,
        grids: s.grids,
        pool: s.pool,
    };
    let rows = temperature_study(&study, &data.train, &data.test)?;
    let path = ctx.path("temperature.csv");
    write_temperature_csv(&path, &rows)?;
    for (t, loc) in localisation_by_temperature(&rows) {
        let acc: Vec<Real> = rows.iter().filter(|r| r.temperature == t).map(|r| r.accuracy).collect();
        println!("T={t:<8} accuracy {:.4} localisation {loc:.4}", mean_std(&acc).0);
    }
    ctx.finish("temperature", &s, &data.inputs, &[path])
}

fn cmd_evdemo(ctx: &Ctx, s: EvDemoSettings) -> Result<()> {
    let set = load_idx(&s.images, &s.labels)
        .with_context(|| format!("loading {} / {}", s.images.display(), s.labels.display()))?;
    let mut templates = Vec::new();
    for &c in &s.classes {
        match set.labels.iter().position(|&l| l == c) {
            Some(i) => templates.push(set.images[i].clone()),
            None => return usage(format!("no image of class {c}")),
        }
    }
    let cfg = EvDemoConfig {
        samples: s.samples,
        sigma: s.sigma,
        rank: s.rank,
        steps: s.steps,
        lr: s.lr,
        rescale: s.rescale,
        seed: ctx.seed,
    };
    let r = run_evdemo(&templates, &cfg)?;
    let shape = templates[0].shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut artifacts = Vec::new();
    let csv = ctx.path("evdemo.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv)?);
    writeln!(f, "template,class,cosine")?;
    for (i, (c, cos)) in s.classes.iter().zip(&r.cosines).enumerate() {
        writeln!(f, "{i},{c},{cos:e}")?;
        println!("template {i} (class {c}): cosine {cos:.4}");
    }
    f.flush()?;
    drop(f);
    artifacts.push(csv);
    let sv = ctx.path("singular_values.csv");
    write_values_csv(&sv, &r.singular_values)?;
    artifacts.push(sv);
    let hist = ctx.path("objective.csv");
    write_values_csv(&hist, &r.history)?;
    artifacts.push(hist);
    for (i, t) in templates.iter().enumerate() {
        let p = ctx.path(format!("template{i}.ppm"));
        write_ppm(&p, w, h, &image_to_rgb(t)?, s.scale)?;
        artifacts.push(p);
    }
    for (j, v) in r.basis_images(&shape)?.iter().enumerate() {
        let map = SpatialContributionMap::from_channels(v)?;
        let p = ctx.path(format!("singular{j}.ppm"));
        map.write_ppm(&p, s.scale)?;
        artifacts.push(p);
    }
    println!("minimum cosine {:.4}", r.min_cosine());
    ctx.finish("evdemo", &s, &[s.images.clone(), s.labels.clone()], &artifacts)
}

fn cmd_bench(ctx: &Ctx, s: BenchSettings) -> Result<()> {
    if !tracking_enabled() {
        log::warn!("allocation tracking is not active; peak_bytes will read 0");
    }
    let mut cfg = NetConfig::default_for(s.channels, s.height, s.width, s.classes, RescaleKind::L2);
    cfg.validate()?;
    cfg.shared_b = None;
    // Timings are taken on a single worker thread.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let results = pool.install(|| bench_all(&cfg, &s.batch_sizes, s.reps, s.warmup, ctx.seed))?;
    println!("{}", coda_core::bench::CSV_HEADER);
    for r in &results {
        println!("{}", r.csv_row());
    }
    let path = ctx.path("bench.csv");
    write_bench_csv(&path, &results)?;
    ctx.finish("bench", &s, &[], &[path])
}
