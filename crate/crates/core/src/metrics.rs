//! Quantitative interpretability protocol: grid localisation and pixel
//! removal curves, plus the temperature sweep that combines them with
//! training.

use crate::data::LabeledImageSet;
use crate::decomposition::{attribute, logits_from_input, model_input, AttributionMethod, SpatialContributionMap};
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::net::train::{accuracy, train, TrainConfig};
use crate::net::{CodaNet, NetConfig};
use crate::tensor::{sigmoid, Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// An `n x n` tiling of images of distinct classes.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTask {
    pub n: usize,
    /// `(index into the pool set, class)` in row-major tile order.
    pub tiles: Vec<(usize, usize)>,
    pub composite: Tensor,
    pub tile_h: usize,
    pub tile_w: usize,
}

impl GridTask {
    /// Tiles `images` (row-major, `n * n` of them) into one image.
    pub fn from_images(n: usize, images: &[&Tensor], tiles: Vec<(usize, usize)>) -> Result<Self> {
        if n == 0 || images.len() != n * n || tiles.len() != n * n {
            return dim_err(format!("a {n}x{n} grid needs {} images", n * n));
        }
        let [c, h, w] = images[0].shape()[..] else {
            return dim_err(format!("expected [C, H, W] tiles, got {:?}", images[0].shape()));
        };
        let (gh, gw) = (n * h, n * w);
        let mut data = vec![0.0; c * gh * gw];
        for (t, im) in images.iter().enumerate() {
            if im.shape() != [c, h, w] {
                return dim_err("grid tiles must share one shape");
            }
            let (ty, tx) = (t / n, t % n);
            for ch in 0..c {
                for y in 0..h {
                    let src = &im.data()[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                    let dst = ch * gh * gw + (ty * h + y) * gw + tx * w;
                    data[dst..dst + w].copy_from_slice(src);
                }
            }
        }
        Ok(Self {
            n,
            tiles,
            composite: Tensor::new(&[c, gh, gw], data)?,
            tile_h: h,
            tile_w: w,
        })
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.tiles.iter().map(|t| t.1)
    }

    /// Row-major tile index of `class`.
    pub fn tile_of(&self, class: usize) -> Option<usize> {
        self.tiles.iter().position(|t| t.1 == class)
    }
}

/// Builds `count` grids whose tiles come from the `pool` most confidently
/// classified images of each class.
pub fn compose_grids(
    set: &LabeledImageSet,
    net: &CodaNet,
    n: usize,
    count: usize,
    pool: usize,
    seed: u64,
) -> Result<(LabeledImageSet, Vec<GridTask>)> {
    if n == 0 {
        return config_err("grid side must be at least 1");
    }
    let confident = set.subset_by_confidence(net, pool)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.classes];
    for (i, &l) in confident.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let available: Vec<usize> = (0..set.classes).filter(|&c| !by_class[c].is_empty()).collect();
    if available.len() < n * n {
        return contract_err(format!(
            "a {n}x{n} grid needs {} classes with images, only {} available",
            n * n,
            available.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grids = Vec::with_capacity(count);
    for _ in 0..count {
        let classes: Vec<usize> = available.choose_multiple(&mut rng, n * n).copied().collect();
        let tiles: Vec<(usize, usize)> = classes
            .iter()
            .map(|&c| (*by_class[c].choose(&mut rng).expect("non-empty"), c))
            .collect();
        let imgs: Vec<&Tensor> = tiles.iter().map(|&(i, _)| &confident.images[i]).collect();
        grids.push(GridTask::from_images(n, &imgs, tiles)?);
    }
    Ok((confident, grids))
}

/// Share of the positive attribution mass that falls in the tile of
/// `class`. A map without positive mass scores `1 / n^2`.
pub fn localisation_score(map: &SpatialContributionMap, grid: &GridTask, class: usize) -> Result<Real> {
    let (h, w) = (grid.composite.shape()[1], grid.composite.shape()[2]);
    if (map.height, map.width) != (h, w) {
        return dim_err(format!(
            "attribution map {}x{} does not match the {h}x{w} grid",
            map.height, map.width
        ));
    }
    let Some(tile) = grid.tile_of(class) else {
        return contract_err(format!("class {class} is not part of the grid"));
    };
    let (ty, tx) = (tile / grid.n, tile % grid.n);
    let mut inside = 0.0;
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = map.at(y, x).max(0.0);
            total += v;
            if y / grid.tile_h == ty && x / grid.tile_w == tx {
                inside += v;
            }
        }
    }
    if total > 0.0 {
        Ok(inside / total)
    } else {
        Ok(1.0 / (grid.n * grid.n) as Real)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalisationRow {
    pub grid_id: usize,
    pub class: usize,
    pub method: String,
    pub score: Real,
}

/// Scores `method` on every class of every grid. Grids are processed in
/// parallel; rows keep grid order.
pub fn evaluate_localisation(net: &CodaNet, grids: &[GridTask], method: AttributionMethod) -> Result<Vec<LocalisationRow>> {
    let per_grid: Vec<Result<Vec<LocalisationRow>>> = grids
        .par_iter()
        .enumerate()
        .map(|(gid, grid)| {
            grid.classes()
                .map(|c| {
                    let m = match method {
                        AttributionMethod::Random { seed } => AttributionMethod::Random {
                            seed: seed.wrapping_add(gid as u64 * 7919),
                        },
                        m => m,
                    };
                    let map = attribute(net, &grid.composite, c, m)?;
                    Ok(LocalisationRow {
                        grid_id: gid,
                        class: c,
                        method: method.label(),
                        score: localisation_score(&map, grid, c)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_grid {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Mean and (population) standard deviation.
pub fn mean_std(v: &[Real]) -> (Real, Real) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<Real>() / v.len() as Real;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<Real>() / v.len() as Real;
    (m, var.sqrt())
}

pub fn write_localisation_csv(path: impl AsRef<Path>, rows: &[LocalisationRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "grid_id,class,method,score")?;
    for r in rows {
        writeln!(f, "{},{},{},{:e}", r.grid_id, r.class, r.method, r.score)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalOrder {
    LeastFirst,
    MostFirst,
    Random,
}

impl std::fmt::Display for RemovalOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RemovalOrder::LeastFirst => "least_first",
            RemovalOrder::MostFirst => "most_first",
            RemovalOrder::Random => "random",
        })
    }
}

impl std::str::FromStr for RemovalOrder {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "least_first" | "least" => Ok(RemovalOrder::LeastFirst),
            "most_first" | "most" => Ok(RemovalOrder::MostFirst),
            "random" => Ok(RemovalOrder::Random),
            _ => config_err(format!("unknown removal order '{s}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalCurve {
    pub method: String,
    pub order: RemovalOrder,
    pub fractions: Vec<Real>,
    pub mean_confidence: Vec<Real>,
    /// Per image and fraction, `sigma(logit_target)`; row-major by image.
    pub per_image: Vec<Vec<Real>>,
}

/// Pixel positions in removal order. Ties keep ascending index order.
pub fn removal_order(map: &SpatialContributionMap, order: RemovalOrder, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..map.values.len()).collect();
    match order {
        RemovalOrder::LeastFirst => idx.sort_by(|&a, &b| map.values[a].total_cmp(&map.values[b])),
        RemovalOrder::MostFirst => idx.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a])),
        RemovalOrder::Random => idx.shuffle(rng),
    }
    idx
}

/// Confidence of the target class as growing fractions of model-input
/// positions (all channels) are zeroed in the given order.
pub fn pixel_removal_curve(
    net: &CodaNet,
    images: &[Tensor],
    targets: &[usize],
    method: AttributionMethod,
    order: RemovalOrder,
    fractions: &[Real],
    seed: u64,
) -> Result<RemovalCurve> {
    if images.len() != targets.len() {
        return dim_err(format!("{} images but {} targets", images.len(), targets.len()));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || fractions.windows(2).any(|w| w[0] > w[1]) {
        return config_err("fractions must be ascending within [0, 1]");
    }
    let per_image: Vec<Result<Vec<Real>>> = images
        .par_iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (im, &t))| {
            let e = model_input(net, im)?;
            let [_, c, h, w] = e.shape()[..] else {
                return dim_err("model input must be 4-d");
            };
            let m = match method {
                AttributionMethod::Random { seed: s } => AttributionMethod::Random {
                    seed: s.wrapping_add(i as u64),
                },
                m => m,
            };
            let map = attribute(net, im, t, m)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let ord = removal_order(&map, order, &mut rng);
            let mut batch = Vec::with_capacity(fractions.len() * e.len());
            for &f in fractions {
                let k = (f * (h * w) as Real).round() as usize;
                let mut d = e.data().to_vec();
                for &p in &ord[..k.min(h * w)] {
                    for ch in 0..c {
                        d[ch * h * w + p] = 0.0;
                    }
                }
                batch.extend(d);
            }
            let logits = logits_from_input(net, &Tensor::new(&[fractions.len(), c, h, w], batch)?)?;
            Ok((0..fractions.len()).map(|j| sigmoid(logits.at(&[j, t]))).collect())
        })
        .collect();
    let per_image: Vec<Vec<Real>> = per_image.into_iter().collect::<Result<_>>()?;
    let n = per_image.len().max(1) as Real;
    let mean_confidence = (0..fractions.len())
        .map(|j| per_image.iter().map(|r| r[j]).sum::<Real>() / n)
        .collect();
    Ok(RemovalCurve {
        method: method.label(),
        order,
        fractions: fractions.to_vec(),
        mean_confidence,
        per_image,
    })
}

pub fn write_removal_csv(path: impl AsRef<Path>, curves: &[RemovalCurve]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "method,order,fraction,mean_confidence")?;
    for c in curves {
        for (fr, m) in c.fractions.iter().zip(&c.mean_confidence) {
            writeln!(f, "{},{},{},{:e}", c.method, c.order, fr, m)?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Settings of a temperature sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureStudy {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub temperatures: Vec<Real>,
    pub seeds: Vec<u64>,
    pub grid_n: usize,
    pub grids: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRow {
    pub temperature: Real,
    pub seed: u64,
    pub accuracy: Real,
    pub localisation: Real,
}

/// Trains one network per (temperature, seed) on `train_set`, then reports
/// test accuracy and the mean localisation of the inherent contributions on
/// grids built from `test_set`.
pub fn temperature_study(
    study: &TemperatureStudy,
    train_set: &LabeledImageSet,
    test_set: &LabeledImageSet,
) -> Result<Vec<TemperatureRow>> {
    if study.temperatures.is_empty() {
        return config_err("at least one temperature is required");
    }
    let mut rows = Vec::new();
    for &t in &study.temperatures {
        for &seed in &study.seeds {
            let mut cfg = study.net.clone();
            cfg.temperature = t;
            let mut net = CodaNet::new(cfg, seed)?;
            let tc = TrainConfig {
                seed,
                ..study.train.clone()
            };
            train(&mut net, &train_set.images, &train_set.labels, &tc)?;
            let acc = accuracy(&net, &test_set.images, &test_set.labels)?;
            let (_, grids) = compose_grids(test_set, &net, study.grid_n, study.grids, study.pool, seed)?;
            let scores: Vec<Real> = evaluate_localisation(&net, &grids, AttributionMethod::Inherent)?
                .iter()
                .map(|r| r.score)
                .collect();
            rows.push(TemperatureRow {
                temperature: t,
                seed,
                accuracy: acc,
                localisation: mean_std(&scores).0,
            });
            log::info!("temperature {t} seed {seed}: {:?}", rows.last());
        }
    }
    Ok(rows)
}

pub fn write_temperature_csv(path: impl AsRef<Path>, rows: &[TemperatureRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "temperature,seed,accuracy,localisation")?;
    for r in rows {
        writeln!(f, "{},{},{:e},{:e}", r.temperature, r.seed, r.accuracy, r.localisation)?;
    }
    f.flush()?;
    Ok(())
}

/// Mean localisation per temperature, in first-appearance order.
pub fn localisation_by_temperature(rows: &[TemperatureRow]) -> Vec<(Real, Real)> {
    let mut temps: Vec<Real> = Vec::new();
    for r in rows {
        if !temps.contains(&r.temperature) {
            temps.push(r.temperature);
        }
    }
    temps
        .into_iter()
        .map(|t| {
            let v: Vec<Real> = rows.iter().filter(|r| r.temperature == t).map(|r| r.localisation).collect();
            (t, mean_std(&v).0)
        })
        .collect()
}
