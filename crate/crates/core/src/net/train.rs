//! Mini-batch SGD with momentum and cosine learning-rate decay.

use super::{one_hot, stack, CodaNet, InputEncoding};
use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::tensor::{Graph, Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Heavy-ball momentum: `v = mu v + g; p -= lr v`.
    Sgd,
    /// Adam with `beta1 = momentum`, `beta2 = 0.999`, `eps = 1e-8`.
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => config_err(format!("unknown optimizer '{s}' (expected sgd or adam)")),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    /// Images per recorded graph; gradients of a batch are accumulated over
    /// micro-batches to bound memory.
    pub micro_batch: usize,
    pub lr: Real,
    pub momentum: Real,
    /// Cosine decay from `lr` to zero over all steps; constant otherwise.
    pub cosine: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            epochs: 20,
            batch_size: 64,
            micro_batch: 16,
            lr: 0.003,
            momentum: 0.9,
            cosine: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the last step of the epoch.
    pub lr: Real,
    /// Mean training loss over the epoch.
    pub loss: Real,
    /// Training accuracy from the forward passes of the epoch.
    pub accuracy: Real,
    pub eval_accuracy: Option<Real>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,loss,accuracy,eval_accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{}",
            self.epoch,
            self.lr,
            self.loss,
            self.accuracy,
            self.eval_accuracy.map_or(String::new(), |a| format!("{a:e}"))
        )
    }
}

fn validate(cfg: &TrainConfig) -> Result<()> {
    if cfg.batch_size == 0 || cfg.micro_batch == 0 {
        return config_err("batch sizes must be at least 1");
    }
    if !(cfg.lr >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return config_err(format!("invalid lr {} / momentum {}", cfg.lr, cfg.momentum));
    }
    Ok(())
}

/// Trains `net` in place; returns one record per epoch.
pub fn train(net: &mut CodaNet, images: &[Tensor], labels: &[usize], cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    train_with_eval(net, images, labels, cfg, None)
}

/// [`train`], additionally measuring accuracy on `eval` after every epoch.
pub fn train_with_eval(
    net: &mut CodaNet,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
    eval: Option<(&[Tensor], &[usize])>,
) -> Result<Vec<EpochRecord>> {
    validate(cfg)?;
    if images.is_empty() {
        return contract_err("training set is empty");
    }
    if images.len() != labels.len() {
        return dim_err(format!("{} images but {} labels", images.len(), labels.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let steps_per_epoch = images.len().div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs).max(1);
    let mut velocity: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let mut second: Vec<Tensor> = match cfg.optimizer {
        Optimizer::Adam => velocity.clone(),
        Optimizer::Sgd => Vec::new(),
    };
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);

    net.calibrate(&images[..images.len().min(cfg.batch_size)])?;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            lr = if cfg.cosine {
                0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) as Real
            } else {
                cfg.lr
            };
            net.zero_grad();
            for micro in batch.chunks(cfg.micro_batch) {
                let x = stack(&micro.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
                let x = net.check_images(&x)?;
                let ys: Vec<usize> = micro.iter().map(|&i| labels[i]).collect();
                let targets = one_hot(&ys, net.classes())?;
                let mut g = Graph::new();
                let xv = g.constant(x);
                let vars = net.bind(&mut g, true);
                let trace = net.record(&mut g, xv, &vars)?;
                correct += count_correct(g.value(trace.logits), &ys);
                let l = net.record_loss(&mut g, trace.logits, &targets)?;
                let l = g.scale(l, micro.len() as Real / batch.len() as Real);
                let value = g.value(l).item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss became {value} at epoch {epoch}, step {step} (lr {lr:e})"
                    )));
                }
                loss_sum += value * batch.len() as Real;
                let stats = trace.embedding_stats.clone();
                let grads = g.backward(l)?;
                net.accumulate(&grads, &vars)?;
                if let (InputEncoding::Embedding(e), Some((m, v))) = (&mut net.encoding, stats) {
                    e.update_statistics(&m, &v);
                }
            }
            step += 1;
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, v) in net.params_mut().into_iter().zip(velocity.iter_mut()) {
                        for ((pv, vv), gv) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
                            *vv = cfg.momentum * *vv + gv;
                            *pv -= lr * *vv;
                        }
                    }
                }
                Optimizer::Adam => {
                    const BETA2: Real = 0.999;
                    const EPS: Real = 1e-8;
                    let c1 = 1.0 - cfg.momentum.powi(step as i32);
                    let c2 = 1.0 - BETA2.powi(step as i32);
                    let params = net.params_mut().into_iter().zip(velocity.iter_mut()).zip(second.iter_mut());
                    for ((p, m), v) in params {
                        let grads = p.grad.data().to_vec();
                        for (((pv, mv), vv), gv) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grads) {
                            *mv = cfg.momentum * *mv + (1.0 - cfg.momentum) * gv;
                            *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                            *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + EPS);
                        }
                    }
                }
            }
        }
        let eval_accuracy = match eval {
            Some((xs, ys)) => Some(accuracy(net, xs, ys)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / images.len() as Real,
            accuracy: correct as Real / images.len() as Real,
            eval_accuracy,
        });
        log::debug!("epoch {epoch}: {:?}", history.last());
    }
    net.zero_grad();
    Ok(history)
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count()
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose largest logit is the label.
pub fn accuracy(net: &CodaNet, images: &[Tensor], labels: &[usize]) -> Result<Real> {
    if images.len() != labels.len() {
        return dim_err(format!("{} images but {} labels", images.len(), labels.len()));
    }
    let logits = net.logits_batched(images, 64)?;
    Ok(count_correct(&logits, labels) as Real / images.len() as Real)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dau::RescaleKind;
    use crate::net::NetConfig;

    fn toy() -> (CodaNet, Vec<Tensor>, Vec<usize>) {
        let mut c = NetConfig::default_for(1, 11, 11, 2, RescaleKind::L2);
        for l in &mut c.layers {
            l.rank = 2;
            l.out_channels = l.out_channels.min(4);
        }
        c.layers[2].out_channels = 2;
        let net = CodaNet::new(c, 0).unwrap();
        let mut imgs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..8 {
            let mut t = Tensor::zeros(&[1, 11, 11]);
            let y = i % 2;
            for r in 0..11 {
                t.set(&[0, r, if y == 0 { 2 } else { 8 }], 1.0);
            }
            imgs.push(t);
            labels.push(y);
        }
        (net, imgs, labels)
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let (mut net, x, y) = toy();
        let before = net.clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr: 0.0,
            ..Default::default()
        };
        train(&mut net, &x, &y, &cfg).unwrap();
        for (a, b) in before.params().iter().zip(net.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn empty_dataset_is_a_contract_error() {
        let (mut net, _, _) = toy();
        assert!(matches!(
            train(&mut net, &[], &[], &TrainConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn diverging_training_aborts() {
        let (mut net, x, y) = toy();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: Real::NAN,
            ..Default::default()
        };
        assert!(train(&mut net, &x, &y, &cfg).is_err());
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr: 1e300,
            cosine: false,
            ..Default::default()
        };
        let r = train(&mut net, &x, &y, &cfg);
        assert!(matches!(r, Err(Error::Numerical(_))), "{r:?}");
    }

    #[test]
    fn same_seed_same_history() {
        let (net, x, y) = toy();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            micro_batch: 2,
            seed: 9,
            ..Default::default()
        };
        let (mut a, mut b) = (net.clone(), net);
        let ha = train(&mut a, &x, &y, &cfg).unwrap();
        let hb = train(&mut b, &x, &y, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
    }

    #[test]
    fn micro_batching_does_not_change_the_update() {
        let (net, x, y) = toy();
        let mut cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            micro_batch: 8,
            ..Default::default()
        };
        let mut a = net.clone();
        train(&mut a, &x, &y, &cfg).unwrap();
        cfg.micro_batch = 3;
        let mut b = net;
        train(&mut b, &x, &y, &cfg).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            for (u, v) in p.value.data().iter().zip(q.value.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
