use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{generate_dataset, make_batch, miou, ConfusionMatrix, DatasetSpec, SegSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::net::{total_loss, Gain, GainConfig};
use crate::nn::{sgd_step, Ctx, LrSchedule, OhemConfig, ParamStore, SgdConfig};
use crate::tensor::{Graph, Rng};

/// Offset between the training and validation dataset seeds.
pub const VAL_SEED_OFFSET: u64 = 0x5eed_0000_0000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr0: f64,
    pub power: f64,
    pub sgd: SgdConfig,
    pub ohem: OhemConfig,
    /// Seeds parameter initialisation and batch order.
    pub seed: u64,
    /// Validation period in iterations; the final iteration is always evaluated.
    pub val_every: usize,
    pub val_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            batch: 8,
            lr0: 0.01,
            power: 0.9,
            sgd: SgdConfig::default(),
            ohem: OhemConfig::default(),
            seed: 0,
            val_every: 250,
            val_samples: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("train.lr0", format!("must be positive, got {}", self.lr0)));
        }
        if self.val_every == 0 {
            return Err(Error::config("train.val_every", "must be positive"));
        }
        if self.val_samples == 0 {
            return Err(Error::config("train.val_samples", "must be positive"));
        }
        self.ohem
            .validate()
            .map_err(|e| Error::config("train.ohem", e.to_string()))
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Number of completed iterations.
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub aux_loss: Option<f64>,
    pub val_miou: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<LogRow>,
    /// mIoU on the validation split after the last iteration.
    pub final_val_miou: f64,
}

/// Validation split matching a training spec.
pub fn val_spec(train: &DatasetSpec, samples: usize) -> DatasetSpec {
    train.with_seed(train.seed.wrapping_add(VAL_SEED_OFFSET), samples)
}

pub fn write_log<W: Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["iter", "lr", "loss", "aux_loss", "val_miou"])?;
    }
    w.flush()?;
    Ok(())
}

/// Builds the network from `model` with `cfg.seed` and trains it.
pub fn train(model: &GainConfig, data: &DatasetSpec, cfg: &TrainConfig) -> Result<(Gain, TrainOutcome)> {
    let (net, store) = Gain::build(model.clone(), cfg.seed)?;
    let outcome = train_model(&net, store, data, cfg)?;
    Ok((net, outcome))
}

pub fn train_model(net: &Gain, mut store: ParamStore, data: &DatasetSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_classes(net)?;
    let train_set = generate_dataset(data)?;
    let val_set = generate_dataset(&val_spec(data, cfg.val_samples))?;
    if train_set.is_empty() {
        return Err(Error::config("data.num_samples", "training set is empty"));
    }
    let schedule = LrSchedule {
        lr0: cfg.lr0,
        max_iter: cfg.iters,
        power: cfg.power,
    };
    let mut order_rng = Rng::stream(cfg.seed, u64::MAX);
    let mut order: Vec<usize> = Vec::new();
    let mut velocity: Vec<Vec<f64>> = vec![Vec::new(); store.len()];
    let mut log = Vec::new();
    let mut final_val_miou = None;

    for it in 0..cfg.iters {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order_rng.shuffle(&mut order);
            }
            idx.push(order.pop().expect("refilled above"));
        }
        let (images, labels) = make_batch(&train_set, &idx)?;
        let lr = schedule.at(it)?;

        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut store, true);
        let x = ctx.input(images);
        // A blown-up forward pass (e.g. inf logits reaching a softmax) is
        // divergence too, not an internal error.
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { iter: it, loss: f64::NAN },
            e => e,
        };
        let out = net.forward(&mut ctx, x).map_err(diverged)?;
        let loss = total_loss(&mut ctx, &out, &labels, net.cfg.aux_weight, &cfg.ohem).map_err(diverged)?;
        let value = ctx.graph.value(loss.total).item();
        if !value.is_finite() {
            return Err(Error::Diverged { iter: it, loss: value });
        }
        let aux_loss = loss.aux.map(|a| ctx.graph.value(a).item());
        ctx.graph.backward(loss.total)?;
        let grads = ctx.param_grads();
        drop(ctx);
        for (id, grad) in grads {
            let v = &mut velocity[id.index()];
            if v.is_empty() {
                v.resize(grad.len(), 0.0);
            }
            sgd_step(store.get_mut(id).data_mut(), &grad, v, lr, cfg.sgd.momentum, cfg.sgd.weight_decay)?;
        }

        let done = it + 1;
        let val_miou = if done % cfg.val_every == 0 || done == cfg.iters {
            let m = miou(&evaluate(net, &store, &val_set, cfg.batch).map_err(diverged)?).mean;
            log::info!("iter {done}: loss {value:.4}, val mIoU {m:.4}");
            final_val_miou = Some(m);
            Some(m)
        } else {
            None
        };
        log.push(LogRow {
            iter: done,
            lr,
            loss: value,
            aux_loss,
            val_miou,
        });
    }
    let final_val_miou = match final_val_miou {
        Some(m) => m,
        None => miou(&evaluate(net, &store, &val_set, cfg.batch)?).mean,
    };
    Ok(TrainOutcome {
        store,
        log,
        final_val_miou,
    })
}

fn check_classes(net: &Gain) -> Result<()> {
    if net.cfg.num_classes != NUM_CLASSES {
        return Err(Error::invalid(
            "evaluate",
            format!(
                "model predicts {} classes but the dataset has {NUM_CLASSES}",
                net.cfg.num_classes
            ),
        ));
    }
    Ok(())
}

/// Single-scale inference with per-pixel argmax; ignored pixels are skipped.
pub fn evaluate(net: &Gain, store: &ParamStore, samples: &[SegSample], batch: usize) -> Result<ConfusionMatrix> {
    check_classes(net)?;
    let k = net.cfg.num_classes;
    let mut store = store.clone();
    let mut cm = ConfusionMatrix::new(k);
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (images, labels) = make_batch(samples, chunk)?;
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, &mut store, false);
        let x = ctx.input(images);
        let logits = net.predict(&mut ctx, x)?;
        let t = g.value(logits);
        let (n, _, h, w) = t.dims4("evaluate")?;
        let area = h * w;
        let mut pred = Vec::with_capacity(n * area);
        for b in 0..n {
            let base = b * k * area;
            for p in 0..area {
                let mut best = 0;
                for c in 1..k {
                    if t.data()[base + c * area + p] > t.data()[base + best * area + p] {
                        best = c;
                    }
                }
                pred.push(best);
            }
        }
        cm.accumulate(&pred, &labels.data)?;
    }
    Ok(cm)
}
