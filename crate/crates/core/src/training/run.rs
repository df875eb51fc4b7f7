use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, TrainModel};
use super::optim::{adam_step, cosine_lr, AdamState, OptimConfig};
use crate::error::{bail_invalid, Error, Result};
use crate::mixers::{MambaBlock, Provenance};
use crate::tasks::{block_accuracy, dataset, Split, TaskConfig, TaskInstance};
use crate::tensor_core::{argmax, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            train: 20_000,
            val: 1_000,
            test: 10_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ValLoss,
    ValAccuracy,
    Budget,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub optim: OptimConfig,
    pub sizes: DataSizes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub test_accuracy: f64,
    pub init_test_accuracy: f64,
    pub epochs: usize,
    pub stopped_by: StopReason,
    pub params: usize,
    pub config: RunConfig,
}

pub struct TrainResult {
    pub record: RunRecord,
    pub model: MambaBlock,
}

/// Loss and per-position hits of one batch through the graph.
struct BatchEval {
    graph: Graph,
    loss: crate::tensor_core::NodeId,
    ids: Vec<crate::tensor_core::NodeId>,
    correct: usize,
    total: usize,
}

fn batch_graph(model: &TrainModel, batch: &[&TaskInstance]) -> Result<BatchEval> {
    let mut g = Graph::new();
    let ids = model.register(&mut g);
    let seqs: Vec<&[usize]> = batch.iter().map(|b| b.input.as_slice()).collect();
    let y = model.mixer_graph(&mut g, &ids, &seqs)?;
    let tl = seqs[0].len();
    let mut rows = vec![];
    let mut targets = vec![];
    for (bi, inst) in batch.iter().enumerate() {
        for t in 0..tl {
            if inst.mask[t] {
                rows.push(bi * tl + t);
                targets.push(inst.target[t]);
            }
        }
    }
    if rows.is_empty() {
        bail_invalid!("batch has no supervised positions");
    }
    let logits = model.head_graph(&mut g, &ids, y, &rows)?;
    let mask = vec![true; rows.len()];
    let loss = g.cross_entropy(logits, &targets, &mask)?;
    let lv: &Tensor = g.value(logits);
    let correct = targets
        .iter()
        .enumerate()
        .filter(|(r, &tg)| argmax(lv.row(*r)) == tg)
        .count();
    Ok(BatchEval {
        total: rows.len(),
        graph: g,
        loss,
        ids,
        correct,
    })
}

/// Mean masked cross-entropy and accuracy over `data`.
pub fn evaluate_loss(
    model: &TrainModel,
    data: &[TaskInstance],
    chunk: usize,
) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut total) = (0.0, 0usize, 0usize);
    for c in data.chunks(chunk.max(1)) {
        let refs: Vec<&TaskInstance> = c.iter().collect();
        let be = batch_graph(model, &refs)?;
        loss += be.graph.value(be.loss).data()[0] * be.total as f64;
        correct += be.correct;
        total += be.total;
    }
    Ok((loss / total as f64, correct as f64 / total as f64))
}

fn checkpoint(model: &TrainModel) -> Option<Box<String>> {
    model
        .to_block(None)
        .ok()
        .and_then(|b| b.to_json().ok())
        .map(Box::new)
}

fn diverged(model: &TrainModel, epoch: usize, reason: String, last_good: &[Tensor]) -> Error {
    let ck = TrainModel {
        params: last_good.to_vec(),
        ..model.clone()
    };
    Error::Diverged {
        epoch,
        reason,
        checkpoint: checkpoint(&ck),
    }
}

pub fn train(cfg: &RunConfig) -> Result<TrainResult> {
    cfg.optim.validate()?;
    cfg.task.validate()?;
    if cfg.model.classes != cfg.task.num_tokens() || cfg.model.vocab != cfg.task.num_tokens() {
        bail_invalid!(
            "model vocab/classes {}/{} do not match task tokens {}",
            cfg.model.vocab,
            cfg.model.classes,
            cfg.task.num_tokens()
        );
    }
    let start = Instant::now();
    let train_set = dataset(&cfg.task, Split::Train, cfg.sizes.train)?;
    let val_set = dataset(&cfg.task, Split::Val, cfg.sizes.val)?;
    let test_set = dataset(&cfg.task, Split::Test, cfg.sizes.test)?;
    let mut model = TrainModel::init(cfg.model, cfg.optim.seed)?;
    let init_test_accuracy = block_accuracy(&model.to_block(None)?, &test_set)?;
    let mut state = AdamState::new(&model.params);
    let mut last_good = model.params.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let (mut tl_hist, mut vl_hist, mut va_hist) = (vec![], vec![], vec![]);
    let mut stopped_by = StopReason::MaxEpochs;
    for epoch in 0..cfg.optim.epochs {
        let lr = cosine_lr(epoch, &cfg.optim);
        order.shuffle(&mut rng);
        let (mut sum, mut cnt) = (0.0, 0usize);
        for idx in order.chunks(cfg.optim.batch_size) {
            let batch: Vec<&TaskInstance> = idx.iter().map(|&i| &train_set[i]).collect();
            let mut be = match batch_graph(&model, &batch) {
                Ok(be) => be,
                Err(e) if state.step > 0 => {
                    return Err(diverged(&model, epoch, e.to_string(), &last_good))
                }
                Err(e) => return Err(e),
            };
            let lv = be.graph.value(be.loss).data()[0];
            if !lv.is_finite() {
                return Err(diverged(&model, epoch, format!("loss {lv}"), &last_good));
            }
            last_good.clone_from(&model.params);
            be.graph.backward(be.loss)?;
            let grads: Vec<Tensor> = be
                .ids
                .iter()
                .zip(&model.params)
                .map(|(&id, p)| {
                    be.graph
                        .grad(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(p.shape()))
                })
                .collect();
            if let Err(e) = adam_step(&mut model.params, &grads, &mut state, lr, &cfg.optim) {
                return Err(diverged(&model, epoch, e.to_string(), &last_good));
            }
            sum += lv * be.total as f64;
            cnt += be.total;
        }
        let (vl, va) = evaluate_loss(&model, &val_set, 250)?;
        tl_hist.push(sum / cnt as f64);
        vl_hist.push(vl);
        va_hist.push(va);
        if vl < cfg.optim.early_stop_val_loss {
            stopped_by = StopReason::ValLoss;
            break;
        }
        if cfg.optim.early_stop_val_acc.is_some_and(|a| va >= a) {
            stopped_by = StopReason::ValAccuracy;
            break;
        }
        if cfg
            .optim
            .budget_secs
            .is_some_and(|b| start.elapsed().as_secs_f64() > b)
        {
            stopped_by = StopReason::Budget;
            break;
        }
    }
    let provenance = Provenance {
        builder: "train".into(),
        args: serde_json::to_value(cfg)?,
        seed: Some(cfg.optim.seed),
    };
    let block = model.to_block(Some(provenance))?;
    let test_accuracy = block_accuracy(&block, &test_set)?;
    let record = RunRecord {
        epochs: vl_hist.len(),
        train_loss: tl_hist,
        val_loss: vl_hist,
        val_accuracy: va_hist,
        test_accuracy,
        init_test_accuracy,
        stopped_by,
        params: block.num_params(),
        config: cfg.clone(),
    };
    Ok(TrainResult {
        record,
        model: block,
    })
}
