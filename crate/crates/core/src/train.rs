//! Training loop: build the graph once, then epochs of shuffled mini-batches
//! (forward, loss, backward, Adam step), per-epoch evaluation and
//! checkpointing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::data::{DatasetBundle, Session, TrainExample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::graph::{build_global_graph, row_normalize, GlobalGraph, GraphConfig, NormalizedAdjacency};
use crate::loss::{
    batch_item_set, cross_entropy_on_tape, single_positive_loss_on_tape, total_loss, LossBreakdown,
    SplScope,
};
use crate::model::{forward, init_params, Hyperparams, ModelParams, ParamVars, SessionBatch};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{grad_check, GradCheckReport, Tape, Var};

/// Full objective for one batch, recorded on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    p: &ParamVars,
    adj: &NormalizedAdjacency,
    batch: &SessionBatch,
    hyper: &Hyperparams,
) -> Result<(Var, LossBreakdown)> {
    let cfg = hyper.loss_config();
    let fwd = forward(tape, p, adj, batch, hyper)?;
    let ce = cross_entropy_on_tape(tape, fwd.scores, fwd.probs, &batch.targets, cfg.ce_form)?;
    let l_ce = tape.value(ce).item();
    if cfg.beta == 0.0 {
        return Ok((ce, total_loss(l_ce, 0.0, 0.0)));
    }
    let reps = match cfg.spl_scope {
        SplScope::AllItems => fwd.item_table,
        SplScope::BatchItems => {
            let items = batch_item_set(&batch.items, &batch.targets);
            tape.gather_rows(fwd.item_table, &items)?
        }
    };
    let spl = single_positive_loss_on_tape(tape, reps, cfg.tau)?;
    let l_spl = tape.value(spl).item();
    let weighted = tape.scale(spl, cfg.beta);
    let total = tape.add(ce, weighted)?;
    Ok((total, total_loss(l_ce, l_spl, cfg.beta)))
}

/// The graph training should use: the one stored in the bundle when it was
/// built with matching settings, otherwise a fresh one.
pub fn graph_for(bundle: &DatasetBundle, hyper: &Hyperparams) -> Result<GlobalGraph> {
    if let Some(section) = &bundle.graph {
        if section.epsilon == hyper.epsilon && section.include_test == hyper.graph_include_test {
            return Ok(section.graph.clone());
        }
        log::info!(
            "bundle graph built with epsilon={} include_test={}; rebuilding",
            section.epsilon,
            section.include_test
        );
    }
    let config = GraphConfig::new(hyper.epsilon)?;
    let graph = if hyper.graph_include_test {
        let all: Vec<_> = bundle
            .sessions_train
            .iter()
            .chain(&bundle.sessions_test)
            .cloned()
            .collect();
        build_global_graph(bundle.n_items(), &all, config)
    } else {
        build_global_graph(bundle.n_items(), &bundle.sessions_train, config)
    };
    Ok(graph)
}

/// Small fixed problem for gradient checking the full objective.
#[derive(Debug, Clone)]
pub struct ToyProblem {
    pub hyper: Hyperparams,
    pub adj: NormalizedAdjacency,
    pub batch: SessionBatch,
    pub params: ModelParams,
}

/// Eight items, `d = 6`, two layers, four sessions, `tau = 0.1`, `beta = 1`.
pub fn toy_problem(seed: u64) -> ToyProblem {
    const N: usize = 8;
    let hyper = Hyperparams {
        dim: 6,
        layers: 2,
        tau: 0.1,
        beta: 1.0,
        max_session_len: 8,
        seed,
        ..Hyperparams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sessions: Vec<Session> = (0..6)
        .map(|s| Session {
            items: (0..rng.random_range(2..6)).map(|_| rng.random_range(0..N)).collect(),
            start_time: s,
        })
        .collect();
    let graph = build_global_graph(N, &sessions, GraphConfig { epsilon: hyper.epsilon });
    let examples: Vec<TrainExample> = sessions[..4]
        .iter()
        .map(|s| TrainExample {
            prefix: s.items[..s.items.len() - 1].to_vec(),
            target: s.items[s.items.len() - 1],
        })
        .collect();
    ToyProblem {
        batch: SessionBatch::from_examples(&examples, hyper.max_session_len),
        params: init_params(N, &hyper, seed),
        adj: row_normalize(&graph),
        hyper,
    }
}

/// Central-difference check of the full objective on `problem`.
pub fn check_full_loss(problem: &ToyProblem, eps: f64) -> Result<GradCheckReport> {
    let mut tensors = problem.params.to_tensors();
    let layers = problem.hyper.layers;
    grad_check(&mut tensors, eps, |tape, vars| {
        let p = ParamVars::from_slice(vars, layers);
        batch_loss(tape, &p, &problem.adj, &problem.batch, &problem.hyper).map(|(v, _)| v)
    })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Training state owned by one thread.
#[derive(Debug)]
pub struct Trainer {
    hyper: Hyperparams,
    adj: NormalizedAdjacency,
    params: ModelParams,
    adam: AdamState,
    names: Vec<String>,
    vocab_hash: String,
    epoch: usize,
    best_metric: Option<f64>,
}

impl Trainer {
    pub fn new(bundle: &DatasetBundle, hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        if bundle.n_items() == 0 {
            return Err(Error::EmptyDataset);
        }
        let adj = row_normalize(&graph_for(bundle, &hyper)?);
        let params = init_params(bundle.n_items(), &hyper, hyper.seed);
        let adam = AdamState::new(
            params.named().into_iter().map(|(_, t)| t),
            AdamConfig {
                lr: hyper.lr,
                l2: hyper.l2,
                ..AdamConfig::default()
            },
        );
        let names = params.named().into_iter().map(|(n, _)| n).collect();
        Ok(Self {
            hyper,
            adj,
            params,
            adam,
            names,
            vocab_hash: bundle.vocab.content_hash(),
            epoch: 0,
            best_metric: None,
        })
    }

    /// Continues from a checkpoint; the next epoch reproduces what an
    /// uninterrupted run would have done.
    pub fn resume(bundle: &DatasetBundle, ck: Checkpoint) -> Result<Self> {
        let hash = bundle.vocab.content_hash();
        if ck.vocab_hash != hash {
            return Err(Error::VocabMismatch {
                expected: ck.vocab_hash,
                found: hash,
            });
        }
        let mut t = Self::new(bundle, ck.hyper.clone())?;
        t.params = ck.params;
        t.adam = ck.adam;
        t.epoch = ck.epoch;
        t.best_metric = ck.best_metric;
        Ok(t)
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.adj
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            hyper: self.hyper.clone(),
            vocab_hash: self.vocab_hash.clone(),
            epoch: self.epoch,
            best_metric: self.best_metric,
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Forward, backward and one Adam step on a batch.
    pub fn train_batch(&mut self, examples: &[&TrainExample]) -> Result<LossBreakdown> {
        let batch = SessionBatch::from_examples(examples.iter().copied(), self.hyper.max_session_len);
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, true);
        let (loss, breakdown) = batch_loss(&mut tape, &p, &self.adj, &batch, &self.hyper)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                detail: format!(
                    "epoch {} l_ce={} l_spl={}",
                    self.epoch + 1,
                    breakdown.l_ce,
                    breakdown.l_spl
                ),
            });
        }
        let mut grads = tape.backward(loss)?;
        let vars = p.all();
        let mut slots = self.params.tensors_mut();
        for (slot, v) in slots.iter_mut().zip(&vars) {
            slot.clear_grad();
            if let Some(g) = grads.take(*v) {
                slot.accumulate_grad(g.data());
            }
        }
        self.adam.step(&mut slots, &self.names)?;
        Ok(breakdown)
    }

    /// Example order for `epoch` (0-based); depends only on the seed.
    pub fn epoch_order(&self, n_examples: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n_examples).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.hyper.seed, epoch));
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `train`; the last partial batch is kept. Returns the
    /// per-batch losses.
    pub fn run_epoch(
        &mut self,
        train: &[TrainExample],
        mut on_batch: impl FnMut(usize, usize, &LossBreakdown),
    ) -> Result<Vec<LossBreakdown>> {
        if self.hyper.lr_decay_step > 0 {
            let k = (self.epoch / self.hyper.lr_decay_step) as i32;
            self.adam.config.lr = self.hyper.lr * self.hyper.lr_decay_rate.powi(k);
        }
        let order = self.epoch_order(train.len(), self.epoch);
        let mut losses = Vec::with_capacity(order.len().div_ceil(self.hyper.batch_size));
        for (b, chunk) in order.chunks(self.hyper.batch_size).enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &train[i]).collect();
            let l = self.train_batch(&batch)?;
            on_batch(self.epoch + 1, b + 1, &l);
            losses.push(l);
        }
        self.epoch += 1;
        Ok(losses)
    }

    pub fn evaluate(&self, examples: &[TrainExample], config: &EvalConfig) -> Result<EvalReport> {
        evaluate(&self.params, &self.adj, examples, &self.hyper, config)
    }
}

pub fn mean_loss(losses: &[LossBreakdown]) -> LossBreakdown {
    let n = losses.len().max(1) as f64;
    LossBreakdown {
        l_ce: losses.iter().map(|l| l.l_ce).sum::<f64>() / n,
        l_spl: losses.iter().map(|l| l.l_spl).sum::<f64>() / n,
        total: losses.iter().map(|l| l.total).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub eval: EvalConfig,
    /// Model selection uses test P@`select_k`.
    pub select_k: usize,
    pub evaluate_each_epoch: bool,
    /// When set, logs, checkpoints and metrics are written here.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            eval: EvalConfig::default(),
            select_k: 20,
            evaluate_each_epoch: true,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_params: Option<ModelParams>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub batch_losses: Vec<LossBreakdown>,
}

impl TrainOutcome {
    pub fn best_report(&self) -> Option<&EvalReport> {
        let e = self.best_epoch?;
        self.history.iter().find(|r| r.epoch == e)?.test.as_ref()
    }

    pub fn last_report(&self) -> Option<&EvalReport> {
        self.history.last()?.test.as_ref()
    }
}

struct RunFiles {
    log: BufWriter<File>,
    ckpt_dir: PathBuf,
    started: Instant,
}

impl RunFiles {
    fn open(dir: &Path) -> Result<Self> {
        let ckpt_dir = dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let log_path = dir.join("train_log.jsonl");
        let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(Self {
            log: BufWriter::new(log),
            ckpt_dir,
            started: Instant::now(),
        })
    }

    fn line(&mut self, value: serde_json::Value) {
        if let Err(e) = writeln!(self.log, "{value}") {
            log::warn!("training log write failed: {e}");
        }
    }
}

/// Trains from scratch (or from a resumed [`Trainer`]) for the configured
/// number of epochs.
pub fn train(bundle: &DatasetBundle, hyper: &Hyperparams, opts: &TrainOptions) -> Result<TrainOutcome> {
    let trainer = Trainer::new(bundle, hyper.clone())?;
    train_with(trainer, bundle, opts)
}

pub fn train_with(
    mut trainer: Trainer,
    bundle: &DatasetBundle,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut files = match &opts.out_dir {
        Some(dir) => Some(RunFiles::open(dir)?),
        None => None,
    };
    let adj_before = trainer.adjacency().clone();
    let mut history = Vec::new();
    let mut batch_losses = Vec::new();
    let mut best_params = None;
    let mut best_epoch = None;
    let epochs = trainer.hyper().epochs;

    while trainer.epoch() < epochs {
        let losses = {
            let files = &mut files;
            trainer.run_epoch(&bundle.train, |epoch, batch, l| {
                if let Some(f) = files.as_mut() {
                    let wall_ms = f.started.elapsed().as_millis() as u64;
                    f.line(json!({
                        "epoch": epoch, "batch": batch,
                        "l_ce": l.l_ce, "l_spl": l.l_spl, "total": l.total,
                        "wall_ms": wall_ms,
                    }));
                }
            })?
        };
        let epoch = trainer.epoch();
        let loss = mean_loss(&losses);
        batch_losses.extend(losses);

        let test = if opts.evaluate_each_epoch && !bundle.test.is_empty() {
            Some(trainer.evaluate(&bundle.test, &opts.eval)?)
        } else {
            None
        };
        let metric = test.as_ref().and_then(|r| r.precision(opts.select_k));
        let improved = match (metric, trainer.best_metric) {
            (Some(m), Some(best)) => m > best,
            (Some(_), None) => true,
            (None, _) => best_epoch.is_none() || test.is_none(),
        };
        if improved {
            if metric.is_some() {
                trainer.best_metric = metric;
            }
            best_epoch = Some(epoch);
            best_params = Some(trainer.params().clone());
        }
        log::info!(
            "epoch {epoch}/{epochs}: loss {:.5} (ce {:.5}, spl {:.5}){}",
            loss.total,
            loss.l_ce,
            loss.l_spl,
            metric.map_or(String::new(), |m| format!(", test P@{} {:.4}", opts.select_k, m))
        );

        if let Some(f) = files.as_mut() {
            let ck = trainer.checkpoint();
            ck.save(&f.ckpt_dir.join("last.ckpt"))?;
            if improved {
                ck.save(&f.ckpt_dir.join("best.ckpt"))?;
            }
            f.line(json!({
                "epoch": epoch, "event": "epoch_end",
                "l_ce": loss.l_ce, "l_spl": loss.l_spl, "total": loss.total,
                "test": test,
            }));
        }
        history.push(EpochRecord { epoch, loss, test });
    }

    debug_assert_eq!(&adj_before, trainer.adjacency());
    if let Some(f) = files.as_mut() {
        f.log.flush().map_err(|e| Error::io(f.ckpt_dir.join("../train_log.jsonl"), e))?;
    }
    let outcome = TrainOutcome {
        params: trainer.into_params(),
        best_params,
        best_epoch,
        history,
        batch_losses,
    };
    if let Some(dir) = &opts.out_dir {
        write_metrics(&dir.join("metrics.json"), &outcome, hyper_meta(bundle, opts))?;
    }
    Ok(outcome)
}

fn hyper_meta(bundle: &DatasetBundle, opts: &TrainOptions) -> serde_json::Value {
    json!({
        "train_examples": bundle.train.len(),
        "test_examples": bundle.test.len(),
        "items": bundle.n_items(),
        "select_k": opts.select_k,
    })
}

fn write_metrics(path: &Path, outcome: &TrainOutcome, meta: serde_json::Value) -> Result<()> {
    let value = json!({
        "data": meta,
        "best_epoch": outcome.best_epoch,
        "best": outcome.best_report(),
        "last": outcome.last_report(),
        "epochs": outcome.history,
    });
    let text = serde_json::to_string_pretty(&value).expect("metrics serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
