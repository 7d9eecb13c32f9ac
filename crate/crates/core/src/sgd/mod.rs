//! Synchronous data-parallel SGD on a toy model.
//!
//! Every rank ("node") runs `m` workers, each computing a summed gradient
//! on its own `k`-sample sub-batch. The node folds its workers' gradients in
//! worker order, the nodes allreduce, and every rank applies
//! `W -= lr * g / B` with `B = N * m * k`. All arithmetic on the way is in a
//! fixed order, so replicas stay bitwise identical and a serial replay in the
//! same order reproduces the weights exactly.

mod model;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::collectives::{allgather_u64, elementwise_add, Algorithm, Allreduce, DEFAULT_SEGMENT_ELEMS};
use crate::dimd::{self, build_blob, decode_features, decode_index, BatchRequest, Record, ShardStore};
use crate::error::{Error, Result};
use crate::topology::{DEFAULT_ARITY, DEFAULT_COLORS};
use crate::transport::{run_ranks, Backend, Endpoint, TransportConfig};

pub use model::{
    grad_sum_f64, loss_f64, GradSum, Sample, ToyModel, HIDDEN, INPUTS, N_PARAMS, OUTPUTS,
};

/// Warm start then step decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    /// Per-worker batch.
    pub k: usize,
    /// Total workers, `N * m`.
    pub n: usize,
    pub warmup_epochs: f64,
    pub drop_every: f64,
    pub drop_factor: f64,
}

impl LrSchedule {
    /// `base_lr * k * n / 256`.
    pub fn target(&self) -> f64 {
        self.base_lr * (self.k * self.n) as f64 / 256.0
    }
}

/// Linear ramp from `base_lr` to the target over the warmup, then division
/// by `drop_factor` every `drop_every` epochs.
pub fn lr_at(sched: &LrSchedule, epoch: f64) -> f64 {
    let target = sched.target();
    if epoch < sched.warmup_epochs {
        let t = epoch / sched.warmup_epochs;
        return sched.base_lr + (target - sched.base_lr) * t;
    }
    let drops = ((epoch - sched.warmup_epochs) / sched.drop_every).floor();
    target / sched.drop_factor.powf(drops)
}

/// How each step's samples are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Each rank samples `m * k` records from its own shard with seed
    /// `seed + rank`.
    #[default]
    PerRank,
    /// All ranks draw the same `B` indices from the full dataset (which every
    /// rank must hold) and rank `r` uses block `r`. Makes runs with different
    /// `N` but equal `B` see the same samples.
    SharedGlobal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_nodes: usize,
    pub workers_per_node: usize,
    pub per_worker_batch: usize,
    pub epochs: usize,
    /// Steps per epoch; `None` means `ceil(corpus / B)`.
    pub steps_per_epoch: Option<usize>,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub drop_every: f64,
    pub drop_factor: f64,
    pub seed: u64,
    /// Ranks per data group; 1 means every rank holds the full corpus.
    pub group_size: usize,
    /// Shuffle every this many epochs; 0 disables shuffling.
    pub shuffle_every: usize,
    /// Segments per shuffle; 0 picks the default.
    pub shuffle_segments: usize,
    pub sampling: SamplingMode,
    pub algorithm: Algorithm,
    pub colors: usize,
    pub arity: usize,
    pub segment_elems: usize,
    /// Compare weight hashes across ranks after every step.
    pub check_replicas: bool,
    /// Zeros appended to the allreduced buffer to emulate a larger model.
    pub comm_padding_elems: usize,
    /// Simulated compute time per sample per worker (sim backend only).
    pub compute_s_per_sample: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_nodes: 1,
            workers_per_node: 1,
            per_worker_batch: 8,
            epochs: 1,
            steps_per_epoch: None,
            base_lr: 0.1,
            warmup_epochs: 5.0,
            drop_every: 30.0,
            drop_factor: 10.0,
            seed: 0,
            group_size: 1,
            shuffle_every: 1,
            shuffle_segments: 0,
            sampling: SamplingMode::PerRank,
            algorithm: Algorithm::Multicolor,
            colors: DEFAULT_COLORS,
            arity: DEFAULT_ARITY,
            segment_elems: DEFAULT_SEGMENT_ELEMS,
            check_replicas: true,
            comm_padding_elems: 0,
            compute_s_per_sample: 0.0,
        }
    }
}

impl TrainConfig {
    /// Effective batch `N * m * k`.
    pub fn effective_batch(&self) -> usize {
        self.n_nodes * self.workers_per_node * self.per_worker_batch
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            k: self.per_worker_batch,
            n: self.n_nodes * self.workers_per_node,
            warmup_epochs: self.warmup_epochs,
            drop_every: self.drop_every,
            drop_factor: self.drop_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_nodes", self.n_nodes),
            ("workers_per_node", self.workers_per_node),
            ("per_worker_batch", self.per_worker_batch),
            ("epochs", self.epochs),
            ("group_size", self.group_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.n_nodes % self.group_size != 0 {
            return Err(Error::GroupMismatch {
                group_size: self.group_size,
                n_ranks: self.n_nodes,
            });
        }
        if !(self.drop_factor > 1.0) || !(self.drop_every > 0.0) || !(self.warmup_epochs >= 0.0) {
            return Err(Error::InvalidConfig(
                "need drop_factor > 1, drop_every > 0 and warmup_epochs >= 0".into(),
            ));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        if self.sampling == SamplingMode::SharedGlobal && self.group_size != 1 {
            return Err(Error::InvalidConfig(
                "shared global sampling needs every rank to hold the full corpus (group_size 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Loss and accuracy of one step's global batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub acc: f64,
}

/// Samples of worker `j`: the node batch is split at the source into
/// contiguous `k`-sample blocks.
pub fn worker_batches(samples: &[Sample], k: usize) -> impl Iterator<Item = &[Sample]> {
    samples.chunks(k)
}

/// Indices of the `m * k` records this rank trains on at `step`.
pub fn step_indices(cfg: &TrainConfig, store: &ShardStore, rank: usize, step: u64) -> Result<Vec<usize>> {
    let node = cfg.workers_per_node * cfg.per_worker_batch;
    match cfg.sampling {
        SamplingMode::PerRank => store.sample_indices(&BatchRequest {
            batch_size: node,
            rng_seed: cfg.seed.wrapping_add(rank as u64),
            step,
        }),
        SamplingMode::SharedGlobal => {
            let all = store.sample_indices(&BatchRequest {
                batch_size: cfg.effective_batch(),
                rng_seed: cfg.seed,
                step,
            })?;
            Ok(all[rank * node..(rank + 1) * node].to_vec())
        }
    }
}

pub fn decode_sample(store: &ShardStore, i: usize) -> Result<Sample> {
    let (bytes, label) = store.get(i);
    let x = decode_features(bytes).ok_or_else(|| {
        Error::FormatError(format!("record {i} is {} bytes, not a feature vector", bytes.len()))
    })?;
    Ok((x, label))
}

/// One synchronous step: per-worker gradients, ordered intra-node fold,
/// allreduce, identical update everywhere.
pub async fn train_step(
    ep: &Endpoint,
    model: &mut ToyModel,
    cfg: &TrainConfig,
    store: &ShardStore,
    allreduce: &Allreduce,
    step: u64,
    lr: f64,
) -> Result<StepStats> {
    let samples: Vec<Sample> = step_indices(cfg, store, ep.rank(), step)?
        .into_iter()
        .map(|i| decode_sample(store, i))
        .collect::<Result<_>>()?;

    let mut buf = vec![0.0f32; N_PARAMS + 2 + cfg.comm_padding_elems];
    for (j, batch) in worker_batches(&samples, cfg.per_worker_batch).enumerate() {
        let g = model.grad_sum(batch);
        let mut part = g.grad;
        part.push(g.loss_sum as f32);
        part.push(g.correct as f32);
        if j == 0 {
            buf[..N_PARAMS + 2].copy_from_slice(&part);
        } else {
            elementwise_add(&mut buf[..N_PARAMS + 2], &part)?;
        }
    }
    ep.compute(cfg.compute_s_per_sample * cfg.per_worker_batch as f64).await;

    allreduce.run(ep, &mut buf, cfg.segment_elems).await?;

    apply_update(&mut model.weights, &buf[..N_PARAMS], lr, cfg.effective_batch());
    if cfg.check_replicas {
        let hashes = allgather_u64(ep, weight_hash(&model.weights)).await?;
        if hashes.iter().any(|&h| h != hashes[0]) {
            return Err(Error::DivergenceDetected { step });
        }
    }
    let b = cfg.effective_batch() as f64;
    Ok(StepStats {
        loss: buf[N_PARAMS] as f64 / b,
        acc: buf[N_PARAMS + 1] as f64 / b,
    })
}

/// `w -= lr * (g / B)` in `f32`.
pub fn apply_update(weights: &mut [f32], grad_sum: &[f32], lr: f64, effective_batch: usize) {
    let lr = lr as f32;
    let b = effective_batch as f32;
    for (w, g) in weights.iter_mut().zip(grad_sum) {
        *w -= lr * (*g / b);
    }
}

/// Hash of the exact bit patterns of `weights`.
pub fn weight_hash(weights: &[f32]) -> u64 {
    let mut h = DefaultHasher::new();
    for w in weights {
        w.to_bits().hash(&mut h);
    }
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    /// Time at the end of the epoch (virtual on the simulator).
    pub elapsed_s: f64,
    /// Time this epoch spent in shuffling.
    pub shuffle_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// One row per step, from rank 0.
    pub steps: Vec<MetricsRow>,
    pub epochs: Vec<EpochSummary>,
    pub weights: Vec<f32>,
    /// Slowest rank's finishing time.
    pub elapsed_s: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["epoch", "step", "loss", "acc", "lr", "elapsed_s"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains on `corpus` (records of encoded feature vectors) across
/// `cfg.n_nodes` ranks and returns rank 0's metrics and the final weights,
/// after checking that every rank ends with the same weights.
pub fn run_training(
    cfg: &TrainConfig,
    corpus: &[Record],
    backend: &Backend,
    transport: &TransportConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let (blob, index) = build_blob(corpus)?;
    let index = decode_index(&index)?;
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| corpus.len().div_ceil(cfg.effective_batch()))
        .max(1);
    let allreduce = Allreduce::new(cfg.algorithm, cfg.n_nodes, cfg.colors, cfg.arity)?;
    let sched = cfg.schedule();

    let report = run_ranks(cfg.n_nodes, backend, transport, |ep| {
        let (blob, index, allreduce) = (&blob, &index, &allreduce);
        async move {
            let rank = ep.rank();
            let mut store = dimd::partition(blob, index, rank, cfg.n_nodes, cfg.group_size)?;
            let mut model = ToyModel::new(cfg.seed);
            let mut rows = Vec::new();
            let mut epochs = Vec::new();
            let mut step = 0u64;
            for epoch in 0..cfg.epochs {
                let (mut loss, mut acc) = (0.0, 0.0);
                for s in 0..steps_per_epoch {
                    let lr = lr_at(&sched, epoch as f64 + s as f64 / steps_per_epoch as f64);
                    let st = train_step(&ep, &mut model, cfg, &store, allreduce, step, lr).await?;
                    loss += st.loss;
                    acc += st.acc;
                    rows.push(MetricsRow {
                        epoch,
                        step,
                        loss: st.loss,
                        acc: st.acc,
                        lr,
                        elapsed_s: ep.now(),
                    });
                    step += 1;
                }
                let before = ep.now();
                if cfg.shuffle_every > 0 && (epoch + 1) % cfg.shuffle_every == 0 {
                    let seed = cfg.seed ^ ((epoch as u64 + 1) << 32);
                    store = dimd::shuffle_group(&ep, store, cfg.shuffle_segments, seed).await?;
                }
                epochs.push(EpochSummary {
                    epoch,
                    loss: loss / steps_per_epoch as f64,
                    acc: acc / steps_per_epoch as f64,
                    elapsed_s: ep.now(),
                    shuffle_s: ep.now() - before,
                });
            }
            Ok((rows, epochs, model.weights))
        }
    })?;

    let elapsed_s = report.elapsed_s;
    let mut results = report.results.into_iter();
    let (steps, epochs, weights) = results.next().expect("at least one rank");
    if results.any(|(_, _, w)| weight_hash(&w) != weight_hash(&weights)) {
        return Err(Error::DivergenceDetected {
            step: steps.last().map_or(0, |r| r.step),
        });
    }
    Ok(TrainReport {
        steps,
        epochs,
        weights,
        elapsed_s,
    })
}
