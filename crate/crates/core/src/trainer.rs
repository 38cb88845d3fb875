//! Mini-batch SGD with per-epoch validation, early stopping and grid search.
//!
//! One step on batch `B` computes the loss gradient at the current tables,
//! applies the decay factor, then subtracts the gradient:
//! `x <- (1 - eta lambda) x - eta grad(x)` for decayed rows and
//! `x <- x - eta grad(x)` otherwise.

use std::time::Instant;

use rayon::prelude::*;

use crate::embeddings::{magnitudes, EmbeddingTable, InitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalTarget, ScorerConfig, Similarity, Window};
use crate::interactions::{
    item_popularity, stratify, Batch, BatchSampler, Split, StrataAssignment, Stratum,
};
use crate::io::{cell, cell_f64, fmt_f64, CsvTable};
use crate::losses::{apply_weight_decay, LossKind, LossOutput, LossSpec, MarginTable};
use crate::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub init: InitSpec,
    pub dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// 0 returns the initialization untouched.
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_k: usize,
    pub window: Window,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossSpec::new(LossKind::DirectAu),
            init: InitSpec::default(),
            dim: 64,
            learning_rate: 0.01,
            batch_size: 1024,
            max_epochs: 1000,
            patience: 10,
            eval_k: 20,
            window: Window::Literal,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(
                "lr",
                format!("must be > 0, got {}", self.learning_rate),
            ));
        }
        if self.patience < 1 {
            return Err(Error::config("patience", "must be >= 1"));
        }
        if self.dim < 1 {
            return Err(Error::config("dim", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.eval_k < 1 {
            return Err(Error::config("eval_k", "must be >= 1"));
        }
        self.loss.validate()?;
        if self.learning_rate * self.loss.decay.lambda >= 1.0 {
            return Err(Error::config("lambda", "lr * lambda must be < 1"));
        }
        if let crate::embeddings::InitStrategy::Prism { alpha } = self.init.strategy {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::config(
                    "alpha",
                    format!("must lie in [0, 1], got {alpha}"),
                ));
            }
        }
        Ok(())
    }

    pub fn scorer(&self, similarity: Similarity) -> ScorerConfig {
        ScorerConfig {
            similarity,
            k_cap: self.eval_k,
            window: self.window,
        }
    }

    /// FNV-1a over the config's debug form; stable for a given build.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in format!("{self:?}").bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

/// Loss and gradient source for the SGD loop.
pub trait Objective: Sync {
    fn evaluate(
        &self,
        batch: &Batch,
        users: &EmbeddingTable,
        items: &EmbeddingTable,
        margins: Option<&MarginTable>,
    ) -> Result<LossOutput>;
}

impl Objective for LossSpec {
    fn evaluate(
        &self,
        batch: &Batch,
        users: &EmbeddingTable,
        items: &EmbeddingTable,
        margins: Option<&MarginTable>,
    ) -> Result<LossOutput> {
        self.compute(batch, users, items, margins)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ndcg_dot: f64,
    pub val_ndcg_cos: f64,
    pub mag_popular: f64,
    pub mag_neutral: f64,
    pub mag_unpopular: f64,
    pub seconds: f64,
}

pub const EPOCH_LOG_HEADER: [&str; 8] = [
    "epoch",
    "train_loss",
    "val_ndcg_dot",
    "val_ndcg_cos",
    "mag_popular",
    "mag_neutral",
    "mag_unpopular",
    "seconds",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub records: Vec<EpochRecord>,
}

impl EpochLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// First epoch reaching the highest dot-scored validation NDCG.
    pub fn best(&self) -> Option<&EpochRecord> {
        let mut best: Option<&EpochRecord> = None;
        for r in &self.records {
            if best.is_none_or(|b| r.val_ndcg_dot > b.val_ndcg_dot) {
                best = Some(r);
            }
        }
        best
    }

    /// The log with wall-clock columns zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> EpochLog {
        EpochLog {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord { seconds: 0.0, ..*r })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&EPOCH_LOG_HEADER);
        for r in &self.records {
            let mut row = vec![r.epoch.to_string()];
            row.extend(
                [
                    r.train_loss,
                    r.val_ndcg_dot,
                    r.val_ndcg_cos,
                    r.mag_popular,
                    r.mag_neutral,
                    r.mag_unpopular,
                    r.seconds,
                ]
                .iter()
                .map(|&v| fmt_f64(v)),
            );
            t.push(row);
        }
        t
    }

    pub fn from_csv(t: &CsvTable) -> Result<Self> {
        let records = t
            .rows
            .iter()
            .map(|row| {
                Ok(EpochRecord {
                    epoch: cell(row, 0, "epoch")?,
                    train_loss: cell_f64(row, 1, "train_loss")?,
                    val_ndcg_dot: cell_f64(row, 2, "val_ndcg_dot")?,
                    val_ndcg_cos: cell_f64(row, 3, "val_ndcg_cos")?,
                    mag_popular: cell_f64(row, 4, "mag_popular")?,
                    mag_neutral: cell_f64(row, 5, "mag_neutral")?,
                    mag_unpopular: cell_f64(row, 6, "mag_unpopular")?,
                    seconds: cell_f64(row, 7, "seconds")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EpochLog { records })
    }
}

/// Index of the best validation epoch (1-based); 0 for an empty log.
pub fn epochs_to_convergence(log: &EpochLog) -> usize {
    log.best().map_or(0, |r| r.epoch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    /// Best-epoch snapshot (the initialization when no epoch ran).
    pub users: EmbeddingTable,
    pub items: EmbeddingTable,
    pub margins: Option<MarginTable>,
    /// Tables after the last completed epoch.
    pub final_users: EmbeddingTable,
    pub final_items: EmbeddingTable,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_ndcg: f64,
    pub config_hash: u64,
    pub seed: u64,
}

fn stratum_means(mags: &[f64], strata: &StrataAssignment) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut count = [0usize; 3];
    for (j, &m) in mags.iter().enumerate() {
        let s = strata.label(j as u32).index();
        sum[s] += m;
        count[s] += 1;
    }
    std::array::from_fn(|s| {
        if count[s] > 0 {
            sum[s] / count[s] as f64
        } else {
            f64::NAN
        }
    })
}

/// Trains with the configured loss.
pub fn train(config: &TrainConfig, data: &Split) -> Result<(TrainedModel, EpochLog)> {
    train_with_objective(config, data, &config.loss)
}

/// Trains with a caller-supplied objective; weight decay still follows
/// `config.loss.decay`.
pub fn train_with_objective(
    config: &TrainConfig,
    data: &Split,
    objective: &dyn Objective,
) -> Result<(TrainedModel, EpochLog)> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::ZeroInteractions);
    }
    let pop = item_popularity(&data.train);
    let strata = stratify(&pop);
    let (mut users, mut items) =
        config
            .init
            .build(&pop.user_degree, &pop.item_degree, config.dim, config.seed)?;
    let mut margins = (config.loss.kind == LossKind::Mawu)
        .then(|| MarginTable::zeros(users.rows(), items.rows()));
    let val = EvalTarget::validation(data);
    let has_val = val.n_evaluable() > 0;
    if !has_val && config.max_epochs > 0 {
        log::warn!("validation split is empty; early stopping disabled and the last epoch is kept");
    }

    let mut best = (users.clone(), items.clone(), margins.clone());
    let mut best_epoch = 0;
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut log = EpochLog::default();
    let mut rng = seeded_rng(config.seed, 0x7a1e);
    let mut sampler = BatchSampler::new(
        data.train.len(),
        config.batch_size,
        config.loss.negatives_per_positive(),
    )?;
    let eta = config.learning_rate;

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        sampler.start_epoch(&mut rng);
        let mut train_loss = 0.0;
        let mut b = 0;
        while let Some(batch) = sampler.next_batch(&data.train, &mut rng) {
            let out = objective.evaluate(&batch, &users, &items, margins.as_ref())?;
            if !out.loss.is_finite() || !out.grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: out.loss,
                });
            }
            apply_weight_decay(&mut users, &mut items, eta, config.loss.decay, &batch)?;
            out.grads.users.descend(&mut users, eta);
            out.grads.items.descend(&mut items, eta);
            if let Some(m) = margins.as_mut() {
                m.sgd_step(eta, &out.grads);
            }
            train_loss += out.loss;
            b += 1;
        }
        if !users.is_finite() || !items.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: b,
                loss: train_loss,
            });
        }
        let (ndcg_dot, ndcg_cos) = if has_val {
            (
                evaluate(
                    &users,
                    &items,
                    &val,
                    &strata,
                    &config.scorer(Similarity::Dot),
                )?
                .ndcg_overall,
                evaluate(
                    &users,
                    &items,
                    &val,
                    &strata,
                    &config.scorer(Similarity::Cosine),
                )?
                .ndcg_overall,
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        let [mag_popular, mag_neutral, mag_unpopular] = stratum_means(&magnitudes(&items), &strata);
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_ndcg_dot: ndcg_dot,
            val_ndcg_cos: ndcg_cos,
            mag_popular,
            mag_neutral,
            mag_unpopular,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::debug!(
            "epoch {epoch}: loss {train_loss:.6e} val ndcg dot {ndcg_dot:.5} cos {ndcg_cos:.5}"
        );

        if !has_val || ndcg_dot > best_ndcg {
            best = (users.clone(), items.clone(), margins.clone());
            best_epoch = epoch;
            if has_val {
                best_ndcg = ndcg_dot;
            }
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let model = TrainedModel {
        users: best.0,
        items: best.1,
        margins: best.2,
        final_users: users,
        final_items: items,
        best_epoch,
        best_val_ndcg: best_ndcg,
        config_hash: config.fingerprint(),
        seed: config.seed,
    };
    Ok((model, log))
}

/// One cell of a learning-rate x lambda grid.
#[derive(Clone, Debug)]
pub struct GridCell {
    pub learning_rate: f64,
    pub lambda: f64,
    /// Best validation NDCG and the epoch log, or the error message.
    pub outcome: std::result::Result<(f64, EpochLog), String>,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    /// Index into `cells` of the selected run.
    pub best: Option<usize>,
    pub model: Option<TrainedModel>,
}

/// Trains every `(lr, lambda)` combination on the current rayon pool and
/// keeps the run with the highest validation NDCG (earliest cell on ties).
pub fn grid_search(
    base: &TrainConfig,
    lr_grid: &[f64],
    lambda_grid: &[f64],
    data: &Split,
) -> Result<GridResult> {
    if lr_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::config(
            "grid",
            "learning-rate and lambda grids must be nonempty",
        ));
    }
    let combos: Vec<(f64, f64)> = lr_grid
        .iter()
        .flat_map(|&lr| lambda_grid.iter().map(move |&l| (lr, l)))
        .collect();
    let runs: Vec<_> = combos
        .par_iter()
        .map(|&(lr, lambda)| {
            let mut cfg = *base;
            cfg.learning_rate = lr;
            cfg.loss.decay.lambda = lambda;
            (lr, lambda, train(&cfg, data))
        })
        .collect();
    let mut cells = Vec::with_capacity(runs.len());
    let mut best: Option<(usize, f64)> = None;
    let mut model = None;
    for (k, (lr, lambda, run)) in runs.into_iter().enumerate() {
        let outcome = match run {
            Ok((m, log)) => {
                let score = m.best_val_ndcg;
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((k, score));
                    model = Some(m);
                }
                Ok((score, log))
            }
            Err(e) => {
                log::warn!("grid cell lr={lr} lambda={lambda} failed: {e}");
                Err(e.to_string())
            }
        };
        cells.push(GridCell {
            learning_rate: lr,
            lambda,
            outcome,
        });
    }
    Ok(GridResult {
        cells,
        best: best.map(|(k, _)| k),
        model,
    })
}

/// Mean item magnitude per stratum for a table.
pub fn stratum_magnitudes(items: &EmbeddingTable, strata: &StrataAssignment) -> [f64; 3] {
    stratum_means(&magnitudes(items), strata)
}

/// Popular minus unpopular mean item magnitude.
pub fn magnitude_gap(items: &EmbeddingTable, strata: &StrataAssignment) -> f64 {
    let m = stratum_magnitudes(items, strata);
    m[Stratum::Popular.index()] - m[Stratum::Unpopular.index()]
}
