//! The nine-cell loss × network × batch grid: `{MSE, SCE, MSCE}` under
//! `Ave/mean` at batch 8, `Max/sum` at batch 16 and `Max/sum` at batch 8.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossKind};
use crate::net::{HeadConfig, NetConfig};
use crate::seeding::derive_seed;
use crate::synth::Sample;
use crate::tensor::{PoolKind, ReduceKind};
use crate::trainer::{self, TrainConfig, DESK_LR0};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    /// Rows sharing a network setting and batch size form a group.
    pub group: usize,
    pub loss: LossKind,
    pub pool: PoolKind,
    pub reduce: ReduceKind,
    pub batch_size: usize,
}

impl Cell {
    pub fn loss_label(&self) -> &'static str {
        match self.loss {
            LossKind::MseSigmoid => "MSE",
            LossKind::Sce => "SCE",
            LossKind::Msce => "MSCE",
        }
    }

    pub fn network_label(&self) -> &'static str {
        match (self.pool, self.reduce) {
            (PoolKind::Average, ReduceKind::Mean) => "Ave/mean",
            (PoolKind::Max, ReduceKind::Sum) => "Max/sum",
            (PoolKind::Average, ReduceKind::Sum) => "Ave/sum",
            (PoolKind::Max, ReduceKind::Mean) => "Max/mean",
        }
    }
}

pub fn grid() -> Vec<Cell> {
    let settings = [
        (PoolKind::Average, ReduceKind::Mean, 8),
        (PoolKind::Max, ReduceKind::Sum, 16),
        (PoolKind::Max, ReduceKind::Sum, 8),
    ];
    let mut cells = Vec::with_capacity(9);
    for (group, (pool, reduce, batch_size)) in settings.into_iter().enumerate() {
        for loss in [LossKind::MseSigmoid, LossKind::Sce, LossKind::Msce] {
            cells.push(Cell {
                group,
                loss,
                pool,
                reduce,
                batch_size,
            });
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOptions {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub patience: usize,
    pub lr0: f64,
    /// Scale count for MSCE cells; `None` uses `log2(S)`.
    pub scales: Option<usize>,
    pub seed: u64,
}

impl Default for AblationOptions {
    fn default() -> Self {
        AblationOptions {
            widths: NetConfig::default().widths,
            epochs: 150,
            patience: 100,
            lr0: DESK_LR0,
            scales: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub seed: u64,
    pub r_aed: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Network and training configuration for `cell` on `size`-pixel images.
pub fn configure(
    cell: &Cell,
    size: usize,
    opts: &AblationOptions,
    seed: u64,
) -> Result<(NetConfig, TrainConfig)> {
    let scales = match cell.loss {
        LossKind::Msce => opts.scales.unwrap_or(size.trailing_zeros() as usize),
        _ => 1,
    };
    let net = NetConfig {
        input_size: size,
        widths: opts.widths.clone(),
        head: HeadConfig {
            pool: cell.pool,
            reduce: cell.reduce,
            scales,
        },
        ..NetConfig::default()
    };
    let cfg = TrainConfig {
        loss: LossConfig::new(cell.loss, scales)?,
        batch_size: cell.batch_size,
        lr0: opts.lr0,
        max_epochs: opts.epochs,
        patience: opts.patience.min(opts.epochs),
        seed,
        ..TrainConfig::default()
    };
    Ok((net, cfg))
}

/// Trains cell `index` of [`grid`] with seed `(opts.seed, index)` and scores
/// it on `test`.
pub fn run_cell(
    index: usize,
    cell: &Cell,
    train: &[Sample],
    test: &[Sample],
    opts: &AblationOptions,
) -> Result<CellResult> {
    let size = train
        .first()
        .ok_or(Error::EmptyInput("training set is empty"))?
        .image
        .shape()[1];
    let seed = derive_seed(opts.seed, index as u64);
    let (net, cfg) = configure(cell, size, opts, seed)?;
    let (params, record) = trainer::train(train, &net, &cfg)?;
    let eval = trainer::evaluate(&params, test)?;
    Ok(CellResult {
        cell: *cell,
        seed,
        r_aed: eval.r_aed,
        best_epoch: record.best_epoch,
        epochs_run: record.last_epoch(),
    })
}

/// `true` for the highest R-AED in each group (first on ties).
pub fn best_per_group(results: &[CellResult]) -> Vec<bool> {
    let mut best = vec![false; results.len()];
    let mut groups: Vec<usize> = results.iter().map(|r| r.cell.group).collect();
    groups.dedup();
    for g in groups {
        let winner = results
            .iter()
            .enumerate()
            .filter(|(_, r)| r.cell.group == g)
            .fold(None::<(usize, f64)>, |acc, (i, r)| match acc {
                Some((_, v)) if v >= r.r_aed => acc,
                _ => Some((i, r.r_aed)),
            });
        if let Some((i, _)) = winner {
            best[i] = true;
        }
    }
    best
}

/// Markdown table with the best cell of each group in bold.
pub fn to_markdown(results: &[CellResult]) -> String {
    let best = best_per_group(results);
    let mut out = String::from("| Loss | Network | Batch Size | R-AED |\n|---|---|---|---|\n");
    for (r, b) in results.iter().zip(best) {
        let score = if b {
            format!("**{:.2}**", r.r_aed)
        } else {
            format!("{:.2}", r.r_aed)
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {score} |",
            r.cell.loss_label(),
            r.cell.network_label(),
            r.cell.batch_size
        );
    }
    out
}

pub fn to_csv(results: &[CellResult]) -> Result<String> {
    let best = best_per_group(results);
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record([
        "loss",
        "network",
        "batch_size",
        "r_aed",
        "best_in_group",
        "seed",
        "best_epoch",
        "epochs_run",
    ])
    .map_err(io)?;
    for (r, b) in results.iter().zip(best) {
        w.write_record([
            r.cell.loss_label().to_string(),
            r.cell.network_label().to_string(),
            r.cell.batch_size.to_string(),
            r.r_aed.to_string(),
            b.to_string(),
            r.seed.to_string(),
            r.best_epoch.to_string(),
            r.epochs_run.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
