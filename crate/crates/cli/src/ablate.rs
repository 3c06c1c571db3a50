use std::fs;

use rayon::prelude::*;

use msce_core::ablation::{self, AblationOptions, CellResult};
use msce_core::Sample;

use crate::{load_data, AblateArgs, CliError, CliResult};

/// Worker count: `MSCE_THREADS` if set, else the available parallelism.
fn threads() -> CliResult<usize> {
    match std::env::var("MSCE_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|n| *n > 0).ok_or_else(|| {
            CliError::Usage(format!(
                "MSCE_THREADS must be a positive integer, got `{v}`"
            ))
        }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn run(a: AblateArgs) -> CliResult {
    let data = load_data(&a.data)?;
    let (train, test): (Vec<Sample>, Vec<Sample>) = match &a.test {
        Some(path) => (data.samples, load_data(path)?.samples),
        None => {
            let mut samples = data.samples;
            let held = samples.split_off(samples.len() - samples.len() / 5);
            (samples, held)
        }
    };
    if test.is_empty() {
        return Err(CliError::Data("test split is empty".into()));
    }
    let opts = AblationOptions {
        widths: a.net.widths,
        epochs: a.epochs,
        patience: a.patience,
        lr0: a.net.lr,
        scales: a.scales,
        seed: a.net.seed,
    };
    let cells = ablation::grid();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads()?)
        .build()
        .map_err(CliError::io)?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, cell)| {
                let r = ablation::run_cell(i, cell, &train, &test, &opts);
                if let Ok(r) = &r {
                    eprintln!(
                        "{} {} batch {}: R-AED {:.4}",
                        cell.loss_label(),
                        cell.network_label(),
                        cell.batch_size,
                        r.r_aed
                    );
                }
                r
            })
            .collect::<Result<_, _>>()
    })?;

    fs::create_dir_all(&a.out).map_err(CliError::io)?;
    let table = ablation::to_markdown(&results);
    fs::write(a.out.join("ablation.md"), &table).map_err(CliError::io)?;
    fs::write(a.out.join("ablation.csv"), ablation::to_csv(&results)?).map_err(CliError::io)?;
    print!("{table}");
    Ok(())
}
