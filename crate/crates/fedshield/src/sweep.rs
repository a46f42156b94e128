//! Cross-product of malicious ratios and aggregation rules, one table row
//! per cell. A failing cell becomes an `error` row; the sweep goes on.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fedshield_core::defense::DefenseMode;
use fedshield_core::probe::ProbeModel;
use fedshield_core::simulator::{run_experiment, AggregatorKind, ExperimentConfig, Summary};

use crate::cache::{obtain_probe, probe_cache_key};
use crate::error::{CliError, Result};

pub const THREADS_ENV: &str = "FEDSHIELD_THREADS";

pub const HEADER: [&str; 14] = [
    "ratio",
    "mode",
    "aggregator",
    "status",
    "benign_accuracy",
    "attack_success",
    "initial_benign_accuracy",
    "initial_attack_success",
    "tpr",
    "fpr",
    "precision",
    "mcc",
    "skips",
    "error",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub ratio: f64,
    pub aggregator: AggregatorKind,
}

/// Ratios outermost; within a ratio, the modes' rules then the extra
/// aggregators, duplicates dropped.
pub fn cells(ratios: &[f64], modes: &[DefenseMode], aggregators: &[AggregatorKind]) -> Vec<Cell> {
    let mut rules: Vec<AggregatorKind> = Vec::new();
    for a in modes.iter().map(|&m| AggregatorKind::for_mode(m)).chain(aggregators.iter().copied()) {
        if !rules.contains(&a) {
            rules.push(a);
        }
    }
    ratios
        .iter()
        .flat_map(|&ratio| rules.iter().map(move |&aggregator| Cell { ratio, aggregator }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub cell: Cell,
    pub result: std::result::Result<Summary, String>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl Row {
    pub fn fields(&self) -> [String; 14] {
        let head = [
            self.cell.ratio.to_string(),
            self.cell.aggregator.defense_mode().as_str().to_string(),
            self.cell.aggregator.as_str().to_string(),
        ];
        match &self.result {
            Ok(s) => [
                head[0].clone(),
                head[1].clone(),
                head[2].clone(),
                "ok".into(),
                format!("{:.6}", s.final_eval.benign_accuracy),
                format!("{:.6}", s.final_eval.attack_success),
                format!("{:.6}", s.initial.benign_accuracy),
                format!("{:.6}", s.initial.attack_success),
                opt(s.detection.tpr),
                opt(s.detection.fpr),
                opt(s.detection.precision),
                opt(s.detection.mcc),
                s.skip_count.to_string(),
                String::new(),
            ],
            Err(e) => {
                let mut f: [String; 14] = Default::default();
                f[..3].clone_from_slice(&head);
                f[3] = "error".into();
                f[13] = e.clone();
                f
            }
        }
    }
}

pub fn cell_config(base: &ExperimentConfig, cell: Cell) -> ExperimentConfig {
    let mut c = base.clone().with_aggregator(cell.aggregator);
    c.malicious_ratio = cell.ratio;
    c
}

/// Worker count: `FEDSHIELD_THREADS` if set and positive, else the
/// machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub threads: usize,
    /// Shared probe cache directory.
    pub cache_dir: PathBuf,
    /// Explicit probe checkpoint used for every defended cell.
    pub probe: Option<ProbeModel>,
}

/// Runs every cell; rows come back in cell order regardless of threading.
pub fn run_sweep(base: &ExperimentConfig, cells: &[Cell], opts: &SweepOptions) -> Vec<Row> {
    // Probes first, once per distinct cache key, so cells only read them.
    let mut probes: HashMap<String, std::result::Result<ProbeModel, String>> = HashMap::new();
    let configs: Vec<std::result::Result<ExperimentConfig, String>> = cells
        .iter()
        .map(|&cell| {
            let c = cell_config(base, cell);
            c.validate().map(|_| c).map_err(|e| e.to_string())
        })
        .collect();
    if opts.probe.is_none() {
        for c in configs.iter().flatten() {
            if c.defense.mode != DefenseMode::None {
                probes.entry(probe_cache_key(c)).or_insert_with(|| {
                    obtain_probe(c, &opts.cache_dir)
                        .map(|p| p.model)
                        .map_err(|e| format!("probe: {e}"))
                });
            }
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Row>>> = Mutex::new(vec![None; cells.len()]);
    let workers = opts.threads.clamp(1, cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let result = configs[i].clone().and_then(|c| {
                    let probe = if c.defense.mode == DefenseMode::None {
                        None
                    } else if let Some(p) = &opts.probe {
                        Some(p.clone())
                    } else {
                        Some(probes[&probe_cache_key(&c)].clone()?)
                    };
                    run_experiment(&c, probe).map(|o| o.summary).map_err(|e| e.to_string())
                });
                results.lock().expect("no worker panics while holding the lock")[i] = Some(Row { cell: cells[i], result });
            });
        }
    });
    results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

pub fn write_table<W: std::io::Write>(out: W, rows: &[Row]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table_file(path: &Path, rows: &[Row]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(CliError::io(path))?;
    write_table(file, rows).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_ratios_by_three_modes_is_twelve_cells() {
        let c = cells(
            &[0.2, 0.3, 0.4, 0.5],
            &[DefenseMode::None, DefenseMode::Step, DefenseMode::Shadow],
            &[],
        );
        assert_eq!(c.len(), 12);
        assert_eq!(c[0], Cell { ratio: 0.2, aggregator: AggregatorKind::FedAvg });
        assert_eq!(c[11], Cell { ratio: 0.5, aggregator: AggregatorKind::SafeShadow });
    }

    #[test]
    fn aggregators_extend_the_modes_without_duplicates() {
        let c = cells(&[0.3], &[DefenseMode::None], &[AggregatorKind::FedAvg, AggregatorKind::Krum]);
        let rules: Vec<_> = c.iter().map(|c| c.aggregator).collect();
        assert_eq!(rules, [AggregatorKind::FedAvg, AggregatorKind::Krum]);
    }

    #[test]
    fn error_rows_keep_the_schema() {
        let row = Row {
            cell: Cell { ratio: 0.3, aggregator: AggregatorKind::Krum },
            result: Err("krum needs clients_per_round >= f + 3, got 3".into()),
        };
        let f = row.fields();
        assert_eq!(f.len(), HEADER.len());
        assert_eq!(f[3], "error");
        let mut buf = Vec::new();
        write_table(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().contains("\"krum needs clients_per_round >= f + 3, got 3\""));
    }
}
