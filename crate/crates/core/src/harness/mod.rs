//! Configuration, replication farming, experiment drivers and CSV output.

pub mod config;
pub mod experiments;
pub mod output;

use std::path::PathBuf;

pub use config::{Experiment, ExperimentConfig, ReferenceConfig, ReferenceProvider, Scale};
pub use experiments::{
    compute_reference, drift_from_ensembles, empirical_variance, recording_grid, run_beta_ensemble,
    run_clt_experiment, run_drift_check, run_meanfield, run_single, run_variance_experiment,
    spearman, summarize, CltReport, DriftReport, Ensemble, Farm, SummaryRow, VarianceReport,
    VarianceRow,
};

use crate::error::Result;
use crate::fluctuation::FluctuationTrace;
use output::{output_path, write_drift, write_summary, write_text, write_traces, write_variance};

/// Runs `cfg` and writes its CSV outputs (plus the effective `config.txt`)
/// to `cfg.out_dir`. Returns the files written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    let mut written = Vec::new();
    let mut emit = |name: &str| {
        let p = output_path(dir, name);
        written.push(p.clone());
        p
    };
    match cfg.experiment {
        config::Experiment::SingleRun => {
            let traces = run_single(cfg)?;
            write_traces(&emit("traces.csv"), &traces)?;
        }
        config::Experiment::MeanfieldRun => {
            let traces = run_meanfield(cfg)?;
            write_traces(&emit("reference.csv"), &traces)?;
        }
        config::Experiment::VarianceReduction => {
            let report = run_variance_experiment(cfg)?;
            write_variance(&emit("variance.csv"), &report)?;
        }
        config::Experiment::CltTrajectory => {
            let report = run_clt_experiment(cfg)?;
            write_clt(cfg, &report, &mut emit)?;
        }
        config::Experiment::DriftCheck => {
            let report = run_drift_check(cfg)?;
            write_drift(&emit("drift.csv"), &report)?;
            write_clt(cfg, &report.clt, &mut emit)?;
        }
    }
    write_text(&emit("config.txt"), &cfg.serialize())?;
    Ok(written)
}

fn write_clt(cfg: &ExperimentConfig, report: &CltReport, emit: &mut impl FnMut(&str) -> PathBuf) -> Result<()> {
    write_traces(&emit("reference.csv"), &report.reference)?;
    let all: Vec<_> = report
        .ensembles
        .iter()
        .flat_map(|e| e.traces.iter().flatten().map(FluctuationTrace::to_trace))
        .collect();
    write_traces(&emit("fluctuations.csv"), &all)?;
    for (p, probe) in cfg.probes.iter().enumerate() {
        let mut rows = Vec::new();
        for e in &report.ensembles {
            rows.extend(summarize(&e.probe(p))?);
        }
        let name = if cfg.probes.len() == 1 {
            "summary.csv".to_string()
        } else {
            format!("summary_{probe}.csv")
        };
        write_summary(&emit(&name), &rows)?;
    }
    Ok(())
}
