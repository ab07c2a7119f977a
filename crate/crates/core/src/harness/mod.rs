//! Experiment harness: configuration, the round loop, CSV and SVG output,
//! and the bundled figure recipes.

pub mod config;
pub mod metrics;
pub mod plot;
pub mod runner;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use config::Experiment;
use plot::{PlotKind, PlotLabels};
use runner::ArmResult;

/// Bundled figure recipes, in desk scale.
pub const RECIPES: [(&str, &str); 5] = [
    ("fig2", include_str!("../../recipes/fig2.toml")),
    ("fig3", include_str!("../../recipes/fig3.toml")),
    ("fig4", include_str!("../../recipes/fig4.toml")),
    ("fig5", include_str!("../../recipes/fig5.toml")),
    ("fig6", include_str!("../../recipes/fig6.toml")),
];

pub fn recipe(name: &str) -> Option<&'static str> {
    RECIPES.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// Files written for one experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outputs {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub snapshot: PathBuf,
    pub summary: PathBuf,
    /// Per-arm tables in the plain schema; only for multi-arm experiments.
    pub arm_csvs: Vec<PathBuf>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `<name>.csv`, `<name>.svg`, `<name>.summary.csv`, the resolved
/// snapshot `<name>.resolved.toml`, and `<name>-<arm>.csv` for each arm when
/// there is more than one.
pub fn write_outputs(exp: &Experiment, results: &[ArmResult], dir: &Path) -> Result<Outputs> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = exp.name();
    let path = |suffix: &str| dir.join(format!("{name}{suffix}"));
    let outputs = Outputs {
        csv: path(".csv"),
        svg: path(".svg"),
        snapshot: path(".resolved.toml"),
        summary: path(".summary.csv"),
        arm_csvs: if exp.is_multi_arm() {
            results.iter().map(|a| path(&format!("-{}.csv", a.label))).collect()
        } else {
            Vec::new()
        },
    };
    write(&outputs.snapshot, &exp.snapshot()?)?;
    if exp.is_multi_arm() {
        write(&outputs.csv, &metrics::combined_to_string(results))?;
        for (arm, p) in results.iter().zip(&outputs.arm_csvs) {
            metrics::emit_csv(arm.metrics(), p)?;
        }
    } else {
        metrics::emit_csv(results.iter().flat_map(ArmResult::metrics), &outputs.csv)?;
    }
    let summaries: Vec<_> = results.iter().map(|a| &a.summary).collect();
    write(&outputs.summary, &metrics::summary_to_string(&summaries))?;
    let labels = PlotLabels {
        title: exp.base.plot.title.clone().unwrap_or_else(|| name.to_string()),
        x_label: exp.base.plot.x_label.clone(),
        y_label: exp.base.plot.y_label.clone(),
    };
    plot::emit_plot(&summaries, PlotKind::Accuracy, &labels, &outputs.svg)?;
    Ok(outputs)
}
