use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::IgnoredAny;

use super::config::RunConfig;
use super::runlog::{read_round_logs, RoundLog};
use super::RunError;
use crate::plotting::{self, PlotSpec};

pub const MSE_PLOT_NAME: &str = "mse_over_rounds";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

/// The lowercase name an enum option has in the config file.
fn config_name<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_value(value).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// Builds `report.md` text and the MSE-over-rounds plot spec from the run
/// directory's config and round logs only.
pub fn build_report(out_dir: &Path) -> Result<(String, PlotSpec), RunError> {
    let cfg_path = out_dir.join("config.json");
    let config = std::fs::read_to_string(&cfg_path)
        .map_err(|e| RunError::CorruptLog { path: cfg_path.display().to_string(), message: e.to_string() })
        .and_then(|t| {
            RunConfig::from_json(&t)
                .map_err(|e| RunError::CorruptLog { path: cfg_path.display().to_string(), message: e.to_string() })
        })?;
    let logs: Vec<RoundLog<IgnoredAny>> = read_round_logs(out_dir)?;
    let last = logs.last().expect("read_round_logs returns at least one log");

    let mut md = String::new();
    let _ = writeln!(md, "# Discovery report\n");
    let _ = writeln!(md, "- data: {}", config.data.as_deref().unwrap_or("(inline)"));
    let _ = writeln!(md, "- mode: {}", config_name(&config.mode));
    let _ = writeln!(md, "- rounds completed: {} of {}", logs.len(), config.effective_rounds());
    let _ = writeln!(md, "- proposer: {}", last.proposer);
    let _ = writeln!(md, "- evaluator: {}", config_name(&config.evaluator));
    let _ = writeln!(md, "- alpha: {}", config.effective_alpha());
    let _ = writeln!(md, "- top_k: {}", config.top_k);
    let _ = writeln!(md, "- seed: {}", config.seed);
    let _ = writeln!(md, "\n## Best model\n");
    let _ = writeln!(md, "`{}`\n", last.best.model);
    let _ = writeln!(md, "| quantity | value |");
    let _ = writeln!(md, "|---|---|");
    let _ = writeln!(md, "| {} | {:.6} |", last.best.score_name, last.best.score);
    for (k, v) in &last.best.details {
        let _ = writeln!(md, "| {k} | {v:.6} |");
    }
    let _ = writeln!(md, "| train RMSE | {} |", fmt_opt(last.rmse.train));
    let _ = writeln!(md, "| validation RMSE | {} |", fmt_opt(last.rmse.val));
    let _ = writeln!(md, "| test RMSE | {} |", fmt_opt(last.rmse.test));

    let _ = writeln!(md, "\n## Rounds (normalized scale)\n");
    let _ = writeln!(md, "| round | best model | {} | candidates | train RMSE | val RMSE | test RMSE |", last.best.score_name);
    let _ = writeln!(md, "|---|---|---|---|---|---|---|");
    for log in &logs {
        let _ = writeln!(
            md,
            "| {} | `{}` | {:.6} | {} | {} | {} | {} |",
            log.round,
            log.best.model,
            log.best.score,
            log.candidates.len(),
            fmt_opt(log.rmse.train),
            fmt_opt(log.rmse.val),
            fmt_opt(log.rmse.test)
        );
    }
    let _ = writeln!(md, "\n![MSE over rounds](plots/{MSE_PLOT_NAME}.png)");
    let _ = writeln!(md, "\nLines: black = train MSE, red = test MSE.");

    let x: Vec<f64> = logs.iter().map(|l| l.round as f64).collect();
    let sq = |v: Option<f64>| v.map(|r| r * r).unwrap_or(0.0);
    let train: Vec<f64> = logs.iter().map(|l| sq(l.rmse.train)).collect();
    let test: Vec<f64> = logs.iter().map(|l| sq(l.rmse.test)).collect();
    let spec = if logs.iter().any(|l| l.rmse.test.is_some()) {
        PlotSpec::series(MSE_PLOT_NAME, "MSE over rounds", &x, &[&train, &test])
    } else {
        PlotSpec::series(MSE_PLOT_NAME, "MSE over rounds", &x, &[&train])
    };
    Ok((md, spec))
}

/// Writes `report.md` and `plots/mse_over_rounds.png`.
pub fn write_report(out_dir: &Path) -> Result<PathBuf, RunError> {
    let (md, spec) = build_report(out_dir)?;
    let plots = out_dir.join("plots");
    plotting::render(&spec, &plots).map_err(|e| RunError::Io { path: plots.display().to_string(), message: e.to_string() })?;
    let path = out_dir.join("report.md");
    std::fs::write(&path, md).map_err(|e| RunError::io(&path, e))?;
    Ok(path)
}
