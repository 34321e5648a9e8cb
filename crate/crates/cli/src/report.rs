//! Report composition from stored run artifacts. Nothing here trains or
//! evaluates; a report is a pure function of the run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ser_core::metrics::CccReport;
use ser_core::{Dimension, Partition};

use crate::error::{CliError, CliResult};
use crate::run::{RunManifest, RunSummary};

/// `100 (variant - base) / base`; undefined for `base <= 0`.
pub fn relative_improvement(base: f64, variant: f64) -> Option<f64> {
    (base > 0.0 && base.is_finite() && variant.is_finite()).then(|| 100.0 * (variant - base) / base)
}

/// `+58.2%`, `-10.0%`, `0.0%` or `n/a`.
pub fn format_improvement(value: Option<f64>) -> String {
    match value {
        None => "n/a".to_owned(),
        Some(v) if v.abs() < 0.05 => "0.0%".to_owned(),
        Some(v) => format!("{v:+.1}%"),
    }
}

pub fn eval_file(partition: Partition) -> String {
    format!("eval_{}.json", partition.name())
}

pub fn write_eval(dir: &Path, report: &CccReport) -> CliResult<PathBuf> {
    let path = dir.join(eval_file(report.partition));
    fs::write(&path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(path)
}

pub fn read_eval(dir: &Path, partition: Partition) -> CliResult<Option<CccReport>> {
    let path = dir.join(eval_file(partition));
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let report = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Some(report))
}

/// One line of the machine-readable CCC table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CccRow {
    pub run: String,
    pub modality: String,
    pub regime: String,
    pub audio_encoder: String,
    pub text_encoder: String,
    pub parameters: usize,
    pub split: String,
    pub arousal: f64,
    pub valence: f64,
    pub dominance: f64,
}

impl CccRow {
    pub fn scores(&self) -> [f64; 3] {
        [self.arousal, self.valence, self.dominance]
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Values are written in shortest round-trip form, so reading the table
/// back recovers them bit for bit.
pub fn write_ccc_table(path: &Path, rows: &[CccRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ccc_table(path: &Path) -> CliResult<Vec<CccRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

/// One stored run as seen by the report.
#[derive(Debug, Clone)]
struct LoadedRun {
    name: String,
    summary: RunSummary,
    seen: Option<CccReport>,
    unseen: Option<CccReport>,
}

/// Artifacts written by [`compose_report`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportOutput {
    pub markdown: String,
    /// Human-readable reasons, one per missing or partial run.
    pub missing: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn fmt_params(n: usize) -> String {
    if n < 100_000 {
        format!("{:.1}k", n as f64 / 1e3)
    } else {
        format!("{:.1}M", n as f64 / 1e6)
    }
}

fn fmt_scores(report: Option<&CccReport>) -> String {
    match report {
        Some(r) => r.scores().map(|v| format!("{v:.3}")).join(" | "),
        None => "– | – | –".to_owned(),
    }
}

/// Reads every run directory and writes `report.md`, `ccc_table.csv`,
/// `relative_improvement.csv` / `.png` and probe plots into `out`.
pub fn compose_report(runs: &[PathBuf], out: &Path) -> CliResult<ReportOutput> {
    fs::create_dir_all(out)?;
    let mut output = ReportOutput::default();
    let mut loaded = Vec::new();
    let mut probes = Vec::new();
    for dir in runs {
        let name = run_name(dir);
        if !dir.join(crate::run::RUN_MANIFEST).is_file() {
            output.missing.push(format!("missing run: {name} (no {} in {})", crate::run::RUN_MANIFEST, dir.display()));
            continue;
        }
        let manifest = RunManifest::read(dir)?;
        let Some(summary) = manifest.summary else {
            output.missing.push(format!("missing run: {name} ({} run has no model summary)", manifest.command));
            continue;
        };
        if summary.regime == "probe" {
            probes.push((name, dir.clone(), summary));
            continue;
        }
        let seen = read_eval(dir, Partition::Test1)?;
        let unseen = read_eval(dir, Partition::Test2)?;
        for (p, r) in [(Partition::Test1, &seen), (Partition::Test2, &unseen)] {
            if r.is_none() {
                output.missing.push(format!("missing run: {name} (no {} evaluation)", p.name()));
            }
        }
        loaded.push(LoadedRun { name, summary, seen, unseen });
    }

    let md = &mut output.markdown;
    md.push_str("# Emotion recognition report\n\n");
    if !loaded.is_empty() {
        md.push_str("## CCC by modality\n\n");
        md.push_str(&format!(
            "| Model | Regime | Params | {seen} A | {seen} V | {seen} D | {unseen} A | {unseen} V | {unseen} D |\n",
            seen = Partition::Test1.scenario_label().unwrap_or("test1"),
            unseen = Partition::Test2.scenario_label().unwrap_or("test2"),
        ));
        md.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for modality in ["Audio", "Audio + Text"] {
            let group: Vec<&LoadedRun> = loaded.iter().filter(|r| r.summary.modality() == modality).collect();
            if group.is_empty() {
                continue;
            }
            let _ = writeln!(md, "| **{modality}** | | | | | | | | |");
            for r in group {
                let model = match &r.summary.text_encoder {
                    Some(t) => format!("{} + {t}", r.summary.audio_encoder),
                    None => r.summary.audio_encoder.clone(),
                };
                let _ = writeln!(
                    md,
                    "| {model} ({}) | {} | {} | {} | {} |",
                    r.name,
                    r.summary.regime,
                    fmt_params(r.summary.parameters),
                    fmt_scores(r.seen.as_ref()),
                    fmt_scores(r.unseen.as_ref())
                );
            }
        }
        md.push('\n');

        let rows: Vec<CccRow> = loaded
            .iter()
            .flat_map(|r| {
                [&r.seen, &r.unseen].into_iter().flatten().map(|report| CccRow {
                    run: r.name.clone(),
                    modality: r.summary.modality().to_owned(),
                    regime: r.summary.regime.clone(),
                    audio_encoder: r.summary.audio_encoder.clone(),
                    text_encoder: r.summary.text_encoder.clone().unwrap_or_default(),
                    parameters: r.summary.parameters,
                    split: report.partition.name().to_owned(),
                    arousal: report.get(Dimension::Arousal),
                    valence: report.get(Dimension::Valence),
                    dominance: report.get(Dimension::Dominance),
                })
            })
            .collect();
        let table = out.join("ccc_table.csv");
        write_ccc_table(&table, &rows)?;
        output.files.push(table);
        improvement_section(&loaded, out, &mut output)?;
    }
    if !probes.is_empty() {
        probe_section(&probes, out, &mut output)?;
    }
    if !output.missing.is_empty() {
        output.markdown.push_str("## Missing runs\n\n");
        for m in output.missing.clone() {
            let _ = writeln!(output.markdown, "- {m}");
        }
        output.markdown.push('\n');
    }
    let path = out.join("report.md");
    fs::write(&path, &output.markdown)?;
    output.files.push(path);
    Ok(output)
}

/// Valence gain of audio+text runs over the audio-only run sharing their
/// audio encoder.
fn improvement_section(runs: &[LoadedRun], out: &Path, output: &mut ReportOutput) -> CliResult<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        audio_encoder: &'a str,
        base_run: &'a str,
        variant_run: &'a str,
        variant_regime: &'a str,
        split: &'static str,
        base_valence: f64,
        variant_valence: f64,
        relative_improvement: String,
    }
    let mut rows = Vec::new();
    let mut bars = Vec::new();
    for base in runs.iter().filter(|r| r.summary.text_encoder.is_none()) {
        for variant in runs
            .iter()
            .filter(|r| r.summary.text_encoder.is_some() && r.summary.audio_encoder == base.summary.audio_encoder)
        {
            for (split, b, v) in [
                (Partition::Test1, &base.seen, &variant.seen),
                (Partition::Test2, &base.unseen, &variant.unseen),
            ] {
                let (Some(b), Some(v)) = (b, v) else { continue };
                let (bv, vv) = (b.get(Dimension::Valence), v.get(Dimension::Valence));
                let gain = relative_improvement(bv, vv);
                if let Some(g) = gain {
                    bars.push(g);
                }
                rows.push(Row {
                    audio_encoder: &base.summary.audio_encoder,
                    base_run: &base.name,
                    variant_run: &variant.name,
                    variant_regime: &variant.summary.regime,
                    split: split.scenario_label().unwrap_or("test"),
                    base_valence: bv,
                    variant_valence: vv,
                    relative_improvement: format_improvement(gain),
                });
            }
        }
    }
    if rows.is_empty() {
        return Ok(());
    }
    let md = &mut output.markdown;
    md.push_str("## Relative valence improvement of audio + text over audio\n\n");
    md.push_str("| Audio encoder | Variant | Scenario | Audio | Audio + Text | Improvement |\n|---|---|---|---|---|---|\n");
    for r in &rows {
        let _ = writeln!(
            md,
            "| {} | {} ({}) | {} | {:.3} | {:.3} | {} |",
            r.audio_encoder, r.variant_run, r.variant_regime, r.split, r.base_valence, r.variant_valence, r.relative_improvement
        );
    }
    let csv_path = out.join("relative_improvement.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err(&csv_path))?;
    for r in &rows {
        w.serialize(r).map_err(csv_err(&csv_path))?;
    }
    w.flush()?;
    output.files.push(csv_path);
    if !bars.is_empty() {
        let png = out.join("relative_improvement.png");
        ser_core::plot::write_bar_chart(&png, &bars)?;
        output.markdown.push_str("\n![relative improvement](relative_improvement.png)\n");
        output.files.push(png);
    }
    output.markdown.push('\n');
    Ok(())
}

fn probe_section(probes: &[(String, PathBuf, RunSummary)], out: &Path, output: &mut ReportOutput) -> CliResult<()> {
    output.markdown.push_str("## Layer importance\n\n");
    for (name, dir, summary) in probes {
        let mut any = false;
        for dim in Dimension::ALL {
            let table = dir.join(format!("probe_{}.csv", dim.name()));
            if !table.is_file() {
                continue;
            }
            any = true;
            let weights = ser_model::probe::read_profile_table(&table)?;
            let png = out.join(format!("probe_{name}_{}.png", dim.name()));
            ser_core::plot::write_bar_chart(&png, &weights)?;
            let peak = ser_core::layers::argmax(&weights).unwrap_or(0);
            let _ = writeln!(
                output.markdown,
                "**{} / {}**: peak at layer {peak} ({:.3})\n\n![{}](probe_{name}_{}.png)\n\n| Layer | {} |\n|---|{}",
                summary.audio_encoder,
                dim.name(),
                weights[peak],
                dim.name(),
                dim.name(),
                (0..weights.len()).map(|i| i.to_string()).collect::<Vec<_>>().join(" | "),
                "---|".repeat(weights.len())
            );
            let _ = writeln!(
                output.markdown,
                "| weight | {} |\n",
                weights.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>().join(" | ")
            );
            output.files.push(png);
        }
        if !any {
            output.missing.push(format!("missing run: {name} (probe run without profile tables)"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_examples() {
        assert_eq!(format_improvement(relative_improvement(0.328, 0.519)), "+58.2%");
        assert_eq!(format_improvement(relative_improvement(0.2, 0.4)), "+100.0%");
        assert_eq!(format_improvement(relative_improvement(0.5, 0.45)), "-10.0%");
        assert_eq!(format_improvement(relative_improvement(0.4, 0.4)), "0.0%");
        assert_eq!(relative_improvement(0.4, 0.4), Some(0.0));
        assert_eq!(format_improvement(relative_improvement(0.0, 0.4)), "n/a");
        assert_eq!(format_improvement(relative_improvement(-0.1, 0.4)), "n/a");
    }

    #[test]
    fn ccc_table_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let row = |split: &str, v: f64| CccRow {
            run: "r1".into(),
            modality: "Audio + Text".into(),
            regime: "audiotext_ft".into(),
            audio_encoder: "distilhubert".into(),
            text_encoder: "tinybert-4l".into(),
            parameters: 38_900_000,
            split: split.into(),
            arousal: 0.1 + 0.2,
            valence: v,
            dominance: -1.0 / 3.0,
        };
        let rows = vec![row("test1", 0.519), row("test2", std::f64::consts::PI / 7.0)];
        write_ccc_table(&path, &rows).unwrap();
        assert_eq!(read_ccc_table(&path).unwrap(), rows);
    }
}
