//! Scoring over step traces: action matching, routing confusion, action-type
//! divergence, latency by mode and the latent-count sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action::{ActionDecision, ActionType, PathLabel};
use crate::control::{Controller, InferenceMode, StepTrace};
use crate::enhance::{enhance_corpus, EnhanceConfig, EnhancedCorpus, PromptStyle};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::sim::Corpus;
use crate::train::{run_recipe, Recipe};

pub const DEFAULT_TAU: f64 = 0.14;

fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Type equality, plus touch and lift within `tau` for clicks and selects,
/// and case- and whitespace-insensitive text equality for typing.
pub fn match_action(pred: &ActionDecision, gt: &ActionDecision, tau: f64) -> bool {
    if pred.action_type != gt.action_type {
        return false;
    }
    match gt.action_type {
        ActionType::Click | ActionType::Select => {
            let near = |a: Option<crate::action::Point>, b: Option<crate::action::Point>| match (a, b) {
                (Some(a), Some(b)) => a.distance(b) <= tau,
                _ => false,
            };
            near(pred.touch_point, gt.touch_point) && near(pred.lift_point, gt.lift_point)
        }
        ActionType::Type => normalize_text(&pred.typed_text) == normalize_text(&gt.typed_text),
        _ => true,
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Alignment { expected, actual });
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCount {
    pub total: usize,
    pub matches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmsReport {
    pub total: usize,
    pub matches: usize,
    pub ams_percent: f64,
    pub parse_failures: usize,
    /// Keyed by the ground-truth action type.
    pub by_type: BTreeMap<String, TypeCount>,
}

pub fn compute_ams(traces: &[StepTrace], gt: &[ActionDecision], tau: f64) -> Result<AmsReport> {
    check_len(gt.len(), traces.len())?;
    let mut r = AmsReport {
        total: gt.len(),
        matches: 0,
        ams_percent: 0.0,
        parse_failures: 0,
        by_type: BTreeMap::new(),
    };
    for (t, g) in traces.iter().zip(gt) {
        let ok = match &t.action {
            Some(p) => match_action(p, g, tau),
            None => {
                r.parse_failures += 1;
                false
            }
        };
        let e = r.by_type.entry(g.action_type.wire_name().to_string()).or_default();
        e.total += 1;
        if ok {
            e.matches += 1;
            r.matches += 1;
        }
    }
    r.ams_percent = if r.total == 0 { 0.0 } else { 100.0 * r.matches as f64 / r.total as f64 };
    Ok(r)
}

/// Rows are predicted paths, columns are labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathDistribution {
    pub pred_fast_label_fast: usize,
    pub pred_fast_label_slow: usize,
    pub pred_slow_label_fast: usize,
    pub pred_slow_label_slow: usize,
    pub total: usize,
    pub routing_accuracy: f64,
}

pub fn path_stats(traces: &[StepTrace], labels: &[PathLabel]) -> Result<PathDistribution> {
    check_len(labels.len(), traces.len())?;
    let mut d = PathDistribution {
        total: labels.len(),
        ..Default::default()
    };
    for (t, &l) in traces.iter().zip(labels) {
        match (t.path, l) {
            (PathLabel::Fast, PathLabel::Fast) => d.pred_fast_label_fast += 1,
            (PathLabel::Fast, PathLabel::Slow) => d.pred_fast_label_slow += 1,
            (PathLabel::Slow, PathLabel::Fast) => d.pred_slow_label_fast += 1,
            (PathLabel::Slow, PathLabel::Slow) => d.pred_slow_label_slow += 1,
        }
    }
    let right = d.pred_fast_label_fast + d.pred_slow_label_slow;
    d.routing_accuracy = if d.total == 0 { 0.0 } else { right as f64 / d.total as f64 };
    Ok(d)
}

/// `|freq_pred − freq_gt|` per action type in percentage points. Predictions
/// that failed to parse count toward the total but toward no type.
pub fn divergence_report(pred: &[Option<ActionType>], gt: &[ActionType]) -> Result<BTreeMap<String, f64>> {
    check_len(gt.len(), pred.len())?;
    let n = gt.len().max(1) as f64;
    Ok(ActionType::ALL
        .iter()
        .map(|&t| {
            let p = pred.iter().filter(|x| **x == Some(t)).count() as f64;
            let g = gt.iter().filter(|x| **x == t).count() as f64;
            (t.wire_name().to_string(), 100.0 * (p - g).abs() / n)
        })
        .collect())
}

/// Runs the controller over every sample, in order.
pub fn evaluate(controller: &Controller, corpus: &EnhancedCorpus, mode: InferenceMode) -> Result<Vec<StepTrace>> {
    corpus
        .samples
        .iter()
        .map(|s| controller.predict_sample(corpus, s, mode))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: InferenceMode,
    pub ams: AmsReport,
    /// AMS over the Slow-labelled steps only.
    pub slow_subset_ams: f64,
    pub paths: PathDistribution,
    pub divergence: BTreeMap<String, f64>,
    pub perception_invocations: usize,
    pub bops: usize,
    pub slow_traces: usize,
    pub tokens: usize,
}

/// Everything but timing, so two runs compare bitwise.
pub fn mode_report(traces: &[StepTrace], corpus: &EnhancedCorpus, tau: f64) -> Result<ModeReport> {
    let gt: Vec<ActionDecision> = corpus.samples.iter().map(|s| s.target_action.clone()).collect();
    let labels: Vec<PathLabel> = corpus.samples.iter().map(|s| s.path_label).collect();
    let ams = compute_ams(traces, &gt, tau)?;
    let (slow_t, slow_g): (Vec<StepTrace>, Vec<ActionDecision>) = traces
        .iter()
        .zip(&gt)
        .zip(&labels)
        .filter(|(_, &l)| l == PathLabel::Slow)
        .map(|((t, g), _)| (t.clone(), g.clone()))
        .unzip();
    let slow = compute_ams(&slow_t, &slow_g, tau)?;
    let pred_types: Vec<Option<ActionType>> = traces.iter().map(|t| t.action.as_ref().map(|a| a.action_type)).collect();
    let gt_types: Vec<ActionType> = gt.iter().map(|a| a.action_type).collect();
    Ok(ModeReport {
        mode: traces.first().map_or(InferenceMode::Adaptive, |t| t.mode),
        ams,
        slow_subset_ams: slow.ams_percent,
        paths: path_stats(traces, &labels)?,
        divergence: divergence_report(&pred_types, &gt_types)?,
        perception_invocations: traces.iter().map(|t| t.perception_invocations).sum(),
        bops: traces.iter().map(|t| t.bops).sum(),
        slow_traces: traces.iter().filter(|t| t.path == PathLabel::Slow).count(),
        tokens: traces.iter().map(|t| t.tokens).sum(),
    })
}

pub fn format_mode_report(r: &ModeReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode {}", r.mode.name());
    let _ = writeln!(
        s,
        "AMS {:.2} ({}/{}), parse failures {}, slow-subset AMS {:.2}",
        r.ams.ams_percent, r.ams.matches, r.ams.total, r.ams.parse_failures, r.slow_subset_ams
    );
    let p = &r.paths;
    let _ = writeln!(s, "routing accuracy {:.4}", p.routing_accuracy);
    let _ = writeln!(s, "{:<14}{:>12}{:>12}", "", "label fast", "label slow");
    let _ = writeln!(s, "{:<14}{:>12}{:>12}", "pred fast", p.pred_fast_label_fast, p.pred_fast_label_slow);
    let _ = writeln!(s, "{:<14}{:>12}{:>12}", "pred slow", p.pred_slow_label_fast, p.pred_slow_label_slow);
    let _ = writeln!(s, "{:<24}{:>8}{:>8}{:>10}", "action type", "total", "match", "diverge");
    for t in ActionType::ALL {
        let name = t.wire_name();
        let c = r.ams.by_type.get(name).cloned().unwrap_or_default();
        let _ = writeln!(s, "{:<24}{:>8}{:>8}{:>10.2}", name, c.total, c.matches, r.divergence[name]);
    }
    let _ = writeln!(
        s,
        "perception invocations {}, <bop> emitted {}, slow traces {}, tokens {}",
        r.perception_invocations, r.bops, r.slow_traces, r.tokens
    );
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub mode: InferenceMode,
    pub steps: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub mean_tokens: f64,
    pub ams: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    /// `Some(holds)` when the Fast < Adaptive < Slow check ran.
    pub ordering: Option<bool>,
    pub tokens_ordered: bool,
    pub note: String,
}

const TIMER_RESOLUTION_US: f64 = 1.0;

fn median(v: &mut [u64]) -> f64 {
    v.sort_unstable();
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2] as f64,
        n => (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0,
    }
}

pub fn latency_row(mode: InferenceMode, traces: &[StepTrace], corpus: &EnhancedCorpus, tau: f64) -> Result<LatencyRow> {
    let gt: Vec<ActionDecision> = corpus.samples.iter().map(|s| s.target_action.clone()).collect();
    let mut us: Vec<u64> = traces.iter().map(|x| x.us_elapsed).collect();
    let n = traces.len().max(1) as f64;
    Ok(LatencyRow {
        mode,
        steps: traces.len(),
        mean_us: us.iter().sum::<u64>() as f64 / n,
        median_us: median(&mut us),
        mean_tokens: traces.iter().map(|x| x.tokens).sum::<usize>() as f64 / n,
        ams: compute_ams(traces, &gt, tau)?.ams_percent,
    })
}

/// Times all three modes over the same samples on this thread. The first
/// `warmup` samples run once per mode untimed.
pub fn latency_profile(controller: &Controller, corpus: &EnhancedCorpus, warmup: usize, tau: f64) -> Result<(LatencyReport, Vec<Vec<StepTrace>>)> {
    for s in corpus.samples.iter().take(warmup) {
        for mode in InferenceMode::ALL {
            controller.predict_sample(corpus, s, mode)?;
        }
    }
    // Interleave modes per sample so drift in machine load hits all three alike.
    let mut by_mode: Vec<Vec<StepTrace>> = vec![Vec::new(); 3];
    for s in &corpus.samples {
        for (k, mode) in InferenceMode::ALL.into_iter().enumerate() {
            by_mode[k].push(controller.predict_sample(corpus, s, mode)?);
        }
    }
    let rows = InferenceMode::ALL
        .into_iter()
        .zip(&by_mode)
        .map(|(mode, t)| latency_row(mode, t, corpus, tau))
        .collect::<Result<Vec<_>>>()?;
    let tokens_ordered = (0..corpus.samples.len())
        .all(|i| by_mode[0][i].tokens <= by_mode[1][i].tokens && by_mode[1][i].tokens <= by_mode[2][i].tokens);
    let labels: Vec<PathLabel> = corpus.samples.iter().map(|s| s.path_label).collect();
    let mixed = labels.contains(&PathLabel::Fast) && labels.contains(&PathLabel::Slow);
    let (f, a, s) = (rows[0].mean_us, rows[1].mean_us, rows[2].mean_us);
    let guard = TIMER_RESOLUTION_US * 10.0;
    let (ordering, note) = if !mixed {
        log::warn!("single-label workload; latency ordering not checked");
        (None, "single-label workload; ordering not checked".to_string())
    } else if (a - f).abs() < guard || (s - a).abs() < guard {
        log::warn!("mode latencies differ by less than {guard} us; ordering not checked");
        (None, format!("differences below {guard} us; ordering not checked"))
    } else {
        (Some(f < a && a < s), "mean(fast) < mean(adaptive) < mean(slow)".to_string())
    };
    Ok((
        LatencyReport {
            rows,
            ordering,
            tokens_ordered,
            note,
        },
        by_mode,
    ))
}

pub fn format_latency(r: &LatencyReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10}{:>8}{:>14}{:>14}{:>12}{:>8}", "mode", "steps", "mean_us", "median_us", "tokens", "AMS");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{:<10}{:>8}{:>14.1}{:>14.1}{:>12.2}{:>8.2}",
            row.mode.name(),
            row.steps,
            row.mean_us,
            row.median_us,
            row.mean_tokens,
            row.ams
        );
    }
    let verdict = match r.ordering {
        Some(true) => "holds",
        Some(false) => "violated",
        None => "skipped",
    };
    let _ = writeln!(s, "latency ordering {verdict}: {}", r.note);
    let _ = writeln!(s, "per-step token ordering {}", if r.tokens_ordered { "holds" } else { "violated" });
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_latent: usize,
    pub ams: f64,
    pub routing_accuracy: f64,
}

/// Retrains from scratch for each latent count with the same seed and
/// scores adaptive mode on the held-out corpus.
pub fn sweep_latent(
    base: &ModelConfig,
    style: PromptStyle,
    recipe: &Recipe,
    train: &Corpus,
    heldout: &Corpus,
    n_values: &[usize],
    tau: f64,
) -> Result<Vec<SweepRow>> {
    if n_values.is_empty() {
        return Err(Error::Validation("sweep needs at least one latent count".into()));
    }
    let mut rows = Vec::new();
    for &n in n_values {
        let cfg = ModelConfig { n_latent: n, ..base.clone() };
        let ecfg = EnhanceConfig::for_model(&cfg, style);
        let tr = enhance_corpus(train, &ecfg)?;
        let ho = enhance_corpus(heldout, &ecfg)?;
        let mut model = Model::new(cfg)?;
        run_recipe(&mut model, &tr, &train.manifest.corpus_sha256, recipe, None)?;
        let c = Controller::new(&model, ecfg);
        let traces = evaluate(&c, &ho, InferenceMode::Adaptive)?;
        let r = mode_report(&traces, &ho, tau)?;
        log::info!("n_latent {n}: AMS {:.2}, routing {:.4}", r.ams.ams_percent, r.paths.routing_accuracy);
        rows.push(SweepRow {
            n_latent: n,
            ams: r.ams.ams_percent,
            routing_accuracy: r.paths.routing_accuracy,
        });
    }
    Ok(rows)
}

/// Headered comma-separated columns: `n_latent,ams,routing_accuracy`.
pub fn sweep_plot_data(rows: &[SweepRow]) -> String {
    let mut s = String::from("n_latent,ams,routing_accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.6}", r.n_latent, r.ams, r.routing_accuracy);
    }
    s
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, sweep_plot_data(rows))?;
    Ok(())
}
