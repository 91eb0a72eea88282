//! Experiment driver and reporting: per-domain accuracy, cross-domain
//! heatmaps, component ablations, and feature dumps.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::federation::{RoundMetrics, Simulation};

/// Running means of the training losses over one round, averaged across
/// clients. `None` when the corresponding term was disabled or not yet run.
#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct LossMeans {
    pub semantic_align: Option<f64>,
    pub domain_align: Option<f64>,
    pub contrastive: Option<f64>,
    pub semantic_prompt: Option<f64>,
    pub domain_prompt: Option<f64>,
}

impl LossMeans {
    fn from_round(metrics: &RoundMetrics) -> Self {
        fn mean(values: Vec<f64>) -> Option<f64> {
            if values.is_empty() {
                None
            } else {
                Some(values.iter().sum::<f64>() / values.len() as f64)
            }
        }
        let stats = &metrics.client_stats;
        Self {
            semantic_align: mean(stats.iter().filter_map(|s| s.semantic_align_loss).collect()),
            domain_align: mean(stats.iter().filter_map(|s| s.domain_align_loss).collect()),
            contrastive: mean(stats.iter().filter_map(|s| s.contrastive_loss).collect()),
            semantic_prompt: mean(stats.iter().filter_map(|s| s.semantic_prompt_loss).collect()),
            domain_prompt: mean(stats.iter().filter_map(|s| s.domain_prompt_loss).collect()),
        }
    }
}

/// One evaluation snapshot; serialized as one JSON line in metric streams.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsRecord {
    pub round: u32,
    pub per_domain_accuracy: Vec<f64>,
    /// Unweighted mean of the per-domain accuracies.
    pub average_accuracy: f64,
    pub losses: LossMeans,
}

/// Per-domain test accuracy, each domain scored by its own clients (their
/// domain prompt and shard mean, plus the shared global prompt).
pub fn evaluate(sim: &Simulation) -> Result<MetricsRecord, crate::Error> {
    let mut per_domain = Vec::with_capacity(sim.config.domains);
    for domain in 0..sim.config.domains {
        let shard = &sim.test_shards[domain];
        if shard.is_empty() {
            return Err(crate::Error::Runtime(format!(
                "empty test shard for domain {domain}"
            )));
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for client in sim.clients.iter().filter(|c| c.domain == domain) {
            let scorer = sim.scorer_for_client(client)?;
            for rec in shard.records() {
                let pred = scorer.predict(&rec.embedding)?;
                if pred.class == usize::from(rec.label) {
                    correct += 1;
                }
                total += 1;
            }
        }
        per_domain.push(correct as f64 / total as f64);
    }
    let average = per_domain.iter().sum::<f64>() / per_domain.len() as f64;
    Ok(MetricsRecord {
        round: sim.round(),
        per_domain_accuracy: per_domain,
        average_accuracy: average,
        losses: LossMeans::default(),
    })
}

/// Full experiment artifact: metric history plus the trained simulation.
pub struct ExperimentOutcome {
    pub history: Vec<MetricsRecord>,
    pub simulation: Simulation,
}

/// Runs R rounds with an evaluation before round 1 and after every round.
/// `sink` sees each record as soon as it exists (metric streaming);
/// checkpoints land in `checkpoint_dir` when the config asks for them.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    checkpoint_dir: Option<&Path>,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<ExperimentOutcome, crate::Error> {
    let mut sim = Simulation::from_config(cfg)?;
    run_rounds(&mut sim, cfg.rounds, checkpoint_dir, sink).map(|history| ExperimentOutcome {
        history,
        simulation: sim,
    })
}

/// Continues an existing simulation until `target_rounds` total rounds.
pub fn run_rounds(
    sim: &mut Simulation,
    target_rounds: usize,
    checkpoint_dir: Option<&Path>,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>, crate::Error> {
    let mut history = Vec::new();
    if sim.round() == 0 {
        let record = evaluate(sim)?;
        sink(&record);
        history.push(record);
    }
    while (sim.round() as usize) < target_rounds {
        let round_metrics = sim.run_round().map_err(crate::Error::Federation)?;
        let mut record = evaluate(sim)?;
        record.losses = LossMeans::from_round(&round_metrics);
        sink(&record);
        history.push(record);
        if let (Some(dir), Some(every)) = (checkpoint_dir, sim.config.checkpoint_every) {
            let round = sim.round();
            if (round as usize).is_multiple_of(every) {
                let path = dir.join(format!("round_{round:04}.fdck"));
                crate::checkpoint::save(sim, &path)?;
            }
        }
    }
    Ok(history)
}

/// Cross-domain prompt/image accuracy matrix. Entry (i, j): domain-i clients
/// classify domain-j test data with their own domain prompt and the global
/// semantic prompt.
#[derive(Debug, Clone, Serialize)]
pub struct HeatmapReport {
    pub matrix: Vec<Vec<f64>>,
    pub mean_diagonal: f64,
    pub mean_off_diagonal: f64,
    /// `mean_diagonal - mean_off_diagonal`, the domain-adaptivity statistic.
    pub diagonal_advantage: f64,
}

pub fn cross_domain_heatmap(sim: &Simulation) -> Result<HeatmapReport, crate::Error> {
    let n = sim.config.domains;
    let mut matrix = vec![vec![0.0; n]; n];
    for (prompt_domain, matrix_row) in matrix.iter_mut().enumerate() {
        let scorers: Vec<_> = sim
            .clients
            .iter()
            .filter(|c| c.domain == prompt_domain)
            .map(|c| sim.scorer_for_client(c))
            .collect::<Result<_, _>>()?;
        if scorers.is_empty() {
            return Err(crate::Error::Runtime(format!(
                "no clients for domain {prompt_domain}"
            )));
        }
        for (data_domain, shard) in sim.test_shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(crate::Error::Runtime(format!(
                    "empty test shard for domain {data_domain}"
                )));
            }
            let mut correct = 0usize;
            let mut total = 0usize;
            for scorer in &scorers {
                for rec in shard.records() {
                    if scorer.predict(&rec.embedding)?.class == usize::from(rec.label) {
                        correct += 1;
                    }
                    total += 1;
                }
            }
            matrix_row[data_domain] = correct as f64 / total as f64;
        }
    }
    let mut diag = 0.0;
    let mut off = 0.0;
    let mut off_count = 0usize;
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i == j {
                diag += v;
            } else {
                off += v;
                off_count += 1;
            }
        }
    }
    let mean_diagonal = diag / n as f64;
    let mean_off_diagonal = if off_count > 0 { off / off_count as f64 } else { 0.0 };
    Ok(HeatmapReport {
        matrix,
        mean_diagonal,
        mean_off_diagonal,
        diagonal_advantage: mean_diagonal - mean_off_diagonal,
    })
}

/// One component-toggle configuration and its final accuracy.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub personalized_prompt: bool,
    pub semantic_align: bool,
    pub domain_align: bool,
    pub per_domain_accuracy: Vec<f64>,
    pub average_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// The five standard rows, all sharing the base config's seed and data:
/// global-prompt baseline, +personalized prompt, full minus semantic
/// alignment, full minus domain alignment, full.
pub fn run_ablation(base: &ExperimentConfig) -> Result<AblationReport, crate::Error> {
    let toggles: [(&str, bool, bool, bool); 5] = [
        ("global prompt only", false, false, false),
        ("with personalized prompt", true, false, false),
        ("without semantic alignment", true, false, true),
        ("without domain alignment", true, true, false),
        ("full", true, true, true),
    ];
    let mut rows = Vec::with_capacity(toggles.len());
    for (name, personalized, semantic, domain) in toggles {
        let cfg = ExperimentConfig {
            personalized_prompt: personalized,
            semantic_align: semantic,
            domain_align: domain,
            ..base.clone()
        };
        cfg.validate()?;
        let outcome = run_experiment(&cfg, None, &mut |_| {})?;
        let last = outcome
            .history
            .last()
            .ok_or_else(|| crate::Error::Runtime("no metrics produced".to_string()))?;
        rows.push(AblationRow {
            name: name.to_string(),
            personalized_prompt: personalized,
            semantic_align: semantic,
            domain_align: domain,
            per_domain_accuracy: last.per_domain_accuracy.clone(),
            average_accuracy: last.average_accuracy,
        });
    }
    Ok(AblationReport { rows })
}

/// Tab-separated dump of every client's per-class text feature followed by
/// every test-shard image embedding. Columns: kind, client, domain, label,
/// then `embed_dim` feature values. Re-running on the same bundle yields
/// identical bytes.
pub fn export_features(sim: &Simulation) -> Result<String, crate::Error> {
    let mut out = String::new();
    let dim = sim.config.embed_dim;
    let mut header = String::from("kind\tclient\tdomain\tlabel");
    for i in 0..dim {
        let _ = write!(header, "\tf{i}");
    }
    out.push_str(&header);
    out.push('\n');

    for client in &sim.clients {
        let scorer = sim.scorer_for_client(client)?;
        for (class, feature) in scorer.text_features().iter().enumerate() {
            let _ = write!(out, "text\t{}\t{}\t{class}", client.id, client.domain);
            for v in feature.data() {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
    }
    for (domain, shard) in sim.test_shards.iter().enumerate() {
        for rec in shard.records() {
            let _ = write!(out, "image\t-\t{domain}\t{}", rec.label);
            for v in rec.embedding.data() {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Plain-text accuracy table, one column per domain plus the average.
pub fn format_accuracy_table(records: &[MetricsRecord]) -> String {
    let Some(last) = records.last() else {
        return String::from("(no metrics)\n");
    };
    let n = last.per_domain_accuracy.len();
    let mut out = String::from("round");
    for d in 0..n {
        let _ = write!(out, "  dom{d}");
    }
    out.push_str("    avg\n");
    for record in records {
        let _ = write!(out, "{:5}", record.round);
        for v in &record.per_domain_accuracy {
            let _ = write!(out, "  {:4.1}", 100.0 * v);
        }
        let _ = writeln!(out, "  {:5.2}", 100.0 * record.average_accuracy);
    }
    out
}
