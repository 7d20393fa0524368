//! Training, evaluation and reporting on top of the library.

pub mod config;
pub mod eval;
pub mod train;
pub mod visualize;

use serde::{Deserialize, Serialize};

pub use config::TrainConfig;
pub use eval::{evaluate, roi_iou, AuIou, IouReport};
pub use train::{mean_of_fold_means, train, train_fold, EpochRecord, FoldRecord, RunRecord, Sgd};
pub use visualize::{visualize, VisualReport};

use crate::data::{make_folds, Dataset};
use crate::error::{Error, Result};
use crate::graph::{build_intra, cooccurrence, RelationGraph};
use crate::kv::KeyValues;
use crate::network::{ModelConfig, Preset};
use crate::objective::{class_weights, occurrence_rates};

/// Ablation settings: a training config plus the presets and seeds to sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub train: TrainConfig,
    pub presets: Vec<Preset>,
    pub seeds: Vec<u64>,
}

impl AblateConfig {
    /// Reads `presets` and `seeds` (comma lists) next to the usual training keys.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut rest = KeyValues::new();
        for (k, v) in kv.iter().filter(|(k, _)| !matches!(*k, "presets" | "seeds")) {
            rest.set(k, v);
        }
        let presets = match kv.get("presets") {
            None | Some("all") => Preset::ALL.to_vec(),
            Some(_) => kv.list_or::<String>("presets", Vec::new())?
                .iter()
                .map(|p| p.parse())
                .collect::<Result<_>>()?,
        };
        let train = TrainConfig::from_kv(&rest)?;
        let seeds = kv.list_or("seeds", vec![train.seed])?;
        if presets.is_empty() || seeds.is_empty() {
            return Err(Error::Config("presets and seeds must not be empty".into()));
        }
        Ok(Self { train, presets, seeds })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: String,
    /// Mean F1 over folds, per seed.
    pub per_seed: Vec<f64>,
    pub mean_f1: f64,
    /// Mean IoU gain over folds and seeds, for presets with regional branches.
    pub iou_gain: Option<f64>,
    pub refined_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub wall_clock_secs: f64,
}

impl AblationReport {
    pub fn row(&self, preset: Preset) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.preset == preset.name())
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<14} {:>8}  per-seed\n", "preset", "mean F1");
        for r in &self.rows {
            let seeds: Vec<String> = r.per_seed.iter().map(|f| format!("{f:.4}")).collect();
            out.push_str(&format!("{:<14} {:>8.4}  {}\n", r.preset, r.mean_f1, seeds.join(" ")));
        }
        out
    }
}

/// Trains every preset with every seed on shared folds. `on_run` sees each finished run.
pub fn ablate(
    cfg: &AblateConfig,
    data: &Dataset,
    mut on_run: impl FnMut(Preset, u64, &RunRecord),
) -> Result<AblationReport> {
    let start = std::time::Instant::now();
    let mut rows = Vec::with_capacity(cfg.presets.len());
    for &preset in &cfg.presets {
        let mut per_seed = Vec::with_capacity(cfg.seeds.len());
        let mut gains = Vec::new();
        let mut refined = Vec::new();
        for &seed in &cfg.seeds {
            let mut t = cfg.train.clone();
            t.model = t.model.with_preset(preset);
            t.seed = seed;
            t.output = cfg.train.output.as_ref().map(|o| o.join(format!("{}-seed{seed}", preset.name())));
            let record = train(&t, data)?;
            for f in &record.folds {
                if let Some(iou) = &f.iou {
                    gains.push(iou.gain);
                    refined.push(iou.refined_mean);
                }
            }
            per_seed.push(record.mean_f1);
            on_run(preset, seed, &record);
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        rows.push(AblationRow {
            preset: preset.name().to_string(),
            mean_f1: mean(&per_seed).unwrap_or(0.0),
            per_seed,
            iou_gain: mean(&gains),
            refined_iou: mean(&refined),
        });
    }
    Ok(AblationReport {
        seeds: cfg.seeds.clone(),
        rows,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Label statistics and the relation graph they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub au_names: Vec<String>,
    pub samples: usize,
    /// Fold whose training subjects were counted, one-based; `None` for the whole set.
    pub fold: Option<usize>,
    pub rates: Vec<f64>,
    pub class_weights: Vec<f64>,
    /// `conditional[i][j] = p(AU i | AU j)`; `None` where AU j never occurs.
    pub conditional: Vec<Vec<Option<f64>>>,
    pub p_pos: f64,
    pub intra: Vec<Vec<u8>>,
    pub intra_edges: usize,
    pub levels: usize,
    pub adjacency: Vec<Vec<u8>>,
    /// Undirected edges between distinct nodes of A.
    pub edges: usize,
    pub normalized: Vec<Vec<f64>>,
}

impl GraphStats {
    /// Plain-text dump: P, A₀ and A as matrices, then edge counts.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let width = self.au_names.iter().map(|n| n.len()).max().unwrap_or(0).max(5);
        let header = |out: &mut String| {
            let _ = write!(out, "{:width$}", "");
            for n in &self.au_names {
                let _ = write!(out, " {n:>width$}");
            }
            out.push('\n');
        };
        let _ = writeln!(out, "# samples {}", self.samples);
        if let Some(f) = self.fold {
            let _ = writeln!(out, "# fold {f} training subjects");
        }
        let _ = writeln!(out, "# P[i][j] = p(row AU | column AU), '-' where the column AU never occurs");
        header(&mut out);
        for (name, row) in self.au_names.iter().zip(&self.conditional) {
            let _ = write!(out, "{name:width$}");
            for v in row {
                match v {
                    Some(p) => {
                        let _ = write!(out, " {p:>width$.3}");
                    }
                    None => {
                        let _ = write!(out, " {:>width$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = writeln!(out, "\n# A0 (p_pos = {})", self.p_pos);
        header(&mut out);
        for (name, row) in self.au_names.iter().zip(&self.intra) {
            let _ = write!(out, "{name:width$}");
            for v in row {
                let _ = write!(out, " {v:>width$}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "\n# A ({} levels, {} nodes)", self.levels, self.adjacency.len());
        for row in &self.adjacency {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        let _ = writeln!(out, "\nedges in A0 {}", self.intra_edges);
        let _ = writeln!(out, "edges in A {}", self.edges);
        out
    }
}

/// Statistics over the whole dataset, or over the training subjects of `fold`
/// (zero-based) under the split given by `folds` and `split_seed`.
pub fn graph_stats(
    data: &Dataset,
    model: &ModelConfig,
    fold: Option<(usize, usize, u64)>,
) -> Result<GraphStats> {
    let idx: Vec<usize> = match fold {
        None => (0..data.len()).collect(),
        Some((f, folds, split_seed)) => {
            if f >= folds {
                return Err(Error::Config(format!("fold {} out of range 1..={folds}", f + 1)));
            }
            make_folds(&data.subjects(), folds, split_seed)?.indices(data, f).0
        }
    };
    let c = data.num_aus();
    let labels = ndarray::Array2::from_shape_fn((idx.len(), c), |(i, j)| data.samples[idx[i]].labels[j]);
    let rates = occurrence_rates(labels.view())?;
    let weights = class_weights(&rates)?;
    let stats = cooccurrence(labels.view())?;
    let intra = build_intra(&stats, model.p_pos, model.symmetrize);
    let mut cfg = model.clone();
    cfg.num_aus = c;
    let opts = crate::graph::GraphOptions {
        p_pos: cfg.p_pos,
        symmetrize: cfg.symmetrize,
        normalization: cfg.normalization,
        levels: cfg.active_levels().len().max(1),
        use_intra: cfg.switches.use_intra_graph,
        use_inter: cfg.switches.use_inter_graph,
    };
    let graph = RelationGraph::from_intra(intra, &opts)?;
    let binary = |a: &ndarray::Array2<f64>| -> Vec<Vec<u8>> {
        a.rows().into_iter().map(|r| r.iter().map(|&v| u8::from(v != 0.0)).collect()).collect()
    };
    Ok(GraphStats {
        au_names: data.au_names.clone(),
        samples: idx.len(),
        fold: fold.map(|(f, _, _)| f + 1),
        rates,
        class_weights: weights.weights,
        conditional: (0..c)
            .map(|i| {
                (0..c)
                    .map(|j| (stats.defined[j] || i == j).then(|| stats.conditional[[i, j]]))
                    .collect()
            })
            .collect(),
        p_pos: cfg.p_pos,
        intra: binary(&graph.intra),
        intra_edges: RelationGraph::edge_count(&graph.intra),
        levels: opts.levels,
        adjacency: binary(&graph.adjacency),
        edges: RelationGraph::edge_count(&graph.adjacency),
        normalized: graph.normalized.rows().into_iter().map(|r| r.to_vec()).collect(),
    })
}
