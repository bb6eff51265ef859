//! Train-and-evaluate sweeps over blending weights and augmentation settings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::report::{evaluate, EvalError, EvalOptions, EvalReport};
use crate::corpus::load_corpus;
use crate::model::{Checkpoint, CheckpointError, ModelConfig, TrainConfig};
use crate::pipeline::{blend, build_eval_set, build_training_set, fit, BlendSpecFile, BuildOptions, PipelineError};
use crate::serialize::write_training_file;
use crate::synth::TemplateBank;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep spec: {0}")]
    Spec(String),
    #[error("row {row}: {source}")]
    Pipeline {
        row: String,
        #[source]
        source: PipelineError,
    },
    #[error("row {row}: {source}")]
    Eval {
        row: String,
        #[source]
        source: EvalError,
    },
    #[error("row {row}: {source}")]
    Checkpoint {
        row: String,
        #[source]
        source: CheckpointError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One configuration. Unset fields inherit the sweep-level settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRow {
    pub name: String,
    /// Blend weight overrides keyed by dataset id.
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
    pub k: Option<usize>,
    pub rtl_slot: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Blend spec shared by every row.
    pub blend: PathBuf,
    /// Held-out personalized corpus.
    pub eval_data: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Cap on evaluated instances, taken from the front of the eval set.
    pub eval_limit: Option<usize>,
    #[serde(default)]
    pub build: BuildOptions,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(rename = "row")]
    pub rows: Vec<SweepRow>,
}

impl SweepSpec {
    /// Relative paths resolve against `base`.
    pub fn parse(src: &str, base: &Path) -> Result<Self, SweepError> {
        let mut s: Self = toml::from_str(src).map_err(|e| SweepError::Spec(e.to_string()))?;
        for p in [&mut s.blend, &mut s.eval_data] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if s.rows.is_empty() {
            return Err(SweepError::Spec("no rows".into()));
        }
        let mut names: Vec<&str> = s.rows.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return Err(SweepError::Spec("row names must be unique, non-empty path components".into()));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SweepError> {
        let src = fs::read_to_string(path).map_err(|e| SweepError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&src, path.parent().unwrap_or(Path::new(".")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub name: String,
    pub weights: BTreeMap<String, f64>,
    pub k: usize,
    pub rtl_slot: bool,
    pub seed: u64,
    pub n_train: usize,
    pub train_seconds: f64,
    pub report: EvalReport,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |e| SweepError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Runs one row end to end, writing its manifest, training file,
/// checkpoint and report under `dir`.
pub fn run_row(spec: &SweepSpec, row: &SweepRow, dir: &Path, bank: &TemplateBank) -> Result<SweepResult, SweepError> {
    let name = row.name.clone();
    let pe = |source| SweepError::Pipeline {
        row: name.clone(),
        source,
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut blend_spec = BlendSpecFile::load(&spec.blend).map_err(pe)?;
    for (id, w) in &row.weights {
        let mut hit = false;
        for d in blend_spec.datasets.iter_mut().filter(|d| &d.id == id) {
            d.weight = *w;
            hit = true;
        }
        if !hit {
            return Err(SweepError::Spec(format!("row {name}: unknown dataset {id}")));
        }
    }
    let seed = row.seed.unwrap_or(spec.seed);
    let mut opts = spec.build;
    opts.seed = seed;
    if let Some(k) = row.k {
        opts.k = k;
    }
    if let Some(r) = row.rtl_slot {
        opts.layout.rtl_slot = r;
    }
    let (manifest, corpora) = blend(&blend_spec, seed).map_err(pe)?;
    manifest.write(&dir.join("manifest.jsonl")).map_err(pe)?;
    let (header, instances) = build_training_set(&manifest, &corpora, &opts, bank).map_err(pe)?;
    write_training_file(&dir.join("train.jsonl"), &header, &instances).map_err(|e| pe(e.into()))?;

    let t = Instant::now();
    let model = ModelConfig { seed, ..spec.model };
    let train = TrainConfig { seed, ..spec.train };
    let ck: Checkpoint<f32> = fit(&header, &instances, model, &train, |_| {}).map_err(pe)?;
    let train_seconds = t.elapsed().as_secs_f64();
    ck.save(&dir.join("model.ckpt")).map_err(|source| SweepError::Checkpoint {
        row: name.clone(),
        source,
    })?;

    let eval_corpus = load_corpus(&spec.eval_data).map_err(|source| {
        pe(PipelineError::Corpus {
            path: spec.eval_data.display().to_string(),
            source,
        })
    })?;
    let mut eval_set = build_eval_set(&eval_corpus, &ck.vocab, &opts, bank).map_err(pe)?;
    if let Some(n) = spec.eval_limit {
        eval_set.truncate(n);
    }
    let report = evaluate(&ck, &eval_set, &spec.eval).map_err(|source| SweepError::Eval {
        row: name.clone(),
        source,
    })?;
    let result = SweepResult {
        name,
        weights: blend_spec.datasets.iter().map(|d| (d.id.clone(), d.weight)).collect(),
        k: opts.k,
        rtl_slot: opts.layout.rtl_slot,
        seed,
        n_train: instances.len(),
        train_seconds,
        report,
    };
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&result).expect("report serializes")).map_err(io(&path))?;
    Ok(result)
}

/// Runs every row in order, then writes `reports.jsonl` and `table.txt`
/// into `out`.
pub fn run_sweep(
    spec: &SweepSpec,
    out: &Path,
    mut on_row: impl FnMut(&SweepResult),
) -> Result<Vec<SweepResult>, SweepError> {
    let bank = TemplateBank::builtin();
    let mut results = Vec::with_capacity(spec.rows.len());
    for row in &spec.rows {
        let r = run_row(spec, row, &out.join(&row.name), &bank)?;
        on_row(&r);
        results.push(r);
    }
    let mut jsonl = String::new();
    for r in &results {
        jsonl.push_str(&serde_json::to_string(r).expect("report serializes"));
        jsonl.push('\n');
    }
    let p = out.join("reports.jsonl");
    fs::write(&p, jsonl).map_err(io(&p))?;
    let p = out.join("table.txt");
    fs::write(&p, format_table(&results)).map_err(io(&p))?;
    Ok(results)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.3}"))
}

/// Aligned text table, one line per row.
pub fn format_table(results: &[SweepResult]) -> String {
    let head = ["row", "k", "rtl", "ppl", "f1", "p_cover", "acc_prtl", "acc_crtl", "hard", "soft", "none", "n"];
    let rows: Vec<[String; 12]> = results
        .iter()
        .map(|r| {
            let e = &r.report;
            let acc = e.rtl_accuracy.unwrap_or_default();
            [
                r.name.clone(),
                r.k.to_string(),
                if r.rtl_slot { "yes" } else { "no" }.into(),
                format!("{:.3}", e.ppl),
                format!("{:.4}", e.f1),
                format!("{:.4}", e.p_cover),
                opt(acc.prtl),
                opt(acc.crtl),
                e.grounding_counts.hard.to_string(),
                e.grounding_counts.soft.to_string(),
                e.grounding_counts.non_personalized.to_string(),
                e.n_instances.to_string(),
            ]
        })
        .collect();
    let width: Vec<usize> = (0..head.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = width[c]) } else { format!("{v:>w$}", w = width[c]) })
            .collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(head.to_vec());
    for r in &rows {
        line(r.iter().map(String::as_str).collect());
    }
    s
}
