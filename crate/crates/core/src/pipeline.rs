//! File-level plumbing: blend spec → instance manifest → training file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_casual, AugmentConfig, AugmentError, Augmenter, NegativeSource, SubsetKind};
use crate::blending::{agent_instances, materialize, resolve_plan, BlendEntry, BlendError, BlendSpec, InstanceRef, SamplingMode};
use crate::corpus::{load_corpus, Corpus, CorpusError, Rtl};
use crate::eval::IdfTable;
use crate::model::{train, Checkpoint, ModelConfig, ModelError, StepLog, TrainConfig, TrainError, Transformer};
use crate::scalar::Scalar;
use crate::serialize::{
    serialize, Example, InstanceMeta, LayoutConfig, SerializeError, TrainFileError, TrainingHeader, TrainingInstance,
};
use crate::synth::TemplateBank;
use crate::vocab::{build_vocab, Vocab, VocabError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Corpus {
        path: String,
        #[source]
        source: CorpusError,
    },
    #[error("blend spec: {0}")]
    Spec(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Blend(#[from] BlendError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("{instance}: {source}")]
    Serialize {
        instance: String,
        #[source]
        source: SerializeError,
    },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    TrainFile(#[from] TrainFileError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("instance {0} does not resolve against the listed corpora")]
    UnknownInstance(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Which agent turns of a corpus a blend row contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Select {
    Pr,
    Npr,
    All,
}

impl Select {
    fn rtl(self) -> Option<Rtl> {
        match self {
            Select::Pr => Some(Rtl::Prtl),
            Select::Npr => Some(Rtl::Crtl),
            Select::All => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendRow {
    pub id: String,
    pub path: PathBuf,
    pub weight: f64,
    #[serde(default = "default_select")]
    pub select: Select,
}

fn default_select() -> Select {
    Select::All
}

/// TOML blend spec: `[[dataset]]` rows of `id`, `path`, `weight` and
/// `select`. Rows sharing an id form one dataset; their weights must agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendSpecFile {
    #[serde(rename = "dataset")]
    pub datasets: Vec<BlendRow>,
}

impl BlendSpecFile {
    /// Relative paths resolve against `base`.
    pub fn parse(src: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut spec: Self = toml::from_str(src).map_err(|e| PipelineError::Spec(e.to_string()))?;
        for r in &mut spec.datasets {
            if r.path.is_relative() {
                r.path = base.join(&r.path);
            }
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let src = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&src, path.parent().unwrap_or(Path::new(".")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub path: PathBuf,
    pub select: Select,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDataset {
    pub id: String,
    pub weight: f64,
    pub sources: Vec<Source>,
    pub available: usize,
    pub target: usize,
    pub mode: SamplingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// How datasets are combined; always `"global"` (one shuffle over all instances).
    pub shuffle: String,
    pub total_pool: usize,
    pub datasets: Vec<ManifestDataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub instances: Vec<InstanceRef>,
}

impl Manifest {
    pub const FORMAT: &'static str = "wwh-manifest";

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        let mut line = |v: String| writeln!(w, "{v}").map_err(io_err(path));
        line(serde_json::to_string(&self.header).expect("header serializes"))?;
        for i in &self.instances {
            line(serde_json::to_string(i).expect("instance serializes"))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        let r = BufReader::new(File::open(path).map_err(io_err(path))?);
        let mut header = None;
        let mut instances = Vec::new();
        for (n, l) in r.lines().enumerate() {
            let l = l.map_err(io_err(path))?;
            if l.trim().is_empty() {
                continue;
            }
            let bad = |e: serde_json::Error| PipelineError::Manifest {
                line: n + 1,
                message: e.to_string(),
            };
            match header {
                None => {
                    let h: ManifestHeader = serde_json::from_str(&l).map_err(bad)?;
                    if h.format != Self::FORMAT {
                        return Err(PipelineError::Manifest {
                            line: n + 1,
                            message: format!("unknown format {:?}", h.format),
                        });
                    }
                    header = Some(h);
                }
                Some(_) => instances.push(serde_json::from_str(&l).map_err(bad)?),
            }
        }
        let header = header.ok_or(PipelineError::Manifest {
            line: 0,
            message: "missing header".into(),
        })?;
        Ok(Self { header, instances })
    }
}

/// Corpora keyed by path, each loaded and validated once.
#[derive(Debug, Default)]
pub struct CorpusSet {
    pub corpora: BTreeMap<PathBuf, Corpus>,
}

impl CorpusSet {
    pub fn load<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<Self, PipelineError> {
        let mut set = Self::default();
        for p in paths {
            if !set.corpora.contains_key(p) {
                let c = load_corpus(p).map_err(|e| PipelineError::Corpus {
                    path: p.display().to_string(),
                    source: e,
                })?;
                set.corpora.insert(p.to_path_buf(), c);
            }
        }
        Ok(set)
    }

    pub fn get(&self, path: &Path) -> Option<&Corpus> {
        self.corpora.get(path)
    }

    pub fn all(&self) -> Vec<&Corpus> {
        self.corpora.values().collect()
    }

    /// Distinct utterance and persona texts across every corpus, as IDF documents.
    pub fn idf(&self) -> IdfTable {
        let texts = self.corpora.values().flat_map(|c| {
            c.episodes.iter().flat_map(|e| {
                e.persona_pool
                    .iter()
                    .map(|a| a.text.as_str())
                    .chain(e.sessions.iter().flat_map(|s| s.turns.iter().map(|t| t.text.as_str())))
            })
        });
        IdfTable::from_texts(texts)
    }
}

/// Resolves a blend spec against its corpora and samples the instance manifest.
pub fn blend(spec: &BlendSpecFile, seed: u64) -> Result<(Manifest, CorpusSet), PipelineError> {
    if spec.datasets.is_empty() {
        return Err(PipelineError::Spec("no datasets".into()));
    }
    let corpora = CorpusSet::load(spec.datasets.iter().map(|r| r.path.as_path()))?;
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: HashMap<&str, (f64, Vec<Source>)> = HashMap::new();
    for r in &spec.datasets {
        match grouped.get_mut(r.id.as_str()) {
            Some((w, sources)) => {
                if *w != r.weight {
                    return Err(PipelineError::Spec(format!("dataset {} has conflicting weights", r.id)));
                }
                sources.push(Source {
                    path: r.path.clone(),
                    select: r.select,
                });
            }
            None => {
                order.push(&r.id);
                grouped.insert(
                    &r.id,
                    (
                        r.weight,
                        vec![Source {
                            path: r.path.clone(),
                            select: r.select,
                        }],
                    ),
                );
            }
        }
    }
    let mut pools = Vec::with_capacity(order.len());
    let mut entries = Vec::with_capacity(order.len());
    for id in &order {
        let (weight, sources) = &grouped[id];
        let mut pool = Vec::new();
        for s in sources {
            let c = corpora.get(&s.path).expect("loaded above");
            pool.extend(agent_instances(id, &c.episodes, s.select.rtl()));
        }
        entries.push(BlendEntry {
            dataset_id: id.to_string(),
            weight: *weight,
            available: pool.len(),
        });
        pools.push(pool);
    }
    let bspec = BlendSpec::new(entries);
    let plan = resolve_plan(&bspec)?;
    let instances = materialize(&plan, &pools, seed)?;
    let datasets = plan
        .entries
        .iter()
        .zip(&order)
        .map(|(e, id)| ManifestDataset {
            id: id.to_string(),
            weight: grouped[id].0,
            sources: grouped[id].1.clone(),
            available: e.available,
            target: e.target,
            mode: e.mode,
        })
        .collect();
    let header = ManifestHeader {
        format: Manifest::FORMAT.into(),
        version: 1,
        seed,
        shuffle: "global".into(),
        total_pool: bspec.total_pool,
        datasets,
    };
    Ok((Manifest { header, instances }, corpora))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildOptions {
    pub k: usize,
    pub seed: u64,
    pub negative_source: NegativeSource,
    pub layout: LayoutConfig,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            negative_source: NegativeSource::SameUserIrrelevant,
            layout: LayoutConfig::default(),
        }
    }
}

impl BuildOptions {
    fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            k: self.k,
            negative_source: self.negative_source,
            seed: self.seed,
        }
    }
}

/// Augments and serializes one agent turn.
#[allow(clippy::too_many_arguments)]
fn build_one(
    corpus: &Corpus,
    augmenter: Option<&Augmenter>,
    episode_index: usize,
    iref: &InstanceRef,
    vocab: &Vocab,
    layout: LayoutConfig,
) -> Result<TrainingInstance, PipelineError> {
    let e = &corpus.episodes[episode_index];
    let (si, ti) = (iref.session_index, iref.turn_index);
    let rtl = e
        .sessions
        .get(si)
        .and_then(|s| s.turns.get(ti))
        .and_then(|t| t.rtl)
        .ok_or_else(|| PipelineError::UnknownInstance(format!("{iref:?}")))?;
    let kind = SubsetKind::for_turn(corpus.kind(), rtl);
    let subset = match (kind, augmenter) {
        (SubsetKind::Casual, _) | (_, None) => augment_casual(),
        (_, Some(a)) => a.augment(e, si, ti)?,
    };
    let positives = subset
        .attributes
        .iter()
        .enumerate()
        .filter(|(_, a)| subset.positive_ids.contains(&a.id))
        .map(|(i, _)| i)
        .collect();
    let ex = Example::from_turn(e, si, ti, &subset);
    let meta = InstanceMeta {
        instance: iref.clone(),
        kind: Some(kind),
        positives,
        dropped_turns: 0,
    };
    serialize(&ex, vocab, layout, meta).map_err(|source| PipelineError::Serialize {
        instance: format!("{}/{}/{}", iref.episode_id, si, ti),
        source,
    })
}

fn episode_index(corpus: &Corpus) -> HashMap<&str, usize> {
    corpus
        .episodes
        .iter()
        .enumerate()
        .map(|(i, e)| (e.episode_id.as_str(), i))
        .collect()
}

/// Turns a manifest into training instances. The vocabulary and IDF table
/// come from every corpus the manifest names.
pub fn build_training_set(
    manifest: &Manifest,
    corpora: &CorpusSet,
    opts: &BuildOptions,
    bank: &TemplateBank,
) -> Result<(TrainingHeader, Vec<TrainingInstance>), PipelineError> {
    let vocab = build_vocab(&corpora.all(), 1)?;
    let augmenters: BTreeMap<&Path, Augmenter> = corpora
        .corpora
        .iter()
        .filter(|(_, c)| !c.kind().is_casual())
        .map(|(p, c)| Ok((p.as_path(), Augmenter::new(bank, opts.augment(), &c.episodes)?)))
        .collect::<Result<_, AugmentError>>()?;
    let indexes: BTreeMap<&Path, HashMap<&str, usize>> =
        corpora.corpora.iter().map(|(p, c)| (p.as_path(), episode_index(c))).collect();
    let sources: HashMap<&str, &[Source]> = manifest
        .header
        .datasets
        .iter()
        .map(|d| (d.id.as_str(), d.sources.as_slice()))
        .collect();

    let mut out = Vec::with_capacity(manifest.instances.len());
    for iref in &manifest.instances {
        let unknown = || PipelineError::UnknownInstance(format!("{}/{}", iref.dataset_id, iref.episode_id));
        let srcs = sources.get(iref.dataset_id.as_str()).ok_or_else(unknown)?;
        let (path, idx) = srcs
            .iter()
            .find_map(|s| indexes.get(s.path.as_path())?.get(iref.episode_id.as_str()).map(|&i| (s.path.as_path(), i)))
            .ok_or_else(unknown)?;
        let corpus = corpora.get(path).ok_or_else(unknown)?;
        out.push(build_one(corpus, augmenters.get(path), idx, iref, &vocab, opts.layout)?);
    }
    let header = TrainingHeader::new(opts.layout, &vocab, corpora.idf(), opts.k, opts.seed, out.len());
    Ok((header, out))
}

/// Every agent turn of a personalized corpus, augmented and serialized with
/// an existing vocabulary; the held-out evaluation set.
pub fn build_eval_set(
    corpus: &Corpus,
    vocab: &Vocab,
    opts: &BuildOptions,
    bank: &TemplateBank,
) -> Result<Vec<TrainingInstance>, PipelineError> {
    let augmenter = if corpus.kind().is_casual() {
        None
    } else {
        Some(Augmenter::new(bank, opts.augment(), &corpus.episodes)?)
    };
    let index = episode_index(corpus);
    agent_instances("eval", &corpus.episodes, None)
        .map(|iref| build_one(corpus, augmenter.as_ref(), index[iref.episode_id.as_str()], &iref, vocab, opts.layout))
        .collect()
}

/// Paths referenced by a manifest, deduplicated.
pub fn manifest_paths(header: &ManifestHeader) -> BTreeSet<PathBuf> {
    header
        .datasets
        .iter()
        .flat_map(|d| d.sources.iter().map(|s| s.path.clone()))
        .collect()
}

/// Trains a fresh model on a training set. Vocabulary size and context
/// length come from the training header.
pub fn fit<T: Scalar>(
    header: &TrainingHeader,
    instances: &[TrainingInstance],
    model: ModelConfig,
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepLog),
) -> Result<Checkpoint<T>, PipelineError> {
    let vocab = header.vocab()?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        max_seq_len: header.layout.max_seq_len,
        ..model
    };
    let mut m = Transformer::<T>::new(config)?;
    let out = train(&mut m, instances, cfg, on_step)?;
    Ok(Checkpoint {
        model: m,
        vocab,
        layout: header.layout,
        idf: header.idf.clone(),
        step: out.steps as u64,
        train: Some(*cfg),
    })
}
