//! The three-stage pipeline over an output directory: corpus, behavior
//! model, offline dataset, stage-3 methods, evaluation and ablations.
//!
//! Every artifact records the hash of the config that produced it and the
//! content hashes of the artifacts it was built from. Loading checks both,
//! so a stale or foreign artifact is refused instead of silently mixed in.

mod config;
mod lock;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::{AblationKind, AblationSection, CorpusConfig, EvalSection, Method, OfflineConfig, Preset, RunConfig, Stage, SyntheticSection, TfTopConfig};
pub use lock::{RunLock, LOCK_FILE};

use crate::corpus::{
    build_vocab, filter_split, generate_synthetic_corpus, load_jsonl, pairs_from_conversations, save_jsonl, ContextResponsePair,
    Conversation, ParaphraseTable, Split, Vocab,
};
use crate::error::{Error, IoContext, Result};
use crate::eval::{
    ablate_alpha, ablate_threshold, data_fraction_sweep, draw_candidates, emit_report, eval_generation, eval_ranker, AblationCurve,
    AblationSetup, EvalConfig, EvalReport, Generator, RankScorer, RankerResult, RunReport, SequenceScore,
};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, ImplicitPolicy, NextToken, PolicyModel};
use crate::rewards::Rewarder;
use crate::seed::{derive_seed, rng_for, sha256_hex};
use crate::trainers::{
    generate_offline_dataset, load_offline_dataset, quark_loop, save_offline_dataset, train_dt, train_ilql, train_ppo, train_tf,
    train_tf_all, train_tf_top, BinQuantizer, OfflineDataset, OfflineProvenance,
};

/// Models in the pipeline are single precision.
pub type Model = PolicyModel<f32>;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CORPUS_META: &str = "corpus.json";
pub const BEHAVIOR_FILE: &str = "behavior.json";
pub const OFFLINE_FILE: &str = "offline.jsonl";
pub const REFERENCE_FILE: &str = "reference.json";
pub const CONFIG_SNAPSHOT: &str = "run.toml";
pub const REPORT_DIR: &str = "report";

/// Provenance of every artifact: `config` is the stage hash, the other
/// entries are content hashes of upstream files.
pub type Provenance = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusMeta {
    provenance: Provenance,
    corpus_sha256: String,
    vocab: Vocab,
    paraphrases: Option<ParaphraseTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamped<T> {
    provenance: Provenance,
    data: T,
}

/// Corpus, vocabulary and pairs as loaded from the output directory.
pub struct CorpusData {
    pub conversations: Vec<Conversation>,
    pub vocab: Vocab,
    pub paraphrases: Option<ParaphraseTable>,
    pub pairs: Vec<ContextResponsePair>,
    split_seed: u64,
}

impl CorpusData {
    pub fn split(&self, split: Split) -> Vec<&ContextResponsePair> {
        filter_split(&self.pairs, self.split_seed, split)
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).at(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).at(path)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path).at(path)?)?)
}

fn require(path: &Path, what: &'static str, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { what, path: path.to_path_buf(), stage })
    }
}

fn expect_entry(prov: &Provenance, key: &str, want: &str, path: &Path, rerun: &str) -> Result<()> {
    match prov.get(key) {
        Some(got) if got == want => Ok(()),
        Some(_) => Err(Error::Provenance(format!("{} was built from a different {key}; run {rerun} again", path.display()))),
        None => Err(Error::Provenance(format!("{} has no {key} hash; run {rerun} again", path.display()))),
    }
}

/// Where stage-3 `method` keeps its checkpoint.
pub fn model_path(out: &Path, method: Method) -> PathBuf {
    match method {
        Method::Tf => out.join(BEHAVIOR_FILE),
        m => out.join("models").join(format!("{}.json", m.name())),
    }
}

fn train_command(method: Method) -> &'static str {
    match method {
        Method::Tf => "train-tf",
        Method::TfAll => "train tf-all",
        Method::TfTop => "train tf-top",
        Method::Dt => "train dt",
        Method::Ilql => "train ilql",
        Method::Ppo => "train ppo",
        Method::Quark => "train quark",
    }
}

/// A run bound to its output directory, which it holds locked.
pub struct Pipeline {
    pub cfg: RunConfig,
    out: PathBuf,
    _lock: RunLock,
}

impl Pipeline {
    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.check()?;
        let out = cfg.out.clone();
        let lock = RunLock::acquire(&out)?;
        let snapshot = out.join(CONFIG_SNAPSHOT);
        std::fs::write(&snapshot, cfg.to_toml()).at(&snapshot)?;
        Ok(Self { cfg, out, _lock: lock })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, label)
    }

    fn stage_prov(&self, stage: Stage, upstream: &[(&str, &Path)]) -> Result<Provenance> {
        let mut p = Provenance::new();
        p.insert("config".into(), self.cfg.stage_hash(stage));
        for (name, path) in upstream {
            p.insert((*name).into(), file_hash(path)?);
        }
        Ok(p)
    }

    fn check_prov(&self, prov: &Provenance, stage: Stage, upstream: &[(&str, &Path)], path: &Path, rerun: &str) -> Result<()> {
        expect_entry(prov, "config", &self.cfg.stage_hash(stage), path, rerun)?;
        for (name, up) in upstream {
            expect_entry(prov, name, &file_hash(up)?, path, rerun)?;
        }
        Ok(())
    }

    // ---- stage 0: corpus

    pub fn gen_corpus(&self) -> Result<()> {
        let c = &self.cfg.corpus;
        let (conversations, paraphrases) = match &c.jsonl {
            Some(path) => (load_jsonl(path)?, None),
            None => {
                let spec = c.synthetic.spec(self.seed("corpus"));
                let s = generate_synthetic_corpus(&spec)?;
                (s.conversations, Some(s.paraphrases))
            }
        };
        let vocab = build_vocab(&conversations, c.num_bins)?;
        let corpus_path = self.out.join(CORPUS_FILE);
        save_jsonl(&corpus_path, &conversations)?;
        let meta = CorpusMeta { provenance: self.stage_prov(Stage::Corpus, &[])?, corpus_sha256: file_hash(&corpus_path)?, vocab, paraphrases };
        log::info!("corpus: {} conversations, vocabulary {}", conversations.len(), meta.vocab.len());
        write_json(&self.out.join(CORPUS_META), &meta)
    }

    pub fn load_corpus(&self) -> Result<CorpusData> {
        let (meta_path, corpus_path) = (self.out.join(CORPUS_META), self.out.join(CORPUS_FILE));
        require(&meta_path, "corpus", "gen-corpus")?;
        require(&corpus_path, "corpus", "gen-corpus")?;
        let meta: CorpusMeta = read_json(&meta_path)?;
        self.check_prov(&meta.provenance, Stage::Corpus, &[], &meta_path, "gen-corpus")?;
        if file_hash(&corpus_path)? != meta.corpus_sha256 {
            return Err(Error::Provenance(format!("{} changed after it was written; run gen-corpus again", corpus_path.display())));
        }
        let conversations = load_jsonl(&corpus_path)?;
        let pairs = pairs_from_conversations(&conversations, &meta.vocab, self.cfg.corpus.max_context_len)?;
        Ok(CorpusData { conversations, vocab: meta.vocab, paraphrases: meta.paraphrases, pairs, split_seed: self.seed("split") })
    }

    pub fn rewarder(&self, corpus: &CorpusData) -> Result<Rewarder> {
        Rewarder::new(self.cfg.reward.clone(), corpus.vocab.clone(), corpus.paraphrases.clone())
    }

    // ---- stage 1: behavior model

    pub fn train_behavior(&self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let mut rng = rng_for(self.cfg.seed, "behavior");
        let mut model = Model::new(self.cfg.model.clone(), corpus.vocab.len(), &mut rng)?;
        let report = train_tf(&mut model, &corpus.split(Split::Train), &corpus.split(Split::Val), &self.cfg.behavior, &mut rng)?;
        log::info!("behavior: kept epoch {} of {}", report.kept_epoch, self.cfg.behavior.epochs);
        let prov = self.stage_prov(Stage::Behavior, &[("corpus", &self.out.join(CORPUS_META))])?;
        save_checkpoint(&self.out.join(BEHAVIOR_FILE), &Checkpoint::from_model(&model, &corpus.vocab.hash(), prov))
    }

    /// The checkpoint of `method` after checking its provenance.
    pub fn load_model(&self, method: Method) -> Result<Model> {
        let path = model_path(&self.out, method);
        let (what, cmd) = match method {
            Method::Tf => ("behavior checkpoint", "train-tf"),
            _ => ("model checkpoint", train_command(method)),
        };
        require(&path, what, cmd)?;
        let ckpt = load_checkpoint::<f32>(&path)?;
        let upstream: Vec<(&str, PathBuf)> = match method {
            Method::Tf => vec![("corpus", self.out.join(CORPUS_META))],
            Method::Ppo => vec![("behavior", self.out.join(BEHAVIOR_FILE))],
            _ => vec![("offline", self.out.join(OFFLINE_FILE))],
        };
        let up: Vec<(&str, &Path)> = upstream.iter().map(|(n, p)| (*n, p.as_path())).collect();
        let stage = if method == Method::Tf { Stage::Behavior } else { Stage::Train(method) };
        self.check_prov(&ckpt.provenance, stage, &up, &path, cmd)?;
        ckpt.into_model()
    }

    // ---- stage 2: offline dataset

    pub fn gen_offline(&self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let behavior = self.load_model(Method::Tf)?;
        let rewarder = self.rewarder(&corpus)?;
        let behavior_path = self.out.join(BEHAVIOR_FILE);
        let prov = OfflineProvenance {
            behavior: file_hash(&behavior_path)?,
            reward_spec: self.cfg.reward.clone(),
            n_model: self.cfg.offline.n_model,
            upstream: self.stage_prov(Stage::Offline, &[])?,
        };
        let train = corpus.split(Split::Train);
        let mut rng = rng_for(self.cfg.seed, "offline");
        let data = generate_offline_dataset(&behavior, &train, &rewarder, self.cfg.offline.n_model, self.cfg.offline.horizon, prov, &mut rng)?;
        log::info!("offline: {} records over {} contexts", data.len(), train.len());
        save_offline_dataset(&self.out.join(OFFLINE_FILE), &data)
    }

    pub fn load_offline(&self) -> Result<OfflineDataset> {
        let path = self.out.join(OFFLINE_FILE);
        require(&path, "offline dataset", "gen-offline")?;
        let data = load_offline_dataset(&path)?;
        self.check_prov(&data.provenance.upstream, Stage::Offline, &[], &path, "gen-offline")?;
        if data.provenance.behavior != file_hash(&self.out.join(BEHAVIOR_FILE))? {
            return Err(Error::Provenance(format!("{} was sampled from a different behavior model; run gen-offline again", path.display())));
        }
        Ok(data)
    }

    /// The offline dataset cut down to the configured share of contexts.
    fn stage3_data(&self) -> Result<OfflineDataset> {
        self.load_offline()?.subsample_contexts(self.cfg.data_fraction, &mut rng_for(self.cfg.seed, "fraction"))
    }

    fn quantizer(&self) -> Result<BinQuantizer> {
        BinQuantizer::uniform(self.cfg.corpus.num_bins)
    }

    // ---- stage 3: methods

    pub fn train(&self, method: Method) -> Result<()> {
        let path = model_path(&self.out, method);
        let (ckpt_vocab, model, upstream) = match method {
            Method::Tf => return self.train_behavior(),
            Method::Ppo => {
                // PPO only needs the behavior model and live rewards.
                let corpus = self.load_corpus()?;
                let reference = self.load_model(Method::Tf)?;
                let rewarder = self.rewarder(&corpus)?;
                let mut model = reference.clone();
                let mut rng = rng_for(self.cfg.seed, "train/ppo");
                let report = train_ppo(&mut model, &reference, &corpus.split(Split::Train), &rewarder, &self.cfg.ppo, self.cfg.offline.horizon, &mut rng)?;
                if let Some(last) = report.steps.last() {
                    log::info!("ppo: final batch reward {:.3}, kl {:.4}", last.mean_reward, last.kl);
                }
                (corpus.vocab.hash(), model, ("behavior", self.out.join(BEHAVIOR_FILE)))
            }
            _ => {
                let corpus = self.load_corpus()?;
                let mut model = self.load_model(Method::Tf)?;
                let data = self.stage3_data()?;
                let mut rng = rng_for(self.cfg.seed, &format!("train/{}", method.name()));
                match method {
                    Method::TfAll => {
                        train_tf_all(&mut model, &data, &self.cfg.tf_all, &mut rng)?;
                    }
                    Method::TfTop => {
                        train_tf_top(&mut model, &data, &self.cfg.tf_top.filter, &self.cfg.tf_top.train, &mut rng)?;
                    }
                    Method::Dt => {
                        train_dt(&mut model, &data, &self.quantizer()?, &corpus.vocab, &self.cfg.dt, &mut rng)?;
                    }
                    Method::Ilql => {
                        let r = train_ilql(&mut model, &data, &self.cfg.ilql, &mut rng)?;
                        if let Some(l) = r.epoch_losses.last() {
                            log::info!("ilql: q {:.4} v {:.4} kl {:.4}", l.q_loss, l.v_loss, l.kl);
                        }
                    }
                    Method::Quark => {
                        let rewarder = self.rewarder(&corpus)?;
                        let mut collect = rng_for(self.cfg.seed, "train/quark/collect");
                        let (report, _) = quark_loop(
                            &mut model,
                            &corpus.split(Split::Train),
                            &rewarder,
                            &self.quantizer()?,
                            &data,
                            &self.cfg.quark,
                            self.cfg.offline.horizon,
                            &mut collect,
                            &mut rng,
                        )?;
                        log::info!("quark: pool sizes {:?}", report.dataset_sizes);
                    }
                    Method::Tf | Method::Ppo => unreachable!("handled above"),
                }
                (corpus.vocab.hash(), model, ("offline", self.out.join(OFFLINE_FILE)))
            }
        };
        let prov = self.stage_prov(Stage::Train(method), &[(upstream.0, &upstream.1)])?;
        std::fs::create_dir_all(path.parent().expect("models dir")).at(&path)?;
        log::info!("{}: trained", method.label());
        save_checkpoint(&path, &Checkpoint::from_model(&model, &ckpt_vocab, prov))
    }

    // ---- evaluation

    /// Reference LM for perplexity, trained on every pair of the corpus.
    fn reference_model(&self, corpus: &CorpusData) -> Result<Model> {
        let path = self.out.join(REFERENCE_FILE);
        let corpus_meta = self.out.join(CORPUS_META);
        if path.exists() {
            let ckpt = load_checkpoint::<f32>(&path)?;
            if self.check_prov(&ckpt.provenance, Stage::Reference, &[("corpus", &corpus_meta)], &path, "eval-gen").is_ok() {
                return ckpt.into_model();
            }
        }
        let mut rng = rng_for(self.cfg.seed, "reference");
        let mut model = Model::new(self.cfg.model.clone(), corpus.vocab.len(), &mut rng)?;
        let all: Vec<&ContextResponsePair> = corpus.pairs.iter().collect();
        train_tf(&mut model, &all, &[], &self.cfg.eval.reference, &mut rng)?;
        let prov = self.stage_prov(Stage::Reference, &[("corpus", &corpus_meta)])?;
        save_checkpoint(&path, &Checkpoint::from_model(&model, &corpus.vocab.hash(), prov))?;
        Ok(model)
    }

    fn eval_config(&self, label: &str) -> EvalConfig {
        EvalConfig { horizon: self.cfg.eval.horizon, k_max: self.cfg.eval.k_max, seed: self.seed(label) }
    }

    fn eval_hash(&self) -> String {
        let e = &self.cfg.eval;
        let v = serde_json::json!({ "horizon": e.horizon, "k_max": e.k_max, "ranker_n": e.ranker_n, "sets": e.candidate_sets,
            "perplexity": e.perplexity, "reference": e.reference, "seed": self.cfg.seed, "corpus": self.cfg.stage_hash(Stage::Corpus),
            "reward": self.cfg.reward });
        sha256_hex(&serde_json::to_vec(&v).expect("json"))
    }

    fn results_dir(&self) -> PathBuf {
        self.out.join("results")
    }

    fn gen_result_path(&self, method: Method) -> PathBuf {
        self.results_dir().join(format!("gen_{}.json", method.name()))
    }

    fn methods_or_config(&self, methods: &[Method]) -> Vec<Method> {
        if methods.is_empty() {
            self.cfg.eval.methods.clone()
        } else {
            methods.to_vec()
        }
    }

    /// Greedy metrics, histogram and best-of-k curve for each method.
    pub fn eval_gen(&self, methods: &[Method]) -> Result<Vec<EvalReport>> {
        let methods = self.methods_or_config(methods);
        let corpus = self.load_corpus()?;
        let rewarder = self.rewarder(&corpus)?;
        let test = corpus.split(Split::Test);
        let reference = if self.cfg.eval.perplexity { Some(self.reference_model(&corpus)?) } else { None };
        let cfg = self.eval_config("eval-gen");
        let top = Some(corpus.vocab.bin_token(self.quantizer()?.top()));
        std::fs::create_dir_all(self.results_dir()).at(self.results_dir())?;
        let mut reports = Vec::new();
        for m in methods {
            let model = self.load_model(m)?;
            let implicit = ImplicitPolicy(&model);
            let (policy, condition): (&(dyn NextToken + Sync), Option<u32>) = match m {
                Method::Dt | Method::Quark => (&model, top),
                Method::Ilql => (&implicit, None),
                _ => (&model, None),
            };
            let mut report = eval_generation(m.label(), Generator { policy, condition }, &test, &rewarder, reference.as_ref().map(|r| r as &dyn SequenceScore), &cfg)?;
            report.seed = self.cfg.seed;
            report.fraction = if m == Method::Tf { 1.0 } else { self.cfg.data_fraction };
            log::info!("eval-gen {}: click {:.3} f1 {:.3}", m.label(), report.click, report.token_f1);
            let prov = self.result_prov(&[m])?;
            write_json(&self.gen_result_path(m), &Stamped { provenance: prov, data: report.clone() })?;
            reports.push(report);
        }
        Ok(reports)
    }

    fn result_prov(&self, methods: &[Method]) -> Result<Provenance> {
        let mut p = Provenance::new();
        p.insert("config".into(), self.eval_hash());
        for m in methods {
            p.insert(m.name().into(), file_hash(&model_path(&self.out, *m))?);
        }
        Ok(p)
    }

    fn check_result(&self, prov: &Provenance, methods: &[Method], path: &Path, rerun: &str) -> Result<()> {
        expect_entry(prov, "config", &self.eval_hash(), path, rerun)?;
        for m in methods {
            let model = model_path(&self.out, *m);
            require(&model, "model checkpoint", train_command(*m))?;
            expect_entry(prov, m.name(), &file_hash(&model)?, path, rerun)?;
        }
        Ok(())
    }

    /// Every method ranks the same behavior-model candidates; the oracle
    /// and random rankers bracket them.
    pub fn eval_rank(&self, methods: &[Method]) -> Result<Vec<RankerResult>> {
        let methods = self.methods_or_config(methods);
        let corpus = self.load_corpus()?;
        let rewarder = self.rewarder(&corpus)?;
        let test = corpus.split(Split::Test);
        let behavior = self.load_model(Method::Tf)?;
        let e = &self.cfg.eval;
        let sets = draw_candidates(&behavior, &test, &rewarder, e.ranker_n, e.candidate_sets, e.horizon, self.seed("eval-rank"))?;
        let models: Vec<(Method, Model)> = methods.iter().map(|&m| Ok((m, self.load_model(m)?))).collect::<Result<_>>()?;
        let top = Some(corpus.vocab.bin_token(self.quantizer()?.top()));
        let mut scorers: Vec<(&str, RankScorer<'_>)> = models
            .iter()
            .map(|(m, model)| {
                let s = match m {
                    Method::Ilql => RankScorer::Critic(model),
                    Method::Dt | Method::Quark => RankScorer::LogProb { model, condition: top },
                    _ => RankScorer::LogProb { model, condition: None },
                };
                (m.label(), s)
            })
            .collect();
        scorers.push(("Random", RankScorer::Random { seed: self.seed("eval-rank/random") }));
        scorers.push(("Oracle", RankScorer::Oracle));
        let mut results = eval_ranker(&scorers, &sets, self.cfg.seed)?;
        for r in &mut results {
            r.seed = self.cfg.seed;
            log::info!("eval-rank {}: {:.3}", r.method, r.mean_reward);
        }
        std::fs::create_dir_all(self.results_dir()).at(self.results_dir())?;
        let mut prov = self.result_prov(&methods)?;
        prov.insert("methods".into(), methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","));
        write_json(&self.results_dir().join("rank.json"), &Stamped { provenance: prov, data: results.clone() })?;
        Ok(results)
    }

    // ---- ablations

    pub fn ablate(&self, kind: AblationKind) -> Result<AblationCurve> {
        let corpus = self.load_corpus()?;
        let rewarder = self.rewarder(&corpus)?;
        let test = corpus.split(Split::Test);
        let base = self.load_model(Method::Tf)?;
        let data = self.load_offline()?;
        let a = &self.cfg.ablation;
        let setup = AblationSetup {
            base: &base,
            data: &data,
            test: &test,
            rewarder: &rewarder,
            eval: self.eval_config("ablate/eval"),
            seed: self.seed(&format!("ablate/{}", kind.name())),
        };
        let mut curve = match kind {
            AblationKind::Threshold => ablate_threshold(&setup, &a.quantiles, &self.cfg.tf_top.train)?,
            AblationKind::Alpha => ablate_alpha(&setup, &a.alphas, &self.cfg.ilql)?,
            AblationKind::Fraction => {
                data_fraction_sweep(&setup, &a.fractions, &self.cfg.tf_top.filter, &self.cfg.tf_top.train, &self.quantizer()?, &self.cfg.dt)?
            }
        };
        curve.seed = self.cfg.seed;
        for p in &curve.points {
            log::info!("ablate {} {} x={}: similarity {:.3}", kind.name(), p.method, p.x, p.similarity);
        }
        let mut prov = Provenance::new();
        let section = serde_json::json!({ "ablation": a, "tf_top": self.cfg.tf_top, "ilql": self.cfg.ilql, "dt": self.cfg.dt, "eval": self.eval_hash() });
        prov.insert("config".into(), sha256_hex(&serde_json::to_vec(&section).expect("json")));
        prov.insert("offline".into(), file_hash(&self.out.join(OFFLINE_FILE))?);
        std::fs::create_dir_all(self.results_dir()).at(self.results_dir())?;
        write_json(&self.results_dir().join(format!("ablation_{}.json", kind.name())), &Stamped { provenance: prov, data: curve.clone() })?;
        Ok(curve)
    }

    // ---- reports

    /// Collects every evaluation result in the directory, checks each
    /// against the current artifacts, and writes the CSV and SVG report.
    pub fn emit(&self) -> Result<RunReport> {
        let mut generation = Vec::new();
        for m in [Method::Tf].into_iter().chain(Method::TRAINED) {
            let path = self.gen_result_path(m);
            if path.exists() {
                let s: Stamped<EvalReport> = read_json(&path)?;
                self.check_result(&s.provenance, &[m], &path, "eval-gen")?;
                generation.push(s.data);
            }
        }
        let mut ranker = Vec::new();
        let rank_path = self.results_dir().join("rank.json");
        if rank_path.exists() {
            let s: Stamped<Vec<RankerResult>> = read_json(&rank_path)?;
            let methods: Vec<Method> = match s.provenance.get("methods") {
                Some(list) if !list.is_empty() => list.split(',').map(str::parse).collect::<Result<_>>()?,
                _ => Vec::new(),
            };
            self.check_result(&s.provenance, &methods, &rank_path, "eval-rank")?;
            ranker = s.data;
        }
        let mut ablations = Vec::new();
        for kind in [AblationKind::Threshold, AblationKind::Alpha, AblationKind::Fraction] {
            let path = self.results_dir().join(format!("ablation_{}.json", kind.name()));
            if path.exists() {
                let s: Stamped<AblationCurve> = read_json(&path)?;
                expect_entry(&s.provenance, "offline", &file_hash(&self.out.join(OFFLINE_FILE))?, &path, &format!("ablate {}", kind.name()))?;
                ablations.push(s.data);
            }
        }
        let mut provenance = BTreeMap::new();
        provenance.insert("seed".into(), self.cfg.seed.to_string());
        provenance.insert("eval_config".into(), self.eval_hash());
        provenance.insert("corpus_config".into(), self.cfg.stage_hash(Stage::Corpus));
        if self.cfg.eval.perplexity {
            provenance.insert("perplexity_reference".into(), "LM trained on the whole corpus (stands in for a pretrained LM)".into());
        }
        for name in [BEHAVIOR_FILE, OFFLINE_FILE] {
            let p = self.out.join(name);
            if p.exists() {
                provenance.insert(name.into(), file_hash(&p)?);
            }
        }
        let report = RunReport { provenance, generation, ranker, ablations };
        emit_report(&report, &self.out.join(REPORT_DIR))?;
        Ok(report)
    }

    // ---- everything

    fn up_to_date(&self, stage: Stage) -> bool {
        match stage {
            Stage::Corpus => self.load_corpus().is_ok(),
            Stage::Offline => self.load_offline().is_ok(),
            Stage::Train(m) => self.load_model(m).is_ok(),
            Stage::Behavior => self.load_model(Method::Tf).is_ok(),
            Stage::Reference => true,
        }
    }

    /// Stage 1 to 3, evaluation, the configured ablations and the report.
    /// Artifacts whose provenance already matches are reused.
    pub fn run_all(&self) -> Result<RunReport> {
        if !self.up_to_date(Stage::Corpus) {
            self.gen_corpus()?;
        }
        if !self.up_to_date(Stage::Behavior) {
            self.train_behavior()?;
        }
        if !self.up_to_date(Stage::Offline) {
            self.gen_offline()?;
        }
        let methods = self.cfg.eval.methods.clone();
        for &m in methods.iter().filter(|&&m| m != Method::Tf) {
            if !self.up_to_date(Stage::Train(m)) {
                self.train(m)?;
            }
        }
        self.eval_gen(&methods)?;
        self.eval_rank(&methods)?;
        for kind in self.cfg.ablation.run.clone() {
            self.ablate(kind)?;
        }
        self.emit()
    }
}
