use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticTaskSpec;
use crate::error::{Error, IoContext, Result};
use crate::model::CausalLMConfig;
use crate::rewards::{RewardSpec, ScorerKind};
use crate::seed::sha256_hex;
use crate::trainers::{IlqlConfig, LmTrainConfig, PpoConfig, QuarkConfig, TopFilterConfig};

/// Stage-3 methods plus the behavior model itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Tf,
    TfAll,
    TfTop,
    Dt,
    Ilql,
    Ppo,
    Quark,
}

impl Method {
    pub const TRAINED: [Method; 6] = [Method::TfAll, Method::TfTop, Method::Dt, Method::Ilql, Method::Ppo, Method::Quark];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tf => "tf",
            Method::TfAll => "tf-all",
            Method::TfTop => "tf-top",
            Method::Dt => "dt",
            Method::Ilql => "ilql",
            Method::Ppo => "ppo",
            Method::Quark => "quark",
        }
    }

    /// Label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Method::Tf => "TF",
            Method::TfAll => "TF-All",
            Method::TfTop => "TF-Top",
            Method::Dt => "DT",
            Method::Ilql => "ILQL",
            Method::Ppo => "PPO",
            Method::Quark => "Quark",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Tf].iter().chain(&Method::TRAINED).copied().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(vec![format!("unknown method {s:?}; expected tf, tf-all, tf-top, dt, ilql, ppo or quark")])
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Threshold,
    Alpha,
    Fraction,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Threshold => "threshold",
            AblationKind::Alpha => "alpha",
            AblationKind::Fraction => "fraction",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Learning rates, epochs and batch sizes tuned for a pretrained GPT-2 sized model.
    #[default]
    Full,
    /// A small network and larger learning rates that finish in minutes on one core.
    Desk,
}

/// Synthetic corpus shape. Its seed is derived from the run's root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub num_conversations: usize,
    pub num_intents: usize,
    pub slots_per_intent: usize,
    pub paraphrases: usize,
    pub generic_prob: f64,
    pub closing_prob: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticTaskSpec::default();
        Self {
            num_conversations: d.num_conversations,
            num_intents: d.num_intents,
            slots_per_intent: d.slots_per_intent,
            paraphrases: d.paraphrases,
            generic_prob: d.generic_prob,
            closing_prob: d.closing_prob,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            num_conversations: self.num_conversations,
            num_intents: self.num_intents,
            slots_per_intent: self.slots_per_intent,
            paraphrases: self.paraphrases,
            generic_prob: self.generic_prob,
            closing_prob: self.closing_prob,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Ingest this JSONL corpus instead of generating a synthetic one.
    pub jsonl: Option<PathBuf>,
    pub synthetic: SyntheticSection,
    pub max_context_len: usize,
    /// Return bins, i.e. DT conditioning tokens.
    pub num_bins: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { jsonl: None, synthetic: SyntheticSection::default(), max_context_len: 24, num_bins: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    /// Model samples per context next to the human response.
    pub n_model: usize,
    pub horizon: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self { n_model: 5, horizon: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TfTopConfig {
    pub filter: TopFilterConfig,
    pub train: LmTrainConfig,
}

impl Default for TfTopConfig {
    fn default() -> Self {
        Self { filter: TopFilterConfig::default(), train: stage3_train() }
    }
}

fn stage3_train() -> LmTrainConfig {
    LmTrainConfig { epochs: 5, batch_size: 32, lr: 5e-5, select_best: false, ..LmTrainConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub horizon: usize,
    /// Longest best-of-k curve.
    pub k_max: usize,
    /// Candidates per ranker set.
    pub ranker_n: usize,
    /// Independent candidate sets drawn per test context.
    pub candidate_sets: usize,
    /// Methods evaluated by eval-gen and eval-rank.
    pub methods: Vec<Method>,
    /// Train a reference LM on the whole corpus and report perplexity under it.
    pub perplexity: bool,
    pub reference: LmTrainConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            horizon: 12,
            k_max: 5,
            ranker_n: 5,
            candidate_sets: 1,
            methods: [Method::Tf].into_iter().chain(Method::TRAINED).collect(),
            perplexity: true,
            reference: LmTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Sweeps run by run-all.
    pub run: Vec<AblationKind>,
    pub quantiles: Vec<f64>,
    pub alphas: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            run: vec![AblationKind::Threshold, AblationKind::Alpha, AblationKind::Fraction],
            quantiles: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            alphas: vec![0.001, 0.005, 0.05, 0.5, 5.0],
            fractions: vec![0.2, 0.8],
        }
    }
}

/// Everything a run needs, loaded from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base values that the rest of the file overrides.
    pub preset: Preset,
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub out: PathBuf,
    /// Share of offline context groups used by stage 3.
    pub data_fraction: f64,
    pub corpus: CorpusConfig,
    pub reward: RewardSpec,
    pub model: CausalLMConfig,
    pub behavior: LmTrainConfig,
    pub offline: OfflineConfig,
    pub tf_all: LmTrainConfig,
    pub tf_top: TfTopConfig,
    pub dt: LmTrainConfig,
    pub ilql: IlqlConfig,
    pub ppo: PpoConfig,
    pub quark: QuarkConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Full,
            seed: 0,
            out: PathBuf::from("runs/default"),
            data_fraction: 1.0,
            corpus: CorpusConfig::default(),
            reward: RewardSpec::default(),
            model: CausalLMConfig::default(),
            behavior: LmTrainConfig::default(),
            offline: OfflineConfig::default(),
            tf_all: stage3_train(),
            tf_top: TfTopConfig::default(),
            dt: stage3_train(),
            ilql: IlqlConfig::default(),
            ppo: PpoConfig::default(),
            quark: QuarkConfig::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self::default(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Learning rates scaled up for a freshly initialized small network.
    pub fn desk() -> Self {
        let base = Self::default();
        let stage3 = LmTrainConfig { lr: 1.5e-3, ..stage3_train() };
        Self {
            preset: Preset::Desk,
            model: CausalLMConfig { block: 40, ..CausalLMConfig::desk() },
            behavior: LmTrainConfig { lr: 3e-3, ..LmTrainConfig::default() },
            tf_all: stage3.clone(),
            tf_top: TfTopConfig { filter: TopFilterConfig::default(), train: stage3.clone() },
            dt: stage3.clone(),
            // a frozen behavior backbone gives the critic too little to separate good responses
            ilql: IlqlConfig { lr: 1e-3, epochs: 3, finetune_backbone: true, ..IlqlConfig::default() },
            ppo: PpoConfig { lr: 1e-4, ..PpoConfig::default() },
            quark: QuarkConfig { train: LmTrainConfig { epochs: 1, ..stage3.clone() }, ..QuarkConfig::default() },
            eval: EvalSection { reference: LmTrainConfig { lr: 3e-3, ..LmTrainConfig::default() }, ..base.eval.clone() },
            ..base
        }
    }

    /// Parses TOML on top of the preset it names.
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let preset = match file.get("preset") {
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| Error::Config(vec![format!("preset: {e}")]))?,
            None => Preset::Full,
        };
        let mut merged = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(vec![e.to_string()]))?;
        merge(&mut merged, file);
        let cfg = Self::deserialize(toml::Value::Table(merged)).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(errs) => Error::Config(errs.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Every problem with the config, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            errs.push(format!("data_fraction must be in (0, 1], got {}", self.data_fraction));
        }
        if self.corpus.jsonl.is_none() {
            errs.extend(self.corpus.synthetic.spec(0).validate().into_iter().map(|e| format!("corpus.synthetic: {e}")));
        } else if self.reward.scorer == ScorerKind::ParaphraseClass {
            errs.push("reward.scorer = paraphrase_class needs the synthetic corpus (corpus.jsonl is set)".into());
        }
        if self.corpus.max_context_len == 0 {
            errs.push("corpus.max_context_len must be positive".into());
        }
        if self.corpus.num_bins < 2 {
            errs.push(format!("corpus.num_bins must be at least 2, got {}", self.corpus.num_bins));
        }
        errs.extend(self.reward.validate().into_iter().map(|e| format!("reward: {e}")));
        errs.extend(self.model.validate().into_iter().map(|e| format!("model: {e}")));
        // context, one condition token and the longest response must fit
        let need = self.corpus.max_context_len + 2 + self.offline.horizon.max(self.eval.horizon);
        if self.model.block < need {
            errs.push(format!(
                "model.block {} is shorter than max_context_len + horizon + 2 = {need}",
                self.model.block
            ));
        }
        errs.extend(self.behavior.validate("behavior"));
        if self.offline.horizon == 0 {
            errs.push("offline.horizon must be positive".into());
        }
        errs.extend(self.tf_all.validate("tf_all"));
        errs.extend(self.tf_top.filter.validate().into_iter().map(|e| format!("tf_top: {e}")));
        errs.extend(self.tf_top.train.validate("tf_top.train"));
        errs.extend(self.dt.validate("dt"));
        errs.extend(self.ilql.validate().into_iter().map(|e| format!("ilql: {e}")));
        errs.extend(self.ppo.validate().into_iter().map(|e| format!("ppo: {e}")));
        errs.extend(self.quark.train.validate("quark.train"));
        if self.quark.epochs == 0 {
            errs.push("quark.epochs must be positive".into());
        }
        if self.eval.horizon == 0 || self.eval.ranker_n == 0 || self.eval.candidate_sets == 0 {
            errs.push("eval.horizon, eval.ranker_n and eval.candidate_sets must be positive".into());
        }
        if self.eval.perplexity {
            errs.extend(self.eval.reference.validate("eval.reference"));
        }
        let a = &self.ablation;
        if a.quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            errs.push("ablation.quantiles must lie in [0, 1]".into());
        }
        if a.alphas.iter().any(|x| !(*x >= 0.0)) {
            errs.push("ablation.alphas must be nonnegative".into());
        }
        if a.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            errs.push("ablation.fractions must lie in (0, 1]".into());
        }
        for kind in &a.run {
            let empty = match kind {
                AblationKind::Threshold => a.quantiles.is_empty(),
                AblationKind::Alpha => a.alphas.is_empty(),
                AblationKind::Fraction => a.fractions.is_empty(),
            };
            if empty {
                errs.push(format!("ablation.run lists {} but its value list is empty", kind.name()));
            }
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Hash of the settings each stage's artifact depends on, chained
    /// through its upstream stages.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let part = |v: serde_json::Value| serde_json::to_vec(&v).expect("json");
        let own = match stage {
            Stage::Corpus => part(serde_json::json!({ "seed": self.seed, "corpus": self.corpus })),
            Stage::Behavior => part(serde_json::json!({ "model": self.model, "behavior": self.behavior })),
            Stage::Offline => part(serde_json::json!({ "reward": self.reward, "offline": self.offline })),
            Stage::Train(m) => {
                let section = match m {
                    Method::Tf => serde_json::Value::Null,
                    Method::TfAll => serde_json::json!(self.tf_all),
                    Method::TfTop => serde_json::json!(self.tf_top),
                    Method::Dt => serde_json::json!(self.dt),
                    Method::Ilql => serde_json::json!(self.ilql),
                    Method::Ppo => serde_json::json!([self.ppo, self.reward]),
                    Method::Quark => serde_json::json!(self.quark),
                };
                part(serde_json::json!({ "method": m.name(), "fraction": self.data_fraction, "config": section }))
            }
            Stage::Reference => part(serde_json::json!({ "model": self.model, "reference": self.eval.reference })),
        };
        let upstream = match stage {
            Stage::Corpus => String::new(),
            Stage::Behavior | Stage::Reference => self.stage_hash(Stage::Corpus),
            Stage::Offline | Stage::Train(Method::Ppo | Method::Tf) => self.stage_hash(Stage::Behavior),
            Stage::Train(_) => self.stage_hash(Stage::Offline),
        };
        let mut bytes = upstream.into_bytes();
        bytes.extend(own);
        sha256_hex(&bytes)
    }
}

/// Pipeline stages that leave an artifact behind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Corpus,
    Behavior,
    Offline,
    Train(Method),
    Reference,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
