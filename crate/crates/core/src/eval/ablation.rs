//! Sweeps that retrain a method per setting and report greedy metrics.
//! Every point of a sweep trains from the same base model with the same
//! training seed, so differences come from the swept setting alone.

use serde::{Deserialize, Serialize};

use super::{eval_generation, EvalConfig, EvalReport, Generator};
use crate::corpus::ContextResponsePair;
use crate::error::{Error, Result};
use crate::model::{ImplicitPolicy, PolicyModel};
use crate::rewards::Rewarder;
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::trainers::{
    filter_top, train_dt, train_ilql, train_tf_all, BinQuantizer, IlqlConfig, LmTrainConfig, OfflineDataset, Source, TopFilterConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub x: f64,
    pub method: String,
    /// Training records used at this setting.
    pub records: usize,
    pub click: f64,
    pub similarity: f64,
    pub token_f1: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    /// File stem: `threshold`, `alpha` or `fraction`.
    pub name: String,
    /// Axis label.
    pub param: String,
    pub seed: u64,
    pub points: Vec<AblationPoint>,
}

impl AblationCurve {
    /// Points of one method in sweep order.
    pub fn series(&self, method: &str) -> Vec<&AblationPoint> {
        self.points.iter().filter(|p| p.method == method).collect()
    }
}

/// Shared inputs of every sweep.
pub struct AblationSetup<'a, T: Scalar> {
    pub base: &'a PolicyModel<T>,
    pub data: &'a OfflineDataset,
    pub test: &'a [&'a ContextResponsePair],
    pub rewarder: &'a Rewarder,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl<T: Scalar> AblationSetup<'_, T> {
    fn point(&self, x: f64, method: &str, records: usize, gen: Generator<'_>) -> Result<AblationPoint> {
        let cfg = EvalConfig { k_max: 0, ..self.eval.clone() };
        let r: EvalReport = eval_generation(method, gen, self.test, self.rewarder, None, &cfg)?;
        Ok(AblationPoint { x, method: method.into(), records, click: r.click, similarity: r.similarity, token_f1: r.token_f1, bleu: r.bleu })
    }
}

/// Training set per quantile. `q = 1` keeps only the human responses;
/// every other `q` keeps the records at or above the `q` quantile of all
/// returns, so `q = 0` keeps everything.
pub fn threshold_sets(data: &OfflineDataset, quantiles: &[f64]) -> Result<Vec<(f64, OfflineDataset)>> {
    quantiles
        .iter()
        .map(|&q| {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(vec![format!("ablation quantile must be in [0, 1], got {q}")]));
            }
            let set = if q == 1.0 {
                data.with_records(data.records.iter().filter(|r| r.source == Source::Human).cloned().collect())
            } else {
                filter_top(data, &TopFilterConfig::Quantile(q))?
            };
            Ok((q, set))
        })
        .collect()
}

/// TF-Top trained at each quantile threshold.
pub fn ablate_threshold<T: Scalar>(setup: &AblationSetup<'_, T>, quantiles: &[f64], train: &LmTrainConfig) -> Result<AblationCurve> {
    let mut points = Vec::new();
    for (q, set) in threshold_sets(setup.data, quantiles)? {
        let mut model = setup.base.clone();
        train_tf_all(&mut model, &set, train, &mut rng_for(setup.seed, "ablate-threshold"))?;
        points.push(setup.point(q, "TF-Top", set.len(), Generator { policy: &model, condition: None })?);
    }
    Ok(AblationCurve { name: "threshold".into(), param: "return quantile".into(), seed: setup.seed, points })
}

/// ILQL trained at each KL weight.
pub fn ablate_alpha<T: Scalar>(setup: &AblationSetup<'_, T>, alphas: &[f64], ilql: &IlqlConfig) -> Result<AblationCurve> {
    let mut points = Vec::new();
    for &alpha in alphas {
        let mut model = setup.base.clone();
        model.ilql = None;
        train_ilql(&mut model, setup.data, &IlqlConfig { alpha, ..ilql.clone() }, &mut rng_for(setup.seed, "ablate-alpha"))?;
        points.push(setup.point(alpha, "ILQL", setup.data.len(), Generator { policy: &ImplicitPolicy(&model), condition: None })?);
    }
    Ok(AblationCurve { name: "alpha".into(), param: "KL weight alpha".into(), seed: setup.seed, points })
}

/// TF-Top and DT trained on a random share of the context groups.
pub fn data_fraction_sweep<T: Scalar>(
    setup: &AblationSetup<'_, T>,
    fractions: &[f64],
    filter: &TopFilterConfig,
    tf_top: &LmTrainConfig,
    quantizer: &BinQuantizer,
    dt: &LmTrainConfig,
) -> Result<AblationCurve> {
    let vocab = setup.rewarder.vocab();
    let top_bin = Some(vocab.bin_token(quantizer.top()));
    let mut points = Vec::new();
    for &f in fractions {
        let subset = setup.data.subsample_contexts(f, &mut rng_for(setup.seed, &format!("fraction/{f}")))?;
        let top = filter_top(&subset, filter)?;
        let mut model = setup.base.clone();
        train_tf_all(&mut model, &top, tf_top, &mut rng_for(setup.seed, "ablate-fraction/tf-top"))?;
        points.push(setup.point(f, "TF-Top", top.len(), Generator { policy: &model, condition: None })?);
        let mut model = setup.base.clone();
        train_dt(&mut model, &subset, quantizer, vocab, dt, &mut rng_for(setup.seed, "ablate-fraction/dt"))?;
        points.push(setup.point(f, "DT", subset.len(), Generator { policy: &model, condition: top_bin })?);
    }
    Ok(AblationCurve { name: "fraction".into(), param: "data fraction".into(), seed: setup.seed, points })
}
