//! Return-conditioned teacher forcing: each response is trained after a
//! token naming its return bin.

use rand::Rng;

use super::filter::{quantize_return, BinQuantizer};
use super::offline::OfflineDataset;
use super::{fit_lm, Example, LmTrainConfig, TrainReport};
use crate::corpus::Vocab;
use crate::error::Result;
use crate::model::PolicyModel;
use crate::scalar::Scalar;

pub fn dt_examples(data: &OfflineDataset, quantizer: &BinQuantizer, vocab: &Vocab) -> Result<Vec<Example>> {
    data.records
        .iter()
        .map(|r| {
            Ok(Example { context: r.context.clone(), condition: Some(quantize_return(r.reward, quantizer, vocab)?), response: r.response.clone() })
        })
        .collect()
}

pub fn train_dt<T: Scalar, R: Rng + ?Sized>(
    model: &mut PolicyModel<T>,
    data: &OfflineDataset,
    quantizer: &BinQuantizer,
    vocab: &Vocab,
    cfg: &LmTrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    let ex = dt_examples(data, quantizer, vocab)?;
    fit_lm(model, &ex, &[], cfg, rng)
}
