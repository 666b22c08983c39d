//! Rate–distortion sweeps: one trained model per λ, evaluated by real encodes.

use crate::codec;
use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::Corpus;
use crate::error::Result;
use crate::image::Image;
use crate::metrics::{psnr, RdRecord};
use crate::model::Model;
use crate::tensor::Real;
use crate::train::{train, StepRecord};

/// Progress events reported by [`sweep`].
pub enum SweepEvent<'a> {
    Step { lambda: f64, record: &'a StepRecord },
    Evaluated(&'a RdRecord),
}

/// Trains one model per `lambdas[i]` with seed `base.seed + i`, then encodes
/// every evaluation image and records actual file bpp and PSNR.
pub fn sweep<T: Real>(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    lambdas: &[f64],
    corpus: &Corpus,
    eval: &[(String, Image)],
    mut progress: impl FnMut(SweepEvent<'_>),
) -> Result<Vec<RdRecord>> {
    let mut records = Vec::new();
    for (i, &lambda) in lambdas.iter().enumerate() {
        let (_, recs) = sweep_point::<T>(base, train_cfg, i, lambda, corpus, eval, &mut progress)?;
        records.extend(recs);
    }
    Ok(records)
}

/// The `index`-th point of [`sweep`]: returns the trained model and its records.
pub fn sweep_point<T: Real>(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    index: usize,
    lambda: f64,
    corpus: &Corpus,
    eval: &[(String, Image)],
    mut progress: impl FnMut(SweepEvent<'_>),
) -> Result<(Model<T>, Vec<RdRecord>)> {
    let cfg = ModelConfig { lambda, seed: base.seed.wrapping_add(index as u64), ..base.clone() };
    let model = Model::<T>::new(cfg)?;
    let (model, _) = train(model, corpus, train_cfg, |r| progress(SweepEvent::Step { lambda, record: r }))?;
    let records = evaluate(&model, eval)?;
    for rec in &records {
        progress(SweepEvent::Evaluated(rec));
    }
    Ok((model, records))
}

/// Encodes each image and reports its RD point at the model's λ.
pub fn evaluate<T: Real>(model: &Model<T>, images: &[(String, Image)]) -> Result<Vec<RdRecord>> {
    images
        .iter()
        .map(|(name, img)| {
            let enc = codec::encode(model, img)?;
            let pixels = (img.width * img.height) as f64;
            Ok(RdRecord {
                image: name.clone(),
                lambda: model.config.lambda,
                bpp: enc.compressed.file_bits() as f64 / pixels,
                psnr: psnr(&img.data, &enc.reconstruction.data)?,
            })
        })
        .collect()
}
