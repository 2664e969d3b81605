//! Checkpoints: every parameter (as f64) plus the full configuration and
//! its fingerprint.

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Real;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub fingerprint: String,
    pub params: Vec<ParamRecord>,
}

pub fn snapshot_params<T: Real>(model: &Model<T>) -> Vec<ParamRecord> {
    model
        .params
        .iter()
        .map(|(_, e)| ParamRecord {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: e.data.iter().map(|&v| v.as_f64()).collect(),
        })
        .collect()
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, config: &TrainConfig) -> Result<()> {
    let ck = Checkpoint {
        config: config.clone(),
        fingerprint: config.fingerprint(),
        params: snapshot_params(model),
    };
    let text = serde_json::to_string(&ck)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds a model at the checkpoint's configuration and loads the saved
/// parameter values.
pub fn model_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<Model<T>> {
    let mut model = Model::new(ck.config.model.clone(), ck.config.seed)?;
    let values: Vec<(String, Vec<f64>)> = ck
        .params
        .iter()
        .map(|r| (r.name.clone(), r.data.clone()))
        .collect();
    model.params.load_values(&values)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ForwardOpts;

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let mut cfg = TrainConfig::default();
        cfg.model.dim = 16;
        cfg.model.heads = 2;
        cfg.model.enc_blocks = 1;
        cfg.model.dec_blocks = 1;
        cfg.model.num_queries = 4;
        cfg.model.classes = 3;
        cfg.model.ffn_hidden = 32;
        cfg.model.backbone_channels = vec![4, 8];
        cfg.model.image_size = 32;
        let model = Model::<f64>::new(cfg.model.clone(), 5).unwrap();
        let dir = std::env::temp_dir().join("detq_ck_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ck.json");
        save_checkpoint(&path, &model, &cfg).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.fingerprint, cfg.fingerprint());
        let restored: Model<f64> = model_from_checkpoint(&ck).unwrap();

        let img: Vec<f64> = (0..3 * 32 * 32).map(|i| (i % 97) as f64 / 97.0).collect();
        let a = model
            .forward(&img, ForwardOpts::inference(&cfg.model.toggles))
            .unwrap();
        let b = restored
            .forward(&img, ForwardOpts::inference(&cfg.model.toggles))
            .unwrap();
        assert_eq!(a.cx.tape.data(a.pred.boxes), b.cx.tape.data(b.pred.boxes));
    }
}
