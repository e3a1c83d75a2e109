//! All learned tensors of the reconstruction model, their initialization, and
//! the checkpoint container.
//!
//! Checkpoints are a small self-describing binary format: a magic tag, a JSON
//! header listing every tensor's name and shape (plus training counters and a
//! config echo), then the raw row-major f64 values in header order. Loading
//! validates every shape, and the f64 bytes round-trip exactly, so a saved
//! and reloaded model produces bit-identical forward passes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::{uniform_mat, LayerParams};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::Rng;
use crate::vocab::Modality;

/// Number of context tokens ahead of the visits:
/// [age, gender, primary anchor, secondary anchor, day type, modality].
pub const CONTEXT_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocEncoderKind {
    /// Multi-scale sinusoidal features of the projected coordinates, mapped
    /// to width d by a learned projection.
    Space2Vec,
    /// Plain learned per-place embedding table.
    Table,
}

/// Shape metadata; everything needed to rebuild the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub n_places: usize,
    pub modality: Modality,
    pub n_age_buckets: usize,
    pub loc_encoder: LocEncoderKind,
    /// Feature width of the geographic encoding (4 * scales); 0 in table mode.
    pub loc_feat_dim: usize,
    pub space2vec_scales: usize,
    pub lambda_min_m: f64,
    pub lambda_max_m: f64,
    pub max_seq_len: usize,
}

impl ModelMeta {
    pub fn from_config(cfg: &RunConfig, n_places: usize, modality: Modality) -> Self {
        let e = &cfg.embedding;
        let loc_encoder = if e.learned_location_table {
            LocEncoderKind::Table
        } else {
            LocEncoderKind::Space2Vec
        };
        ModelMeta {
            dim: e.dim,
            heads: cfg.encoder.heads,
            layers: cfg.encoder.layers,
            ff_dim: cfg.encoder.ff_dim_for(e.dim),
            dropout: cfg.encoder.dropout,
            n_places,
            modality,
            n_age_buckets: e.age_buckets.len(),
            loc_encoder,
            loc_feat_dim: if e.learned_location_table { 0 } else { 4 * e.space2vec_scales },
            space2vec_scales: e.space2vec_scales,
            lambda_min_m: e.lambda_min_m,
            lambda_max_m: e.lambda_max_m,
            max_seq_len: cfg.data.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub meta: ModelMeta,
    /// Location embedding: projection (feat_dim x d) or table (n_places x d).
    pub loc: Mat,
    /// GPS time encoding: learned map from the (sin, cos) pair to d. Present
    /// but unused for slot-encoded runs, so layouts match across modalities.
    pub time_proj: Mat,
    pub age_table: Mat,
    pub gender_table: Mat,
    pub day_type_table: Mat,
    pub modality_table: Mat,
    /// Learned role offsets added to the primary/secondary anchor embeddings.
    pub anchor_role: Mat,
    pub mask_emb: Mat,
    /// Replacement vector for ablated context features.
    pub null_emb: Mat,
    pub layers: Vec<LayerParams>,
    /// Prediction head over place tokens: logits = head_w . h + head_b.
    pub head_w: Mat,
    pub head_b: Mat,
}

impl ModelParams {
    pub fn init(meta: ModelMeta, seed: u64) -> Self {
        let d = meta.dim;
        let mut rng = Rng::seeded(seed);
        let table_bound = 1.0 / (d as f64).sqrt();
        let loc = match meta.loc_encoder {
            LocEncoderKind::Space2Vec => {
                let bound = 1.0 / (meta.loc_feat_dim as f64).sqrt();
                uniform_mat(meta.loc_feat_dim, d, bound, &mut rng)
            }
            LocEncoderKind::Table => uniform_mat(meta.n_places, d, table_bound, &mut rng),
        };
        let layers = (0..meta.layers)
            .map(|_| LayerParams::init(d, meta.ff_dim, &mut rng))
            .collect();
        ModelParams {
            loc,
            time_proj: uniform_mat(2, d, 1.0 / 2f64.sqrt(), &mut rng),
            age_table: uniform_mat(meta.n_age_buckets, d, table_bound, &mut rng),
            gender_table: uniform_mat(3, d, table_bound, &mut rng),
            day_type_table: uniform_mat(3, d, table_bound, &mut rng),
            modality_table: uniform_mat(2, d, table_bound, &mut rng),
            anchor_role: uniform_mat(2, d, table_bound, &mut rng),
            mask_emb: uniform_mat(1, d, table_bound, &mut rng),
            null_emb: uniform_mat(1, d, table_bound, &mut rng),
            head_w: uniform_mat(meta.n_places, d, table_bound, &mut rng),
            head_b: Mat::zeros(1, meta.n_places),
            layers,
            meta,
        }
    }

    /// Same shapes, all zeros; the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let meta = self.meta.clone();
        ModelParams {
            loc: Mat::zeros(self.loc.rows(), self.loc.cols()),
            time_proj: Mat::zeros(2, meta.dim),
            age_table: Mat::zeros(meta.n_age_buckets, meta.dim),
            gender_table: Mat::zeros(3, meta.dim),
            day_type_table: Mat::zeros(3, meta.dim),
            modality_table: Mat::zeros(2, meta.dim),
            anchor_role: Mat::zeros(2, meta.dim),
            mask_emb: Mat::zeros(1, meta.dim),
            null_emb: Mat::zeros(1, meta.dim),
            layers: (0..meta.layers).map(|_| LayerParams::zeros(meta.dim, meta.ff_dim)).collect(),
            head_w: Mat::zeros(meta.n_places, meta.dim),
            head_b: Mat::zeros(1, meta.n_places),
            meta,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("loc".into(), &self.loc),
            ("time_proj".into(), &self.time_proj),
            ("age_table".into(), &self.age_table),
            ("gender_table".into(), &self.gender_table),
            ("day_type_table".into(), &self.day_type_table),
            ("modality_table".into(), &self.modality_table),
            ("anchor_role".into(), &self.anchor_role),
            ("mask_emb".into(), &self.mask_emb),
            ("null_emb".into(), &self.null_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("loc".into(), &mut self.loc),
            ("time_proj".into(), &mut self.time_proj),
            ("age_table".into(), &mut self.age_table),
            ("gender_table".into(), &mut self.gender_table),
            ("day_type_table".into(), &mut self.day_type_table),
            ("modality_table".into(), &mut self.modality_table),
            ("anchor_role".into(), &mut self.anchor_role),
            ("mask_emb".into(), &mut self.mask_emb),
            ("null_emb".into(), &mut self.null_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.tensors_mut() {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        let theirs = other.tensors();
        for ((_, mine), (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt()
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"TRAJFIL1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CkptHeader {
    meta: ModelMeta,
    tensors: Vec<TensorInfo>,
    has_optimizer: bool,
    epoch: usize,
    step: u64,
    config_echo: String,
}

/// Adam moment buffers plus the step counter; saved with the checkpoint so
/// training can resume exactly.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    pub config_echo: String,
}

fn write_tensors(buf: &mut Vec<u8>, tensors: &[(String, &Mat)]) {
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_tensors(
    data: &[u8],
    offset: &mut usize,
    infos: &[TensorInfo],
    into: &mut ModelParams,
) -> Result<()> {
    let mut tensors = into.tensors_mut();
    if tensors.len() != infos.len() {
        return Err(Error::data(format!(
            "checkpoint lists {} tensors, model expects {}",
            infos.len(),
            tensors.len()
        )));
    }
    for (info, (name, t)) in infos.iter().zip(tensors.iter_mut()) {
        if info.name != *name || info.rows != t.rows() || info.cols != t.cols() {
            return Err(Error::data(format!(
                "checkpoint tensor `{}` ({}x{}) does not match expected `{}` ({}x{})",
                info.name,
                info.rows,
                info.cols,
                name,
                t.rows(),
                t.cols()
            )));
        }
        for v in t.data_mut() {
            let end = *offset + 8;
            if end > data.len() {
                return Err(Error::data("checkpoint truncated"));
            }
            *v = f64::from_le_bytes(data[*offset..end].try_into().unwrap());
            *offset = end;
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let params = &ckpt.params;
    let header = CkptHeader {
        meta: params.meta.clone(),
        tensors: params
            .tensors()
            .iter()
            .map(|(name, t)| TensorInfo { name: name.clone(), rows: t.rows(), cols: t.cols() })
            .collect(),
        has_optimizer: ckpt.optimizer.is_some(),
        epoch: ckpt.epoch,
        step: ckpt.optimizer.as_ref().map(|o| o.step).unwrap_or(0),
        config_echo: ckpt.config_echo.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    write_tensors(&mut buf, &params.tensors());
    if let Some(opt) = &ckpt.optimizer {
        write_tensors(&mut buf, &opt.m.tensors());
        write_tensors(&mut buf, &opt.v.tensors());
    }
    let mut file = fs::File::create(path)
        .map_err(|e| Error::data(format!("cannot write `{}`: {e}", path.display())))?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open `{}`: {e}", path.display())))?
        .read_to_end(&mut data)?;
    if data.len() < 16 || &data[..8] != CKPT_MAGIC {
        return Err(Error::data(format!("`{}` is not a checkpoint", path.display())));
    }
    let header_len = u64::from_le_bytes(data[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if data.len() < header_end {
        return Err(Error::data("checkpoint header truncated"));
    }
    let header: CkptHeader = serde_json::from_slice(&data[16..header_end])
        .map_err(|e| Error::data(format!("bad checkpoint header: {e}")))?;

    // Rebuild zero tensors of the declared layout, then fill them in order.
    let mut params = ModelParams::init(header.meta.clone(), 0).zeros_like();
    let mut offset = header_end;
    read_tensors(&data, &mut offset, &header.tensors, &mut params)?;
    let optimizer = if header.has_optimizer {
        let mut m = params.zeros_like();
        let mut v = params.zeros_like();
        read_tensors(&data, &mut offset, &header.tensors, &mut m)?;
        read_tensors(&data, &mut offset, &header.tensors, &mut v)?;
        Some(OptimizerState { m, v, step: header.step })
    } else {
        None
    };
    if offset != data.len() {
        return Err(Error::data("checkpoint has trailing bytes"));
    }
    Ok(Checkpoint { params, optimizer, epoch: header.epoch, config_echo: header.config_echo })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_meta() -> ModelMeta {
        ModelMeta {
            dim: 8,
            heads: 2,
            layers: 1,
            ff_dim: 16,
            dropout: 0.0,
            n_places: 5,
            modality: Modality::Cdr,
            n_age_buckets: 5,
            loc_encoder: LocEncoderKind::Table,
            loc_feat_dim: 0,
            space2vec_scales: 16,
            lambda_min_m: 100.0,
            lambda_max_m: 50_000.0,
            max_seq_len: 16,
        }
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = ModelParams::init(tiny_meta(), 9);
        let b = ModelParams::init(tiny_meta(), 9);
        assert_eq!(a, b);
        for (_, t) in a.tensors() {
            assert!(t.is_finite());
        }
        assert_ne!(a, ModelParams::init(tiny_meta(), 10));
    }

    #[test]
    fn tensor_listing_is_stable_and_complete() {
        let p = ModelParams::init(tiny_meta(), 1);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"layer0.w_q".to_string()));
        assert!(names.contains(&"head_w".to_string()));
        assert_eq!(names.len(), 9 + 12 + 2);
        // n_params covers every tensor exactly once.
        let total: usize = p.tensors().iter().map(|(_, t)| t.data().len()).sum();
        assert_eq!(p.n_params(), total);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let params = ModelParams::init(tiny_meta(), 33);
        let mut opt = OptimizerState::new(&params);
        opt.step = 17;
        opt.m.head_b.set(0, 2, 0.125);
        let ckpt = Checkpoint {
            params: params.clone(),
            optimizer: Some(opt),
            epoch: 3,
            config_echo: "demo = true".into(),
        };
        let dir = std::env::temp_dir().join("trajfill_ckpt_rt");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.epoch, 3);
        let opt = back.optimizer.unwrap();
        assert_eq!(opt.step, 17);
        assert_eq!(opt.m.head_b.at(0, 2), 0.125);
        assert_eq!(back.config_echo, "demo = true");
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let params = ModelParams::init(tiny_meta(), 33);
        let ckpt = Checkpoint {
            params,
            optimizer: None,
            epoch: 0,
            config_echo: String::new(),
        };
        let dir = std::env::temp_dir().join("trajfill_ckpt_bad");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Corrupt the declared head_w shape inside the JSON header.
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let pos = text.find("head_w").unwrap();
        // rows field follows the name; flip one digit of "5".
        let rows_pos = text[pos..].find("\"rows\":5").unwrap() + pos + 7;
        bytes[rows_pos] = b'7';
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
