//! Binary checkpoint format.
//!
//! ```text
//! magic "GBSRCKPT" | u32 version
//! u64 epoch | u64 adam_step | f64 best_metric (NaN if none) | u64 best_epoch
//! u32 array_count, then per array: u32 ndim, u64 dims.., f64 data..
//! u64 config_len, config as key=value lines
//! ```
//! All integers and floats are little-endian. Arrays are, in order, `E⁰`,
//! `W1`, `b1`, `W2`, `b2`, then the first and second Adam moments of each.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::adam::Moments;
use crate::backbone::EmbeddingTable;
use crate::data::Dataset;
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::objective::ModelParams;
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"GBSRCKPT";
pub const VERSION: u32 = 1;
const ARRAY_COUNT: u32 = 15;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn array(&mut self, dims: &[usize], data: &[f64]) {
        self.u32(dims.len() as u32);
        for &d in dims {
            self.u64(d as u64);
        }
        for &x in data {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn array(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let ndim = self.u32()? as usize;
        if ndim > 2 {
            return Err(corrupt(format!("array with {ndim} dimensions")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(usize::try_from(self.u64()?).map_err(|_| corrupt("dimension overflow"))?);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| corrupt("array larger than file"))?;
        let raw = self.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((dims, data))
    }
}

/// Serializes the state together with the config that produced it.
pub fn encode(state: &TrainState, config: &TrainConfig) -> Vec<u8> {
    let p = &state.params;
    let d = &p.denoiser;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(state.epoch);
    w.u64(state.adam_step);
    w.f64(state.best_metric.unwrap_or(f64::NAN));
    w.u64(state.best_epoch);
    w.u32(ARRAY_COUNT);
    let e = &p.table.embeddings;
    w.array(&[e.nrows(), e.ncols()], e.as_slice().expect("contiguous"));
    w.array(&[d.w1.nrows(), d.w1.ncols()], d.w1.as_slice().expect("contiguous"));
    w.array(&[d.b1.len()], d.b1.as_slice().expect("contiguous"));
    w.array(&[d.w2.len()], d.w2.as_slice().expect("contiguous"));
    w.array(&[1], &[d.b2]);
    for m in &state.moments {
        w.array(&[m.len()], &m.m);
        w.array(&[m.len()], &m.v);
    }
    let cfg = config.to_kv();
    w.u64(cfg.len() as u64);
    w.0.extend_from_slice(cfg.as_bytes());
    w.0
}

/// Inverse of [`encode`]. The user count is needed to split `E⁰` into users
/// and items.
pub fn decode(bytes: &[u8], user_count: usize) -> Result<(TrainState, TrainConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let epoch = r.u64()?;
    let adam_step = r.u64()?;
    let best = r.f64()?;
    let best_epoch = r.u64()?;
    let count = r.u32()?;
    if count != ARRAY_COUNT {
        return Err(corrupt(format!("expected {ARRAY_COUNT} arrays, found {count}")));
    }
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        arrays.push(r.array()?);
    }
    let cfg_len = usize::try_from(r.u64()?).map_err(|_| corrupt("config length overflow"))?;
    let cfg_bytes = r.take(cfg_len)?;
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let cfg_text = std::str::from_utf8(cfg_bytes).map_err(|_| corrupt("config is not UTF-8"))?;
    let config = TrainConfig::from_kv(cfg_text).map_err(|e| corrupt(format!("embedded config: {e}")))?;

    let matrix = |(dims, data): (Vec<usize>, Vec<f64>), name: &str| -> Result<Array2<f64>> {
        match dims[..] {
            [r, c] => Array2::from_shape_vec((r, c), data).map_err(|e| corrupt(format!("{name}: {e}"))),
            _ => Err(corrupt(format!("{name} should be a matrix"))),
        }
    };
    let vector = |(dims, data): (Vec<usize>, Vec<f64>), name: &str| -> Result<Vec<f64>> {
        if dims.len() != 1 {
            return Err(corrupt(format!("{name} should be a vector")));
        }
        Ok(data)
    };
    let mut it = arrays.into_iter();
    let mut next = || it.next().expect("count checked");
    let embeddings = matrix(next(), "embeddings")?;
    let w1 = matrix(next(), "w1")?;
    let b1 = vector(next(), "b1")?;
    let w2 = vector(next(), "w2")?;
    let b2 = vector(next(), "b2")?;
    let dim = embeddings.ncols();
    if dim != config.dim || w1.dim() != (dim, 3 * dim) || b1.len() != dim || w2.len() != dim || b2.len() != 1 {
        return Err(corrupt("parameter shapes disagree with the embedded config"));
    }
    if user_count >= embeddings.nrows() {
        return Err(corrupt(format!(
            "checkpoint has {} nodes, dataset has {user_count} users",
            embeddings.nrows()
        )));
    }
    let sizes = [embeddings.len(), w1.len(), dim, dim, 1];
    let mut moments: Vec<Moments> = Vec::with_capacity(5);
    for (k, &size) in sizes.iter().enumerate() {
        let m = vector(next(), "moment")?;
        let v = vector(next(), "moment")?;
        if m.len() != size || v.len() != size {
            return Err(corrupt(format!("moment block {k} has the wrong length")));
        }
        moments.push(Moments { m, v });
    }
    let table = EmbeddingTable::new(embeddings, user_count, config.layers)
        .map_err(|e| corrupt(format!("embeddings: {e}")))?;
    let denoiser = DenoiserParams {
        w1,
        b1: Array1::from(b1),
        w2: Array1::from(w2),
        b2: b2[0],
        temperature: config.temperature,
        observation_bias: config.epsilon,
    };
    let state = TrainState {
        params: ModelParams { table, denoiser },
        moments: moments.try_into().expect("five blocks"),
        adam_step,
        epoch,
        best_metric: (!best.is_nan()).then_some(best),
        best_epoch,
    };
    Ok((state, config))
}

pub fn save(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    atomic_write(path, &encode(state, config))
}

/// The config embedded in a checkpoint, e.g. to recover its data split.
pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes, 0)?.1)
}

/// Loads a checkpoint and checks it against the dataset it will be used with.
pub fn load(path: &Path, dataset: &Dataset) -> Result<(TrainState, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (state, config) = decode(&bytes, dataset.user_count())?;
    if state.params.table.embeddings.nrows() != dataset.node_count() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} nodes, dataset has {}",
            state.params.table.embeddings.nrows(),
            dataset.node_count()
        )));
    }
    Ok((state, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (TrainState, TrainConfig) {
        let ds = Dataset::new(3, 2, vec![(0, 0), (1, 1), (2, 0)], vec![], vec![(0, 2)]).unwrap();
        let cfg = TrainConfig { dim: 4, layers: 2, ..TrainConfig::default() };
        let mut st = crate::trainer::init(&cfg, &ds, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        st.adam_step = 17;
        st.epoch = 3;
        st.best_metric = Some(0.25);
        st.best_epoch = 2;
        st.moments[1].m[5] = 0.5;
        (st, cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (st, cfg) = sample();
        let bytes = encode(&st, &cfg);
        let (back, back_cfg) = decode(&bytes, 3).unwrap();
        assert_eq!(back, st);
        assert_eq!(back_cfg, cfg);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let (st, cfg) = sample();
        let bytes = encode(&st, &cfg);
        assert!(matches!(decode(&bytes[..bytes.len() - 1], 3), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra, 3), Err(Error::Checkpoint(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic, 3), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&[], 3), Err(Error::Checkpoint(_))));
    }
}
