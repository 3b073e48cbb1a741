//! Binary training checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SNKF" | u32 version | u64 len, config TOML
//! u64 sections, each: u64 len, name, u64 offset, u64 len
//! u64 n, n x f64 params | u64 n, n x f64 adam m | u64 n, n x f64 adam v
//! u64 adam t | u64 epoch | u64 step
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! u64 epochs, each 5 x f64 (l_o, l_r, l_m, l_s, total)
//! u64 FNV-1a hash of everything before it
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::field_model::{FieldModel, ModelConfig};
use crate::losses::LossReport;
use crate::nn::Section;
use crate::trainer::{AdamState, TrainState};

use super::{write_atomic, Config};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SNKF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub sections: Vec<Section>,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<LossReport>,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn from_state(config: &Config, state: &TrainState) -> Self {
        Self {
            config: config.clone(),
            sections: state.model.layout().sections().to_vec(),
            params: state.model.params().to_vec(),
            adam: state.adam.clone(),
            epoch: state.epoch,
            step: state.step,
            history: state.history.clone(),
            rng: state.rng.clone(),
        }
    }

    pub fn model(&self) -> Result<FieldModel> {
        let model = FieldModel::with_params(self.config.model.clone(), self.params.clone())?;
        if model.layout().sections() != self.sections.as_slice() {
            return Err(Error::Checkpoint {
                path: Default::default(),
                reason: "parameter sections do not match the stored model config".into(),
            });
        }
        Ok(model)
    }

    pub fn into_state(self) -> Result<TrainState> {
        let model = self.model()?;
        if self.adam.m.len() != model.num_params() || self.adam.v.len() != model.num_params() {
            return Err(Error::LengthMismatch {
                what: "optimizer moments vs parameters",
                left: self.adam.m.len(),
                right: model.num_params(),
            });
        }
        Ok(TrainState {
            model,
            adam: self.adam,
            epoch: self.epoch,
            step: self.step,
            history: self.history,
            rng: self.rng,
        })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&CHECKPOINT_MAGIC);
    w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    w.bytes(ck.config.to_toml_string().as_bytes());
    w.u64(ck.sections.len() as u64);
    for s in &ck.sections {
        w.bytes(s.name.as_bytes());
        w.u64(s.offset as u64);
        w.u64(s.len as u64);
    }
    w.f64s(&ck.params);
    w.f64s(&ck.adam.m);
    w.f64s(&ck.adam.v);
    w.u64(ck.adam.t);
    w.u64(ck.epoch as u64);
    w.u64(ck.step);
    w.0.extend_from_slice(&ck.rng.get_seed());
    w.u64(ck.rng.get_stream());
    w.0.extend_from_slice(&ck.rng.get_word_pos().to_le_bytes());
    w.u64(ck.history.len() as u64);
    for r in &ck.history {
        for v in [r.l_o, r.l_r, r.l_m, r.l_s, r.total] {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    let h = fnv1a(&w.0);
    w.u64(h);
    w.0
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len()).ok_or("truncated")?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.b.len()).ok_or_else(|| "corrupt length".to_string())
    }
    fn f64s(&mut self) -> std::result::Result<Vec<f64>, String> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or("corrupt length")?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported format version {version} (expected {CHECKPOINT_VERSION})"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err("checksum mismatch: file is truncated or corrupt".into());
    }
    let mut r = Reader { b: body, at: 8 };
    let n = r.len()?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| "config text is not UTF-8")?;
    let config = Config::from_toml_str(text).map_err(|e| format!("stored config: {e}"))?;
    let n_sections = r.len()?;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let n = r.len()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| "section name is not UTF-8")?;
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        sections.push(Section { name, offset, len });
    }
    let params = r.f64s()?;
    let m = r.f64s()?;
    let v = r.f64s()?;
    let t = r.u64()?;
    let epoch = r.u64()? as usize;
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let n_hist = r.len()?;
    let mut history = Vec::with_capacity(n_hist);
    for _ in 0..n_hist {
        let raw = r.take(40)?;
        let f = |i: usize| f64::from_le_bytes(raw[8 * i..8 * i + 8].try_into().unwrap());
        history.push(LossReport {
            l_o: f(0),
            l_r: f(1),
            l_m: f(2),
            l_s: f(3),
            total: f(4),
        });
    }
    if r.at != body.len() {
        return Err("trailing bytes after checkpoint body".into());
    }
    Ok(Checkpoint {
        config,
        sections,
        params,
        adam: AdamState { m, v, t },
        epoch,
        step,
        history,
        rng,
    })
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode_checkpoint(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })?;
    ck.model().map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(ck)
}

/// Loads a checkpoint and rejects it unless it was trained with `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let path = path.as_ref();
    let ck = load_checkpoint(path)?;
    if &ck.config.model != expected {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!(
                "model config mismatch (checkpoint volume {:?}, expected {:?})",
                ck.config.model.volume_resolution, expected.volume_resolution
            ),
        });
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::preset;
    use rand::Rng;

    fn sample() -> (Config, TrainState) {
        let cfg = preset("lite-smoke").unwrap();
        let mut state = TrainState::new(cfg.model.clone(), &cfg.train).unwrap();
        let n = state.model.num_params();
        for i in 0..n {
            state.adam.m[i] = (i as f64).sin();
            state.adam.v[i] = (i as f64).cos().abs() * 1e-9;
        }
        state.adam.t = 17;
        state.epoch = 3;
        state.step = 99;
        state.history = vec![LossReport {
            l_o: 0.1,
            l_r: 0.2,
            l_m: 1.0 / 3.0,
            l_s: 0.4,
            total: f64::MIN_POSITIVE,
        }];
        let _: u64 = state.rng.random();
        (cfg, state)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let (cfg, state) = sample();
        let ck = Checkpoint::from_state(&cfg, &state);
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let mut restored = back.into_state().unwrap();
        let mut original = state.clone();
        assert_eq!(restored, original);
        assert_eq!(restored.rng.random::<u64>(), original.rng.random::<u64>());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let (cfg, state) = sample();
        let bytes = encode_checkpoint(&Checkpoint::from_state(&cfg, &state));
        for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let (cfg, state) = sample();
        let mut bytes = encode_checkpoint(&Checkpoint::from_state(&cfg, &state));
        bytes[4] = 2;
        assert!(decode_checkpoint(&bytes).unwrap_err().contains("version"));
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).unwrap_err().contains("magic"));
    }

    #[test]
    fn cross_config_load_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let (cfg, state) = sample();
        save_checkpoint(&path, &Checkpoint::from_state(&cfg, &state)).unwrap();
        let mut other = cfg.model.clone();
        other.volume_resolution = [4, 4, 4];
        assert!(load_checkpoint_for(&path, &other).is_err());
        assert!(load_checkpoint_for(&path, &cfg.model).is_ok());
    }
}
