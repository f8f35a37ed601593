//! Binary checkpoints: magic `FSCK`, format version, model config hash,
//! step, stage tag, named little-endian `f32` tensors, optimizer state and
//! RNG state.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numeric::{AdamState, Namespace, Optimizer, OptimizerSpec, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"FSCK";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub stage: String,
    pub params: ParamStore<f32>,
    pub optimizer: Option<(OptimizerSpec, AdamState<f32>)>,
    pub rng: Option<RngState>,
    /// Free-form scalars such as the validation metric at save time.
    pub metrics: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams<f32>, step: u64, stage: &str) -> Self {
        Self {
            config: params.config.clone(),
            step,
            stage: stage.to_string(),
            params: params.store.clone(),
            optimizer: None,
            rng: None,
            metrics: BTreeMap::new(),
        }
    }

    pub fn with_optimizer(mut self, opt: &Optimizer<f32>) -> Self {
        self.optimizer = Some((opt.spec, opt.adam.clone()));
        self
    }

    pub fn with_rng(mut self, rng: &ChaCha8Rng) -> Self {
        self.rng = Some(RngState::capture(rng));
        self
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn model_params(&self) -> ModelParams<f32> {
        ModelParams {
            config: self.config.clone(),
            store: self.params.clone(),
            version: crate::model::MODEL_VERSION,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.config_hash());
        w.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.u64(self.step);
        w.str(&self.stage);
        w.u32(self.params.len() as u32);
        for p in self.params.iter() {
            w.str(&p.name);
            w.tensor(&p.value);
        }
        match &self.optimizer {
            None => w.u8(0),
            Some((spec, st)) => {
                w.u8(1);
                w.str(&serde_json::to_string(spec).expect("optimizer spec serializes"));
                w.u64(st.step);
                w.u32(st.m.len() as u32);
                for (name, m) in &st.m {
                    w.str(name);
                    w.tensor(m);
                    w.tensor(st.v.get(name).expect("moments share keys"));
                }
            }
        }
        match &self.rng {
            None => w.u8(0),
            Some(r) => {
                w.u8(1);
                w.buf.extend_from_slice(&r.seed);
                w.u64(r.stream);
                w.buf.extend_from_slice(&r.word_pos.to_le_bytes());
            }
        }
        w.str(&serde_json::to_string(&self.metrics).expect("metrics serialize"));
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format version {version} (expected {FORMAT_VERSION})",
                path.display()
            )));
        }
        let hash = r.str()?;
        let config: ModelConfig =
            serde_json::from_str(&r.str()?).map_err(|e| r.fail(format!("config: {e}")))?;
        if config.hash() != hash {
            return Err(Error::Checkpoint(format!(
                "{}: config hash mismatch",
                path.display()
            )));
        }
        let step = r.u64()?;
        let stage = r.str()?;
        let n = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            let t = r.tensor()?;
            params.insert(name, t)?;
        }
        let optimizer = match r.u8()? {
            0 => None,
            _ => {
                let spec: OptimizerSpec =
                    serde_json::from_str(&r.str()?).map_err(|e| r.fail(format!("optimizer: {e}")))?;
                let mut st = AdamState {
                    step: r.u64()?,
                    ..AdamState::default()
                };
                for _ in 0..r.u32()? {
                    let name = r.str()?;
                    st.m.insert(name.clone(), r.tensor()?);
                    st.v.insert(name, r.tensor()?);
                }
                Some((spec, st))
            }
        };
        let rng = match r.u8()? {
            0 => None,
            _ => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(RngState {
                    seed,
                    stream,
                    word_pos,
                })
            }
        };
        let metrics =
            serde_json::from_str(&r.str()?).map_err(|e| r.fail(format!("metrics: {e}")))?;
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes".into()));
        }
        Ok(Self {
            config,
            step,
            stage,
            params,
            optimizer,
            rng,
            metrics,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("fsck.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

/// Copies the tensors of `filter` namespaces from a checkpoint into
/// `params`; every other tensor is left untouched. Shapes of the copied
/// namespaces must agree with `params`, otherwise nothing is copied and the
/// error lists every differing tensor.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    params: &mut ModelParams<f32>,
    filter: &[Namespace],
) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path.as_ref())?;
    apply_checkpoint(&ckpt, params, filter)?;
    Ok(ckpt)
}

pub fn apply_checkpoint(ckpt: &Checkpoint, params: &mut ModelParams<f32>, filter: &[Namespace]) -> Result<()> {
    let mut diffs = Vec::new();
    for p in params.store.iter() {
        let Some(ns) = Namespace::of(&p.name) else { continue };
        if !filter.contains(&ns) {
            continue;
        }
        match ckpt.params.get(&p.name) {
            None => diffs.push(format!("{}: missing in checkpoint (expected {:?})", p.name, p.value.shape())),
            Some(q) if q.value.shape() != p.value.shape() => diffs.push(format!(
                "{}: checkpoint {:?} vs model {:?}",
                p.name,
                q.value.shape(),
                p.value.shape()
            )),
            _ => {}
        }
    }
    for q in ckpt.params.iter() {
        let in_filter = Namespace::of(&q.name).is_some_and(|ns| filter.contains(&ns));
        if in_filter && !params.store.contains(&q.name) {
            diffs.push(format!("{}: not in model (checkpoint {:?})", q.name, q.value.shape()));
        }
    }
    if !diffs.is_empty() {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch:\n  {}",
            diffs.join("\n  ")
        )));
    }
    for &ns in filter {
        params.store.copy_namespace_from(&ckpt.params, ns)?;
    }
    Ok(())
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: String) -> Error {
        Error::Format {
            path: PathBuf::from(self.path),
            offset: self.pos as u64,
            reason,
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            path: PathBuf::from(self.path),
            offset: at as u64,
            reason: "invalid utf-8".into(),
        })
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let nd = self.u32()? as usize;
        if nd > 8 {
            return Err(self.fail(format!("implausible tensor rank {nd}")));
        }
        let shape: Vec<usize> = (0..nd).map(|_| self.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| self.fail(format!("tensor shape {shape:?} exceeds file")))?;
        let data = self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;
    use rand::Rng;

    fn params(seed: u64) -> ModelParams<f32> {
        ModelParams::init(tiny_config(), seed).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fsck");
        let p = params(1);
        let mut opt = Optimizer::<f32>::new(OptimizerSpec::default());
        let mut q = p.clone();
        for g in q.store.iter_mut() {
            g.grad.fill(0.01);
        }
        opt.step(&mut q.store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let mut ck = Checkpoint::new(&q, 17, "pretrain-flow").with_optimizer(&opt).with_rng(&rng);
        ck.metrics.insert("val_loss".into(), 0.25);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let bits = |s: &ParamStore<f32>| -> Vec<u32> { s.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&back.params), bits(&q.store));
        let mut r2 = back.rng.unwrap().restore();
        assert_eq!(r2.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn backbone_filter_leaves_heads_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.fsck");
        let src = params(1);
        Checkpoint::new(&src, 0, "x").save(&path).unwrap();
        let mut dst = params(2);
        let before = dst.clone();
        load_checkpoint(&path, &mut dst, &[Namespace::Backbone]).unwrap();
        assert_eq!(dst.namespace_hash(Namespace::Backbone), src.namespace_hash(Namespace::Backbone));
        assert_eq!(dst.namespace_hash(Namespace::Flow), before.namespace_hash(Namespace::Flow));
        assert_eq!(dst.namespace_hash(Namespace::Detect), before.namespace_hash(Namespace::Detect));
        assert_ne!(dst.namespace_hash(Namespace::Backbone), before.namespace_hash(Namespace::Backbone));
    }

    #[test]
    fn corrupted_magic_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.fsck");
        let mut bytes = Checkpoint::new(&params(1), 0, "x").to_bytes();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn unknown_version_refused() {
        let mut bytes = Checkpoint::new(&params(1), 0, "x").to_bytes();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes, Path::new("v.fsck")).unwrap_err();
        assert!(err.to_string().contains("version 99"));
    }

    #[test]
    fn truncation_detected() {
        let bytes = Checkpoint::new(&params(1), 0, "x").to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("t.fsck")).is_err());
    }

    #[test]
    fn shape_mismatch_lists_diff_unless_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.fsck");
        Checkpoint::new(&params(1), 0, "x").save(&path).unwrap();
        let mut cfg = tiny_config();
        cfg.detect.conv_channels = 6;
        let mut other = ModelParams::<f32>::init(cfg, 1).unwrap();
        let err = load_checkpoint(&path, &mut other, &[Namespace::Backbone, Namespace::Detect]).unwrap_err();
        assert!(err.to_string().contains("h.conv1"), "{err}");
        load_checkpoint(&path, &mut other, &[Namespace::Backbone]).unwrap();
    }
}
