//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MHCSSMCK"
//! version      u32      currently 1
//! config       u64 byte length, then UTF-8 "key=value\n" lines
//! params       u32 count, then per tensor:
//!                u32 name length, name bytes, u8 dtype (1 = f32, 2 = f64),
//!                u32 ndim, ndim × u64 dims, raw element bytes
//! optimizer    u8 present flag; if 1:
//!                u64 step, f64 loss scale, u64 growth interval,
//!                u64 clean steps, u64 skipped steps,
//!                first moments then second moments, one raw element block
//!                per parameter in parameter order (shapes as above)
//! rng          u8 present flag; if 1: 32-byte seed, u64 stream, u128 word position
//! progress     u64 step, u64 epoch, u64 batch index within epoch, f64 elapsed seconds
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::{DType, Float};
use crate::model::ModelConfig;
use crate::tensor::Tensor;
use crate::trainer::{LossScaler, OptimizerState, TrainConfig};

const MAGIC: &[u8; 8] = b"MHCSSMCK";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the training loop.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub elapsed_s: f64,
}

/// Exact ChaCha stream position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
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

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    /// `section.key = value` pairs (sections `model` and `train`).
    pub config: Vec<(String, String)>,
    pub params: Vec<(String, Tensor<F>)>,
    pub optimizer: Option<OptimizerState<F>>,
    pub rng: Option<RngState>,
    pub progress: Progress,
}

pub(crate) fn prefixed(section: &str, pairs: Vec<(&'static str, String)>) -> Vec<(String, String)> {
    pairs
        .into_iter()
        .map(|(k, v)| (format!("{section}.{k}"), v))
        .collect()
}

impl<F: Float> Checkpoint<F> {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (k, v) in &self.config {
            if let Some(key) = k.strip_prefix("model.") {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in &self.config {
            if let Some(key) = k.strip_prefix("train.") {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let text: String = self
            .config
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());

        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t);
        }

        match &self.optimizer {
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                out.extend_from_slice(&opt.scaler.scale.to_le_bytes());
                out.extend_from_slice(&opt.scaler.growth_interval.to_le_bytes());
                out.extend_from_slice(&opt.scaler.clean_steps.to_le_bytes());
                out.extend_from_slice(&opt.scaler.skipped_steps.to_le_bytes());
                for t in opt.m.iter().chain(&opt.v) {
                    for &x in t.data() {
                        x.write_le(&mut out);
                    }
                }
            }
            None => out.push(0),
        }
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        let p = &self.progress;
        for v in [p.step, p.epoch, p.batch_in_epoch] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.elapsed_s.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let text_len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::format(path, "config section is not UTF-8"))?;
        let mut config = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("bad config line {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
        }

        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
                .to_string();
            let t = read_tensor::<F>(&mut r)?;
            params.push((name, t));
        }

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let scaler = LossScaler {
                    scale: r.f64()?,
                    growth_interval: r.u64()?,
                    clean_steps: r.u64()?,
                    skipped_steps: r.u64()?,
                };
                let mut moments = Vec::with_capacity(2 * params.len());
                for k in 0..2 * params.len() {
                    let shape = params[k % params.len()].1.shape().to_vec();
                    moments.push(read_data::<F>(&mut r, &shape)?);
                }
                let v = moments.split_off(params.len());
                Some(OptimizerState {
                    step,
                    m: moments,
                    v,
                    scaler,
                })
            }
            f => return Err(Error::format(path, format!("bad optimizer flag {f}"))),
        };
        let rng = match r.u8()? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(RngState {
                    seed,
                    stream,
                    word_pos,
                })
            }
            f => return Err(Error::format(path, format!("bad rng flag {f}"))),
        };
        let progress = Progress {
            step: r.u64()?,
            epoch: r.u64()?,
            batch_in_epoch: r.u64()?,
            elapsed_s: r.f64()?,
        };
        if r.pos != bytes.len() {
            return Err(Error::format(
                path,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            rng,
            progress,
        })
    }

    /// Write atomically: a sibling temporary file renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_tensor<F: Float>(out: &mut Vec<u8>, t: &Tensor<F>) {
    out.push(F::DTYPE.code());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

fn read_tensor<F: Float>(r: &mut Reader<'_>) -> Result<Tensor<F>> {
    let code = r.u8()?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::format(r.path, format!("unknown dtype code {code}")))?;
    if dtype != F::DTYPE {
        return Err(Error::format(
            r.path,
            format!(
                "tensor stored as {}, expected {}",
                dtype.name(),
                F::DTYPE.name()
            ),
        ));
    }
    let ndim = r.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    read_data(r, &shape)
}

fn read_data<F: Float>(r: &mut Reader<'_>, shape: &[usize]) -> Result<Tensor<F>> {
    let numel: usize = shape.iter().product();
    let size = F::DTYPE.size();
    let raw = r.take(numel * size)?;
    let data = raw.chunks_exact(size).map(F::read_le).collect();
    Tensor::new(shape, data)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
