use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::trainer::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"TMOE";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENT_M: &str = "opt.m.";
const MOMENT_V: &str = "opt.v.";

/// JSON document stored after the header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub step: u64,
    #[serde(default)]
    pub optimizer_step: Option<u64>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

fn write_tensor(w: &mut impl Write, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model<f32>,
    step: u64,
    optimizer: Option<&OptimizerState<f32>>,
    train: Option<&TrainConfig>,
) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        model: model.config().clone(),
        step,
        optimizer_step: optimizer.map(|o| o.step),
        train: train.cloned(),
    };
    let doc = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(doc.len() as u64).to_le_bytes())?;
        w.write_all(&doc)?;
        let params = model.params();
        for (name, t) in params.iter() {
            write_tensor(&mut w, name, t.shape(), t.data())?;
        }
        if let Some(o) = optimizer {
            for id in params.ids() {
                let shape = params.get(id).shape();
                write_tensor(&mut w, &format!("{MOMENT_M}{}", params.name(id)), shape, &o.m[id.index()])?;
                write_tensor(&mut w, &format!("{MOMENT_V}{}", params.name(id)), shape, &o.v[id.index()])?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'p, R> {
    inner: R,
    path: &'p Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => Error::format(self.path, format!("truncated while reading {what}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    /// `None` at a clean end of file.
    fn tensor(&mut self) -> Result<Option<(String, Tensor<f32>)>> {
        let mut first = [0u8; 4];
        match self.inner.read(&mut first[..1])? {
            0 => return Ok(None),
            _ => self.inner.read_exact(&mut first[1..]).map_err(|_| Error::format(self.path, "truncated record"))?,
        }
        let name_len = u32::from_le_bytes(first) as usize;
        if name_len > 1 << 16 {
            return Err(Error::format(self.path, format!("implausible name length {name_len}")));
        }
        let name = String::from_utf8(self.bytes(name_len, "tensor name")?)
            .map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))?;
        let rank = self.u32(&name)? as usize;
        if rank > 8 {
            return Err(Error::format(self.path, format!("{name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64(&name)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n < 1 << 34)
            .ok_or_else(|| Error::format(self.path, format!("{name}: bad shape {shape:?}")))?;
        let raw = self.bytes(n * 4, &name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(data, &shape).map_err(|e| Error::format(self.path, format!("{name}: {e}")))?;
        Ok(Some((name, t)))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        path,
    };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let doc_len = r.u64("header length")? as usize;
    if doc_len > 1 << 24 {
        return Err(Error::format(path, "header too large"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&r.bytes(doc_len, "header")?)
        .map_err(|e| Error::format(path, format!("header: {e}")))?;
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    while let Some((name, t)) = r.tensor()? {
        if let Some(rest) = name.strip_prefix(MOMENT_M) {
            m.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix(MOMENT_V) {
            v.push((rest.to_string(), t));
        } else {
            params.push((name, t));
        }
    }
    let mut model = Model::<f32>::new(header.model.clone(), 0)?;
    model.load_named(params)?;
    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => {
            let p = model.params();
            let mut state = OptimizerState::new(p);
            state.step = step;
            for (list, dst) in [(m, &mut state.m), (v, &mut state.v)] {
                if list.len() != p.len() {
                    return Err(Error::Compatibility(format!(
                        "optimizer state holds {} moments for {} parameters",
                        list.len(),
                        p.len()
                    )));
                }
                for (name, t) in list {
                    let id = p
                        .find(&name)
                        .ok_or_else(|| Error::Compatibility(format!("optimizer moment for unknown parameter {name}")))?;
                    if t.shape() != p.get(id).shape() {
                        return Err(Error::Compatibility(format!("optimizer moment shape mismatch for {name}")));
                    }
                    dst[id.index()] = t.into_data();
                }
            }
            Some(state)
        }
    };
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}
