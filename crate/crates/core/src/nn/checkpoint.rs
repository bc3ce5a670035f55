//! Binary checkpoint layout (little-endian):
//!
//! ```text
//! "USCK" | u32 version | u64 seed | u64 step | u32 epoch | f64 lr
//! u32 len + visual spec text | u32 len + audio spec text
//! per stream: per parameter (value, m, v) as f64, then per batchnorm (running mean, running var) as f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Network, NetworkSpec, Scalar, TwoStreamNet};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"USCK";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Optimiser steps taken.
    pub step: u64,
    /// Epochs completed.
    pub epoch: u32,
    pub lr: f64,
}

fn ck(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn put_f64s<W: Write, T: Scalar>(w: &mut W, xs: &[T]) -> Result<()> {
    for x in xs {
        w.write_all(&x.as_f64().to_le_bytes()).map_err(ck)?;
    }
    Ok(())
}

fn put_text<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes()).map_err(ck)?;
    w.write_all(s.as_bytes()).map_err(ck)
}

fn get<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn get_f64s<R: Read, T: Scalar>(r: &mut R, out: &mut [T]) -> Result<()> {
    for x in out {
        *x = T::from_f64_lossy(f64::from_le_bytes(get(r)?));
    }
    Ok(())
}

fn get_text<R: Read>(r: &mut R) -> Result<String> {
    let n = u32::from_le_bytes(get(r)?) as usize;
    if n > 1 << 20 {
        return Err(Error::Checkpoint("implausible network description length".into()));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(ck)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("network description is not UTF-8".into()))
}

fn write_stream<W: Write, T: Scalar>(w: &mut W, n: &Network<T>) -> Result<()> {
    for p in n.params() {
        put_f64s(w, &p.value)?;
        put_f64s(w, &p.m)?;
        put_f64s(w, &p.v)?;
    }
    for bn in n.batchnorms() {
        put_f64s(w, &bn.running_mean)?;
        put_f64s(w, &bn.running_var)?;
    }
    Ok(())
}

fn read_stream<R: Read, T: Scalar>(r: &mut R, n: &mut Network<T>) -> Result<()> {
    for p in n.params_mut() {
        get_f64s(r, &mut p.value)?;
        get_f64s(r, &mut p.m)?;
        get_f64s(r, &mut p.v)?;
    }
    for bn in n.batchnorms_mut() {
        get_f64s(r, &mut bn.running_mean)?;
        get_f64s(r, &mut bn.running_var)?;
        if bn.running_var.iter().any(|v| !(v.as_f64() >= 0.0)) {
            return Err(Error::Checkpoint("negative running variance".into()));
        }
    }
    Ok(())
}

pub fn write_checkpoint<W: Write, T: Scalar>(w: &mut W, net: &TwoStreamNet<T>, meta: &CheckpointMeta) -> Result<()> {
    w.write_all(MAGIC).map_err(ck)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(ck)?;
    w.write_all(&meta.seed.to_le_bytes()).map_err(ck)?;
    w.write_all(&meta.step.to_le_bytes()).map_err(ck)?;
    w.write_all(&meta.epoch.to_le_bytes()).map_err(ck)?;
    w.write_all(&meta.lr.to_le_bytes()).map_err(ck)?;
    put_text(w, &net.visual.spec().to_text())?;
    put_text(w, &net.audio.spec().to_text())?;
    write_stream(w, &net.visual)?;
    write_stream(w, &net.audio)
}

pub fn read_checkpoint<R: Read, T: Scalar>(r: &mut R) -> Result<(TwoStreamNet<T>, CheckpointMeta)> {
    if &get::<4, _>(r)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(get(r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta = CheckpointMeta {
        seed: u64::from_le_bytes(get(r)?),
        step: u64::from_le_bytes(get(r)?),
        epoch: u32::from_le_bytes(get(r)?),
        lr: f64::from_le_bytes(get(r)?),
    };
    let vs = NetworkSpec::parse(&get_text(r)?)?;
    let as_ = NetworkSpec::parse(&get_text(r)?)?;
    let mut net = TwoStreamNet::build(&vs, &as_, meta.seed)?;
    read_stream(r, &mut net.visual)?;
    read_stream(r, &mut net.audio)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(ck)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok((net, meta))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, net: &TwoStreamNet<T>, meta: &CheckpointMeta) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, net, meta)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(TwoStreamNet<T>, CheckpointMeta)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn specs() -> (NetworkSpec, NetworkSpec) {
        let s = NetworkSpec::new(
            vec![3],
            vec![LayerSpec::Linear { units: 2, bias: false }, LayerSpec::BatchNorm, LayerSpec::Relu],
        );
        (s.clone(), s)
    }

    #[test]
    fn round_trip() {
        let (v, a) = specs();
        let mut net = TwoStreamNet::<f32>::build(&v, &a, 5).unwrap();
        net.visual.batchnorms_mut().next().unwrap().running_var[1] = 0.25;
        net.params_mut()[0].m[2] = 1e-3;
        let meta = CheckpointMeta {
            seed: 5,
            step: 17,
            epoch: 2,
            lr: 1e-4,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, &meta).unwrap();
        let (back, m2) = read_checkpoint::<_, f32>(&mut buf.as_slice()).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(back.params(), net.params());
        assert_eq!(back.visual.batchnorms().next().unwrap().running_var, vec![1.0, 0.25]);
    }

    #[test]
    fn version_and_truncation_rejected() {
        let (v, a) = specs();
        let net = TwoStreamNet::<f64>::build(&v, &a, 1).unwrap();
        let meta = CheckpointMeta {
            seed: 1,
            step: 0,
            epoch: 0,
            lr: 1e-3,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, &meta).unwrap();
        let mut wrong = buf.clone();
        wrong[4] = 9;
        let err = read_checkpoint::<_, f64>(&mut wrong.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 9"));
        buf.pop();
        assert!(read_checkpoint::<_, f64>(&mut buf.as_slice()).is_err());
    }
}
