//! Checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "WSCK" | version u32
//! spec text   (u64 length + UTF-8)
//! meta text   (u64 length + UTF-8, key = value lines)
//! loss history (u64 count, then epoch u32, step u64, loss f64)
//! parameters  (u64 count, then rank u32, dims u64…, f32 data)
//! running statistics (u64 count, then u64 length + f32 data)
//! optimizer   (u8 flag; if set: step u64, first moments, second moments)
//! trailer     payload length u64 | CRC-64/XZ of the payload u64
//! ```

use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::model::{Model, NetworkSpec};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"WSCK";
const TRAILER: usize = 16;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: u32,
    pub step: u64,
    pub loss: f64,
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainMeta {
    /// `lowpass:<depth>` or `conditional:<scale>`.
    pub mode: String,
    pub seed: u64,
    pub epoch: u32,
    pub step: u64,
    pub loss_history: Vec<LossRecord>,
}

impl TrainMeta {
    /// Writes the loss history as `epoch,step,loss` CSV.
    pub fn write_loss_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,step,loss")?;
        for r in &self.loss_history {
            writeln!(out, "{},{},{:e}", r.epoch, r.step, r.loss)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            meta: TrainMeta::default(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_text(&mut w, &self.model.spec.to_text());
        put_text(&mut w, &self.meta_text());
        put_u64(&mut w, self.meta.loss_history.len() as u64);
        for r in &self.meta.loss_history {
            w.extend_from_slice(&r.epoch.to_le_bytes());
            put_u64(&mut w, r.step);
            w.extend_from_slice(&r.loss.to_le_bytes());
        }
        put_u64(&mut w, self.model.params().len() as u64);
        for p in self.model.params() {
            put_tensor(&mut w, p);
        }
        put_u64(&mut w, self.model.running_stats().len() as u64);
        for r in self.model.running_stats() {
            put_u64(&mut w, r.len() as u64);
            put_f32s(&mut w, r);
        }
        match &self.optimizer {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                put_u64(&mut w, s.step);
                for t in s.m.iter().chain(&s.v) {
                    put_f32s(&mut w, t.data());
                }
            }
        }
        seal(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let payload = unseal(bytes)?;
        let mut r = Reader { buf: payload, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let spec = NetworkSpec::from_text(&r.text()?)?;
        let meta_text = r.text()?;
        let mut meta = parse_meta(&meta_text)?;
        let n = r.u64()? as usize;
        for _ in 0..n {
            let epoch = r.u32()?;
            let step = r.u64()?;
            let loss = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            meta.loss_history.push(LossRecord { epoch, step, loss });
        }
        let n = r.u64()? as usize;
        let mut params = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            params.push(r.tensor()?);
        }
        let n = r.u64()? as usize;
        let mut running = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = r.u64()? as usize;
            running.push(r.f32s(len)?);
        }
        let noise_range = meta_noise_range(&meta_text)?;
        let model = Model::from_parts(spec, params, running, noise_range)?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut moments = Vec::with_capacity(2 * model.params().len());
                for p in model.params().iter().chain(model.params()) {
                    moments.push(Tensor::from_vec(p.shape(), r.f32s(p.len())?)?);
                }
                let v = moments.split_off(model.params().len());
                Some(AdamState { step, m: moments, v })
            }
            f => return Err(Error::Integrity(format!("bad optimizer flag {f}"))),
        };
        if r.pos != payload.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after the optimizer block",
                payload.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model,
            optimizer,
            meta,
        })
    }

    fn meta_text(&self) -> String {
        let m = &self.meta;
        let (lo, hi) = self.model.noise_range;
        format!(
            "mode = {}\nseed = {}\nepoch = {}\nstep = {}\nnoise_min = {lo:e}\nnoise_max = {hi:e}\n",
            m.mode, m.seed, m.epoch, m.step
        )
    }
}

fn meta_pairs(text: &str) -> impl Iterator<Item = (&str, &str)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
}

fn meta_err(key: &str, value: &str) -> Error {
    Error::Integrity(format!("bad metadata value {key} = {value}"))
}

fn parse_meta(text: &str) -> Result<TrainMeta> {
    let mut meta = TrainMeta::default();
    for (k, v) in meta_pairs(text) {
        match k {
            "mode" => meta.mode = v.to_string(),
            "seed" => meta.seed = v.parse().map_err(|_| meta_err(k, v))?,
            "epoch" => meta.epoch = v.parse().map_err(|_| meta_err(k, v))?,
            "step" => meta.step = v.parse().map_err(|_| meta_err(k, v))?,
            _ => {}
        }
    }
    Ok(meta)
}

fn meta_noise_range(text: &str) -> Result<(f64, f64)> {
    let mut range = (0.0, 1.0);
    for (k, v) in meta_pairs(text) {
        match k {
            "noise_min" => range.0 = v.parse().map_err(|_| meta_err(k, v))?,
            "noise_max" => range.1 = v.parse().map_err(|_| meta_err(k, v))?,
            _ => {}
        }
    }
    Ok(range)
}

/// Appends the length/checksum trailer.
pub(crate) fn seal(mut payload: Vec<u8>) -> Vec<u8> {
    let len = payload.len() as u64;
    let sum = CRC64.checksum(&payload);
    payload.extend_from_slice(&len.to_le_bytes());
    payload.extend_from_slice(&sum.to_le_bytes());
    payload
}

fn unseal(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < TRAILER {
        return Err(Error::Integrity(format!(
            "file is {} bytes, shorter than the trailer",
            bytes.len()
        )));
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - TRAILER);
    let len = u64::from_le_bytes(trailer[..8].try_into().expect("8 bytes"));
    let sum = u64::from_le_bytes(trailer[8..].try_into().expect("8 bytes"));
    if len != payload.len() as u64 {
        return Err(Error::Integrity(format!(
            "payload is {} bytes, trailer records {len}",
            payload.len()
        )));
    }
    let actual = CRC64.checksum(payload);
    if actual != sum {
        return Err(Error::Integrity(format!(
            "checksum mismatch: stored {sum:016x}, computed {actual:016x}"
        )));
    }
    Ok(payload)
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, c.to_bytes()).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_text(w: &mut Vec<u8>, s: &str) {
    put_u64(w, s.len() as u64);
    w.extend_from_slice(s.as_bytes());
}

fn put_f32s(w: &mut Vec<u8>, v: &[f32]) {
    w.reserve(4 * v.len());
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor<f32>) {
    w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        put_u64(w, d as u64);
    }
    put_f32s(w, t.data());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity("text block is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Integrity("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Integrity(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Integrity("tensor size overflow".into()))?;
        Tensor::from_vec(&shape, self.f32s(n)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_conditional_denoiser_with, LocalConfig};

    fn sample() -> Checkpoint {
        let cfg = LocalConfig {
            width: 4,
            conv_layers: 5,
            ..LocalConfig::new(5)
        };
        let model = build_conditional_denoiser_with(&cfg).unwrap().cast::<f32>();
        let optimizer = Some(AdamState::new(model.params()));
        Checkpoint {
            model,
            optimizer,
            meta: TrainMeta {
                mode: "conditional:1".into(),
                seed: 3,
                epoch: 2,
                step: 40,
                loss_history: vec![LossRecord { epoch: 0, step: 1, loss: 0.25 }],
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn newer_version_is_named() {
        let bytes = sample().to_bytes();
        let mut payload = bytes[..bytes.len() - TRAILER].to_vec();
        payload[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&seal(payload)).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Version { found: 7, supported: 1 }));
        assert!(msg.contains('7') && msg.contains('1'));
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Integrity(_))
        ));
        let mut bad = bytes.clone();
        bad[bytes.len() / 2] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))));
    }
}
