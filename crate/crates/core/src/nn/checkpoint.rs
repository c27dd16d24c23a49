//! `SRN1` checkpoints.
//!
//! Little-endian layout: magic; config block (input channels, three group
//! widths, units per group, window size as u32, then the 36 SPM filter
//! coefficients as f64); parameter count (u64) and every parameter as f64
//! in declaration order; an optional Adam section (flag byte, then step,
//! learning rate, the six hyperparameters, first and second moments); and
//! finally the running mean and variance of every batch-norm layer.

use std::fs;
use std::path::Path;

use super::adam::{AdamConfig, AdamState};
use super::resnet::{NetConfig, SResNet};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::spm::{FilterBank, FILTERS};

const MAGIC: &[u8; 4] = b"SRN1";

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub net: SResNet<T>,
    pub window_size: usize,
    pub adam: Option<AdamState<T>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn all<T: Scalar>(&mut self, vs: &[T]) {
        vs.iter().for_each(|v| self.f64(v.as_f64()));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn fill<T: Scalar>(&mut self, out: &mut [T]) -> Result<()> {
        for v in out {
            *v = T::from_f64(self.f64()?);
        }
        Ok(())
    }
}

pub fn checkpoint_bytes<T: Scalar>(
    net: &mut SResNet<T>,
    window_size: usize,
    adam: Option<&AdamState<T>>,
) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    let cfg = *net.config();
    w.u32(cfg.in_channels);
    cfg.channels.iter().for_each(|&c| w.u32(c));
    w.u32(cfg.units_per_group);
    w.u32(window_size);
    for k in net.filter_bank().kernels() {
        k.iter().flatten().for_each(|&v| w.f64(v));
    }
    w.u64(net.param_count() as u64);
    net.visit_params(&mut |p| w.all(&p.value));
    match adam {
        Some(a) => {
            w.0.push(1);
            w.u64(a.step);
            w.f64(a.lr);
            let c = a.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps, c.lr_decay, c.weight_decay] {
                w.f64(v);
            }
            a.m.iter().for_each(|m| w.all(m));
            a.v.iter().for_each(|v| w.all(v));
        }
        None => w.0.push(0),
    }
    net.visit_bn(&mut |bn| {
        w.all(&bn.running_mean);
        w.all(&bn.running_var);
    });
    w.0
}

pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("bad magic, expected SRN1"));
    }
    let in_channels = r.u32()?;
    let channels = [r.u32()?, r.u32()?, r.u32()?];
    let units_per_group = r.u32()?;
    let window_size = r.u32()?;
    let config = NetConfig {
        in_channels,
        channels,
        units_per_group,
    };
    if in_channels != FILTERS {
        return Err(Error::format(format!(
            "checkpoint expects {in_channels} input channels, SPM provides {FILTERS}"
        )));
    }
    let mut kernels = [[[0.0; 3]; 3]; FILTERS];
    for k in &mut kernels {
        for v in k.iter_mut().flatten() {
            *v = r.f64()?;
        }
    }
    let bank = FilterBank::new(kernels)?;
    let mut net = SResNet::<T>::new(config, bank, 0)?;
    let count = r.u64()? as usize;
    if count != net.param_count() {
        return Err(Error::format(format!(
            "checkpoint holds {count} parameters, architecture needs {}",
            net.param_count()
        )));
    }
    let mut result = Ok(());
    net.visit_params(&mut |p| {
        if result.is_ok() {
            result = r.fill(&mut p.value);
        }
    });
    result?;
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let lr = r.f64()?;
            let mut h = [0.0; 6];
            for v in &mut h {
                *v = r.f64()?;
            }
            let config = AdamConfig {
                lr: h[0],
                beta1: h[1],
                beta2: h[2],
                eps: h[3],
                lr_decay: h[4],
                weight_decay: h[5],
            };
            let mut state = AdamState::new(config, &mut net);
            state.step = step;
            state.lr = lr;
            for m in state.m.iter_mut().chain(state.v.iter_mut()) {
                r.fill(m)?;
            }
            net.set_weight_decay(config.weight_decay);
            Some(state)
        }
        flag => return Err(Error::format(format!("bad optimizer flag {flag}"))),
    };
    let mut result = Ok(());
    net.visit_bn(&mut |bn| {
        if result.is_ok() {
            result = r.fill(&mut bn.running_mean).and_then(|_| r.fill(&mut bn.running_var));
        }
    });
    result?;
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        net,
        window_size,
        adam,
    })
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    net: &mut SResNet<T>,
    window_size: usize,
    adam: Option<&AdamState<T>>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(net, window_size, adam)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    parse_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
