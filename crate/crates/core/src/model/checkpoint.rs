//! Sectioned little-endian checkpoint format.
//!
//! ```text
//! "DDNN" u32 version
//! HEAD  u32 devices, u32 filters, u32 classes, u8 local scheme, u8 cloud scheme,
//!       u32 cloud block count, u32 filters per cloud block,
//!       u32 view index per device, f64 x2 exit weights, f64 bn epsilon, f64 bn momentum
//! BITS  u64 byte count, then packed weights: per device (conv, head), then cloud blocks
//! FLTS  u64 value count, then f32 values in declared order
//! ```
//!
//! Float order: per device conv BN then head BN (gamma, beta, running mean,
//! running variance each), local projection (weight, bias), cloud
//! projection, cloud block BNs, cloud head (weight, bias). Shadow weights
//! are not stored; a loaded model's shadows equal its signs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::aggregation::AggregationKind;
use super::ddnn::{Architecture, DdnnModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::block::BatchNorm;
use crate::tensor::{BinaryWeights, BnConfig};

pub const MAGIC: &[u8; 4] = b"DDNN";
pub const VERSION: u32 = 1;

fn binary_weights<T: Scalar>(model: &mut DdnnModel<T>) -> Vec<&mut BinaryWeights<T>> {
    let mut out = Vec::new();
    for b in model.branches.iter_mut() {
        out.push(&mut b.conv.weights);
        out.push(&mut b.head.weights);
    }
    for b in model.cloud_stack.iter_mut() {
        out.push(&mut b.weights);
    }
    out
}

fn bn_floats<'a, T: Scalar>(bn: &'a mut BatchNorm<T>, out: &mut Vec<&'a mut [T]>) {
    out.push(bn.gamma.data_mut());
    out.push(bn.beta.data_mut());
    out.push(&mut bn.stats.mean);
    out.push(&mut bn.stats.var);
}

fn float_slots<T: Scalar>(model: &mut DdnnModel<T>) -> Vec<&mut [T]> {
    let mut out = Vec::new();
    for b in model.branches.iter_mut() {
        bn_floats(&mut b.conv.bn, &mut out);
        bn_floats(&mut b.head.bn, &mut out);
    }
    for agg in [&mut model.local_agg, &mut model.cloud_agg] {
        if let Some(p) = agg.projection.as_mut() {
            out.push(p.weight.data_mut());
            out.push(p.bias.data_mut());
        }
    }
    for b in model.cloud_stack.iter_mut() {
        bn_floats(&mut b.bn, &mut out);
    }
    out.push(model.cloud_head.weight.data_mut());
    out.push(model.cloud_head.bias.data_mut());
    out
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint<T: Scalar>(model: &DdnnModel<T>) -> Vec<u8> {
    let arch = &model.arch;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(b"HEAD");
    put_u32(&mut buf, arch.devices);
    put_u32(&mut buf, arch.filters);
    put_u32(&mut buf, arch.classes);
    buf.push(arch.local.code());
    buf.push(arch.cloud.code());
    put_u32(&mut buf, arch.cloud_filters.len());
    for &f in &arch.cloud_filters {
        put_u32(&mut buf, f);
    }
    for &d in &model.device_ids {
        put_u32(&mut buf, d);
    }
    for v in [arch.exit_weights[0], arch.exit_weights[1], arch.bn.epsilon, arch.bn.momentum] {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    let mut model = model.clone();
    let bits: Vec<u8> = binary_weights(&mut model).iter().flat_map(|w| w.bits().to_vec()).collect();
    buf.extend_from_slice(b"BITS");
    buf.extend_from_slice(&(bits.len() as u64).to_le_bytes());
    buf.extend_from_slice(&bits);

    let floats: Vec<f32> = float_slots(&mut model)
        .iter()
        .flat_map(|s| s.iter().map(|v| v.as_f64() as f32).collect::<Vec<_>>())
        .collect();
    buf.extend_from_slice(b"FLTS");
    buf.extend_from_slice(&(floats.len() as u64).to_le_bytes());
    for v in floats {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {}", what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tag(&mut self, tag: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "section tag")?;
        if got != tag {
            return Err(Error::Checkpoint(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<DdnnModel<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a DDNN checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {}", version)));
    }
    r.tag(b"HEAD")?;
    let devices = r.u32("device count")?;
    let filters = r.u32("filter count")?;
    let classes = r.u32("class count")?;
    let scheme = |code: u8| {
        AggregationKind::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown aggregation code {}", code)))
    };
    let local = scheme(r.u8("local scheme")?)?;
    let cloud = scheme(r.u8("cloud scheme")?)?;
    let blocks = r.u32("cloud block count")?;
    if blocks > 64 || devices > 1024 {
        return Err(Error::Checkpoint("implausible header".into()));
    }
    let cloud_filters = (0..blocks).map(|_| r.u32("cloud filters")).collect::<Result<Vec<_>>>()?;
    let device_ids = (0..devices).map(|_| r.u32("device id")).collect::<Result<Vec<_>>>()?;
    let exit_weights = [r.f64("exit weight")?, r.f64("exit weight")?];
    let bn = BnConfig {
        epsilon: r.f64("bn epsilon")?,
        momentum: r.f64("bn momentum")?,
    };
    let arch = Architecture {
        devices,
        filters,
        classes,
        local,
        cloud,
        cloud_filters,
        exit_weights,
        bn,
    };
    arch.validate().map_err(|e| Error::Checkpoint(format!("invalid architecture: {}", e)))?;
    let mut model = DdnnModel::new(arch, device_ids, &mut ChaCha8Rng::seed_from_u64(0))?;

    r.tag(b"BITS")?;
    let nbits = r.u64("bit section length")?;
    let mut bits = r.take(nbits, "packed weights")?;
    let slots = binary_weights(&mut model);
    let expected: usize = slots.iter().map(|w| w.packed_bytes()).sum();
    if nbits != expected {
        return Err(Error::Checkpoint(format!("{} packed weight bytes, architecture needs {}", nbits, expected)));
    }
    for w in slots {
        let (head, rest) = bits.split_at(w.packed_bytes());
        *w = BinaryWeights::from_bits(w.shape(), head.to_vec())?;
        bits = rest;
    }

    r.tag(b"FLTS")?;
    let nfloats = r.u64("float section length")?;
    let mut slots = float_slots(&mut model);
    let expected: usize = slots.iter().map(|s| s.len()).sum();
    if nfloats != expected {
        return Err(Error::Checkpoint(format!("{} floats, architecture needs {}", nfloats, expected)));
    }
    for slot in slots.iter_mut() {
        for v in slot.iter_mut() {
            let b = r.take(4, "float parameters")?;
            *v = T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &DdnnModel<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<DdnnModel<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}
