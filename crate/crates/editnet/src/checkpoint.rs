//! Sectioned binary container and the checkpoint stored in it.
//!
//! ```text
//! "EDCK"  u32 version  u32 section count
//! per section: u16 len, name UTF-8, u64 offset, u64 length, 32-byte SHA-256
//! section payloads, in table order
//! ```
//!
//! Offsets are absolute. Every payload is hashed on load.

use std::path::Path;

use editnet_core::baselines::DomainStats;
use editnet_core::cvae::ModelOptions;
use editnet_core::nn::Module;
use editnet_core::{CoralTransform, EditnetModel, Matrix, ModelDims, TrainConfig};
use sha2::{Digest, Sha256};

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::kv::{read_train_config, train_config_to_kv, KvMap};

pub const MAGIC: &[u8; 4] = b"EDCK";
pub const VERSION: u32 = 1;

pub const CONFIG: &str = "config";
pub const MODEL: &str = "model";
pub const STATS: &str = "stats";
pub const STATS_TAR: &str = "stats_tar";
pub const STATS_SRC: &str = "stats_src";
pub const CORAL: &str = "coral";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub sections: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn push(&mut self, name: &str, payload: Vec<u8>) {
        self.sections.push((name.to_string(), payload));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[u8]> {
        self.get(name).ok_or_else(|| Error::MissingSection(name.to_string()))
    }

    /// Offset of `name`'s payload in the encoded form.
    pub fn payload_offset(&self, name: &str) -> Option<u64> {
        let mut at = self.header_len();
        for (n, p) in &self.sections {
            if n == name {
                return Some(at);
            }
            at += p.len() as u64;
        }
        None
    }

    fn header_len(&self) -> u64 {
        let table: usize = self.sections.iter().map(|(n, _)| 2 + n.len() + 8 + 8 + 32).sum();
        (4 + 4 + 4 + table) as u64
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.sections.len() as u32);
        let mut at = self.header_len();
        for (name, payload) in &self.sections {
            w.str16(name)?;
            w.u64(at);
            w.u64(payload.len() as u64);
            w.bytes(&Sha256::digest(payload));
            at += payload.len() as u64;
        }
        for (_, payload) in &self.sections {
            w.bytes(payload);
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("bad magic, expected \"EDCK\"", 0));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("section count")?;
        let mut table = Vec::new();
        for i in 0..count {
            let name = r.str16(&format!("name of section {i}"))?;
            let offset = r.u64("section offset")?;
            let len = r.u64("section length")?;
            let digest: [u8; 32] = r.take(32, "section digest")?.try_into().expect("32 bytes");
            table.push((name, offset, len, digest));
        }
        let mut expected = r.offset();
        let mut sections = Vec::with_capacity(table.len());
        for (name, offset, len, digest) in table {
            if offset != expected {
                return Err(Error::format(
                    format!("section `{name}` declared at {offset}, expected {expected}"),
                    offset,
                ));
            }
            let end = offset.checked_add(len).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| {
                Error::format(format!("truncated input: section `{name}` runs past the end"), offset)
            })?;
            let payload = &bytes[offset as usize..end as usize];
            if Sha256::digest(payload).as_slice() != digest {
                return Err(Error::Checksum(name));
            }
            if sections.iter().any(|(n, _): &(String, Vec<u8>)| *n == name) {
                return Err(Error::format(format!("duplicate section `{name}`"), offset));
            }
            sections.push((name, payload.to_vec()));
            expected = end;
        }
        if expected != bytes.len() as u64 {
            return Err(Error::format("trailing bytes after the last section", expected));
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(Error::io(path))?)
    }
}

pub fn encode_stats(s: &DomainStats) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.u64(s.count);
    w.u32(s.dim() as u32);
    w.f64s(&s.mean);
    w.f64s(&s.std);
    w.buf
}

pub fn decode_stats(bytes: &[u8], base: u64) -> Result<DomainStats> {
    let mut r = ByteReader::at(bytes, base);
    let count = r.u64("stats count")?;
    let d = r.u32("stats dimension")? as usize;
    let mean = r.f64s(d, "stats mean")?;
    let std = r.f64s(d, "stats std")?;
    r.finish("stats")?;
    Ok(DomainStats::new(mean, std, count)?)
}

fn encode_coral(t: &CoralTransform) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.u32(t.dim() as u32);
    w.u8(t.align_means as u8);
    w.f64s(t.whitening.data());
    w.f64s(t.coloring.data());
    w.f64s(&t.target_mean);
    w.f64s(&t.source_mean);
    w.buf
}

fn decode_coral(bytes: &[u8], base: u64) -> Result<CoralTransform> {
    let mut r = ByteReader::at(bytes, base);
    let d = r.u32("coral dimension")? as usize;
    let align_means = match r.u8("coral flag")? {
        0 => false,
        1 => true,
        v => return Err(Error::format(format!("coral flag {v}"), r.offset() - 1)),
    };
    let whitening = Matrix::from_vec(d, d, r.f64s(d * d, "coral whitening")?)?;
    let coloring = Matrix::from_vec(d, d, r.f64s(d * d, "coral coloring")?)?;
    let target_mean = r.f64s(d, "coral target mean")?;
    let source_mean = r.f64s(d, "coral source mean")?;
    r.finish("coral")?;
    Ok(CoralTransform {
        whitening,
        coloring,
        target_mean,
        source_mean,
        align_means,
    })
}

/// Tensors in `visit_state` order: u32 count, then per tensor a u16-prefixed
/// name, u64 length and the values.
fn encode_model(m: &EditnetModel) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    m.visit_state("", &mut |name, values| tensors.push((name.to_string(), values.to_vec())));
    let mut w = ByteWriter::default();
    w.u32(tensors.len() as u32);
    for (name, values) in &tensors {
        w.str16(name)?;
        w.u64(values.len() as u64);
        w.f64s(values);
    }
    Ok(w.buf)
}

fn decode_model(bytes: &[u8], base: u64, dims: ModelDims, options: ModelOptions) -> Result<EditnetModel> {
    let mut r = ByteReader::at(bytes, base);
    let count = r.u32("tensor count")?;
    let mut seen = 0u32;
    let mut fail: Option<Error> = None;
    let model = EditnetModel::from_state(dims, options, |name, slot| {
        let mut read = || -> Result<()> {
            let at = r.offset();
            let stored = r.str16("tensor name")?;
            if stored != name {
                return Err(Error::format(format!("tensor `{stored}` where `{name}` was expected"), at));
            }
            let len = r.u64("tensor length")?;
            if len != slot.len() as u64 {
                return Err(Error::format(
                    format!("tensor `{name}` has {len} values, the model needs {}", slot.len()),
                    at,
                ));
            }
            let at = r.offset();
            let values = r.f64s(slot.len(), &format!("tensor `{name}`"))?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(format!("non-finite value in `{name}`"), at));
            }
            slot.copy_from_slice(&values);
            seen += 1;
            Ok(())
        };
        if fail.is_none() {
            fail = read().err();
        }
        Ok(())
    })?;
    if let Some(e) = fail {
        return Err(e);
    }
    if seen != count {
        return Err(Error::format(format!("{count} tensors stored, the model has {seen}"), r.offset()));
    }
    r.finish("the last tensor")?;
    Ok(model)
}

/// Everything needed to transfer and score: the trained model, its
/// training configuration, both domains' statistics and optionally CORAL.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: EditnetModel,
    pub tar_stats: DomainStats,
    pub src_stats: DomainStats,
    pub coral: Option<CoralTransform>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut config = format!("x_dim = {}\n", self.model.dims().x_dim);
        config.push_str(&train_config_to_kv(&self.config));
        let mut c = Container::default();
        c.push(CONFIG, config.into_bytes());
        c.push(MODEL, encode_model(&self.model)?);
        c.push(STATS_TAR, encode_stats(&self.tar_stats));
        c.push(STATS_SRC, encode_stats(&self.src_stats));
        if let Some(coral) = &self.coral {
            c.push(CORAL, encode_coral(coral));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let at = |name| c.payload_offset(name).unwrap_or(0);
        let text = std::str::from_utf8(c.require(CONFIG)?)
            .map_err(|_| Error::format("config section is not UTF-8", at(CONFIG)))?;
        let mut map = KvMap::parse(text, "checkpoint config")?;
        let x_dim: usize = map
            .take("x_dim")?
            .ok_or_else(|| Error::format("config section lacks x_dim", at(CONFIG)))?;
        let mut config = TrainConfig::default();
        read_train_config(&mut map, &mut config)?;
        map.finish()?;
        config.validate()?;

        let model = decode_model(
            c.require(MODEL)?,
            at(MODEL),
            config.model_dims(x_dim),
            config.model_options(),
        )?;
        let tar_stats = decode_stats(c.require(STATS_TAR)?, at(STATS_TAR))?;
        let src_stats = decode_stats(c.require(STATS_SRC)?, at(STATS_SRC))?;
        let coral = c.get(CORAL).map(|p| decode_coral(p, at(CORAL))).transpose()?;
        for (what, d) in [
            ("target stats", tar_stats.dim()),
            ("source stats", src_stats.dim()),
            ("coral", coral.as_ref().map_or(x_dim, |t| t.dim())),
        ] {
            if d != x_dim {
                return Err(Error::format(format!("{what} of dimension {d} in a model of {x_dim}"), 0));
            }
        }
        Ok(Self {
            config,
            model,
            tar_stats,
            src_stats,
            coral,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.to_container()?.encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::decode(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(Error::io(path))?)
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use editnet_core::baselines::{compute_stats, fit_coral, Ridge};
    use editnet_core::rng::{normal_matrix, stream, Stream};
    use editnet_core::Variant;

    fn sample(variant: Variant, with_coral: bool) -> Checkpoint {
        let config = TrainConfig {
            z_dim: 3,
            variant,
            ..TrainConfig::default()
        };
        let mut rng = stream(3, Stream::Probe);
        let xt = normal_matrix(20, 6, &mut rng);
        let xs = normal_matrix(20, 6, &mut rng);
        Checkpoint {
            model: EditnetModel::new(config.model_dims(6), config.model_options(), 9),
            config,
            tar_stats: compute_stats(&xt).unwrap(),
            src_stats: compute_stats(&xs).unwrap(),
            coral: with_coral.then(|| fit_coral(&xt, &xs, Ridge::Auto).unwrap()),
        }
    }

    #[test]
    fn round_trip_reproduces_transfer() {
        let ck = sample(Variant::Full, true);
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.model.fingerprint(), ck.model.fingerprint());
        assert_eq!(back.config, ck.config);
        assert_eq!(back.tar_stats, ck.tar_stats);
        assert_eq!(back.coral, ck.coral);
        let probe = normal_matrix(5, 6, &mut stream(4, Stream::Probe));
        let a = ck.model.transfer(&probe).unwrap();
        let b = back.model.transfer(&probe).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn variant_flag_survives() {
        let ck = sample(Variant::NoPriorTransfer, false);
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back.config.variant, Variant::NoPriorTransfer);
        assert!(!back.model.prior_transfer());
        assert!(back.coral.is_none());
    }

    #[test]
    fn tampered_payload_fails_checksum() {
        let ck = sample(Variant::Full, false);
        let c = ck.to_container().unwrap();
        let mut bytes = c.encode().unwrap();
        let at = c.payload_offset(MODEL).unwrap() as usize + 100;
        bytes[at] ^= 1;
        match Checkpoint::decode(&bytes) {
            Err(Error::Checksum(name)) => assert_eq!(name, MODEL),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_section_errors() {
        let ck = sample(Variant::Full, false);
        let mut bytes = ck.encode().unwrap();
        bytes[4] = 2;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Version { found: 2, .. })));

        let mut c = ck.to_container().unwrap();
        c.sections.retain(|(n, _)| n != STATS_SRC);
        assert!(matches!(Checkpoint::from_container(&c), Err(Error::MissingSection(s)) if s == STATS_SRC));

        let bytes = ck.encode().unwrap();
        for cut in [3, 11, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }
}
