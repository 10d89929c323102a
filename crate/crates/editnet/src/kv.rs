//! Flat `key = value` text configs for [`TrainConfig`] and [`SynthSpec`].
//!
//! Blank lines and lines starting with `#` are ignored. Keys mirror the
//! struct field names; missing keys keep their defaults. Floats are written
//! in Rust's shortest round-trip form, so write → read is lossless.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use editnet_core::{DomainShift, SynthSpec, TrainConfig, Variant};

use crate::error::{Error, Result};

/// Parsed lines, keyed by name, remembering line numbers for errors.
pub struct KvMap {
    file: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KvMap {
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |what: String| Error::Text {
                file: file.to_string(),
                line: i + 1,
                what,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
        }
        Ok(Self {
            file: file.to_string(),
            entries,
        })
    }

    /// Removes and parses `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some((line, v)) = self.entries.remove(key) else {
            return Ok(None);
        };
        v.parse().map(Some).map_err(|_| Error::Text {
            file: self.file.clone(),
            line,
            what: format!("cannot parse `{v}` for `{key}`"),
        })
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on any key nobody asked for.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Text {
                file: self.file,
                line,
                what: format!("unknown key `{k}`"),
            }),
        }
    }
}

struct Out(String);

impl Out {
    fn kv(&mut self, k: &str, v: impl std::fmt::Debug) {
        writeln!(self.0, "{k} = {v:?}").expect("write to String");
    }

    fn kv_display(&mut self, k: &str, v: impl std::fmt::Display) {
        writeln!(self.0, "{k} = {v}").expect("write to String");
    }
}

pub fn train_config_to_kv(c: &TrainConfig) -> String {
    let mut o = Out(String::new());
    o.kv("batch_per_domain", c.batch_per_domain);
    o.kv("epochs", c.epochs);
    o.kv("lr0", c.lr0);
    o.kv("weight_decay", c.weight_decay);
    o.kv("adam_beta1", c.adam_beta1);
    o.kv("adam_beta2", c.adam_beta2);
    o.kv("adam_eps", c.adam_eps);
    o.kv("seed", c.seed);
    o.kv_display("variant", c.variant);
    o.kv("z_dim", c.z_dim);
    o.kv("log_var_clamp", c.log_var_clamp);
    o.kv("bn_momentum", c.bn_momentum);
    o.kv("bn_epsilon", c.bn_epsilon);
    o.0
}

/// Reads the known keys into `c`, leaving unknown ones in the map.
pub fn read_train_config(map: &mut KvMap, c: &mut TrainConfig) -> Result<()> {
    map.set("batch_per_domain", &mut c.batch_per_domain)?;
    map.set("epochs", &mut c.epochs)?;
    map.set("lr0", &mut c.lr0)?;
    map.set("weight_decay", &mut c.weight_decay)?;
    map.set("adam_beta1", &mut c.adam_beta1)?;
    map.set("adam_beta2", &mut c.adam_beta2)?;
    map.set("adam_eps", &mut c.adam_eps)?;
    map.set("seed", &mut c.seed)?;
    map.set::<Variant>("variant", &mut c.variant)?;
    map.set("z_dim", &mut c.z_dim)?;
    map.set("log_var_clamp", &mut c.log_var_clamp)?;
    map.set("bn_momentum", &mut c.bn_momentum)?;
    map.set("bn_epsilon", &mut c.bn_epsilon)?;
    Ok(())
}

pub fn parse_train_config(text: &str, file: &str) -> Result<TrainConfig> {
    let mut map = KvMap::parse(text, file)?;
    let mut c = TrainConfig::default();
    read_train_config(&mut map, &mut c)?;
    map.finish()?;
    c.validate()?;
    Ok(c)
}

pub fn synth_spec_to_kv(s: &SynthSpec) -> String {
    let mut o = Out(String::new());
    o.kv("n_speakers", s.n_speakers);
    o.kv("emb_per_speaker", s.emb_per_speaker);
    o.kv("eval_speakers", s.eval_speakers);
    o.kv("segments_per_utt", s.segments_per_utt);
    o.kv("dim", s.dim);
    o.kv("speaker_rank", s.speaker_rank);
    o.kv("spread", s.spread);
    o.kv("noise", s.noise);
    match s.shift {
        DomainShift::Identity => o.kv_display("shift", "identity"),
        DomainShift::Affine { condition, offset } => {
            o.kv_display("shift", "affine");
            o.kv("condition", condition);
            o.kv("offset", offset);
        }
        DomainShift::Nonlinear {
            alpha,
            beta,
            condition,
            offset,
        } => {
            o.kv_display("shift", "nonlinear");
            o.kv("alpha", alpha);
            o.kv("beta", beta);
            o.kv("condition", condition);
            o.kv("offset", offset);
        }
    }
    o.kv("n_trials", s.n_trials);
    o.kv("seed", s.seed);
    o.0
}

pub fn parse_synth_spec(text: &str, file: &str) -> Result<SynthSpec> {
    let mut map = KvMap::parse(text, file)?;
    let mut s = SynthSpec::default();
    map.set("n_speakers", &mut s.n_speakers)?;
    map.set("emb_per_speaker", &mut s.emb_per_speaker)?;
    map.set("eval_speakers", &mut s.eval_speakers)?;
    map.set("segments_per_utt", &mut s.segments_per_utt)?;
    map.set("dim", &mut s.dim)?;
    map.set("speaker_rank", &mut s.speaker_rank)?;
    map.set("spread", &mut s.spread)?;
    map.set("noise", &mut s.noise)?;
    map.set("n_trials", &mut s.n_trials)?;
    map.set("seed", &mut s.seed)?;

    let DomainShift::Nonlinear {
        mut alpha,
        mut beta,
        mut condition,
        mut offset,
    } = DomainShift::DEFAULT_NONLINEAR
    else {
        unreachable!("the default shift is nonlinear")
    };
    let shift_line = map.entries.get("shift").map_or(0, |(line, _)| *line);
    let kind: String = map.take("shift")?.unwrap_or_else(|| "nonlinear".into());
    s.shift = match kind.as_str() {
        "identity" => DomainShift::Identity,
        "affine" => {
            map.set("condition", &mut condition)?;
            map.set("offset", &mut offset)?;
            DomainShift::Affine { condition, offset }
        }
        "nonlinear" => {
            map.set("alpha", &mut alpha)?;
            map.set("beta", &mut beta)?;
            map.set("condition", &mut condition)?;
            map.set("offset", &mut offset)?;
            DomainShift::Nonlinear {
                alpha,
                beta,
                condition,
                offset,
            }
        }
        other => {
            return Err(Error::Text {
                file: file.to_string(),
                line: shift_line,
                what: format!("unknown shift `{other}` (identity, affine, nonlinear)"),
            })
        }
    };
    map.finish()?;
    s.validate()?;
    Ok(s)
}
