//! Binary checkpoint: `MCRPL1`, a little-endian u32 header length, a text
//! header, then every tensor as little-endian f32 in header order.
//!
//! Header lines:
//! ```text
//! config_hash <hex>
//! seed <u64>
//! rng <summary>
//! param <name> <dim>x<dim>... <byte offset>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::CliError;
use crate::model::{Group, ModelConfig, Param, ParamSet};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 6] = b"MCRPL1";

/// How every random stream of a run is derived; stored for provenance.
pub const RNG_SUMMARY: &str = "chacha8-splitmix64-streams";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub rng: String,
    pub params: ParamSet,
}

fn format_err(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config_hash: &str, seed: u64, params: ParamSet) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            seed,
            rng: RNG_SUMMARY.to_string(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let _ = writeln!(header, "config_hash {}", self.config_hash);
        let _ = writeln!(header, "seed {}", self.seed);
        let _ = writeln!(header, "rng {}", self.rng);
        let mut offset = 0usize;
        for p in self.params.iter() {
            let dims: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(header, "param {} {} {offset}", p.name, dims.join("x"));
            offset += 4 * p.tensor.len();
        }
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for p in self.params.iter() {
            for v in p.tensor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| format_err("missing MCRPL1 magic"))?;
        if rest.len() < 4 {
            return Err(format_err("truncated header length"));
        }
        let hlen = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        let rest = &rest[4..];
        if rest.len() < hlen {
            return Err(format_err("truncated header"));
        }
        let header = std::str::from_utf8(&rest[..hlen]).map_err(|_| format_err("header is not UTF-8"))?;
        let payload = &rest[hlen..];

        let mut lines = header.lines();
        let mut field = |key: &str| -> Result<String, CliError> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| format_err(format!("expected header field {key}")))
        };
        let config_hash = field("config_hash")?;
        let seed = field("seed")?.parse().map_err(|_| format_err("bad seed"))?;
        let rng = field("rng")?;

        let mut params = Vec::new();
        let mut expected_offset = 0usize;
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            let [tag, name, dims, offset] = parts.as_slice() else {
                return Err(format_err(format!("bad manifest line {line:?}")));
            };
            if *tag != "param" {
                return Err(format_err(format!("bad manifest line {line:?}")));
            }
            let group = name
                .split('.')
                .next()
                .and_then(Group::from_name)
                .ok_or_else(|| format_err(format!("unknown parameter group in {name}")))?;
            let shape = dims
                .split('x')
                .map(str::parse)
                .collect::<Result<Vec<usize>, _>>()
                .map_err(|_| format_err(format!("bad shape {dims}")))?;
            let offset: usize = offset.parse().map_err(|_| format_err(format!("bad offset {offset}")))?;
            if offset != expected_offset {
                return Err(format_err(format!("{name}: offset {offset}, expected {expected_offset}")));
            }
            let n: usize = shape.iter().product();
            let end = offset + 4 * n;
            let raw = payload
                .get(offset..end)
                .ok_or_else(|| format_err(format!("{name}: payload truncated")))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(Param {
                name: name.to_string(),
                group,
                tensor: Tensor::new(shape, values).map_err(|e| format_err(e.to_string()))?,
            });
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(format_err(format!(
                "payload has {} bytes, manifest covers {expected_offset}",
                payload.len()
            )));
        }
        Ok(Self {
            config_hash,
            seed,
            rng,
            params: ParamSet::from_params(params),
        })
    }

    /// Rejects any manifest whose names or shapes differ from `cfg`'s.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<(), CliError> {
        self.params
            .check_against(cfg)
            .map_err(|e| CliError::Config(format!("checkpoint does not match config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
