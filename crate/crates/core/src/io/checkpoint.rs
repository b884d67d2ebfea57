//! Checkpoints: `GRF1` magic, a version byte, a little-endian `u32` header
//! length, a text manifest, then every parameter as little-endian `f64` in
//! manifest order.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GRF1";
pub const VERSION: u8 = 1;
const SCALAR_WIDTH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetworkConfig,
    pub extractor_seed: u64,
    pub params: ParamStore,
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: msg.into() }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn split_usizes(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|x| x.parse().ok()).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = String::new();
        let n = &self.net;
        let _ = writeln!(h, "scalar_width {SCALAR_WIDTH}");
        let _ = writeln!(h, "extractor_seed {}", self.extractor_seed);
        let _ = writeln!(h, "d_model {}", n.d_model);
        let _ = writeln!(h, "encoder_hidden {}", n.encoder_hidden);
        let _ = writeln!(h, "channel_subspaces {}", join(&n.channel_subspaces));
        let _ = writeln!(h, "spatial_subspace {}", n.spatial_subspace);
        let _ = writeln!(h, "block_side {}", n.block_side);
        let _ = writeln!(h, "decoder_hidden {}", join(&n.decoder_hidden));
        let _ = writeln!(h, "params {}", self.params.len());
        for (name, t) in self.params.iter() {
            let _ = writeln!(h, "param {name} {}", join(t.shape()));
        }
        let mut out = Vec::with_capacity(9 + h.len() + SCALAR_WIDTH * self.params.total_scalars());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(h.as_bytes());
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fmt_err(0, "bad checkpoint magic"));
        }
        match bytes.get(4) {
            Some(&VERSION) => {}
            Some(v) => return Err(fmt_err(4, format!("unsupported checkpoint version {v}"))),
            None => return Err(fmt_err(4, "missing version byte")),
        }
        let len_bytes: [u8; 4] = bytes
            .get(5..9)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| fmt_err(bytes.len(), "truncated header length"))?;
        let hlen = u32::from_le_bytes(len_bytes) as usize;
        let header = bytes.get(9..9 + hlen).ok_or_else(|| fmt_err(bytes.len(), "truncated header"))?;
        let header = std::str::from_utf8(header).map_err(|e| fmt_err(9 + e.valid_up_to(), "header is not UTF-8"))?;

        let mut net = NetworkConfig::default();
        let mut extractor_seed = None;
        let mut declared = None;
        let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
        let mut offset = 9;
        for line in header.lines() {
            let bad = |what: &str| fmt_err(offset, format!("{what}: {line:?}"));
            let mut parts = line.split(' ');
            let key = parts.next().unwrap_or("");
            let rest: Vec<&str> = parts.collect();
            let one = || -> Result<&str> {
                match rest.as_slice() {
                    [v] => Ok(v),
                    _ => Err(bad("malformed header line")),
                }
            };
            let num = || one()?.parse::<usize>().map_err(|_| bad("bad number"));
            let list = || split_usizes(one()?).ok_or_else(|| bad("bad list"));
            match key {
                "scalar_width" => {
                    if num()? != SCALAR_WIDTH {
                        return Err(bad("unsupported scalar width"));
                    }
                }
                "extractor_seed" => {
                    extractor_seed = Some(one()?.parse::<u64>().map_err(|_| bad("bad seed"))?)
                }
                "d_model" => net.d_model = num()?,
                "encoder_hidden" => net.encoder_hidden = num()?,
                "channel_subspaces" => net.channel_subspaces = list()?,
                "spatial_subspace" => net.spatial_subspace = num()?,
                "block_side" => net.block_side = num()?,
                "decoder_hidden" => net.decoder_hidden = list()?,
                "params" => declared = Some(num()?),
                "param" => match rest.as_slice() {
                    [name, shape] => {
                        let shape = split_usizes(shape).ok_or_else(|| bad("bad shape"))?;
                        manifest.push((name.to_string(), shape));
                    }
                    _ => return Err(bad("malformed parameter line")),
                },
                _ => return Err(bad("unknown header key")),
            }
            offset += line.len() + 1;
        }
        let extractor_seed = extractor_seed.ok_or_else(|| fmt_err(9, "header lacks extractor_seed"))?;
        if declared != Some(manifest.len()) {
            return Err(fmt_err(9, "parameter count does not match the manifest"));
        }
        net.validate().map_err(|e| fmt_err(9, e.to_string()))?;

        let mut pos = 9 + hlen;
        let mut params = ParamStore::new();
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let chunk = bytes
                .get(pos..pos + n * SCALAR_WIDTH)
                .ok_or_else(|| fmt_err(bytes.len(), format!("truncated payload in {name}")))?;
            let data = chunk
                .chunks_exact(SCALAR_WIDTH)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| fmt_err(pos, e.to_string()))?;
            params.insert(name, t).map_err(|e| fmt_err(pos, e.to_string()))?;
            pos += n * SCALAR_WIDTH;
        }
        if pos != bytes.len() {
            return Err(fmt_err(pos, "trailing bytes after payload"));
        }
        Ok(Checkpoint { net, extractor_seed, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
