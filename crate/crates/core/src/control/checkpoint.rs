//! Parameter checkpoints.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `DIFFDYN\0` |
//! | 4 | `u32` format version (1) |
//! | 8 | `u64` initialization seed |
//! | 8 | `u64` parameter count `n` |
//! | 4 | `u32` number of layer sizes `L` |
//! | 4·L | `u32` layer sizes |
//! | 1 | `u8` skip-input-to-output flag |
//! | L−1 | `u8` activation codes (0 rectifier, 1 identity) |
//! | 8·n | `f64` parameters |
//!
//! A plain-text descriptor with the same header fields is written next to
//! the binary file with a `.txt` extension.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{param_count, Activation, ControllerSpec};

pub const MAGIC: &[u8; 8] = b"DIFFDYN\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ControllerSpec,
    pub seed: u64,
    pub params: Vec<f64>,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.spec.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.spec.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.push(self.spec.skip_input_to_output as u8);
        out.extend(self.spec.activations.iter().map(|a| a.code()));
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn decode(mut bytes: &[u8]) -> io::Result<Self> {
        let mut take = |n: usize| -> io::Result<Vec<u8>> {
            let mut buf = vec![0; n];
            bytes.read_exact(&mut buf)?;
            Ok(buf)
        };
        if take(8)? != MAGIC {
            return Err(invalid("not a checkpoint file"));
        }
        let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().unwrap());
        let u64_at = |b: Vec<u8>| u64::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(invalid(format!("unsupported checkpoint version {version}")));
        }
        let seed = u64_at(take(8)?);
        let count = u64_at(take(8)?) as usize;
        let layers = u32_at(take(4)?) as usize;
        if layers < 2 {
            return Err(invalid("checkpoint has fewer than two layers"));
        }
        let layer_sizes = (0..layers)
            .map(|_| take(4).map(|b| u32_at(b) as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let skip = take(1)?[0] != 0;
        let activations = take(layers - 1)?
            .into_iter()
            .map(|c| Activation::from_code(c).ok_or_else(|| invalid(format!("bad activation code {c}"))))
            .collect::<io::Result<Vec<_>>>()?;
        let spec = ControllerSpec {
            layer_sizes,
            activations,
            skip_input_to_output: skip,
        };
        if param_count(&spec) != count {
            return Err(invalid("parameter count does not match layout"));
        }
        let raw = take(8 * count)?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { spec, seed, params })
    }

    pub fn descriptor(&self) -> String {
        let sizes: Vec<String> = self.spec.layer_sizes.iter().map(|s| s.to_string()).collect();
        let acts: Vec<&str> = self
            .spec
            .activations
            .iter()
            .map(|a| match a {
                Activation::Rectifier => "rectifier",
                Activation::Identity => "identity",
            })
            .collect();
        format!(
            "format=diffdyn-checkpoint\nversion={VERSION}\nseed={}\ncount={}\nlayer_sizes={}\nactivations={}\nskip_input_to_output={}\n",
            self.seed,
            self.params.len(),
            sizes.join(","),
            acts.join(","),
            self.spec.skip_input_to_output
        )
    }

    /// Writes the binary file and its `.txt` descriptor.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        fs::write(path.with_extension("txt"), self.descriptor())
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::init_params;

    #[test]
    fn round_trip() {
        let spec = ControllerSpec::mlp(2, &[5, 4], 3, true);
        let ck = Checkpoint {
            params: init_params(&spec, 11),
            spec,
            seed: 11,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctrl.bin");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let txt = fs::read_to_string(dir.path().join("ctrl.txt")).unwrap();
        assert!(txt.contains("layer_sizes=2,5,4,3"));
        assert!(txt.contains("count=60"));
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::decode(b"nope").is_err());
        let mut bytes = Checkpoint {
            spec: ControllerSpec::mlp(1, &[], 1, false),
            seed: 0,
            params: vec![0.0, 0.0],
        }
        .encode();
        bytes.truncate(bytes.len() - 1);
        assert!(Checkpoint::decode(&bytes).is_err());
    }
}
