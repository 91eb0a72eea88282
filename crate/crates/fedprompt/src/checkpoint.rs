//! Checkpoint persistence.
//!
//! Layout: magic `FDCK` | version u32 | round u32 | config length u64 |
//! config TOML bytes | parameter blocks. Each block is a u64 element count
//! followed by little-endian `f64`s (the same encoding as round-update
//! traffic), in this fixed order:
//!
//! 1. semantic frame prototypes
//! 2. domain frame prototypes (only when the run has >= 2 domains)
//! 3. image encoder weight, bias
//! 4. text encoder w1, b1, w2, b2
//! 5. class text token table
//! 6. server semantic prompt
//! 7. server semantic net w1, b1, w2, b2
//! 8. server domain net w1, b1, w2, b2
//! 9. per client ascending: local semantic prompt, domain prompt,
//!    semantic net (4), domain net (4)
//!
//! Loading rebuilds the simulation from the embedded config (data, frames,
//! encoders are pure functions of it), verifies the stored frozen artifacts
//! against the rebuilt ones, and installs the stored mutable parameters.
//! Because every RNG stream is derived from (seed, round, client), a resumed
//! run continues bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::{ConfigError, ExperimentConfig};
use crate::federation::{read_block, write_block, Simulation};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"FDCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes, expected \"FDCK\"")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint malformed: {0}")]
    Malformed(String),
    #[error("stored frozen artifacts disagree with the config-rebuilt ones: {0}")]
    FrozenMismatch(&'static str),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("failed to rebuild simulation from embedded config: {0}")]
    Rebuild(Box<crate::Error>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serializes a full simulation snapshot.
pub fn to_bytes(sim: &Simulation) -> Result<Vec<u8>, CheckpointError> {
    let config_text = sim.config.to_toml()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&sim.server.round.to_le_bytes());
    buf.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());

    write_block(&mut buf, sim.frozen.semantic_frame.matrix().data());
    if let Some(frame) = &sim.frozen.domain_frame {
        write_block(&mut buf, frame.matrix().data());
    }
    for t in sim.frozen.image_encoder.weight_tensors() {
        write_block(&mut buf, t.data());
    }
    for t in sim.frozen.text_encoder.weight_tensors() {
        write_block(&mut buf, t.data());
    }
    write_block(&mut buf, sim.frozen.text_table.tokens().data());

    write_block(&mut buf, sim.server.semantic_prompt.tokens().data());
    for t in sim.server.semantic_transform.weight_tensors() {
        write_block(&mut buf, t.data());
    }
    for t in sim.server.domain_transform.weight_tensors() {
        write_block(&mut buf, t.data());
    }

    for client in &sim.clients {
        write_block(&mut buf, client.semantic_prompt.tokens().data());
        write_block(&mut buf, client.domain_prompt.tokens().data());
        for t in client.semantic_transform.weight_tensors() {
            write_block(&mut buf, t.data());
        }
        for t in client.domain_transform.weight_tensors() {
            write_block(&mut buf, t.data());
        }
    }
    Ok(buf)
}

/// Restores a simulation snapshot.
pub fn from_bytes(bytes: &[u8]) -> Result<Simulation, CheckpointError> {
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut pos = 4;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Malformed("truncated header".to_string()));
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let round = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let config_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let config_text = std::str::from_utf8(take(&mut pos, config_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("config not UTF-8: {e}")))?;
    let config = ExperimentConfig::parse(config_text)?;

    let mut sim =
        Simulation::from_config(&config).map_err(|e| CheckpointError::Rebuild(Box::new(e)))?;

    let read = |shape: &[usize], pos: &mut usize| -> Result<Tensor, CheckpointError> {
        read_block(bytes, pos, shape).map_err(CheckpointError::Malformed)
    };

    // Frozen artifacts: stored copies must equal the config-rebuilt ones.
    let stored = read(sim.frozen.semantic_frame.matrix().shape(), &mut pos)?;
    if &stored != sim.frozen.semantic_frame.matrix() {
        return Err(CheckpointError::FrozenMismatch("semantic frame"));
    }
    if let Some(frame) = &sim.frozen.domain_frame {
        let stored = read(frame.matrix().shape(), &mut pos)?;
        if &stored != frame.matrix() {
            return Err(CheckpointError::FrozenMismatch("domain frame"));
        }
    }
    for t in sim.frozen.image_encoder.weight_tensors() {
        if read(t.shape(), &mut pos)? != *t {
            return Err(CheckpointError::FrozenMismatch("image encoder"));
        }
    }
    for t in sim.frozen.text_encoder.weight_tensors() {
        if read(t.shape(), &mut pos)? != *t {
            return Err(CheckpointError::FrozenMismatch("text encoder"));
        }
    }
    {
        let t = sim.frozen.text_table.tokens();
        if read(t.shape(), &mut pos)? != *t {
            return Err(CheckpointError::FrozenMismatch("text token table"));
        }
    }

    // Mutable state: install stored values.
    let prompt_shape = sim.server.semantic_prompt.tokens().shape().to_vec();
    let stored = read(&prompt_shape, &mut pos)?;
    sim.server
        .semantic_prompt
        .set_tokens(stored)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    for slot in sim.server.semantic_transform.weight_tensors_mut() {
        *slot = read(slot.shape(), &mut pos)?;
    }
    for slot in sim.server.domain_transform.weight_tensors_mut() {
        *slot = read(slot.shape(), &mut pos)?;
    }

    for client in sim.clients.iter_mut() {
        let stored = read(&prompt_shape, &mut pos)?;
        client
            .semantic_prompt
            .set_tokens(stored)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let stored = read(&prompt_shape, &mut pos)?;
        client
            .domain_prompt
            .set_tokens(stored)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        for slot in client.semantic_transform.weight_tensors_mut() {
            *slot = read(slot.shape(), &mut pos)?;
        }
        for slot in client.domain_transform.weight_tensors_mut() {
            *slot = read(slot.shape(), &mut pos)?;
        }
    }
    if pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - pos
        )));
    }
    sim.server.round = round;
    Ok(sim)
}

pub fn save(sim: &Simulation, path: &Path) -> Result<(), CheckpointError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&to_bytes(sim)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Simulation, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            classes: 3,
            domains: 2,
            prompt_tokens: 2,
            token_dim: 8,
            embed_dim: 8,
            etf_dim: 8,
            text_tokens: 2,
            rounds: 2,
            batch_size: 16,
            samples_per_class: 8,
            raw_dim: 12,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn snapshot_roundtrip_is_bit_exact() {
        let mut sim = Simulation::from_config(&tiny_config()).unwrap();
        sim.run_round().unwrap();
        let bytes = to_bytes(&sim).unwrap();
        let restored = from_bytes(&bytes).unwrap();
        assert_eq!(restored.server.round, sim.server.round);
        assert_eq!(
            restored.server.semantic_prompt.tokens(),
            sim.server.semantic_prompt.tokens()
        );
        for (a, b) in restored.clients.iter().zip(&sim.clients) {
            assert_eq!(a.domain_prompt.tokens(), b.domain_prompt.tokens());
            assert_eq!(
                a.semantic_transform.fingerprint(),
                b.semantic_transform.fingerprint()
            );
        }
        // and the re-serialization is byte-identical
        assert_eq!(to_bytes(&restored).unwrap(), bytes);
    }

    #[test]
    fn resume_continues_bit_exactly() {
        let cfg = ExperimentConfig {
            rounds: 4,
            ..tiny_config()
        };
        let mut straight = Simulation::from_config(&cfg).unwrap();
        for _ in 0..4 {
            straight.run_round().unwrap();
        }

        let mut first_half = Simulation::from_config(&cfg).unwrap();
        first_half.run_round().unwrap();
        first_half.run_round().unwrap();
        let bytes = to_bytes(&first_half).unwrap();
        let mut resumed = from_bytes(&bytes).unwrap();
        resumed.run_round().unwrap();
        resumed.run_round().unwrap();

        assert_eq!(
            resumed.server.semantic_prompt.tokens(),
            straight.server.semantic_prompt.tokens()
        );
        for (a, b) in resumed.clients.iter().zip(&straight.clients) {
            assert_eq!(a.domain_prompt.tokens(), b.domain_prompt.tokens());
            assert_eq!(a.semantic_prompt.tokens(), b.semantic_prompt.tokens());
            assert_eq!(
                a.domain_transform.fingerprint(),
                b.domain_transform.fingerprint()
            );
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let sim = Simulation::from_config(&tiny_config()).unwrap();
        let mut bytes = to_bytes(&sim).unwrap();
        bytes[0] = b'Z';
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncation_rejected() {
        let sim = Simulation::from_config(&tiny_config()).unwrap();
        let bytes = to_bytes(&sim).unwrap();
        let cut = &bytes[..bytes.len() - 9];
        assert!(from_bytes(cut).is_err());
    }

    #[test]
    fn tampered_frozen_block_rejected() {
        let sim = Simulation::from_config(&tiny_config()).unwrap();
        let mut bytes = to_bytes(&sim).unwrap();
        // flip one bit inside the first frame block (past header + config)
        let config_len = sim.config.to_toml().unwrap().len();
        let offset = 4 + 4 + 4 + 8 + config_len + 8 + 3;
        bytes[offset] ^= 1;
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::FrozenMismatch(_))
        ));
    }
}
