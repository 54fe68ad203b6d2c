//! Checkpoint files: a versioned header, the resolved run configuration and the
//! encoded trainer state.

use std::path::Path;

use sdm_core::codec::{DecodeError, Reader, Writer};
use sdm_core::sac::AgentState;
use sdm_core::train::decode_agents;
use sha2::{Digest, Sha256};

const MAGIC: [u8; 4] = *b"SDMC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `pretrain` or a training mode name.
    pub kind: String,
    /// Identifies the game a checkpoint came from; equal ids mean same run.
    pub run_id: String,
    pub seed: u64,
    /// Total environment steps, pretraining included.
    pub total_steps: u64,
    /// Environment steps already taken before this phase started.
    pub step_offset: u64,
    pub config: String,
    pub state: Vec<u8>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: not a readable checkpoint ({source})")]
    Decode { path: String, source: DecodeError },
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.kind);
        w.str(&self.run_id);
        w.u64(self.seed);
        w.u64(self.total_steps);
        w.u64(self.step_offset);
        w.str(&self.config);
        w.usize(self.state.len());
        w.bytes(&self.state);
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let kind = r.str("kind")?;
        let run_id = r.str("run id")?;
        let seed = r.u64("seed")?;
        let total_steps = r.u64("total steps")?;
        let step_offset = r.u64("step offset")?;
        let config = r.str("config")?;
        let n = r.usize("state length")?;
        let state = r.take(n, "state")?.to_vec();
        r.finish()?;
        Ok(Self { kind, run_id, seed, total_steps, step_offset, config, state })
    }

    pub fn agents(&self) -> Result<(AgentState, Option<AgentState>), DecodeError> {
        decode_agents(&self.state)
    }

    pub fn save(&self, path: &Path) -> Result<String, CheckpointError> {
        let bytes = self.encode();
        std::fs::write(path, &bytes).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Ok(digest(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::decode(&bytes).map_err(|source| CheckpointError::Decode { path: path.display().to_string(), source })
    }
}

/// Hex SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_name(total_steps: u64) -> String {
    format!("checkpoint-{total_steps}.sdm")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let c = Checkpoint {
            kind: "sdm".into(),
            run_id: "abc".into(),
            seed: 3,
            total_steps: 25_000,
            step_offset: 20_000,
            config: "beta = 0.2\n".into(),
            state: vec![1, 2, 3],
        };
        let bytes = c.encode();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 99;
        assert!(matches!(Checkpoint::decode(&bad), Err(DecodeError::Version { .. })));
        assert_eq!(digest(b"").len(), 64);
    }
}
