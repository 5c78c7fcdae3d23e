//! Checkpoint persistence: the parameter PLY plus a binary sidecar holding
//! optimizer moments, step counters, and the training-stream position.
//! Sidecar format: magic "GOPT", version u32, then a length-prefixed
//! little-endian payload of raw f64 bits (bitwise round trip).

use std::fs;
use std::path::{Path, PathBuf};

use grendel_core::adam::AdamState;
use grendel_core::cloud::{CloudGrads, GaussianCloud, SH_PER_GAUSSIAN};

use crate::error::EngineError;
use crate::io::ply;

const MAGIC: &[u8; 4] = b"GOPT";
const VERSION: u32 = 1;

/// A resumable training snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cloud: GaussianCloud,
    pub adam: AdamState,
    pub iteration: u64,
    pub images_seen: u64,
    pub seed: u64,
}

/// Sidecar path for a checkpoint PLY: same stem, extension `gopt`.
pub fn sidecar_path(ply_path: &Path) -> PathBuf {
    ply_path.with_extension("gopt")
}

pub fn save_checkpoint(
    ckpt: &Checkpoint,
    sh_degree: usize,
    ply_path: &Path,
) -> Result<(), EngineError> {
    ply::write_checkpoint_cloud(&ckpt.cloud, sh_degree, ply_path)?;
    let mut payload = Vec::new();
    push_u64(&mut payload, ckpt.iteration);
    push_u64(&mut payload, ckpt.images_seen);
    push_u64(&mut payload, ckpt.seed);
    push_u64(&mut payload, ckpt.cloud.len() as u64);
    for s in ckpt.adam.steps {
        push_u64(&mut payload, s);
    }
    for moments in [&ckpt.adam.exp_avg, &ckpt.adam.exp_avg_sq] {
        push_grads(&mut payload, moments);
    }
    let mut bytes = Vec::with_capacity(payload.len() + 16);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&payload);
    let side = sidecar_path(ply_path);
    fs::write(&side, bytes).map_err(|e| EngineError::io(&side, e))
}

pub fn load_checkpoint(ply_path: &Path, sh_degree: usize) -> Result<Checkpoint, EngineError> {
    let cloud = ply::read_checkpoint_cloud(ply_path, sh_degree)?;
    let side = sidecar_path(ply_path);
    let bytes = fs::read(&side).map_err(|e| EngineError::io(&side, e))?;
    let bad = |msg: &str| EngineError::Checkpoint(format!("{}: {msg}", side.display()));
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(bad("missing GOPT magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + len {
        return Err(bad("truncated payload"));
    }
    let mut cur = Cursor {
        bytes: &bytes[16..16 + len],
        pos: 0,
    };
    let iteration = cur.u64().ok_or_else(|| bad("short read"))?;
    let images_seen = cur.u64().ok_or_else(|| bad("short read"))?;
    let seed = cur.u64().ok_or_else(|| bad("short read"))?;
    let count = cur.u64().ok_or_else(|| bad("short read"))? as usize;
    if count != cloud.len() {
        return Err(bad(&format!(
            "optimizer rows {count} do not match {} gaussians",
            cloud.len()
        )));
    }
    let mut adam = AdamState::zeros(count);
    for s in &mut adam.steps {
        *s = cur.u64().ok_or_else(|| bad("short read"))?;
    }
    for moments in [&mut adam.exp_avg, &mut adam.exp_avg_sq] {
        read_grads(&mut cur, moments).ok_or_else(|| bad("short moment read"))?;
    }
    Ok(Checkpoint {
        cloud,
        adam,
        iteration,
        images_seen,
        seed,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u64(&mut self) -> Option<u64> {
        let v = self.bytes.get(self.pos..self.pos + 8)?;
        self.pos += 8;
        Some(u64::from_le_bytes(v.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.u64().map(f64::from_bits)
    }
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn push_grads(out: &mut Vec<u8>, g: &CloudGrads) {
    for i in 0..g.len() {
        for a in 0..3 {
            push_f64(out, g.positions[i][a]);
        }
        for a in 0..3 {
            push_f64(out, g.log_scales[i][a]);
        }
        for a in 0..4 {
            push_f64(out, g.rotations[i][a]);
        }
        push_f64(out, g.opacity_logits[i]);
        for a in 0..SH_PER_GAUSSIAN {
            push_f64(out, g.sh_coeffs[i][a]);
        }
    }
}

fn read_grads(cur: &mut Cursor, g: &mut CloudGrads) -> Option<()> {
    for i in 0..g.len() {
        for a in 0..3 {
            g.positions[i][a] = cur.f64()?;
        }
        for a in 0..3 {
            g.log_scales[i][a] = cur.f64()?;
        }
        for a in 0..4 {
            g.rotations[i][a] = cur.f64()?;
        }
        g.opacity_logits[i] = cur.f64()?;
        for a in 0..SH_PER_GAUSSIAN {
            g.sh_coeffs[i][a] = cur.f64()?;
        }
    }
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let n = 40;
        let mut cloud = GaussianCloud::default();
        let mut adam = AdamState::zeros(n);
        for i in 0..n {
            cloud.positions.push(std::array::from_fn(|_| rng.random_range(-3.0..3.0)));
            cloud.log_scales.push(std::array::from_fn(|_| rng.random_range(-4.0..0.0)));
            cloud.rotations.push(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            cloud.opacity_logits.push(rng.random_range(-3.0..3.0));
            cloud.sh_coeffs.push(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            adam.exp_avg.positions[i] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            adam.exp_avg_sq.sh_coeffs[i] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        }
        adam.steps = [9, 9, 9, 9, 9, 9];
        let ckpt = Checkpoint {
            cloud,
            adam,
            iteration: 123,
            images_seen: 456,
            seed: 7,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.ply");
        save_checkpoint(&ckpt, 3, &path).unwrap();
        let back = load_checkpoint(&path, 3).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.ply");
        let ckpt = Checkpoint {
            cloud: GaussianCloud::default(),
            adam: AdamState::zeros(0),
            iteration: 0,
            images_seen: 0,
            seed: 0,
        };
        save_checkpoint(&ckpt, 3, &path).unwrap();
        let side = sidecar_path(&path);
        let mut bytes = std::fs::read(&side).unwrap();
        bytes[0] = b'X';
        std::fs::write(&side, bytes).unwrap();
        assert!(load_checkpoint(&path, 3).is_err());
    }
}
