//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"MOERLCK1"
//! u32    version
//! u64    arch descriptor length, then that many bytes of JSON
//! u64    parameter count, then per parameter:
//!          u32 name length, name bytes (UTF-8),
//!          u32 rank, rank × u64 dims, numel × f64
//! u64    top-agent capacity
//! u64    top-agent count, then per entry:
//!          f64 reward, u64 length, length × f64 weights
//! ```
//!
//! Parameters are the online networks under their visiting names followed by
//! the target critics under `target1.*` and `target2.*`. Top-agent weights use
//! the flattening order of the online networks.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::{Agent, AgentConfig};
use super::train::perturb_layout;
use crate::autodiff::{Module, Tensor};
use crate::envs::ObsShape;
use crate::error::{Error, Result};
use crate::perturb::{TopAgent, TopAgentBuffer, WeightVector};

pub const MAGIC: &[u8; 8] = b"MOERLCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub agent: AgentConfig,
    pub obs_shape: ObsShape,
    pub action_dim: usize,
    /// Environment the agent was trained on, as a spec string.
    pub env: String,
}

fn named_params(agent: &Agent) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    agent.nets.visit("", &mut |n, t| out.push((n.to_string(), t.clone())));
    agent.target1.visit("target1", &mut |n, t| out.push((n.to_string(), t.clone())));
    agent.target2.visit("target2", &mut |n, t| out.push((n.to_string(), t.clone())));
    out
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint ({e})")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| Ok(f64::from_le_bytes(get(r)?))).collect()
}

/// Guards allocations driven by untrusted length fields.
fn bounded(n: u64, what: &str) -> Result<usize> {
    const LIMIT: u64 = 1 << 32;
    if n > LIMIT {
        return Err(Error::Format(format!("{what} {n} exceeds limit")));
    }
    Ok(n as usize)
}

pub fn write_checkpoint(path: &Path, agent: &Agent, top: &TopAgentBuffer, env: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, agent, top, env)?;
    w.flush()?;
    Ok(())
}

pub fn write_to(w: &mut impl Write, agent: &Agent, top: &TopAgentBuffer, env: &str) -> Result<()> {
    let arch = ArchDescriptor {
        agent: agent.cfg.clone(),
        obs_shape: agent.obs_shape(),
        action_dim: agent.action_dim(),
        env: env.to_string(),
    };
    let arch = serde_json::to_vec(&arch)?;
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u64(w, arch.len() as u64)?;
    w.write_all(&arch)?;
    let params = named_params(agent);
    put_u64(w, params.len() as u64)?;
    for (name, t) in &params {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            put_u64(w, d as u64)?;
        }
        put_f64s(w, t.data())?;
    }
    put_u64(w, top.capacity() as u64)?;
    put_u64(w, top.len() as u64)?;
    for e in top.entries() {
        w.write_all(&e.reward.to_le_bytes())?;
        put_u64(w, e.weights.len() as u64)?;
        put_f64s(w, e.weights.data())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub agent: Agent,
    pub top_agents: TopAgentBuffer,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
    let magic: [u8; 8] = get(r)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = bounded(get_u64(r)?, "descriptor length")?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated descriptor ({e})")))?;
    let arch: ArchDescriptor =
        serde_json::from_slice(&buf).map_err(|e| Error::Format(format!("descriptor: {e}")))?;

    let count = bounded(get_u64(r)?, "parameter count")?;
    let mut stored = BTreeMap::new();
    for _ in 0..count {
        let len = bounded(get_u32(r)? as u64, "name length")?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Format(format!("truncated name ({e})")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = bounded(get_u32(r)? as u64, "rank")?;
        let shape = (0..rank).map(|_| bounded(get_u64(r)?, "dim")).collect::<Result<Vec<_>>>()?;
        let numel = bounded(shape.iter().map(|&d| d as u64).product(), "numel")?;
        let data = get_f64s(r, numel)?;
        stored.insert(name, (shape, data));
    }

    // Initial values are irrelevant: every parameter is overwritten below.
    let mut agent = Agent::new(arch.agent.clone(), arch.obs_shape, arch.action_dim, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut missing = Vec::new();
    let mut fill = |name: &str, t: &mut Tensor| match stored.remove(name) {
        Some((shape, data)) if shape == t.shape() => t.data_mut().copy_from_slice(&data),
        _ => missing.push(name.to_string()),
    };
    agent.nets.visit_mut("", &mut fill);
    agent.target1.visit_mut("target1", &mut fill);
    agent.target2.visit_mut("target2", &mut fill);
    if !missing.is_empty() || !stored.is_empty() {
        return Err(Error::Format(format!(
            "parameters do not match the descriptor (missing or misshapen: {missing:?}, unexpected: {:?})",
            stored.keys().collect::<Vec<_>>()
        )));
    }

    let capacity = bounded(get_u64(r)?, "top-agent capacity")?;
    let n_top = bounded(get_u64(r)?, "top-agent count")?;
    let layout = perturb_layout(&agent);
    let mut entries = Vec::with_capacity(n_top.min(1024));
    for _ in 0..n_top {
        let reward = f64::from_le_bytes(get(r)?);
        let len = bounded(get_u64(r)?, "weight length")?;
        if len != layout.total() {
            return Err(Error::Format(format!("stored agent has {len} weights, expected {}", layout.total())));
        }
        let data = get_f64s(r, len)?;
        entries.push(TopAgent { weights: WeightVector::new(layout.clone(), data)?, reward });
    }
    let top_agents = TopAgentBuffer::restore(capacity, entries)?;
    Ok(Checkpoint { arch, agent, top_agents })
}
