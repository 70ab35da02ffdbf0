//! Routing traces and the pairwise-agreement consistency metrics.
//!
//! For a set of `m` routing choices the agreement rate is the fraction of
//! the `m(m−1)/2` unordered pairs that picked the same view. Means over
//! groups are taken as total agreeing pairs over total pairs, which equals
//! the mean of per-group rates because every group has the same size.

use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TRACE_MAGIC: &[u8; 4] = b"RTRC";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub shape_id: String,
    pub view_count: usize,
    pub seed: u64,
    pub checkpoint: String,
}

/// Hard view indices over `(timestep, block, token)`, stored densely.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingTrace {
    pub timesteps: usize,
    pub blocks: usize,
    pub tokens: usize,
    pub views: usize,
    indices: Vec<u16>,
}

impl RoutingTrace {
    pub fn new(timesteps: usize, blocks: usize, tokens: usize, views: usize, indices: Vec<u16>) -> Result<Self> {
        if indices.len() != timesteps * blocks * tokens {
            return Err(Error::shape(format!(
                "{} indices for {timesteps}×{blocks}×{tokens}",
                indices.len()
            )));
        }
        if views == 0 || views > u16::MAX as usize + 1 {
            return Err(Error::invalid(format!("trace view count {views}")));
        }
        if let Some(&bad) = indices.iter().find(|&&v| v as usize >= views) {
            return Err(Error::invalid(format!("trace index {bad} ≥ {views} views")));
        }
        Ok(Self {
            timesteps,
            blocks,
            tokens,
            views,
            indices,
        })
    }

    /// From sampler output indexed `[step][block][token]`.
    pub fn from_routing(routing: &[Vec<Vec<usize>>], views: usize) -> Result<Self> {
        let t = routing.len();
        let l = routing.first().map_or(0, Vec::len);
        let n = routing.first().and_then(|b| b.first()).map_or(0, Vec::len);
        let mut indices = Vec::with_capacity(t * l * n);
        for step in routing {
            if step.len() != l {
                return Err(Error::shape("ragged routing record"));
            }
            for block in step {
                if block.len() != n {
                    return Err(Error::shape("ragged routing record"));
                }
                indices.extend(block.iter().map(|&v| v as u16));
            }
        }
        Self::new(t, l, n, views, indices)
    }

    pub fn get(&self, t: usize, l: usize, i: usize) -> usize {
        self.indices[(t * self.blocks + l) * self.tokens + i] as usize
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The trace restricted to `steps`.
    pub fn steps(&self, steps: Range<usize>) -> Result<Self> {
        if steps.end > self.timesteps || steps.start > steps.end {
            return Err(Error::invalid(format!("step range {steps:?} of {}", self.timesteps)));
        }
        let per = self.blocks * self.tokens;
        let indices = self.indices[steps.start * per..steps.end * per].to_vec();
        Self::new(steps.len(), self.blocks, self.tokens, self.views, indices)
    }

    /// `"RTRC" | T u32 | L u32 | N u32 | V u32 | u16 × T·L·N`, little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TRACE_MAGIC)?;
        for x in [self.timesteps, self.blocks, self.tokens, self.views] {
            w.write_all(&(x as u32).to_le_bytes())?;
        }
        for &v in &self.indices {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TRACE_MAGIC {
            return Err(Error::Format("not a routing trace".into()));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let count = dims[0] * dims[1] * dims[2];
        let mut bytes = vec![0u8; count * 2];
        r.read_exact(&mut bytes)?;
        let indices = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Self::new(dims[0], dims[1], dims[2], dims[3], indices)
    }
}

/// Agreeing unordered pairs among `choices`, via per-view counts.
pub fn agreeing_pairs(choices: impl IntoIterator<Item = usize>, views: usize) -> u64 {
    let mut counts = vec![0u64; views];
    for c in choices {
        counts[c] += 1;
    }
    counts.iter().map(|&k| k * k.saturating_sub(1) / 2).sum()
}

fn pairs(m: usize) -> u64 {
    (m as u64) * (m as u64).saturating_sub(1) / 2
}

/// Agreement over block pairs per `(timestep, token)`; needs `L ≥ 2`.
pub fn cross_block_consistency(trace: &RoutingTrace) -> Option<f64> {
    if trace.blocks < 2 || trace.timesteps == 0 || trace.tokens == 0 {
        return None;
    }
    let mut agree = 0u64;
    for t in 0..trace.timesteps {
        for i in 0..trace.tokens {
            agree += agreeing_pairs((0..trace.blocks).map(|l| trace.get(t, l, i)), trace.views);
        }
    }
    let total = pairs(trace.blocks) * (trace.timesteps * trace.tokens) as u64;
    Some(agree as f64 / total as f64)
}

/// Agreement over timestep pairs per `(block, token)`; needs `T ≥ 2`.
pub fn cross_timestep_consistency(trace: &RoutingTrace) -> Option<f64> {
    if trace.timesteps < 2 || trace.blocks == 0 || trace.tokens == 0 {
        return None;
    }
    let mut agree = 0u64;
    for l in 0..trace.blocks {
        for i in 0..trace.tokens {
            agree += agreeing_pairs((0..trace.timesteps).map(|t| trace.get(t, l, i)), trace.views);
        }
    }
    let total = pairs(trace.timesteps) * (trace.blocks * trace.tokens) as u64;
    Some(agree as f64 / total as f64)
}

/// Agreement over all `(timestep, block)` pairs per token; needs `T·L ≥ 2`.
pub fn global_consistency(trace: &RoutingTrace) -> Option<f64> {
    let slots = trace.timesteps * trace.blocks;
    if slots < 2 || trace.tokens == 0 {
        return None;
    }
    let mut agree = 0u64;
    for i in 0..trace.tokens {
        let choices = (0..trace.timesteps).flat_map(|t| (0..trace.blocks).map(move |l| (t, l)));
        agree += agreeing_pairs(choices.map(|(t, l)| trace.get(t, l, i)), trace.views);
    }
    let total = pairs(slots) * trace.tokens as u64;
    Some(agree as f64 / total as f64)
}

/// Mean and spread of one metric across sampled traces, plus the value over
/// the early / mid / late thirds of the denoising trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyStat {
    pub mean: Option<f64>,
    /// Population standard deviation across traces.
    pub std: Option<f64>,
    pub early: Option<f64>,
    pub mid: Option<f64>,
    pub late: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub traces: usize,
    pub cross_block: ConsistencyStat,
    pub cross_timestep: ConsistencyStat,
    pub global: ConsistencyStat,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (Some(m), Some(var.sqrt()))
}

/// Timestep ranges of the three thirds.
pub fn thirds(t: usize) -> [Range<usize>; 3] {
    [0..t / 3, t / 3..2 * t / 3, 2 * t / 3..t]
}

fn stat(traces: &[RoutingTrace], metric: fn(&RoutingTrace) -> Option<f64>) -> ConsistencyStat {
    let per: Vec<f64> = traces.iter().filter_map(metric).collect();
    let (mean, std) = mean_std(&per);
    let part = |k: usize| -> Option<f64> {
        let vals: Vec<f64> = traces
            .iter()
            .filter_map(|tr| tr.steps(thirds(tr.timesteps)[k].clone()).ok())
            .filter_map(|tr| metric(&tr))
            .collect();
        mean_std(&vals).0
    };
    ConsistencyStat {
        mean,
        std,
        early: part(0),
        mid: part(1),
        late: part(2),
    }
}

pub fn consistency_report(traces: &[RoutingTrace]) -> ConsistencyReport {
    ConsistencyReport {
        traces: traces.len(),
        cross_block: stat(traces, cross_block_consistency),
        cross_timestep: stat(traces, cross_timestep_consistency),
        global: stat(traces, global_consistency),
    }
}
