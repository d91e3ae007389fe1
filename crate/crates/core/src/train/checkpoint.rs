//! Checkpoint layout (little-endian):
//!
//! ```text
//! u64 graph text length, graph text
//! per array: u32 name length, name, u64 count, count × f32
//! u64 FNV-1a 64 of all preceding bytes
//! ```
//!
//! Batchnorm running statistics are stored as `<bn>.running_mean` and
//! `<bn>.running_var`. Loaded arrays are trainable.

use std::path::Path;

use super::params::{fnv1a64, ParamStore};
use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::ops::RunningStats;

const MEAN: &str = ".running_mean";
const VAR: &str = ".running_var";

pub fn checkpoint_bytes(graph: &GraphSpec, store: &ParamStore<f32>) -> Vec<u8> {
    let text = graph.serialize();
    let mut out = Vec::new();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let mut record = |name: &str, values: &[f32]| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, values) in store.arrays() {
        record(name, values);
    }
    for (bn, st) in store.running_stats() {
        record(&format!("{bn}{MEAN}"), &st.mean);
        record(&format!("{bn}{VAR}"), &st.var);
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(GraphSpec, ParamStore<f32>)> {
    if bytes.len() < 16 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a64(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(Error::Checksum("checkpoint".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Format("graph text is not UTF-8".into()))?;
    let graph = GraphSpec::parse(text)?;
    let mut store = ParamStore::new();
    let mut means = Vec::new();
    let mut vars = std::collections::BTreeMap::new();
    while r.pos < body.len() {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?
            .to_string();
        let count = r.u64()? as usize;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("bad count".into()))?)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(bn) = name.strip_suffix(MEAN) {
            means.push((bn.to_string(), values));
        } else if let Some(bn) = name.strip_suffix(VAR) {
            vars.insert(bn.to_string(), values);
        } else {
            store.insert(name, values, true);
        }
    }
    for (bn, mean) in means {
        let var = vars
            .remove(&bn)
            .ok_or_else(|| Error::Format(format!("`{bn}` has a running mean but no variance")))?;
        store.set_running(bn, RunningStats { mean, var });
    }
    Ok((graph, store))
}

pub fn save_checkpoint(path: &Path, graph: &GraphSpec, store: &ParamStore<f32>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(graph, store))
        .map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(GraphSpec, ParamStore<f32>)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    parse_checkpoint(&bytes).map_err(|e| e.context(path.display().to_string()))
}
