//! VXCK checkpoint files.
//!
//! Layout: magic `VXCK`, LE u32 version = 1, LE u32 tensor count, then per
//! tensor: LE u16 name length, UTF-8 name, u8 rank, rank LE u32 dims, data
//! as LE f64. An optional trailing block with magic `ADAM` holds the
//! optimizer state: LE u64 timestep, LE u32 tensor count, then per
//! parameter the first-moment tensor and the second-moment tensor in the
//! same framing. Tensor order matches ParamSet iteration order, which makes
//! round trips bit-exact.

use std::fs;
use std::io::Read;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Result, VxError};
use crate::optim::{AdamHyper, AdamState};
use crate::tensor::{ParamSet, Tensor};
use crate::volume::write_atomic;

const CKPT_MAGIC: &[u8; 4] = b"VXCK";
const ADAM_MAGIC: &[u8; 4] = b"ADAM";
const VERSION: u32 = 1;

fn frame_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| VxError::Format(format!("name `{name}` too long")))?;
    buf.extend_from_slice(&name_len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    let rank =
        u8::try_from(shape.len()).map_err(|_| VxError::Format("rank exceeds u8".into()))?;
    buf.push(rank);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| VxError::Format("extent exceeds u32".into()))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(VxError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name_len = self.u16()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| VxError::Format("parameter name is not UTF-8".into()))?;
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((name, shape, data))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Serializes parameters (and optionally optimizer state) to `path`,
/// writing through a temp file so partial checkpoints are never observed.
pub fn save_checkpoint(path: &Path, params: &ParamSet, adam: Option<&AdamState>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len())
        .map_err(|_| VxError::Format("too many tensors".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        frame_tensor(&mut buf, name, t.shape(), t.data())?;
    }
    if let Some(state) = adam {
        let (t, entries) = state.raw_parts();
        buf.extend_from_slice(ADAM_MAGIC);
        buf.extend_from_slice(&t.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, m) in entries {
            let param = params
                .get(name)
                .ok_or_else(|| VxError::UnknownParameter(name.clone()))?;
            frame_tensor(&mut buf, name, param.shape(), &m.m)?;
            frame_tensor(&mut buf, name, param.shape(), &m.v)?;
        }
    }
    write_atomic(path, &buf)
}

/// Loads a checkpoint. Optimizer moments, when present, are rebuilt under
/// the supplied hyperparameters.
pub fn load_checkpoint(
    path: &Path,
    hyper: AdamHyper,
) -> Result<(ParamSet, Option<AdamState>)> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut r = Reader { buf: &raw, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(VxError::Format("bad VXCK magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(VxError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let (name, shape, data) = r.tensor()?;
        params.insert(&name, Tensor::new(shape, data)?)?;
    }
    if r.done() {
        return Ok((params, None));
    }

    if r.take(4)? != ADAM_MAGIC {
        return Err(VxError::Format("bad ADAM block magic".into()));
    }
    let t = r.u64()?;
    let acount = r.u32()? as usize;
    if acount != params.len() {
        return Err(VxError::Format(format!(
            "ADAM block has {acount} tensors for {} parameters",
            params.len()
        )));
    }
    let mut entries = IndexMap::new();
    for _ in 0..acount {
        let (m_name, m_shape, m) = r.tensor()?;
        let (v_name, v_shape, v) = r.tensor()?;
        if m_name != v_name || m_shape != v_shape {
            return Err(VxError::Format(format!(
                "ADAM moment framing mismatch for `{m_name}`"
            )));
        }
        let param = params
            .get(&m_name)
            .ok_or_else(|| VxError::Format(format!("ADAM moment for unknown `{m_name}`")))?;
        if param.shape() != m_shape {
            return Err(VxError::Format(format!(
                "ADAM moment shape {:?} for `{m_name}` of shape {:?}",
                m_shape,
                param.shape()
            )));
        }
        entries.insert(m_name, crate::optim::Moments { m, v });
    }
    if !r.done() {
        return Err(VxError::Format("trailing bytes after ADAM block".into()));
    }
    let state = AdamState::from_raw_parts(hyper, t, entries);
    Ok((params, Some(state)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nets::build_align_generator;
    use crate::optim::adam_step;
    use crate::rng::seeded_rng;
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.vxck");
        let (mut ps, _) = build_align_generator(21);

        // Give the optimizer some non-trivial state first.
        let mut adam = AdamState::new(AdamHyper::new(0.002, 0.5), &ps);
        let mut rng = seeded_rng(3);
        for _ in 0..3 {
            ps.zero_grads();
            let mut g = Graph::new();
            let names: Vec<String> = ps.names().map(str::to_string).collect();
            let mut scalars = Vec::new();
            for n in &names {
                let p = g.param(&ps, n).unwrap();
                let probe = g
                    .constant(
                        g.shape(p).to_vec(),
                        (0..g.data(p).len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                    .unwrap();
                let m = g.mul(p, probe).unwrap();
                scalars.push(g.sum_all(m));
            }
            let loss = g.add_n(&scalars).unwrap();
            g.backward_into(loss, &mut ps).unwrap();
            adam_step(&mut adam, &mut ps).unwrap();
        }

        save_checkpoint(&path, &ps, Some(&adam)).unwrap();
        let (back, back_adam) = load_checkpoint(&path, AdamHyper::new(0.002, 0.5)).unwrap();
        assert!(ps.data_equals(&back));
        assert!(back_adam.unwrap().state_equals(&adam));
    }

    #[test]
    fn params_only_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.vxck");
        let (ps, _) = build_align_generator(2);
        save_checkpoint(&path, &ps, None).unwrap();
        let (back, adam) = load_checkpoint(&path, AdamHyper::new(0.1, 0.9)).unwrap();
        assert!(adam.is_none());
        assert!(ps.data_equals(&back));
        let names: Vec<_> = ps.names().collect();
        let back_names: Vec<_> = back.names().collect();
        assert_eq!(names, back_names);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vxck");
        std::fs::write(&path, b"VXCKgarbage").unwrap();
        assert!(load_checkpoint(&path, AdamHyper::new(0.1, 0.9)).is_err());
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path, AdamHyper::new(0.1, 0.9)).is_err());
    }
}
