//! Binary checkpoints.
//!
//! Layout (little-endian): `"IAGC"`, version `u32`, entry count `u32`, then
//! per entry: name length `u16`, UTF-8 name, rank `u8`, dims `u32 × rank`,
//! `f32` data. Optimizer moments are stored as `adam.m.<name>` /
//! `adam.v.<name>` entries and the step counter as `optim.step`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const MAGIC: &[u8; 4] = b"IAGC";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";
const STEP_KEY: &str = "optim.step";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| Error::Format("too many entries".into()))?.to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let rank = u8::try_from(e.shape.len()).map_err(|_| Error::Format(format!("rank too high: {}", e.name)))?;
        out.push(rank);
        for &d in &e.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent too large: {}", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(Error::Format(format!("entry `{}` data does not match its shape", e.name)));
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an IAGC checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(4).ok_or_else(|| Error::Format("entry too large".into()))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after the last entry".into()));
    }
    Ok(entries)
}

/// Write `bytes` to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parameters plus optional optimizer state.
#[derive(Clone)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
}

pub fn save_checkpoint(path: &Path, params: &ParamStore<f32>, adam: Option<&AdamState<f32>>) -> Result<()> {
    let mut entries: Vec<Entry> = params
        .iter()
        .map(|(_, name, t)| Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        })
        .collect();
    if let Some(st) = adam {
        if !st.matches(params) {
            return Err(Error::Config("optimizer state does not match the parameter store".into()));
        }
        for (prefix, bufs) in [(M_PREFIX, &st.m), (V_PREFIX, &st.v)] {
            for ((_, name, t), b) in params.iter().zip(bufs.iter()) {
                entries.push(Entry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    data: b.clone(),
                });
            }
        }
        entries.push(Entry {
            name: STEP_KEY.into(),
            shape: vec![2],
            // u64 split into two exactly representable halves
            data: vec![(st.step >> 20) as f32, (st.step & 0xF_FFFF) as f32],
        });
    }
    write_atomic(path, &encode(&entries)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode(&bytes)?;
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut step = None;
    for e in entries {
        if let Some(rest) = e.name.strip_prefix(M_PREFIX) {
            m.push((rest.to_string(), e.data));
        } else if let Some(rest) = e.name.strip_prefix(V_PREFIX) {
            v.push((rest.to_string(), e.data));
        } else if e.name == STEP_KEY {
            match e.data[..] {
                [hi, lo] => step = Some(((hi as u64) << 20) | lo as u64),
                _ => return Err(Error::Format("malformed optimizer step entry".into())),
            }
        } else {
            params.add(e.name, &e.shape, e.data).map_err(|err| Error::Format(err.to_string()))?;
        }
    }
    let adam = match step {
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(Error::Format("optimizer moments without a step counter".into())),
        Some(step) => {
            let order = |bufs: Vec<(String, Vec<f32>)>| -> Result<Vec<Vec<f32>>> {
                if bufs.len() != params.len() {
                    return Err(Error::Format("optimizer state does not cover every parameter".into()));
                }
                bufs.into_iter()
                    .zip(params.iter())
                    .map(|((n, d), (_, pn, t))| {
                        if n != pn || d.len() != t.numel() {
                            Err(Error::Format(format!("optimizer entry for `{n}` does not match `{pn}`")))
                        } else {
                            Ok(d)
                        }
                    })
                    .collect()
            };
            Some(AdamState {
                step,
                m: order(m)?,
                v: order(v)?,
            })
        }
    };
    Ok(Checkpoint { params, adam })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn byte_layout() {
        let bytes = encode(&[Entry {
            name: "w".into(),
            shape: vec![2],
            data: vec![1.0, -0.5],
        }])
        .unwrap();
        let mut expected = b"IAGC".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode(&bytes).unwrap()[0].data, vec![1.0, -0.5]);
    }

    #[test]
    fn corrupt_input_is_format_error() {
        assert!(matches!(decode(b"NOPE\x01\0\0\0\0\0\0\0"), Err(Error::Format(_))));
        let good = encode(&[Entry { name: "a".into(), shape: vec![3], data: vec![0.0; 3] }]).unwrap();
        assert!(matches!(decode(&good[..good.len() - 1]), Err(Error::Format(_))));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.iagc");
        let mut ps = ParamStore::<f32>::new();
        ps.add_init("a.weight", &[2, 3], Init::Normal { mean: 0.0, std: 1.0, seed: 1 }).unwrap();
        ps.add_init("b", &[4], Init::Constant(0.25)).unwrap();
        let mut st = AdamState::new(&ps);
        st.step = 123_456_789;
        st.m[1][2] = 0.5;
        st.v[0][5] = 2.0;
        save_checkpoint(&path, &ps, Some(&st)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.adam.as_ref(), Some(&st));
        let names: Vec<_> = ck.params.iter().map(|(_, n, t)| (n.to_string(), t.to_vec())).collect();
        let orig: Vec<_> = ps.iter().map(|(_, n, t)| (n.to_string(), t.to_vec())).collect();
        assert_eq!(names, orig);
        save_checkpoint(&path, &ps, None).unwrap();
        assert!(load_checkpoint(&path).unwrap().adam.is_none());
        assert!(!dir.path().join(".ck.iagc.tmp").exists());
    }
}
