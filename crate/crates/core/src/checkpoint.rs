//! Binary checkpoint container.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic   "SRLSTMCK"                     8 bytes
//! version u32                            currently 1
//! meta    u32 count, then (str key, str value)*
//! params  u32 count, then (str name, u64 rows, u64 cols, u8 trainable, f64 data[rows*cols])*
//! adam    u8 present; if 1: f64 lr, f64 beta1, f64 beta2, f64 eps, u64 t,
//!         u32 count, then (str name, u64 rows, u64 cols, f64 m[..], f64 v[..])*
//! str     u32 byte length, then UTF-8 bytes
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::CheckpointError;
use crate::optim::{AdamState, Moments};
use crate::params::ParamStore;
use crate::tensor::Tensor2;

pub const MAGIC: &[u8; 8] = b"SRLSTMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_u32(w, self.metadata.len())?;
        for (k, v) in &self.metadata {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        write_u32(w, self.params.len())?;
        for (name, entry) in self.params.iter() {
            write_str(w, name)?;
            write_shape(w, &entry.value)?;
            w.write_all(&[entry.trainable as u8])?;
            write_reals(w, entry.value.data())?;
        }
        match &self.adam {
            None => w.write_all(&[0])?,
            Some(state) => {
                w.write_all(&[1])?;
                for x in [state.learning_rate, state.beta1, state.beta2, state.epsilon] {
                    w.write_all(&x.to_le_bytes())?;
                }
                w.write_all(&state.t.to_le_bytes())?;
                write_u32(w, state.moments.len())?;
                for (name, mo) in &state.moments {
                    write_str(w, name)?;
                    write_shape(w, &mo.m)?;
                    write_reals(w, mo.m.data())?;
                    write_reals(w, mo.v.data())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            metadata.insert(k, v);
        }
        let mut params = ParamStore::new();
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            let (rows, cols) = read_shape(r)?;
            let trainable = read_u8(r)? != 0;
            let data = read_reals(r, rows * cols)?;
            params.insert(&name, Tensor2::from_vec(rows, cols, data)?)?;
            params.set_trainable(&name, trainable)?;
        }
        let adam = match read_u8(r)? {
            0 => None,
            1 => {
                let mut head = [0.0; 4];
                for h in head.iter_mut() {
                    *h = read_f64(r)?;
                }
                let mut t = [0u8; 8];
                r.read_exact(&mut t)?;
                let mut state = AdamState::new(head[0]);
                state.beta1 = head[1];
                state.beta2 = head[2];
                state.epsilon = head[3];
                state.t = u64::from_le_bytes(t);
                for _ in 0..read_u32(r)? {
                    let name = read_str(r)?;
                    let (rows, cols) = read_shape(r)?;
                    let m = Tensor2::from_vec(rows, cols, read_reals(r, rows * cols)?)?;
                    let v = Tensor2::from_vec(rows, cols, read_reals(r, rows * cols)?)?;
                    state.moments.insert(name, Moments { m, v });
                }
                Some(state)
            }
            other => return Err(CheckpointError::Corrupt(format!("adam flag {other}"))),
        };
        Ok(Self {
            metadata,
            params,
            adam,
        })
    }
}

fn write_u32<W: Write>(w: &mut W, n: usize) -> Result<(), CheckpointError> {
    let n = u32::try_from(n).map_err(|_| CheckpointError::Corrupt("count overflow".into()))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<(), CheckpointError> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_shape<W: Write>(w: &mut W, t: &Tensor2) -> Result<(), CheckpointError> {
    w.write_all(&(t.rows() as u64).to_le_bytes())?;
    w.write_all(&(t.cols() as u64).to_le_bytes())?;
    Ok(())
}

fn write_reals<W: Write>(w: &mut W, xs: &[f64]) -> Result<(), CheckpointError> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, CheckpointError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(CheckpointError::Corrupt(format!("string length {n}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

fn read_shape<R: Read>(r: &mut R) -> Result<(usize, usize), CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let rows = u64::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let cols = u64::from_le_bytes(b) as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(CheckpointError::Corrupt(format!("tensor {rows}x{cols}")));
    }
    Ok((rows, cols))
}

fn read_reals<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, CheckpointError> {
    (0..n).map(|_| read_f64(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::adam_step;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params
            .insert("a", Tensor2::from_vec(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap())
            .unwrap();
        params.insert("b", Tensor2::filled(1, 4, 0.25)).unwrap();
        params.set_trainable("b", false).unwrap();
        params.get_mut("a").unwrap().grad.fill(0.1);
        let mut adam = AdamState::new(0.01);
        adam_step(&mut params, &mut adam).unwrap();
        let mut metadata = BTreeMap::new();
        metadata.insert("refinement_iters".into(), "2".into());
        Checkpoint {
            metadata,
            params,
            adam: Some(adam),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_foreign_files() {
        let err = Checkpoint::read_from(&mut &b"NOTACKPT\x01\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic));
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf[8] = 9;
        assert!(matches!(
            Checkpoint::read_from(&mut buf.as_slice()),
            Err(CheckpointError::Version(9))
        ));
        buf[8] = 1;
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
