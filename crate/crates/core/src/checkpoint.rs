//! Binary checkpoint: model state plus memory bank.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "MXAD" | version u32 | D u64 | C u64 | K u64 | N_l u64 | step_count u64
//! student encoder (D×C) | student classifier (C×K)
//! teacher encoder (D×C) | teacher classifier (C×K)
//! W_k (C×C) | W_v (C×C) | W_q (C×C)
//! momentum: encoder (D×C) | classifier (C×K) | W_q (C×C)
//! memory block: N_l u64 | C u64 | items (N_l×C)
//! ```
//!
//! Matrices are row-major `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adapt::{EncoderParams, MomentumBuffers, StudentTeacherState};
use crate::error::{Error, Result};
use crate::memory::{read_f64s, read_u32, read_u64, write_f64s, MemoryBank, ProjectionSet};
use crate::numerics::DenseMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MXAD";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: StudentTeacherState,
    pub bank: MemoryBank,
}

impl Checkpoint {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = &self.state.student;
        (s.input_dim(), s.feature_dim(), s.n_classes(), self.bank.n_items())
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let (d, c, k, n_l) = self.dims();
        if self.bank.dim() != c {
            return Err(Error::shape("checkpoint", format!("bank dim {c}"), self.bank.dim()));
        }
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
        for v in [d, c, k, n_l] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.state.step_count.to_le_bytes())?;
        let s = &self.state;
        for m in [
            &s.student.encoder,
            &s.student.classifier,
            &s.teacher.encoder,
            &s.teacher.classifier,
            &s.projections.w_k,
            &s.projections.w_v,
            &s.projections.w_q,
            &s.momentum.encoder,
            &s.momentum.classifier,
            &s.momentum.w_q,
        ] {
            write_f64s(&mut w, m.as_slice())?;
        }
        self.bank.write_block(&mut w)?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let d = read_u64(&mut r)? as usize;
        let c = read_u64(&mut r)? as usize;
        let k = read_u64(&mut r)? as usize;
        let n_l = read_u64(&mut r)? as usize;
        let step_count = read_u64(&mut r)?;
        if d == 0 || c == 0 || k < 2 || n_l == 0 || d.max(c).max(k) > 1 << 20 {
            return Err(Error::format("checkpoint", format!("implausible dims D={d} C={c} K={k} N_l={n_l}")));
        }
        let mut matrix = |rows: usize, cols: usize| -> Result<DenseMatrix> {
            DenseMatrix::new(rows, cols, read_f64s(&mut r, rows * cols)?)
        };
        let student = EncoderParams {
            encoder: matrix(d, c)?,
            classifier: matrix(c, k)?,
        };
        let teacher = EncoderParams {
            encoder: matrix(d, c)?,
            classifier: matrix(c, k)?,
        };
        let projections = ProjectionSet {
            w_k: matrix(c, c)?,
            w_v: matrix(c, c)?,
            w_q: matrix(c, c)?,
        };
        let momentum = MomentumBuffers {
            encoder: matrix(d, c)?,
            classifier: matrix(c, k)?,
            w_q: matrix(c, c)?,
        };
        let bank = MemoryBank::read_block(&mut r)?;
        if bank.n_items() != n_l || bank.dim() != c {
            return Err(Error::format(
                "checkpoint",
                format!("memory block is {}x{}, header says {n_l}x{c}", bank.n_items(), bank.dim()),
            ));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::format("checkpoint", "trailing bytes after memory block"));
        }
        Ok(Self {
            state: StudentTeacherState {
                student,
                teacher,
                projections,
                momentum,
                step_count,
            },
            bank,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::load(BufReader::new(File::open(path)?))
    }
}
