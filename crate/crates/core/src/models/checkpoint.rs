//! Flat binary parameter files.
//!
//! Layout: the 8-byte magic `EISLMDL1`, then model kind, vocabulary size,
//! hidden width and maximum source length as little-endian `u32`, then every
//! parameter value as a little-endian `f64` in declared parameter order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelDims, ModelError, ModelKind};

const MAGIC: &[u8; 8] = b"EISLMDL1";

impl Model {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let dims = self.dims();
        w.write_all(MAGIC)?;
        for field in [self.kind().code(), to_u32(dims.vocab)?, to_u32(dims.hidden)?, to_u32(dims.max_len)?] {
            w.write_all(&field.to_le_bytes())?;
        }
        for p in self.params() {
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let mut header = [0u32; 4];
        for h in header.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *h = u32::from_le_bytes(b);
        }
        let kind = ModelKind::from_code(header[0])
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown model kind {}", header[0])))?;
        let dims = ModelDims {
            vocab: header[1] as usize,
            hidden: header[2] as usize,
            max_len: header[3] as usize,
        };
        if dims.vocab < 4 || dims.hidden == 0 || dims.max_len == 0 {
            return Err(ModelError::Checkpoint(format!("implausible dimensions {dims:?}")));
        }
        let mut model = Model::zeros(kind, dims);
        let mut b = [0u8; 8];
        for p in model.params_mut() {
            for v in p.data_mut() {
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        if r.read(&mut b)? != 0 {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn to_u32(x: usize) -> Result<u32, ModelError> {
    u32::try_from(x).map_err(|_| ModelError::Checkpoint(format!("dimension {x} does not fit in u32")))
}
