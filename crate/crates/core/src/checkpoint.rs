//! Binary checkpoint format.
//!
//! Layout (little-endian):
//!   magic  "CQNP1"            5 bytes
//!   kind   u8                 0 = cnp, 1 = cqnp, 2 = acqnp
//!   d_x    u32
//!   d_y    u32
//!   n_nets u8                 2 or 3
//!   per network: n_widths u32, then the widths as u32
//!   n_params u64
//!   params f64 x n_params     canonical flat order

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::MlpSpec;
use crate::error::CqnpError;
use crate::model::{Model, ModelConfig, ModelKind};

const MAGIC: &[u8; 5] = b"CQNP1";

fn kind_tag(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Cnp => 0,
        ModelKind::Cqnp => 1,
        ModelKind::Acqnp => 2,
    }
}

fn kind_from_tag(tag: u8) -> Result<ModelKind, CqnpError> {
    match tag {
        0 => Ok(ModelKind::Cnp),
        1 => Ok(ModelKind::Cqnp),
        2 => Ok(ModelKind::Acqnp),
        other => Err(CqnpError::Format(format!("unknown model kind tag {other}"))),
    }
}

pub fn save(model: &Model, path: &Path) -> Result<(), CqnpError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    let cfg = model.config();
    w.write_all(&[kind_tag(cfg.kind)])?;
    w.write_all(&(cfg.d_x as u32).to_le_bytes())?;
    w.write_all(&(cfg.d_y as u32).to_le_bytes())?;
    let mut specs: Vec<&MlpSpec> = vec![&cfg.encoder, &cfg.decoder];
    if let Some(a) = &cfg.adaptor {
        specs.push(a);
    }
    w.write_all(&[specs.len() as u8])?;
    for spec in specs {
        w.write_all(&(spec.widths().len() as u32).to_le_bytes())?;
        for &width in spec.widths() {
            w.write_all(&(width as u32).to_le_bytes())?;
        }
    }
    let flat = model.params_flat();
    w.write_all(&(flat.len() as u64).to_le_bytes())?;
    for v in flat {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CqnpError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load(path: &Path) -> Result<Model, CqnpError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CqnpError::Format(format!(
            "{}: bad magic {:?} (not a checkpoint)",
            path.display(),
            magic
        )));
    }
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    let kind = kind_from_tag(byte[0])?;
    let d_x = read_u32(&mut r)? as usize;
    let d_y = read_u32(&mut r)? as usize;
    r.read_exact(&mut byte)?;
    let n_nets = byte[0] as usize;
    let want_nets = if kind == ModelKind::Acqnp { 3 } else { 2 };
    if n_nets != want_nets {
        return Err(CqnpError::Format(format!(
            "{} networks stored but {} expects {}",
            n_nets,
            kind.name(),
            want_nets
        )));
    }
    let mut specs = Vec::with_capacity(n_nets);
    for _ in 0..n_nets {
        let n_widths = read_u32(&mut r)? as usize;
        if n_widths < 3 || n_widths > 64 {
            return Err(CqnpError::Format(format!(
                "implausible width count {n_widths}"
            )));
        }
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            widths.push(read_u32(&mut r)? as usize);
        }
        specs.push(MlpSpec::new(widths).map_err(|e| CqnpError::Format(e.to_string()))?);
    }
    let adaptor = if n_nets == 3 { Some(specs.pop().unwrap()) } else { None };
    let decoder = specs.pop().unwrap();
    let encoder = specs.pop().unwrap();
    let cfg = ModelConfig::new(kind, d_x, d_y, encoder, decoder, adaptor)
        .map_err(|e| CqnpError::Format(format!("checkpoint specs inconsistent: {e}")))?;

    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let n_params = u64::from_le_bytes(buf8) as usize;
    if n_params != cfg.param_count() {
        return Err(CqnpError::Format(format!(
            "checkpoint holds {} parameters but the specs need {}",
            n_params,
            cfg.param_count()
        )));
    }
    let mut flat = vec![0.0f64; n_params];
    for v in &mut flat {
        r.read_exact(&mut buf8)?;
        *v = f64::from_le_bytes(buf8);
    }
    let mut model = Model::zeroed(cfg);
    model.set_params_flat(&flat)?;
    Ok(model)
}

/// Load and require a specific model kind.
pub fn load_as(path: &Path, expect: ModelKind) -> Result<Model, CqnpError> {
    let model = load(path)?;
    if model.kind() != expect {
        return Err(CqnpError::Format(format!(
            "checkpoint holds a {} model, expected {}",
            model.kind().name(),
            expect.name()
        )));
    }
    Ok(model)
}
