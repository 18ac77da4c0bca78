use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::SpectralVolume;
use crate::error::{Error, Result};
use crate::linalg::RowMatrix;

const MAGIC: &[u8; 5] = b"SVOL1";

/// On-disk volume encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    /// `SVOL1` little-endian binary with f32 payload.
    SvolBinary,
    /// One row per unmasked voxel: `x,y,z,e<E1>,...,e<Em>`.
    Csv,
}

impl VolumeFormat {
    /// Guesses the format from a file extension (`.csv` or anything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => VolumeFormat::Csv,
            _ => VolumeFormat::SvolBinary,
        }
    }
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<SpectralVolume> {
    let file = File::open(path)?;
    match format {
        VolumeFormat::SvolBinary => read_svol(BufReader::new(file)),
        VolumeFormat::Csv => read_csv(BufReader::new(file)),
    }
}

pub fn save_volume(vol: &SpectralVolume, path: &Path, format: VolumeFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        VolumeFormat::SvolBinary => write_svol(vol, &mut w)?,
        VolumeFormat::Csv => write_csv(vol, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(format!("payload too short for {what}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn read_svol(mut r: impl Read) -> Result<SpectralVolume> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("missing SVOL1 magic"))?;
    if &magic != MAGIC {
        return Err(Error::format("bad magic, expected SVOL1"));
    }
    let nx = read_u32(&mut r)? as usize;
    let ny = read_u32(&mut r)? as usize;
    let nz = read_u32(&mut r)? as usize;
    let m = read_u32(&mut r)? as usize;
    let total = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or_else(|| Error::format("grid dimensions overflow"))?;
    if m == 0 {
        return Err(Error::format("header declares zero energies"));
    }
    let energies = read_f32s(&mut r, m, "energies")?;
    let mut mask_bytes = vec![0u8; total];
    r.read_exact(&mut mask_bytes)
        .map_err(|_| Error::format("payload too short for mask"))?;
    let mut mask = Vec::with_capacity(total);
    for b in mask_bytes {
        match b {
            0 => mask.push(false),
            1 => mask.push(true),
            other => return Err(Error::format(format!("mask byte {other} is not 0 or 1"))),
        }
    }
    let n = mask.iter().filter(|&&b| b).count();
    let values = read_f32s(&mut r, n * m, "curves")?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::format(format!(
            "{} trailing bytes after declared payload",
            rest.len()
        )));
    }
    SpectralVolume::new([nx, ny, nz], energies, mask, RowMatrix::from_vec(n, m, values)?)
}

pub(crate) fn write_svol(vol: &SpectralVolume, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    for d in vol.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(vol.m() as u32).to_le_bytes())?;
    for &e in vol.energies() {
        w.write_all(&(e as f32).to_le_bytes())?;
    }
    let mask: Vec<u8> = vol.mask().iter().map(|&b| b as u8).collect();
    w.write_all(&mask)?;
    for &v in vol.curves().as_slice() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn parse_energy_header(col: &str) -> Result<f64> {
    col.strip_prefix('e')
        .and_then(|s| s.parse::<f64>().ok())
        .ok_or_else(|| Error::format(format!("header column {col:?} is not e<energy>")))
}

pub(crate) fn read_csv(r: impl Read) -> Result<SpectralVolume> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let headers = rdr
        .headers()
        .map_err(|e| Error::format(format!("bad csv header: {e}")))?
        .clone();
    if headers.len() < 4 || &headers[0] != "x" || &headers[1] != "y" || &headers[2] != "z" {
        return Err(Error::format(
            "csv header must start with x,y,z and list energies",
        ));
    }
    let energies = headers
        .iter()
        .skip(3)
        .map(parse_energy_header)
        .collect::<Result<Vec<_>>>()?;
    let m = energies.len();
    let mut positions = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(format!("csv row {}: {e}", line + 2)))?;
        if rec.len() != m + 3 {
            return Err(Error::format(format!(
                "csv row {} has {} fields, expected {}",
                line + 2,
                rec.len(),
                m + 3
            )));
        }
        let mut pos = [0usize; 3];
        for a in 0..3 {
            pos[a] = rec[a]
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("csv row {}: bad coordinate {:?}", line + 2, &rec[a])))?;
        }
        positions.push(pos);
        for f in rec.iter().skip(3) {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("csv row {}: bad value {f:?}", line + 2)))?;
            if v.is_nan() {
                return Err(Error::format(format!("csv row {}: NaN attenuation", line + 2)));
            }
            values.push(v);
        }
    }
    if positions.is_empty() {
        return Err(Error::format("csv has no voxel rows"));
    }
    let mut dims = [0usize; 3];
    for p in &positions {
        for a in 0..3 {
            dims[a] = dims[a].max(p[a] + 1);
        }
    }
    let curves = RowMatrix::from_vec(positions.len(), m, values)?;
    SpectralVolume::from_positions(dims, energies, &positions, &curves)
}

pub(crate) fn write_csv(vol: &SpectralVolume, w: &mut impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["x".to_string(), "y".to_string(), "z".to_string()];
    header.extend(vol.energies().iter().map(|e| format!("e{e}")));
    wtr.write_record(&header)
        .map_err(|e| Error::format(e.to_string()))?;
    for i in 0..vol.n() {
        let p = vol.position(i);
        let mut rec: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        rec.extend(vol.curve(i).iter().map(|v| v.to_string()));
        wtr.write_record(&rec).map_err(|e| Error::format(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}
