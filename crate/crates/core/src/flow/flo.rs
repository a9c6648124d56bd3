//! Middlebury `.flo` flow file format: little-endian, a float magic of
//! 202021.25 ("PIEH"), i32 width and height, then row-major interleaved
//! (u, v) float pairs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::image::FlowField;

const FLO_MAGIC: f32 = 202021.25;

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    out.write_f32::<LittleEndian>(FLO_MAGIC).map_err(io_err)?;
    out.write_i32::<LittleEndian>(w as i32).map_err(io_err)?;
    out.write_i32::<LittleEndian>(h as i32).map_err(io_err)?;
    for y in 0..h {
        for x in 0..w {
            out.write_f32::<LittleEndian>(flow[[0, y, x]] as f32)
                .map_err(io_err)?;
            out.write_f32::<LittleEndian>(flow[[1, y, x]] as f32)
                .map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut inp = BufReader::new(file);
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let magic = inp
        .read_f32::<LittleEndian>()
        .map_err(|e| bad(format!("missing magic: {e}")))?;
    if magic != FLO_MAGIC {
        return Err(bad(format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let w = inp
        .read_i32::<LittleEndian>()
        .map_err(|e| bad(format!("missing width: {e}")))?;
    let h = inp
        .read_i32::<LittleEndian>()
        .map_err(|e| bad(format!("missing height: {e}")))?;
    if w <= 0 || h <= 0 {
        return Err(bad(format!("invalid dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0u8; w * h * 2 * 4];
    inp.read_exact(&mut data)
        .map_err(|e| bad(format!("truncated payload: {e}")))?;
    let mut flow = Array3::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * 8;
            let u = f32::from_le_bytes(data[base..base + 4].try_into().unwrap());
            let v = f32::from_le_bytes(data[base + 4..base + 8].try_into().unwrap());
            flow[[0, y, x]] = u as f64;
            flow[[1, y, x]] = v as f64;
        }
    }
    Ok(flow)
}
