//! `NDML` model file: magic, version u16, layer count u32, then per layer
//! `rows u32, cols u32`, row-major f32 weights and f32 biases; finally the
//! decision threshold as f32. All little-endian.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::mlp::{Layer, MlpModel};
use crate::embedding::{read_u16, read_u32};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::scalar::Scalar;

const MODEL_MAGIC: &[u8; 4] = b"NDML";
const MODEL_VERSION: u16 = 1;

fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub fn write_model_to<T: Scalar, W: Write>(w: &mut W, model: &MlpModel<T>) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(model.layers().len() as u32).to_le_bytes())?;
    for layer in model.layers() {
        w.write_all(&(layer.outputs() as u32).to_le_bytes())?;
        w.write_all(&(layer.inputs() as u32).to_le_bytes())?;
        for &v in layer.weights.iter() {
            write_f32(w, v.to_f32().unwrap_or(f32::NAN))?;
        }
        for &v in layer.bias.iter() {
            write_f32(w, v.to_f32().unwrap_or(f32::NAN))?;
        }
    }
    write_f32(w, model.threshold().to_f32().unwrap_or(f32::NAN))
}

pub fn read_model_from<T: Scalar, R: Read>(r: &mut R) -> Result<MlpModel<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format("model file", "bad magic"));
    }
    let version = read_u16(r)?;
    if version != MODEL_VERSION {
        return Err(Error::format("model file", format!("unsupported version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let weights = (0..rows * cols)
            .map(|_| read_f32(r).map(|v| T::of(v as f64)))
            .collect::<Result<Vec<_>>>()?;
        let bias = (0..rows)
            .map(|_| read_f32(r).map(|v| T::of(v as f64)))
            .collect::<Result<Vec<_>>>()?;
        layers.push(Layer {
            weights: Array2::from_shape_vec((rows, cols), weights)
                .map_err(|e| Error::format("model file", e.to_string()))?,
            bias: Array1::from(bias),
        });
    }
    let threshold = T::of(read_f32(r)? as f64);
    MlpModel::from_layers(layers, threshold)
}

pub fn save_model<T: Scalar>(path: &Path, model: &MlpModel<T>) -> Result<()> {
    atomic_write(path, |w| write_model_to(w, model))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<MlpModel<T>> {
    read_model_from(&mut BufReader::new(File::open(path)?))
}
