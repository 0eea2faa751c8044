//! Dataset generation, quantization, tensor persistence, and sample
//! image output.
//!
//! The on-disk tensor format is deliberately tiny: magic `FPT1`, one
//! dtype byte (0 = u8, 1 = f64), one ndim byte, the dims as
//! little-endian u32, then the row-major payload. Images go out as
//! binary PGM/PPM so they round-trip bit-exactly without decoders.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dequant::DiscreteData;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::stream_rng;
use crate::tensor::TensorBase;
use crate::Tensor;

const MAGIC: &[u8; 4] = b"FPT1";
const DTYPE_U8: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Random-number stream for dataset generation, split from the
/// dataset's own generator seed.
pub const STREAM_DATA: &str = "data";

/// Payload of one tensor file.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorFile {
    U8 { shape: Vec<usize>, data: Vec<u8> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
}

impl TensorFile {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorFile::U8 { shape, .. } | TensorFile::F64 { shape, .. } => shape,
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn encode_header(dtype: u8, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!(
            "tensor rank {} exceeds the format's u8 ndim field",
            shape.len()
        )));
    }
    let mut out = Vec::with_capacity(6 + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

/// Write a u8 tensor file.
pub fn write_tensor_u8(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    assert_eq!(
        shape.iter().product::<usize>(),
        data.len(),
        "payload length must match the shape"
    );
    let mut bytes = encode_header(DTYPE_U8, shape)?;
    bytes.extend_from_slice(data);
    fs::write(path, bytes)?;
    Ok(())
}

/// Write an f64 tensor file.
pub fn write_tensor_f64(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = encode_header(DTYPE_F64, t.shape())?;
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a tensor file of either dtype.
pub fn read_tensor(path: &Path) -> Result<TensorFile> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let fail = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 6 {
        return Err(fail("shorter than the fixed header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic, expected FPT1"));
    }
    let dtype = bytes[4];
    let ndim = bytes[5] as usize;
    let dims_end = 6 + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(fail("truncated dimension list"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = 6 + 4 * i;
        let d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        shape.push(d as usize);
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    match dtype {
        DTYPE_U8 => {
            if payload.len() != count {
                return Err(fail("payload length does not match the dims"));
            }
            Ok(TensorFile::U8 {
                shape,
                data: payload.to_vec(),
            })
        }
        DTYPE_F64 => {
            if payload.len() != 8 * count {
                return Err(fail("payload length does not match the dims"));
            }
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(TensorFile::F64 { shape, data })
        }
        other => Err(fail(&format!("unknown dtype code {other}"))),
    }
}

/// Persist every parameter as `<dir>/<name>.fpt`.
pub fn save_params(dir: &Path, ps: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, value) in ps.iter() {
        write_tensor_f64(&dir.join(format!("{name}.fpt")), value)?;
    }
    Ok(())
}

/// Load the named parameters from `<dir>/<name>.fpt` files, in the
/// given order.
pub fn load_params(dir: &Path, names: &[String]) -> Result<ParamStore> {
    let mut ps = ParamStore::new();
    for name in names {
        let path = dir.join(format!("{name}.fpt"));
        match read_tensor(&path)? {
            TensorFile::F64 { shape, data } => {
                ps.insert(name.clone(), TensorBase::new(shape, data));
            }
            TensorFile::U8 { .. } => {
                return Err(Error::Format(format!(
                    "{}: parameter files must hold f64",
                    path.display()
                )));
            }
        }
    }
    Ok(ps)
}

fn default_toy_n() -> usize {
    512
}
fn default_bit_depth() -> u8 {
    3
}

/// Where a dataset comes from. External images arrive pre-converted as
/// u8 tensor files; there is deliberately no image decoding here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Points from a fixed 2-D Gaussian mixture, quantized to `[N,1,2,1]`.
    Toy2dMixture {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_toy_n")]
        n: usize,
        #[serde(default = "default_bit_depth")]
        bit_depth: u8,
    },
    /// One u8 tensor file shaped `[N,C,H,W]`, holding 8-bit values.
    TensorFile {
        path: PathBuf,
        #[serde(default = "default_bit_depth")]
        bit_depth: u8,
    },
    /// A directory of u8 tensor files, one `[C,H,W]` example each,
    /// stacked in file-name order.
    ImageDir {
        path: PathBuf,
        #[serde(default = "default_bit_depth")]
        bit_depth: u8,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Toy2dMixture {
            seed: 0,
            n: default_toy_n(),
            bit_depth: default_bit_depth(),
        }
    }
}

impl DatasetSpec {
    pub fn bit_depth(&self) -> u8 {
        match self {
            DatasetSpec::Toy2dMixture { bit_depth, .. }
            | DatasetSpec::TensorFile { bit_depth, .. }
            | DatasetSpec::ImageDir { bit_depth, .. } => *bit_depth,
        }
    }
}

/// Component weights of the toy mixture, in sampling order.
pub const TOY2D_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];
/// Component means of the toy mixture.
pub const TOY2D_MEANS: [[f64; 2]; 3] = [[-1.4, -1.0], [1.3, 0.9], [0.1, 1.7]];
/// Componentwise standard deviations of the toy mixture.
pub const TOY2D_STDS: [[f64; 2]; 3] = [[0.35, 0.30], [0.30, 0.35], [0.25, 0.25]];
/// The box affinely mapped onto `[0, 2^b)` during quantization.
pub const TOY2D_BOX: [f64; 2] = [-2.8, 2.8];

/// Raw continuous draws from the toy mixture, one `(x, y)` per point.
pub fn toy2d_points(seed: u64, n: usize) -> Vec<[f64; 2]> {
    let mut rng = stream_rng(seed, STREAM_DATA, 0);
    (0..n)
        .map(|_| {
            let pick: f64 = rng.gen();
            let mut acc = 0.0;
            let mut comp = TOY2D_WEIGHTS.len() - 1;
            for (i, w) in TOY2D_WEIGHTS.iter().enumerate() {
                acc += w;
                if pick < acc {
                    comp = i;
                    break;
                }
            }
            let mut point = [0.0; 2];
            for (a, p) in point.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *p = TOY2D_MEANS[comp][a] + TOY2D_STDS[comp][a] * z;
            }
            point
        })
        .collect()
}

/// Draw `n` points from the fixed 2-D mixture and quantize them onto
/// the `b`-bit integer grid, shaped `[N, 1, 2, 1]`.
pub fn generate_toy2d(seed: u64, n: usize, b: u8) -> Result<DiscreteData> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    let levels = (1u64 << b) as f64;
    let [lo, hi] = TOY2D_BOX;
    let max_level = (1u64 << b) - 1;
    let values = toy2d_points(seed, n)
        .into_iter()
        .flatten()
        .map(|v| {
            let unit = (v - lo) / (hi - lo);
            let cell = (unit * levels).floor();
            cell.clamp(0.0, max_level as f64) as u8
        })
        .collect();
    DiscreteData::new(vec![n, 1, 2, 1], values, b)
}

/// Drop an 8-bit value to `b` bits by truncating the low bits.
pub fn quantize_value(v: u8, b: u8) -> u8 {
    assert!((1..=8).contains(&b), "bit depth {b} outside 1..=8");
    v >> (8 - b)
}

/// Quantize a u8 tensor of 8-bit values to `b` bits.
pub fn quantize(shape: &[usize], values: &[u8], b: u8) -> Result<DiscreteData> {
    let q = values.iter().map(|&v| quantize_value(v, b)).collect();
    DiscreteData::new(shape.to_vec(), q, b)
}

/// Materialize a dataset.
pub fn load_dataset(spec: &DatasetSpec) -> Result<DiscreteData> {
    match spec {
        DatasetSpec::Toy2dMixture { seed, n, bit_depth } => {
            generate_toy2d(*seed, *n, *bit_depth)
        }
        DatasetSpec::TensorFile { path, bit_depth } => match read_tensor(path)? {
            TensorFile::U8 { shape, data } => quantize(&shape, &data, *bit_depth),
            TensorFile::F64 { .. } => Err(Error::Format(format!(
                "{}: datasets must hold u8 values",
                path.display()
            ))),
        },
        DatasetSpec::ImageDir { path, bit_depth } => {
            let mut files: BTreeMap<String, PathBuf> = BTreeMap::new();
            for entry in fs::read_dir(path)? {
                let entry = entry?;
                let p = entry.path();
                if p.extension().is_some_and(|e| e == "fpt") {
                    files.insert(p.file_name().unwrap().to_string_lossy().into_owned(), p);
                }
            }
            if files.is_empty() {
                return Err(Error::Dataset(format!(
                    "{}: no .fpt files found",
                    path.display()
                )));
            }
            let mut example_shape: Option<Vec<usize>> = None;
            let mut values = Vec::new();
            let mut n = 0usize;
            for (name, p) in &files {
                match read_tensor(p)? {
                    TensorFile::U8 { shape, data } => {
                        if shape.len() != 3 {
                            return Err(Error::Dataset(format!(
                                "{name}: examples must be [C,H,W], got {shape:?}"
                            )));
                        }
                        match &example_shape {
                            None => example_shape = Some(shape),
                            Some(s) if *s != shape => {
                                return Err(Error::Dataset(format!(
                                    "{name}: shape {shape:?} differs from {s:?}"
                                )));
                            }
                            Some(_) => {}
                        }
                        values.extend_from_slice(&data);
                        n += 1;
                    }
                    TensorFile::F64 { .. } => {
                        return Err(Error::Format(format!("{name}: datasets must hold u8")));
                    }
                }
            }
            let ex = example_shape.expect("at least one file");
            let shape = vec![n, ex[0], ex[1], ex[2]];
            quantize(&shape, &values, *bit_depth)
        }
    }
}

fn grid_geometry(n: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let width = cols * w + (cols - 1);
    let height = rows * h + (rows - 1);
    (cols, rows, width, height)
}

/// Tile a batch of samples into one image and write it as binary PGM
/// (1 channel) or PPM (3 channels): values are clamped to the b-bit
/// range, rescaled to 8 bits, and separated by 1-pixel black gutters.
pub fn write_sample_grid(samples: &Tensor, b: u8, path: &Path) -> Result<()> {
    let shape = samples.shape();
    assert_eq!(shape.len(), 4, "samples must be [N,C,H,W]");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if n == 0 {
        return Err(Error::InvalidArgument("nothing to tile".into()));
    }
    if c != 1 && c != 3 {
        return Err(Error::Format(format!(
            "sample grids need 1 or 3 channels, got {c}"
        )));
    }
    for &v in samples.data() {
        if !v.is_finite() {
            return Err(Error::InvalidArgument("samples must be finite".into()));
        }
    }
    let max_level = ((1u64 << b) - 1) as f64;
    let rescale = if max_level > 0.0 { 255.0 / max_level } else { 0.0 };
    let (cols, _rows, width, height) = grid_geometry(n, h, w);
    let mut pixels = vec![0u8; width * height * c];
    for i in 0..n {
        let (row, col) = (i / cols, i % cols);
        let (y0, x0) = (row * (h + 1), col * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = samples.at(&[i, ch, y, x]).floor().clamp(0.0, max_level);
                    let byte = (v * rescale).round().clamp(0.0, 255.0) as u8;
                    pixels[((y0 + y) * width + (x0 + x)) * c + ch] = byte;
                }
            }
        }
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = fs::File::create(path)?;
    write!(out, "{magic}\n{width} {height}\n255\n")?;
    out.write_all(&pixels)?;
    Ok(())
}

fn parse_netpbm(bytes: &[u8], magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let fail = |what: &str| Error::Format(format!("netpbm: {what}"));
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        while *pos < bytes.len() {
            match bytes[*pos] {
                b'#' => {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => *pos += 1,
                _ => break,
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fail("unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != magic {
        return Err(fail(&format!("expected {magic}")));
    }
    let width: usize = token(&mut pos)?.parse().map_err(|_| fail("bad width"))?;
    let height: usize = token(&mut pos)?.parse().map_err(|_| fail("bad height"))?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| fail("bad maxval"))?;
    if maxval != 255 {
        return Err(fail("only maxval 255 is supported"));
    }
    pos += 1;
    let want = width * height * channels;
    let payload = bytes
        .get(pos..pos + want)
        .ok_or_else(|| fail("truncated payload"))?;
    Ok((width, height, payload.to_vec()))
}

/// Parse a binary PGM (P5) file back into `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    parse_netpbm(&fs::read(path)?, "P5", 1)
}

/// Parse a binary PPM (P6) file back into `(width, height, pixels)`,
/// with interleaved RGB bytes.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    parse_netpbm(&fs::read(path)?, "P6", 3)
}
