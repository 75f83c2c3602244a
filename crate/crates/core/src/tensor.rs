//! Dense row-major `f64` tensors and the STNS binary format.
//!
//! STNS layout (all integers little-endian):
//!
//! ```text
//! b"STNS" | u8 rank | rank x u32 dims | payload
//! ```
//!
//! The payload is either `prod(dims)` f64 values or `prod(dims)` bytes (the
//! u8 variant used for label maps). Readers tell the two apart from the
//! payload length, which is unambiguous because every dimension is positive.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const STNS_MAGIC: &[u8; 4] = b"STNS";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_stns<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, &self.shape)?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_stns_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.rank() + 8 * self.numel());
        self.write_stns(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parses a full f64 STNS blob. Trailing or missing bytes are errors.
    pub fn from_stns_bytes(bytes: &[u8]) -> Result<Self> {
        match StnsPayload::parse(bytes)? {
            StnsPayload::F64(t) => Ok(t),
            StnsPayload::U8 { .. } => Err(Error::shape("expected f64 payload, found u8 payload")),
        }
    }

    pub fn read_stns<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_stns_bytes(&bytes)
    }
}

/// A decoded STNS blob of either payload kind.
#[derive(Clone, Debug, PartialEq)]
pub enum StnsPayload {
    F64(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl StnsPayload {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != STNS_MAGIC {
            return Err(Error::shape("missing STNS magic"));
        }
        let rank = bytes[4] as usize;
        let header_len = 5 + 4 * rank;
        if rank == 0 || bytes.len() < header_len {
            return Err(Error::shape("truncated STNS header"));
        }
        let shape: Vec<usize> = bytes[5..header_len]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("zero dimension in STNS header"));
        }
        let numel: usize = shape.iter().product();
        let payload = &bytes[header_len..];
        if payload.len() == numel * 8 {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            Ok(StnsPayload::F64(Tensor { shape, data }))
        } else if payload.len() == numel {
            Ok(StnsPayload::U8 { shape, data: payload.to_vec() })
        } else {
            Err(Error::shape(format!(
                "STNS payload of {} bytes matches neither f64 nor u8 for {numel} elements",
                payload.len()
            )))
        }
    }
}

/// Encodes a u8-payload STNS blob.
pub fn u8_stns_bytes(shape: &[usize], data: &[u8]) -> Vec<u8> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(5 + 4 * shape.len() + data.len());
    write_header(&mut out, shape).expect("writing to a Vec cannot fail");
    out.extend_from_slice(data);
    out
}

fn write_header<W: Write>(w: &mut W, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > u8::MAX as usize {
        return Err(Error::shape(format!("unsupported rank {}", shape.len())));
    }
    w.write_all(STNS_MAGIC)?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}
