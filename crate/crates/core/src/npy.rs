//! NPY v1.0 reader/writer for little-endian `f32` arrays in C order.
//!
//! Format reference: <https://numpy.org/doc/stable/reference/generated/numpy.lib.format.html>.
//! Anything other than `'<f4'`, C order and version 1.0 is rejected.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE_LEN: usize = MAGIC.len() + 2 + 2;
const HEADER_ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("bad magic string (not an NPY file)")]
    BadMagic,
    #[error("unsupported NPY version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("malformed header field '{field}': {detail}")]
    MalformedHeader { field: &'static str, detail: String },
    #[error("unsupported dtype '{0}'")]
    UnsupportedDtype(String),
    #[error("fortran_order arrays are not supported")]
    FortranOrder,
    #[error("truncated payload: header shape needs {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload has {actual} bytes, header shape needs {expected}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn malformed(field: &'static str, detail: impl Into<String>) -> NpyError {
    NpyError::MalformedHeader {
        field,
        detail: detail.into(),
    }
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor, NpyError> {
    let mut reader = BufReader::new(File::open(path)?);
    read_tensor(&mut reader)
}

pub fn save_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<(), NpyError> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_tensor(&mut writer, tensor)?;
    writer.flush()?;
    Ok(())
}

pub fn read_tensor<R: Read>(reader: &mut R) -> Result<Tensor, NpyError> {
    let mut preamble = [0u8; PREAMBLE_LEN];
    reader.read_exact(&mut preamble).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => NpyError::BadMagic,
        _ => NpyError::Io(e),
    })?;
    if &preamble[..MAGIC.len()] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let (major, minor) = (preamble[6], preamble[7]);
    if (major, minor) != (1, 0) {
        return Err(NpyError::UnsupportedVersion(major, minor));
    }
    let header_len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut header = vec![0u8; header_len];
    reader
        .read_exact(&mut header)
        .map_err(|_| malformed("header_len", format!("header shorter than declared {header_len} bytes")))?;
    let header = std::str::from_utf8(&header).map_err(|_| malformed("header", "not ASCII"))?;
    let dict = HeaderDict::parse(header)?;

    if dict.descr != "<f4" {
        return Err(NpyError::UnsupportedDtype(dict.descr));
    }
    if dict.fortran_order {
        return Err(NpyError::FortranOrder);
    }
    if dict.shape.is_empty() {
        return Err(malformed("shape", "zero-dimensional arrays are not supported"));
    }

    let count = dict
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed("shape", "element count overflows"))?;
    let expected = count * 4;
    let mut payload = Vec::with_capacity(expected);
    reader.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(NpyError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(NpyError::TrailingBytes {
            expected,
            actual: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(dict.shape, data)?)
}

pub fn write_tensor<W: Write>(writer: &mut W, tensor: &Tensor) -> io::Result<()> {
    let shape = match tensor.shape() {
        [single] => format!("({single},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    // pad with spaces, terminate with '\n', total length a multiple of 64
    let unpadded = PREAMBLE_LEN + header.len() + 1;
    let padding = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    header.extend(std::iter::repeat_n(' ', padding));
    header.push('\n');
    let header_len = u16::try_from(header.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "shape too long for NPY v1.0 header"))?;

    writer.write_all(MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&header_len.to_le_bytes())?;
    writer.write_all(header.as_bytes())?;
    for v in tensor.data() {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[derive(Debug)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    fn parse(text: &str) -> Result<Self, NpyError> {
        let mut p = Parser::new(text.trim_end_matches(['\n', ' ', '\0']));
        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;

        p.expect('{', "header")?;
        loop {
            p.skip_ws();
            if p.eat('}') {
                break;
            }
            let key = p.string("header")?;
            p.expect(':', "header")?;
            match key.as_str() {
                "descr" => descr = Some(p.string("descr")?),
                "fortran_order" => fortran_order = Some(p.boolean("fortran_order")?),
                "shape" => shape = Some(p.tuple("shape")?),
                _ => return Err(malformed("header", format!("unexpected key '{key}'"))),
            }
            p.skip_ws();
            if !p.eat(',') {
                p.expect('}', "header")?;
                break;
            }
        }
        p.skip_ws();
        if !p.at_end() {
            return Err(malformed("header", "trailing characters after dict"));
        }
        Ok(Self {
            descr: descr.ok_or_else(|| malformed("descr", "missing"))?,
            fortran_order: fortran_order.ok_or_else(|| malformed("fortran_order", "missing"))?,
            shape: shape.ok_or_else(|| malformed("shape", "missing"))?,
        })
    }
}

struct Parser<'a> {
    rest: &'a str,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Self { rest: text }
    }

    fn skip_ws(&mut self) {
        self.rest = self.rest.trim_start();
    }

    fn at_end(&self) -> bool {
        self.rest.is_empty()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        match self.rest.strip_prefix(c) {
            Some(r) => {
                self.rest = r;
                true
            }
            None => false,
        }
    }

    fn expect(&mut self, c: char, field: &'static str) -> Result<(), NpyError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(malformed(field, format!("expected '{c}'")))
        }
    }

    fn string(&mut self, field: &'static str) -> Result<String, NpyError> {
        self.skip_ws();
        let quote = match self.rest.chars().next() {
            Some(q @ ('\'' | '"')) => q,
            _ => return Err(malformed(field, "expected quoted string")),
        };
        let body = &self.rest[1..];
        let end = body
            .find(quote)
            .ok_or_else(|| malformed(field, "unterminated string"))?;
        let s = body[..end].to_string();
        self.rest = &body[end + 1..];
        Ok(s)
    }

    fn boolean(&mut self, field: &'static str) -> Result<bool, NpyError> {
        self.skip_ws();
        for (word, value) in [("True", true), ("False", false)] {
            if let Some(r) = self.rest.strip_prefix(word) {
                self.rest = r;
                return Ok(value);
            }
        }
        Err(malformed(field, "expected True or False"))
    }

    fn tuple(&mut self, field: &'static str) -> Result<Vec<usize>, NpyError> {
        self.expect('(', field)?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(')') {
                break;
            }
            let digits = self.rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(self.rest.len());
            if digits == 0 {
                return Err(malformed(field, "expected non-negative integer"));
            }
            let dim = self.rest[..digits]
                .parse()
                .map_err(|_| malformed(field, "extent out of range"))?;
            dims.push(dim);
            self.rest = &self.rest[digits..];
            // numpy may write `3L` on very old versions
            let _ = self.eat('L');
            if !self.eat(',') {
                self.expect(')', field)?;
                break;
            }
        }
        Ok(dims)
    }
}
