//! Reader and writer for the FROSTT `.tns` text format.
//!
//! Each data line holds N 1-based indices followed by one value, separated by
//! whitespace. Blank lines and lines starting with `#` are skipped. A comment
//! of the form `# shape: I0 I1 ... IN-1` declares the mode lengths; without it
//! the shape is inferred from the largest index seen in each mode.

use crate::tensor::{SparseTensor, TensorError, MIN_MODES};
use crate::value::Value;
use std::io::{self, BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TnsError {
    #[error("no data lines")]
    NoData,
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {found} columns is too few for a tensor of at least {MIN_MODES} modes")]
    TooFewColumns { line: usize, found: usize },
    #[error("line {line}: index must be positive, got {token}")]
    NonPositiveIndex { line: usize, token: String },
    #[error("line {line}: cannot parse {token:?} as a number")]
    BadToken { line: usize, token: String },
    #[error("line {line}: value {token} is not finite")]
    NonFinite { line: usize, token: String },
    #[error("line {line}: index {index} exceeds declared length {len} of mode {mode}")]
    BeyondShape {
        line: usize,
        mode: usize,
        index: u64,
        len: u64,
    },
    #[error("line {line}: duplicate of the index tuple on line {first_line}")]
    Duplicate { line: usize, first_line: usize },
    #[error("line {line}: malformed shape header")]
    BadHeader { line: usize },
    #[error("declared shape has {declared} modes but data lines have {found}")]
    ShapeArity { declared: usize, found: usize },
    #[error("line {line}: invalid UTF-8")]
    Utf8 { line: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Options for [`parse_tns`].
#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Sum the values of repeated index tuples instead of rejecting them.
    pub coalesce_duplicates: bool,
    /// Mode lengths to use instead of the header or inferred shape.
    pub shape: Option<Vec<u64>>,
    /// Label stored on the resulting tensor.
    pub name: Option<String>,
}

/// Counts gathered while loading a file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub data_lines: usize,
    pub nnz: usize,
    pub zero_values: usize,
    pub duplicates: usize,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub tensor: SparseTensor,
    pub stats: LoadStats,
}

enum Header {
    Shape(Vec<u64>),
    Name(String),
}

fn parse_header(body: &str, line: usize) -> Result<Option<Header>, TnsError> {
    let Some((key, rest)) = body.split_once(':') else {
        return Ok(None);
    };
    let key = key.trim();
    if key.eq_ignore_ascii_case("name") {
        return Ok(Some(Header::Name(rest.trim().to_owned())));
    }
    if !key.eq_ignore_ascii_case("shape") {
        return Ok(None);
    }
    let dims: Result<Vec<u64>, _> = rest.split_whitespace().map(str::parse::<u64>).collect();
    match dims {
        Ok(d) if !d.is_empty() && d.iter().all(|&x| x > 0) => Ok(Some(Header::Shape(d))),
        _ => Err(TnsError::BadHeader { line }),
    }
}

fn parse_index(token: &str, line: usize) -> Result<u64, TnsError> {
    match token.parse::<i128>() {
        Ok(v) if v <= 0 => Err(TnsError::NonPositiveIndex {
            line,
            token: token.to_owned(),
        }),
        Ok(v) => u64::try_from(v - 1).map_err(|_| TnsError::BadToken {
            line,
            token: token.to_owned(),
        }),
        Err(_) => Err(TnsError::BadToken {
            line,
            token: token.to_owned(),
        }),
    }
}

fn parse_value(token: &str, line: usize) -> Result<Value, TnsError> {
    let v: Value = token.parse().map_err(|_| TnsError::BadToken {
        line,
        token: token.to_owned(),
    })?;
    if !v.is_finite() {
        return Err(TnsError::NonFinite {
            line,
            token: token.to_owned(),
        });
    }
    Ok(v)
}

/// Parses a `.tns` stream into a tensor with 0-based indices.
pub fn parse_tns<R: BufRead>(mut reader: R, options: &ParseOptions) -> Result<Loaded, TnsError> {
    let mut header_shape: Option<Vec<u64>> = None;
    let mut header_name: Option<String> = None;
    let mut modes: Option<usize> = None;
    let mut indices: Vec<u64> = Vec::new();
    let mut values: Vec<Value> = Vec::new();
    let mut line_of: Vec<usize> = Vec::new();
    let mut buf = Vec::new();
    let mut line_no = 0;

    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let text = std::str::from_utf8(&buf).map_err(|_| TnsError::Utf8 { line: line_no })?;
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        if let Some(body) = text.strip_prefix('#') {
            match parse_header(body, line_no)? {
                Some(Header::Shape(shape)) => header_shape = Some(shape),
                Some(Header::Name(name)) => header_name = Some(name),
                None => {}
            }
            continue;
        }
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let n = match modes {
            Some(n) => {
                if tokens.len() != n + 1 {
                    return Err(TnsError::ColumnCount {
                        line: line_no,
                        expected: n + 1,
                        found: tokens.len(),
                    });
                }
                n
            }
            None => {
                if tokens.len() < MIN_MODES + 1 {
                    return Err(TnsError::TooFewColumns {
                        line: line_no,
                        found: tokens.len(),
                    });
                }
                modes = Some(tokens.len() - 1);
                tokens.len() - 1
            }
        };
        for tok in &tokens[..n] {
            indices.push(parse_index(tok, line_no)?);
        }
        values.push(parse_value(tokens[n], line_no)?);
        line_of.push(line_no);
    }

    let n = modes.ok_or(TnsError::NoData)?;
    let declared = options.shape.clone().or(header_shape);
    let shape = match declared {
        Some(shape) => {
            if shape.len() != n {
                return Err(TnsError::ShapeArity {
                    declared: shape.len(),
                    found: n,
                });
            }
            for (e, tuple) in indices.chunks_exact(n).enumerate() {
                for (mode, (&i, &len)) in tuple.iter().zip(&shape).enumerate() {
                    if i >= len {
                        return Err(TnsError::BeyondShape {
                            line: line_of[e],
                            mode,
                            index: i + 1,
                            len,
                        });
                    }
                }
            }
            shape
        }
        None => {
            let mut shape = vec![0u64; n];
            for tuple in indices.chunks_exact(n) {
                for (len, &i) in shape.iter_mut().zip(tuple) {
                    *len = (*len).max(i + 1);
                }
            }
            shape
        }
    };

    let data_lines = values.len();
    let groups = crate::tensor::duplicate_groups(&indices, n);
    let duplicates: usize = groups.iter().map(|g| g.len() - 1).sum();
    if let Some(g) = groups.iter().min_by_key(|g| g[1]) {
        if !options.coalesce_duplicates {
            return Err(TnsError::Duplicate {
                line: line_of[g[1]],
                first_line: line_of[g[0]],
            });
        }
    }
    if duplicates > 0 {
        let mut keep = vec![true; data_lines];
        for g in &groups {
            // Sum in input order into the first occurrence.
            let mut sum = values[g[0]];
            for &e in &g[1..] {
                sum += values[e];
                keep[e] = false;
            }
            values[g[0]] = sum;
        }
        let mut k = 0;
        let mut out_idx = Vec::with_capacity(indices.len());
        values.retain(|_| {
            let kept = keep[k];
            if kept {
                out_idx.extend_from_slice(&indices[k * n..(k + 1) * n]);
            }
            k += 1;
            kept
        });
        indices = out_idx;
    }

    let name = options.name.clone().or(header_name).unwrap_or_default();
    let tensor = SparseTensor::from_parts(name, shape, indices, values)?;
    let stats = LoadStats {
        data_lines,
        nnz: tensor.nnz(),
        zero_values: tensor.zero_count(),
        duplicates,
    };
    Ok(Loaded { tensor, stats })
}

/// Parses `.tns` text held in memory.
pub fn parse_tns_str(text: &str, options: &ParseOptions) -> Result<Loaded, TnsError> {
    parse_tns(text.as_bytes(), options)
}

/// Writes a tensor as `.tns` with a shape header and 1-based indices.
///
/// Values use Rust's shortest round-trip formatting, so reading the output
/// back yields bit-identical values.
pub fn write_tns<W: Write>(tensor: &SparseTensor, mut out: W) -> io::Result<()> {
    if !tensor.name().is_empty() {
        writeln!(out, "# name: {}", tensor.name().replace('\n', " "))?;
    }
    write!(out, "# shape:")?;
    for len in tensor.shape() {
        write!(out, " {len}")?;
    }
    writeln!(out)?;
    for e in tensor.elements() {
        for i in e.indices {
            write!(out, "{} ", i + 1)?;
        }
        writeln!(out, "{:?}", e.value)?;
    }
    out.flush()
}
