//! Index stream transforms: delta (gap) encoding of sorted positions and the
//! narrow-width 2D COO encoding.
//!
//! The downscaled COO stream stores all row gaps first, then all column
//! entries. A row gap is one byte; a column entry is two bytes (little-endian)
//! and holds the gap from the previous column within the same row, or the
//! absolute column when the row changed. Values that do not fit are written as
//! the marker (`0xFF` / `0xFFFF`) followed by the full value as a `u32`.

use thiserror::Error;

pub const ROW_ESCAPE: u8 = 0xFF;
pub const COL_ESCAPE: u16 = 0xFFFF;
/// Extra bytes paid by one escaped entry.
pub const ESCAPE_OVERHEAD: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IndexError {
    #[error("indices are not strictly increasing at position {position}")]
    NotStrictlyIncreasing { position: usize },
    #[error("gap at position {position} is zero; gaps after the first must be positive")]
    NonPositiveGap { position: usize },
    #[error("index stream truncated: {0}")]
    Truncated(&'static str),
    #[error("index stream has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("coordinate overflow while decoding index stream")]
    Overflow,
}

/// First index as-is, then successive differences.
pub fn delta_encode_indices(sorted: &[u64]) -> Result<Vec<u64>, IndexError> {
    let mut out = Vec::with_capacity(sorted.len());
    let mut prev = None;
    for (position, &i) in sorted.iter().enumerate() {
        match prev {
            None => out.push(i),
            Some(p) if i > p => out.push(i - p),
            Some(_) => return Err(IndexError::NotStrictlyIncreasing { position }),
        }
        prev = Some(i);
    }
    Ok(out)
}

pub fn delta_decode_indices(gaps: &[u64]) -> Result<Vec<u64>, IndexError> {
    let mut out = Vec::with_capacity(gaps.len());
    let mut acc: Option<u64> = None;
    for (position, &g) in gaps.iter().enumerate() {
        let next = match acc {
            None => g,
            Some(_) if g == 0 => return Err(IndexError::NonPositiveGap { position }),
            Some(a) => a.checked_add(g).ok_or(IndexError::Overflow)?,
        };
        out.push(next);
        acc = Some(next);
    }
    Ok(out)
}

/// Row gaps and per-row column entries for coordinates sorted by `(row, col)`.
pub(crate) fn coo_gaps(rows: &[u32], cols: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut row_gaps = Vec::with_capacity(rows.len());
    let mut col_entries = Vec::with_capacity(cols.len());
    let mut prev: Option<(u32, u32)> = None;
    for (&r, &c) in rows.iter().zip(cols) {
        let (rg, ce) = match prev {
            None => (r, c),
            Some((pr, pc)) if pr == r => (0, c - pc),
            Some((pr, _)) => (r - pr, c),
        };
        row_gaps.push(rg);
        col_entries.push(ce);
        prev = Some((r, c));
    }
    (row_gaps, col_entries)
}

/// Inverse of [`coo_gaps`], validating strict `(row, col)` order.
pub(crate) fn coo_from_gaps(row_gaps: &[u32], col_entries: &[u32]) -> Result<(Vec<u32>, Vec<u32>), IndexError> {
    let mut rows = Vec::with_capacity(row_gaps.len());
    let mut cols = Vec::with_capacity(col_entries.len());
    let mut prev: Option<(u32, u32)> = None;
    for (position, (&rg, &ce)) in row_gaps.iter().zip(col_entries).enumerate() {
        let (r, c) = match prev {
            None => (rg, ce),
            Some((pr, pc)) if rg == 0 => {
                if ce == 0 {
                    return Err(IndexError::NonPositiveGap { position });
                }
                (pr, pc.checked_add(ce).ok_or(IndexError::Overflow)?)
            }
            Some((pr, _)) => (pr.checked_add(rg).ok_or(IndexError::Overflow)?, ce),
        };
        rows.push(r);
        cols.push(c);
        prev = Some((r, c));
    }
    Ok((rows, cols))
}

/// Narrow-width encoding of sorted 2D coordinates.
///
/// Coordinates must be sorted by `(row, col)` without duplicates.
pub fn downscale_coo(rows: &[u32], cols: &[u32]) -> Vec<u8> {
    assert_eq!(rows.len(), cols.len(), "row and column counts differ");
    let (row_gaps, col_entries) = coo_gaps(rows, cols);
    let mut out = Vec::with_capacity(rows.len() * 3);
    for g in row_gaps {
        if g < ROW_ESCAPE as u32 {
            out.push(g as u8);
        } else {
            out.push(ROW_ESCAPE);
            out.extend_from_slice(&g.to_le_bytes());
        }
    }
    for c in col_entries {
        if c < COL_ESCAPE as u32 {
            out.extend_from_slice(&(c as u16).to_le_bytes());
        } else {
            out.extend_from_slice(&COL_ESCAPE.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

/// Number of escaped entries the downscaled encoding uses.
pub fn downscale_escapes(rows: &[u32], cols: &[u32]) -> usize {
    let (row_gaps, col_entries) = coo_gaps(rows, cols);
    row_gaps.iter().filter(|&&g| g >= ROW_ESCAPE as u32).count()
        + col_entries.iter().filter(|&&c| c >= COL_ESCAPE as u32).count()
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], IndexError> {
        if self.buf.len() < N {
            return Err(IndexError::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(N);
        self.buf = rest;
        Ok(head.try_into().unwrap())
    }
}

/// Decodes `count` coordinates from a downscaled stream.
pub fn upscale_coo(payload: &[u8], count: usize) -> Result<(Vec<u32>, Vec<u32>), IndexError> {
    let mut rd = Reader { buf: payload };
    let mut row_gaps = Vec::with_capacity(count.min(payload.len()));
    for _ in 0..count {
        let [b] = rd.take::<1>("row gaps")?;
        row_gaps.push(if b == ROW_ESCAPE {
            u32::from_le_bytes(rd.take::<4>("escaped row gap")?)
        } else {
            b as u32
        });
    }
    let mut col_entries = Vec::with_capacity(row_gaps.len());
    for _ in 0..count {
        let c = u16::from_le_bytes(rd.take::<2>("column entries")?);
        col_entries.push(if c == COL_ESCAPE {
            u32::from_le_bytes(rd.take::<4>("escaped column entry")?)
        } else {
            c as u32
        });
    }
    if !rd.buf.is_empty() {
        return Err(IndexError::TrailingBytes(rd.buf.len()));
    }
    coo_from_gaps(&row_gaps, &col_entries)
}

/// Packs `u32`s little-endian.
pub(crate) fn pack_u32(values: impl IntoIterator<Item = u32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Unpacks exactly `count` little-endian `u32`s from the front of `buf`.
pub(crate) fn unpack_u32<'a>(buf: &'a [u8], count: usize, what: &'static str) -> Result<(Vec<u32>, &'a [u8]), IndexError> {
    let need = count.checked_mul(4).ok_or(IndexError::Overflow)?;
    if buf.len() < need {
        return Err(IndexError::Truncated(what));
    }
    let (head, rest) = buf.split_at(need);
    let vals = head.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((vals, rest))
}
