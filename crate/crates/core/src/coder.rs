//! 32-bit range coder with 16-bit probabilities and byte-wise renormalization.
//!
//! Pure integer arithmetic: the same symbols and tables give the same bytes on
//! every platform. Carries are resolved with a cached byte plus a run of
//! pending `0xFF`s. The leading byte of a conventional carry-cache coder is
//! always zero and is not written.

use thiserror::Error;

use crate::entropy::{CmfTable, ESCAPE_RAW_BITS, PRECISION_BITS};

const TOP: u32 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoderError {
    #[error("symbol {0} does not fit the 32-bit escape value")]
    SymbolOutOfRange(i64),
    #[error("{symbols} symbols but {tables} table assignments")]
    TableCount { symbols: usize, tables: usize },
    #[error("stream truncated: needed byte {needed} of {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} unread bytes after the last symbol")]
    TrailingBytes(usize),
}

/// Coded bytes plus their exact payload length in bits.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
    pub bit_length: u64,
}

impl Bitstream {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let bit_length = bytes.len() as u64 * 8;
        Self { bytes, bit_length }
    }
}

/// Which table codes the symbol at a given position.
pub trait TableAssignment {
    fn table_for(&self, position: usize) -> &CmfTable;
    /// Number of positions covered, when bounded.
    fn len_hint(&self) -> Option<usize> {
        None
    }
}

impl TableAssignment for [&CmfTable] {
    fn table_for(&self, position: usize) -> &CmfTable {
        self[position]
    }

    fn len_hint(&self) -> Option<usize> {
        Some(self.len())
    }
}

impl TableAssignment for Vec<&CmfTable> {
    fn table_for(&self, position: usize) -> &CmfTable {
        self[position]
    }

    fn len_hint(&self) -> Option<usize> {
        Some(self.len())
    }
}

/// Every position uses the same table.
pub struct SingleTable<'a>(pub &'a CmfTable);

impl TableAssignment for SingleTable<'_> {
    fn table_for(&self, _position: usize) -> &CmfTable {
        self.0
    }
}

/// Latent layout: channel-major, then row-major within a channel plane.
pub struct ChannelMajor<'a> {
    pub tables: &'a [CmfTable],
    pub plane: usize,
}

impl TableAssignment for ChannelMajor<'_> {
    fn table_for(&self, position: usize) -> &CmfTable {
        &self.tables[(position / self.plane) % self.tables.len()]
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    started: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            started: false,
            out: Vec::new(),
        }
    }

    /// Narrows to `[cum, cum + freq)` out of `2^16`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << PRECISION_BITS);
        let r = self.range as u64;
        let lo = (r * cum as u64) >> PRECISION_BITS;
        let hi = (r * (cum + freq) as u64) >> PRECISION_BITS;
        self.low += lo;
        self.range = (hi - lo) as u32;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes a 16-bit value with a flat distribution.
    pub fn encode_raw16(&mut self, value: u16) {
        self.encode(value as u32, 1);
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                if self.started {
                    self.out.push(byte.wrapping_add(carry));
                } else {
                    debug_assert_eq!(byte.wrapping_add(carry), 0);
                    self.started = true;
                }
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Bitstream {
        for _ in 0..5 {
            self.shift_low();
        }
        Bitstream::from_bytes(self.out)
    }
}

pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self, CoderError> {
        let mut d = Self {
            bytes,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8, CoderError> {
        let b = *self.bytes.get(self.pos).ok_or(CoderError::Truncated {
            needed: self.pos + 1,
            available: self.bytes.len(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    /// The 16-bit target the next symbol's interval must contain.
    pub fn peek(&self) -> u32 {
        let v = self.code.min(self.range - 1) as u64;
        ((((v + 1) << PRECISION_BITS) - 1) / self.range as u64) as u32
    }

    /// Consumes the interval `[cum, cum + freq)` found via [`Self::peek`].
    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<(), CoderError> {
        let r = self.range as u64;
        let lo = (r * cum as u64) >> PRECISION_BITS;
        let hi = (r * (cum + freq) as u64) >> PRECISION_BITS;
        // A corrupt stream may leave `code` outside the interval; wrap rather
        // than panic and let the caller see garbage or an error.
        self.code = self.code.wrapping_sub(lo as u32);
        self.range = (hi - lo) as u32;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(())
    }

    pub fn decode_raw16(&mut self) -> Result<u16, CoderError> {
        let v = self.peek();
        self.consume(v, 1)?;
        Ok(v as u16)
    }

    pub fn bytes_consumed(&self) -> usize {
        self.pos
    }
}

fn encode_one(enc: &mut RangeEncoder, table: &CmfTable, symbol: i64) -> Result<(), CoderError> {
    match table.index_of(symbol) {
        Some(i) => {
            let (cum, freq) = table.interval(i);
            enc.encode(cum, freq);
        }
        None => {
            let raw = i32::try_from(symbol).map_err(|_| CoderError::SymbolOutOfRange(symbol))? as u32;
            let (cum, freq) = table.interval(table.escape_index());
            enc.encode(cum, freq);
            debug_assert_eq!(ESCAPE_RAW_BITS, 32);
            enc.encode_raw16((raw >> 16) as u16);
            enc.encode_raw16(raw as u16);
        }
    }
    Ok(())
}

fn decode_one(dec: &mut RangeDecoder<'_>, table: &CmfTable) -> Result<i64, CoderError> {
    let index = table.lookup(dec.peek());
    let (cum, freq) = table.interval(index);
    dec.consume(cum, freq)?;
    if index == table.escape_index() {
        let hi = dec.decode_raw16()? as u32;
        let lo = dec.decode_raw16()? as u32;
        Ok(((hi << 16) | lo) as i32 as i64)
    } else {
        Ok(table.symbol_at(index))
    }
}

/// Codes `symbols[i]` with `tables.table_for(i)`.
pub fn encode_symbols<A: TableAssignment + ?Sized>(symbols: &[i64], tables: &A) -> Result<Bitstream, CoderError> {
    if let Some(n) = tables.len_hint() {
        if n != symbols.len() {
            return Err(CoderError::TableCount {
                symbols: symbols.len(),
                tables: n,
            });
        }
    }
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        encode_one(&mut enc, tables.table_for(i), s)?;
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_symbols`]; the whole stream must be consumed.
pub fn decode_symbols<A: TableAssignment + ?Sized>(
    stream: &Bitstream,
    tables: &A,
    count: usize,
) -> Result<Vec<i64>, CoderError> {
    if let Some(n) = tables.len_hint() {
        if n != count {
            return Err(CoderError::TableCount { symbols: count, tables: n });
        }
    }
    let bytes = &stream.bytes[..stream.bytes.len().min(stream.bit_length.div_ceil(8) as usize)];
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        out.push(decode_one(&mut dec, tables.table_for(i))?);
    }
    let left = bytes.len() - dec.bytes_consumed();
    if left != 0 {
        return Err(CoderError::TrailingBytes(left));
    }
    Ok(out)
}

/// Ideal code length `sum(-log2 q)` of `symbols` under the quantized tables,
/// escape costs included.
pub fn ideal_code_length<A: TableAssignment + ?Sized>(symbols: &[i64], tables: &A) -> f64 {
    symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| tables.table_for(i).code_length_bits(s))
        .sum()
}
