//! Bit-exact 32-bit range coder over fixed-point probability tables.
//!
//! Probabilities are 16-bit: a table is a strictly increasing CDF from 0 to
//! 65536, so every symbol keeps mass >= 1 and stays codable. The encoder
//! renormalizes byte-wise (LZMA-style carry pipeline) and terminates by
//! rounding `low` up to a multiple of 2^24 inside the final interval, which
//! costs exactly one byte beyond the renormalization bytes; the decoder
//! reads zeros past the end of the payload (at most three such reads occur
//! on a well-formed stream). Payload length is therefore bounded by
//! sum(-log2 p) + 32 bits over any symbol sequence.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const RANGE_TOP: u32 = 1 << 24;

/// Fixed-point cumulative distribution over N symbols, shared verbatim by
/// encoder and decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbTable {
    cdf: Vec<u32>,
}

impl ProbTable {
    pub fn from_cdf(cdf: Vec<u32>) -> Result<Self> {
        if cdf.len() < 3 {
            return Err(Error::config("probability table needs at least 2 symbols"));
        }
        if cdf[0] != 0 || *cdf.last().unwrap() != PROB_TOTAL {
            return Err(Error::config("cdf must start at 0 and end at 65536"));
        }
        if cdf.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("cdf must be strictly increasing"));
        }
        Ok(ProbTable { cdf })
    }

    pub fn uniform(n: usize) -> Self {
        let p = vec![1.0 / n as f64; n];
        quantize_probs(&p).expect("uniform distribution is valid")
    }

    pub fn symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    #[inline]
    pub fn bounds(&self, symbol: usize) -> (u32, u32) {
        (self.cdf[symbol], self.cdf[symbol + 1])
    }

    pub fn mass(&self, symbol: usize) -> u32 {
        self.cdf[symbol + 1] - self.cdf[symbol]
    }

    /// Fixed-point probability of a symbol.
    pub fn prob(&self, symbol: usize) -> f64 {
        self.mass(symbol) as f64 / PROB_TOTAL as f64
    }

    /// -log2 of the fixed-point probability, in bits.
    pub fn self_info_bits(&self, symbol: usize) -> f64 {
        -self.prob(symbol).log2()
    }
}

/// Deterministic fixed-point quantization of a real distribution. Every
/// symbol receives mass >= 1; the remaining 65536 - N units are apportioned
/// by largest remainder (ties broken toward lower symbols).
pub fn quantize_probs(p: &[f64]) -> Result<ProbTable> {
    let n = p.len();
    if n < 2 {
        return Err(Error::config("distribution needs at least 2 symbols"));
    }
    if n as u32 > PROB_TOTAL {
        return Err(Error::config("too many symbols for 16-bit probabilities"));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::config("probabilities must be finite and nonnegative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!("probabilities sum to {sum}, expected 1")));
    }
    let budget = (PROB_TOTAL as usize - n) as f64;
    let mut masses = vec![1u32; n];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(n);
    let mut assigned = 0u32;
    for (i, &pi) in p.iter().enumerate() {
        let ideal = pi / sum * budget;
        let fl = ideal.floor();
        masses[i] += fl as u32;
        assigned += fl as u32;
        remainders.push((i, ideal - fl));
    }
    let mut leftover = PROB_TOTAL - n as u32 - assigned;
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut k = 0;
    while leftover > 0 {
        masses[remainders[k].0] += 1;
        leftover -= 1;
        k += 1;
    }
    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for m in masses {
        acc += m;
        cdf.push(acc);
    }
    debug_assert_eq!(acc, PROB_TOTAL);
    ProbTable::from_cdf(cdf)
}

/// Streaming range encoder.
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    have_cache: bool,
    ff_count: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            have_cache: false,
            ff_count: 0,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, symbol: usize, table: &ProbTable) {
        debug_assert!(symbol < table.symbols());
        let (cl, ch) = table.bounds(symbol);
        let r = self.range as u64;
        let lo = (r * cl as u64) >> PROB_BITS;
        let hi = (r * ch as u64) >> PROB_BITS;
        self.low += lo;
        self.range = (hi - lo) as u32;
        while self.range < RANGE_TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> 32) as u8;
        if carry == 1 || (self.low as u32) < 0xFF00_0000 {
            if self.have_cache {
                self.out.push(self.cache.wrapping_add(carry));
            }
            while self.ff_count > 0 {
                self.out.push(0xFFu8.wrapping_add(carry));
                self.ff_count -= 1;
            }
            self.cache = (self.low >> 24) as u8;
            self.have_cache = true;
        } else {
            self.ff_count += 1;
        }
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Terminates the stream: picks the multiple of 2^24 inside the final
    /// interval and emits its single significant byte.
    pub fn finish(mut self) -> Vec<u8> {
        self.low = (self.low + (RANGE_TOP as u64 - 1)) & !(RANGE_TOP as u64 - 1);
        self.shift_low();
        self.shift_low();
        self.out
    }
}

/// Streaming range decoder over a byte slice. Reads past the end yield
/// zeros; a well-formed stream needs at most three such reads, so a fourth
/// flags corruption.
pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    virtual_reads: u32,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            bytes,
            pos: 0,
            virtual_reads: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            let b = d.next_byte()?;
            d.code = (d.code << 8) | b as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            self.pos += 1;
            Ok(b)
        } else {
            self.virtual_reads += 1;
            if self.virtual_reads > 3 {
                Err(Error::corrupt("range decoder ran past end of payload"))
            } else {
                Ok(0)
            }
        }
    }

    pub fn decode(&mut self, table: &ProbTable) -> Result<usize> {
        let r = self.range as u64;
        let c = self.code as u64;
        let n = table.symbols();
        let mut sym = None;
        let mut lo = 0u64;
        for s in 0..n {
            let (_, ch) = table.bounds(s);
            let hi = (r * ch as u64) >> PROB_BITS;
            if c < hi {
                sym = Some((s, lo, hi));
                break;
            }
            lo = hi;
        }
        let (s, lo, hi) = sym.ok_or_else(|| Error::corrupt("decoded value outside range"))?;
        self.code -= lo as u32;
        self.range = (hi - lo) as u32;
        while self.range < RANGE_TOP {
            self.range <<= 8;
            let b = self.next_byte()?;
            self.code = (self.code << 8) | b as u32;
        }
        Ok(s)
    }

    /// Validates the end-of-stream position: every payload byte consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::corrupt(format!(
                "payload has {} unconsumed bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
