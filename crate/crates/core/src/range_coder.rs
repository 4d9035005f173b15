//! Carry-counting byte-oriented range coder.
//!
//! This is the classic 32-bit-range, 64-bit-low layout: the encoder defers
//! bytes that might still receive a carry (a pending `cache` byte plus a run
//! of 0xFF bytes tracked by `cache_size`), and resolves them the moment the
//! carry is known. The stream therefore always starts with one lead byte
//! (the initial zero cache) which the decoder skips, and `finish` appends
//! five shift-outs so the decoder can always fill its 32-bit code window.
//! An empty stream is exactly five zero bytes.
//!
//! All frequencies are expressed against a fixed total of `1 << 16`, the
//! resolution of the quantized CDF tables. Encoding a symbol costs
//! `-log2(freq / 65536)` bits plus at most a few bytes of stream overhead,
//! and decode is bit-exact against encode for any symbol sequence.

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
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
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Narrow the interval to `[cum, cum + freq)` out of `total`.
    /// Requires `freq > 0` and `cum + freq <= total`.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0, "zero-frequency symbol");
        debug_assert!(cum.checked_add(freq).is_some_and(|e| e <= total));
        self.range /= total;
        self.low += u64::from(cum) * u64::from(self.range);
        self.range *= freq;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        let low32 = self.low as u32;
        let carry = (self.low >> 32) as u8;
        if low32 < 0xFF00_0000 || carry != 0 {
            self.out.push(self.cache.wrapping_add(carry));
            for _ in 1..self.cache_size {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.cache = (low32 >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        // Keep only the unresolved 32 low bits; the byte just consumed is
        // either emitted or tracked in cache/cache_size.
        self.low = u64::from(low32 << 8);
    }

    /// Flush pending state and return the byte stream.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    range: u32,
    code: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    /// Start decoding: skip the lead byte and load four code bytes.
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            range: u32::MAX,
            code: 0,
            bytes,
            pos: 1,
        };
        for _ in 0..4 {
            d.code = d.code << 8 | u32::from(d.next_byte());
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Scaled code value in `[0, total)`; look up the symbol whose
    /// cumulative interval contains it, then call [`Self::decode_update`].
    pub fn decode_freq(&mut self, total: u32) -> u32 {
        self.range /= total;
        (self.code / self.range).min(total - 1)
    }

    pub fn decode_update(&mut self, cum: u32, freq: u32) {
        self.code -= cum * self.range;
        self.range *= freq;
        while self.range < TOP {
            self.code = self.code << 8 | u32::from(self.next_byte());
            self.range <<= 8;
        }
    }

    /// Bytes consumed from the input so far.
    pub fn consumed(&self) -> usize {
        self.pos.min(self.bytes.len())
    }
}

/// Map a signed value to an unsigned one with small magnitudes first:
/// 0, -1, 1, -2, 2, ... so escape payloads stay compact.
pub fn zigzag_encode(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

pub fn zigzag_decode(u: u32) -> i32 {
    ((u >> 1) as i32) ^ -((u & 1) as i32)
}
