//! Exact Q-format fixed-point arithmetic.
//!
//! A [`QFormat`] describes a two's-complement (or unsigned) integer grid with
//! step `2^-frac_bits`. Products of two fixed-point operands are formed in a
//! widened format without rounding, summed in a 64-bit [`Accumulator`], and
//! brought back to a narrow format by [`requantize`], which is the only place
//! in the pipeline where precision is lost.
//!
//! Rounding is round-to-nearest with ties away from zero, followed by
//! saturation to the target range.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Bit-widths a [`QFormat`] may take.
pub const ALLOWED_BITS: [u8; 4] = [4, 8, 16, 32];

/// Guards `log2(0)` in [`choose_format`].
const CALIBRATION_EPS: f64 = 1.0 / (1u64 << 30) as f64;

const MAX_ABS_FRAC: i32 = 64;

/// A fixed-point number format: `raw * 2^-frac_bits` with `raw` restricted to
/// a `total_bits` wide integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QFormat {
    total_bits: u8,
    frac_bits: i32,
    signed: bool,
}

impl QFormat {
    pub fn new(total_bits: u8, frac_bits: i32, signed: bool) -> Result<Self> {
        if !ALLOWED_BITS.contains(&total_bits) {
            return Err(Error::InvalidFormat(format!(
                "total_bits must be one of {ALLOWED_BITS:?}, got {total_bits}"
            )));
        }
        if frac_bits.abs() > MAX_ABS_FRAC {
            return Err(Error::InvalidFormat(format!(
                "frac_bits {frac_bits} outside [-{MAX_ABS_FRAC}, {MAX_ABS_FRAC}]"
            )));
        }
        Ok(Self {
            total_bits,
            frac_bits,
            signed,
        })
    }

    /// Signed format shorthand.
    pub fn signed(total_bits: u8, frac_bits: i32) -> Result<Self> {
        Self::new(total_bits, frac_bits, true)
    }

    pub fn total_bits(&self) -> u8 {
        self.total_bits
    }

    pub fn frac_bits(&self) -> i32 {
        self.frac_bits
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn raw_min(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.total_bits - 1))
        } else {
            0
        }
    }

    pub fn raw_max(&self) -> i64 {
        if self.signed {
            (1i64 << (self.total_bits - 1)) - 1
        } else {
            (1i64 << self.total_bits) - 1
        }
    }

    /// Quantization step, `2^-frac_bits`.
    pub fn lsb(&self) -> f64 {
        pow2(-self.frac_bits)
    }

    /// Smallest representable real value.
    pub fn min_value(&self) -> f64 {
        self.raw_min() as f64 * self.lsb()
    }

    /// Largest representable real value.
    pub fn max_value(&self) -> f64 {
        self.raw_max() as f64 * self.lsb()
    }

    /// Whether `x` lies inside the representable range.
    pub fn contains(&self, x: f64) -> bool {
        x >= self.min_value() && x <= self.max_value()
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = if self.signed { 's' } else { 'u' };
        write!(f, "Q{s}{}.{}", self.total_bits, self.frac_bits)
    }
}

impl FromStr for QFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidFormat(format!("cannot parse {s:?} as Qs<total>.<frac>"));
        let rest = s.strip_prefix('Q').ok_or_else(bad)?;
        let (signed, rest) = match rest.chars().next() {
            Some('s') => (true, &rest[1..]),
            Some('u') => (false, &rest[1..]),
            _ => return Err(bad()),
        };
        let (total, frac) = rest.split_once('.').ok_or_else(bad)?;
        let total: u8 = total.parse().map_err(|_| bad())?;
        let frac: i32 = frac.parse().map_err(|_| bad())?;
        QFormat::new(total, frac, signed)
    }
}

impl Serialize for QFormat {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QFormat {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Bit-width of a quantity, or full precision.
///
/// Serialized as the number of bits (`8`) or the string `"float"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Fixed(u8),
    Float,
}

impl Precision {
    pub fn new(bits: u8) -> Result<Self> {
        if ALLOWED_BITS.contains(&bits) {
            Ok(Precision::Fixed(bits))
        } else {
            Err(Error::InvalidFormat(format!(
                "bit-width must be one of {ALLOWED_BITS:?}, got {bits}"
            )))
        }
    }

    pub fn is_float(&self) -> bool {
        matches!(self, Precision::Float)
    }

    pub fn bits(&self) -> Option<u8> {
        match self {
            Precision::Fixed(b) => Some(*b),
            Precision::Float => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Fixed(b) => write!(f, "{b}"),
            Precision::Float => f.write_str("float"),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("float") {
            return Ok(Precision::Float);
        }
        let bits: u8 = s
            .parse()
            .map_err(|_| Error::InvalidFormat(format!("bad precision {s:?}")))?;
        Precision::new(bits)
    }
}

impl Serialize for Precision {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Precision::Fixed(b) => serializer.serialize_u8(*b),
            Precision::Float => serializer.serialize_str("float"),
        }
    }
}

impl<'de> Deserialize<'de> for Precision {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Bits(u8),
            Name(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Bits(b) => Precision::new(b).map_err(serde::de::Error::custom),
            Repr::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// A single fixed-point value. `raw` is always inside the format's range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QValue {
    raw: i64,
    fmt: QFormat,
}

impl QValue {
    /// Builds a value from a raw integer, saturating it into range.
    pub fn from_raw(raw: i64, fmt: QFormat) -> Self {
        Self {
            raw: raw.clamp(fmt.raw_min(), fmt.raw_max()),
            fmt,
        }
    }

    pub fn raw(&self) -> i64 {
        self.raw
    }

    pub fn format(&self) -> QFormat {
        self.fmt
    }

    pub fn to_f64(&self) -> f64 {
        dequantize(*self)
    }
}

/// An integer tensor sharing one format (per-tensor granularity).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    raw: Vec<i64>,
    fmt: QFormat,
}

impl QTensor {
    pub fn quantize(values: &[f64], fmt: QFormat) -> Result<Self> {
        let raw = values
            .iter()
            .map(|&x| quantize(x, fmt).map(|q| q.raw))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { raw, fmt })
    }

    pub fn raw(&self) -> &[i64] {
        &self.raw
    }

    pub fn format(&self) -> QFormat {
        self.fmt
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let lsb = self.fmt.lsb();
        self.raw.iter().map(|&r| r as f64 * lsb).collect()
    }

    pub fn max_abs_raw(&self) -> i64 {
        self.raw.iter().map(|r| r.abs()).max().unwrap_or(0)
    }
}

/// Wide integer accumulator for sums of fixed-point products.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accumulator {
    raw: i64,
    frac_bits: i32,
}

impl Accumulator {
    pub fn new(frac_bits: i32) -> Self {
        Self { raw: 0, frac_bits }
    }

    pub fn from_raw(raw: i64, frac_bits: i32) -> Self {
        Self { raw, frac_bits }
    }

    /// Rounds a real value onto the accumulator grid (ties away from zero).
    pub fn from_real(x: f64, frac_bits: i32) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::NonFinite(x));
        }
        let scaled = (x * pow2(frac_bits)).round();
        if scaled.abs() >= 9.223_372_036_854_775_807e18 {
            return Err(Error::AccumulatorOverflow(format!(
                "{x} does not fit a 64-bit accumulator at frac {frac_bits}"
            )));
        }
        Ok(Self {
            raw: scaled as i64,
            frac_bits,
        })
    }

    pub fn raw(&self) -> i64 {
        self.raw
    }

    pub fn frac_bits(&self) -> i32 {
        self.frac_bits
    }

    /// Real value `raw * 2^-frac_bits`. Exact while `|raw| < 2^53`.
    pub fn to_f64(&self) -> f64 {
        self.raw as f64 * pow2(-self.frac_bits)
    }

    pub fn checked_add_raw(self, raw: i64) -> Result<Self> {
        let sum = self.raw.checked_add(raw).ok_or_else(|| {
            Error::AccumulatorOverflow(format!("{} + {} exceeds 64 bits", self.raw, raw))
        })?;
        Ok(Self { raw: sum, ..self })
    }
}

/// Exact `2^e` for the exponent range used by the formats here.
pub(crate) fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// Nearest representable value to `x`, ties away from zero, saturated.
pub fn quantize(x: f64, fmt: QFormat) -> Result<QValue> {
    if !x.is_finite() {
        return Err(Error::NonFinite(x));
    }
    let scaled = (x * pow2(fmt.frac_bits)).round();
    let raw = scaled.clamp(fmt.raw_min() as f64, fmt.raw_max() as f64) as i64;
    Ok(QValue { raw, fmt })
}

pub fn dequantize(q: QValue) -> f64 {
    q.raw as f64 * q.fmt.lsb()
}

/// Widened width able to hold a product of `a`- and `b`-bit operands.
fn widened_bits(a: u8, b: u8) -> u8 {
    let need = a + b;
    ALLOWED_BITS
        .iter()
        .copied()
        .find(|&w| w >= need)
        .unwrap_or(32)
}

/// Exact widening multiply. The product carries `a.frac + b.frac` fractional
/// bits in a format at least `a.total + b.total` bits wide.
pub fn qmul(a: QValue, b: QValue) -> Result<QValue> {
    if a.fmt.total_bits > 16 || b.fmt.total_bits > 16 {
        return Err(Error::InvalidFormat(format!(
            "qmul operands must be at most 16 bits, got {} and {}",
            a.fmt, b.fmt
        )));
    }
    let fmt = QFormat::new(
        widened_bits(a.fmt.total_bits, b.fmt.total_bits),
        a.fmt.frac_bits + b.fmt.frac_bits,
        a.fmt.signed || b.fmt.signed,
    )?;
    let raw = a.raw * b.raw;
    debug_assert!(raw >= fmt.raw_min() && raw <= fmt.raw_max());
    Ok(QValue { raw, fmt })
}

/// Exact accumulation of a product into the wide accumulator.
pub fn acc_add(acc: Accumulator, p: QValue) -> Result<Accumulator> {
    if p.fmt.frac_bits != acc.frac_bits {
        return Err(Error::InvalidFormat(format!(
            "accumulator has frac {} but operand is {}",
            acc.frac_bits, p.fmt
        )));
    }
    acc.checked_add_raw(p.raw)
}

/// `r / 2^shift` rounded to nearest, ties away from zero.
pub(crate) fn round_shift_right(r: i128, shift: u32) -> i128 {
    if shift == 0 {
        return r;
    }
    if shift >= 127 {
        return 0;
    }
    let half = 1i128 << (shift - 1);
    if r >= 0 {
        (r + half) >> shift
    } else {
        -((-r + half) >> shift)
    }
}

/// Brings an accumulator to a narrow format using integer arithmetic only.
///
/// Bit-exact with `quantize(acc.to_f64(), target)` whenever the accumulator
/// value is exactly representable as an `f64`.
pub fn requantize(acc: Accumulator, target: QFormat) -> QValue {
    let shift = acc.frac_bits - target.frac_bits;
    let raw = acc.raw as i128;
    let scaled = if shift >= 0 {
        round_shift_right(raw, shift as u32)
    } else {
        let left = (-shift) as u32;
        if raw == 0 {
            0
        } else if left >= 64 {
            raw.signum() * i128::from(i64::MAX)
        } else {
            raw << left
        }
    };
    let clamped = scaled.clamp(i128::from(target.raw_min()), i128::from(target.raw_max()));
    QValue {
        raw: clamped as i64,
        fmt: target,
    }
}

/// Picks the fractional length for a tensor from its largest magnitude.
///
/// Signed: `frac = total - 1 - max(0, ceil(log2(max_abs + eps)))`.
/// Unsigned formats get one more fractional bit. All-zero samples yield the
/// maximum fractional length.
pub fn choose_format(samples: &[f64], total_bits: u8, signed: bool) -> Result<QFormat> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration samples"));
    }
    let mut max_abs = 0.0f64;
    for &x in samples {
        if !x.is_finite() {
            return Err(Error::NonFinite(x));
        }
        max_abs = max_abs.max(x.abs());
    }
    let int_bits = if max_abs == 0.0 {
        0
    } else {
        ((max_abs + CALIBRATION_EPS).log2().ceil() as i32).max(0)
    };
    let sign_bit = i32::from(signed);
    QFormat::new(total_bits, i32::from(total_bits) - sign_bit - int_bits, signed)
}
