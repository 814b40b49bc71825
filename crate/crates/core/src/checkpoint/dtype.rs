use serde::{Deserialize, Serialize};

/// Element types understood by the container.
///
/// The float types are what weight surgery operates on. `I32` and `U8` exist
/// so packed token batches can reuse the same container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "F32")]
    F32,
    #[serde(rename = "F16")]
    F16,
    #[serde(rename = "BF16")]
    BF16,
    #[serde(rename = "I32")]
    I32,
    #[serde(rename = "U8")]
    U8,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 | DType::BF16 => 2,
            DType::U8 => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F16 | DType::BF16)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::I32 => "I32",
            DType::U8 => "U8",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "F32" => DType::F32,
            "F16" => DType::F16,
            "BF16" => DType::BF16,
            "I32" => DType::I32,
            "U8" => DType::U8,
            _ => return None,
        })
    }

    /// Significand precision (including the implicit bit) and minimum normal
    /// exponent of a float dtype.
    fn float_format(self) -> Option<(i32, i32, f64)> {
        match self {
            DType::F32 => Some((24, -126, f32::MAX as f64)),
            DType::F16 => Some((11, -14, 65504.0)),
            DType::BF16 => Some((8, -126, half::bf16::MAX.to_f64())),
            _ => None,
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Decodes one little-endian element of a float dtype to `f64` (exact).
pub fn decode_element(dtype: DType, bytes: &[u8]) -> f64 {
    match dtype {
        DType::F32 => f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64,
        DType::F16 => half::f16::from_le_bytes([bytes[0], bytes[1]]).to_f64(),
        DType::BF16 => half::bf16::from_le_bytes([bytes[0], bytes[1]]).to_f64(),
        DType::I32 => i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64,
        DType::U8 => bytes[0] as f64,
    }
}

/// Rounds an `f64` to the nearest value representable in `dtype`, ties to
/// even, in a single step (no intermediate f32 rounding for the 16-bit types).
///
/// The returned value is exactly representable in `dtype`.
pub fn round_to_dtype(dtype: DType, x: f64) -> f64 {
    let Some((precision, emin, max_finite)) = dtype.float_format() else {
        panic!("round_to_dtype called with non-float dtype {dtype}");
    };
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let exp = (x.abs().log2().floor() as i32).max(emin);
    // log2 can be off by one near powers of two; fix it up exactly.
    let exp = if x.abs() < 2f64.powi(exp) && exp > emin {
        exp - 1
    } else if x.abs() >= 2f64.powi(exp + 1) {
        exp + 1
    } else {
        exp
    };
    let quantum = 2f64.powi(exp - precision + 1);
    let rounded = (x / quantum).round_ties_even() * quantum;
    if rounded.abs() > max_finite {
        return f64::INFINITY.copysign(x);
    }
    rounded
}

/// Encodes `x` (rounded once, ties to even) as little-endian bytes of `dtype`.
pub fn encode_element(dtype: DType, x: f64, out: &mut Vec<u8>) {
    match dtype {
        DType::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
        DType::F16 => {
            let v = round_to_dtype(dtype, x);
            out.extend_from_slice(&half::f16::from_f64(v).to_le_bytes())
        }
        DType::BF16 => {
            let v = round_to_dtype(dtype, x);
            // v is exactly representable in bf16, hence in f32.
            let bits = ((v as f32).to_bits() >> 16) as u16;
            let bits = if x.is_nan() { 0x7fc0 } else { bits };
            out.extend_from_slice(&bits.to_le_bytes())
        }
        DType::I32 => out.extend_from_slice(&(x as i32).to_le_bytes()),
        DType::U8 => out.push(x as u8),
    }
}
