//! Netpbm encoders/decoders: PPM P6 for images, PGM P2 for maps, PBM P1 for masks.

use thiserror::Error;

use crate::grid::{BitGrid, Grid};
use crate::synth::RgbImage;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PnmError {
    #[error("expected magic {expected}, found {found:?}")]
    Magic {
        expected: &'static str,
        found: String,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("pixel data truncated: need {need} values, found {found}")]
    Truncated { need: usize, found: usize },
    #[error("unsupported maxval {0}")]
    MaxVal(usize),
}

pub type Result<T> = std::result::Result<T, PnmError>;

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Splits header tokens, skipping `#` comments; returns the tokens and the byte offset after them.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(PnmError::Header("unexpected end of header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((tokens, i))
}

fn parse_dim(tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| PnmError::Header(format!("bad number {tok:?}")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (tokens, end) = header_tokens(bytes, 4)?;
    if tokens[0] != "P6" {
        return Err(PnmError::Magic {
            expected: "P6",
            found: tokens[0].clone(),
        });
    }
    let width = parse_dim(&tokens[1])?;
    let height = parse_dim(&tokens[2])?;
    let maxval = parse_dim(&tokens[3])?;
    if maxval != 255 {
        return Err(PnmError::MaxVal(maxval));
    }
    // Exactly one whitespace byte separates the header from raster data.
    let data = bytes.get(end + 1..).unwrap_or(&[]);
    let need = width * height * 3;
    if data.len() < need {
        return Err(PnmError::Truncated {
            need,
            found: data.len(),
        });
    }
    Ok(RgbImage {
        width,
        height,
        pixels: data[..need].to_vec(),
    })
}

/// ASCII graymap of a `[0, 1]` map, quantized to 0..=255.
pub fn encode_pgm<T: Scalar>(map: &Grid<T>) -> String {
    let mut out = format!("P2\n{} {}\n255\n", map.width, map.height);
    for i in 0..map.height {
        let row: Vec<String> = (0..map.width)
            .map(|j| {
                let v = map.at(i, j).as_f64().clamp(0.0, 1.0);
                format!("{}", (v * 255.0).round() as u8)
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn encode_pbm(mask: &BitGrid) -> String {
    let mut out = format!("P1\n{} {}\n", mask.width, mask.height);
    for i in 0..mask.height {
        let row: Vec<&str> = (0..mask.width)
            .map(|j| if mask.get(i, j) { "1" } else { "0" })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn decode_pbm(text: &str) -> Result<BitGrid> {
    let bytes = text.as_bytes();
    let (tokens, end) = header_tokens(bytes, 3)?;
    if tokens[0] != "P1" {
        return Err(PnmError::Magic {
            expected: "P1",
            found: tokens[0].clone(),
        });
    }
    let width = parse_dim(&tokens[1])?;
    let height = parse_dim(&tokens[2])?;
    let bits: Vec<bool> = bytes[end..]
        .iter()
        .filter(|b| matches!(b, b'0' | b'1'))
        .map(|&b| b == b'1')
        .collect();
    if bits.len() < width * height {
        return Err(PnmError::Truncated {
            need: width * height,
            found: bits.len(),
        });
    }
    Ok(BitGrid {
        height,
        width,
        bits: bits[..width * height].to_vec(),
    })
}
