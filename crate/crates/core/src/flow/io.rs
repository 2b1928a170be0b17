use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{FlowField, Image};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PFLW";

pub fn write_flow(field: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * field.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(field.width as u32).to_le_bytes());
    buf.extend_from_slice(&(field.height as u32).to_le_bytes());
    for x in field.u.iter().chain(&field.v) {
        buf.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing PFLW header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h) = (word(4), word(8));
    let n = w * h;
    if bytes.len() != 12 + 8 * n {
        return Err(Error::Format(format!(
            "flow payload is {} bytes, expected {}",
            bytes.len() - 12,
            8 * n
        )));
    }
    let vals: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FlowField::new(w, h, vals[..n].to_vec(), vals[n..].to_vec())
}

pub fn write_pgm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", image.width, image.height)?;
    let bytes: Vec<u8> = image
        .pixels
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut fields = Vec::new();
    // magic, width, height, maxval; `#` starts a comment
    while fields.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated PGM header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        fields.extend(line.split_whitespace().map(str::to_string));
    }
    if fields[0] != "P5" || fields.len() != 4 {
        return Err(Error::Format("expected binary P5 PGM".into()));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field `{s}`")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format("only 8-bit PGM is supported".into()));
    }
    let mut data = vec![0u8; w * h];
    r.read_exact(&mut data)
        .map_err(|_| Error::Format("truncated PGM payload".into()))?;
    Image::new(w, h, data.iter().map(|b| *b as f64 / maxval as f64).collect())
}
