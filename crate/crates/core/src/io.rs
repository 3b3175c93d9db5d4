//! Raster files, PNG previews and CSV tables.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::raster::Raster;
use crate::trainer::LogRow;

pub const PSR_MAGIC: &[u8; 4] = b"PSR1";

pub fn encode_psr(r: &Raster) -> Vec<u8> {
    let (h, w, b) = r.dims();
    let mut out = Vec::with_capacity(16 + 4 * r.data().len());
    out.extend_from_slice(PSR_MAGIC);
    for d in [h, w, b] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in r.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_psr(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 16 || &bytes[..4] != PSR_MAGIC {
        return Err(Error::Format("missing PSR1 header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (h, w, b) = (dim(0), dim(1), dim(2));
    let count = h.checked_mul(w).and_then(|n| n.checked_mul(b));
    let expected = count.and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(Error::Format(format!("PSR1 body length does not match {h}x{w}x{b}")));
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Raster::new(h, w, b, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_psr(path: &Path, r: &Raster) -> Result<()> {
    std::fs::write(path, encode_psr(r))?;
    Ok(())
}

pub fn read_psr(path: &Path) -> Result<Raster> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_psr(&bytes)
}

/// Linear stretch mapping `low` to 0 and `high` to 255.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stretch {
    pub low: f64,
    pub high: f64,
}

impl Stretch {
    fn byte(&self, v: f64) -> u8 {
        let span = self.high - self.low;
        let t = if span > 0.0 { (v - self.low) / span } else { 0.0 };
        (t.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// RGB composite of three bands given by 1-based numbers, stretched
/// between the minimum and maximum of those bands.
pub fn composite(r: &Raster, rgb: [usize; 3]) -> Result<(Vec<u8>, Stretch)> {
    if rgb.iter().any(|&b| b == 0 || b > r.bands()) {
        return Err(Error::invalid(format!("bands {rgb:?} out of 1..={}", r.bands())));
    }
    let planes: Vec<&[f64]> = rgb.iter().map(|&b| r.band(b - 1)).collect();
    let (low, high) = planes
        .iter()
        .flat_map(|p| p.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let stretch = Stretch { low, high };
    let n = r.height() * r.width();
    let mut pixels = Vec::with_capacity(3 * n);
    for i in 0..n {
        pixels.extend(planes.iter().map(|p| stretch.byte(p[i])));
    }
    Ok((pixels, stretch))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_format = |e: png::EncodingError| Error::Format(format!("PNG encoding: {e}"));
    let mut w = enc.write_header().map_err(to_format)?;
    w.write_image_data(pixels).map_err(to_format)?;
    w.finish().map_err(to_format)?;
    Ok(())
}

/// Writes an RGB composite PNG and returns the stretch used.
pub fn write_composite_png(path: &Path, r: &Raster, rgb: [usize; 3]) -> Result<Stretch> {
    let (pixels, stretch) = composite(r, rgb)?;
    write_png(path, r.width(), r.height(), png::ColorType::Rgb, &pixels)?;
    Ok(stretch)
}

/// Writes a single-band error map as grayscale where `scale` maps to 255,
/// and records the scale next to it in `<path>.scale.txt`.
pub fn write_error_png(path: &Path, err: &Raster, scale: f64) -> Result<()> {
    if err.bands() != 1 {
        return Err(Error::shape("error map must be single-band"));
    }
    if !(scale > 0.0) {
        return Err(Error::invalid("error scale must be positive"));
    }
    let stretch = Stretch { low: 0.0, high: scale };
    let pixels: Vec<u8> = err.data().iter().map(|&v| stretch.byte(v)).collect();
    write_png(path, err.width(), err.height(), png::ColorType::Grayscale, &pixels)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".scale.txt");
    std::fs::write(sidecar, format!("scale={scale}\nlow=0\n"))?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("CSV: {other:?}")),
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(MetricReport::HEADER).map_err(csv_error)?;
    for r in rows {
        w.write_record(r.fields()).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(LogRow::HEADER).map_err(csv_error)?;
    for r in rows {
        w.write_record(r.fields()).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `key=value` lines.
pub fn write_key_values(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for (k, v) in entries {
        writeln!(f, "{k}={v}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psr_round_trip_and_layout() {
        let r = Raster::from_fn(3, 2, 2, |b, y, x| (b * 100 + y * 10 + x) as f64 * 0.25);
        let bytes = encode_psr(&r);
        assert_eq!(&bytes[..4], b"PSR1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        // planar: second value is band 0, row 0, column 1
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0.25);
        assert_eq!(decode_psr(&bytes).unwrap(), r);
        assert!(decode_psr(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_psr(b"PSR2").is_err());
    }

    #[test]
    fn composite_stretches_selected_bands() {
        let r = Raster::from_fn(1, 2, 4, |b, _, x| if b == 3 { 9.0 } else { (b + x) as f64 });
        let (px, s) = composite(&r, [3, 2, 1]).unwrap();
        assert_eq!(s, Stretch { low: 0.0, high: 3.0 });
        assert_eq!(px, vec![170, 85, 0, 255, 170, 85]);
        assert!(composite(&r, [5, 1, 1]).is_err());
    }

    #[test]
    fn pngs_and_sidecar_written() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::from_fn(4, 5, 4, |b, y, x| (b + y + x) as f64);
        write_composite_png(&dir.path().join("c.png"), &r, [3, 2, 1]).unwrap();
        let e = Raster::from_fn(4, 5, 1, |_, y, _| y as f64 * 0.1);
        let p = dir.path().join("e.png");
        write_error_png(&p, &e, 0.5).unwrap();
        let side = std::fs::read_to_string(dir.path().join("e.png.scale.txt")).unwrap();
        assert!(side.starts_with("scale=0.5"));
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
