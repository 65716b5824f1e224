//! Binary PGM (P5) images and masks.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::encoder::Image;
use crate::error::{Error, Result};
use crate::features::Mask;

struct Samples {
    height: usize,
    width: usize,
    maxval: u32,
    values: Vec<u32>,
}

fn decode_samples(bytes: &[u8]) -> Result<Samples> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::Pgm("not a binary (P5) PGM".into()));
    }
    let pgm_err = |e: image::ImageError| Error::Pgm(e.to_string());
    let decoder = PnmDecoder::new(Cursor::new(bytes)).map_err(pgm_err)?;
    let maxval = decoder.header().maximal_sample();
    // the decoder rescales samples to the full 16-bit range; undo it
    let img = DynamicImage::from_decoder(decoder).map_err(pgm_err)?.into_luma16();
    let (w, h) = img.dimensions();
    let values = img
        .into_raw()
        .into_iter()
        .map(|v| ((u64::from(v) * u64::from(maxval) + 32767) / 65535) as u32)
        .collect();
    Ok(Samples {
        height: h as usize,
        width: w as usize,
        maxval,
        values,
    })
}

/// Gray levels scaled to [0, 1] by the file's maximum value.
pub fn decode_gray(bytes: &[u8]) -> Result<Image> {
    let s = decode_samples(bytes)?;
    let px = s.values.iter().map(|&v| f64::from(v) / f64::from(s.maxval)).collect();
    Image::new(s.height, s.width, px)
}

pub fn encode_gray(image: &Image) -> Result<Vec<u8>> {
    let px: Vec<u8> = image
        .pixels()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    encode_raw(&px, image.height(), image.width())
}

fn encode_raw(px: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PnmEncoder::new(Cursor::new(&mut buf))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(px, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Pgm(e.to_string()))?;
    Ok(buf)
}

/// Foreground wherever the gray level exceeds half the maximum.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let s = decode_samples(bytes)?;
    let on: Vec<bool> = s.values.iter().map(|&v| 2 * v > s.maxval).collect();
    Mask::from_bools(s.height, s.width, &on)
}

/// Foreground 255, background 0.
pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let px: Vec<u8> = mask.values().iter().map(|&v| if v > 0.0 { 255 } else { 0 }).collect();
    encode_raw(&px, mask.height(), mask.width())
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_gray(&std::fs::read(path)?)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, encode_gray(image)?)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&std::fs::read(path)?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    std::fs::write(path, encode_mask(mask)?)?;
    Ok(())
}
