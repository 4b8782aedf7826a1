//! RAW images as 16-bit PNG plus a JSON sidecar; RGB images as 8-bit PNG or JPEG.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};
use revisp_core::isp::{demosaic_bilinear, invert_ccm, BayerPattern};
use revisp_core::trainer::normalize_raw;
use revisp_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, read_json, write_json, Error, Result};

pub const SIDECAR_SCHEMA: u32 = 1;

/// Sensor metadata stored next to a RAW PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub schema: u32,
    /// Digital number of a black pixel.
    pub black_level: u32,
    /// Digital number at saturation.
    pub white_level: u32,
    /// Camera RGB → XYZ, row-major.
    pub ccm: [f32; 9],
    pub camera_id: String,
    /// Set for single-channel mosaics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bayer_pattern: Option<BayerPattern>,
}

impl RawSidecar {
    pub fn new(
        black_level: u32,
        white_level: u32,
        ccm: [f32; 9],
        camera_id: impl Into<String>,
    ) -> Self {
        Self {
            schema: SIDECAR_SCHEMA,
            black_level,
            white_level,
            ccm,
            camera_id: camera_id.into(),
            bayer_pattern: None,
        }
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.schema != SIDECAR_SCHEMA {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                found: self.schema,
                expected: SIDECAR_SCHEMA,
            });
        }
        if self.white_level <= self.black_level || self.white_level > u16::MAX as u32 {
            return Err(format_err(
                path,
                "white level must exceed black level and fit in 16 bits",
            ));
        }
        invert_ccm(&self.ccm).map_err(|e| format_err(path, format!("ccm: {e}")))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = read_json(path)?;
        s.validate(path)?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate(path)?;
        write_json(path, self)
    }
}

/// Where [`save_raw`] puts the sidecar for `png`.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(crate::error::io_err(path))?
        .with_guessed_format()
        .map_err(crate::error::io_err(path))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Loads a 16-bit RAW PNG as a normalized `H × W × 3` tensor.
///
/// Single-channel files are demosaiced with the sidecar's Bayer pattern.
pub fn load_raw(path: &Path, sidecar: &RawSidecar) -> Result<Tensor> {
    sidecar.validate(path)?;
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (black, white) = (sidecar.black_level as f32, sidecar.white_level as f32);
    match img {
        DynamicImage::ImageRgb16(buf) => {
            let dn = Tensor::new(
                vec![h, w, 3],
                buf.into_raw().into_iter().map(f32::from).collect(),
            )?;
            Ok(normalize_raw(&dn, black, white)?)
        }
        DynamicImage::ImageLuma16(buf) => {
            let pattern = sidecar.bayer_pattern.ok_or_else(|| {
                format_err(
                    path,
                    "single-channel RAW needs a Bayer pattern in its sidecar",
                )
            })?;
            let dn = Tensor::new(
                vec![h, w, 1],
                buf.into_raw().into_iter().map(f32::from).collect(),
            )?;
            Ok(demosaic_bilinear(
                &normalize_raw(&dn, black, white)?,
                pattern,
            )?)
        }
        other => Err(format_err(
            path,
            format!("RAW must be 16-bit gray or RGB, found {:?}", other.color()),
        )),
    }
}

/// Loads a RAW using the sidecar beside it.
pub fn load_raw_with_sidecar(path: &Path) -> Result<(Tensor, RawSidecar)> {
    let meta = sidecar_path(path);
    if !meta.exists() {
        return Err(format_err(path, "missing sidecar"));
    }
    let sidecar = RawSidecar::load(&meta)?;
    Ok((load_raw(path, &sidecar)?, sidecar))
}

/// DN = `round(v·(white − black) + black)`, clamped to the sensor range.
pub fn quantize_raw(v: f32, sidecar: &RawSidecar) -> u16 {
    let (b, w) = (sidecar.black_level as f32, sidecar.white_level as f32);
    (v * (w - b) + b).round().clamp(b, w) as u16
}

/// Writes a 3-channel 16-bit PNG and its sidecar.
pub fn save_raw(raw: &Tensor, sidecar: &RawSidecar, path: &Path) -> Result<()> {
    sidecar.validate(path)?;
    let (h, w, c) = raw.dims3()?;
    if c != 3 {
        return Err(format_err(path, "RAW tensor must have 3 channels"));
    }
    let data: Vec<u16> = raw
        .data()
        .iter()
        .map(|&v| quantize_raw(v, sidecar))
        .collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    save_image(&DynamicImage::ImageRgb16(buf), path)?;
    sidecar.save(&sidecar_path(path))
}

/// Loads an 8-bit image as `H × W × 3` with values `/255`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?;
    let rgb = match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => img.to_rgb8(),
        other => {
            return Err(format_err(
                path,
                format!("RGB must be 8-bit, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 255.0)
        .collect();
    Ok(Tensor::new(vec![h, w, 3], data)?)
}

/// Writes an 8-bit RGB PNG, rounding and clamping to `[0, 255]`.
pub fn save_rgb(rgb: &Tensor, path: &Path) -> Result<()> {
    let (h, w, c) = rgb.dims3()?;
    if c != 3 {
        return Err(format_err(path, "RGB tensor must have 3 channels"));
    }
    let data: Vec<u8> = rgb
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    save_image(&DynamicImage::ImageRgb8(buf), path)
}

fn save_image(img: &DynamicImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
