//! Rate and distortion measurements on 8-bit images and the evaluation report.

use std::io::Write;

use crate::codec::{compress_image, decompress_image, Bitstream, Finetune};
use crate::error::{Error, Result};
use crate::image_io::RgbImage;
use crate::losses::{ms_ssim_value, SsimParams};
use crate::model::AutoencoderParams;
use crate::tensor::Tensor;

/// PSNR reported for a zero-error reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::ShapeMismatch {
            op: "image metric",
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    Ok(())
}

/// Mean squared error of the 8-bit values over all channels.
pub fn mse_8bit(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let sum: u64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (x as i64 - y as i64).pow(2) as u64)
        .sum();
    Ok(sum as f64 / a.pixels.len() as f64)
}

/// `10 log10(255^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr_8bit(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(psnr_from_mse(mse_8bit(a, b)?))
}

/// MS-SSIM of two 8-bit images in double precision, with as many scales (up
/// to five) as the image size allows. `None` below one 11x11 window.
pub fn ms_ssim_8bit(a: &RgbImage, b: &RgbImage) -> Result<Option<f64>> {
    same_dims(a, b)?;
    let params = SsimParams::default();
    if params.scales_for(a.height, a.width) == 0 {
        return Ok(None);
    }
    let batch = |img: &RgbImage| -> Result<Tensor<f64>> { img.to_tensor::<f64>().reshape(&[1, 3, img.height, img.width]) };
    ms_ssim_value(&batch(a)?, &batch(b)?, &params).map(Some)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageReport {
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// Size of the complete stream, header included.
    pub bytes: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ms_ssim: Option<f64>,
    pub bpp: f64,
}

impl ImageReport {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Compresses and decompresses `img` through the serialized stream and
/// measures the result.
pub fn evaluate_image(
    name: &str,
    img: &RgbImage,
    params: &AutoencoderParams<f32>,
    finetune: Option<&Finetune>,
) -> Result<ImageReport> {
    let bytes = compress_image(img, params, finetune)?.stream.to_bytes();
    let out = decompress_image(&Bitstream::parse(&bytes)?, params)?;
    let mse = mse_8bit(img, &out)?;
    Ok(ImageReport {
        name: name.to_string(),
        width: img.width,
        height: img.height,
        bytes: bytes.len(),
        mse,
        psnr: psnr_from_mse(mse),
        ms_ssim: ms_ssim_8bit(img, &out)?,
        bpp: 8.0 * bytes.len() as f64 / img.num_pixels() as f64,
    })
}

/// Per-image measurements plus their aggregates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageReport>,
}

impl EvalReport {
    pub fn count(&self) -> usize {
        self.images.len()
    }

    /// PSNR of the MSE pooled over every pixel of every image.
    pub fn pooled_psnr(&self) -> f64 {
        let px: f64 = self.images.iter().map(|r| r.pixels() as f64).sum();
        let se: f64 = self.images.iter().map(|r| r.mse * r.pixels() as f64).sum();
        psnr_from_mse(se / px)
    }

    pub fn mean_psnr(&self) -> f64 {
        self.images.iter().map(|r| r.psnr).sum::<f64>() / self.count() as f64
    }

    /// Mean over the images large enough to have an MS-SSIM value.
    pub fn mean_ms_ssim(&self) -> Option<f64> {
        let v: Vec<f64> = self.images.iter().filter_map(|r| r.ms_ssim).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Total stream bits over total pixels.
    pub fn bpp(&self) -> f64 {
        let bits: f64 = self.images.iter().map(|r| 8.0 * r.bytes as f64).sum();
        let px: f64 = self.images.iter().map(|r| r.pixels() as f64).sum();
        bits / px
    }

    /// Per-image rows followed by one `ALL` row with the pooled aggregates.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["image", "width", "height", "bytes", "bpp", "psnr", "ms_ssim"])
            .map_err(csv_err)?;
        let fmt_opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        for r in &self.images {
            w.write_record([
                r.name.clone(),
                r.width.to_string(),
                r.height.to_string(),
                r.bytes.to_string(),
                format!("{:.6}", r.bpp),
                format!("{:.4}", r.psnr),
                fmt_opt(r.ms_ssim),
            ])
            .map_err(csv_err)?;
        }
        let bytes: usize = self.images.iter().map(|r| r.bytes).sum();
        w.write_record([
            "ALL".to_string(),
            String::new(),
            String::new(),
            bytes.to_string(),
            format!("{:.6}", self.bpp()),
            format!("{:.4}", self.pooled_psnr()),
            fmt_opt(self.mean_ms_ssim()),
        ])
        .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }

    /// `PSNR | MS-SSIM | bpp` summary lines.
    pub fn summary(&self) -> String {
        let ms = self.mean_ms_ssim().map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
        format!(
            "images: {}\nPSNR (pooled MSE) {:.2} dB | PSNR (mean per image) {:.2} dB | MS-SSIM {ms} | bpp {:.3}",
            self.count(),
            self.pooled_psnr(),
            self.mean_psnr(),
            self.bpp()
        )
    }
}
