//! Image-level compression: pad, encode, binarize and entropy-code, and the
//! inverse path back to 8-bit pixels.

use crate::codec::bitstream::{Bitstream, Header};
use crate::codec::cabac::{cabac_decode, cabac_encode, CodeTensor};
use crate::error::{Error, Result};
use crate::image_io::{crop, pad_to_multiple, RgbImage};
use crate::losses::LossConfig;
use crate::model::{decode_code, encode_binary, AutoencoderParams, DOWNSAMPLE};
use crate::tensor::Tensor;
use crate::trainer::{post_train_encoder_opt, FinetuneConfig, FinetuneTrace};

/// Per-image encoder fine-tuning settings.
#[derive(Clone, Debug)]
pub struct Finetune {
    pub loss: LossConfig,
    pub config: FinetuneConfig,
}

#[derive(Clone, Debug)]
pub struct Compressed {
    pub stream: Bitstream,
    pub code: CodeTensor,
    /// Present when the encoder was fine-tuned for this image.
    pub trace: Option<FinetuneTrace>,
}

/// The image as a `[1, 3, H', W']` tensor, reflect-padded to multiples of 8.
pub fn padded_input(img: &RgbImage) -> Result<Tensor<f32>> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::InvalidShape {
            op: "compress_image",
            reason: format!("zero-sized {}x{} image", img.width, img.height),
        });
    }
    let padded = pad_to_multiple(&img.to_tensor::<f32>(), DOWNSAMPLE);
    let s = padded.shape().to_vec();
    padded.reshape(&[1, s[0], s[1], s[2]])
}

pub fn compress_image(
    img: &RgbImage,
    params: &AutoencoderParams<f32>,
    finetune: Option<&Finetune>,
) -> Result<Compressed> {
    let (Ok(w), Ok(h)) = (u16::try_from(img.width), u16::try_from(img.height)) else {
        return Err(Error::Incompatible(format!(
            "{}x{} exceeds the 65535 pixel limit of the stream header",
            img.width, img.height
        )));
    };
    let channels = u8::try_from(params.config.code_channels)
        .map_err(|_| Error::Incompatible("more than 255 code channels".into()))?;
    let input = padded_input(img)?;
    let mut tuned;
    let mut trace = None;
    let params = match finetune {
        Some(ft) => {
            tuned = params.clone();
            trace = Some(post_train_encoder_opt(&input, &mut tuned, &ft.loss, &ft.config)?);
            &tuned
        }
        None => params,
    };
    let code = CodeTensor::from_tensor(&encode_binary(params, &input)?)?;
    let payload = cabac_encode(&code);
    let stream = Bitstream {
        header: Header::new(w, h, channels),
        payload,
    };
    Ok(Compressed { stream, code, trace })
}

/// Decodes `code` and quantizes the top-left `width x height` window to 8 bits.
pub fn reconstruct(code: &CodeTensor, params: &AutoencoderParams<f32>, width: usize, height: usize) -> Result<RgbImage> {
    let recon = decode_code(params, &code.to_tensor::<f32>())?;
    let s = recon.shape().to_vec();
    let planar = recon.reshape(&s[1..])?;
    RgbImage::from_tensor(&crop(&planar, 0, 0, height, width))
}

pub fn decompress_image(stream: &Bitstream, params: &AutoencoderParams<f32>) -> Result<RgbImage> {
    let hdr = &stream.header;
    if hdr.code_channels as usize != params.config.code_channels {
        return Err(Error::Incompatible(format!(
            "stream has {} code channels, model produces {}",
            hdr.code_channels, params.config.code_channels
        )));
    }
    let code = cabac_decode(
        &stream.payload,
        hdr.code_channels as usize,
        hdr.latent_height(),
        hdr.latent_width(),
    )?;
    reconstruct(&code, params, hdr.orig_width as usize, hdr.orig_height as usize)
}
