//! Lossless coding of binary latents and the on-disk stream format.

pub mod bitstream;
pub mod cabac;
pub mod pipeline;

pub use bitstream::{Bitstream, Header, HEADER_LEN};
pub use cabac::{
    cabac_decode, cabac_encode, context_index, decode_with_model, encode_with_model, CodeTensor, ContextModel,
};
pub use pipeline::{compress_image, decompress_image, padded_input, reconstruct, Compressed, Finetune};
