//! Toy MDCT codec and the compressed-domain embedders it hosts.

pub mod embed;
pub mod mdct;
pub mod stream;

pub use embed::{
    capacity, carriers, embed, extract, frame_cost, message_len, QuantizedGroup, Scheme,
    StegoJob, DEFAULT_SIGN_THRESHOLD,
};
pub use mdct::Mdct;
pub use stream::{decode_clip, encode_clip, CodecConfig, CodedStream, QuantizedFrame};
