//! Learned image encryption coupled with deep joint source-channel coding
//! over an AWGN channel, and the ciphertext-only attacks used to audit it.

pub mod attacks;
pub mod channel;
pub mod imagedata;
pub mod models;
pub mod objective;
pub mod seeds;
pub mod training;
pub mod pipeline;
