//! Multilingual encoder-decoder translation with a shared, fixed-length
//! neural interlingua.
//!
//! Every language owns an embedding table, a bidirectional LSTM encoder and
//! an attentional LSTM decoder. A single attentional recurrent layer (the
//! interlingua) sits between them and always emits `interlingua_length`
//! columns regardless of the source length, so any encoder can feed any
//! decoder, including pairs never seen during training.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, checkpoints and the command line live in the `ilmt`
//! companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
pub mod bleu;
pub mod bpe;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
