//! Baseband simulator for iJam friendly-jamming key exchange with a rotating
//! directional antenna at the transmitter.
//!
//! Alice learns Bob's channel on a few antenna modes, recovers the sparse
//! angle-of-departure profile behind them and precodes every mode so Bob sees
//! a constant channel, while a passive multi-antenna eavesdropper sees it
//! change from frame to frame. See the guide in `book/` for a walk-through.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod channel;
pub mod csaod;
pub mod error;
pub mod harness;
pub mod phy;
pub mod protocol;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/modem.md")]
    mod modem {}
    #[doc = include_str!("../../../book/src/channel.md")]
    mod channel {}
    #[doc = include_str!("../../../book/src/aod-estimation.md")]
    mod aod_estimation {}
    #[doc = include_str!("../../../book/src/key-exchange.md")]
    mod key_exchange {}
    #[doc = include_str!("../../../book/src/eavesdropper.md")]
    mod eavesdropper {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
