//! Thread-local multiply-accumulate tally.
//!
//! Only dense products and depthwise convolutions report MACs. Elementwise
//! arithmetic, activations, reductions and normalizations are not counted.

use std::cell::RefCell;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MacTally {
    pub matmul: u64,
    pub depthwise_conv: u64,
}

impl MacTally {
    pub fn total(&self) -> u64 {
        self.matmul + self.depthwise_conv
    }
}

thread_local! {
    static TALLY: RefCell<Option<MacTally>> = const { RefCell::new(None) };
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum MacKind {
    Matmul,
    DepthwiseConv,
}

pub(crate) fn record(kind: MacKind, macs: u64) {
    TALLY.with(|t| {
        if let Some(tally) = t.borrow_mut().as_mut() {
            match kind {
                MacKind::Matmul => tally.matmul += macs,
                MacKind::DepthwiseConv => tally.depthwise_conv += macs,
            }
        }
    });
}

/// Starts counting on this thread, resetting any previous tally.
pub fn enable() {
    TALLY.with(|t| *t.borrow_mut() = Some(MacTally::default()));
}

/// Stops counting and returns the tally.
pub fn disable() -> Result<MacTally> {
    TALLY.with(|t| t.borrow_mut().take()).ok_or_else(not_enabled)
}

/// Current tally without stopping.
pub fn read() -> Result<MacTally> {
    TALLY.with(|t| *t.borrow()).ok_or_else(not_enabled)
}

pub fn is_enabled() -> bool {
    TALLY.with(|t| t.borrow().is_some())
}

fn not_enabled() -> Error {
    Error::Contract("MAC instrumentation is not enabled on this thread".into())
}
