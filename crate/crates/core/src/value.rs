//! Scalar type used for tensor values and factor matrices.
//!
//! Values are 64-bit by default. Building with the `f32` feature switches the
//! whole crate to 32-bit values, mirroring common accelerator practice.

use std::sync::atomic::Ordering;

#[cfg(not(feature = "f32"))]
mod imp {
    pub type Value = f64;
    pub(crate) type AtomicBits = std::sync::atomic::AtomicU64;
}

#[cfg(feature = "f32")]
mod imp {
    pub type Value = f32;
    pub(crate) type AtomicBits = std::sync::atomic::AtomicU32;
}

pub use imp::Value;

/// Width of one stored value in bytes.
pub const VALUE_BYTES: usize = std::mem::size_of::<Value>();

/// Width of one stored index in bytes.
pub const INDEX_BYTES: usize = std::mem::size_of::<u64>();

/// A value cell that supports lock-free accumulation.
#[derive(Debug, Default)]
#[repr(transparent)]
pub(crate) struct AtomicValue(imp::AtomicBits);

impl AtomicValue {
    pub(crate) fn zero() -> Self {
        Self(imp::AtomicBits::new((0.0 as Value).to_bits()))
    }

    pub(crate) fn load(&self) -> Value {
        Value::from_bits(self.0.load(Ordering::Relaxed))
    }

    pub(crate) fn store(&self, v: Value) {
        self.0.store(v.to_bits(), Ordering::Relaxed)
    }

    /// Atomically adds `delta` with a compare-and-swap loop.
    pub(crate) fn fetch_add(&self, delta: Value) {
        let mut cur = self.0.load(Ordering::Relaxed);
        loop {
            let next = (Value::from_bits(cur) + delta).to_bits();
            match self
                .0
                .compare_exchange_weak(cur, next, Ordering::Relaxed, Ordering::Relaxed)
            {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }
}
