//! Identifiers shared across modules.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecError, Decode, Encode, Reader, Writer};

/// Simulated time in integer ticks. There is no wall clock anywhere.
pub type Tick = u64;

/// Globally unique consortium-assigned VASP number.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct VaspNumber(pub u64);

impl fmt::Display for VaspNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Encode for VaspNumber {
    fn encode_to(&self, w: &mut Writer) {
        w.put_u64(self.0);
    }
}

impl Decode for VaspNumber {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(VaspNumber(r.u64()?))
    }
}

/// Half-open validity window `[not_before, not_after)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Validity {
    pub not_before: Tick,
    pub not_after: Tick,
}

impl Validity {
    pub fn new(not_before: Tick, not_after: Tick) -> Self {
        Self {
            not_before,
            not_after,
        }
    }

    pub fn is_well_ordered(&self) -> bool {
        self.not_before < self.not_after
    }
}
