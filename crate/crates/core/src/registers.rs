//! Input-register layout of the power analyser.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Registers per measurement (one binary32 float).
pub const BLOCK_LEN: u16 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    Voltage,
    Current,
    Frequency,
    PowerFactor,
    ActivePower,
    Energy,
}

impl MeasurementKind {
    /// Fixed polling order.
    pub const ALL: [MeasurementKind; 6] = [
        MeasurementKind::Voltage,
        MeasurementKind::Current,
        MeasurementKind::Frequency,
        MeasurementKind::PowerFactor,
        MeasurementKind::ActivePower,
        MeasurementKind::Energy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn unit_label(self) -> &'static str {
        match self {
            MeasurementKind::Voltage => "V",
            MeasurementKind::Current => "A",
            MeasurementKind::Frequency => "Hz",
            MeasurementKind::PowerFactor => "",
            MeasurementKind::ActivePower => "W",
            MeasurementKind::Energy => "kWh",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MeasurementKind::Voltage => "voltage",
            MeasurementKind::Current => "current",
            MeasurementKind::Frequency => "frequency",
            MeasurementKind::PowerFactor => "power_factor",
            MeasurementKind::ActivePower => "active_power",
            MeasurementKind::Energy => "energy",
        }
    }
}

impl fmt::Display for MeasurementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegisterMapError {
    #[error("register blocks for {0} and {1} overlap")]
    Overlap(MeasurementKind, MeasurementKind),
    #[error("register block for {0} runs past the end of the address space")]
    OutOfRange(MeasurementKind),
}

/// Start address of each measurement's two-register block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterMap {
    pub voltage: u16,
    pub current: u16,
    pub frequency: u16,
    pub power_factor: u16,
    pub active_power: u16,
    pub energy: u16,
}

impl Default for RegisterMap {
    fn default() -> Self {
        RegisterMap {
            voltage: 0x0000,
            current: 0x0002,
            frequency: 0x0004,
            power_factor: 0x0006,
            active_power: 0x0008,
            energy: 0x000A,
        }
    }
}

impl RegisterMap {
    pub fn start(&self, kind: MeasurementKind) -> u16 {
        match kind {
            MeasurementKind::Voltage => self.voltage,
            MeasurementKind::Current => self.current,
            MeasurementKind::Frequency => self.frequency,
            MeasurementKind::PowerFactor => self.power_factor,
            MeasurementKind::ActivePower => self.active_power,
            MeasurementKind::Energy => self.energy,
        }
    }

    pub fn validate(&self) -> Result<(), RegisterMapError> {
        for (i, &a) in MeasurementKind::ALL.iter().enumerate() {
            if self.start(a) as u32 + BLOCK_LEN as u32 > 0x1_0000 {
                return Err(RegisterMapError::OutOfRange(a));
            }
            for &b in &MeasurementKind::ALL[i + 1..] {
                if self.start(a).abs_diff(self.start(b)) < BLOCK_LEN {
                    return Err(RegisterMapError::Overlap(a, b));
                }
            }
        }
        Ok(())
    }

    /// Six blocks packed back to back from 0x0000 in polling order, so a
    /// single 12-register read covers everything.
    pub fn is_contiguous_default(&self) -> bool {
        *self == RegisterMap::default()
    }

    /// The measurement whose block starts at `address`, if any.
    pub fn kind_at(&self, address: u16) -> Option<MeasurementKind> {
        MeasurementKind::ALL.into_iter().find(|&k| self.start(k) == address)
    }

    /// Total registers spanned by the contiguous layout.
    pub fn contiguous_len() -> u16 {
        BLOCK_LEN * MeasurementKind::ALL.len() as u16
    }
}
