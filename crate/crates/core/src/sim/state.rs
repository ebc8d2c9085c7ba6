use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::modbus::{
    decode_request, encode_exception, encode_read_response, f32_to_registers, ExceptionCode,
    ExceptionResponse, ModbusError, ReadRequest, FN_READ_INPUT_REGISTERS,
};
use crate::registers::{MeasurementKind, RegisterMap, BLOCK_LEN};
use crate::transport::Endpoint;

/// Supply band under normal operation, as fractions of nominal voltage.
pub const NORMAL_BAND: (f64, f64) = (0.94, 1.06);
/// Band while a voltage sag is injected.
pub const SAG_BAND: (f64, f64) = (0.80, 0.90);

const FREQUENCY_SPREAD: f64 = 0.5;
const FREQUENCY_STEP: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub unit: u8,
    pub seed: u64,
    pub nominal_voltage: f64,
    pub load_current: f64,
    pub frequency: f64,
    pub power_factor: f64,
    /// Largest voltage change per tick.
    pub walk_step: f64,
    /// Zero freezes the simulated clock.
    pub tick_ms: u64,
    pub register_map: RegisterMap,
    /// Where the slave is reachable (TCP listen address or in-memory bus).
    pub listen: Option<Endpoint>,
    /// Optional TCP address for the line-based fault-injection port.
    pub admin: Option<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            unit: 1,
            seed: 42,
            nominal_voltage: 220.0,
            load_current: 14.0,
            frequency: 50.0,
            power_factor: 0.85,
            walk_step: 0.5,
            tick_ms: 1000,
            register_map: RegisterMap::default(),
            listen: None,
            admin: None,
        }
    }
}

impl SimConfig {
    pub fn tick_period(&self) -> Option<Duration> {
        (self.tick_ms > 0).then(|| Duration::from_millis(self.tick_ms))
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(1..=247).contains(&self.unit) {
            return Err(format!("unit {} outside 1..=247", self.unit));
        }
        if !(self.power_factor > 0.0 && self.power_factor <= 1.0) {
            return Err(format!("power_factor {} outside (0, 1]", self.power_factor));
        }
        if !(self.nominal_voltage > 0.0) || !(self.load_current >= 0.0) || !(self.walk_step >= 0.0)
        {
            return Err("nominal_voltage, load_current and walk_step must be non-negative".into());
        }
        self.register_map.validate().map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    /// Meter loses its supply: every request goes unanswered.
    FuseBlown,
    VoltageSag,
    PumpOff,
    Restore,
}

impl FromStr for FaultKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "fuse-blown" => Ok(FaultKind::FuseBlown),
            "voltage-sag" => Ok(FaultKind::VoltageSag),
            "pump-off" => Ok(FaultKind::PumpOff),
            "restore" => Ok(FaultKind::Restore),
            other => Err(format!(
                "unknown fault '{other}' (expected fuse-blown, voltage-sag, pump-off or restore)"
            )),
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::FuseBlown => "fuse-blown",
            FaultKind::VoltageSag => "voltage-sag",
            FaultKind::PumpOff => "pump-off",
            FaultKind::Restore => "restore",
        })
    }
}

/// The six quantities as the meter would report them right now.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Readings {
    pub voltage: f32,
    pub current: f32,
    pub frequency: f32,
    pub power_factor: f32,
    pub active_power: f32,
    pub energy: f32,
}

impl Readings {
    pub fn value(&self, kind: MeasurementKind) -> f32 {
        match kind {
            MeasurementKind::Voltage => self.voltage,
            MeasurementKind::Current => self.current,
            MeasurementKind::Frequency => self.frequency,
            MeasurementKind::PowerFactor => self.power_factor,
            MeasurementKind::ActivePower => self.active_power,
            MeasurementKind::Energy => self.energy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimState {
    config: SimConfig,
    voltage: f64,
    frequency: f64,
    energy_kwh: f64,
    fuse_intact: bool,
    sagging: bool,
    pump_on: bool,
    rng: ChaCha8Rng,
}

impl SimState {
    pub fn new(config: SimConfig) -> Self {
        SimState {
            voltage: config.nominal_voltage,
            frequency: config.frequency,
            energy_kwh: 0.0,
            fuse_intact: true,
            sagging: false,
            pump_on: true,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn unit(&self) -> u8 {
        self.config.unit
    }

    pub fn fuse_intact(&self) -> bool {
        self.fuse_intact
    }

    /// Current voltage band in volts.
    pub fn voltage_band(&self) -> (f64, f64) {
        let (lo, hi) = if self.sagging { SAG_BAND } else { NORMAL_BAND };
        (lo * self.config.nominal_voltage, hi * self.config.nominal_voltage)
    }

    pub fn readings(&self) -> Readings {
        let voltage = self.voltage as f32;
        let current = if self.pump_on { self.config.load_current as f32 } else { 0.0 };
        let power_factor = self.config.power_factor as f32;
        Readings {
            voltage,
            current,
            frequency: self.frequency as f32,
            power_factor,
            active_power: voltage * current * power_factor,
            energy: self.energy_kwh as f32,
        }
    }

    /// Advance the simulated meter by `dt` seconds.
    pub fn tick(&mut self, dt: f64) {
        if !(dt > 0.0 && dt.is_finite()) {
            return;
        }
        let (lo, hi) = self.voltage_band();
        let step = self.config.walk_step;
        if step > 0.0 {
            let v = self.voltage + self.rng.random_range(-step..=step);
            self.voltage = reflect(v, lo, hi);
        }
        let f0 = self.config.frequency;
        let f = self.frequency + self.rng.random_range(-FREQUENCY_STEP..=FREQUENCY_STEP);
        self.frequency = reflect(f, f0 - FREQUENCY_SPREAD, f0 + FREQUENCY_SPREAD);

        let current = if self.pump_on { self.config.load_current } else { 0.0 };
        let watts = self.voltage * current * self.config.power_factor;
        self.energy_kwh += watts * dt / 3.6e6;
    }

    pub fn inject_fault(&mut self, fault: FaultKind) {
        match fault {
            FaultKind::FuseBlown => self.fuse_intact = false,
            FaultKind::PumpOff => self.pump_on = false,
            FaultKind::VoltageSag => {
                self.sagging = true;
                self.resample_voltage();
            }
            FaultKind::Restore => {
                self.fuse_intact = true;
                self.pump_on = true;
                if self.sagging {
                    self.sagging = false;
                    self.resample_voltage();
                }
            }
        }
    }

    fn resample_voltage(&mut self) {
        let (lo, hi) = self.voltage_band();
        self.voltage = self.rng.random_range(lo..=hi);
    }

    fn register(&self, address: u16, readings: &Readings) -> Option<u16> {
        let map = &self.config.register_map;
        MeasurementKind::ALL.into_iter().find_map(|kind| {
            let start = map.start(kind);
            let offset = address.checked_sub(start)?;
            if offset >= BLOCK_LEN {
                return None;
            }
            let (hi, lo) = f32_to_registers(readings.value(kind)).ok()?;
            Some(if offset == 0 { hi } else { lo })
        })
    }

    /// Register words for a read, or `None` if any address is unmapped.
    pub fn read_registers(&self, start: u16, count: u16) -> Option<Vec<u16>> {
        let readings = self.readings();
        (0..count)
            .map(|i| start.checked_add(i).and_then(|a| self.register(a, &readings)))
            .collect()
    }

    /// Answer one frame as the slave would. `None` means silence.
    pub fn handle_request(&self, frame: &[u8]) -> Option<Vec<u8>> {
        if !self.fuse_intact {
            return None;
        }
        let unit = self.config.unit;
        let refuse = |function, code| Some(encode_exception(&ExceptionResponse::new(unit, function, code)));
        match decode_request(frame) {
            Ok(ReadRequest { unit: u, .. }) if u != unit => None,
            Ok(req) => match self.read_registers(req.start, req.count) {
                Some(regs) => encode_read_response(unit, &regs).ok(),
                None => refuse(FN_READ_INPUT_REGISTERS, ExceptionCode::IllegalDataAddress),
            },
            Err(ModbusError::UnsupportedFunction { unit: u, function }) if u == unit => {
                refuse(function, ExceptionCode::IllegalFunction)
            }
            Err(ModbusError::InvalidArgument(_)) if frame[0] == unit => {
                refuse(FN_READ_INPUT_REGISTERS, ExceptionCode::IllegalDataValue)
            }
            Err(_) => None,
        }
    }
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let v = if v > hi { 2.0 * hi - v } else if v < lo { 2.0 * lo - v } else { v };
    v.clamp(lo, hi)
}
