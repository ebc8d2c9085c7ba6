//! Modbus RTU framing for function 0x04 (read input registers).
//!
//! Frames are handled as whole byte slices. CRC is appended low byte first;
//! register payloads are big-endian. Measurements travel as two consecutive
//! registers holding a binary32 float, high word in the lower address.

mod crc;
mod float;
mod frame;

pub use crc::{crc16, Crc16};
pub use float::{f32_from_registers, f32_to_registers};
pub use frame::{
    decode_request, decode_response, encode_exception, encode_read_request,
    encode_read_response, response_len_hint, ExceptionCode, ExceptionResponse, ReadRequest,
    ReadResponse, FN_READ_INPUT_REGISTERS, MAX_READ_COUNT, REQUEST_LEN,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModbusError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("frame too short ({0} bytes)")]
    ShortFrame(usize),
    #[error("CRC mismatch (computed {computed:#06x}, received {received:#06x})")]
    CrcMismatch { computed: u16, received: u16 },
    #[error("unsupported function {function:#04x} for unit {unit}")]
    UnsupportedFunction { unit: u8, function: u8 },
    #[error("device returned exception {0:#04x}")]
    ExceptionReceived(u8),
    #[error("response from unit {got}, expected unit {expected}")]
    UnitMismatch { expected: u8, got: u8 },
    #[error("response length mismatch: expected {expected} data bytes, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("register pair decodes to NaN")]
    DecodeNaN,
    #[error("register pair decodes to infinity")]
    DecodeInfinity,
}
