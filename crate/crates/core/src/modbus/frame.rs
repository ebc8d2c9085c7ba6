use super::crc::{check_trailing, crc16};
use super::ModbusError;

pub const FN_READ_INPUT_REGISTERS: u8 = 0x04;
const EXCEPTION_BIT: u8 = 0x80;
pub const MAX_READ_COUNT: u16 = 125;
/// A read-input-registers request is always eight bytes on the wire.
pub const REQUEST_LEN: usize = 8;
const EXCEPTION_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReadRequest {
    pub unit: u8,
    pub start: u16,
    pub count: u16,
}

impl ReadRequest {
    pub fn new(unit: u8, start: u16, count: u16) -> Result<Self, ModbusError> {
        let req = ReadRequest { unit, start, count };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), ModbusError> {
        if !(1..=247).contains(&self.unit) {
            return Err(ModbusError::InvalidArgument(format!(
                "unit {} outside 1..=247",
                self.unit
            )));
        }
        if !(1..=MAX_READ_COUNT).contains(&self.count) {
            return Err(ModbusError::InvalidArgument(format!(
                "register count {} outside 1..={MAX_READ_COUNT}",
                self.count
            )));
        }
        if self.start as u32 + self.count as u32 > 0x1_0000 {
            return Err(ModbusError::InvalidArgument(format!(
                "register range {:#06x}+{} exceeds the address space",
                self.start, self.count
            )));
        }
        Ok(())
    }

    /// Total wire length of a normal response to this request.
    pub fn response_len(&self) -> usize {
        5 + 2 * self.count as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadResponse {
    pub unit: u8,
    pub registers: Vec<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ExceptionCode {
    IllegalFunction = 0x01,
    IllegalDataAddress = 0x02,
    IllegalDataValue = 0x03,
    DeviceFailure = 0x04,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExceptionResponse {
    pub unit: u8,
    /// Function code of the request being refused (without the 0x80 bit).
    pub function: u8,
    pub code: u8,
}

impl ExceptionResponse {
    pub fn new(unit: u8, function: u8, code: ExceptionCode) -> Self {
        ExceptionResponse { unit, function, code: code as u8 }
    }
}

fn push_crc(mut frame: Vec<u8>) -> Vec<u8> {
    let crc = crc16(&frame);
    frame.extend_from_slice(&crc.to_wire());
    frame
}

fn verify_crc(frame: &[u8]) -> Result<(), ModbusError> {
    check_trailing(frame)
        .map_err(|(computed, received)| ModbusError::CrcMismatch { computed, received })
}

pub fn encode_read_request(req: &ReadRequest) -> Result<Vec<u8>, ModbusError> {
    req.validate()?;
    let mut frame = Vec::with_capacity(REQUEST_LEN);
    frame.push(req.unit);
    frame.push(FN_READ_INPUT_REGISTERS);
    frame.extend_from_slice(&req.start.to_be_bytes());
    frame.extend_from_slice(&req.count.to_be_bytes());
    Ok(push_crc(frame))
}

/// Parse a request as seen by a slave. The CRC is checked before any field
/// is interpreted, so a corrupt frame never yields a unit or function.
pub fn decode_request(frame: &[u8]) -> Result<ReadRequest, ModbusError> {
    if frame.len() < REQUEST_LEN {
        return Err(ModbusError::ShortFrame(frame.len()));
    }
    verify_crc(frame)?;
    let unit = frame[0];
    let function = frame[1];
    if function != FN_READ_INPUT_REGISTERS {
        return Err(ModbusError::UnsupportedFunction { unit, function });
    }
    if frame.len() != REQUEST_LEN {
        return Err(ModbusError::LengthMismatch { expected: REQUEST_LEN, got: frame.len() });
    }
    let req = ReadRequest {
        unit,
        start: u16::from_be_bytes([frame[2], frame[3]]),
        count: u16::from_be_bytes([frame[4], frame[5]]),
    };
    req.validate()?;
    Ok(req)
}

pub fn encode_read_response(unit: u8, registers: &[u16]) -> Result<Vec<u8>, ModbusError> {
    if registers.is_empty() || registers.len() > MAX_READ_COUNT as usize {
        return Err(ModbusError::InvalidArgument(format!(
            "register list length {} outside 1..={MAX_READ_COUNT}",
            registers.len()
        )));
    }
    let mut frame = Vec::with_capacity(5 + 2 * registers.len());
    frame.push(unit);
    frame.push(FN_READ_INPUT_REGISTERS);
    frame.push((registers.len() * 2) as u8);
    for reg in registers {
        frame.extend_from_slice(&reg.to_be_bytes());
    }
    Ok(push_crc(frame))
}

pub fn encode_exception(exc: &ExceptionResponse) -> Vec<u8> {
    push_crc(vec![exc.unit, exc.function | EXCEPTION_BIT, exc.code])
}

/// Parse a slave's answer to `expected`. Returns exactly `expected.count`
/// registers or an error; nothing is returned from a frame whose CRC fails.
pub fn decode_response(frame: &[u8], expected: &ReadRequest) -> Result<Vec<u16>, ModbusError> {
    if frame.len() < EXCEPTION_LEN {
        return Err(ModbusError::ShortFrame(frame.len()));
    }
    verify_crc(frame)?;
    if frame[0] != expected.unit {
        return Err(ModbusError::UnitMismatch { expected: expected.unit, got: frame[0] });
    }
    let function = frame[1];
    if function == FN_READ_INPUT_REGISTERS | EXCEPTION_BIT {
        if frame.len() != EXCEPTION_LEN {
            return Err(ModbusError::LengthMismatch { expected: EXCEPTION_LEN, got: frame.len() });
        }
        return Err(ModbusError::ExceptionReceived(frame[2]));
    }
    if function != FN_READ_INPUT_REGISTERS {
        return Err(ModbusError::UnsupportedFunction { unit: frame[0], function });
    }
    let want = 2 * expected.count as usize;
    let byte_count = frame[2] as usize;
    let data = &frame[3..frame.len() - 2];
    if byte_count != want || data.len() != want {
        return Err(ModbusError::LengthMismatch { expected: want, got: data.len().min(byte_count) });
    }
    Ok(data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect())
}

/// Expected total length of a response frame, from its first bytes. `None`
/// until enough header bytes have arrived to tell.
pub fn response_len_hint(buf: &[u8]) -> Option<usize> {
    match buf {
        [_, function, ..] if function & EXCEPTION_BIT != 0 => Some(EXCEPTION_LEN),
        [_, _, byte_count, ..] => Some(5 + *byte_count as usize),
        _ => None,
    }
}
