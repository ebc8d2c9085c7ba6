use super::ModbusError;

/// Assemble a binary32 value from two registers, high word first.
pub fn f32_from_registers(hi: u16, lo: u16) -> Result<f32, ModbusError> {
    let value = f32::from_bits(((hi as u32) << 16) | lo as u32);
    if value.is_nan() {
        Err(ModbusError::DecodeNaN)
    } else if value.is_infinite() {
        Err(ModbusError::DecodeInfinity)
    } else {
        Ok(value)
    }
}

pub fn f32_to_registers(value: f32) -> Result<(u16, u16), ModbusError> {
    if !value.is_finite() {
        return Err(ModbusError::InvalidArgument(format!(
            "cannot encode non-finite value {value}"
        )));
    }
    let bits = value.to_bits();
    Ok(((bits >> 16) as u16, bits as u16))
}
