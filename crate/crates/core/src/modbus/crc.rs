/// Modbus CRC-16 register (init 0xFFFF, reflected polynomial 0xA001).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Crc16(pub u16);

impl Crc16 {
    pub fn value(self) -> u16 {
        self.0
    }

    /// Wire order: low byte first.
    pub fn to_wire(self) -> [u8; 2] {
        self.0.to_le_bytes()
    }

    pub fn from_wire(bytes: [u8; 2]) -> Self {
        Crc16(u16::from_le_bytes(bytes))
    }
}

const POLY: u16 = 0xA001;

const TABLE: [u16; 256] = build_table();

const fn build_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u16;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ POLY } else { crc >> 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

pub fn crc16(payload: &[u8]) -> Crc16 {
    let crc = payload.iter().fold(0xFFFFu16, |crc, &b| {
        (crc >> 8) ^ TABLE[((crc ^ b as u16) & 0xFF) as usize]
    });
    Crc16(crc)
}

/// True when the trailing two bytes are the CRC of everything before them.
pub(crate) fn check_trailing(frame: &[u8]) -> Result<(), (u16, u16)> {
    let (body, tail) = frame.split_at(frame.len() - 2);
    let computed = crc16(body).value();
    let received = u16::from_le_bytes([tail[0], tail[1]]);
    if computed == received {
        Ok(())
    } else {
        Err((computed, received))
    }
}
