//! Advertising-channel PDU construction, serialization, and parsing.
//!
//! A PDU carries a 6-byte advertiser address followed by an AdvData field
//! holding one service-data AD structure: a length byte, the AD type byte,
//! a 16-byte service UUID (little-endian on the wire), and the service-data
//! bytes that transport the actual channel messages.
//!
//! Two PDU families are modeled. Legacy non-connectable advertising caps
//! AdvData at 31 bytes, which leaves 13 bytes of service data. Extended
//! advertising is modeled with a single opaque 10-byte extended header in
//! front of the payload; the capacity-relevant quantity is the per-device
//! Maximum Advertising Data Length (MADL), from which the segment budget is
//! derived. Chaining across auxiliary PDUs is abstracted into that bound.
//!
//! Serialized frames wrap the PDU in fixed link-layer scaffolding (preamble,
//! advertising access address, trailing CRC-24). The CRC is computed on
//! serialize but carries no semantics here: loss is modeled by the medium,
//! never by corrupting frames.

use std::fmt;

use thiserror::Error;

/// Link-layer preamble byte emitted in front of every serialized frame.
pub const PREAMBLE: u8 = 0xAA;

/// Access address shared by all advertising-channel packets.
pub const ADVERTISING_ACCESS_ADDRESS: u32 = 0x8E89_BED6;

/// AD type code of the service-data structure.
pub const AD_TYPE_SERVICE_DATA: u8 = 0x16;

/// PDU type nibble for non-connectable undirected legacy advertising.
pub const PDU_TYPE_ADV_NONCONN_IND: u8 = 0x2;

/// PDU type nibble for extended advertising.
pub const PDU_TYPE_ADV_EXT_IND: u8 = 0x7;

/// Legacy service-data capacity in bytes.
pub const LEGACY_MAX_SERVICE_DATA: usize = 13;

/// Legacy AdvData capacity in bytes (length + type + UUID + service data).
pub const LEGACY_MAX_ADV_DATA: usize = 31;

/// Legacy PDU payload bounds (AdvA plus AdvData).
pub const LEGACY_MIN_PAYLOAD: usize = 6;
pub const LEGACY_MAX_PAYLOAD: usize = 37;

/// Size of the opaque extended header preceding the payload of an extended
/// PDU.
pub const EXTENDED_HEADER_LEN: usize = 10;

/// Hard cap on extended AdvData accepted by the serializer and parser,
/// independent of any per-device MADL.
pub const EXTENDED_MAX_ADV_DATA: usize = 256;

/// Bytes of AdvData consumed before service data begins: the AD length byte,
/// the AD type byte, and the 16-byte UUID.
pub const SERVICE_BLOCK_OVERHEAD: usize = 18;

const CRC_LEN: usize = 3;
const FRAME_HEADER_LEN: usize = 1 + 4 + 2; // preamble + access address + PDU header

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PduError {
    #[error("service data of {len} bytes exceeds the {max}-byte bound")]
    OversizeServiceData { len: usize, max: usize },
    #[error("extended PDU requested without an extended config")]
    MissingExtendedConfig,
    #[error("MADL {0} out of range (must be in 32..=254)")]
    BadMadl(u16),
    #[error("PDU violates invariant: {0}")]
    InvariantViolation(&'static str),
    #[error("frame truncated")]
    TruncatedFrame,
    #[error("declared length inconsistent with buffer")]
    LengthMismatch,
    #[error("no service-data AD structure in AdvData")]
    UnknownAdType,
    #[error("malformed hex dump line")]
    HexSyntax,
}

/// The two advertising families the channel runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PduKind {
    LegacyNonConnectable,
    ExtendedNonConnectable,
}

impl PduKind {
    pub fn label(self) -> &'static str {
        match self {
            PduKind::LegacyNonConnectable => "legacy",
            PduKind::ExtendedNonConnectable => "extended",
        }
    }
}

/// A full 16-byte service UUID. Stored in display order; the wire encoding
/// is little-endian (byte-reversed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServiceUuid(pub [u8; 16]);

impl ServiceUuid {
    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Display for ServiceUuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Per-device extended-advertising capacity.
///
/// `max_segment_bytes` is `madl - 17`: the 16-byte UUID plus the one-byte
/// segment number are charged against the MADL, while the AD length/type
/// bytes ride inside the opaque extended-header budget. This makes the
/// device-reported MADL of 254 yield a 237-byte segment budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtendedConfig {
    madl: u16,
}

impl ExtendedConfig {
    pub fn new(madl: u16) -> Result<Self, PduError> {
        if madl <= 31 || madl > 254 {
            return Err(PduError::BadMadl(madl));
        }
        Ok(ExtendedConfig { madl })
    }

    pub fn madl(&self) -> u16 {
        self.madl
    }

    /// Service-data capacity in bytes.
    pub fn max_service_data(&self) -> usize {
        self.madl as usize - 16
    }

    /// Maximum segment payload (z): service-data capacity minus the segment
    /// number byte.
    pub fn max_segment_bytes(&self) -> usize {
        self.madl as usize - 17
    }
}

/// One advertising-channel PDU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdvertisingPdu {
    pub kind: PduKind,
    /// 4-bit PDU type code from the header.
    pub header_type: u8,
    /// Byte count of the PDU payload. For legacy this is AdvA + AdvData and
    /// fits the 6-bit header field; for extended it also includes the
    /// extended header.
    pub payload_length: u16,
    pub adv_address: [u8; 6],
    /// Raw AdvData bytes (the AD structures).
    pub adv_data: Vec<u8>,
}

impl AdvertisingPdu {
    /// Whether the PDU type invites no connection. The protocol layer only
    /// accepts these.
    pub fn is_non_connectable(&self) -> bool {
        match self.kind {
            PduKind::LegacyNonConnectable => self.header_type == PDU_TYPE_ADV_NONCONN_IND,
            PduKind::ExtendedNonConnectable => self.header_type == PDU_TYPE_ADV_EXT_IND,
        }
    }

    /// Parses the service-data AD structure out of this PDU's AdvData.
    pub fn service_block(&self) -> Result<ServiceDataBlock, PduError> {
        parse_service_data(&self.adv_data)
    }
}

/// The service-data AD structure carried in AdvData.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceDataBlock {
    /// AD length byte: covers the type byte, UUID, and service data.
    pub ad_length: u8,
    pub ad_type: u8,
    pub service_uuid: ServiceUuid,
    pub service_data: Vec<u8>,
}

impl ServiceDataBlock {
    pub fn new(service_uuid: ServiceUuid, service_data: Vec<u8>) -> Self {
        let ad_length = (1 + 16 + service_data.len()) as u8;
        ServiceDataBlock {
            ad_length,
            ad_type: AD_TYPE_SERVICE_DATA,
            service_uuid,
            service_data,
        }
    }

    /// Encodes the block as AdvData bytes. The UUID goes out little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + 16 + self.service_data.len());
        out.push(self.ad_length);
        out.push(self.ad_type);
        out.extend(self.service_uuid.0.iter().rev());
        out.extend_from_slice(&self.service_data);
        out
    }
}

/// Service-data capacity for `kind`, given the extended config when needed.
pub fn service_data_capacity(kind: PduKind, cfg: Option<&ExtendedConfig>) -> Result<usize, PduError> {
    match kind {
        PduKind::LegacyNonConnectable => Ok(LEGACY_MAX_SERVICE_DATA),
        PduKind::ExtendedNonConnectable => cfg
            .map(|c| c.max_service_data())
            .ok_or(PduError::MissingExtendedConfig),
    }
}

/// Builds a non-connectable PDU whose AdvData is one well-formed
/// service-data block.
pub fn build_pdu(
    kind: PduKind,
    adv_address: [u8; 6],
    uuid: ServiceUuid,
    service_data: &[u8],
    cfg: Option<&ExtendedConfig>,
) -> Result<AdvertisingPdu, PduError> {
    let max = service_data_capacity(kind, cfg)?;
    if service_data.len() > max {
        return Err(PduError::OversizeServiceData {
            len: service_data.len(),
            max,
        });
    }
    let adv_data = ServiceDataBlock::new(uuid, service_data.to_vec()).encode();
    let (header_type, payload_length) = match kind {
        PduKind::LegacyNonConnectable => (PDU_TYPE_ADV_NONCONN_IND, (6 + adv_data.len()) as u16),
        PduKind::ExtendedNonConnectable => (
            PDU_TYPE_ADV_EXT_IND,
            (EXTENDED_HEADER_LEN + 6 + adv_data.len()) as u16,
        ),
    };
    Ok(AdvertisingPdu {
        kind,
        header_type,
        payload_length,
        adv_address,
        adv_data,
    })
}

/// CRC-24 over the PDU bytes (header + payload), as used on the advertising
/// channel: polynomial 0x065B, preset 0x555555, LSB-first.
pub fn crc24(data: &[u8]) -> u32 {
    let mut crc: u32 = 0x55_5555;
    for &byte in data {
        for bit in 0..8 {
            let input = u32::from((byte >> bit) & 1);
            let feedback = input ^ ((crc >> 23) & 1);
            crc = (crc << 1) & 0xFF_FFFF;
            if feedback != 0 {
                crc ^= 0x00_065B;
            }
        }
    }
    crc
}

fn check_legacy_invariants(pdu: &AdvertisingPdu) -> Result<(), PduError> {
    if pdu.adv_data.len() > LEGACY_MAX_ADV_DATA {
        return Err(PduError::InvariantViolation("legacy AdvData exceeds 31 bytes"));
    }
    let payload = 6 + pdu.adv_data.len();
    if !(LEGACY_MIN_PAYLOAD..=LEGACY_MAX_PAYLOAD).contains(&payload) {
        return Err(PduError::InvariantViolation("legacy payload outside 6..=37"));
    }
    if pdu.payload_length as usize != payload {
        return Err(PduError::InvariantViolation("legacy length field mismatch"));
    }
    Ok(())
}

fn check_extended_invariants(pdu: &AdvertisingPdu) -> Result<(), PduError> {
    if pdu.adv_data.len() > EXTENDED_MAX_ADV_DATA {
        return Err(PduError::InvariantViolation("extended AdvData exceeds hard cap"));
    }
    let payload = EXTENDED_HEADER_LEN + 6 + pdu.adv_data.len();
    if pdu.payload_length as usize != payload {
        return Err(PduError::InvariantViolation("extended length field mismatch"));
    }
    Ok(())
}

/// Serializes a PDU into link-layer frame bytes.
///
/// Layout: preamble, access address (LE), 2-byte PDU header, payload,
/// CRC-24 (LE). The legacy payload is AdvA then AdvData with the payload
/// length in the header's 6-bit field; the extended payload inserts the
/// 10-byte extended header (which carries the 16-bit AdvData length) before
/// AdvA.
pub fn serialize_pdu(pdu: &AdvertisingPdu) -> Result<Vec<u8>, PduError> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + pdu.payload_length as usize + CRC_LEN);
    out.push(PREAMBLE);
    out.extend_from_slice(&ADVERTISING_ACCESS_ADDRESS.to_le_bytes());
    match pdu.kind {
        PduKind::LegacyNonConnectable => {
            check_legacy_invariants(pdu)?;
            out.push(pdu.header_type & 0x0F);
            out.push(pdu.payload_length as u8 & 0x3F);
            out.extend_from_slice(&pdu.adv_address);
            out.extend_from_slice(&pdu.adv_data);
        }
        PduKind::ExtendedNonConnectable => {
            check_extended_invariants(pdu)?;
            out.push(pdu.header_type & 0x0F);
            out.push(0x00);
            let mut ext = [0u8; EXTENDED_HEADER_LEN];
            ext[..2].copy_from_slice(&(pdu.adv_data.len() as u16).to_le_bytes());
            out.extend_from_slice(&ext);
            out.extend_from_slice(&pdu.adv_address);
            out.extend_from_slice(&pdu.adv_data);
        }
    }
    let crc = crc24(&out[5..]);
    out.extend_from_slice(&crc.to_le_bytes()[..3]);
    Ok(out)
}

/// Parses a serialized frame back into a PDU.
///
/// Never reads past declared lengths and never panics on arbitrary input.
/// The trailing CRC bytes must be present but are not validated: loss and
/// corruption are the medium's business.
pub fn parse_pdu(raw: &[u8]) -> Result<AdvertisingPdu, PduError> {
    if raw.len() < FRAME_HEADER_LEN {
        return Err(PduError::TruncatedFrame);
    }
    let header_type = raw[5] & 0x0F;
    let rest = &raw[FRAME_HEADER_LEN..];
    if header_type == PDU_TYPE_ADV_EXT_IND {
        if rest.len() < EXTENDED_HEADER_LEN {
            return Err(PduError::TruncatedFrame);
        }
        let adv_len = u16::from_le_bytes([rest[0], rest[1]]) as usize;
        if adv_len > EXTENDED_MAX_ADV_DATA {
            return Err(PduError::LengthMismatch);
        }
        let body = &rest[EXTENDED_HEADER_LEN..];
        let need = 6 + adv_len + CRC_LEN;
        if body.len() < need {
            return Err(PduError::TruncatedFrame);
        }
        if body.len() > need {
            return Err(PduError::LengthMismatch);
        }
        let mut adv_address = [0u8; 6];
        adv_address.copy_from_slice(&body[..6]);
        Ok(AdvertisingPdu {
            kind: PduKind::ExtendedNonConnectable,
            header_type,
            payload_length: (EXTENDED_HEADER_LEN + 6 + adv_len) as u16,
            adv_address,
            adv_data: body[6..6 + adv_len].to_vec(),
        })
    } else {
        let payload_length = (raw[6] & 0x3F) as usize;
        if !(LEGACY_MIN_PAYLOAD..=LEGACY_MAX_PAYLOAD).contains(&payload_length) {
            return Err(PduError::LengthMismatch);
        }
        let need = payload_length + CRC_LEN;
        if rest.len() < need {
            return Err(PduError::TruncatedFrame);
        }
        if rest.len() > need {
            return Err(PduError::LengthMismatch);
        }
        let mut adv_address = [0u8; 6];
        adv_address.copy_from_slice(&rest[..6]);
        Ok(AdvertisingPdu {
            kind: PduKind::LegacyNonConnectable,
            header_type,
            payload_length: payload_length as u16,
            adv_address,
            adv_data: rest[6..payload_length].to_vec(),
        })
    }
}

/// Walks AdvData and returns the first service-data AD structure.
///
/// Other AD types are skipped, not crashed on; a block whose declared length
/// overruns the buffer is a `LengthMismatch`.
pub fn parse_service_data(adv_data: &[u8]) -> Result<ServiceDataBlock, PduError> {
    let mut i = 0;
    while i < adv_data.len() {
        let len = adv_data[i] as usize;
        if len == 0 {
            // zero-length structure terminates the walk
            break;
        }
        if i + 1 + len > adv_data.len() {
            return Err(PduError::LengthMismatch);
        }
        let ad_type = adv_data[i + 1];
        if ad_type == AD_TYPE_SERVICE_DATA {
            if len < 17 {
                return Err(PduError::LengthMismatch);
            }
            let mut uuid = [0u8; 16];
            for (k, b) in adv_data[i + 2..i + 18].iter().rev().enumerate() {
                uuid[k] = *b;
            }
            return Ok(ServiceDataBlock {
                ad_length: len as u8,
                ad_type,
                service_uuid: ServiceUuid(uuid),
                service_data: adv_data[i + 18..i + 1 + len].to_vec(),
            });
        }
        i += 1 + len;
    }
    Err(PduError::UnknownAdType)
}

/// Renders a PDU as one hexdump line: lowercase hex, space-separated bytes.
pub fn to_hex_line(pdu: &AdvertisingPdu) -> Result<String, PduError> {
    let bytes = serialize_pdu(pdu)?;
    let mut line = String::with_capacity(bytes.len() * 3);
    for (i, b) in bytes.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        line.push_str(&format!("{b:02x}"));
    }
    Ok(line)
}

/// Parses one hexdump line back into a PDU.
pub fn from_hex_line(line: &str) -> Result<AdvertisingPdu, PduError> {
    let mut bytes = Vec::new();
    for tok in line.split_whitespace() {
        if tok.len() != 2 {
            return Err(PduError::HexSyntax);
        }
        bytes.push(u8::from_str_radix(tok, 16).map_err(|_| PduError::HexSyntax)?);
    }
    parse_pdu(&bytes)
}
