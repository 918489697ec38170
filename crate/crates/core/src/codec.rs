//! E3AP PDU definitions and their binary wire format.
//!
//! Every frame starts with a fixed 6-byte header followed by a kind-specific
//! body. All integers are big-endian, there is no padding and no TLV
//! extension mechanism.
//!
//! ```text
//! ┌────────────┬─────────┬──────────────────┐
//! │ version(1) │ kind(1) │ body_len(4)      │  body_len bytes of body ...
//! └────────────┴─────────┴──────────────────┘
//! ```
//!
//! | kind | name                 | body                                                        |
//! |------|----------------------|-------------------------------------------------------------|
//! | 0x01 | SetupRequest         | dapp_id u32, n u16, n × sm_id u16                           |
//! | 0x02 | SetupResponse        | dapp_id u32, accepted u8, n u16, n × sm_id u16              |
//! | 0x03 | SubscriptionRequest  | dapp_id u32, sm_id u16, period_slots u16                    |
//! | 0x04 | SubscriptionResponse | dapp_id u32, sm_id u16, accepted u8                         |
//! | 0x05 | Indication           | sm_id u16, sequence u32, origin_ts_ns u64, len u32, payload |
//! | 0x06 | Control              | sm_id u16, sequence u32, n u16, n × prb u32                 |
//! | 0x07 | Report               | dapp_id u32, sm_id u16, len u32, payload                    |
//! | 0x08 | XAppControl          | dapp_id u32, policy_key u16, len u32, payload               |

use thiserror::Error;

/// Protocol version carried in every header.
pub const PROTOCOL_VERSION: u8 = 1;
/// Fixed header size: version, kind, body_len.
pub const HEADER_LEN: usize = 6;
/// Indication body bytes in front of the payload: sm_id, sequence, origin_ts_ns, payload_len.
pub const INDICATION_FIXED_LEN: usize = 2 + 4 + 8 + 4;
/// Control body bytes in front of the entries: sm_id, sequence, n_entries.
pub const CONTROL_FIXED_LEN: usize = 2 + 4 + 2;
/// Bytes per PRB entry in a Control body.
pub const PRB_ENTRY_LEN: usize = 4;
/// Bytes per I/Q sample (int16 I + int16 Q).
pub const IQ_SAMPLE_LEN: usize = 4;

/// Service model streaming frequency-domain I/Q bins.
pub const SM_SPECTRUM: u16 = 1;
/// Service model streaming uplink channel snapshots.
pub const SM_CIR: u16 = 2;

/// Policy key understood by the agent and SDK: detection threshold override
/// in signed centi-dB (i32 payload).
pub const POLICY_DETECTION_THRESHOLD: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("field `{field}` value {value} exceeds its wire width")]
    FieldOutOfRange { field: &'static str, value: u64 },
    #[error("list `{field}` has {len} elements, the wire limit is 65535")]
    ListTooLong { field: &'static str, len: usize },
    #[error("frame needs {needed} bytes, only {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("unknown PDU kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("unknown protocol version {0}")]
    UnknownVersion(u8),
    #[error("malformed {kind:?} body: {reason}")]
    MalformedBody { kind: PduKind, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PduKind {
    SetupRequest = 1,
    SetupResponse = 2,
    SubscriptionRequest = 3,
    SubscriptionResponse = 4,
    Indication = 5,
    Control = 6,
    Report = 7,
    XAppControl = 8,
}

impl TryFrom<u8> for PduKind {
    type Error = CodecError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Ok(match value {
            1 => Self::SetupRequest,
            2 => Self::SetupResponse,
            3 => Self::SubscriptionRequest,
            4 => Self::SubscriptionResponse,
            5 => Self::Indication,
            6 => Self::Control,
            7 => Self::Report,
            8 => Self::XAppControl,
            other => return Err(CodecError::UnknownKind(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetupRequest {
    pub dapp_id: u32,
    pub requested_sm_ids: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetupResponse {
    pub dapp_id: u32,
    pub accepted: bool,
    pub accepted_sm_ids: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscriptionRequest {
    pub dapp_id: u32,
    pub sm_id: u16,
    /// 0 streams every available snapshot.
    pub period_slots: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscriptionResponse {
    pub dapp_id: u32,
    pub sm_id: u16,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Indication {
    pub sm_id: u16,
    pub sequence: u32,
    pub origin_ts_ns: u64,
    pub payload: Vec<u8>,
}

impl Indication {
    /// Number of 4-byte samples carried by the payload.
    pub fn sample_count(&self) -> usize {
        self.payload.len() / IQ_SAMPLE_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Control {
    pub sm_id: u16,
    /// Sequence of the indication that triggered this control.
    pub sequence: u32,
    pub entries: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub dapp_id: u32,
    pub sm_id: u16,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XAppControl {
    pub dapp_id: u32,
    pub policy_key: u16,
    pub policy_value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum E3Pdu {
    SetupRequest(SetupRequest),
    SetupResponse(SetupResponse),
    SubscriptionRequest(SubscriptionRequest),
    SubscriptionResponse(SubscriptionResponse),
    Indication(Indication),
    Control(Control),
    Report(Report),
    XAppControl(XAppControl),
}

impl E3Pdu {
    pub fn kind(&self) -> PduKind {
        match self {
            Self::SetupRequest(_) => PduKind::SetupRequest,
            Self::SetupResponse(_) => PduKind::SetupResponse,
            Self::SubscriptionRequest(_) => PduKind::SubscriptionRequest,
            Self::SubscriptionResponse(_) => PduKind::SubscriptionResponse,
            Self::Indication(_) => PduKind::Indication,
            Self::Control(_) => PduKind::Control,
            Self::Report(_) => PduKind::Report,
            Self::XAppControl(_) => PduKind::XAppControl,
        }
    }

    /// Body length in bytes, without the header.
    pub fn body_len(&self) -> usize {
        match self {
            Self::SetupRequest(b) => 4 + 2 + 2 * b.requested_sm_ids.len(),
            Self::SetupResponse(b) => 4 + 1 + 2 + 2 * b.accepted_sm_ids.len(),
            Self::SubscriptionRequest(_) => 4 + 2 + 2,
            Self::SubscriptionResponse(_) => 4 + 2 + 1,
            Self::Indication(b) => INDICATION_FIXED_LEN + b.payload.len(),
            Self::Control(b) => CONTROL_FIXED_LEN + PRB_ENTRY_LEN * b.entries.len(),
            Self::Report(b) => 4 + 2 + 4 + b.payload.len(),
            Self::XAppControl(b) => 4 + 2 + 4 + b.policy_value.len(),
        }
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.body_len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        let mut out = Vec::with_capacity(self.frame_len());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    /// Appends the encoded frame to `out`. On error `out` is left unchanged.
    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), CodecError> {
        let body_len = self.body_len();
        let body_len32 = u32::try_from(body_len).map_err(|_| CodecError::FieldOutOfRange {
            field: "body_len",
            value: body_len as u64,
        })?;
        self.validate()?;

        out.reserve(HEADER_LEN + body_len);
        out.push(PROTOCOL_VERSION);
        out.push(self.kind() as u8);
        out.extend_from_slice(&body_len32.to_be_bytes());
        match self {
            Self::SetupRequest(b) => {
                put_u32(out, b.dapp_id);
                put_u16_list(out, &b.requested_sm_ids);
            }
            Self::SetupResponse(b) => {
                put_u32(out, b.dapp_id);
                out.push(b.accepted as u8);
                put_u16_list(out, &b.accepted_sm_ids);
            }
            Self::SubscriptionRequest(b) => {
                put_u32(out, b.dapp_id);
                put_u16(out, b.sm_id);
                put_u16(out, b.period_slots);
            }
            Self::SubscriptionResponse(b) => {
                put_u32(out, b.dapp_id);
                put_u16(out, b.sm_id);
                out.push(b.accepted as u8);
            }
            Self::Indication(b) => {
                put_u16(out, b.sm_id);
                put_u32(out, b.sequence);
                out.extend_from_slice(&b.origin_ts_ns.to_be_bytes());
                put_u32(out, b.payload.len() as u32);
                out.extend_from_slice(&b.payload);
            }
            Self::Control(b) => {
                put_u16(out, b.sm_id);
                put_u32(out, b.sequence);
                put_u16(out, b.entries.len() as u16);
                for prb in &b.entries {
                    put_u32(out, *prb);
                }
            }
            Self::Report(b) => {
                put_u32(out, b.dapp_id);
                put_u16(out, b.sm_id);
                put_u32(out, b.payload.len() as u32);
                out.extend_from_slice(&b.payload);
            }
            Self::XAppControl(b) => {
                put_u32(out, b.dapp_id);
                put_u16(out, b.policy_key);
                put_u32(out, b.policy_value.len() as u32);
                out.extend_from_slice(&b.policy_value);
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CodecError> {
        fn list(field: &'static str, len: usize) -> Result<(), CodecError> {
            if len > u16::MAX as usize {
                return Err(CodecError::ListTooLong { field, len });
            }
            Ok(())
        }
        fn blob(field: &'static str, len: usize) -> Result<(), CodecError> {
            if len > u32::MAX as usize {
                return Err(CodecError::FieldOutOfRange {
                    field,
                    value: len as u64,
                });
            }
            Ok(())
        }
        match self {
            Self::SetupRequest(b) => list("requested_sm_ids", b.requested_sm_ids.len()),
            Self::SetupResponse(b) => list("accepted_sm_ids", b.accepted_sm_ids.len()),
            Self::Indication(b) => {
                blob("payload", b.payload.len())?;
                if sample_aligned_sm(b.sm_id) && b.payload.len() % IQ_SAMPLE_LEN != 0 {
                    return Err(CodecError::FieldOutOfRange {
                        field: "payload_len (not a multiple of 4)",
                        value: b.payload.len() as u64,
                    });
                }
                Ok(())
            }
            Self::Control(b) => list("entries", b.entries.len()),
            Self::Report(b) => blob("payload", b.payload.len()),
            Self::XAppControl(b) => blob("policy_value", b.policy_value.len()),
            Self::SubscriptionRequest(_) | Self::SubscriptionResponse(_) => Ok(()),
        }
    }

    /// Decodes one frame from the front of `bytes`, returning the PDU and the
    /// number of bytes consumed. Bytes after the frame are not inspected.
    pub fn decode(bytes: &[u8]) -> Result<(E3Pdu, usize), CodecError> {
        let header = FrameHeader::parse(bytes)?;
        let total = header.frame_len();
        if bytes.len() < total {
            return Err(CodecError::Truncated {
                needed: total,
                available: bytes.len(),
            });
        }
        let pdu = decode_body(header.kind, &bytes[HEADER_LEN..total])?;
        Ok((pdu, total))
    }
}

/// Indication payloads for these service models are arrays of 4-byte samples.
pub fn sample_aligned_sm(sm_id: u16) -> bool {
    sm_id == SM_SPECTRUM || sm_id == SM_CIR
}

/// A parsed 6-byte frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub kind: PduKind,
    pub body_len: u32,
}

impl FrameHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        if bytes[0] != PROTOCOL_VERSION {
            return Err(CodecError::UnknownVersion(bytes[0]));
        }
        let kind = PduKind::try_from(bytes[1])?;
        let body_len = u32::from_be_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]);
        Ok(Self { kind, body_len })
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.body_len as usize
    }
}

fn decode_body(kind: PduKind, body: &[u8]) -> Result<E3Pdu, CodecError> {
    let mut r = BodyReader { kind, buf: body };
    let pdu = match kind {
        PduKind::SetupRequest => E3Pdu::SetupRequest(SetupRequest {
            dapp_id: r.u32()?,
            requested_sm_ids: r.u16_list()?,
        }),
        PduKind::SetupResponse => E3Pdu::SetupResponse(SetupResponse {
            dapp_id: r.u32()?,
            accepted: r.flag()?,
            accepted_sm_ids: r.u16_list()?,
        }),
        PduKind::SubscriptionRequest => E3Pdu::SubscriptionRequest(SubscriptionRequest {
            dapp_id: r.u32()?,
            sm_id: r.u16()?,
            period_slots: r.u16()?,
        }),
        PduKind::SubscriptionResponse => E3Pdu::SubscriptionResponse(SubscriptionResponse {
            dapp_id: r.u32()?,
            sm_id: r.u16()?,
            accepted: r.flag()?,
        }),
        PduKind::Indication => {
            let sm_id = r.u16()?;
            let sequence = r.u32()?;
            let origin_ts_ns = r.u64()?;
            let payload = r.blob()?;
            if sample_aligned_sm(sm_id) && payload.len() % IQ_SAMPLE_LEN != 0 {
                return Err(r.malformed("sample payload not a multiple of 4 bytes"));
            }
            E3Pdu::Indication(Indication {
                sm_id,
                sequence,
                origin_ts_ns,
                payload,
            })
        }
        PduKind::Control => {
            let sm_id = r.u16()?;
            let sequence = r.u32()?;
            let n = r.u16()? as usize;
            if r.buf.len() != n * PRB_ENTRY_LEN {
                return Err(r.malformed("entry count disagrees with body length"));
            }
            let entries = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
            E3Pdu::Control(Control {
                sm_id,
                sequence,
                entries,
            })
        }
        PduKind::Report => E3Pdu::Report(Report {
            dapp_id: r.u32()?,
            sm_id: r.u16()?,
            payload: r.blob()?,
        }),
        PduKind::XAppControl => E3Pdu::XAppControl(XAppControl {
            dapp_id: r.u32()?,
            policy_key: r.u16()?,
            policy_value: r.blob()?,
        }),
    };
    if !r.buf.is_empty() {
        return Err(r.malformed("trailing bytes inside body"));
    }
    Ok(pdu)
}

struct BodyReader<'a> {
    kind: PduKind,
    buf: &'a [u8],
}

impl<'a> BodyReader<'a> {
    fn malformed(&self, reason: &'static str) -> CodecError {
        CodecError::MalformedBody {
            kind: self.kind,
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(self.malformed("body shorter than its fields"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_be_bytes(a))
    }

    fn flag(&mut self) -> Result<bool, CodecError> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(self.malformed("boolean field not 0 or 1")),
        }
    }

    fn u16_list(&mut self) -> Result<Vec<u16>, CodecError> {
        let n = self.u16()? as usize;
        if self.buf.len() < 2 * n {
            return Err(self.malformed("list count exceeds body"));
        }
        (0..n).map(|_| self.u16()).collect()
    }

    fn blob(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.u32()? as usize;
        if self.buf.len() != n {
            return Err(self.malformed("payload_len disagrees with body length"));
        }
        Ok(self.take(n)?.to_vec())
    }
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u16_list(out: &mut Vec<u8>, items: &[u16]) {
    put_u16(out, items.len() as u16);
    for v in items {
        put_u16(out, *v);
    }
}

/// Framing bytes of an Indication carrying `payload_len` bytes of payload.
pub const INDICATION_FRAMING_LEN: usize = HEADER_LEN + INDICATION_FIXED_LEN;

/// `(frame_len - payload_len) / payload_len` for an Indication carrying
/// `payload_len` bytes. Degenerate for tiny payloads (1 byte gives 23.0).
pub fn framing_overhead(payload_len: usize) -> f64 {
    INDICATION_FRAMING_LEN as f64 / payload_len as f64
}

/// Header bytes relative to the body for an Indication carrying `payload_len` bytes.
pub fn header_overhead(payload_len: usize) -> f64 {
    HEADER_LEN as f64 / (INDICATION_FIXED_LEN + payload_len) as f64
}
