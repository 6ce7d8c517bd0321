//! Wire messages exchanged between dispensers, aircraft, the base station,
//! recipients and operators, plus the handshakes built on them.
//!
//! A message is one JSON object per line:
//! `{"seq":..,"t":..,"src":..,"dst":..,"kind":..,"payload":{..}}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::world::{Position, SignatureVector, Verdict};

pub const BARCODE_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertContext {
    pub aircraft: String,
    pub stop: String,
    pub articles: Vec<String>,
    pub position: Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Body {
    EnRouteNotice {
        stop: String,
        eta_s: f64,
        articles: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        barcode: Option<String>,
    },
    DeliveryAlert(AlertContext),
    PermissionRequest {
        stop: String,
        articles: Vec<String>,
    },
    PermissionResponse {
        stop: String,
        granted: bool,
    },
    SignatureMismatch {
        stop: String,
        confidence: f64,
    },
    OperatorDecisionRequest {
        decision: String,
        stop: String,
        confidence: f64,
        deadline_t_s: f64,
        context: AlertContext,
    },
    OperatorDecisionResponse {
        decision: String,
        verdict: Verdict,
    },
    BarcodeChallenge {
        stop: String,
        article: String,
    },
    BarcodeScan {
        stop: String,
        code: String,
    },
    DeliveryAck {
        article: String,
        stop: String,
    },
    RescheduleRequest {
        stop: String,
        earliest_s: f64,
    },
    RescheduleConfirm {
        stop: String,
        eta_s: f64,
    },
    BatteryLow {
        battery_j: f64,
        fraction: f64,
    },
    PauseDeliveries {
        remaining_stops: usize,
    },
    HailRequest {
        job: String,
        position: Position,
    },
    HailOffer {
        job: String,
        aircraft: String,
        eta_s: f64,
    },
    BookingConfirm {
        job: String,
    },
    PickupArrival {
        job: String,
        aircraft: String,
    },
    LoadComplete {
        job: String,
    },
    AssistanceRequest {
        request: String,
    },
    AssistanceResolved {
        request: String,
    },
    AbortNotice {
        stop: String,
        reason: String,
        attempts: u32,
    },
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::EnRouteNotice { .. } => "EnRouteNotice",
            Body::DeliveryAlert(_) => "DeliveryAlert",
            Body::PermissionRequest { .. } => "PermissionRequest",
            Body::PermissionResponse { .. } => "PermissionResponse",
            Body::SignatureMismatch { .. } => "SignatureMismatch",
            Body::OperatorDecisionRequest { .. } => "OperatorDecisionRequest",
            Body::OperatorDecisionResponse { .. } => "OperatorDecisionResponse",
            Body::BarcodeChallenge { .. } => "BarcodeChallenge",
            Body::BarcodeScan { .. } => "BarcodeScan",
            Body::DeliveryAck { .. } => "DeliveryAck",
            Body::RescheduleRequest { .. } => "RescheduleRequest",
            Body::RescheduleConfirm { .. } => "RescheduleConfirm",
            Body::BatteryLow { .. } => "BatteryLow",
            Body::PauseDeliveries { .. } => "PauseDeliveries",
            Body::HailRequest { .. } => "HailRequest",
            Body::HailOffer { .. } => "HailOffer",
            Body::BookingConfirm { .. } => "BookingConfirm",
            Body::PickupArrival { .. } => "PickupArrival",
            Body::LoadComplete { .. } => "LoadComplete",
            Body::AssistanceRequest { .. } => "AssistanceRequest",
            Body::AssistanceResolved { .. } => "AssistanceResolved",
            Body::AbortNotice { .. } => "AbortNotice",
        }
    }
}

pub const MESSAGE_KINDS: [&str; 22] = [
    "EnRouteNotice",
    "DeliveryAlert",
    "PermissionRequest",
    "PermissionResponse",
    "SignatureMismatch",
    "OperatorDecisionRequest",
    "OperatorDecisionResponse",
    "BarcodeChallenge",
    "BarcodeScan",
    "DeliveryAck",
    "RescheduleRequest",
    "RescheduleConfirm",
    "BatteryLow",
    "PauseDeliveries",
    "HailRequest",
    "HailOffer",
    "BookingConfirm",
    "PickupArrival",
    "LoadComplete",
    "AssistanceRequest",
    "AssistanceResolved",
    "AbortNotice",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u64,
    pub t: f64,
    pub src: String,
    pub dst: String,
    #[serde(flatten)]
    pub body: Body,
}

/// A message before the bus stamps it with `seq` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Draft {
    pub src: String,
    pub dst: String,
    pub body: Body,
}

impl Draft {
    pub fn new(src: impl Into<String>, dst: impl Into<String>, body: Body) -> Self {
        Self {
            src: src.into(),
            dst: dst.into(),
            body,
        }
    }

    pub fn stamp(self, seq: u64, t: f64) -> Message {
        Message {
            seq,
            t,
            src: self.src,
            dst: self.dst,
            body: self.body,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("decode error at byte {offset}: {reason}")]
pub struct DecodeError {
    pub offset: usize,
    pub reason: String,
}

/// Serializes without the trailing newline.
pub fn encode(m: &Message) -> String {
    serde_json::to_string(m).expect("messages serialize")
}

pub fn decode(line: &str) -> Result<Message, DecodeError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    if line.trim().is_empty() {
        return Err(DecodeError {
            offset: 0,
            reason: "empty line".into(),
        });
    }
    serde_json::from_str(line).map_err(|e| DecodeError {
        offset: byte_offset(line, e.line(), e.column()),
        reason: e.to_string(),
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

// ---------------------------------------------------------------------------
// Signature matching

#[derive(Debug, Error, PartialEq, Eq)]
#[error("signature vector has zero norm")]
pub struct ZeroVector;

/// Cosine similarity clamped to `[0, 1]`.
pub fn signature_confidence(stored: &SignatureVector, captured: &SignatureVector) -> Result<f64, ZeroVector> {
    let (a, b) = (stored.norm(), captured.norm());
    if a == 0.0 || b == 0.0 {
        return Err(ZeroVector);
    }
    let dot: f64 = stored.0.iter().zip(captured.0.iter()).map(|(x, y)| x * y).sum();
    Ok((dot / (a * b)).clamp(0.0, 1.0))
}

/// Adds noise of relative magnitude `rel` in a random direction.
pub fn perturb(v: &SignatureVector, rel: f64, rng: &mut SplitMix64) -> SignatureVector {
    let mut dir = [0.0; crate::world::SIGNATURE_DIM];
    for d in dir.iter_mut() {
        *d = rng.uniform(-1.0, 1.0);
    }
    let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    let scale = if n > 0.0 { rel * v.norm() / n } else { 0.0 };
    let mut out = v.0;
    for (o, d) in out.iter_mut().zip(dir) {
        *o += scale * d;
    }
    SignatureVector(out)
}

// ---------------------------------------------------------------------------
// Barcodes

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Barcode(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanResult {
    Matched,
    Rejected,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MalformedBarcode {
    #[error("barcode must have {BARCODE_LEN} digits, got {0:?}")]
    Shape(String),
    #[error("bad check digit in {code:?}: expected {expected}")]
    CheckDigit { code: String, expected: u32 },
}

pub fn check_digit(first11: &str) -> u32 {
    first11.chars().filter_map(|c| c.to_digit(10)).sum::<u32>() % 10
}

impl Barcode {
    pub fn validate(&self) -> Result<(), MalformedBarcode> {
        let s = &self.0;
        if s.len() != BARCODE_LEN || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(MalformedBarcode::Shape(s.clone()));
        }
        let expected = check_digit(&s[..BARCODE_LEN - 1]);
        if s.as_bytes()[BARCODE_LEN - 1] - b'0' != expected as u8 {
            return Err(MalformedBarcode::CheckDigit {
                code: s.clone(),
                expected,
            });
        }
        Ok(())
    }
}

/// Draws eleven digits from `rng` and appends the check digit. The article
/// id only labels the code; the digits depend on the generator alone.
pub fn barcode_issue(_article: &str, rng: &mut SplitMix64) -> Barcode {
    let mut s: String = (0..BARCODE_LEN - 1)
        .map(|_| char::from(b'0' + rng.below(10) as u8))
        .collect();
    let c = check_digit(&s);
    s.push(char::from_digit(c, 10).expect("single digit"));
    Barcode(s)
}

pub fn barcode_verify(expected: &Barcode, scanned: &Barcode) -> Result<ScanResult, MalformedBarcode> {
    scanned.validate()?;
    Ok(if expected == scanned {
        ScanResult::Matched
    } else {
        ScanResult::Rejected
    })
}

/// A valid code guaranteed to differ from `code`.
pub fn wrong_barcode(code: &Barcode) -> Barcode {
    let mut digits: Vec<u8> = code.0.bytes().map(|b| b - b'0').collect();
    digits[0] = (digits[0] + 1) % 10;
    let first: String = digits[..BARCODE_LEN - 1].iter().map(|d| char::from(b'0' + d)).collect();
    let c = check_digit(&first);
    Barcode(format!("{first}{c}"))
}

// ---------------------------------------------------------------------------
// Acknowledgement chain

#[derive(Debug, Clone, PartialEq)]
pub struct AckContext {
    pub article: String,
    pub stop: String,
    pub dispenser: String,
    pub base: String,
    pub sender: Option<String>,
    /// Set when the addressee scanned the article with their phone.
    pub scanned_by: Option<String>,
}

pub fn ack_chain(ctx: &AckContext) -> Vec<Draft> {
    let ack = || Body::DeliveryAck {
        article: ctx.article.clone(),
        stop: ctx.stop.clone(),
    };
    let mut out = Vec::with_capacity(3);
    if let Some(r) = &ctx.scanned_by {
        out.push(Draft::new(r, &ctx.dispenser, ack()));
    }
    out.push(Draft::new(&ctx.dispenser, &ctx.base, ack()));
    if let Some(s) = &ctx.sender {
        out.push(Draft::new(&ctx.base, s, ack()));
    }
    out
}
