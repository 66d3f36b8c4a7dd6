//! Protocol messages carried on simulated secure channels.

use std::collections::BTreeSet;

use crate::claims::{AuthorizationToken, ConsentReceipt, DenialReason, ReceiptAcknowledgement, SignedClaim};
use crate::codec::{CodecError, Decode, Encode, Reader, Writer};
use crate::crypto::{Digest, PublicKey};
use crate::pki::SigningCertificate;
use crate::resolver::{AdvertisementBundle, CustomerIdentifier, LookupResponse};
use crate::travel_rule::SignedPayload;
use crate::types::Tick;
use crate::wallet::AttestationEvidence;
use crate::canonical_struct;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    LookupRequest {
        identifier: CustomerIdentifier,
    },
    LookupResponse(LookupResponse),
    Advertisement(AdvertisementBundle),
    BeneficiaryInquiry {
        identifier: CustomerIdentifier,
        amount: u64,
    },
    BeneficiaryDetails {
        name: String,
        account: String,
        deposit_key: PublicKey,
    },
    BeneficiaryUnknown {
        identifier: CustomerIdentifier,
    },
    /// Originator's signed payload with the certificate that signed it.
    TravelRuleTransfer {
        signed: SignedPayload,
        signer_cert: SigningCertificate,
    },
    /// The beneficiary's own signature over the same payload.
    TravelRuleAck {
        signed: SignedPayload,
        signer_cert: SigningCertificate,
    },
    TravelRuleReject {
        payload_id: Digest,
        reason: String,
    },
    AuthorizationRequest {
        owner: String,
        attributes: BTreeSet<String>,
        purpose: String,
    },
    AuthorizationGranted(AuthorizationToken),
    AuthorizationDenied(DenialReason),
    ClaimsFetch(AuthorizationToken),
    ClaimsRelease {
        claims: Vec<SignedClaim>,
        receipt: ConsentReceipt,
    },
    ClaimsRefused {
        reason: String,
    },
    ReceiptAck(ReceiptAcknowledgement),
    AttestationChallenge {
        nonce: [u8; 32],
    },
    Evidence(AttestationEvidence),
    AttestationRefused,
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::LookupRequest { .. } => "lookup_request",
            Message::LookupResponse(_) => "lookup_response",
            Message::Advertisement(_) => "advertisement",
            Message::BeneficiaryInquiry { .. } => "beneficiary_inquiry",
            Message::BeneficiaryDetails { .. } => "beneficiary_details",
            Message::BeneficiaryUnknown { .. } => "beneficiary_unknown",
            Message::TravelRuleTransfer { .. } => "travel_rule_transfer",
            Message::TravelRuleAck { .. } => "travel_rule_ack",
            Message::TravelRuleReject { .. } => "travel_rule_reject",
            Message::AuthorizationRequest { .. } => "authorization_request",
            Message::AuthorizationGranted(_) => "authorization_granted",
            Message::AuthorizationDenied(_) => "authorization_denied",
            Message::ClaimsFetch(_) => "claims_fetch",
            Message::ClaimsRelease { .. } => "claims_release",
            Message::ClaimsRefused { .. } => "claims_refused",
            Message::ReceiptAck(_) => "receipt_ack",
            Message::AttestationChallenge { .. } => "attestation_challenge",
            Message::Evidence(_) => "attestation_evidence",
            Message::AttestationRefused => "attestation_refused",
        }
    }
}

impl Encode for Message {
    fn encode_to(&self, w: &mut Writer) {
        match self {
            Message::LookupRequest { identifier } => {
                w.put_u8(1);
                w.put(identifier);
            }
            Message::LookupResponse(r) => {
                w.put_u8(2);
                w.put(r);
            }
            Message::Advertisement(b) => {
                w.put_u8(3);
                w.put(b);
            }
            Message::BeneficiaryInquiry { identifier, amount } => {
                w.put_u8(4);
                w.put(identifier);
                w.put(amount);
            }
            Message::BeneficiaryDetails {
                name,
                account,
                deposit_key,
            } => {
                w.put_u8(5);
                w.put(name);
                w.put(account);
                w.put(deposit_key);
            }
            Message::BeneficiaryUnknown { identifier } => {
                w.put_u8(6);
                w.put(identifier);
            }
            Message::TravelRuleTransfer { signed, signer_cert } => {
                w.put_u8(7);
                w.put(signed);
                w.put(signer_cert);
            }
            Message::TravelRuleAck { signed, signer_cert } => {
                w.put_u8(8);
                w.put(signed);
                w.put(signer_cert);
            }
            Message::TravelRuleReject { payload_id, reason } => {
                w.put_u8(9);
                w.put(payload_id);
                w.put(reason);
            }
            Message::AuthorizationRequest {
                owner,
                attributes,
                purpose,
            } => {
                w.put_u8(10);
                w.put(owner);
                w.put(attributes);
                w.put(purpose);
            }
            Message::AuthorizationGranted(t) => {
                w.put_u8(11);
                w.put(t);
            }
            Message::AuthorizationDenied(r) => {
                w.put_u8(12);
                w.put(r);
            }
            Message::ClaimsFetch(t) => {
                w.put_u8(13);
                w.put(t);
            }
            Message::ClaimsRelease { claims, receipt } => {
                w.put_u8(14);
                w.put(claims);
                w.put(receipt);
            }
            Message::ClaimsRefused { reason } => {
                w.put_u8(15);
                w.put(reason);
            }
            Message::ReceiptAck(a) => {
                w.put_u8(16);
                w.put(a);
            }
            Message::AttestationChallenge { nonce } => {
                w.put_u8(17);
                w.put(nonce);
            }
            Message::Evidence(e) => {
                w.put_u8(18);
                w.put(e);
            }
            Message::AttestationRefused => w.put_u8(19),
        }
    }
}

impl Decode for Message {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(match r.u8()? {
            1 => Message::LookupRequest { identifier: r.get()? },
            2 => Message::LookupResponse(r.get()?),
            3 => Message::Advertisement(r.get()?),
            4 => Message::BeneficiaryInquiry {
                identifier: r.get()?,
                amount: r.get()?,
            },
            5 => Message::BeneficiaryDetails {
                name: r.get()?,
                account: r.get()?,
                deposit_key: r.get()?,
            },
            6 => Message::BeneficiaryUnknown { identifier: r.get()? },
            7 => Message::TravelRuleTransfer {
                signed: r.get()?,
                signer_cert: r.get()?,
            },
            8 => Message::TravelRuleAck {
                signed: r.get()?,
                signer_cert: r.get()?,
            },
            9 => Message::TravelRuleReject {
                payload_id: r.get()?,
                reason: r.get()?,
            },
            10 => Message::AuthorizationRequest {
                owner: r.get()?,
                attributes: r.get()?,
                purpose: r.get()?,
            },
            11 => Message::AuthorizationGranted(r.get()?),
            12 => Message::AuthorizationDenied(r.get()?),
            13 => Message::ClaimsFetch(r.get()?),
            14 => Message::ClaimsRelease {
                claims: r.get()?,
                receipt: r.get()?,
            },
            15 => Message::ClaimsRefused { reason: r.get()? },
            16 => Message::ReceiptAck(r.get()?),
            17 => Message::AttestationChallenge { nonce: r.get()? },
            18 => Message::Evidence(r.get()?),
            19 => Message::AttestationRefused,
            tag => {
                return Err(CodecError::InvalidTag {
                    tag,
                    type_name: "Message",
                })
            }
        })
    }
}

/// One transmission unit. `direction` is 0 from the channel's first
/// endpoint to its second and 1 the other way.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub channel: u64,
    pub direction: u8,
    pub seq: u64,
    pub sent_at: Tick,
    pub body: Message,
}

canonical_struct!(Envelope {
    channel,
    direction,
    seq,
    sent_at,
    body
});
