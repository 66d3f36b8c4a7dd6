//! Customer-controlled claims release.
//!
//! A claims provider signs attribute assertions about a customer. The
//! customer keeps them in a claims store and sets a policy naming which VASPs
//! may read which attributes and for what purpose. An authorization server
//! turns a VASP request into a short-lived token, and the store answers a
//! token with the matching claims plus a signed consent receipt.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::codec::Writer;
use crate::crypto::{self, Digest, KeyPair, PublicKey, Signature};
use crate::pki::{CertificateRef, EvIdentityCertificate, TrustAnchor, Verdict};
use crate::types::{Tick, Validity, VaspNumber};
use crate::{canonical_struct, canonical_tag_enum};

pub const DEFAULT_TOKEN_LIFETIME: Tick = 300;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClaimsError {
    #[error("caller is not the owner of this claims store")]
    NotOwner,
    #[error("requester certificate rejected: {0:?}")]
    InvalidCert(Verdict),
    #[error("token has expired")]
    TokenExpired,
    #[error("the owner has withdrawn consent")]
    ConsentWithdrawn,
    #[error("token signature or binding is invalid")]
    BadToken,
    #[error("token exceeds the owner's current policy")]
    OutsidePolicy,
    #[error("validity interval is empty")]
    InvalidValidity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedClaim {
    pub claim_id: Digest,
    pub subject_customer_ref: String,
    pub attribute_name: String,
    pub attribute_value: String,
    pub issuer: String,
    pub not_before: Tick,
    pub not_after: Tick,
    pub issuer_signature: Signature,
}

canonical_struct!(SignedClaim = "vtn/signed-claim/v1" {
    claim_id,
    subject_customer_ref,
    attribute_name,
    attribute_value,
    issuer,
    not_before,
    not_after,
} signed issuer_signature);

impl SignedClaim {
    fn covers(&self, now: Tick) -> bool {
        self.not_before <= now && now < self.not_after
    }
}

pub fn issue_claim(
    provider_key: &KeyPair,
    issuer: &str,
    subject: &str,
    attribute: &str,
    value: &str,
    validity: Validity,
) -> Result<SignedClaim, ClaimsError> {
    if !validity.is_well_ordered() {
        return Err(ClaimsError::InvalidValidity);
    }
    let mut w = Writer::new();
    for part in [issuer, subject, attribute, value] {
        w.put(part);
    }
    w.put_u64(validity.not_before);
    w.put_u64(validity.not_after);
    let mut claim = SignedClaim {
        claim_id: crypto::hash(&w.into_bytes()),
        subject_customer_ref: subject.to_string(),
        attribute_name: attribute.to_string(),
        attribute_value: value.to_string(),
        issuer: issuer.to_string(),
        not_before: validity.not_before,
        not_after: validity.not_after,
        issuer_signature: Signature([0; 64]),
    };
    claim.issuer_signature = provider_key.sign(&claim.signed_bytes());
    Ok(claim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimVerdict {
    Valid,
    Expired,
    NotYetValid,
    BadSignature,
}

pub fn verify_claim(claim: &SignedClaim, provider_public_key: &PublicKey, now: Tick) -> ClaimVerdict {
    if !crypto::verify(provider_public_key, &claim.signed_bytes(), &claim.issuer_signature) {
        ClaimVerdict::BadSignature
    } else if now < claim.not_before {
        ClaimVerdict::NotYetValid
    } else if now >= claim.not_after {
        ClaimVerdict::Expired
    } else {
        ClaimVerdict::Valid
    }
}

/// Owner-set access rules. Consent can always be withdrawn via
/// [`ClaimsStore::revoke_consent`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessPolicy {
    pub owner_customer_ref: String,
    pub allowed_vasp_numbers: BTreeSet<VaspNumber>,
    pub readable_attributes: BTreeSet<String>,
    pub usage_purpose: String,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthorizationToken {
    pub token_id: Digest,
    /// The claims owner whose policy granted this token.
    pub resource_owner: String,
    pub audience_vasp_number: VaspNumber,
    pub permitted_attributes: BTreeSet<String>,
    pub purpose: String,
    pub issued_at: Tick,
    pub expires_at: Tick,
    pub signature: Signature,
}

canonical_struct!(AuthorizationToken = "vtn/authorization-token/v1" {
    token_id,
    resource_owner,
    audience_vasp_number,
    permitted_attributes,
    purpose,
    issued_at,
    expires_at,
} signed signature);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsentReceipt {
    pub receipt_id: Digest,
    pub token_id: Digest,
    pub vasp_number: VaspNumber,
    pub attributes_released: BTreeSet<String>,
    pub purpose: String,
    pub issued_at: Tick,
    pub store_signature: Signature,
}

canonical_struct!(ConsentReceipt = "vtn/consent-receipt/v1" {
    receipt_id,
    token_id,
    vasp_number,
    attributes_released,
    purpose,
    issued_at,
} signed store_signature);

pub fn verify_receipt(receipt: &ConsentReceipt, store_public_key: &PublicKey) -> bool {
    crypto::verify(store_public_key, &receipt.signed_bytes(), &receipt.store_signature)
}

/// The receiving VASP's countersignature over a consent receipt, taking
/// notice of the purpose it was released for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceiptAcknowledgement {
    pub receipt_id: Digest,
    pub vasp_number: VaspNumber,
    pub purpose: String,
    pub acknowledged_at: Tick,
    pub signature: Signature,
}

canonical_struct!(ReceiptAcknowledgement = "vtn/receipt-ack/v1" {
    receipt_id,
    vasp_number,
    purpose,
    acknowledged_at,
} signed signature);

pub fn countersign_receipt(receipt: &ConsentReceipt, vasp_key: &KeyPair, now: Tick) -> ReceiptAcknowledgement {
    let mut ack = ReceiptAcknowledgement {
        receipt_id: receipt.receipt_id,
        vasp_number: receipt.vasp_number,
        purpose: receipt.purpose.clone(),
        acknowledged_at: now,
        signature: Signature([0; 64]),
    };
    ack.signature = vasp_key.sign(&ack.signed_bytes());
    ack
}

pub fn verify_acknowledgement(ack: &ReceiptAcknowledgement, vasp_public_key: &PublicKey) -> bool {
    crypto::verify(vasp_public_key, &ack.signed_bytes(), &ack.signature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenialReason {
    NotAllowed,
    ScopeExceeded,
    PurposeMismatch,
    NoActivePolicy,
}

canonical_tag_enum!(DenialReason {
    NotAllowed = 1,
    ScopeExceeded = 2,
    PurposeMismatch = 3,
    NoActivePolicy = 4,
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthorizationDecision {
    Granted(AuthorizationToken),
    Denied(DenialReason),
}

impl AuthorizationDecision {
    pub fn token(&self) -> Option<&AuthorizationToken> {
        match self {
            Self::Granted(t) => Some(t),
            Self::Denied(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditKind {
    PolicySet,
    PolicyRevoked,
    Released {
        token_id: Digest,
        receipt_id: Digest,
        attributes: BTreeSet<String>,
    },
    FetchRefused {
        token_id: Digest,
        error: ClaimsError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEvent {
    pub at: Tick,
    pub kind: AuditKind,
}

#[derive(Debug)]
pub struct AuthorizationServer {
    name: String,
    key: KeyPair,
    token_lifetime: Tick,
    issued: u64,
}

impl AuthorizationServer {
    pub fn new(name: &str, key: KeyPair) -> Self {
        Self {
            name: name.to_string(),
            key,
            token_lifetime: DEFAULT_TOKEN_LIFETIME,
            issued: 0,
        }
    }

    pub fn with_token_lifetime(mut self, lifetime: Tick) -> Self {
        self.token_lifetime = lifetime.max(1);
        self
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public_key
    }

    pub fn tokens_issued(&self) -> u64 {
        self.issued
    }

    /// Evaluates the owner's active policy for the requesting VASP.
    pub fn request_authorization(
        &mut self,
        store: &ClaimsStore,
        requester_cert: &EvIdentityCertificate,
        trust: &TrustAnchor,
        attributes: &BTreeSet<String>,
        purpose: &str,
        now: Tick,
    ) -> Result<AuthorizationDecision, ClaimsError> {
        let report = trust.validate(CertificateRef::Identity(requester_cert), now);
        if !report.is_valid() {
            return Err(ClaimsError::InvalidCert(report.verdict));
        }
        let Some(policy) = store.policy.as_ref().filter(|p| p.active) else {
            return Ok(AuthorizationDecision::Denied(DenialReason::NoActivePolicy));
        };
        let vasp = requester_cert.vasp_number();
        let denial = if !policy.allowed_vasp_numbers.contains(&vasp) {
            Some(DenialReason::NotAllowed)
        } else if !attributes.is_subset(&policy.readable_attributes) {
            Some(DenialReason::ScopeExceeded)
        } else if policy.usage_purpose != purpose {
            Some(DenialReason::PurposeMismatch)
        } else {
            None
        };
        if let Some(reason) = denial {
            return Ok(AuthorizationDecision::Denied(reason));
        }
        self.issued += 1;
        let mut w = Writer::new();
        w.put(self.name.as_str());
        w.put_u64(self.issued);
        let mut token = AuthorizationToken {
            token_id: crypto::hash(&w.into_bytes()),
            resource_owner: policy.owner_customer_ref.clone(),
            audience_vasp_number: vasp,
            permitted_attributes: attributes.clone(),
            purpose: purpose.to_string(),
            issued_at: now,
            expires_at: now + self.token_lifetime,
            signature: Signature([0; 64]),
        };
        token.signature = self.key.sign(&token.signed_bytes());
        Ok(AuthorizationDecision::Granted(token))
    }
}

/// One customer's claims, policy, issued receipts and audit log.
#[derive(Debug)]
pub struct ClaimsStore {
    owner: String,
    key: KeyPair,
    authorization_server_key: PublicKey,
    claims: Vec<SignedClaim>,
    policy: Option<AccessPolicy>,
    receipts: Vec<ConsentReceipt>,
    audit: Vec<AuditEvent>,
}

impl ClaimsStore {
    pub fn new(owner: &str, key: KeyPair, authorization_server_key: PublicKey) -> Self {
        Self {
            owner: owner.to_string(),
            key,
            authorization_server_key,
            claims: Vec::new(),
            policy: None,
            receipts: Vec::new(),
            audit: Vec::new(),
        }
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public_key
    }

    pub fn add_claim(&mut self, claim: SignedClaim) {
        self.claims.push(claim);
    }

    pub fn claims(&self) -> &[SignedClaim] {
        &self.claims
    }

    pub fn policy(&self) -> Option<&AccessPolicy> {
        self.policy.as_ref()
    }

    pub fn receipts(&self) -> &[ConsentReceipt] {
        &self.receipts
    }

    pub fn audit_log(&self) -> &[AuditEvent] {
        &self.audit
    }

    /// Replaces any previous policy and activates the new one.
    pub fn set_policy(&mut self, owner: &str, mut policy: AccessPolicy, now: Tick) -> Result<(), ClaimsError> {
        if owner != self.owner || policy.owner_customer_ref != self.owner {
            return Err(ClaimsError::NotOwner);
        }
        policy.active = true;
        self.policy = Some(policy);
        self.audit.push(AuditEvent {
            at: now,
            kind: AuditKind::PolicySet,
        });
        Ok(())
    }

    pub fn revoke_consent(&mut self, owner: &str, now: Tick) -> Result<(), ClaimsError> {
        if owner != self.owner {
            return Err(ClaimsError::NotOwner);
        }
        if let Some(p) = self.policy.as_mut().filter(|p| p.active) {
            p.active = false;
            self.audit.push(AuditEvent {
                at: now,
                kind: AuditKind::PolicyRevoked,
            });
        }
        Ok(())
    }

    /// Releases the claims a token permits together with a consent receipt.
    pub fn fetch_claims(
        &mut self,
        token: &AuthorizationToken,
        now: Tick,
    ) -> Result<(Vec<SignedClaim>, ConsentReceipt), ClaimsError> {
        let outcome = self.check_token(token, now);
        if let Err(error) = outcome {
            self.audit.push(AuditEvent {
                at: now,
                kind: AuditKind::FetchRefused {
                    token_id: token.token_id,
                    error: error.clone(),
                },
            });
            return Err(error);
        }
        let released: Vec<SignedClaim> = self
            .claims
            .iter()
            .filter(|c| token.permitted_attributes.contains(&c.attribute_name) && c.covers(now))
            .cloned()
            .collect();
        let attributes_released: BTreeSet<String> =
            released.iter().map(|c| c.attribute_name.clone()).collect();

        let mut w = Writer::new();
        w.put(self.owner.as_str());
        w.put_u64(self.receipts.len() as u64 + 1);
        w.put(&token.token_id);
        let mut receipt = ConsentReceipt {
            receipt_id: crypto::hash(&w.into_bytes()),
            token_id: token.token_id,
            vasp_number: token.audience_vasp_number,
            attributes_released: attributes_released.clone(),
            purpose: token.purpose.clone(),
            issued_at: now,
            store_signature: Signature([0; 64]),
        };
        receipt.store_signature = self.key.sign(&receipt.signed_bytes());
        self.receipts.push(receipt.clone());
        self.audit.push(AuditEvent {
            at: now,
            kind: AuditKind::Released {
                token_id: token.token_id,
                receipt_id: receipt.receipt_id,
                attributes: attributes_released,
            },
        });
        Ok((released, receipt))
    }

    fn check_token(&self, token: &AuthorizationToken, now: Tick) -> Result<(), ClaimsError> {
        if token.resource_owner != self.owner
            || !crypto::verify(
                &self.authorization_server_key,
                &token.signed_bytes(),
                &token.signature,
            )
        {
            return Err(ClaimsError::BadToken);
        }
        if now >= token.expires_at {
            return Err(ClaimsError::TokenExpired);
        }
        match &self.policy {
            Some(p) if !p.active => Err(ClaimsError::ConsentWithdrawn),
            None => Err(ClaimsError::ConsentWithdrawn),
            Some(p) => {
                let within = p.allowed_vasp_numbers.contains(&token.audience_vasp_number)
                    && token.permitted_attributes.is_subset(&p.readable_attributes)
                    && token.purpose == p.usage_purpose;
                if within {
                    Ok(())
                } else {
                    Err(ClaimsError::OutsidePolicy)
                }
            }
        }
    }
}
