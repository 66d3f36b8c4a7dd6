//! Consortium-rooted certificate hierarchy.
//!
//! A single root authority issues three kinds of leaf certificates: an EV
//! identity certificate per VASP, and any number of transaction-signing and
//! claims-signing certificates that point back at the identity certificate
//! through the hash of its canonical encoding. Every subject key must be
//! distinct across all certificates the root has ever issued.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::codec::{CodecError, Decode, Encode, Reader, Writer};
use crate::crypto::{self, Digest, KeyPair, PublicKey, Signature};
use crate::types::{Tick, Validity, VaspNumber};
use crate::{canonical_struct, canonical_tag_enum};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PkiError {
    #[error("VASP number {0} already has an identity certificate")]
    DuplicateVaspNumber(VaspNumber),
    #[error("public key already bound to certificate serial {0}")]
    KeyReuse(u64),
    #[error("invalid subject: {0}")]
    InvalidSubject(String),
    #[error("validity window is empty")]
    InvalidValidity,
    #[error("linked identity certificate {0} is revoked")]
    LinkTargetRevoked(u64),
    #[error("linked identity certificate {0} is expired or not yet valid")]
    LinkTargetExpired(u64),
    #[error("identity certificate was not issued by this root")]
    UnknownIdentityCert,
    #[error("unknown serial {0}")]
    UnknownSerial(u64),
}

/// Provisional activity taxonomy: no formal VASP business-activity
/// definition exists yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BusinessActivity {
    Exchange,
    Transfer,
    Custody,
    FinancialServices,
    FundManager,
    StablecoinIssuer,
}

canonical_tag_enum!(BusinessActivity {
    Exchange = 1,
    Transfer = 2,
    Custody = 3,
    FinancialServices = 4,
    FundManager = 5,
    StablecoinIssuer = 6,
});

impl std::str::FromStr for BusinessActivity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Exchange" => Self::Exchange,
            "Transfer" => Self::Transfer,
            "Custody" => Self::Custody,
            "FinancialServices" => Self::FinancialServices,
            "FundManager" => Self::FundManager,
            "StablecoinIssuer" => Self::StablecoinIssuer,
            other => return Err(format!("unknown business activity {other:?}")),
        })
    }
}

/// Company registration reference. LEI is preferred when the entity has one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegistrationId {
    Lei(String),
    IncorporationNumber(String),
}

impl Encode for RegistrationId {
    fn encode_to(&self, w: &mut Writer) {
        match self {
            RegistrationId::Lei(s) => {
                w.put_u8(1);
                w.put(s);
            }
            RegistrationId::IncorporationNumber(s) => {
                w.put_u8(2);
                w.put(s);
            }
        }
    }
}

impl Decode for RegistrationId {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            1 => Ok(RegistrationId::Lei(r.get()?)),
            2 => Ok(RegistrationId::IncorporationNumber(r.get()?)),
            tag => Err(CodecError::InvalidTag {
                tag,
                type_name: "RegistrationId",
            }),
        }
    }
}

/// Business fields vetted by the issuing CA before an EV certificate is signed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvSubjectInfo {
    pub organization_name: String,
    pub alt_domain_names: Vec<String>,
    pub registration: RegistrationId,
    pub place_of_business: String,
    /// Incorporating or registration agency.
    pub jurisdiction: String,
    pub vasp_number: VaspNumber,
    pub regulated_business_activity: BusinessActivity,
    pub policy_object_identifier: String,
}

canonical_struct!(EvSubjectInfo {
    organization_name,
    alt_domain_names,
    registration,
    place_of_business,
    jurisdiction,
    vasp_number,
    regulated_business_activity,
    policy_object_identifier,
});

impl EvSubjectInfo {
    /// Issuance-time background checks. LEIs are checked for shape only.
    pub fn check(&self) -> Result<(), PkiError> {
        let bad = |m: &str| Err(PkiError::InvalidSubject(m.to_string()));
        if self.organization_name.trim().is_empty() {
            return bad("organization_name is empty");
        }
        if self.alt_domain_names.is_empty() {
            return bad("alt_domain_names is empty");
        }
        if let Some(d) = self.alt_domain_names.iter().find(|d| !is_dns_name(d)) {
            return Err(PkiError::InvalidSubject(format!("bad DNS name {d:?}")));
        }
        match &self.registration {
            RegistrationId::Lei(lei) => {
                if lei.len() != 20 || !lei.bytes().all(|b| b.is_ascii_alphanumeric()) {
                    return bad("LEI must be 20 alphanumeric characters");
                }
            }
            RegistrationId::IncorporationNumber(n) => {
                if n.trim().is_empty() {
                    return bad("incorporation number is empty");
                }
            }
        }
        if self.place_of_business.trim().is_empty() {
            return bad("place_of_business is empty");
        }
        if self.jurisdiction.trim().is_empty() {
            return bad("jurisdiction is empty");
        }
        if !is_dotted_oid(&self.policy_object_identifier) {
            return bad("policy_object_identifier is not a dotted-integer OID");
        }
        Ok(())
    }
}

fn is_dns_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 253
        && s.split('.').all(|label| {
            !label.is_empty()
                && label.len() <= 63
                && !label.starts_with('-')
                && !label.ends_with('-')
                && label.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
        })
}

fn is_dotted_oid(s: &str) -> bool {
    let arcs: Vec<&str> = s.split('.').collect();
    arcs.len() >= 2
        && arcs
            .iter()
            .all(|a| !a.is_empty() && a.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvIdentityCertificate {
    pub serial: u64,
    pub subject: EvSubjectInfo,
    pub subject_public_key: PublicKey,
    pub issuer_id: String,
    pub not_before: Tick,
    pub not_after: Tick,
    pub issuer_signature: Signature,
}

canonical_struct!(EvIdentityCertificate = "vtn/ev-identity-cert/v1" {
    serial,
    subject,
    subject_public_key,
    issuer_id,
    not_before,
    not_after,
} signed issuer_signature);

impl EvIdentityCertificate {
    pub fn vasp_number(&self) -> VaspNumber {
        self.subject.vasp_number
    }

    /// Digest that signing certificates carry as their linkage.
    pub fn linkage_digest(&self) -> Digest {
        crypto::hash_value(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyPurpose {
    TransactionSigning,
    ClaimsSigning,
}

canonical_tag_enum!(KeyPurpose {
    TransactionSigning = 1,
    ClaimsSigning = 2,
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigningCertificate {
    pub serial: u64,
    pub purpose: KeyPurpose,
    pub subject_public_key: PublicKey,
    pub identity_linkage: Digest,
    pub issuer_id: String,
    pub not_before: Tick,
    pub not_after: Tick,
    pub issuer_signature: Signature,
}

canonical_struct!(SigningCertificate = "vtn/signing-cert/v1" {
    serial,
    purpose,
    subject_public_key,
    identity_linkage,
    issuer_id,
    not_before,
    not_after,
} signed issuer_signature);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RevocationReason {
    KeyCompromise,
    CessationOfBusiness,
    Superseded,
}

canonical_tag_enum!(RevocationReason {
    KeyCompromise = 1,
    CessationOfBusiness = 2,
    Superseded = 3,
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RevocationEntry {
    pub serial: u64,
    pub reason: RevocationReason,
    pub revoked_at: Tick,
}

canonical_struct!(RevocationEntry {
    serial,
    reason,
    revoked_at
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevocationList {
    pub issuer_id: String,
    /// Sorted by serial, at most one entry per serial.
    pub entries: Vec<RevocationEntry>,
    pub issued_at: Tick,
    pub issuer_signature: Signature,
}

canonical_struct!(RevocationList = "vtn/revocation-list/v1" {
    issuer_id,
    entries,
    issued_at,
} signed issuer_signature);

impl RevocationList {
    pub fn entry(&self, serial: u64) -> Option<&RevocationEntry> {
        self.entries
            .binary_search_by_key(&serial, |e| e.serial)
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Entry for `serial` if its revocation is in effect at `now`.
    pub fn revoked_at(&self, serial: u64, now: Tick) -> Option<&RevocationEntry> {
        self.entry(serial).filter(|e| e.revoked_at <= now)
    }

    pub fn verify(&self, root_public_key: &PublicKey) -> bool {
        self.entries.windows(2).all(|w| w[0].serial < w[1].serial)
            && crypto::verify(root_public_key, &self.signed_bytes(), &self.issuer_signature)
    }
}

/// Any certificate the root issues, for export and transport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Certificate {
    Identity(EvIdentityCertificate),
    Signing(SigningCertificate),
}

impl Certificate {
    pub fn serial(&self) -> u64 {
        match self {
            Certificate::Identity(c) => c.serial,
            Certificate::Signing(c) => c.serial,
        }
    }

    pub fn subject_public_key(&self) -> &PublicKey {
        match self {
            Certificate::Identity(c) => &c.subject_public_key,
            Certificate::Signing(c) => &c.subject_public_key,
        }
    }
}

impl Encode for Certificate {
    fn encode_to(&self, w: &mut Writer) {
        match self {
            Certificate::Identity(c) => {
                w.put_u8(1);
                w.put(c);
            }
            Certificate::Signing(c) => {
                w.put_u8(2);
                w.put(c);
            }
        }
    }
}

impl Decode for Certificate {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            1 => Ok(Certificate::Identity(r.get()?)),
            2 => Ok(Certificate::Signing(r.get()?)),
            tag => Err(CodecError::InvalidTag {
                tag,
                type_name: "Certificate",
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct IssuedRecord {
    kind: CertKind,
    subject_public_key: PublicKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CertKind {
    Identity,
    Signing(KeyPurpose),
}

/// Public material a relying party needs: the root key and current CRL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustAnchor {
    pub issuer_id: String,
    pub root_public_key: PublicKey,
    pub revocations: RevocationList,
}

/// Consortium root CA. Single owner; issuance and revocation go through
/// `&mut self`.
#[derive(Debug)]
pub struct RootAuthority {
    name: String,
    keypair: KeyPair,
    next_serial: u64,
    issued: BTreeMap<u64, IssuedRecord>,
    keys_in_use: BTreeMap<PublicKey, u64>,
    vasp_numbers: BTreeSet<VaspNumber>,
    identity_digests: BTreeMap<Digest, u64>,
    revocations: RevocationList,
}

impl RootAuthority {
    pub fn create(name: impl Into<String>, seed: &[u8; 32]) -> Self {
        let name = name.into();
        let keypair = KeyPair::from_seed(seed);
        let mut revocations = RevocationList {
            issuer_id: name.clone(),
            entries: Vec::new(),
            issued_at: 0,
            issuer_signature: Signature([0; 64]),
        };
        revocations.issuer_signature = keypair.sign(&revocations.signed_bytes());
        RootAuthority {
            name,
            keypair,
            next_serial: 1,
            issued: BTreeMap::new(),
            keys_in_use: BTreeMap::new(),
            vasp_numbers: BTreeSet::new(),
            identity_digests: BTreeMap::new(),
            revocations,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public_key
    }

    pub fn next_serial(&self) -> u64 {
        self.next_serial
    }

    pub fn revocation_list(&self) -> &RevocationList {
        &self.revocations
    }

    pub fn trust_anchor(&self) -> TrustAnchor {
        TrustAnchor {
            issuer_id: self.name.clone(),
            root_public_key: self.public_key(),
            revocations: self.revocations.clone(),
        }
    }

    /// Every subject key issued so far, in serial order.
    pub fn issued_subject_keys(&self) -> Vec<PublicKey> {
        self.issued.values().map(|r| r.subject_public_key).collect()
    }

    fn check_key_unused(&self, key: &PublicKey) -> Result<(), PkiError> {
        match self.keys_in_use.get(key) {
            Some(&serial) => Err(PkiError::KeyReuse(serial)),
            None => Ok(()),
        }
    }

    fn take_serial(&mut self, kind: CertKind, key: PublicKey) -> u64 {
        let serial = self.next_serial;
        self.next_serial += 1;
        self.issued.insert(
            serial,
            IssuedRecord {
                kind,
                subject_public_key: key,
            },
        );
        self.keys_in_use.insert(key, serial);
        serial
    }

    pub fn issue_identity_cert(
        &mut self,
        subject: EvSubjectInfo,
        subject_public_key: PublicKey,
        validity: Validity,
    ) -> Result<EvIdentityCertificate, PkiError> {
        subject.check()?;
        if !validity.is_well_ordered() {
            return Err(PkiError::InvalidValidity);
        }
        if self.vasp_numbers.contains(&subject.vasp_number) {
            return Err(PkiError::DuplicateVaspNumber(subject.vasp_number));
        }
        self.check_key_unused(&subject_public_key)?;

        self.vasp_numbers.insert(subject.vasp_number);
        let serial = self.take_serial(CertKind::Identity, subject_public_key);
        let mut cert = EvIdentityCertificate {
            serial,
            subject,
            subject_public_key,
            issuer_id: self.name.clone(),
            not_before: validity.not_before,
            not_after: validity.not_after,
            issuer_signature: Signature([0; 64]),
        };
        cert.issuer_signature = self.keypair.sign(&cert.signed_bytes());
        self.identity_digests.insert(cert.linkage_digest(), serial);
        Ok(cert)
    }

    pub fn issue_signing_cert(
        &mut self,
        identity_cert: &EvIdentityCertificate,
        purpose: KeyPurpose,
        subject_public_key: PublicKey,
        validity: Validity,
        now: Tick,
    ) -> Result<SigningCertificate, PkiError> {
        if !validity.is_well_ordered() {
            return Err(PkiError::InvalidValidity);
        }
        let linkage = identity_cert.linkage_digest();
        if self.identity_digests.get(&linkage) != Some(&identity_cert.serial) {
            return Err(PkiError::UnknownIdentityCert);
        }
        if self.revocations.revoked_at(identity_cert.serial, now).is_some() {
            return Err(PkiError::LinkTargetRevoked(identity_cert.serial));
        }
        if now < identity_cert.not_before || now >= identity_cert.not_after {
            return Err(PkiError::LinkTargetExpired(identity_cert.serial));
        }
        self.check_key_unused(&subject_public_key)?;

        let serial = self.take_serial(CertKind::Signing(purpose), subject_public_key);
        let mut cert = SigningCertificate {
            serial,
            purpose,
            subject_public_key,
            identity_linkage: linkage,
            issuer_id: self.name.clone(),
            not_before: validity.not_before,
            not_after: validity.not_after,
            issuer_signature: Signature([0; 64]),
        };
        cert.issuer_signature = self.keypair.sign(&cert.signed_bytes());
        Ok(cert)
    }

    /// Adds `serial` to the revocation list. Re-revoking keeps the earliest
    /// entry and returns the list unchanged.
    pub fn revoke(
        &mut self,
        serial: u64,
        reason: RevocationReason,
        now: Tick,
    ) -> Result<RevocationList, PkiError> {
        if !self.issued.contains_key(&serial) {
            return Err(PkiError::UnknownSerial(serial));
        }
        if let Err(pos) = self
            .revocations
            .entries
            .binary_search_by_key(&serial, |e| e.serial)
        {
            self.revocations.entries.insert(
                pos,
                RevocationEntry {
                    serial,
                    reason,
                    revoked_at: now,
                },
            );
            self.revocations.issued_at = self.revocations.issued_at.max(now);
            self.revocations.issuer_signature =
                self.keypair.sign(&self.revocations.signed_bytes());
        }
        Ok(self.revocations.clone())
    }

    /// Purpose recorded at issuance, `None` for identity certificates.
    pub fn purpose_of(&self, serial: u64) -> Option<KeyPurpose> {
        match self.issued.get(&serial)?.kind {
            CertKind::Identity => None,
            CertKind::Signing(p) => Some(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    Expired,
    NotYetValid,
    Revoked,
    BadSignature,
    BrokenLinkage,
}

/// What to validate. Signing certificates optionally carry the identity
/// certificate they claim to belong to; when present, the linkage and the
/// identity certificate itself are checked too.
#[derive(Debug, Clone, Copy)]
pub enum CertificateRef<'a> {
    Identity(&'a EvIdentityCertificate),
    Signing {
        cert: &'a SigningCertificate,
        identity: Option<&'a EvIdentityCertificate>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub serial: u64,
    pub verdict: Verdict,
    pub signature_ok: bool,
    /// `None` when the certificate signature already failed.
    pub revocation_list_ok: Option<bool>,
    pub linkage_ok: Option<bool>,
    pub revocation: Option<RevocationEntry>,
    pub within_validity: bool,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.verdict == Verdict::Valid
    }
}

/// Pure, total validation. Checks run in a fixed order and the first
/// failure sets the verdict: signatures, linkage, revocation, validity.
/// A bad certificate signature skips the remaining signature checks.
/// Revocation outranks expiry so a revoked certificate stays `Revoked`.
pub fn validate_chain(
    cert: CertificateRef<'_>,
    root_public_key: &PublicKey,
    revocation_list: &RevocationList,
    now: Tick,
) -> ValidationReport {
    let (serial, issuer_id, signed, sig, not_before, not_after) = match cert {
        CertificateRef::Identity(c) => (
            c.serial,
            &c.issuer_id,
            c.signed_bytes(),
            &c.issuer_signature,
            c.not_before,
            c.not_after,
        ),
        CertificateRef::Signing { cert: c, .. } => (
            c.serial,
            &c.issuer_id,
            c.signed_bytes(),
            &c.issuer_signature,
            c.not_before,
            c.not_after,
        ),
    };
    let signature_ok = crypto::verify(root_public_key, &signed, sig);
    let revocation_list_ok = signature_ok
        .then(|| revocation_list.verify(root_public_key) && &revocation_list.issuer_id == issuer_id);
    let within_validity = not_before <= now && now < not_after;

    let mut linkage_ok = None;
    let mut identity_revocation = None;
    if let (
        true,
        CertificateRef::Signing {
            cert: c,
            identity: Some(id),
        },
    ) = (signature_ok, cert)
    {
        let id_sig_ok =
            crypto::verify(root_public_key, &id.signed_bytes(), &id.issuer_signature);
        linkage_ok = Some(id_sig_ok && verify_linkage(c, id));
        identity_revocation = revocation_list.revoked_at(id.serial, now).copied();
    }
    let revocation = revocation_list
        .revoked_at(serial, now)
        .copied()
        .or(identity_revocation);

    let verdict = if !signature_ok || revocation_list_ok == Some(false) {
        Verdict::BadSignature
    } else if linkage_ok == Some(false) {
        Verdict::BrokenLinkage
    } else if revocation.is_some() {
        Verdict::Revoked
    } else if now < not_before {
        Verdict::NotYetValid
    } else if now >= not_after {
        Verdict::Expired
    } else {
        Verdict::Valid
    };

    ValidationReport {
        serial,
        verdict,
        signature_ok,
        revocation_list_ok,
        linkage_ok,
        revocation,
        within_validity,
    }
}

impl TrustAnchor {
    pub fn validate(&self, cert: CertificateRef<'_>, now: Tick) -> ValidationReport {
        validate_chain(cert, &self.root_public_key, &self.revocations, now)
    }
}

/// True iff `signing_cert` names exactly this identity certificate.
pub fn verify_linkage(signing_cert: &SigningCertificate, identity_cert: &EvIdentityCertificate) -> bool {
    signing_cert.identity_linkage == identity_cert.linkage_digest()
}
