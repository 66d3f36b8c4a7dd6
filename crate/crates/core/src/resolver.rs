//! Customer identifier resolution across a federation of VASPs.
//!
//! Each VASP keeps the identifiers of its own customers and floods signed,
//! sequence-numbered advertisements listing them. Like link-state routing,
//! the newest advertisement from an origin replaces everything previously
//! learned from that origin. Lookups answer only with VASP numbers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::codec::{CodecError, Decode, Encode, Reader, Writer};
use crate::crypto::{self, KeyPair, PublicKey, Signature};
use crate::pki::{
    CertificateRef, EvIdentityCertificate, KeyPurpose, SigningCertificate, TrustAnchor, Verdict,
};
use crate::types::{Tick, VaspNumber};
use crate::canonical_struct;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolverError {
    #[error("cannot parse identifier {0:?}")]
    Unparseable(String),
    #[error("identifier {0} is not known to its identity provider")]
    IdpValidationFailed(String),
    #[error("unknown customer {0:?}")]
    UnknownCustomer(String),
    #[error("caller certificate rejected: {0:?}")]
    Unauthorized(Verdict),
}

/// A customer identifier as typed by a user. Domains are case-folded at
/// construction; local parts are kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CustomerIdentifier {
    Email { local: String, domain: String },
    /// `local$domain`
    PayId { local: String, domain: String },
    BarePublicKey(PublicKey),
}

impl CustomerIdentifier {
    pub fn email(local: &str, domain: &str) -> Self {
        Self::Email {
            local: local.to_string(),
            domain: domain.to_ascii_lowercase(),
        }
    }

    pub fn pay_id(local: &str, domain: &str) -> Self {
        Self::PayId {
            local: local.to_string(),
            domain: domain.to_ascii_lowercase(),
        }
    }

    pub fn domain(&self) -> Option<&str> {
        match self {
            Self::Email { domain, .. } | Self::PayId { domain, .. } => Some(domain),
            Self::BarePublicKey(_) => None,
        }
    }
}

impl fmt::Display for CustomerIdentifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Email { local, domain } => write!(f, "{local}@{domain}"),
            Self::PayId { local, domain } => write!(f, "{local}${domain}"),
            Self::BarePublicKey(k) => write!(f, "{k}"),
        }
    }
}

impl std::str::FromStr for CustomerIdentifier {
    type Err = ResolverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_identifier(s)
    }
}

/// Classifies `s` as an email address (`@`), a PayID (`$`), or a 64-hex-digit
/// bare public key.
pub fn parse_identifier(s: &str) -> Result<CustomerIdentifier, ResolverError> {
    let unparseable = || ResolverError::Unparseable(s.to_string());
    let split = |sep: char| -> Option<(&str, &str)> {
        let (local, domain) = s.rsplit_once(sep)?;
        let domain_ok = !domain.is_empty()
            && domain
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'-');
        let local_ok = !local.is_empty() && !local.contains(['@', '$']) && !local.contains(char::is_whitespace);
        (domain_ok && local_ok).then_some((local, domain))
    };
    if s.contains('@') {
        let (l, d) = split('@').ok_or_else(unparseable)?;
        return Ok(CustomerIdentifier::email(l, d));
    }
    if s.contains('$') {
        let (l, d) = split('$').ok_or_else(unparseable)?;
        return Ok(CustomerIdentifier::pay_id(l, d));
    }
    if s.len() == 64 {
        if let Some(k) = PublicKey::from_hex(s) {
            return Ok(CustomerIdentifier::BarePublicKey(k));
        }
    }
    Err(unparseable())
}

impl Encode for CustomerIdentifier {
    fn encode_to(&self, w: &mut Writer) {
        match self {
            Self::Email { local, domain } => {
                w.put_u8(1);
                w.put(local);
                w.put(domain);
            }
            Self::PayId { local, domain } => {
                w.put_u8(2);
                w.put(local);
                w.put(domain);
            }
            Self::BarePublicKey(k) => {
                w.put_u8(3);
                w.put(k);
            }
        }
    }
}

impl Decode for CustomerIdentifier {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let folded = |d: String| {
            if d.bytes().any(|b| b.is_ascii_uppercase()) {
                Err(CodecError::InvalidValue("identifier domain"))
            } else {
                Ok(d)
            }
        };
        Ok(match r.u8()? {
            1 => Self::Email {
                local: r.get()?,
                domain: folded(r.get()?)?,
            },
            2 => Self::PayId {
                local: r.get()?,
                domain: folded(r.get()?)?,
            },
            3 => Self::BarePublicKey(r.get()?),
            tag => {
                return Err(CodecError::InvalidTag {
                    tag,
                    type_name: "CustomerIdentifier",
                })
            }
        })
    }
}

/// Users known to one identity provider.
#[derive(Debug, Clone, Default)]
pub struct IdpDirectory {
    pub domain: String,
    users: BTreeSet<CustomerIdentifier>,
}

impl IdpDirectory {
    pub fn new(domain: &str) -> Self {
        Self {
            domain: domain.to_ascii_lowercase(),
            users: BTreeSet::new(),
        }
    }

    pub fn enroll(&mut self, id: CustomerIdentifier) {
        self.users.insert(id);
    }

    /// True iff this provider issued `id` and knows the user.
    pub fn confirms(&self, id: &CustomerIdentifier) -> bool {
        id.domain() == Some(self.domain.as_str()) && self.users.contains(id)
    }
}

/// Lookup answer. Carries VASP numbers only; there is no field that could
/// hold key material.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LookupResponse {
    pub vasp_numbers: Vec<VaspNumber>,
}

canonical_struct!(LookupResponse { vasp_numbers });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentifierAdvertisement {
    pub vasp_number: VaspNumber,
    pub sequence: u64,
    /// Sorted and de-duplicated.
    pub identifiers: Vec<CustomerIdentifier>,
    /// Made with the origin's claims-signing key.
    pub signature: Signature,
}

canonical_struct!(IdentifierAdvertisement = "vtn/identifier-advertisement/v1" {
    vasp_number,
    sequence,
    identifiers,
} signed signature);

/// An advertisement together with the origin certificates needed to verify
/// it, as carried between resolvers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdvertisementBundle {
    pub advertisement: IdentifierAdvertisement,
    pub identity_cert: EvIdentityCertificate,
    pub claims_cert: SigningCertificate,
}

canonical_struct!(AdvertisementBundle {
    advertisement,
    identity_cert,
    claims_cert
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    BadSignature,
    InvalidCert(Verdict),
    WrongPurpose,
    /// Certificate belongs to a different VASP than the advertisement names.
    OriginMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOutcome {
    Applied,
    Stale,
    Rejected(RejectReason),
}

/// Local and learned identifier mappings of one VASP.
#[derive(Debug, Clone, Default)]
pub struct ResolverTable {
    local_entries: HashMap<CustomerIdentifier, BTreeSet<String>>,
    remote_entries: HashMap<CustomerIdentifier, BTreeMap<VaspNumber, u64>>,
    /// Newest advertisement accepted from each origin.
    latest: BTreeMap<VaspNumber, AdvertisementBundle>,
}

impl ResolverTable {
    pub fn local_identifiers(&self) -> BTreeSet<CustomerIdentifier> {
        self.local_entries.keys().cloned().collect()
    }

    pub fn remote_vasps(&self, id: &CustomerIdentifier) -> BTreeSet<VaspNumber> {
        self.remote_entries
            .get(id)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn last_sequence(&self, origin: VaspNumber) -> Option<u64> {
        self.latest.get(&origin).map(|b| b.advertisement.sequence)
    }

    pub fn latest_advertisements(&self) -> impl Iterator<Item = &AdvertisementBundle> {
        self.latest.values()
    }

    /// identifier -> origins, over remote entries only.
    pub fn remote_view(&self) -> BTreeMap<CustomerIdentifier, BTreeSet<VaspNumber>> {
        self.remote_entries
            .iter()
            .filter(|(_, m)| !m.is_empty())
            .map(|(k, m)| (k.clone(), m.keys().copied().collect()))
            .collect()
    }

    fn replace_origin(&mut self, bundle: AdvertisementBundle) {
        let adv = &bundle.advertisement;
        if let Some(old) = self.latest.get(&adv.vasp_number) {
            for id in &old.advertisement.identifiers {
                if let Some(m) = self.remote_entries.get_mut(id) {
                    m.remove(&adv.vasp_number);
                    if m.is_empty() {
                        self.remote_entries.remove(id);
                    }
                }
            }
        }
        for id in &adv.identifiers {
            self.remote_entries
                .entry(id.clone())
                .or_default()
                .insert(adv.vasp_number, adv.sequence);
        }
        self.latest.insert(adv.vasp_number, bundle);
    }
}

/// The resolver service run by one VASP.
#[derive(Debug, Clone)]
pub struct Resolver {
    vasp_number: VaspNumber,
    customers: BTreeSet<String>,
    table: ResolverTable,
    last_sequence: u64,
}

impl Resolver {
    pub fn new(vasp_number: VaspNumber) -> Self {
        Self {
            vasp_number,
            customers: BTreeSet::new(),
            table: ResolverTable::default(),
            last_sequence: 0,
        }
    }

    pub fn vasp_number(&self) -> VaspNumber {
        self.vasp_number
    }

    pub fn table(&self) -> &ResolverTable {
        &self.table
    }

    pub fn add_customer(&mut self, customer_id: &str) {
        self.customers.insert(customer_id.to_string());
    }

    /// Registers `identifier` for a local customer. Email identifiers are
    /// confirmed with the issuing identity provider when one is supplied.
    pub fn register_identifier(
        &mut self,
        customer_id: &str,
        identifier: CustomerIdentifier,
        idp: Option<&IdpDirectory>,
    ) -> Result<(), ResolverError> {
        if !self.customers.contains(customer_id) {
            return Err(ResolverError::UnknownCustomer(customer_id.to_string()));
        }
        if let (Some(dir), CustomerIdentifier::Email { .. }) = (idp, &identifier) {
            if !dir.confirms(&identifier) {
                return Err(ResolverError::IdpValidationFailed(identifier.to_string()));
            }
        }
        self.table
            .local_entries
            .entry(identifier)
            .or_default()
            .insert(customer_id.to_string());
        Ok(())
    }

    /// Local customers holding `identifier`.
    pub fn local_customers(&self, identifier: &CustomerIdentifier) -> Vec<String> {
        self.table
            .local_entries
            .get(identifier)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// VASPs known to hold `identifier`, without caller authentication.
    pub fn resolve(&self, identifier: &CustomerIdentifier) -> Vec<VaspNumber> {
        let mut out: BTreeSet<VaspNumber> = self.table.remote_vasps(identifier);
        if self.table.local_entries.contains_key(identifier) {
            out.insert(self.vasp_number);
        }
        out.into_iter().collect()
    }

    /// Authenticated lookup for a calling VASP.
    pub fn lookup(
        &self,
        identifier: &CustomerIdentifier,
        caller_cert: &EvIdentityCertificate,
        trust: &TrustAnchor,
        now: Tick,
    ) -> Result<LookupResponse, ResolverError> {
        let report = trust.validate(CertificateRef::Identity(caller_cert), now);
        if !report.is_valid() {
            return Err(ResolverError::Unauthorized(report.verdict));
        }
        Ok(LookupResponse {
            vasp_numbers: self.resolve(identifier),
        })
    }

    /// Full-state advertisement of the current local identifiers.
    pub fn build_advertisement(&mut self, claims_signing_key: &KeyPair) -> IdentifierAdvertisement {
        self.last_sequence += 1;
        let mut adv = IdentifierAdvertisement {
            vasp_number: self.vasp_number,
            sequence: self.last_sequence,
            identifiers: self.table.local_identifiers().into_iter().collect(),
            signature: Signature([0; 64]),
        };
        adv.signature = claims_signing_key.sign(&adv.signed_bytes());
        adv
    }

    /// Applies an advertisement if it verifies and is newer than what we
    /// hold for its origin.
    pub fn merge_advertisement(
        &mut self,
        bundle: &AdvertisementBundle,
        trust: &TrustAnchor,
        now: Tick,
    ) -> MergeOutcome {
        if let Err(reason) = check_bundle(bundle, trust, now) {
            return MergeOutcome::Rejected(reason);
        }
        let adv = &bundle.advertisement;
        if adv.vasp_number == self.vasp_number {
            return MergeOutcome::Stale;
        }
        match self.table.last_sequence(adv.vasp_number) {
            Some(seen) if adv.sequence <= seen => MergeOutcome::Stale,
            _ => {
                self.table.replace_origin(bundle.clone());
                MergeOutcome::Applied
            }
        }
    }
}

/// Verifies origin certificates and the advertisement signature.
pub fn check_bundle(
    bundle: &AdvertisementBundle,
    trust: &TrustAnchor,
    now: Tick,
) -> Result<(), RejectReason> {
    let adv = &bundle.advertisement;
    let id = trust.validate(CertificateRef::Identity(&bundle.identity_cert), now);
    if !id.is_valid() {
        return Err(RejectReason::InvalidCert(id.verdict));
    }
    let claims = trust.validate(
        CertificateRef::Signing {
            cert: &bundle.claims_cert,
            identity: Some(&bundle.identity_cert),
        },
        now,
    );
    if !claims.is_valid() {
        return Err(RejectReason::InvalidCert(claims.verdict));
    }
    if bundle.claims_cert.purpose != KeyPurpose::ClaimsSigning {
        return Err(RejectReason::WrongPurpose);
    }
    if bundle.identity_cert.vasp_number() != adv.vasp_number {
        return Err(RejectReason::OriginMismatch);
    }
    let sorted = adv.identifiers.windows(2).all(|w| w[0] < w[1]);
    if !sorted
        || !crypto::verify(
            &bundle.claims_cert.subject_public_key,
            &adv.signed_bytes(),
            &adv.signature,
        )
    {
        return Err(RejectReason::BadSignature);
    }
    Ok(())
}
