//! Travel Rule customer-information payloads: construction, completeness
//! checks, signing with claims-signing keys, consent bookkeeping, and
//! correlation of payloads to confirmed ledger outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use thiserror::Error;

use crate::codec::{CodecError, Decode, Encode, Reader, Writer};
use crate::crypto::{self, Digest, KeyPair, PublicKey, Signature};
use crate::ledger::Ledger;
use crate::pki::{
    CertificateRef, EvIdentityCertificate, KeyPurpose, SigningCertificate, TrustAnchor, Verdict,
};
use crate::resolver::CustomerIdentifier;
use crate::types::{Tick, VaspNumber};
use crate::{canonical_struct, canonical_tag_enum};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TravelRuleError {
    #[error("originator record lacks address, national id, customer number and birth data")]
    IncompleteOriginatorData,
    #[error("beneficiary name and account must be non-empty")]
    IncompleteBeneficiaryData,
    #[error("amount must be positive")]
    ZeroAmount,
    #[error("certificate purpose is {0:?}, expected ClaimsSigning")]
    WrongCertPurpose(KeyPurpose),
    #[error("claims certificate failed validation: {0:?}")]
    InvalidCert(Verdict),
    #[error("signing key does not match the certificate")]
    KeyMismatch,
    #[error("unknown customer {0:?}")]
    UnknownCustomer(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorrelationError {
    #[error("no unclaimed ledger output matches the payload")]
    NoMatch,
    #[error("{0} candidate outputs match the payload")]
    AmbiguousMatch(usize),
    #[error("payload is incomplete or its id is inconsistent")]
    InvalidPayload,
}

/// The originator identification alternative carried in a payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OriginatorDetail {
    GeographicAddress(String),
    NationalId(String),
    CustomerNumber(String),
    BirthInfo { date: String, place: String },
}

impl OriginatorDetail {
    fn is_blank(&self) -> bool {
        match self {
            Self::GeographicAddress(s) | Self::NationalId(s) | Self::CustomerNumber(s) => {
                s.trim().is_empty()
            }
            Self::BirthInfo { date, place } => date.trim().is_empty() || place.trim().is_empty(),
        }
    }
}

impl Encode for OriginatorDetail {
    fn encode_to(&self, w: &mut Writer) {
        match self {
            Self::GeographicAddress(s) => {
                w.put_u8(1);
                w.put(s);
            }
            Self::NationalId(s) => {
                w.put_u8(2);
                w.put(s);
            }
            Self::CustomerNumber(s) => {
                w.put_u8(3);
                w.put(s);
            }
            Self::BirthInfo { date, place } => {
                w.put_u8(4);
                w.put(date);
                w.put(place);
            }
        }
    }
}

impl Decode for OriginatorDetail {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(match r.u8()? {
            1 => Self::GeographicAddress(r.get()?),
            2 => Self::NationalId(r.get()?),
            3 => Self::CustomerNumber(r.get()?),
            4 => Self::BirthInfo {
                date: r.get()?,
                place: r.get()?,
            },
            tag => {
                return Err(CodecError::InvalidTag {
                    tag,
                    type_name: "OriginatorDetail",
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CustomerRecord {
    /// VASP-local account identifier.
    pub customer_id: String,
    pub legal_name: String,
    pub geographic_address: Option<String>,
    pub national_id: Option<String>,
    pub customer_number: Option<String>,
    /// (date, place)
    pub birth_info: Option<(String, String)>,
    pub identifiers: Vec<CustomerIdentifier>,
    pub wallet_ref: Option<String>,
}

impl CustomerRecord {
    /// First present identification alternative, in the fixed order
    /// address, national id, customer number, birth data.
    pub fn originator_detail(&self) -> Option<OriginatorDetail> {
        let candidates = [
            self.geographic_address
                .clone()
                .map(OriginatorDetail::GeographicAddress),
            self.national_id.clone().map(OriginatorDetail::NationalId),
            self.customer_number
                .clone()
                .map(OriginatorDetail::CustomerNumber),
            self.birth_info
                .clone()
                .map(|(date, place)| OriginatorDetail::BirthInfo { date, place }),
        ];
        candidates.into_iter().flatten().find(|d| !d.is_blank())
    }

    pub fn is_transfer_eligible(&self) -> bool {
        !self.legal_name.trim().is_empty() && self.originator_detail().is_some()
    }
}

/// How the beneficiary VASP finds the ledger output a payload covers. The
/// amount always comes from the payload itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationHint {
    /// The transfer carries the payload id as its memo tag.
    MemoTag { beneficiary_key: PublicKey },
    /// Match on (beneficiary key, amount) only.
    Expected { beneficiary_key: PublicKey },
}

impl CorrelationHint {
    pub fn beneficiary_key(&self) -> PublicKey {
        match self {
            Self::MemoTag { beneficiary_key } | Self::Expected { beneficiary_key } => {
                *beneficiary_key
            }
        }
    }
}

impl Encode for CorrelationHint {
    fn encode_to(&self, w: &mut Writer) {
        match self {
            Self::MemoTag { beneficiary_key } => {
                w.put_u8(1);
                w.put(beneficiary_key);
            }
            Self::Expected { beneficiary_key } => {
                w.put_u8(2);
                w.put(beneficiary_key);
            }
        }
    }
}

impl Decode for CorrelationHint {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            1 => Ok(Self::MemoTag {
                beneficiary_key: r.get()?,
            }),
            2 => Ok(Self::Expected {
                beneficiary_key: r.get()?,
            }),
            tag => Err(CodecError::InvalidTag {
                tag,
                type_name: "CorrelationHint",
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TravelRulePayload {
    pub originator_name: String,
    pub originator_account: String,
    pub originator_detail: Option<OriginatorDetail>,
    pub beneficiary_name: String,
    pub beneficiary_account: String,
    pub originating_vasp: VaspNumber,
    pub beneficiary_vasp: VaspNumber,
    pub amount: u64,
    pub correlation: CorrelationHint,
    /// Hash of every field above.
    pub payload_id: Digest,
}

canonical_struct!(TravelRulePayload {
    originator_name,
    originator_account,
    originator_detail,
    beneficiary_name,
    beneficiary_account,
    originating_vasp,
    beneficiary_vasp,
    amount,
    correlation,
    payload_id,
});

impl TravelRulePayload {
    pub fn compute_id(&self) -> Digest {
        let mut w = Writer::new();
        w.put_field(b"vtn/travel-rule-payload/v1");
        w.put(&self.originator_name);
        w.put(&self.originator_account);
        w.put(&self.originator_detail);
        w.put(&self.beneficiary_name);
        w.put(&self.beneficiary_account);
        w.put(&self.originating_vasp);
        w.put(&self.beneficiary_vasp);
        w.put_u64(self.amount);
        w.put(&self.correlation);
        crypto::hash(&w.into_bytes())
    }

    /// Recomputes `payload_id` after field edits.
    pub fn seal(mut self) -> Self {
        self.payload_id = self.compute_id();
        self
    }

    pub fn id_is_consistent(&self) -> bool {
        self.payload_id == self.compute_id()
    }

    /// Memo tag a correlated transfer should carry.
    pub fn memo_tag(&self) -> [u8; 32] {
        self.payload_id.0
    }
}

/// The five customer-information items every payload must carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RequiredItem {
    OriginatorName,
    OriginatorAccount,
    /// Address, national id, customer number, or date and place of birth.
    OriginatorIdentification,
    BeneficiaryName,
    BeneficiaryAccount,
}

impl RequiredItem {
    pub const ALL: [RequiredItem; 5] = [
        RequiredItem::OriginatorName,
        RequiredItem::OriginatorAccount,
        RequiredItem::OriginatorIdentification,
        RequiredItem::BeneficiaryName,
        RequiredItem::BeneficiaryAccount,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletenessReport {
    pub items: Vec<(RequiredItem, bool)>,
}

impl CompletenessReport {
    pub fn pass(&self) -> bool {
        self.items.iter().all(|(_, present)| *present)
    }

    pub fn present_count(&self) -> usize {
        self.items.iter().filter(|(_, p)| *p).count()
    }

    pub fn missing(&self) -> Vec<RequiredItem> {
        self.items
            .iter()
            .filter(|(_, p)| !p)
            .map(|(i, _)| *i)
            .collect()
    }
}

pub fn validate_payload(payload: &TravelRulePayload) -> CompletenessReport {
    let filled = |s: &str| !s.trim().is_empty();
    let present = |item: RequiredItem| match item {
        RequiredItem::OriginatorName => filled(&payload.originator_name),
        RequiredItem::OriginatorAccount => filled(&payload.originator_account),
        RequiredItem::OriginatorIdentification => payload
            .originator_detail
            .as_ref()
            .is_some_and(|d| !d.is_blank()),
        RequiredItem::BeneficiaryName => filled(&payload.beneficiary_name),
        RequiredItem::BeneficiaryAccount => filled(&payload.beneficiary_account),
    };
    CompletenessReport {
        items: RequiredItem::ALL.iter().map(|&i| (i, present(i))).collect(),
    }
}

/// Parameters for [`build_payload`] describing the beneficiary side.
#[derive(Debug, Clone)]
pub struct BeneficiaryInfo {
    pub name: String,
    pub account: String,
    pub vasp: VaspNumber,
}

pub fn build_payload(
    originator: &CustomerRecord,
    originating_vasp: VaspNumber,
    beneficiary: &BeneficiaryInfo,
    amount: u64,
    correlation: CorrelationHint,
) -> Result<TravelRulePayload, TravelRuleError> {
    if amount == 0 {
        return Err(TravelRuleError::ZeroAmount);
    }
    let detail = originator
        .originator_detail()
        .ok_or(TravelRuleError::IncompleteOriginatorData)?;
    if originator.legal_name.trim().is_empty() || originator.customer_id.trim().is_empty() {
        return Err(TravelRuleError::IncompleteOriginatorData);
    }
    if beneficiary.name.trim().is_empty() || beneficiary.account.trim().is_empty() {
        return Err(TravelRuleError::IncompleteBeneficiaryData);
    }
    Ok(TravelRulePayload {
        originator_name: originator.legal_name.clone(),
        originator_account: originator.customer_id.clone(),
        originator_detail: Some(detail),
        beneficiary_name: beneficiary.name.clone(),
        beneficiary_account: beneficiary.account.clone(),
        originating_vasp,
        beneficiary_vasp: beneficiary.vasp,
        amount,
        correlation,
        payload_id: Digest::default(),
    }
    .seal())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedPayload {
    pub payload: TravelRulePayload,
    pub signer_cert_serial: u64,
    pub signature: Signature,
}

canonical_struct!(SignedPayload = "vtn/signed-payload/v1" {
    payload,
    signer_cert_serial,
} signed signature);

/// Signs with a claims-signing key after checking the certificate's
/// purpose, chain validity and key binding.
pub fn sign_payload(
    claims_signing_key: &KeyPair,
    claims_cert: &SigningCertificate,
    identity_cert: &EvIdentityCertificate,
    payload: TravelRulePayload,
    trust: &TrustAnchor,
    now: Tick,
) -> Result<SignedPayload, TravelRuleError> {
    if claims_cert.purpose != KeyPurpose::ClaimsSigning {
        return Err(TravelRuleError::WrongCertPurpose(claims_cert.purpose));
    }
    let report = trust.validate(
        CertificateRef::Signing {
            cert: claims_cert,
            identity: Some(identity_cert),
        },
        now,
    );
    if !report.is_valid() {
        return Err(TravelRuleError::InvalidCert(report.verdict));
    }
    if claims_signing_key.public_key != claims_cert.subject_public_key {
        return Err(TravelRuleError::KeyMismatch);
    }
    let mut signed = SignedPayload {
        payload,
        signer_cert_serial: claims_cert.serial,
        signature: Signature([0; 64]),
    };
    signed.signature = claims_signing_key.sign(&signed.signed_bytes());
    Ok(signed)
}

/// Binds the payload bytes to exactly this claims-signing certificate.
pub fn verify_signed_payload(signed: &SignedPayload, claims_cert: &SigningCertificate) -> bool {
    claims_cert.purpose == KeyPurpose::ClaimsSigning
        && signed.signer_cert_serial == claims_cert.serial
        && signed.payload.id_is_consistent()
        && crypto::verify(
            &claims_cert.subject_public_key,
            &signed.signed_bytes(),
            &signed.signature,
        )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConsentDirection {
    SendInfoToCounterparty,
    ReceiveAssets,
}

canonical_tag_enum!(ConsentDirection {
    SendInfoToCounterparty = 1,
    ReceiveAssets = 2,
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsentRecord {
    pub customer_id: String,
    pub direction: ConsentDirection,
    /// `None` means any counterparty.
    pub counterparty: Option<VaspNumber>,
    pub granted_at: Tick,
    pub withdrawn_at: Option<Tick>,
}

impl ConsentRecord {
    pub fn is_active(&self, now: Tick) -> bool {
        self.granted_at <= now && self.withdrawn_at.is_none_or(|w| now < w)
    }

    fn covers(&self, counterparty: VaspNumber) -> bool {
        self.counterparty.is_none_or(|c| c == counterparty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CorrelationRecord {
    pub payload_id: Digest,
    pub tx_id: Digest,
    pub output_index: u64,
    pub matched_at_height: u64,
}

/// Per-VASP retained compliance state: customers, consents, payloads and
/// correlation records. Everything is append-only.
#[derive(Debug, Clone, Default)]
pub struct ComplianceStore {
    customers: BTreeMap<String, CustomerRecord>,
    consents: Vec<ConsentRecord>,
    payloads: Vec<TravelRulePayload>,
    correlations: Vec<CorrelationRecord>,
    claimed_outputs: BTreeSet<(Digest, u64)>,
    correlated_payloads: BTreeSet<Digest>,
}

impl ComplianceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_customer(&mut self, record: CustomerRecord) {
        self.customers.insert(record.customer_id.clone(), record);
    }

    pub fn customer(&self, customer_id: &str) -> Option<&CustomerRecord> {
        self.customers.get(customer_id)
    }

    pub fn customers(&self) -> impl Iterator<Item = &CustomerRecord> {
        self.customers.values()
    }

    pub fn record_consent(
        &mut self,
        customer_id: &str,
        direction: ConsentDirection,
        counterparty: Option<VaspNumber>,
        now: Tick,
    ) -> Result<ConsentRecord, TravelRuleError> {
        if !self.customers.contains_key(customer_id) {
            return Err(TravelRuleError::UnknownCustomer(customer_id.to_string()));
        }
        let record = ConsentRecord {
            customer_id: customer_id.to_string(),
            direction,
            counterparty,
            granted_at: now,
            withdrawn_at: None,
        };
        self.consents.push(record.clone());
        Ok(record)
    }

    /// Withdraws every active consent of this customer, direction and
    /// scope. Returns how many records were withdrawn.
    pub fn withdraw_consent(
        &mut self,
        customer_id: &str,
        direction: ConsentDirection,
        counterparty: Option<VaspNumber>,
        now: Tick,
    ) -> usize {
        let mut n = 0;
        for c in self.consents.iter_mut().filter(|c| {
            c.customer_id == customer_id
                && c.direction == direction
                && c.counterparty == counterparty
                && c.withdrawn_at.is_none()
        }) {
            c.withdrawn_at = Some(now.max(c.granted_at + 1));
            n += 1;
        }
        n
    }

    pub fn check_consent(
        &self,
        customer_id: &str,
        direction: ConsentDirection,
        counterparty: VaspNumber,
        now: Tick,
    ) -> bool {
        self.consents.iter().any(|c| {
            c.customer_id == customer_id
                && c.direction == direction
                && c.covers(counterparty)
                && c.is_active(now)
        })
    }

    pub fn consents(&self) -> &[ConsentRecord] {
        &self.consents
    }

    pub fn retain_payload(&mut self, payload: TravelRulePayload) {
        self.payloads.push(payload);
    }

    pub fn payloads(&self) -> &[TravelRulePayload] {
        &self.payloads
    }

    pub fn correlations(&self) -> &[CorrelationRecord] {
        &self.correlations
    }

    /// Matches a payload to one unclaimed confirmed output in `window`.
    ///
    /// A memo-tagged payload considers only transfers tagged with its id
    /// when any exist; otherwise it falls back to (beneficiary key, amount)
    /// matching, which must be unique.
    pub fn correlate(
        &mut self,
        payload: &TravelRulePayload,
        ledger: &Ledger,
        window: RangeInclusive<u64>,
    ) -> Result<CorrelationRecord, CorrelationError> {
        self.correlate_batch(std::slice::from_ref(payload), ledger, window)
            .pop()
            .expect("one result per payload")
    }

    /// Correlates several payloads jointly, as for the outputs of a batch
    /// transfer. A payload is matched to an output only when every maximum
    /// matching of payloads to candidate outputs pairs the two; any other
    /// payload with candidates gets `AmbiguousMatch`.
    pub fn correlate_batch(
        &mut self,
        payloads: &[TravelRulePayload],
        ledger: &Ledger,
        window: RangeInclusive<u64>,
    ) -> Vec<Result<CorrelationRecord, CorrelationError>> {
        let mut results: Vec<Option<Result<CorrelationRecord, CorrelationError>>> = vec![None; payloads.len()];
        let mut slots: Vec<((Digest, u64), u64)> = Vec::new();
        let mut slot_index: BTreeMap<(Digest, u64), usize> = BTreeMap::new();
        let mut candidates: Vec<Vec<usize>> = vec![Vec::new(); payloads.len()];
        let mut active = Vec::new();
        let mut seen = BTreeSet::new();
        let txs: Vec<_> = ledger.confirmed_in(window).collect();

        for (i, payload) in payloads.iter().enumerate() {
            if !payload.id_is_consistent() || !validate_payload(payload).pass() {
                results[i] = Some(Err(CorrelationError::InvalidPayload));
                continue;
            }
            if self.correlated_payloads.contains(&payload.payload_id) {
                results[i] = Some(
                    self.correlations
                        .iter()
                        .find(|c| c.payload_id == payload.payload_id)
                        .copied()
                        .ok_or(CorrelationError::NoMatch),
                );
                continue;
            }
            if !seen.insert(payload.payload_id) {
                results[i] = Some(Err(CorrelationError::AmbiguousMatch(0)));
                continue;
            }
            let key = payload.correlation.beneficiary_key();
            let mut tagged = Vec::new();
            let mut untagged = Vec::new();
            for tx in &txs {
                for (o, out) in tx.outputs.iter().enumerate() {
                    let slot = (tx.tx_id, o as u64);
                    if out.key != key || out.amount != payload.amount || self.claimed_outputs.contains(&slot) {
                        continue;
                    }
                    let idx = *slot_index.entry(slot).or_insert_with(|| {
                        slots.push((slot, tx.block_height));
                        slots.len() - 1
                    });
                    if tx.memo_tag == Some(payload.memo_tag()) {
                        tagged.push(idx);
                    }
                    untagged.push(idx);
                }
            }
            candidates[i] = match payload.correlation {
                CorrelationHint::MemoTag { .. } if !tagged.is_empty() => tagged,
                _ => untagged,
            };
            active.push(i);
        }

        let best = max_matching(&candidates, slots.len(), None);
        let mut matched = Vec::new();
        for &i in &active {
            let cands = &candidates[i];
            if cands.is_empty() {
                results[i] = Some(Err(CorrelationError::NoMatch));
                continue;
            }
            let usable: Vec<usize> = cands
                .iter()
                .copied()
                .filter(|&o| max_matching(&candidates, slots.len(), Some((i, Some(o)))) == best)
                .collect();
            let always_matched = max_matching(&candidates, slots.len(), Some((i, None))) < best;
            match usable.as_slice() {
                [o] if always_matched => matched.push((i, *o)),
                _ => results[i] = Some(Err(CorrelationError::AmbiguousMatch(cands.len()))),
            }
        }
        for (i, o) in matched {
            let ((tx_id, output_index), height) = slots[o];
            let record = CorrelationRecord {
                payload_id: payloads[i].payload_id,
                tx_id,
                output_index,
                matched_at_height: height,
            };
            self.claimed_outputs.insert((tx_id, output_index));
            self.correlated_payloads.insert(record.payload_id);
            self.correlations.push(record);
            results[i] = Some(Ok(record));
        }
        results.into_iter().map(|r| r.expect("every payload decided")).collect()
    }
}

/// Maximum bipartite matching size (augmenting paths). `restrict` either
/// removes payload `i` (`None`) or limits it to a single output.
fn max_matching(candidates: &[Vec<usize>], outputs: usize, restrict: Option<(usize, Option<usize>)>) -> usize {
    fn augment(
        p: usize,
        edges: &[Vec<usize>],
        owner: &mut [Option<usize>],
        visited: &mut [bool],
    ) -> bool {
        for &o in &edges[p] {
            if visited[o] {
                continue;
            }
            visited[o] = true;
            if owner[o].is_none_or(|q| augment(q, edges, owner, visited)) {
                owner[o] = Some(p);
                return true;
            }
        }
        false
    }
    let edges: Vec<Vec<usize>> = candidates
        .iter()
        .enumerate()
        .map(|(p, c)| match restrict {
            Some((i, None)) if i == p => Vec::new(),
            Some((i, Some(o))) if i == p => vec![o],
            _ => c.clone(),
        })
        .collect();
    let mut owner = vec![None; outputs];
    (0..edges.len())
        .filter(|&p| augment(p, &edges, &mut owner, &mut vec![false; outputs]))
        .count()
}
