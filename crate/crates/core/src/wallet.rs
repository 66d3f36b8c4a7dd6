//! Simulated trusted-hardware wallets, attestation evidence and the
//! customer boarding procedures built on them.
//!
//! Private keys live inside [`WalletDevice`] and leave it only through
//! [`WalletDevice::export_key`], which refuses non-migratable slots. Key
//! material is derived from the device seed with public labels
//! (see [`slot_seed`]), so a test harness holding the seed can reconstruct
//! it and scan operation outputs for leaks.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::codec::Writer;
use crate::crypto::{self, Digest, KeyPair, PublicKey, Signature};
use crate::ledger::{Leg, Ledger, LedgerTx};
use crate::types::{Tick, VaspNumber};
use crate::{canonical_struct, canonical_tag_enum};

pub const CHECKPOINT_INTERVAL: u64 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WalletError {
    #[error("key {0} is non-migratable")]
    NonMigratable(u64),
    #[error("key {0} has been erased")]
    ErasedKey(u64),
    #[error("no key slot {0}")]
    UnknownHandle(u64),
    #[error("device refused to attest")]
    AttestationRefused,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BoardingError {
    #[error("no attestation evidence could be obtained: {0}")]
    AttestationFailed(WalletError),
    #[error("customer {0:?} is not supervised by this VASP")]
    NotSupervised(String),
    /// Post-erasure evidence still shows live supervised keys.
    #[error("supervised keys {handles:?} were not erased")]
    ErasureNotProven {
        handles: Vec<u64>,
        report: Box<BoardingReport>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyOrigin {
    GeneratedInternally,
    Imported,
}

canonical_tag_enum!(KeyOrigin {
    GeneratedInternally = 1,
    Imported = 2,
});

/// Fault switches for a dishonest or broken device.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeviceFaults {
    pub refuse_attestation: bool,
    /// `erase_key` reports success without erasing. Attestation still
    /// reports the true slot state.
    pub skip_erasure: bool,
}

#[derive(Debug)]
struct KeySlot {
    keypair: KeyPair,
    origin: KeyOrigin,
    migratable: bool,
    erased: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementEntry {
    pub component_name: String,
    pub digest: Digest,
}

canonical_struct!(MeasurementEntry {
    component_name,
    digest
});

/// Seed of the key generated into slot `handle`.
pub fn slot_seed(device_seed: &[u8; 32], handle: u64) -> [u8; 32] {
    crypto::derive_seed(device_seed, &format!("wallet/slot/{handle}"))
}

pub fn attestation_seed(device_seed: &[u8; 32]) -> [u8; 32] {
    crypto::derive_seed(device_seed, "wallet/attestation")
}

/// Running hash over the measurement log, starting from all zeros.
pub fn fold_boot_digest(log: &[MeasurementEntry]) -> Digest {
    log.iter().fold(Digest::default(), |prev, m| {
        let mut w = Writer::new();
        w.put(&prev);
        w.put(&m.component_name);
        w.put(&m.digest);
        crypto::hash(&w.into_bytes())
    })
}

#[derive(Debug)]
pub struct WalletDevice {
    device_id: String,
    seed: [u8; 32],
    attestation_key: KeyPair,
    slots: BTreeMap<u64, KeySlot>,
    next_handle: u64,
    measurement_log: Vec<MeasurementEntry>,
    boot_digest: Digest,
    faults: DeviceFaults,
}

impl WalletDevice {
    pub fn create(device_id: &str, seed: &[u8; 32], initial_stack: &[(String, Digest)]) -> Self {
        let measurement_log: Vec<MeasurementEntry> = initial_stack
            .iter()
            .map(|(n, d)| MeasurementEntry {
                component_name: n.clone(),
                digest: *d,
            })
            .collect();
        Self {
            device_id: device_id.to_string(),
            seed: *seed,
            attestation_key: KeyPair::from_seed(&attestation_seed(seed)),
            slots: BTreeMap::new(),
            next_handle: 1,
            boot_digest: fold_boot_digest(&measurement_log),
            measurement_log,
            faults: DeviceFaults::default(),
        }
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn attestation_public_key(&self) -> PublicKey {
        self.attestation_key.public_key
    }

    pub fn boot_digest(&self) -> Digest {
        self.boot_digest
    }

    pub fn measurement_log(&self) -> &[MeasurementEntry] {
        &self.measurement_log
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn faults(&self) -> DeviceFaults {
        self.faults
    }

    pub fn set_faults(&mut self, faults: DeviceFaults) {
        self.faults = faults;
    }

    /// Appends a component measurement, as a software update would.
    pub fn measure(&mut self, component_name: &str, digest: Digest) {
        self.measurement_log.push(MeasurementEntry {
            component_name: component_name.to_string(),
            digest,
        });
        self.boot_digest = fold_boot_digest(&self.measurement_log);
    }

    fn insert(&mut self, keypair: KeyPair, origin: KeyOrigin, migratable: bool) -> u64 {
        let handle = self.next_handle;
        self.next_handle += 1;
        self.slots.insert(
            handle,
            KeySlot {
                keypair,
                origin,
                migratable,
                erased: false,
            },
        );
        handle
    }

    pub fn generate_key(&mut self, migratable: bool) -> u64 {
        let keypair = KeyPair::from_seed(&slot_seed(&self.seed, self.next_handle));
        self.insert(keypair, KeyOrigin::GeneratedInternally, migratable)
    }

    /// Imported keys are always migratable.
    pub fn import_key(&mut self, keypair: KeyPair) -> u64 {
        self.insert(keypair, KeyOrigin::Imported, true)
    }

    fn live_slot(&self, handle: u64) -> Result<&KeySlot, WalletError> {
        let slot = self.slots.get(&handle).ok_or(WalletError::UnknownHandle(handle))?;
        if slot.erased {
            return Err(WalletError::ErasedKey(handle));
        }
        Ok(slot)
    }

    pub fn public_key(&self, handle: u64) -> Result<PublicKey, WalletError> {
        self.slots
            .get(&handle)
            .map(|s| s.keypair.public_key)
            .ok_or(WalletError::UnknownHandle(handle))
    }

    pub fn export_key(&self, handle: u64) -> Result<KeyPair, WalletError> {
        let slot = self.live_slot(handle)?;
        if !slot.migratable {
            return Err(WalletError::NonMigratable(handle));
        }
        Ok(slot.keypair.clone())
    }

    pub fn erase_key(&mut self, handle: u64) -> Result<(), WalletError> {
        let skip = self.faults.skip_erasure;
        let slot = self.slots.get_mut(&handle).ok_or(WalletError::UnknownHandle(handle))?;
        if !skip {
            slot.erased = true;
        }
        Ok(())
    }

    pub fn sign(&self, handle: u64, message: &[u8]) -> Result<Signature, WalletError> {
        Ok(self.live_slot(handle)?.keypair.sign(message))
    }

    /// Signs every input of `tx` held by this device.
    pub fn sign_transfer(&self, tx: &mut LedgerTx, handles: &[u64]) -> Result<(), WalletError> {
        let msg = tx.unsigned_bytes();
        let mut sigs = Vec::new();
        for key in tx.input_keys() {
            let handle = handles
                .iter()
                .copied()
                .find(|h| self.public_key(*h).ok() == Some(key))
                .ok_or(WalletError::UnknownHandle(0))?;
            sigs.push(self.sign(handle, &msg)?);
        }
        tx.signatures = sigs;
        Ok(())
    }

    pub fn attest(&self, nonce: [u8; 32], now: Tick) -> Result<AttestationEvidence, WalletError> {
        if self.faults.refuse_attestation {
            return Err(WalletError::AttestationRefused);
        }
        let mut evidence = AttestationEvidence {
            device_id: self.device_id.clone(),
            nonce,
            key_reports: self
                .slots
                .iter()
                .map(|(&handle, s)| KeyReport {
                    handle,
                    public_key: s.keypair.public_key,
                    origin: s.origin,
                    migratable: s.migratable,
                    erased: s.erased,
                })
                .collect(),
            measurement_log: self.measurement_log.clone(),
            boot_digest: self.boot_digest,
            signed_at: now,
            signature: Signature([0; 64]),
        };
        evidence.signature = self.attestation_key.sign(&evidence.signed_bytes());
        Ok(evidence)
    }
}

/// The device operations a supervising verifier drives. Implemented by
/// [`WalletDevice`] and by transports that relay to one.
pub trait DeviceAccess {
    fn device_id(&self) -> String;
    fn attestation_public_key(&self) -> PublicKey;
    fn attest(&mut self, nonce: [u8; 32], now: Tick) -> Result<AttestationEvidence, WalletError>;
    fn generate_key(&mut self, migratable: bool) -> u64;
    fn public_key(&self, handle: u64) -> Result<PublicKey, WalletError>;
    fn sign_transfer(&self, tx: &mut LedgerTx, handles: &[u64]) -> Result<(), WalletError>;
    fn erase_key(&mut self, handle: u64) -> Result<(), WalletError>;
}

impl DeviceAccess for WalletDevice {
    fn device_id(&self) -> String {
        self.device_id.clone()
    }
    fn attestation_public_key(&self) -> PublicKey {
        self.attestation_key.public_key
    }
    fn attest(&mut self, nonce: [u8; 32], now: Tick) -> Result<AttestationEvidence, WalletError> {
        WalletDevice::attest(self, nonce, now)
    }
    fn generate_key(&mut self, migratable: bool) -> u64 {
        WalletDevice::generate_key(self, migratable)
    }
    fn public_key(&self, handle: u64) -> Result<PublicKey, WalletError> {
        WalletDevice::public_key(self, handle)
    }
    fn sign_transfer(&self, tx: &mut LedgerTx, handles: &[u64]) -> Result<(), WalletError> {
        WalletDevice::sign_transfer(self, tx, handles)
    }
    fn erase_key(&mut self, handle: u64) -> Result<(), WalletError> {
        WalletDevice::erase_key(self, handle)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyReport {
    pub handle: u64,
    pub public_key: PublicKey,
    pub origin: KeyOrigin,
    pub migratable: bool,
    pub erased: bool,
}

canonical_struct!(KeyReport {
    handle,
    public_key,
    origin,
    migratable,
    erased
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationEvidence {
    pub device_id: String,
    pub nonce: [u8; 32],
    pub key_reports: Vec<KeyReport>,
    pub measurement_log: Vec<MeasurementEntry>,
    pub boot_digest: Digest,
    pub signed_at: Tick,
    pub signature: Signature,
}

canonical_struct!(AttestationEvidence = "vtn/attestation-evidence/v1" {
    device_id,
    nonce,
    key_reports,
    measurement_log,
    boot_digest,
    signed_at,
} signed signature);

impl AttestationEvidence {
    pub fn report(&self, handle: u64) -> Option<&KeyReport> {
        self.key_reports.iter().find(|r| r.handle == handle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum KeyFinding {
    ImportedKeyPresent(u64),
    MigratableKeyPresent(u64),
    ErasedKey(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifierVerdict {
    pub signature_ok: bool,
    pub nonce_fresh: bool,
    /// The boot digest is the fold of the reported log and is approved.
    pub stack_approved: bool,
    pub findings: Vec<KeyFinding>,
}

impl VerifierVerdict {
    pub fn pass(&self) -> bool {
        self.signature_ok && self.nonce_fresh && self.stack_approved
    }
}

pub fn verify_evidence(
    evidence: &AttestationEvidence,
    expected_nonce: &[u8; 32],
    device_attestation_public_key: &PublicKey,
    approved_stack_digests: &BTreeSet<Digest>,
) -> VerifierVerdict {
    let mut findings = Vec::new();
    for r in &evidence.key_reports {
        if r.erased {
            findings.push(KeyFinding::ErasedKey(r.handle));
        } else if r.origin == KeyOrigin::Imported {
            findings.push(KeyFinding::ImportedKeyPresent(r.handle));
        } else if r.migratable {
            findings.push(KeyFinding::MigratableKeyPresent(r.handle));
        }
    }
    VerifierVerdict {
        signature_ok: crypto::verify(
            device_attestation_public_key,
            &evidence.signed_bytes(),
            &evidence.signature,
        ),
        nonce_fresh: &evidence.nonce == expected_nonce,
        stack_approved: fold_boot_digest(&evidence.measurement_log) == evidence.boot_digest
            && approved_stack_digests.contains(&evidence.boot_digest),
        findings,
    }
}

/// Wallet classification. A wallet is regulated exactly when it has a
/// supervising VASP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalletStatus {
    pub supervising_vasp_number: Option<VaspNumber>,
    pub since: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Regulated,
    Private,
}

impl WalletStatus {
    pub fn regulated(vasp: VaspNumber, since: Tick) -> Self {
        Self {
            supervising_vasp_number: Some(vasp),
            since,
        }
    }

    pub fn private(since: Tick) -> Self {
        Self {
            supervising_vasp_number: None,
            since,
        }
    }

    pub fn classification(&self) -> Classification {
        match self.supervising_vasp_number {
            Some(_) => Classification::Regulated,
            None => Classification::Private,
        }
    }
}

/// Consortium-shared table of wallet status keyed by device id. Unknown
/// devices are private.
#[derive(Debug, Clone, Default)]
pub struct RegulatedWalletRegistry {
    entries: BTreeMap<String, WalletStatus>,
}

impl RegulatedWalletRegistry {
    pub fn status(&self, device_id: &str) -> WalletStatus {
        self.entries
            .get(device_id)
            .copied()
            .unwrap_or(WalletStatus::private(0))
    }

    pub fn set(&mut self, device_id: &str, status: WalletStatus) {
        self.entries.insert(device_id.to_string(), status);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoardingDirection {
    OnBoard,
    OffBoard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectionReason {
    EvidenceFailed,
    KeyHistoryInconsistent,
    /// Imported or migratable keys still hold assets.
    ExtractableKeyHoldsAssets,
    SupervisedElsewhere(VaspNumber),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoardingVerdict {
    Accepted,
    Rejected(RejectionReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyHistoryCheck {
    pub keys_checked: usize,
    pub transactions_checked: usize,
    /// Confirmed spends whose signature does not verify under the key.
    pub violations: Vec<Digest>,
}

impl KeyHistoryCheck {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationCheck {
    pub findings: Vec<KeyFinding>,
    /// Live imported or migratable keys with a nonzero balance.
    pub extractable_with_assets: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyTransition {
    pub old_handles: Vec<u64>,
    pub new_handle: u64,
    pub new_public_key: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub at: Tick,
    pub evidence_digest: Digest,
    pub boot_digest: Digest,
    pub passed: bool,
}

canonical_struct!(Checkpoint {
    at,
    evidence_digest,
    boot_digest,
    passed
});

/// Signed statement by the releasing VASP covering the supervision period.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegulatedPeriodSummary {
    pub customer_id: String,
    pub device_id: String,
    pub vasp_number: VaspNumber,
    pub from: Tick,
    pub until: Tick,
    pub checkpoints: Vec<Checkpoint>,
    pub signature: Signature,
}

canonical_struct!(RegulatedPeriodSummary = "vtn/regulated-period/v1" {
    customer_id,
    device_id,
    vasp_number,
    from,
    until,
    checkpoints,
} signed signature);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoardingReport {
    pub customer_id: String,
    pub direction: BoardingDirection,
    pub prior_status: WalletStatus,
    pub evidence_verdict: VerifierVerdict,
    pub key_history: Option<KeyHistoryCheck>,
    pub migration: Option<MigrationCheck>,
    pub key_transition: Option<KeyTransition>,
    pub regulated_period: Option<RegulatedPeriodSummary>,
    pub handoff_transfers: Vec<Digest>,
    pub erasure_evidence: Option<AttestationEvidence>,
    pub verdict: BoardingVerdict,
}

impl BoardingReport {
    /// For an accepted off-boarding: every old handle is reported erased
    /// in the attached evidence. Vacuously true otherwise.
    pub fn erasure_is_proven(&self) -> bool {
        if self.direction != BoardingDirection::OffBoard || self.verdict != BoardingVerdict::Accepted {
            return true;
        }
        match (&self.key_transition, &self.erasure_evidence) {
            (Some(t), Some(e)) => t
                .old_handles
                .iter()
                .all(|h| e.report(*h).is_some_and(|r| r.erased)),
            _ => false,
        }
    }
}

/// What to do with imported or migratable keys that hold assets at
/// on-boarding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ExtractableKeyPolicy {
    #[default]
    Reject,
    AcceptWithFindings,
}

#[derive(Debug, Clone)]
pub struct SupervisionRecord {
    pub customer_id: String,
    pub device_id: String,
    pub attestation_public_key: PublicKey,
    pub supervised_handles: Vec<u64>,
    pub since: Tick,
    pub checkpoints: Vec<Checkpoint>,
}

/// One VASP's wallet supervision role.
#[derive(Debug)]
pub struct WalletSupervisor {
    vasp_number: VaspNumber,
    key: KeyPair,
    approved_stacks: BTreeSet<Digest>,
    policy: ExtractableKeyPolicy,
    records: BTreeMap<String, SupervisionRecord>,
    nonce_counter: u64,
}

impl WalletSupervisor {
    pub fn new(vasp_number: VaspNumber, key: KeyPair, approved_stacks: BTreeSet<Digest>) -> Self {
        Self {
            vasp_number,
            key,
            approved_stacks,
            policy: ExtractableKeyPolicy::default(),
            records: BTreeMap::new(),
            nonce_counter: 0,
        }
    }

    pub fn with_policy(mut self, policy: ExtractableKeyPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public_key
    }

    pub fn approved_stacks(&self) -> &BTreeSet<Digest> {
        &self.approved_stacks
    }

    pub fn record(&self, customer_id: &str) -> Option<&SupervisionRecord> {
        self.records.get(customer_id)
    }

    pub fn next_nonce(&mut self) -> [u8; 32] {
        self.nonce_counter += 1;
        let mut w = Writer::new();
        w.put(&self.key.public_key);
        w.put_u64(self.nonce_counter);
        crypto::hash(&w.into_bytes()).0
    }

    fn challenge(
        &mut self,
        device: &mut (impl DeviceAccess + ?Sized),
        now: Tick,
    ) -> Result<(AttestationEvidence, VerifierVerdict), BoardingError> {
        let nonce = self.next_nonce();
        let evidence = device
            .attest(nonce, now)
            .map_err(BoardingError::AttestationFailed)?;
        let verdict = verify_evidence(
            &evidence,
            &nonce,
            &device.attestation_public_key(),
            &self.approved_stacks,
        );
        Ok((evidence, verdict))
    }

    pub fn onboard_customer(
        &mut self,
        customer_id: &str,
        device: &mut (impl DeviceAccess + ?Sized),
        ledger: &Ledger,
        registry: &mut RegulatedWalletRegistry,
        now: Tick,
    ) -> Result<BoardingReport, BoardingError> {
        let prior_status = registry.status(&device.device_id());
        let (evidence, evidence_verdict) = self.challenge(device, now)?;
        let live: Vec<&KeyReport> = evidence.key_reports.iter().filter(|r| !r.erased).collect();

        let mut history = KeyHistoryCheck {
            keys_checked: live.len(),
            transactions_checked: 0,
            violations: Vec::new(),
        };
        for r in &live {
            for tx in ledger.confirmed_spends_from(&r.public_key) {
                history.transactions_checked += 1;
                if !spend_is_signed_by(tx, &r.public_key) {
                    history.violations.push(tx.tx_id);
                }
            }
        }
        let migration = MigrationCheck {
            findings: evidence_verdict
                .findings
                .iter()
                .copied()
                .filter(|f| !matches!(f, KeyFinding::ErasedKey(_)))
                .collect(),
            extractable_with_assets: live
                .iter()
                .filter(|r| {
                    (r.origin == KeyOrigin::Imported || r.migratable) && ledger.balance(&r.public_key) > 0
                })
                .map(|r| r.handle)
                .collect(),
        };

        let rejection = match prior_status.supervising_vasp_number {
            _ if !evidence_verdict.pass() => Some(RejectionReason::EvidenceFailed),
            Some(v) if v != self.vasp_number => Some(RejectionReason::SupervisedElsewhere(v)),
            _ if !history.ok() => Some(RejectionReason::KeyHistoryInconsistent),
            _ if self.policy == ExtractableKeyPolicy::Reject
                && !migration.extractable_with_assets.is_empty() =>
            {
                Some(RejectionReason::ExtractableKeyHoldsAssets)
            }
            _ => None,
        };

        let mut report = BoardingReport {
            customer_id: customer_id.to_string(),
            direction: BoardingDirection::OnBoard,
            prior_status,
            evidence_verdict,
            key_history: Some(history),
            migration: Some(migration),
            key_transition: None,
            regulated_period: None,
            handoff_transfers: Vec::new(),
            erasure_evidence: None,
            verdict: BoardingVerdict::Accepted,
        };
        if let Some(reason) = rejection {
            report.verdict = BoardingVerdict::Rejected(reason);
            return Ok(report);
        }

        let new_handle = device.generate_key(false);
        let new_public_key = device.public_key(new_handle).expect("slot just created");
        report.key_transition = Some(KeyTransition {
            old_handles: live.iter().map(|r| r.handle).collect(),
            new_handle,
            new_public_key,
        });
        registry.set(&device.device_id(), WalletStatus::regulated(self.vasp_number, now));
        self.records.insert(
            customer_id.to_string(),
            SupervisionRecord {
                customer_id: customer_id.to_string(),
                device_id: device.device_id(),
                attestation_public_key: device.attestation_public_key(),
                supervised_handles: vec![new_handle],
                since: now,
                checkpoints: vec![Checkpoint {
                    at: now,
                    evidence_digest: crypto::hash_value(&evidence),
                    boot_digest: evidence.boot_digest,
                    passed: true,
                }],
            },
        );
        Ok(report)
    }

    /// Attests a supervised wallet and records the result.
    pub fn checkpoint(
        &mut self,
        customer_id: &str,
        device: &mut (impl DeviceAccess + ?Sized),
        now: Tick,
    ) -> Result<Checkpoint, BoardingError> {
        if !self.records.contains_key(customer_id) {
            return Err(BoardingError::NotSupervised(customer_id.to_string()));
        }
        let (evidence, verdict) = self.challenge(device, now)?;
        let cp = Checkpoint {
            at: now,
            evidence_digest: crypto::hash_value(&evidence),
            boot_digest: evidence.boot_digest,
            passed: verdict.pass(),
        };
        self.records
            .get_mut(customer_id)
            .expect("checked above")
            .checkpoints
            .push(cp.clone());
        Ok(cp)
    }

    /// Releases a customer: summarises the supervision period, moves assets
    /// to a fresh migratable handoff key, erases the supervised keys and
    /// proves the erasure with fresh evidence. Handoff transfers are left in
    /// the ledger mempool for the next block.
    pub fn offboard_customer(
        &mut self,
        customer_id: &str,
        device: &mut (impl DeviceAccess + ?Sized),
        ledger: &mut Ledger,
        registry: &mut RegulatedWalletRegistry,
        now: Tick,
    ) -> Result<BoardingReport, BoardingError> {
        let not_supervised = || BoardingError::NotSupervised(customer_id.to_string());
        let record = self.records.get(customer_id).ok_or_else(not_supervised)?;
        if record.device_id != device.device_id() {
            return Err(not_supervised());
        }
        let prior_status = registry.status(&device.device_id());
        self.checkpoint(customer_id, device, now)?;
        let record = self.records[customer_id].clone();

        let mut summary = RegulatedPeriodSummary {
            customer_id: customer_id.to_string(),
            device_id: record.device_id.clone(),
            vasp_number: self.vasp_number,
            from: record.since,
            until: now,
            checkpoints: record.checkpoints.clone(),
            signature: Signature([0; 64]),
        };
        summary.signature = self.key.sign(&summary.signed_bytes());

        let handoff = device.generate_key(true);
        let handoff_key = device.public_key(handoff).expect("slot just created");
        let mut handoff_transfers = Vec::new();
        for &h in &record.supervised_handles {
            let Ok(pk) = device.public_key(h) else { continue };
            let amount = ledger.available(&pk);
            if amount == 0 {
                continue;
            }
            let mut tx = LedgerTx::new_unsigned(
                vec![Leg { key: pk, amount }],
                vec![Leg {
                    key: handoff_key,
                    amount,
                }],
                None,
            );
            if device.sign_transfer(&mut tx, &[h]).is_ok() {
                if let Ok(id) = ledger.submit_transfer(tx) {
                    handoff_transfers.push(id);
                }
            }
        }
        for &h in &record.supervised_handles {
            let _ = device.erase_key(h);
        }
        let (evidence, evidence_verdict) = self.challenge(device, now)?;

        let mut report = BoardingReport {
            customer_id: customer_id.to_string(),
            direction: BoardingDirection::OffBoard,
            prior_status,
            evidence_verdict: evidence_verdict.clone(),
            key_history: None,
            migration: None,
            key_transition: Some(KeyTransition {
                old_handles: record.supervised_handles.clone(),
                new_handle: handoff,
                new_public_key: handoff_key,
            }),
            regulated_period: Some(summary),
            handoff_transfers,
            erasure_evidence: Some(evidence.clone()),
            verdict: BoardingVerdict::Accepted,
        };
        let live: Vec<u64> = record
            .supervised_handles
            .iter()
            .copied()
            .filter(|h| !evidence.report(*h).is_some_and(|r| r.erased))
            .collect();
        if !evidence_verdict.pass() || !live.is_empty() {
            report.verdict = BoardingVerdict::Rejected(RejectionReason::EvidenceFailed);
            return Err(BoardingError::ErasureNotProven {
                handles: live,
                report: Box::new(report),
            });
        }
        registry.set(&device.device_id(), WalletStatus::private(now));
        self.records.remove(customer_id);
        Ok(report)
    }
}

pub fn verify_period_summary(summary: &RegulatedPeriodSummary, vasp_public_key: &PublicKey) -> bool {
    crypto::verify(vasp_public_key, &summary.signed_bytes(), &summary.signature)
}

fn spend_is_signed_by(tx: &LedgerTx, key: &PublicKey) -> bool {
    let msg = tx.unsigned_bytes();
    tx.input_keys()
        .iter()
        .zip(&tx.signatures)
        .any(|(k, s)| k == key && crypto::verify(k, &msg, s))
}
