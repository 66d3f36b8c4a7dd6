//! The scripted end-to-end scenarios.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use crate::claims::{
    countersign_receipt, verify_acknowledgement, verify_claim, verify_receipt, AccessPolicy, AuthorizationDecision,
    AuthorizationToken, ClaimVerdict, DenialReason,
};
use crate::config::TopologyConfig;
use crate::crypto::{self, Digest};
use crate::ledger::{Leg, LedgerTx};
use crate::pki::CertificateRef;
use crate::resolver::{parse_identifier, AdvertisementBundle, CustomerIdentifier, MergeOutcome};
use crate::travel_rule::{
    build_payload, sign_payload, validate_payload, verify_signed_payload, BeneficiaryInfo, ConsentDirection,
    CorrelationHint, CorrelationRecord,
};
use crate::types::{Tick, VaspNumber};
use crate::wallet::{
    verify_evidence, AttestationEvidence, BoardingError, BoardingVerdict, DeviceAccess, DeviceFaults, WalletDevice,
    WalletError, CHECKPOINT_INTERVAL,
};

use super::world::{customer_node, vasp_node, SimError, Simulation};
use super::{ChannelId, Message, NetError, Network, NodeId, ScenarioTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScenarioName {
    /// Identifier lookup, payload exchange, ledger transfer, correlation.
    S1,
    /// Customer-controlled claims release.
    S2,
    /// Resolver federation convergence.
    S3,
    /// Wallet on-boarding, supervision and off-boarding.
    S4,
    /// Ambiguous identifier halts before any payload.
    S5,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 5] = [Self::S1, Self::S2, Self::S3, Self::S4, Self::S5];

    pub fn describe(self) -> &'static str {
        match self {
            Self::S1 => "travel rule transfer",
            Self::S2 => "claims release",
            Self::S3 => "resolver federation",
            Self::S4 => "wallet supervision",
            Self::S5 => "ambiguous identifier",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ScenarioName {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "s1" | "travel-rule" => Self::S1,
            "s2" | "claims" => Self::S2,
            "s3" | "federation" => Self::S3,
            "s4" | "wallet" => Self::S4,
            "s5" | "ambiguous" => Self::S5,
            _ => return Err(SimError::UnknownScenario(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FederationOutcome {
    pub rounds: u64,
    /// First round after which every resolver matched the ground truth.
    pub converged_at: Option<u64>,
    pub applied_per_round: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransferOutcome {
    Completed {
        payload_id: Digest,
        tx_id: Digest,
        correlation: Option<CorrelationRecord>,
    },
    Halted {
        reason: String,
    },
}

fn vasp_list(v: &[VaspNumber]) -> String {
    let parts: Vec<String> = v.iter().map(|n| n.0.to_string()).collect();
    if parts.is_empty() {
        "-".into()
    } else {
        parts.join(",")
    }
}

/// Connects if needed, advances one tick and moves one message.
fn exchange(net: &mut Network, from: &NodeId, to: &NodeId, body: Message) -> Result<Message, NetError> {
    let ch = net.connect(from, to)?;
    net.advance(1);
    net.transfer(ch, from, body)
}

/// Drives a wallet device across a secure channel: attestation
/// challenges and evidence travel as messages.
struct DeviceRelay<'a> {
    net: &'a mut Network,
    device: &'a mut WalletDevice,
    channel: ChannelId,
    verifier: NodeId,
    holder: NodeId,
}

impl DeviceAccess for DeviceRelay<'_> {
    fn device_id(&self) -> String {
        self.device.device_id().to_string()
    }

    fn attestation_public_key(&self) -> crypto::PublicKey {
        self.device.attestation_public_key()
    }

    fn attest(&mut self, nonce: [u8; 32], now: Tick) -> Result<AttestationEvidence, WalletError> {
        let delivered = self
            .net
            .transfer(self.channel, &self.verifier, Message::AttestationChallenge { nonce })
            .map_err(|_| WalletError::AttestationRefused)?;
        let Message::AttestationChallenge { nonce } = delivered else {
            return Err(WalletError::AttestationRefused);
        };
        let reply = match self.device.attest(nonce, now) {
            Ok(ev) => Message::Evidence(ev),
            Err(_) => Message::AttestationRefused,
        };
        match self.net.transfer(self.channel, &self.holder, reply) {
            Ok(Message::Evidence(ev)) => Ok(ev),
            _ => Err(WalletError::AttestationRefused),
        }
    }

    fn generate_key(&mut self, migratable: bool) -> u64 {
        self.device.generate_key(migratable)
    }

    fn public_key(&self, handle: u64) -> Result<crypto::PublicKey, WalletError> {
        self.device.public_key(handle)
    }

    fn sign_transfer(&self, tx: &mut LedgerTx, handles: &[u64]) -> Result<(), WalletError> {
        self.device.sign_transfer(tx, handles)
    }

    fn erase_key(&mut self, handle: u64) -> Result<(), WalletError> {
        self.device.erase_key(handle)
    }
}

impl Simulation {
    fn set_trace_header(&mut self, name: ScenarioName) {
        let seed = self.seed;
        let t = self.net.trace_mut();
        t.scenario = name.to_string();
        t.seed = seed;
    }

    /// What each VASP's resolver should answer once federation has
    /// converged: every locally registered identifier mapped to its holders.
    pub fn ground_truth(&self) -> BTreeMap<CustomerIdentifier, BTreeSet<VaspNumber>> {
        let mut out: BTreeMap<CustomerIdentifier, BTreeSet<VaspNumber>> = BTreeMap::new();
        for v in self.vasps.values() {
            for id in v.resolver.table().local_identifiers() {
                out.entry(id).or_default().insert(v.number);
            }
        }
        out
    }

    /// One resolver's answers for every identifier it knows about.
    pub fn resolver_view(&self, n: VaspNumber) -> BTreeMap<CustomerIdentifier, BTreeSet<VaspNumber>> {
        let r = &self.vasps[&n].resolver;
        let mut ids: BTreeSet<CustomerIdentifier> = r.table().local_identifiers();
        ids.extend(r.table().remote_view().into_keys());
        ids.into_iter()
            .map(|id| {
                let holders = r.resolve(&id).into_iter().collect();
                (id, holders)
            })
            .collect()
    }

    pub fn converged(&self) -> bool {
        let truth = self.ground_truth();
        self.vasps.keys().all(|&n| self.resolver_view(n) == truth)
    }

    /// Registers a new identifier for an existing customer.
    pub fn register_identifier(
        &mut self,
        vasp: VaspNumber,
        customer_id: &str,
        identifier: CustomerIdentifier,
    ) -> Result<(), SimError> {
        let idp = identifier.domain().and_then(|d| self.idps.get(d));
        let actor = self
            .vasps
            .get_mut(&vasp)
            .ok_or_else(|| SimError::Setup(format!("no VASP {vasp}")))?;
        actor
            .resolver
            .register_identifier(customer_id, identifier, idp)
            .map_err(|e| SimError::Setup(e.to_string()))
    }

    /// Full federation from every VASP's current advertisement.
    pub fn federate(&mut self) -> FederationOutcome {
        let all: Vec<VaspNumber> = self.vasps.keys().copied().collect();
        self.federate_from(&all)
    }

    /// Synchronous flooding rounds. The listed VASPs publish a fresh
    /// advertisement; every advertisement a resolver newly applies is
    /// forwarded to its neighbours in the next round.
    pub fn federate_from(&mut self, origins: &[VaspNumber]) -> FederationOutcome {
        let neighbours = self.config.neighbours();
        let mut pending: BTreeMap<VaspNumber, Vec<AdvertisementBundle>> = BTreeMap::new();
        for n in origins {
            let Some(actor) = self.vasps.get_mut(n) else { continue };
            let advertisement = actor.resolver.build_advertisement(&actor.claims_key);
            let digest = crypto::hash_value(&advertisement);
            pending.entry(*n).or_default().push(AdvertisementBundle {
                advertisement,
                identity_cert: actor.identity_cert.clone(),
                claims_cert: actor.claims_cert.clone(),
            });
            self.net
                .record(&vasp_node(*n).0, "federation.advertised", Some(digest), "");
        }
        let mut outcome = FederationOutcome {
            rounds: 0,
            converged_at: self.converged().then_some(0),
            applied_per_round: Vec::new(),
        };
        while pending.values().any(|b| !b.is_empty()) {
            outcome.rounds += 1;
            self.net.advance(1);
            let mut next: BTreeMap<VaspNumber, Vec<AdvertisementBundle>> = BTreeMap::new();
            let mut applied = 0;
            for (from, bundles) in std::mem::take(&mut pending) {
                for to in neighbours.get(&from).into_iter().flatten() {
                    let (a, b) = (vasp_node(from), vasp_node(*to));
                    let Ok(ch) = self.net.connect(&a, &b) else { continue };
                    for bundle in &bundles {
                        let Ok(Message::Advertisement(got)) =
                            self.net.transfer(ch, &a, Message::Advertisement(bundle.clone()))
                        else {
                            continue;
                        };
                        let now = self.net.now();
                        let trust = self.net.trust_anchor().clone();
                        let Some(actor) = self.vasps.get_mut(to) else { continue };
                        let result = actor.resolver.merge_advertisement(&got, &trust, now);
                        if result == MergeOutcome::Applied {
                            applied += 1;
                            next.entry(*to).or_default().push(got);
                        }
                    }
                }
            }
            outcome.applied_per_round.push(applied);
            pending = next;
            let done = self.converged();
            if done && outcome.converged_at.is_none() {
                outcome.converged_at = Some(outcome.rounds);
            }
            self.net.record(
                "federation",
                "federation.round",
                None,
                format!("round={} applied={applied} converged={done}", outcome.rounds),
            );
        }
        outcome
    }

    /// Looks `identifier` up on behalf of `origin`, asking its first
    /// federation neighbour or its own resolver when it has none.
    fn lookup(&mut self, origin: VaspNumber, identifier: &CustomerIdentifier) -> Result<Vec<VaspNumber>, String> {
        let responder = self
            .config
            .neighbours()
            .get(&origin)
            .and_then(|s| s.iter().next().copied())
            .unwrap_or(origin);
        let now = self.net.now();
        let caller_cert = self.vasps[&origin].identity_cert.clone();
        if responder == origin {
            let trust = self.net.trust_anchor().clone();
            let r = self.vasps[&origin]
                .resolver
                .lookup(identifier, &caller_cert, &trust, now)
                .map_err(|e| e.to_string())?;
            return Ok(r.vasp_numbers);
        }
        let (a, b) = (vasp_node(origin), vasp_node(responder));
        let request = Message::LookupRequest {
            identifier: identifier.clone(),
        };
        let Message::LookupRequest { identifier } = exchange(&mut self.net, &a, &b, request).map_err(|e| e.to_string())?
        else {
            return Err("unexpected message".into());
        };
        let trust = self.net.trust_anchor().clone();
        let response = self.vasps[&responder]
            .resolver
            .lookup(&identifier, &caller_cert, &trust, self.net.now())
            .map_err(|e| e.to_string())?;
        match exchange(&mut self.net, &b, &a, Message::LookupResponse(response)).map_err(|e| e.to_string())? {
            Message::LookupResponse(r) => Ok(r.vasp_numbers),
            _ => Err("unexpected message".into()),
        }
    }

    fn halt(&mut self, actor: &NodeId, reason: String) -> TransferOutcome {
        self.net.record(&actor.0, "transfer.refused", None, format!("reason={reason}"));
        TransferOutcome::Halted { reason }
    }

    /// The full originator-to-beneficiary flow for one transfer.
    pub fn travel_rule_transfer(
        &mut self,
        originator: &str,
        identifier: &CustomerIdentifier,
        amount: u64,
    ) -> Result<TransferOutcome, SimError> {
        let orig = self
            .home_vasp(originator)
            .ok_or_else(|| SimError::Setup(format!("unknown originator {originator}")))?;
        let orig_node = vasp_node(orig);

        let candidates = match self.lookup(orig, identifier) {
            Ok(c) => c,
            Err(e) => return Ok(self.halt(&orig_node, format!("lookup_failed:{}", e.replace(' ', "_")))),
        };
        let event = match candidates.len() {
            0 => "lookup.miss",
            1 => "lookup.hit",
            _ => "lookup.ambiguous",
        };
        self.net.record(
            &orig_node.0,
            event,
            None,
            format!("identifier={identifier} vasps={}", vasp_list(&candidates)),
        );
        let ben = match candidates.as_slice() {
            [] => return Ok(self.halt(&orig_node, "no_beneficiary_vasp".into())),
            [one] if *one == orig => return Ok(self.halt(&orig_node, "same_vasp".into())),
            [one] => *one,
            _ => return Ok(self.halt(&orig_node, "ambiguous_identifier".into())),
        };
        let ben_node = vasp_node(ben);

        let inquiry = Message::BeneficiaryInquiry {
            identifier: identifier.clone(),
            amount,
        };
        let inquiry = match exchange(&mut self.net, &orig_node, &ben_node, inquiry) {
            Ok(m) => m,
            Err(e) => return Ok(self.halt(&orig_node, format!("channel:{}", e.to_string().replace(' ', "_")))),
        };
        let Message::BeneficiaryInquiry { identifier: asked, .. } = inquiry else {
            return Err(SimError::Setup("unexpected message".into()));
        };
        let ben_actor = &self.vasps[&ben];
        let holders = ben_actor.resolver.local_customers(&asked);
        let reply = match holders.as_slice() {
            [one] => {
                let record = ben_actor.compliance.customer(one).expect("registered customer");
                Message::BeneficiaryDetails {
                    name: record.legal_name.clone(),
                    account: one.clone(),
                    deposit_key: ben_actor.account_key(one).expect("account exists"),
                }
            }
            _ => Message::BeneficiaryUnknown { identifier: asked },
        };
        let Message::BeneficiaryDetails {
            name,
            account,
            deposit_key,
        } = exchange(&mut self.net, &ben_node, &orig_node, reply)?
        else {
            return Ok(self.halt(&orig_node, "beneficiary_unknown".into()));
        };

        let now = self.net.now();
        let o = &self.vasps[&orig];
        let record = o.compliance.customer(originator).expect("home customer").clone();
        let payload = match build_payload(
            &record,
            orig,
            &BeneficiaryInfo {
                name,
                account: account.clone(),
                vasp: ben,
            },
            amount,
            CorrelationHint::MemoTag {
                beneficiary_key: deposit_key,
            },
        ) {
            Ok(p) => p,
            Err(e) => return Ok(self.halt(&orig_node, format!("payload:{}", e.to_string().replace(' ', "_")))),
        };
        let trust = self.net.trust_anchor().clone();
        let signed = sign_payload(&o.claims_key, &o.claims_cert, &o.identity_cert, payload, &trust, now)
            .map_err(|e| SimError::Setup(e.to_string()))?;
        let orig_claims_cert = o.claims_cert.clone();
        let payload_id = signed.payload.payload_id;
        self.net.record(
            &orig_node.0,
            "travel_rule.payload.signed",
            Some(payload_id),
            format!("beneficiary_vasp={ben} amount={amount}"),
        );

        let transfer = Message::TravelRuleTransfer {
            signed,
            signer_cert: orig_claims_cert,
        };
        let Message::TravelRuleTransfer { signed, signer_cert } = exchange(&mut self.net, &orig_node, &ben_node, transfer)?
        else {
            return Err(SimError::Setup("unexpected message".into()));
        };

        // Beneficiary side.
        let now = self.net.now();
        let orig_identity = self.net.node(&orig_node).expect("node").cert.clone();
        let cert_ok = trust
            .validate(
                CertificateRef::Signing {
                    cert: &signer_cert,
                    identity: Some(&orig_identity),
                },
                now,
            )
            .is_valid();
        let sig_ok = verify_signed_payload(&signed, &signer_cert);
        let report = validate_payload(&signed.payload);
        let addressed = signed.payload.beneficiary_vasp == ben;
        self.net.record(
            &ben_node.0,
            "travel_rule.payload.validated",
            Some(payload_id),
            format!(
                "present={}/5 cert_ok={cert_ok} signature_ok={sig_ok} addressed={addressed}",
                report.present_count()
            ),
        );
        let refusal = if !(cert_ok && sig_ok && addressed) {
            Some("payload_not_authentic")
        } else if !report.pass() {
            Some("payload_incomplete")
        } else {
            None
        };
        if let Some(reason) = refusal {
            let reject = Message::TravelRuleReject {
                payload_id,
                reason: reason.into(),
            };
            exchange(&mut self.net, &ben_node, &orig_node, reject)?;
            return Ok(self.halt(&orig_node, reason.into()));
        }
        let b = self.vasps.get_mut(&ben).expect("beneficiary");
        b.compliance.retain_payload(signed.payload.clone());
        let ack = sign_payload(&b.claims_key, &b.claims_cert, &b.identity_cert, signed.payload.clone(), &trust, now)
            .map_err(|e| SimError::Setup(e.to_string()))?;
        let ack = Message::TravelRuleAck {
            signed: ack,
            signer_cert: b.claims_cert.clone(),
        };
        let Message::TravelRuleAck {
            signed: ack,
            signer_cert: ack_cert,
        } = exchange(&mut self.net, &ben_node, &orig_node, ack)?
        else {
            return Err(SimError::Setup("unexpected message".into()));
        };

        // Originator checks the beneficiary's signature over the same payload.
        let now = self.net.now();
        let ben_identity = self.net.node(&ben_node).expect("node").cert.clone();
        let ack_report = validate_payload(&ack.payload);
        let ack_ok = ack.payload == signed.payload
            && ack_report.pass()
            && verify_signed_payload(&ack, &ack_cert)
            && trust
                .validate(
                    CertificateRef::Signing {
                        cert: &ack_cert,
                        identity: Some(&ben_identity),
                    },
                    now,
                )
                .is_valid();
        self.net.record(
            &orig_node.0,
            "travel_rule.ack.validated",
            Some(payload_id),
            format!("present={}/5 valid={ack_ok}", ack_report.present_count()),
        );
        if !ack_ok {
            return Ok(self.halt(&orig_node, "ack_invalid".into()));
        }

        // Both consents gate the ledger transfer.
        let now = self.net.now();
        let send_ok =
            self.vasps[&orig]
                .compliance
                .check_consent(originator, ConsentDirection::SendInfoToCounterparty, ben, now);
        self.net.record(
            &orig_node.0,
            "consent.checked",
            None,
            format!("customer={originator} direction=send counterparty={ben} granted={send_ok}"),
        );
        let recv_ok = self.vasps[&ben]
            .compliance
            .check_consent(&account, ConsentDirection::ReceiveAssets, orig, now);
        self.net.record(
            &ben_node.0,
            "consent.checked",
            None,
            format!("customer={account} direction=receive counterparty={orig} granted={recv_ok}"),
        );
        if !send_ok {
            return Ok(self.halt(&orig_node, "originator_consent_missing".into()));
        }
        if !recv_ok {
            return Ok(self.halt(&orig_node, "beneficiary_consent_missing".into()));
        }
        self.vasps
            .get_mut(&orig)
            .expect("originator")
            .compliance
            .retain_payload(signed.payload.clone());

        let source = self.vasps[&orig].accounts[originator].clone();
        let tx = LedgerTx::new_signed(
            vec![Leg {
                key: source.public_key,
                amount,
            }],
            vec![Leg {
                key: deposit_key,
                amount,
            }],
            Some(signed.payload.memo_tag()),
            &[&source],
        );
        let tx_id = match self.ledger.submit_transfer(tx) {
            Ok(id) => id,
            Err(e) => return Ok(self.halt(&orig_node, format!("ledger:{}", e.to_string().replace(' ', "_")))),
        };
        self.net
            .record(&orig_node.0, "ledger.submitted", Some(tx_id), format!("amount={amount}"));
        self.net.advance(1);
        let block = self.ledger.confirm_block();
        self.net.record(
            "ledger",
            "ledger.confirmed",
            Some(block.block_hash),
            format!("height={} txs={}", block.height, block.tx_ids.len()),
        );

        let height = self.ledger.height();
        let b = self.vasps.get_mut(&ben).expect("beneficiary");
        let correlation = match b.compliance.correlate(&signed.payload, &self.ledger, 0..=height) {
            Ok(c) => {
                self.net.record(
                    &ben_node.0,
                    "correlation.recorded",
                    Some(c.tx_id),
                    format!("payload={} output={} height={}", payload_id.to_hex(), c.output_index, c.matched_at_height),
                );
                Some(c)
            }
            Err(e) => {
                self.net
                    .record(&ben_node.0, "correlation.failed", Some(payload_id), format!("error={e:?}"));
                None
            }
        };
        Ok(TransferOutcome::Completed {
            payload_id,
            tx_id,
            correlation,
        })
    }
}

fn before(t: &ScenarioTrace, a: &str, b: &str) -> bool {
    matches!((t.position(a), t.position(b)), (Some(x), Some(y)) if x < y)
}

fn last_before(t: &ScenarioTrace, a: &str, b: &str) -> bool {
    let last_a = t.events.iter().rposition(|e| e.event == a);
    matches!((last_a, t.position(b)), (Some(x), Some(y)) if x < y)
}

fn scenario_s1(sim: &mut Simulation) -> Result<ScenarioTrace, SimError> {
    let sc = sim.config.scenario.clone();
    let originator = sc.originator.clone().ok_or_else(|| SimError::Setup("scenario.originator missing".into()))?;
    let raw = sc.beneficiary.clone().ok_or_else(|| SimError::Setup("scenario.beneficiary missing".into()))?;
    let identifier = parse_identifier(&raw).map_err(|e| SimError::Setup(e.to_string()))?;
    let orig = sim.home_vasp(&originator).ok_or_else(|| SimError::Setup("originator has no VASP".into()))?;
    let source = sim.vasps[&orig].account_key(&originator).expect("account");
    let before_balance = sim.ledger.balance(&source);
    let supply = sim.ledger.total_supply();

    let fed = sim.federate();
    let outcome = sim.travel_rule_transfer(&originator, &identifier, sc.amount)?;
    let mut t = sim.net.take_trace();
    t.assert(
        "federation_converged",
        fed.converged_at.is_some(),
        format!("rounds={} converged_at={:?}", fed.rounds, fed.converged_at),
    );
    t.assert("lookup_single_vasp", t.count("lookup.hit") == 1, "");
    let validated = t
        .events_named("travel_rule.payload.validated")
        .any(|e| e.detail.starts_with("present=5/5 cert_ok=true signature_ok=true addressed=true"));
    t.assert("payload_complete_and_authentic", validated, "");
    let ack_ok = t
        .events_named("travel_rule.ack.validated")
        .any(|e| e.detail == "present=5/5 valid=true");
    t.assert("beneficiary_signature_verified", ack_ok, "");
    let consents = t
        .events_named("consent.checked")
        .filter(|e| e.detail.ends_with("granted=true"))
        .count();
    t.assert("consent_checked_both_sides", consents == 2, "");
    t.assert(
        "exchange_then_consent_then_ledger",
        before(&t, "lookup.hit", "travel_rule.payload.validated")
            && before(&t, "travel_rule.payload.validated", "travel_rule.ack.validated")
            && before(&t, "travel_rule.ack.validated", "consent.checked")
            && last_before(&t, "consent.checked", "ledger.submitted")
            && before(&t, "ledger.submitted", "ledger.confirmed")
            && before(&t, "ledger.confirmed", "correlation.recorded"),
        "",
    );
    t.assert("one_correlation", t.count("correlation.recorded") == 1, "");
    let detail = format!("{outcome:?}");
    match outcome {
        TransferOutcome::Completed {
            tx_id, correlation, ..
        } => {
            t.assert("ledger_confirmed", sim.ledger.query_tx(&tx_id).is_ok_and(|tx| tx.is_confirmed()), "");
            t.assert(
                "correlated_to_transfer",
                correlation.is_some_and(|c| c.tx_id == tx_id),
                format!("tx={}", tx_id.to_hex()),
            );
            t.assert(
                "balances_moved",
                sim.ledger.balance(&source) + sc.amount == before_balance && sim.ledger.total_supply() == supply,
                "",
            );
        }
        TransferOutcome::Halted { reason } => {
            t.assert("transfer_completed", false, format!("reason={reason}"));
        }
    }
    let _ = detail;
    Ok(t)
}

fn request_token(
    sim: &mut Simulation,
    requester: VaspNumber,
    attributes: &BTreeSet<String>,
    purpose: &str,
) -> Result<AuthorizationDecision, SimError> {
    let cw = sim.claims.as_ref().ok_or_else(|| SimError::Setup("no claims section".into()))?;
    let (vasp, auth) = (vasp_node(requester), cw.auth_node.clone());
    let owner = cw.owner.clone();
    let request = Message::AuthorizationRequest {
        owner,
        attributes: attributes.clone(),
        purpose: purpose.to_string(),
    };
    let Message::AuthorizationRequest {
        attributes, purpose, ..
    } = exchange(&mut sim.net, &vasp, &auth, request)?
    else {
        return Err(SimError::Setup("unexpected message".into()));
    };
    let caller = sim.net.node(&vasp).expect("node").cert.clone();
    let trust = sim.net.trust_anchor().clone();
    let now = sim.net.now();
    let cw = sim.claims.as_mut().expect("checked");
    let decision = cw
        .auth
        .request_authorization(&cw.store, &caller, &trust, &attributes, &purpose, now)
        .map_err(|e| SimError::Setup(e.to_string()))?;
    let reply = match &decision {
        AuthorizationDecision::Granted(t) => Message::AuthorizationGranted(t.clone()),
        AuthorizationDecision::Denied(r) => Message::AuthorizationDenied(*r),
    };
    let delivered = exchange(&mut sim.net, &auth, &vasp, reply)?;
    let (event, detail) = match &delivered {
        Message::AuthorizationGranted(t) => (
            "claims.token.issued",
            format!("vasp={requester} attributes={} expires_at={}", t.permitted_attributes.len(), t.expires_at),
        ),
        Message::AuthorizationDenied(r) => ("claims.authorization.denied", format!("vasp={requester} reason={r:?}")),
        _ => return Err(SimError::Setup("unexpected message".into())),
    };
    let digest = decision.token().map(|t| t.token_id);
    sim.net.record(&vasp.0, event, digest, detail);
    Ok(decision)
}

/// Presents a token to the claims store. Returns the released claims and
/// whether the receipt round trip verified.
fn fetch(
    sim: &mut Simulation,
    requester: VaspNumber,
    token: &AuthorizationToken,
) -> Result<Option<(BTreeSet<String>, bool)>, SimError> {
    let cw = sim.claims.as_ref().expect("claims");
    let (vasp, store_node) = (vasp_node(requester), cw.store_node.clone());
    let Message::ClaimsFetch(token) = exchange(&mut sim.net, &vasp, &store_node, Message::ClaimsFetch(token.clone()))?
    else {
        return Err(SimError::Setup("unexpected message".into()));
    };
    let now = sim.net.now();
    let cw = sim.claims.as_mut().expect("claims");
    let reply = match cw.store.fetch_claims(&token, now) {
        Ok((claims, receipt)) => Message::ClaimsRelease { claims, receipt },
        Err(e) => Message::ClaimsRefused {
            reason: format!("{e:?}"),
        },
    };
    match exchange(&mut sim.net, &store_node, &vasp, reply)? {
        Message::ClaimsRelease { claims, receipt } => {
            let cw = sim.claims.as_ref().expect("claims");
            let provider = cw.provider_key.public_key;
            let store_pk = cw.store.public_key();
            let now = sim.net.now();
            let claims_ok = claims.iter().all(|c| verify_claim(c, &provider, now) == ClaimVerdict::Valid);
            let receipt_ok = verify_receipt(&receipt, &store_pk);
            let released: BTreeSet<String> = claims.iter().map(|c| c.attribute_name.clone()).collect();
            sim.net.record(
                &vasp.0,
                "claims.released",
                Some(receipt.receipt_id),
                format!("count={} claims_valid={claims_ok} receipt_valid={receipt_ok}", claims.len()),
            );
            let v = &sim.vasps[&requester];
            let ack = countersign_receipt(&receipt, &v.claims_key, now);
            let vasp_pk = v.claims_cert.subject_public_key;
            let Message::ReceiptAck(ack) = exchange(&mut sim.net, &vasp, &store_node, Message::ReceiptAck(ack))? else {
                return Err(SimError::Setup("unexpected message".into()));
            };
            let ack_ok = verify_acknowledgement(&ack, &vasp_pk) && ack.receipt_id == receipt.receipt_id;
            sim.net.record(
                &store_node.0,
                "claims.receipt.acknowledged",
                Some(ack.receipt_id),
                format!("valid={ack_ok}"),
            );
            Ok(Some((released, claims_ok && receipt_ok && ack_ok)))
        }
        Message::ClaimsRefused { reason } => {
            sim.net
                .record(&vasp.0, "claims.fetch.refused", Some(token.token_id), format!("reason={reason}"));
            Ok(None)
        }
        _ => Err(SimError::Setup("unexpected message".into())),
    }
}

fn scenario_s2(sim: &mut Simulation) -> Result<ScenarioTrace, SimError> {
    let cfg = sim
        .config
        .claims
        .clone()
        .ok_or_else(|| SimError::Setup("claims section missing".into()))?;
    let readable: BTreeSet<String> = cfg.readable.iter().cloned().collect();
    let requester = VaspNumber(cfg.requester);
    let now = sim.net.now();
    let policy = AccessPolicy {
        owner_customer_ref: cfg.owner.clone(),
        allowed_vasp_numbers: cfg.allowed_vasps.iter().copied().map(VaspNumber).collect(),
        readable_attributes: readable.clone(),
        usage_purpose: cfg.purpose.clone(),
        active: true,
    };
    let cw = sim.claims.as_mut().expect("claims");
    cw.store
        .set_policy(&cfg.owner, policy, now)
        .map_err(|e| SimError::Setup(e.to_string()))?;
    let store_node = cw.store_node.clone();
    sim.net.record(&store_node.0, "claims.policy.set", None, format!("owner={}", cfg.owner));

    // Allowed requester, within scope.
    let granted = request_token(sim, requester, &readable, &cfg.purpose)?;
    let mut fetches = 0;
    let mut released_ok = false;
    let mut round_trip_ok = false;
    if let AuthorizationDecision::Granted(token) = &granted {
        if let Some((released, ok)) = fetch(sim, requester, token)? {
            fetches += 1;
            round_trip_ok = ok;
            released_ok = !released.is_empty()
                && released.is_subset(&token.permitted_attributes)
                && token.permitted_attributes.is_subset(&readable);
        }
    }

    let denied = match cfg.denied_requester {
        Some(d) => Some(request_token(sim, VaspNumber(d), &readable, &cfg.purpose)?),
        None => None,
    };

    let mut wider = readable.clone();
    wider.extend(cfg.claims.iter().map(|c| c.attribute.clone()));
    wider.insert("undisclosed_attribute".into());
    let scope = request_token(sim, requester, &wider, &cfg.purpose)?;

    // A token presented after its lifetime.
    let late = request_token(sim, requester, &readable, &cfg.purpose)?;
    let expired_refused = match late.token() {
        Some(token) => {
            let wait = token.expires_at.saturating_sub(sim.net.now());
            sim.net.advance(wait);
            fetch(sim, requester, token)?.is_none()
        }
        None => false,
    };

    // A token presented after the owner withdraws consent.
    let last = request_token(sim, requester, &readable, &cfg.purpose)?;
    let now = sim.net.now();
    let cw = sim.claims.as_mut().expect("claims");
    cw.store
        .revoke_consent(&cfg.owner, now)
        .map_err(|e| SimError::Setup(e.to_string()))?;
    sim.net
        .record(&store_node.0, "claims.consent.withdrawn", None, format!("owner={}", cfg.owner));
    let withdrawn_refused = match last.token() {
        Some(token) => fetch(sim, requester, token)?.is_none(),
        None => false,
    };
    let after = request_token(sim, requester, &readable, &cfg.purpose)?;

    let receipts = sim.claims.as_ref().expect("claims").store.receipts().len();
    let mut t = sim.net.take_trace();
    t.assert("token_granted_to_allowed_vasp", granted.token().is_some(), "");
    t.assert(
        "release_within_token_within_policy",
        released_ok,
        "released subset of token attributes subset of policy",
    );
    t.assert("receipt_round_trip_verified", round_trip_ok, "");
    t.assert("one_receipt_per_release", receipts == fetches, format!("receipts={receipts} releases={fetches}"));
    if let Some(d) = denied {
        t.assert(
            "unlisted_vasp_denied",
            d == AuthorizationDecision::Denied(DenialReason::NotAllowed),
            format!("{d:?}"),
        );
    }
    t.assert(
        "scope_exceeded_denied",
        scope == AuthorizationDecision::Denied(DenialReason::ScopeExceeded),
        "",
    );
    t.assert(
        "expired_token_refused",
        expired_refused && t.events_named("claims.fetch.refused").any(|e| e.detail == "reason=TokenExpired"),
        "",
    );
    t.assert(
        "withdrawn_consent_refused",
        withdrawn_refused && t.events_named("claims.fetch.refused").any(|e| e.detail == "reason=ConsentWithdrawn"),
        "",
    );
    t.assert(
        "no_policy_after_withdrawal",
        after == AuthorizationDecision::Denied(DenialReason::NoActivePolicy),
        "",
    );
    Ok(t)
}

/// Longest shortest path between any two VASPs, or `None` when the
/// federation graph is disconnected.
pub fn federation_diameter(neighbours: &BTreeMap<VaspNumber, BTreeSet<VaspNumber>>, nodes: &[VaspNumber]) -> Option<u64> {
    let mut diameter = 0;
    for &start in nodes {
        let mut dist: BTreeMap<VaspNumber, u64> = BTreeMap::from([(start, 0)]);
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for m in neighbours.get(&n).into_iter().flatten() {
                if !dist.contains_key(m) {
                    dist.insert(*m, dist[&n] + 1);
                    queue.push_back(*m);
                }
            }
        }
        if dist.len() < nodes.len() {
            return None;
        }
        diameter = diameter.max(dist.values().copied().max().unwrap_or(0));
    }
    Some(diameter)
}

fn scenario_s3(sim: &mut Simulation) -> Result<ScenarioTrace, SimError> {
    let nodes: Vec<VaspNumber> = sim.vasps.keys().copied().collect();
    let diameter = federation_diameter(&sim.config.neighbours(), &nodes);
    let fed = sim.federate();
    let truth = sim.config.identifier_owners();
    let matching = nodes.iter().filter(|&&n| sim.resolver_view(n) == truth).count();
    sim.net.record(
        "federation",
        "federation.finished",
        None,
        format!(
            "rounds={} converged_at={} diameter={}",
            fed.rounds,
            fed.converged_at.map_or("-".into(), |r| r.to_string()),
            diameter.map_or("-".into(), |d| d.to_string())
        ),
    );
    let mut t = sim.net.take_trace();
    t.assert(
        "federation_graph_connected",
        diameter.is_some(),
        format!("diameter={diameter:?}"),
    );
    t.assert(
        "converged_within_diameter",
        matches!((fed.converged_at, diameter), (Some(c), Some(d)) if c <= d.max(1)),
        format!("converged_at={:?} diameter={diameter:?}", fed.converged_at),
    );
    t.assert(
        "every_resolver_matches_ground_truth",
        matching == nodes.len(),
        format!("{matching}/{}", nodes.len()),
    );
    Ok(t)
}

fn scenario_s4(sim: &mut Simulation) -> Result<ScenarioTrace, SimError> {
    let sc = sim.config.scenario.clone();
    let customer = sc
        .wallet_customer
        .clone()
        .ok_or_else(|| SimError::Setup("scenario.wallet_customer missing".into()))?;
    let home = sim.home_vasp(&customer).ok_or_else(|| SimError::Setup("wallet customer has no VASP".into()))?;
    if !sim.devices.contains_key(&customer) {
        return Err(SimError::Setup(format!("customer {customer} has no wallet")));
    }
    let (vnode, cnode) = (vasp_node(home), customer_node(&customer));
    let channel = sim.net.connect(&vnode, &cnode)?;

    let Simulation {
        net,
        vasps,
        ledger,
        registry,
        devices,
        ..
    } = &mut *sim;
    let actor = vasps.get_mut(&home).expect("home");
    let device = devices.get_mut(&customer).expect("device");
    net.advance(1);
    let now = net.now();
    let mut relay = DeviceRelay {
        net,
        device,
        channel,
        verifier: vnode.clone(),
        holder: cnode.clone(),
    };
    let onboard = actor
        .supervisor
        .onboard_customer(&customer, &mut relay, ledger, registry, now);
    let onboard = match onboard {
        Ok(r) => r,
        Err(e) => {
            net_record(sim, &vnode, "wallet.onboard", None, format!("error={e:?}"));
            let mut t = sim.net.take_trace();
            t.assert("onboard_accepted", false, e.to_string());
            return Ok(t);
        }
    };
    sim.net.record(
        &vnode.0,
        "wallet.onboard",
        None,
        format!("verdict={:?} findings={}", onboard.verdict, onboard.evidence_verdict.findings.len()),
    );
    let accepted = onboard.verdict == BoardingVerdict::Accepted;
    let mut funded = 0;
    let mut wallet_key = None;
    if let Some(kt) = &onboard.key_transition {
        wallet_key = Some(kt.new_public_key);
        let account = sim.vasps[&home].accounts[&customer].clone();
        funded = sc.amount.min(sim.ledger.available(&account.public_key));
        if funded > 0 {
            let tx = LedgerTx::new_signed(
                vec![Leg {
                    key: account.public_key,
                    amount: funded,
                }],
                vec![Leg {
                    key: kt.new_public_key,
                    amount: funded,
                }],
                None,
                &[&account],
            );
            let id = sim.ledger.submit_transfer(tx).map_err(|e| SimError::Setup(e.to_string()))?;
            sim.ledger.confirm_block();
            sim.net
                .record(&vnode.0, "wallet.funded", Some(id), format!("amount={funded}"));
        }
    }

    let mut checkpoints = Vec::new();
    let mut audit_ok = None;
    for step in 1..=sc.steps {
        sim.net.advance(1);
        if accepted && step % CHECKPOINT_INTERVAL == 0 {
            let Simulation {
                net, vasps, devices, ..
            } = &mut *sim;
            let now = net.now();
            let mut relay = DeviceRelay {
                net,
                device: devices.get_mut(&customer).expect("device"),
                channel,
                verifier: vnode.clone(),
                holder: cnode.clone(),
            };
            let cp = vasps
                .get_mut(&home)
                .expect("home")
                .supervisor
                .checkpoint(&customer, &mut relay, now);
            let passed = cp.as_ref().is_ok_and(|c| c.passed);
            let digest = cp.as_ref().ok().map(|c| c.evidence_digest);
            sim.net
                .record(&vnode.0, "wallet.checkpoint", digest, format!("step={step} passed={passed}"));
            checkpoints.push(passed);
        }
        if step == sc.steps / 2 {
            audit_ok = Some(insurer_audit(sim, &customer)?);
        }
    }

    if sc.skip_erasure {
        sim.devices.get_mut(&customer).expect("device").set_faults(DeviceFaults {
            skip_erasure: true,
            ..Default::default()
        });
        sim.net.record(&cnode.0, "fault.injected", None, "kind=skip_erasure");
    }

    let Simulation {
        net,
        vasps,
        ledger,
        registry,
        devices,
        ..
    } = &mut *sim;
    net.advance(1);
    let now = net.now();
    let mut relay = DeviceRelay {
        net,
        device: devices.get_mut(&customer).expect("device"),
        channel,
        verifier: vnode.clone(),
        holder: cnode.clone(),
    };
    let offboard = if accepted {
        Some(
            vasps
                .get_mut(&home)
                .expect("home")
                .supervisor
                .offboard_customer(&customer, &mut relay, ledger, registry, now),
        )
    } else {
        None
    };
    let device_id = sim.devices[&customer].device_id().to_string();
    let mut t_offboard_ok = false;
    let mut erasure_proven = false;
    let mut handoff_ok = false;
    let mut detected = false;
    match &offboard {
        Some(Ok(report)) => {
            let block = sim.ledger.confirm_block();
            erasure_proven = report.erasure_is_proven();
            t_offboard_ok = report.verdict == BoardingVerdict::Accepted;
            let kt = report.key_transition.as_ref().expect("transition");
            handoff_ok = sim.ledger.balance(&kt.new_public_key) == funded
                && wallet_key.is_some_and(|k| sim.ledger.balance(&k) == 0);
            sim.net.record(
                &vnode.0,
                "wallet.offboard",
                report.erasure_evidence.as_ref().map(crypto::hash_value),
                format!(
                    "verdict={:?} handoffs={} height={}",
                    report.verdict,
                    report.handoff_transfers.len(),
                    block.height
                ),
            );
        }
        Some(Err(BoardingError::ErasureNotProven { handles, .. })) => {
            detected = true;
            sim.ledger.confirm_block();
            sim.net.record(
                &vnode.0,
                "wallet.offboard.erasure_not_proven",
                None,
                format!("live_handles={handles:?}"),
            );
        }
        Some(Err(e)) => {
            sim.net.record(&vnode.0, "wallet.offboard.failed", None, format!("error={e:?}"));
        }
        None => {}
    }
    let status = sim.registry.status(&device_id);

    let mut t = sim.net.take_trace();
    t.assert("onboard_accepted", accepted, format!("{:?}", onboard.verdict));
    t.assert(
        "funded_supervised_key",
        funded > 0,
        format!("amount={funded}"),
    );
    let expected_cps = if accepted { sc.steps / CHECKPOINT_INTERVAL } else { 0 };
    t.assert(
        "checkpoints_passed",
        checkpoints.len() as u64 == expected_cps && checkpoints.iter().all(|p| *p),
        format!("{}/{expected_cps}", checkpoints.iter().filter(|p| **p).count()),
    );
    if let Some(ok) = audit_ok {
        t.assert("insurer_audit_passed", ok, "");
    }
    if sc.skip_erasure {
        t.assert(
            "unerased_keys_detected",
            detected && status.supervising_vasp_number == Some(home),
            format!("status={status:?}"),
        );
    } else {
        t.assert("offboard_accepted", t_offboard_ok, "");
        t.assert("erasure_proven", erasure_proven, "");
        t.assert("assets_handed_off", handoff_ok, format!("amount={funded}"));
        t.assert(
            "wallet_private_after_offboard",
            status.supervising_vasp_number.is_none(),
            format!("status={status:?}"),
        );
    }
    Ok(t)
}

fn net_record(sim: &mut Simulation, node: &NodeId, event: &str, digest: Option<Digest>, detail: String) {
    sim.net.record(&node.0, event, digest, detail);
}

/// An insurer verifies the device on its own nonce against the union of
/// approved stacks.
fn insurer_audit(sim: &mut Simulation, customer: &str) -> Result<bool, SimError> {
    let insurer = sim.insurer.clone();
    let cnode = customer_node(customer);
    let nonce = sim.net.random_nonce();
    let Message::AttestationChallenge { nonce: got } =
        exchange(&mut sim.net, &insurer, &cnode, Message::AttestationChallenge { nonce })?
    else {
        return Err(SimError::Setup("unexpected message".into()));
    };
    let now = sim.net.now();
    let device = &sim.devices[customer];
    let reply = match device.attest(got, now) {
        Ok(ev) => Message::Evidence(ev),
        Err(_) => Message::AttestationRefused,
    };
    let pk = device.attestation_public_key();
    let ok = match exchange(&mut sim.net, &cnode, &insurer, reply)? {
        Message::Evidence(ev) => verify_evidence(&ev, &nonce, &pk, &sim.insurer_approved).pass(),
        _ => false,
    };
    sim.net.record(&insurer.0, "insurer.audit", None, format!("customer={customer} passed={ok}"));
    Ok(ok)
}

fn scenario_s5(sim: &mut Simulation) -> Result<ScenarioTrace, SimError> {
    let sc = sim.config.scenario.clone();
    let originator = sc.originator.clone().ok_or_else(|| SimError::Setup("scenario.originator missing".into()))?;
    let raw = sc
        .ambiguous_identifier
        .clone()
        .ok_or_else(|| SimError::Setup("scenario.ambiguous_identifier missing".into()))?;
    let identifier = parse_identifier(&raw).map_err(|e| SimError::Setup(e.to_string()))?;
    let height = sim.ledger.height();
    sim.federate();
    let outcome = sim.travel_rule_transfer(&originator, &identifier, sc.amount)?;
    let payloads: usize = sim.vasps.values().map(|v| v.compliance.payloads().len()).sum();
    let mut t = sim.net.take_trace();
    t.assert("lookup_ambiguous", t.count("lookup.ambiguous") == 1, "");
    t.assert(
        "halted_before_payload",
        matches!(&outcome, TransferOutcome::Halted { reason } if reason == "ambiguous_identifier"),
        format!("{outcome:?}"),
    );
    t.assert(
        "no_payload_sent",
        t.count("travel_rule.payload.signed") == 0 && payloads == 0,
        "",
    );
    t.assert(
        "no_ledger_transfer",
        t.count("ledger.submitted") == 0 && sim.ledger.height() == height && sim.ledger.mempool_len() == 0,
        "",
    );
    Ok(t)
}

impl Simulation {
    /// Runs one scenario on this world. The trace is returned whether or
    /// not its assertions hold; channel transcripts stay on `self.net`.
    pub fn run(&mut self, name: ScenarioName) -> Result<ScenarioTrace, SimError> {
        self.set_trace_header(name);
        match name {
            ScenarioName::S1 => scenario_s1(self),
            ScenarioName::S2 => scenario_s2(self),
            ScenarioName::S3 => scenario_s3(self),
            ScenarioName::S4 => scenario_s4(self),
            ScenarioName::S5 => scenario_s5(self),
        }
    }
}

/// Builds a fresh world and runs one scenario. Traces whose assertions
/// fail come back inside [`SimError::ScenarioAssertionFailed`].
pub fn run_scenario(name: ScenarioName, config: &TopologyConfig, seed: Option<u64>) -> Result<ScenarioTrace, SimError> {
    let mut config = config.clone();
    if let Some(s) = seed {
        config.seed = s;
    }
    let trace = Simulation::build(&config)?.run(name)?;
    if trace.passed() {
        Ok(trace)
    } else {
        Err(SimError::ScenarioAssertionFailed { trace: Box::new(trace) })
    }
}
