//! Deterministic network simulator.
//!
//! Every actor holds a consortium identity certificate. Messages only move
//! over channels opened after both endpoints pass certificate validation
//! and prove possession of their certified key. Channels number messages
//! per direction; configured drop, duplicate and reorder faults are
//! recovered by retransmission and sequence-number de-duplication, so each
//! message is delivered exactly once and in order.

mod message;
mod scenarios;
mod trace;
mod world;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{Encode, Writer};
use crate::crypto::{self, Digest, KeyPair};
use crate::pki::{CertificateRef, EvIdentityCertificate, TrustAnchor, ValidationReport};
use crate::types::Tick;

pub use message::{Envelope, Message};
pub use scenarios::{federation_diameter, run_scenario, FederationOutcome, ScenarioName, TransferOutcome};
pub use trace::{summarize, Assertion, ScenarioTrace, TraceEvent, TraceSummary, TRACE_HEADER};
pub use world::{ClaimsWorld, SimError, Simulation, VaspActor};

/// Retransmissions after which a message is delivered regardless of the
/// drop rate.
const MAX_ATTEMPTS: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActorKind {
    Vasp,
    IdentityProvider,
    ClaimsProvider,
    AuthorizationServer,
    ClaimsStore,
    Insurer,
    Customer,
    LedgerNode,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub String);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is partitioned from the network")]
    Partitioned(NodeId),
    #[error("peer {peer} failed authentication: {:?}, possession proven: {possession_ok}", report.verdict)]
    PeerCertInvalid {
        peer: NodeId,
        report: Box<ValidationReport>,
        possession_ok: bool,
    },
    #[error("channel {0:?} is closed")]
    ChannelClosed(ChannelId),
    #[error("{0} is not an endpoint of channel {1:?}")]
    NotAnEndpoint(NodeId, ChannelId),
}

/// Channel faults in events per thousand transmissions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultRates {
    pub drop: u16,
    pub duplicate: u16,
    pub reorder: u16,
}

#[derive(Debug)]
pub struct Node {
    pub id: NodeId,
    pub kind: ActorKind,
    pub cert: EvIdentityCertificate,
    key: KeyPair,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: u8,
    pub seq: u64,
    pub sent_at: Tick,
    pub delivered_at: Option<Tick>,
    /// Canonical envelope bytes.
    pub bytes: Vec<u8>,
    pub body: Message,
}

#[derive(Debug)]
pub struct SecureChannel {
    pub id: ChannelId,
    pub endpoints: [NodeId; 2],
    pub peer_cert_serials: [u64; 2],
    pub established_at: Tick,
    transcript: Vec<TranscriptEntry>,
    next_seq: [u64; 2],
    next_expected: [u64; 2],
    pending: [BTreeMap<u64, Envelope>; 2],
    closed: bool,
}

impl SecureChannel {
    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn direction_from(&self, node: &NodeId) -> Option<u8> {
        if &self.endpoints[0] == node {
            Some(0)
        } else if &self.endpoints[1] == node {
            Some(1)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub channel: ChannelId,
    pub from: NodeId,
    pub to: NodeId,
    pub seq: u64,
    pub body: Message,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub reordered: u64,
    pub discarded_duplicates: u64,
}

#[derive(Debug)]
struct InFlight {
    env: Envelope,
    attempts: u32,
}

/// Nodes, channels and the event loop.
#[derive(Debug)]
pub struct Network {
    nodes: BTreeMap<NodeId, Node>,
    channels: Vec<SecureChannel>,
    queue: VecDeque<InFlight>,
    faults: FaultRates,
    partitioned: BTreeSet<NodeId>,
    rng: ChaCha8Rng,
    trust: TrustAnchor,
    now: Tick,
    stats: NetStats,
    trace: ScenarioTrace,
}

impl Network {
    pub fn new(trust: TrustAnchor, seed: u64, faults: FaultRates) -> Self {
        Self {
            nodes: BTreeMap::new(),
            channels: Vec::new(),
            queue: VecDeque::new(),
            faults,
            partitioned: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            trust,
            now: 0,
            stats: NetStats::default(),
            trace: ScenarioTrace::default(),
        }
    }

    pub fn add_node(&mut self, id: NodeId, kind: ActorKind, cert: EvIdentityCertificate, key: KeyPair) {
        self.nodes.insert(id.clone(), Node { id, kind, cert, key });
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn partition(&mut self, id: NodeId) {
        self.partitioned.insert(id);
    }

    pub fn set_trust_anchor(&mut self, trust: TrustAnchor) {
        self.trust = trust;
    }

    pub fn trust_anchor(&self) -> &TrustAnchor {
        &self.trust
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn advance(&mut self, ticks: Tick) {
        self.now += ticks;
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn channels(&self) -> &[SecureChannel] {
        &self.channels
    }

    pub fn channel(&self, id: ChannelId) -> &SecureChannel {
        &self.channels[id.0 as usize]
    }

    pub fn trace_mut(&mut self) -> &mut ScenarioTrace {
        &mut self.trace
    }

    pub fn take_trace(&mut self) -> ScenarioTrace {
        std::mem::take(&mut self.trace)
    }

    pub fn record(&mut self, actor: &str, event: &str, digest: Option<Digest>, detail: impl Into<String>) {
        let now = self.now;
        self.trace.record(now, actor, event, digest, detail.into());
    }

    pub fn random_nonce(&mut self) -> [u8; 32] {
        let mut n = [0u8; 32];
        self.rng.fill_bytes(&mut n);
        n
    }

    /// An open channel between `a` and `b`, reusing one if it exists.
    pub fn connect(&mut self, a: &NodeId, b: &NodeId) -> Result<ChannelId, NetError> {
        let existing = self.channels.iter().find(|c| {
            !c.closed
                && ((&c.endpoints[0] == a && &c.endpoints[1] == b)
                    || (&c.endpoints[0] == b && &c.endpoints[1] == a))
        });
        match existing {
            Some(c) => Ok(c.id),
            None => self.establish_channel(a, b),
        }
    }

    fn authenticate(&mut self, peer: &NodeId, context: &[u8]) -> Result<u64, NetError> {
        let node = self.nodes.get(peer).ok_or_else(|| NetError::UnknownNode(peer.clone()))?;
        let report = self.trust.validate(CertificateRef::Identity(&node.cert), self.now);
        let mut challenge = [0u8; 32];
        self.rng.fill_bytes(&mut challenge);
        let mut w = Writer::new();
        w.put_field(b"vtn/channel-proof/v1");
        w.put_field(context);
        w.put(&challenge);
        let msg = w.into_bytes();
        let proof = node.key.sign(&msg);
        let possession_ok = crypto::verify(&node.cert.subject_public_key, &msg, &proof);
        if !report.is_valid() || !possession_ok {
            return Err(NetError::PeerCertInvalid {
                peer: peer.clone(),
                report: Box::new(report),
                possession_ok,
            });
        }
        Ok(node.cert.serial)
    }

    /// Mutual authentication: each side validates the other's certificate
    /// and checks a challenge signature made with the certified key.
    pub fn establish_channel(&mut self, a: &NodeId, b: &NodeId) -> Result<ChannelId, NetError> {
        let id = ChannelId(self.channels.len() as u64);
        let result = (|| {
            for n in [a, b] {
                if !self.nodes.contains_key(n) {
                    return Err(NetError::UnknownNode(n.clone()));
                }
                if self.partitioned.contains(n) {
                    return Err(NetError::Partitioned(n.clone()));
                }
            }
            let context = format!("{a}|{b}|{}", id.0);
            let sa = self.authenticate(a, context.as_bytes())?;
            let sb = self.authenticate(b, context.as_bytes())?;
            Ok([sa, sb])
        })();
        match result {
            Ok(serials) => {
                self.channels.push(SecureChannel {
                    id,
                    endpoints: [a.clone(), b.clone()],
                    peer_cert_serials: serials,
                    established_at: self.now,
                    transcript: Vec::new(),
                    next_seq: [0; 2],
                    next_expected: [0; 2],
                    pending: [BTreeMap::new(), BTreeMap::new()],
                    closed: false,
                });
                self.record(
                    &a.0,
                    "channel.established",
                    None,
                    format!("ch={} peer={b} serials={},{}", id.0, serials[0], serials[1]),
                );
                Ok(id)
            }
            Err(e) => {
                let reason = match &e {
                    NetError::PeerCertInvalid {
                        peer,
                        report,
                        possession_ok,
                    } => format!(
                        "reason=peer_cert_invalid peer={peer} verdict={:?} possession={possession_ok}",
                        report.verdict
                    ),
                    NetError::Partitioned(n) => format!("reason=partitioned node={n}"),
                    other => format!("reason=other detail={other:?}"),
                };
                self.record(&a.0, "channel.refused", None, format!("peer={b} {reason}"));
                Err(e)
            }
        }
    }

    pub fn close(&mut self, id: ChannelId) {
        self.channels[id.0 as usize].closed = true;
    }

    pub fn send(&mut self, id: ChannelId, from: &NodeId, body: Message) -> Result<u64, NetError> {
        let now = self.now;
        let ch = self
            .channels
            .get_mut(id.0 as usize)
            .ok_or(NetError::ChannelClosed(id))?;
        if ch.closed {
            return Err(NetError::ChannelClosed(id));
        }
        let direction = ch
            .direction_from(from)
            .ok_or_else(|| NetError::NotAnEndpoint(from.clone(), id))?;
        let seq = ch.next_seq[direction as usize];
        ch.next_seq[direction as usize] += 1;
        let env = Envelope {
            channel: id.0,
            direction,
            seq,
            sent_at: now,
            body,
        };
        let bytes = env.canonical_encode();
        let to = ch.endpoints[1 - direction as usize].clone();
        ch.transcript.push(TranscriptEntry {
            direction,
            seq,
            sent_at: now,
            delivered_at: None,
            bytes: bytes.clone(),
            body: env.body.clone(),
        });
        self.stats.sent += 1;
        self.record(
            &from.0,
            "msg.send",
            Some(crypto::hash(&bytes)),
            format!("ch={} seq={seq} to={to} kind={}", id.0, env.body.kind()),
        );

        let dup = self.roll(self.faults.duplicate);
        let reorder = self.roll(self.faults.reorder);
        if reorder && !self.queue.is_empty() {
            let at = self.queue.len() - 1;
            self.queue.insert(at, InFlight { env: env.clone(), attempts: 0 });
            self.stats.reordered += 1;
        } else {
            self.queue.push_back(InFlight { env: env.clone(), attempts: 0 });
        }
        if dup {
            self.queue.push_back(InFlight { env, attempts: 0 });
            self.stats.duplicated += 1;
        }
        Ok(seq)
    }

    fn roll(&mut self, per_mille: u16) -> bool {
        per_mille > 0 && self.rng.random_range(0..1000u16) < per_mille
    }

    /// Processes every transmission queued at call time.
    pub fn step(&mut self) -> Vec<Delivery> {
        let mut out = Vec::new();
        for _ in 0..self.queue.len() {
            let Some(mut item) = self.queue.pop_front() else { break };
            if item.attempts < MAX_ATTEMPTS && self.roll(self.faults.drop) {
                item.attempts += 1;
                self.stats.dropped += 1;
                let env = &item.env;
                self.record(
                    "network",
                    "net.retransmit",
                    None,
                    format!("ch={} dir={} seq={} attempt={}", env.channel, env.direction, env.seq, item.attempts),
                );
                self.queue.push_back(item);
                continue;
            }
            self.arrive(item.env, &mut out);
        }
        out
    }

    fn arrive(&mut self, env: Envelope, out: &mut Vec<Delivery>) {
        let now = self.now;
        let d = env.direction as usize;
        let ch = &mut self.channels[env.channel as usize];
        if env.seq < ch.next_expected[d] || ch.pending[d].contains_key(&env.seq) {
            self.stats.discarded_duplicates += 1;
            return;
        }
        ch.pending[d].insert(env.seq, env);
        let mut released = Vec::new();
        while let Some(env) = ch.pending[d].remove(&ch.next_expected[d]) {
            ch.next_expected[d] += 1;
            if let Some(t) = ch.transcript.iter_mut().find(|t| t.direction as usize == d && t.seq == env.seq) {
                t.delivered_at = Some(now);
            }
            released.push(Delivery {
                channel: ch.id,
                from: ch.endpoints[d].clone(),
                to: ch.endpoints[1 - d].clone(),
                seq: env.seq,
                body: env.body,
            });
        }
        for dl in released {
            self.stats.delivered += 1;
            self.record(
                &dl.to.0,
                "msg.deliver",
                None,
                format!("ch={} seq={} from={} kind={}", dl.channel.0, dl.seq, dl.from, dl.body.kind()),
            );
            out.push(dl);
        }
    }

    /// Steps until nothing is in flight.
    pub fn run_until_idle(&mut self) -> Vec<Delivery> {
        let mut out = Vec::new();
        while !self.queue.is_empty() {
            out.extend(self.step());
        }
        out
    }

    /// Sends one message and returns it as delivered to the peer.
    pub fn transfer(&mut self, id: ChannelId, from: &NodeId, body: Message) -> Result<Message, NetError> {
        let seq = self.send(id, from, body)?;
        let delivered = self.run_until_idle();
        Ok(delivered
            .into_iter()
            .find(|d| d.channel == id && d.seq == seq && &d.from == from)
            .expect("reliable channel delivers every message")
            .body)
    }
}
