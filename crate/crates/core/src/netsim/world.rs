//! Builds every actor of a topology from its configuration and seed.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::claims::{issue_claim, AuthorizationServer, ClaimsStore, DEFAULT_TOKEN_LIFETIME};
use crate::config::{TopologyConfig, VaspConfig, RESERVED_ACTOR_NUMBER_BASE};
use crate::crypto::{self, Digest, KeyPair};
use crate::ledger::Ledger;
use crate::pki::{
    BusinessActivity, EvIdentityCertificate, EvSubjectInfo, KeyPurpose, PkiError, RegistrationId, RootAuthority,
    SigningCertificate,
};
use crate::resolver::{parse_identifier, IdpDirectory, Resolver};
use crate::travel_rule::{ComplianceStore, ConsentDirection, CustomerRecord};
use crate::types::{Validity, VaspNumber};
use crate::wallet::{fold_boot_digest, MeasurementEntry, RegulatedWalletRegistry, WalletDevice, WalletSupervisor};

use super::{ActorKind, FaultRates, NetError, Network, NodeId, ScenarioTrace};

pub const CERT_VALIDITY: Validity = Validity {
    not_before: 0,
    not_after: 1_000_000,
};

const VASP_POLICY_OID: &str = "1.3.6.1.4.1.58888.1.1";
const ACTOR_POLICY_OID: &str = "1.3.6.1.4.1.58888.1.2";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("scenario {} failed: {}", .trace.scenario, failed_names(.trace))]
    ScenarioAssertionFailed { trace: Box<ScenarioTrace> },
}

fn failed_names(t: &ScenarioTrace) -> String {
    let names: Vec<&str> = t.failed_assertions().iter().map(|a| a.name.as_str()).collect();
    names.join(", ")
}

impl From<PkiError> for SimError {
    fn from(e: PkiError) -> Self {
        SimError::Setup(e.to_string())
    }
}

/// A VASP with its three keys and certificates and its services.
#[derive(Debug)]
pub struct VaspActor {
    pub number: VaspNumber,
    pub node: NodeId,
    pub(super) identity_key: KeyPair,
    pub(super) transaction_key: KeyPair,
    pub(super) claims_key: KeyPair,
    pub identity_cert: EvIdentityCertificate,
    pub transaction_cert: SigningCertificate,
    pub claims_cert: SigningCertificate,
    pub resolver: Resolver,
    pub compliance: ComplianceStore,
    pub supervisor: WalletSupervisor,
    /// Custodial ledger account per customer.
    pub(super) accounts: BTreeMap<String, KeyPair>,
}

impl VaspActor {
    /// Identity, transaction-signing and claims-signing public keys.
    pub fn public_keys(&self) -> [crate::crypto::PublicKey; 3] {
        [
            self.identity_key.public_key,
            self.transaction_key.public_key,
            self.claims_key.public_key,
        ]
    }

    pub fn account_key(&self, customer_id: &str) -> Option<crate::crypto::PublicKey> {
        self.accounts.get(customer_id).map(|k| k.public_key)
    }
}

/// Claims provider, authorization server and the owner's claims store.
#[derive(Debug)]
pub struct ClaimsWorld {
    pub owner: String,
    pub provider_name: String,
    pub provider_key: KeyPair,
    pub provider_node: NodeId,
    pub auth: AuthorizationServer,
    pub auth_node: NodeId,
    pub store: ClaimsStore,
    pub store_node: NodeId,
}

/// The full simulated world for one configuration.
#[derive(Debug)]
pub struct Simulation {
    pub config: TopologyConfig,
    pub seed: u64,
    root: RootAuthority,
    pub net: Network,
    pub vasps: BTreeMap<VaspNumber, VaspActor>,
    pub idps: BTreeMap<String, IdpDirectory>,
    pub ledger: Ledger,
    pub registry: RegulatedWalletRegistry,
    /// Wallet devices by owning customer id.
    pub devices: BTreeMap<String, WalletDevice>,
    pub claims: Option<ClaimsWorld>,
    pub insurer: NodeId,
    pub insurer_approved: BTreeSet<Digest>,
    actor_certs: Vec<(NodeId, ActorKind, EvIdentityCertificate)>,
}

pub fn vasp_node(n: VaspNumber) -> NodeId {
    NodeId(format!("vasp-{n}"))
}

pub fn customer_node(id: &str) -> NodeId {
    NodeId(format!("customer-{id}"))
}

fn vasp_subject(v: &VaspConfig) -> Result<EvSubjectInfo, SimError> {
    let registration = match (&v.lei, &v.incorporation_number) {
        (Some(l), _) => RegistrationId::Lei(l.clone()),
        (None, Some(n)) => RegistrationId::IncorporationNumber(n.clone()),
        (None, None) => return Err(SimError::Setup("registration id missing".into())),
    };
    Ok(EvSubjectInfo {
        organization_name: v.organization_name.clone(),
        alt_domain_names: vec![v.domain.clone()],
        registration,
        place_of_business: v.place_of_business.clone(),
        jurisdiction: v.jurisdiction.clone(),
        vasp_number: VaspNumber(v.vasp_number),
        regulated_business_activity: v.business_activity.parse().map_err(SimError::Setup)?,
        policy_object_identifier: VASP_POLICY_OID.into(),
    })
}

fn stack_digest(config: &TopologyConfig, name: &str) -> Option<Digest> {
    let log: Vec<MeasurementEntry> = config
        .stack(name)?
        .measurements()
        .into_iter()
        .map(|(component_name, digest)| MeasurementEntry { component_name, digest })
        .collect();
    Some(fold_boot_digest(&log))
}

impl Simulation {
    /// Issues all certificates and provisions every actor. Everything is
    /// derived from `config.seed`.
    pub fn build(config: &TopologyConfig) -> Result<Self, SimError> {
        let master = crypto::seed_from_u64(config.seed);
        let derive = |label: &str| crypto::derive_seed(&master, label);
        let mut root = RootAuthority::create(config.consortium.clone(), &derive("root"));

        let mut vasps = BTreeMap::new();
        let mut idps: BTreeMap<String, IdpDirectory> = BTreeMap::new();
        for idp in &config.idps {
            let mut dir = IdpDirectory::new(&idp.domain);
            for u in &idp.users {
                dir.enroll(parse_identifier(u).map_err(|e| SimError::Setup(e.to_string()))?);
            }
            idps.insert(dir.domain.clone(), dir);
        }

        let mut allocations = Vec::new();
        for v in &config.vasps {
            let number = VaspNumber(v.vasp_number);
            let key = |purpose: &str| KeyPair::from_seed(&derive(&format!("vasp/{number}/{purpose}")));
            let identity_key = key("identity");
            let transaction_key = key("transaction");
            let claims_key = key("claims");
            let identity_cert = root.issue_identity_cert(vasp_subject(v)?, identity_key.public_key, CERT_VALIDITY)?;
            let transaction_cert = root.issue_signing_cert(
                &identity_cert,
                KeyPurpose::TransactionSigning,
                transaction_key.public_key,
                CERT_VALIDITY,
                0,
            )?;
            let claims_cert = root.issue_signing_cert(
                &identity_cert,
                KeyPurpose::ClaimsSigning,
                claims_key.public_key,
                CERT_VALIDITY,
                0,
            )?;

            let mut resolver = Resolver::new(number);
            let mut compliance = ComplianceStore::new();
            let mut accounts = BTreeMap::new();
            for c in &v.customers {
                let mut identifiers = Vec::new();
                resolver.add_customer(&c.id);
                for raw in &c.identifiers {
                    let id = parse_identifier(raw).map_err(|e| SimError::Setup(e.to_string()))?;
                    let idp = id.domain().and_then(|d| idps.get(d));
                    resolver
                        .register_identifier(&c.id, id.clone(), idp)
                        .map_err(|e| SimError::Setup(format!("customer {}: {e}", c.id)))?;
                    identifiers.push(id);
                }
                compliance.add_customer(CustomerRecord {
                    customer_id: c.id.clone(),
                    legal_name: c.legal_name.clone(),
                    geographic_address: c.geographic_address.clone(),
                    national_id: c.national_id.clone(),
                    customer_number: c.customer_number.clone(),
                    birth_info: c.birth_date.clone().zip(c.birth_place.clone()),
                    identifiers,
                    wallet_ref: c.wallet.as_ref().map(|w| w.device_id.clone()),
                });
                if config.scenario.consent {
                    for dir in [ConsentDirection::SendInfoToCounterparty, ConsentDirection::ReceiveAssets] {
                        compliance
                            .record_consent(&c.id, dir, None, 0)
                            .map_err(|e| SimError::Setup(e.to_string()))?;
                    }
                }
                let account = KeyPair::from_seed(&derive(&format!("customer/{}/account", c.id)));
                if c.balance > 0 {
                    allocations.push((account.public_key, c.balance));
                }
                accounts.insert(c.id.clone(), account);
            }
            let approved: BTreeSet<Digest> = v
                .approved_stacks
                .iter()
                .filter_map(|s| stack_digest(config, s))
                .collect();
            let supervisor = WalletSupervisor::new(number, key("supervisor"), approved);
            vasps.insert(
                number,
                VaspActor {
                    number,
                    node: vasp_node(number),
                    identity_key,
                    transaction_key,
                    claims_key,
                    identity_cert,
                    transaction_cert,
                    claims_cert,
                    resolver,
                    compliance,
                    supervisor,
                    accounts,
                },
            );
        }

        // Non-VASP actors get identity certificates too.
        let mut actor_specs: Vec<(NodeId, ActorKind)> = Vec::new();
        for d in idps.keys() {
            actor_specs.push((NodeId(format!("idp-{d}")), ActorKind::IdentityProvider));
        }
        if let Some(cl) = &config.claims {
            actor_specs.push((NodeId("claims-provider".into()), ActorKind::ClaimsProvider));
            actor_specs.push((NodeId("authorization-server".into()), ActorKind::AuthorizationServer));
            actor_specs.push((NodeId(format!("claims-store-{}", cl.owner)), ActorKind::ClaimsStore));
        }
        actor_specs.push((NodeId("insurer".into()), ActorKind::Insurer));
        actor_specs.push((NodeId("ledger".into()), ActorKind::LedgerNode));
        let mut devices = BTreeMap::new();
        for v in &config.vasps {
            for c in &v.customers {
                let Some(w) = &c.wallet else { continue };
                actor_specs.push((customer_node(&c.id), ActorKind::Customer));
                let stack = config
                    .stack(&w.stack)
                    .ok_or_else(|| SimError::Setup(format!("unknown stack {}", w.stack)))?
                    .measurements();
                let mut device = WalletDevice::create(&w.device_id, &derive(&format!("device/{}", w.device_id)), &stack);
                for _ in 0..w.legacy_keys {
                    device.generate_key(false);
                }
                for k in 0..w.imported_keys {
                    device.import_key(KeyPair::from_seed(&derive(&format!("device/{}/import/{k}", w.device_id))));
                }
                devices.insert(c.id.clone(), device);
            }
        }

        let mut actor_certs = Vec::new();
        let mut actor_keys = Vec::new();
        for (i, (id, kind)) in actor_specs.into_iter().enumerate() {
            let number = RESERVED_ACTOR_NUMBER_BASE + i as u64;
            let key = KeyPair::from_seed(&derive(&format!("actor/{id}/identity")));
            let subject = EvSubjectInfo {
                organization_name: format!("{} ({kind:?})", id.0),
                alt_domain_names: vec![format!("actor{number}.consortium.example")],
                registration: RegistrationId::IncorporationNumber(format!("ACTOR-{number}")),
                place_of_business: "Consortium network".into(),
                jurisdiction: config.consortium.clone(),
                vasp_number: VaspNumber(number),
                regulated_business_activity: BusinessActivity::FinancialServices,
                policy_object_identifier: ACTOR_POLICY_OID.into(),
            };
            let cert = root.issue_identity_cert(subject, key.public_key, CERT_VALIDITY)?;
            actor_certs.push((id.clone(), kind, cert));
            actor_keys.push(key);
        }

        let f = &config.scenario.faults;
        let mut net = Network::new(
            root.trust_anchor(),
            u64::from_be_bytes(derive("network")[..8].try_into().expect("8 bytes")),
            FaultRates {
                drop: f.drop_per_mille,
                duplicate: f.duplicate_per_mille,
                reorder: f.reorder_per_mille,
            },
        );
        for v in vasps.values() {
            net.add_node(v.node.clone(), ActorKind::Vasp, v.identity_cert.clone(), v.identity_key.clone());
        }
        for ((id, kind, cert), key) in actor_certs.iter().zip(actor_keys) {
            net.add_node(id.clone(), *kind, cert.clone(), key);
        }
        for p in &f.partitioned {
            net.partition(vasp_node(VaspNumber(*p)));
        }

        let claims = config.claims.as_ref().map(|cl| {
            let auth = AuthorizationServer::new(
                "authorization-server",
                KeyPair::from_seed(&derive("claims/authorization-server")),
            )
            .with_token_lifetime(cl.token_lifetime.unwrap_or(DEFAULT_TOKEN_LIFETIME));
            let provider_key = KeyPair::from_seed(&derive("claims/provider"));
            let mut store = ClaimsStore::new(
                &cl.owner,
                KeyPair::from_seed(&derive("claims/store")),
                auth.public_key(),
            );
            for c in &cl.claims {
                if let Ok(claim) = issue_claim(&provider_key, &cl.provider, &cl.owner, &c.attribute, &c.value, CERT_VALIDITY) {
                    store.add_claim(claim);
                }
            }
            ClaimsWorld {
                owner: cl.owner.clone(),
                provider_name: cl.provider.clone(),
                provider_key,
                provider_node: NodeId("claims-provider".into()),
                auth,
                auth_node: NodeId("authorization-server".into()),
                store,
                store_node: NodeId(format!("claims-store-{}", cl.owner)),
            }
        });

        let insurer_approved = vasps
            .values()
            .flat_map(|v| v.supervisor.approved_stacks().iter().copied())
            .collect();

        Ok(Simulation {
            config: config.clone(),
            seed: config.seed,
            root,
            net,
            vasps,
            idps,
            ledger: Ledger::genesis(&allocations),
            registry: RegulatedWalletRegistry::default(),
            devices,
            claims,
            insurer: NodeId("insurer".into()),
            insurer_approved,
            actor_certs,
        })
    }

    pub fn root(&self) -> &RootAuthority {
        &self.root
    }

    pub fn actor_certs(&self) -> &[(NodeId, ActorKind, EvIdentityCertificate)] {
        &self.actor_certs
    }

    pub fn vasp(&self, n: VaspNumber) -> &VaspActor {
        &self.vasps[&n]
    }

    /// The VASP holding `customer_id` as a customer.
    pub fn home_vasp(&self, customer_id: &str) -> Option<VaspNumber> {
        self.vasps
            .values()
            .find(|v| v.accounts.contains_key(customer_id))
            .map(|v| v.number)
    }

    /// Every public key a customer controls: custodial accounts, wallet
    /// slots and bare-key identifiers.
    pub fn customer_public_keys(&self) -> Vec<crate::crypto::PublicKey> {
        let mut keys: Vec<_> = self
            .vasps
            .values()
            .flat_map(|v| v.accounts.values().map(|k| k.public_key))
            .collect();
        for d in self.devices.values() {
            let mut h = 1;
            while let Ok(pk) = d.public_key(h) {
                keys.push(pk);
                h += 1;
            }
        }
        for ids in self.config.identifier_owners().keys() {
            if let crate::resolver::CustomerIdentifier::BarePublicKey(k) = ids {
                keys.push(*k);
            }
        }
        keys
    }
}
