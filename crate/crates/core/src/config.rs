//! Topology configuration: the consortium, its VASPs and customers,
//! identity providers, the federation graph and scenario parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest};
use crate::pki::BusinessActivity;
use crate::resolver::{parse_identifier, CustomerIdentifier};
use crate::types::VaspNumber;

/// VASP numbers at or above this value are reserved for non-VASP actors.
pub const RESERVED_ACTOR_NUMBER_BASE: u64 = 1_000_000;

pub const DEFAULT_CONFIG: &str = include_str!("../fixtures/default.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("bad override {0:?}: expected key.path=value")]
    BadOverride(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub consortium: String,
    pub seed: u64,
    #[serde(default)]
    pub stacks: Vec<StackConfig>,
    pub vasps: Vec<VaspConfig>,
    #[serde(default)]
    pub idps: Vec<IdpConfig>,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub claims: Option<ClaimsConfig>,
    #[serde(default)]
    pub scenario: ScenarioConfig,
}

/// A named wallet software stack; components are `name=version`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub name: String,
    pub components: Vec<String>,
}

impl StackConfig {
    pub fn measurements(&self) -> Vec<(String, Digest)> {
        self.components
            .iter()
            .map(|c| {
                let (name, version) = c.split_once('=').unwrap_or((c, ""));
                (name.to_string(), crypto::hash(version.as_bytes()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaspConfig {
    pub vasp_number: u64,
    pub organization_name: String,
    pub domain: String,
    #[serde(default)]
    pub lei: Option<String>,
    #[serde(default)]
    pub incorporation_number: Option<String>,
    pub place_of_business: String,
    pub jurisdiction: String,
    #[serde(default = "default_activity")]
    pub business_activity: String,
    #[serde(default)]
    pub approved_stacks: Vec<String>,
    #[serde(default)]
    pub customers: Vec<CustomerConfig>,
}

fn default_activity() -> String {
    "Exchange".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CustomerConfig {
    pub id: String,
    pub legal_name: String,
    #[serde(default)]
    pub identifiers: Vec<String>,
    #[serde(default)]
    pub geographic_address: Option<String>,
    #[serde(default)]
    pub national_id: Option<String>,
    #[serde(default)]
    pub customer_number: Option<String>,
    #[serde(default)]
    pub birth_date: Option<String>,
    #[serde(default)]
    pub birth_place: Option<String>,
    #[serde(default)]
    pub balance: u64,
    #[serde(default)]
    pub wallet: Option<WalletConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalletConfig {
    pub device_id: String,
    pub stack: String,
    /// Internally generated non-migratable keys present before on-boarding.
    #[serde(default)]
    pub legacy_keys: u32,
    #[serde(default)]
    pub imported_keys: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdpConfig {
    pub domain: String,
    #[serde(default)]
    pub users: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    #[serde(default)]
    pub edges: Vec<[u64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimsConfig {
    /// Customer id of the claims owner.
    pub owner: String,
    pub provider: String,
    pub purpose: String,
    pub allowed_vasps: Vec<u64>,
    pub readable: Vec<String>,
    pub claims: Vec<ClaimConfig>,
    /// VASP that requests the owner's claims.
    pub requester: u64,
    /// VASP whose request the policy denies.
    #[serde(default)]
    pub denied_requester: Option<u64>,
    #[serde(default)]
    pub token_lifetime: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimConfig {
    pub attribute: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub originator: Option<String>,
    #[serde(default)]
    pub beneficiary: Option<String>,
    #[serde(default = "default_amount")]
    pub amount: u64,
    /// When false, customers are not asked for consent.
    #[serde(default = "yes")]
    pub consent: bool,
    #[serde(default)]
    pub wallet_customer: Option<String>,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default)]
    pub skip_erasure: bool,
    #[serde(default)]
    pub ambiguous_identifier: Option<String>,
    #[serde(default)]
    pub faults: FaultConfig,
}

fn default_amount() -> u64 {
    100
}

fn default_steps() -> u64 {
    30
}

fn yes() -> bool {
    true
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            originator: None,
            beneficiary: None,
            amount: default_amount(),
            consent: true,
            wallet_customer: None,
            steps: default_steps(),
            skip_erasure: false,
            ambiguous_identifier: None,
            faults: FaultConfig::default(),
        }
    }
}

/// Channel fault rates in events per thousand transmissions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    #[serde(default)]
    pub drop_per_mille: u16,
    #[serde(default)]
    pub duplicate_per_mille: u16,
    #[serde(default)]
    pub reorder_per_mille: u16,
    /// VASPs cut off from the network: channel setup with them fails.
    #[serde(default)]
    pub partitioned: Vec<u64>,
}

fn syntax_error(text: &str, err: &toml::de::Error) -> ConfigError {
    let (line, column) = match err.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    ConfigError::Syntax {
        line,
        column,
        message: err.message().to_string(),
    }
}

/// Sets `path` (dot separated, numeric segments index arrays) in a TOML
/// table. The value is read as a TOML literal, or as a bare string when it
/// does not parse as one.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::BadOverride(spec.to_string());
    let (path, raw) = spec.split_once('=').ok_or_else(bad)?;
    let path: Vec<&str> = path.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(bad());
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));

    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table_slot = toml::Value::Table(std::mem::take(root));
    let result = set_path(&mut table_slot, parents, last, value).ok_or_else(bad);
    if let toml::Value::Table(t) = table_slot {
        *root = t;
    }
    result
}

fn set_path(cur: &mut toml::Value, parents: &[&str], last: &str, value: toml::Value) -> Option<()> {
    let mut cur = cur;
    for seg in parents {
        cur = match cur {
            toml::Value::Table(t) => t
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => a.get_mut(seg.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    match cur {
        toml::Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        toml::Value::Array(a) => *a.get_mut(last.parse::<usize>().ok()?)? = value,
        _ => return None,
    }
    Some(())
}

impl TopologyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text`, applies `key.path=value` overrides, then validates.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let config: TopologyConfig = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| syntax_error(text, &e))?
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| syntax_error(text, &e))?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| invalid("<override>", e.message()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn stack(&self, name: &str) -> Option<&StackConfig> {
        self.stacks.iter().find(|s| s.name == name)
    }

    pub fn vasp(&self, n: u64) -> Option<&VaspConfig> {
        self.vasps.iter().find(|v| v.vasp_number == n)
    }

    /// (vasp number, customer) for a customer id.
    pub fn customer(&self, id: &str) -> Option<(VaspNumber, &CustomerConfig)> {
        self.vasps.iter().find_map(|v| {
            v.customers
                .iter()
                .find(|c| c.id == id)
                .map(|c| (VaspNumber(v.vasp_number), c))
        })
    }

    pub fn neighbours(&self) -> BTreeMap<VaspNumber, BTreeSet<VaspNumber>> {
        let mut adj: BTreeMap<VaspNumber, BTreeSet<VaspNumber>> = self
            .vasps
            .iter()
            .map(|v| (VaspNumber(v.vasp_number), BTreeSet::new()))
            .collect();
        for [a, b] in &self.federation.edges {
            adj.entry(VaspNumber(*a)).or_default().insert(VaspNumber(*b));
            adj.entry(VaspNumber(*b)).or_default().insert(VaspNumber(*a));
        }
        adj
    }

    /// Ground truth: every registered identifier and the VASPs holding it.
    pub fn identifier_owners(&self) -> BTreeMap<CustomerIdentifier, BTreeSet<VaspNumber>> {
        let mut out: BTreeMap<CustomerIdentifier, BTreeSet<VaspNumber>> = BTreeMap::new();
        for v in &self.vasps {
            for c in &v.customers {
                for id in &c.identifiers {
                    if let Ok(id) = parse_identifier(id) {
                        out.entry(id).or_default().insert(VaspNumber(v.vasp_number));
                    }
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.consortium.trim().is_empty() {
            return Err(invalid("consortium", "must not be empty"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", "must fit in a signed 64-bit TOML integer"));
        }
        if self.vasps.is_empty() {
            return Err(invalid("vasps", "at least one VASP is required"));
        }
        let stacks: BTreeSet<&str> = self.stacks.iter().map(|s| s.name.as_str()).collect();
        let mut numbers = BTreeSet::new();
        let mut customer_ids = BTreeSet::new();
        let mut device_ids = BTreeSet::new();
        for (i, v) in self.vasps.iter().enumerate() {
            let p = format!("vasps[{i}]");
            if v.vasp_number == 0 || v.vasp_number >= RESERVED_ACTOR_NUMBER_BASE {
                return Err(invalid(
                    format!("{p}.vasp_number"),
                    format!("must be in 1..{RESERVED_ACTOR_NUMBER_BASE}"),
                ));
            }
            if !numbers.insert(v.vasp_number) {
                return Err(invalid(
                    format!("{p}.vasp_number"),
                    format!("duplicate VASP number {}", v.vasp_number),
                ));
            }
            if v.lei.is_some() == v.incorporation_number.is_some() {
                return Err(invalid(&p, "exactly one of lei or incorporation_number is required"));
            }
            v.business_activity
                .parse::<BusinessActivity>()
                .map_err(|m| invalid(format!("{p}.business_activity"), m))?;
            for (j, s) in v.approved_stacks.iter().enumerate() {
                if !stacks.contains(s.as_str()) {
                    return Err(invalid(format!("{p}.approved_stacks[{j}]"), format!("unknown stack {s:?}")));
                }
            }
            for (j, c) in v.customers.iter().enumerate() {
                let cp = format!("{p}.customers[{j}]");
                if c.id.trim().is_empty() || !customer_ids.insert(c.id.as_str()) {
                    return Err(invalid(format!("{cp}.id"), format!("missing or duplicate id {:?}", c.id)));
                }
                for (k, id) in c.identifiers.iter().enumerate() {
                    parse_identifier(id)
                        .map_err(|e| invalid(format!("{cp}.identifiers[{k}]"), e.to_string()))?;
                }
                if c.birth_date.is_some() != c.birth_place.is_some() {
                    return Err(invalid(&cp, "birth_date and birth_place go together"));
                }
                if let Some(w) = &c.wallet {
                    if !stacks.contains(w.stack.as_str()) {
                        return Err(invalid(format!("{cp}.wallet.stack"), format!("unknown stack {:?}", w.stack)));
                    }
                    if !device_ids.insert(w.device_id.as_str()) {
                        return Err(invalid(format!("{cp}.wallet.device_id"), "duplicate device id"));
                    }
                }
            }
        }
        for (i, idp) in self.idps.iter().enumerate() {
            for (k, u) in idp.users.iter().enumerate() {
                let id = parse_identifier(u)
                    .map_err(|e| invalid(format!("idps[{i}].users[{k}]"), e.to_string()))?;
                if id.domain() != Some(idp.domain.to_ascii_lowercase().as_str()) {
                    return Err(invalid(format!("idps[{i}].users[{k}]"), "domain differs from the provider's"));
                }
            }
        }
        for (i, [a, b]) in self.federation.edges.iter().enumerate() {
            for n in [a, b] {
                if !numbers.contains(n) {
                    return Err(invalid(format!("federation.edges[{i}]"), format!("unknown VASP {n}")));
                }
            }
            if a == b {
                return Err(invalid(format!("federation.edges[{i}]"), "self loop"));
            }
        }
        if let Some(cl) = &self.claims {
            if self.customer(&cl.owner).is_none() {
                return Err(invalid("claims.owner", format!("unknown customer {:?}", cl.owner)));
            }
            for (i, n) in cl.allowed_vasps.iter().enumerate() {
                if !numbers.contains(n) {
                    return Err(invalid(format!("claims.allowed_vasps[{i}]"), format!("unknown VASP {n}")));
                }
            }
            for (field, n) in [("requester", Some(cl.requester)), ("denied_requester", cl.denied_requester)] {
                if let Some(n) = n {
                    if !numbers.contains(&n) {
                        return Err(invalid(format!("claims.{field}"), format!("unknown VASP {n}")));
                    }
                }
            }
            if cl.token_lifetime == Some(0) {
                return Err(invalid("claims.token_lifetime", "must be positive"));
            }
        }
        let s = &self.scenario;
        if let Some(o) = &s.originator {
            if self.customer(o).is_none() {
                return Err(invalid("scenario.originator", format!("unknown customer {o:?}")));
            }
        }
        for (field, v) in [("beneficiary", &s.beneficiary), ("ambiguous_identifier", &s.ambiguous_identifier)] {
            if let Some(v) = v {
                parse_identifier(v).map_err(|e| invalid(format!("scenario.{field}"), e.to_string()))?;
            }
        }
        if let Some(w) = &s.wallet_customer {
            match self.customer(w) {
                Some((_, c)) if c.wallet.is_some() => {}
                _ => return Err(invalid("scenario.wallet_customer", format!("{w:?} has no wallet"))),
            }
        }
        let f = &s.faults;
        if f.drop_per_mille >= 1000 || f.duplicate_per_mille > 1000 || f.reorder_per_mille > 1000 {
            return Err(invalid("scenario.faults", "rates are per mille; drop must stay below 1000"));
        }
        for (i, n) in f.partitioned.iter().enumerate() {
            if !numbers.contains(n) {
                return Err(invalid(format!("scenario.faults.partitioned[{i}]"), format!("unknown VASP {n}")));
            }
        }
        Ok(())
    }
}
