//! Protocol library and deterministic simulator for VASP trust
//! infrastructure: a consortium PKI with EV identity certificates, Travel
//! Rule payload exchange correlated to ledger transfers, federated
//! identifier resolution, customer-managed claims access with consent
//! receipts, and attested hardware wallets.

pub mod claims;
pub mod codec;
pub mod config;
pub mod crypto;
pub mod ledger;
pub mod netsim;
pub mod pki;
pub mod resolver;
pub mod runner;
pub mod travel_rule;
pub mod types;
pub mod wallet;

pub use codec::{Decode, Encode};
pub use crypto::{Digest, KeyPair, PublicKey, Signature};
pub use types::{Tick, Validity, VaspNumber};
