//! Topology configuration: a TOML file, overridden by `POA_*` variables,
//! plus the on-disk key store.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use poa_core::ca::{DEFAULT_CA_ID, DEFAULT_CERT_LIFETIME};
use poa_core::keys::{SigningKey, VerifyingKey};
use poa_core::sim::Profile;

use crate::exit::{CliError, Exit};

/// Tables that `POA_<TABLE>_<FIELD>` can address.
const SECTIONS: [&str; 4] = ["idp", "ledger", "ct", "ca"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub profile: String,
    /// Derives every generated key and service RNG. Unset means OS entropy.
    pub seed: Option<u64>,
    pub key_dir: PathBuf,
    /// Where the CA writes, and verifiers read, the trust roots.
    pub trust_roots: PathBuf,
    pub quorum: usize,
    pub idp: IdpSection,
    pub ledger: Endpoint,
    pub ct: Endpoint,
    pub ca: CaSection,
    pub witnesses: Vec<WitnessSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdpSection {
    pub addr: String,
    /// `iss` claim. Defaults to the IdP's own URL.
    pub issuer: Option<String>,
    /// Seconds between automatic key rotations; 0 disables.
    pub rotation_interval: u64,
    pub token_lifetime: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub addr: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaSection {
    pub addr: String,
    pub ca_id: String,
    /// Seconds between JWKS polls.
    pub poll_interval: u64,
    pub cert_lifetime: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WitnessSection {
    pub id: String,
    pub addr: String,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            profile: "toy".into(),
            seed: None,
            key_dir: "keys".into(),
            trust_roots: "trust.json".into(),
            quorum: 2,
            idp: IdpSection::default(),
            ledger: Endpoint {
                addr: "127.0.0.1:7102".into(),
            },
            ct: Endpoint {
                addr: "127.0.0.1:7103".into(),
            },
            ca: CaSection::default(),
            witnesses: (0..3)
                .map(|i| WitnessSection {
                    id: format!("w{i}"),
                    addr: format!("127.0.0.1:{}", 7111 + i),
                })
                .collect(),
        }
    }
}

impl Default for IdpSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7101".into(),
            issuer: None,
            rotation_interval: 300,
            token_lifetime: 300,
        }
    }
}

impl Default for CaSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7104".into(),
            ca_id: DEFAULT_CA_ID.into(),
            poll_interval: 30,
            cert_lifetime: DEFAULT_CERT_LIFETIME,
        }
    }
}

pub fn url(addr: &str) -> String {
    format!("http://{addr}")
}

fn bad(message: impl Into<String>) -> CliError {
    CliError::new(Exit::BadConfig, message)
}

impl Config {
    /// Reads `path` (if any), applies environment overrides and resolves
    /// relative paths against the config file's directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(
        path: Option<&Path>,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let (mut table, base) = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| bad(format!("{}: {e}", path.display())))?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e| bad(format!("{}: {e}", path.display())))?;
                (table, path.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        apply_env(&mut table, vars)?;
        let mut config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| bad(e.message().to_owned()))?;
        config.key_dir = base.join(&config.key_dir);
        config.trust_roots = base.join(&config.trust_roots);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.profile()?;
        let mut seen = BTreeSet::new();
        let addrs = [&self.idp.addr, &self.ledger.addr, &self.ct.addr, &self.ca.addr]
            .into_iter()
            .chain(self.witnesses.iter().map(|w| &w.addr));
        for addr in addrs {
            if !seen.insert(addr) {
                return Err(bad(format!("endpoint {addr} is configured twice")));
            }
        }
        let ids: BTreeSet<_> = self.witnesses.iter().map(|w| &w.id).collect();
        if ids.len() != self.witnesses.len() {
            return Err(bad("witness ids must be distinct"));
        }
        if self.quorum > self.witnesses.len() {
            return Err(bad(format!(
                "quorum {} exceeds the {} configured witnesses",
                self.quorum,
                self.witnesses.len()
            )));
        }
        Ok(())
    }

    pub fn profile(&self) -> Result<Profile, CliError> {
        Profile::by_name(&self.profile).ok_or_else(|| bad(format!("unknown profile {:?} (toy|default)", self.profile)))
    }

    pub fn issuer(&self) -> String {
        self.idp.issuer.clone().unwrap_or_else(|| url(&self.idp.addr))
    }

    pub fn witness(&self, id: Option<&str>) -> Result<&WitnessSection, CliError> {
        match id {
            Some(id) => self
                .witnesses
                .iter()
                .find(|w| w.id == id)
                .ok_or_else(|| bad(format!("no witness with id {id:?}"))),
            None => self.witnesses.first().ok_or_else(|| bad("no witnesses configured")),
        }
    }

    /// Every key the topology needs, by store name.
    pub fn key_names(&self) -> Vec<String> {
        let mut names = vec!["ledger".to_owned(), "ct".to_owned(), "ca".to_owned()];
        names.extend(self.witnesses.iter().map(|w| witness_key_name(&w.id)));
        names
    }

    /// Seed for a named component's RNG.
    pub fn derived_seed(&self, name: &str) -> Option<u64> {
        self.seed.map(|seed| {
            let digest = Sha256::new()
                .chain_update(b"poa-seed")
                .chain_update(seed.to_be_bytes())
                .chain_update(name.as_bytes())
                .finalize();
            u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
        })
    }

    pub fn rng(&self, name: &str) -> ChaCha20Rng {
        match self.derived_seed(name) {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_rng(OsRng).expect("OS entropy"),
        }
    }

    fn key_path(&self, name: &str) -> PathBuf {
        self.key_dir.join(format!("{name}.key.pem"))
    }

    fn pub_path(&self, name: &str) -> PathBuf {
        self.key_dir.join(format!("{name}.pub.pem"))
    }

    /// Loads a signing key. A missing key is created only with `generate`;
    /// the returned flag says whether that happened.
    pub fn signing_key(&self, name: &str, generate: bool) -> Result<(SigningKey, bool), CliError> {
        let path = self.key_path(name);
        match std::fs::read_to_string(&path) {
            Ok(pem) => {
                let key = SigningKey::from_pkcs8_pem(&pem).map_err(|e| bad(format!("{}: {e}", path.display())))?;
                Ok((key, false))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && generate => {
                let key = SigningKey::generate(&mut self.rng(&format!("key:{name}")));
                std::fs::create_dir_all(&self.key_dir).map_err(|e| CliError::io(&self.key_dir, e))?;
                std::fs::write(&path, key.to_pkcs8_pem()).map_err(|e| CliError::io(&path, e))?;
                let pub_path = self.pub_path(name);
                std::fs::write(&pub_path, key.verifying_key().to_pem()).map_err(|e| CliError::io(&pub_path, e))?;
                Ok((key, true))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(bad(format!(
                "missing key {} (pass --generate to create it)",
                path.display()
            ))),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }

    pub fn public_key(&self, name: &str) -> Result<VerifyingKey, CliError> {
        let path = self.pub_path(name);
        let pem = std::fs::read_to_string(&path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        VerifyingKey::from_pem(&pem).map_err(|e| bad(format!("{}: {e}", path.display())))
    }
}

pub fn witness_key_name(id: &str) -> String {
    format!("witness-{id}")
}

/// `POA_<TABLE>_<FIELD>` sets a field of one of [`SECTIONS`], any other
/// `POA_<KEY>` a top-level key. Values are TOML literals, falling back to
/// plain strings.
fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
    for (name, raw) in vars {
        let Some(key) = name.strip_prefix("POA_") else {
            continue;
        };
        let key = key.to_ascii_lowercase();
        let value = parse_value(&raw);
        let section = key.split_once('_').filter(|(s, _)| SECTIONS.contains(s));
        match section {
            Some((section, field)) => {
                let entry = table
                    .entry(section)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                let toml::Value::Table(inner) = entry else {
                    return Err(bad(format!("{section} must be a table")));
                };
                inner.insert(field.to_owned(), value);
            }
            None => {
                table.insert(key, value);
            }
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn env_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poa.toml");
        std::fs::write(&path, "seed = 1\n[ca]\naddr = \"127.0.0.1:9000\"\n").unwrap();
        let config = Config::load_with_env(
            Some(&path),
            env(&[
                ("POA_SEED", "9"),
                ("POA_CA_ADDR", "127.0.0.1:9001"),
                ("POA_IDP_ISSUER", "https://idp.example"),
                ("POA_KEY_DIR", "k"),
                ("HOME", "/nowhere"),
            ]),
        )
        .unwrap();
        assert_eq!(config.seed, Some(9));
        assert_eq!(config.ca.addr, "127.0.0.1:9001");
        assert_eq!(config.issuer(), "https://idp.example");
        assert_eq!(config.key_dir, dir.path().join("k"));
    }

    #[test]
    fn rejects_bad_configs() {
        let err = Config::load_with_env(None, env(&[("POA_CT_ADDR", "127.0.0.1:7102")])).unwrap_err();
        assert_eq!(err.exit, Exit::BadConfig);
        let err = Config::load_with_env(None, env(&[("POA_QUORUM", "4")])).unwrap_err();
        assert_eq!(err.exit, Exit::BadConfig);
        let err = Config::load_with_env(None, env(&[("POA_PROFILE", "huge")])).unwrap_err();
        assert_eq!(err.exit, Exit::BadConfig);
        let err = Config::load_with_env(None, env(&[("POA_COLOUR", "blue")])).unwrap_err();
        assert_eq!(err.exit, Exit::BadConfig);
    }

    #[test]
    fn seeded_keys_are_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut config = Config {
            seed: Some(3),
            ..Config::default()
        };
        config.key_dir = a.path().into();
        let (ka, created) = config.signing_key("ct", true).unwrap();
        assert!(created);
        assert_eq!(config.public_key("ct").unwrap(), ka.verifying_key());
        config.key_dir = b.path().into();
        assert!(config.signing_key("ct", false).is_err());
        let (kb, _) = config.signing_key("ct", true).unwrap();
        assert_eq!(ka.verifying_key(), kb.verifying_key());
        let (kc, created) = config.signing_key("ct", true).unwrap();
        assert!(!created);
        assert_eq!(kc.verifying_key(), kb.verifying_key());
    }
}
