//! Client-side commands: keygen, request, verify, bench, games.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use poa_core::ca::{pop_message, IssuanceRequest};
use poa_core::games::{self, ForgeryStrategy, GameTally};
use poa_core::keys::SigningKey;
use poa_core::service::CtView;
use poa_core::sim::{Profile, Topology, TopologyConfig};
use poa_core::verifier::{self, TrustRoots, VerificationReport};
use poa_net::client::{CaClient, ClientError, CtClient, IdpClient, LedgerClient};
use poa_net::wire::TokenBody;

use crate::config::{url, Config};
use crate::exit::{CliError, Exit};

/// Creates every missing key. Prints one line per key.
pub fn keygen(config: &Config) -> Result<(), CliError> {
    for name in config.key_names() {
        let (key, created) = config.signing_key(&name, true)?;
        let state = if created { "generated" } else { "exists" };
        println!("{name} {state} {}", key.verifying_key().fingerprint());
    }
    Ok(())
}

pub struct RequestArgs<'a> {
    pub sub: &'a str,
    pub aud: Option<&'a str>,
    pub lifetime: Option<u64>,
    pub key_out: Option<&'a Path>,
}

/// The requester flow over HTTP. Returns the PEM chain.
pub fn request(config: &Config, args: &RequestArgs<'_>) -> Result<String, CliError> {
    let key = SigningKey::generate(&mut config.rng(&format!("requester:{}", args.sub)));
    let ca = CaClient::new(url(&config.ca.addr));
    let nonce = ca.challenge(&key.verifying_key()).map_err(CliError::from_client)?;
    let token = IdpClient::new(url(&config.idp.addr))
        .token(&TokenBody {
            sub: args.sub.to_owned(),
            aud: args.aud.unwrap_or(&config.ca.ca_id).to_owned(),
            lifetime: Some(args.lifetime.unwrap_or(config.idp.token_lifetime)),
            nonce: Some(nonce.clone()),
        })
        .map_err(CliError::from_client)?;
    let pem = ca
        .issue(&IssuanceRequest {
            token,
            public_key: key.verifying_key(),
            pop: key.sign(&pop_message(&nonce)),
        })
        .map_err(CliError::from_client)?;
    if let Some(path) = args.key_out {
        std::fs::write(path, key.to_pkcs8_pem()).map_err(|e| CliError::io(path, e))?;
    }
    Ok(pem)
}

pub struct VerifyArgs<'a> {
    /// `-` reads stdin.
    pub cert: &'a Path,
    pub trust: Option<&'a Path>,
    pub ledger_url: Option<&'a str>,
    pub ct_url: Option<&'a str>,
    pub offline: bool,
}

pub fn read_input(path: &Path) -> Result<String, CliError> {
    let mut text = String::new();
    if path == Path::new("-") {
        std::io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| CliError::io(path, e))?;
    } else {
        text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    }
    Ok(text)
}

pub fn load_trust(path: &Path) -> Result<TrustRoots, CliError> {
    let json = std::fs::read_to_string(path).map_err(|e| CliError::new(Exit::BadConfig, format!("{}: {e}", path.display())))?;
    TrustRoots::from_json(&json).map_err(|e| CliError::new(Exit::BadConfig, format!("{}: {e}", path.display())))
}

/// Verifies a certificate. Rejection is a report, not an error.
pub fn verify(config: &Config, args: &VerifyArgs<'_>) -> Result<VerificationReport, CliError> {
    let pem = read_input(args.cert)?;
    let trust = load_trust(args.trust.unwrap_or(&config.trust_roots))?;
    let ledger = LedgerClient::new(args.ledger_url.map_or_else(|| url(&config.ledger.addr), str::to_owned));
    // An unreachable ledger is an operational failure, not a verdict.
    if let Err(e @ ClientError::Transport { .. }) = ledger.digest() {
        return Err(CliError::from_client(e));
    }
    let ct = (!args.offline).then(|| CtClient::new(args.ct_url.map_or_else(|| url(&config.ct.addr), str::to_owned)));
    verifier::verify_pem(&pem, &trust, &ledger, ct.as_ref().map(|c| c as &dyn CtView))
        .map_err(|e| CliError::new(Exit::Malformed, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Json,
    Both,
}

pub fn bench(profile: Profile, seed: u64, iterations: usize, format: Format) -> Result<String, CliError> {
    let report = poa_core::bench::measure(profile, seed, iterations.max(1)).map_err(CliError::internal)?;
    Ok(match format {
        Format::Text => report.to_text(),
        Format::Json => report.to_json(),
        Format::Both => format!("{}\n{}", report.to_text(), report.to_json()),
    })
}

#[derive(Debug, Serialize)]
pub struct GameLine {
    pub game: String,
    pub successes: u64,
    pub trials: u64,
    /// What a sound system must show.
    pub expected: &'static str,
    pub ok: bool,
}

impl GameLine {
    fn all(tally: GameTally) -> Self {
        Self {
            ok: tally.successes == tally.trials,
            game: tally.name,
            successes: tally.successes,
            trials: tally.trials,
            expected: "all succeed",
        }
    }

    fn none(tally: GameTally) -> Self {
        Self {
            ok: tally.successes == 0,
            game: tally.name,
            successes: tally.successes,
            trials: tally.trials,
            expected: "none succeed",
        }
    }
}

/// Completeness, unforgeability and replay, on an in-process topology.
pub fn games(profile: Profile, seed: u64, trials: usize) -> Result<Vec<GameLine>, CliError> {
    let topo = Topology::new(TopologyConfig::new(profile, seed)).map_err(CliError::internal)?;
    let mut lines = vec![GameLine::all(
        games::completeness(&topo, trials, true).map_err(CliError::internal)?,
    )];
    for strategy in ForgeryStrategy::ALL {
        let tally = games::unforgeability(&topo, strategy, trials).map_err(CliError::internal)?;
        lines.push(GameLine::none(tally));
    }
    let mut certs = Vec::new();
    let mut signing_input = Vec::new();
    for i in 0..trials.clamp(1, 10) {
        topo.clock.advance(1);
        let got = topo.request(&format!("replay{i}@example.com")).map_err(CliError::internal)?;
        certs.push(got.issued.leaf_der());
        signing_input = got.token.signing_input().to_vec();
    }
    lines.push(GameLine::none(
        games::replay_extraction(&topo, &certs, trials).map_err(CliError::internal)?,
    ));
    let key = topo.idp.with_state(|s| s.signing_key().clone());
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    lines.push(GameLine::none(games::replay_recombination(
        &key,
        &signing_input,
        topo.trust.lambda,
        2,
        trials,
        &mut rng,
    )));
    Ok(lines)
}

pub fn games_text(lines: &[GameLine]) -> String {
    let width = lines.iter().map(|l| l.game.len()).max().unwrap_or(0);
    lines
        .iter()
        .map(|l| {
            format!(
                "{:<width$}  {:>6}/{:<6} {:<12}  {}",
                l.game,
                l.successes,
                l.trials,
                l.expected,
                if l.ok { "ok" } else { "BREACH" }
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}
