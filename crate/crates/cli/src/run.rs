//! `poa run <service>`: one service per process.

use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use clap::ValueEnum;

use poa_core::ca::{CaBackends, CaConfig, CertificateAuthority};
use poa_core::ledger::{JwkLedger, LogTrust, Witness};
use poa_core::service::{Clock, CtService, LedgerService, WitnessEndpoint, WitnessService};
use poa_core::sim::SimIdp;
use poa_core::verifier::TrustRoots;
use poa_net::client::{CtClient, HttpJwksSource, LedgerClient, WitnessClient};
use poa_net::server::{self, CaState};

use crate::config::{url, witness_key_name, Config};
use crate::exit::{CliError, Exit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Service {
    Idp,
    Ca,
    Ledger,
    Ct,
    Witness,
}

pub struct RunArgs<'a> {
    pub service: Service,
    pub generate: bool,
    pub witness_id: Option<&'a str>,
}

/// Root certificates are backdated by a day so that certificates issued
/// right after startup sit well inside the root's validity.
const ROOT_BACKDATE: u64 = 86_400;

pub fn run(config: &Config, args: RunArgs<'_>, clock: Arc<dyn Clock>) -> Result<(), CliError> {
    let addr = match args.service {
        Service::Idp => config.idp.addr.clone(),
        Service::Ca => config.ca.addr.clone(),
        Service::Ledger => config.ledger.addr.clone(),
        Service::Ct => config.ct.addr.clone(),
        Service::Witness => config.witness(args.witness_id)?.addr.clone(),
    };
    // Bind before anything else so a taken port fails fast.
    let listener = server::bind(&addr).map_err(|e| CliError::new(Exit::Bind, format!("bind {addr}: {e}")))?;

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::internal)?;
    let (router, background) = match args.service {
        Service::Idp => idp(config, clock)?,
        Service::Ca => ca(config, args.generate, clock)?,
        Service::Ledger => (ledger(config, args.generate, clock)?, None),
        Service::Ct => (ct(config, args.generate, clock)?, None),
        Service::Witness => (witness(config, args.witness_id, args.generate, clock)?, None),
    };
    tracing::info!(service = ?args.service, url = %url(&addr), "listening");
    runtime.block_on(async move {
        let tasks = background.map(|start| start());
        let result = server::serve(listener, router, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
        if let Some(tasks) = tasks {
            tasks.into_iter().for_each(|t| t.abort());
        }
        result.map_err(CliError::internal)
    })
}

/// Deferred background work, started once inside the runtime.
type Background = Option<Box<dyn FnOnce() -> Vec<tokio::task::JoinHandle<()>> + Send>>;

fn load_key(config: &Config, name: &str, generate: bool) -> Result<poa_core::keys::SigningKey, CliError> {
    let (key, created) = config.signing_key(name, generate)?;
    if created {
        println!("generated {name} key, fingerprint {}", key.verifying_key().fingerprint());
    }
    Ok(key)
}

fn service_seed(config: &Config, name: &str) -> u64 {
    use rand::RngCore;
    config.rng(name).next_u64()
}

fn idp(config: &Config, clock: Arc<dyn Clock>) -> Result<(Router, Background), CliError> {
    let profile = config.profile()?;
    let idp = Arc::new(
        SimIdp::new(&config.issuer(), profile, clock, service_seed(config, "idp")).map_err(CliError::internal)?,
    );
    let interval = config.idp.rotation_interval;
    let background: Background = (interval > 0).then(|| {
        let idp = idp.clone();
        Box::new(move || {
            vec![tokio::spawn(async move {
                let period = Duration::from_secs(interval);
                let mut tick = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
                loop {
                    tick.tick().await;
                    let idp = idp.clone();
                    match tokio::task::spawn_blocking(move || idp.rotate()).await {
                        Ok(Ok(())) => tracing::info!("rotated signing key"),
                        Ok(Err(e)) => tracing::warn!(error = %e, "rotation failed"),
                        Err(e) => tracing::error!(error = %e, "rotation task failed"),
                    }
                }
            })]
        }) as Box<dyn FnOnce() -> Vec<tokio::task::JoinHandle<()>> + Send>
    });
    Ok((server::idp_router(idp), background))
}

fn log_trust(config: &Config) -> Result<LogTrust, CliError> {
    let mut witness_keys = std::collections::BTreeMap::new();
    for w in &config.witnesses {
        witness_keys.insert(w.id.clone(), config.public_key(&witness_key_name(&w.id))?);
    }
    Ok(LogTrust {
        log_key: config.public_key("ledger")?,
        witness_keys,
        quorum: config.quorum,
    })
}

fn ledger(config: &Config, generate: bool, clock: Arc<dyn Clock>) -> Result<Router, CliError> {
    let key = load_key(config, "ledger", generate)?;
    let mut ledger = JwkLedger::new(key, clock.now());
    let mut endpoints: Vec<Arc<dyn WitnessEndpoint>> = Vec::new();
    for w in &config.witnesses {
        ledger.register_witness(&w.id, config.public_key(&witness_key_name(&w.id))?);
        endpoints.push(Arc::new(WitnessClient::new(&w.id, url(&w.addr))));
    }
    Ok(server::ledger_router(Arc::new(LedgerService::new(ledger, endpoints, clock))))
}

fn ct(config: &Config, generate: bool, clock: Arc<dyn Clock>) -> Result<Router, CliError> {
    let key = load_key(config, "ct", generate)?;
    Ok(server::ct_router(Arc::new(CtService::new(key, clock))))
}

fn witness(config: &Config, id: Option<&str>, generate: bool, clock: Arc<dyn Clock>) -> Result<Router, CliError> {
    let section = config.witness(id)?;
    let key = load_key(config, &witness_key_name(&section.id), generate)?;
    let witness = Witness::new(&section.id, key, config.public_key("ledger")?);
    let source = Arc::new(HttpJwksSource::with_url(config.issuer(), url(&config.idp.addr)));
    Ok(server::witness_router(Arc::new(WitnessService::new(witness, source, clock))))
}

fn ca(config: &Config, generate: bool, clock: Arc<dyn Clock>) -> Result<(Router, Background), CliError> {
    let key = load_key(config, "ca", generate)?;
    let ledger_trust = log_trust(config)?;
    let ct_key = config.public_key("ct")?;
    let mut ca_config = CaConfig::new(config.issuer());
    ca_config.ca_id = config.ca.ca_id.clone();
    ca_config.lambda = config.profile()?.lambda;
    ca_config.cert_lifetime = config.ca.cert_lifetime;
    let backends = CaBackends {
        jwks_source: Arc::new(HttpJwksSource::with_url(config.issuer(), url(&config.idp.addr))),
        ledger: Arc::new(LedgerClient::new(url(&config.ledger.addr))),
        ledger_trust: ledger_trust.clone(),
        ct: Arc::new(CtClient::new(url(&config.ct.addr))),
        ct_key,
    };
    let now = clock.now();
    let ca = Arc::new(
        CertificateAuthority::new(
            ca_config.clone(),
            key,
            backends,
            now.saturating_sub(ROOT_BACKDATE),
            service_seed(config, "ca"),
        )
        .map_err(CliError::internal)?,
    );
    let trust = TrustRoots {
        ca_root: ca.root().clone(),
        ledger: ledger_trust,
        ct_key,
        expected_issuer: ca_config.issuer.clone(),
        expected_ca_audience: ca_config.ca_id.clone(),
        lambda: ca_config.lambda,
        cert_lifetime: ca_config.cert_lifetime,
        clock_skew: ca_config.clock_skew,
    };
    trust.validate().map_err(|e| CliError::new(Exit::BadConfig, e.to_string()))?;
    let trust_json = trust.to_json();
    if let Some(dir) = config.trust_roots.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(&config.trust_roots, &trust_json).map_err(|e| CliError::io(&config.trust_roots, e))?;
    tracing::info!(path = %config.trust_roots.display(), "wrote trust roots");

    // First sync before serving, so issuance works as soon as we listen.
    match ca.poll_jwks(now).and_then(|_| ca.publish_jwks()) {
        Ok(()) => tracing::info!("initial JWKS published"),
        Err(e) => tracing::warn!(error = %e, "initial JWKS sync failed; retrying on the poll interval"),
    }
    let state = CaState {
        ca,
        clock,
        trust_json: Arc::new(trust_json),
    };
    let interval = Duration::from_secs(config.ca.poll_interval.max(1));
    let poll_state = state.clone();
    let background: Background = Some(Box::new(move || vec![server::spawn_poll_loop(poll_state, interval)]));
    Ok((server::ca_router(state), background))
}
