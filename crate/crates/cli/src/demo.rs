//! `poa demo`: keys, one child process per service, one request, one
//! verification, teardown.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use poa_net::client::Http;

use crate::commands::{self, RequestArgs, VerifyArgs};
use crate::config::{url, Config};
use crate::exit::{CliError, Exit};

pub struct DemoArgs<'a> {
    pub dir: Option<&'a Path>,
    pub sub: &'a str,
    pub profile: &'a str,
    pub seed: Option<u64>,
    pub now: Option<u64>,
}

pub struct DemoOutcome {
    pub pem: String,
    pub report: poa_core::verifier::VerificationReport,
}

/// Kills every child on drop, including on early return.
struct Children(Vec<(String, Child)>);

impl Drop for Children {
    fn drop(&mut self) {
        for (_, child) in &mut self.0 {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

const READY_TIMEOUT: Duration = Duration::from_secs(60);

fn free_addrs(n: usize) -> Result<Vec<String>, CliError> {
    // Held together so the OS hands out distinct ports, then released for
    // the children to bind.
    let listeners = (0..n)
        .map(|_| std::net::TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::new(Exit::Bind, e.to_string()))?;
    listeners
        .iter()
        .map(|l| l.local_addr().map(|a| a.to_string()))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::new(Exit::Bind, e.to_string()))
}

fn demo_config(args: &DemoArgs<'_>) -> Result<String, CliError> {
    let addrs = free_addrs(7)?;
    let mut text = format!("profile = {:?}\n", args.profile);
    if let Some(seed) = args.seed {
        text.push_str(&format!("seed = {seed}\n"));
    }
    text.push_str(&format!(
        "key_dir = \"keys\"\ntrust_roots = \"trust.json\"\nquorum = 2\n\n\
         [idp]\naddr = {:?}\nissuer = \"https://idp.poa.test\"\n\n\
         [ledger]\naddr = {:?}\n\n[ct]\naddr = {:?}\n\n[ca]\naddr = {:?}\npoll_interval = 5\n",
        addrs[0], addrs[1], addrs[2], addrs[3]
    ));
    for (i, addr) in addrs[4..].iter().enumerate() {
        text.push_str(&format!("\n[[witnesses]]\nid = \"w{i}\"\naddr = {addr:?}\n"));
    }
    Ok(text)
}

pub fn demo(args: &DemoArgs<'_>) -> Result<DemoOutcome, CliError> {
    let temp;
    let dir: PathBuf = match args.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            dir.to_path_buf()
        }
        None => {
            temp = tempfile::tempdir().map_err(|e| CliError::io(Path::new("tempdir"), e))?;
            temp.path().to_path_buf()
        }
    };
    let config_path = dir.join("demo.toml");
    std::fs::write(&config_path, demo_config(args)?).map_err(|e| CliError::io(&config_path, e))?;
    // Only the file and built-in defaults: the children see the same.
    let config = Config::load_with_env(Some(&config_path), std::iter::empty())?;
    for name in config.key_names() {
        config.signing_key(&name, true)?;
    }

    let exe = std::env::current_exe().map_err(CliError::internal)?;
    let mut children = Children(Vec::new());
    let mut spawn = |label: String, extra: &[&str], ready: String| -> Result<(), CliError> {
        let log_path = dir.join(format!("{label}.log"));
        let log = std::fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
        let mut command = Command::new(&exe);
        command.env_clear();
        if let Ok(path) = std::env::var("PATH") {
            command.env("PATH", path);
        }
        command
            .args(["run"])
            .args(extra)
            .arg("--config")
            .arg(&config_path)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(log);
        if let Some(now) = args.now {
            command.args(["--now", &now.to_string()]);
        }
        let child = command.spawn().map_err(CliError::internal)?;
        children.0.push((label.clone(), child));
        let (_, child) = children.0.last_mut().expect("just pushed");
        wait_ready(&label, child, &ready, &log_path)
    };

    spawn("idp".into(), &["idp"], format!("{}/jwks", url(&config.idp.addr)))?;
    for w in &config.witnesses {
        spawn(
            format!("witness-{}", w.id),
            &["witness", "--id", &w.id],
            format!("{}/state", url(&w.addr)),
        )?;
    }
    spawn("ledger".into(), &["ledger"], format!("{}/digest", url(&config.ledger.addr)))?;
    spawn("ct".into(), &["ct"], format!("{}/digest", url(&config.ct.addr)))?;
    spawn("ca".into(), &["ca"], format!("{}/trust", url(&config.ca.addr)))?;

    let cert_path = dir.join("cert.pem");
    let key_path = dir.join("requester.key.pem");
    let pem = commands::request(
        &config,
        &RequestArgs {
            sub: args.sub,
            aud: None,
            lifetime: None,
            key_out: Some(&key_path),
        },
    )?;
    std::fs::write(&cert_path, &pem).map_err(|e| CliError::io(&cert_path, e))?;
    let report = commands::verify(
        &config,
        &VerifyArgs {
            cert: &cert_path,
            trust: None,
            ledger_url: None,
            ct_url: None,
            offline: false,
        },
    )?;
    drop(children);
    Ok(DemoOutcome { pem, report })
}

fn wait_ready(label: &str, child: &mut Child, ready_url: &str, log: &Path) -> Result<(), CliError> {
    let (base, path) = ready_url.rsplit_once('/').expect("url has a path");
    let http = Http::with_timeout(base, Duration::from_secs(2));
    let path = format!("/{path}");
    let start = Instant::now();
    loop {
        if let Ok(Some(status)) = child.try_wait() {
            let tail = std::fs::read_to_string(log).unwrap_or_default();
            let exit = match status.code() {
                Some(code) if code == Exit::Bind as i32 => Exit::Bind,
                Some(code) if code == Exit::BadConfig as i32 => Exit::BadConfig,
                _ => Exit::Unreachable,
            };
            return Err(CliError::new(exit, format!("{label} exited with {status}:\n{tail}")));
        }
        if http.get_bytes(&path).is_ok() {
            return Ok(());
        }
        if start.elapsed() > READY_TIMEOUT {
            return Err(CliError::new(
                Exit::Unreachable,
                format!("{label} not ready after {READY_TIMEOUT:?}; see {}", log.display()),
            ));
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}
