use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use apikey_cli::bench;
use apikey_cli::files::{
    read_json, serve, system_clock, write_json, AccountKeyFile, ExchangeKeyFile, FileError, ServeConfig,
};
use apikey_client::transport::{connect, SERVER_ENV};
use apikey_client::{fetch_exchange_key, mint_api_key, ApiKeyFile, ClientError, FullKey, FullKeyFile, Session, SignOptions, SignOutcome, Transport};
use apikey_core::account::{AccountScheme, AccountSigningKey};
use apikey_core::curve::CurveId;
use apikey_core::paillier::{KeyCorrectnessProof, PaillierSecretKey, SUPPORTED_KEY_BITS};
use apikey_core::policy::{Action, Amount, Policy, SignedPolicy};
use apikey_core::pool::PoolConfig;
use apikey_core::Scheme;
use clap::{Args, Parser, Subcommand};
use rand::rngs::OsRng;

#[derive(Parser)]
#[command(name = "apikey", version, about = "Two-party threshold API keys for non-custodial exchanges")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate exchange, account or full signing keys.
    #[command(subcommand)]
    Keygen(Keygen),
    /// Mint an API key from a full key (trusted device only).
    Mint(MintArgs),
    /// Register an API key and its signed policy with the exchange.
    Register(RegisterArgs),
    /// Sign or replace a key's policy.
    #[command(subcommand)]
    Policy(PolicyCmd),
    /// Run the exchange.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sign a message; prints the signature as hex.
    Sign(SignArgs),
    /// Presignature pool maintenance.
    #[command(subcommand)]
    Pool(PoolCmd),
    /// Deferred requests.
    #[command(subcommand)]
    Ticket(TicketCmd),
    /// Timings and payload sizes.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Subcommand)]
enum Keygen {
    /// Paillier key pair plus correctness proof for the exchange.
    Exchange {
        #[arg(long, default_value_t = 2048)]
        bits: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Account key that signs policies and cancellations.
    Account {
        #[arg(long, default_value = "ed25519")]
        scheme: AccountScheme,
        #[arg(long)]
        out: PathBuf,
    },
    /// A full trading key (ECDSA scalar or Ed25519 seed).
    Full {
        #[arg(long, default_value = "ecdsa")]
        scheme: Scheme,
        #[arg(long, default_value = "secp256k1")]
        curve: CurveId,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ServerArg {
    /// `tcp://host:port` or `http://host:port`.
    #[arg(long, env = SERVER_ENV)]
    server: String,
}

#[derive(Args)]
struct KeyArgs {
    #[arg(long)]
    key: PathBuf,
    /// Environment variable holding the key file passphrase.
    #[arg(long)]
    passphrase_env: Option<String>,
}

impl KeyArgs {
    fn passphrase(&self) -> Result<Option<String>, CliError> {
        self.passphrase_env
            .as_deref()
            .map(|v| std::env::var(v).map_err(|_| CliError::Usage(format!("{v} is not set"))))
            .transpose()
    }

    fn load(&self) -> Result<ApiKeyFile, CliError> {
        Ok(ApiKeyFile::load(&self.key, self.passphrase()?.as_deref())?)
    }
}

#[derive(Args)]
struct MintArgs {
    #[arg(long)]
    full: PathBuf,
    /// Account key file; only its public half is used.
    #[arg(long)]
    account: PathBuf,
    /// Exchange to fetch the Paillier key and proof from.
    #[arg(long, env = SERVER_ENV)]
    server: Option<String>,
    /// Or a local JSON file `{ "public_key": .., "proof": .. }`.
    #[arg(long, conflicts_with = "server")]
    exchange_key: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    passphrase_env: Option<String>,
}

#[derive(Args)]
struct RegisterArgs {
    #[command(flatten)]
    key: KeyArgs,
    #[arg(long)]
    policy: PathBuf,
    #[command(flatten)]
    server: ServerArg,
}

#[derive(Subcommand)]
enum PolicyCmd {
    /// Sign an unsigned policy document with the account key.
    Sign {
        #[arg(long)]
        account: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace the policy of a registered key.
    Update {
        #[command(flatten)]
        key: KeyArgs,
        #[arg(long)]
        policy: PathBuf,
        #[command(flatten)]
        server: ServerArg,
    },
}

#[derive(Args)]
struct SignArgs {
    #[command(flatten)]
    key: KeyArgs,
    #[command(flatten)]
    server: ServerArg,
    /// Message as UTF-8 text.
    #[arg(long, conflicts_with = "message_hex")]
    message: Option<String>,
    #[arg(long)]
    message_hex: Option<String>,
    /// `MARKET:AMOUNT`
    #[arg(long, conflicts_with = "withdraw")]
    trade: Option<String>,
    /// `ASSET:AMOUNT:DESTINATION`
    #[arg(long)]
    withdraw: Option<String>,
    #[arg(long)]
    device: Option<String>,
    /// `NAME=VALUE`, repeatable.
    #[arg(long = "attr")]
    attributes: Vec<String>,
}

#[derive(Subcommand)]
enum PoolCmd {
    /// Run one preparation round and report it.
    Status {
        #[command(flatten)]
        key: KeyArgs,
        #[command(flatten)]
        server: ServerArg,
        #[arg(long, default_value_t = apikey_core::pool::DEFAULT_BATCH_SIZE)]
        batch: usize,
    },
}

#[derive(Subcommand)]
enum TicketCmd {
    Status {
        #[command(flatten)]
        key: KeyArgs,
        #[command(flatten)]
        server: ServerArg,
        ticket: String,
    },
    /// Cancel a deferred request with the account key.
    Cancel {
        #[command(flatten)]
        key: KeyArgs,
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        account: PathBuf,
        ticket: String,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Paillier precompute/encrypt/decrypt per key size.
    Paillier {
        /// Comma list (`1024,2048`) or range over supported sizes (`512..8192`).
        #[arg(long, default_value = "512..4096")]
        sizes: String,
        #[arg(long, default_value_t = bench::MIN_RUNS)]
        runs: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Client and exchange compute per signing phase.
    Phases {
        #[arg(long, default_value = "ecdsa")]
        scheme: Scheme,
        #[arg(long, default_value_t = 2048)]
        paillier_bits: u64,
        #[arg(long, default_value_t = bench::MIN_RUNS)]
        runs: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Other(String),
    #[error("deferred as ticket {0}")]
    Deferred(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Client(e) => e.exit_code() as u8,
            CliError::Usage(_) => 64,
            CliError::File(_) => 66,
            CliError::Other(_) => 1,
            CliError::Deferred(_) => 2,
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn session(key: &KeyArgs, server: &ServerArg, batch: usize) -> Result<Session<Box<dyn Transport>>, CliError> {
    let transport = connect(&server.server)?;
    let config = PoolConfig { batch_size: batch.max(1), low_water: 0 };
    Ok(Session::open(transport, key.load()?, config)?)
}

fn parse_sizes(spec: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("bad --sizes {spec:?}"));
    if let Some((lo, hi)) = spec.split_once("..") {
        let (lo, hi): (u64, u64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
        return Ok(SUPPORTED_KEY_BITS.iter().copied().filter(|b| (lo..=hi).contains(b)).collect());
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn emit(rows: &[bench::Row], csv: Option<&Path>) -> Result<(), CliError> {
    print!("{}", bench::table(rows));
    let text = bench::csv(rows);
    match csv {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Other(format!("{}: {e}", p.display())))?,
        None => print!("\n{text}"),
    }
    Ok(())
}

fn parse_action(args: &SignArgs) -> Result<Option<Action>, CliError> {
    let amount = |s: &str| s.parse::<u128>().map(Amount).map_err(|_| CliError::Usage(format!("bad amount {s:?}")));
    if let Some(t) = &args.trade {
        let (market, amt) = t.rsplit_once(':').ok_or_else(|| CliError::Usage("--trade MARKET:AMOUNT".into()))?;
        return Ok(Some(Action::Trade { market: market.into(), amount: amount(amt)? }));
    }
    if let Some(w) = &args.withdraw {
        let mut parts = w.splitn(3, ':');
        let (Some(asset), Some(amt), Some(dest)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(CliError::Usage("--withdraw ASSET:AMOUNT:DESTINATION".into()));
        };
        return Ok(Some(Action::Withdrawal { asset: asset.into(), amount: amount(amt)?, destination: dest.into() }));
    }
    Ok(None)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Keygen(Keygen::Exchange { bits, out }) => {
            eprintln!("generating a {bits}-bit Paillier key and its proof...");
            let sk = PaillierSecretKey::generate(bits, &mut OsRng).map_err(|e| CliError::Other(e.to_string()))?;
            let proof = KeyCorrectnessProof::prove(&sk).map_err(|e| CliError::Other(e.to_string()))?;
            write_json(&out, &ExchangeKeyFile::new(&sk, proof))?;
            println!("{}", sk.public_key().fingerprint().to_hex());
        }
        Command::Keygen(Keygen::Account { scheme, out }) => {
            let key = AccountSigningKey::generate(scheme, &mut OsRng);
            write_json(&out, &AccountKeyFile::new(&key))?;
            println!("{}", key.public_key().to_hex());
        }
        Command::Keygen(Keygen::Full { scheme, curve, out }) => {
            let key = FullKey::generate(scheme, curve, &mut OsRng);
            write_json(&out, &key.to_file())?;
            println!("{}", key.public_key_hex()?);
        }
        Command::Mint(args) => {
            let full = FullKey::from_file(&read_json::<FullKeyFile>(&args.full)?)?;
            let account: AccountKeyFile = read_json(&args.account)?;
            let (pk, proof) = match (&args.server, &args.exchange_key) {
                (_, Some(path)) => {
                    #[derive(serde::Deserialize)]
                    struct Published {
                        public_key: apikey_core::paillier::PaillierPublicKey,
                        proof: KeyCorrectnessProof,
                    }
                    let p: Published = read_json(path)?;
                    (p.public_key, p.proof)
                }
                (Some(server), None) => fetch_exchange_key(&connect(server)?)?,
                (None, None) => return Err(CliError::Usage(format!("give --server, {SERVER_ENV} or --exchange-key"))),
            };
            let file = mint_api_key(full, &pk, &proof, &account.public_key, now_ms(), &mut OsRng)?;
            let passphrase = args
                .passphrase_env
                .as_deref()
                .map(|v| std::env::var(v).map_err(|_| CliError::Usage(format!("{v} is not set"))))
                .transpose()?;
            file.save(&args.out, passphrase.as_deref())?;
            println!("{}", file.key_id);
        }
        Command::Register(args) => {
            let policy: SignedPolicy = read_json(&args.policy)?;
            session(&args.key, &args.server, 1)?.register(policy)?;
            println!("registered");
        }
        Command::Policy(PolicyCmd::Sign { account, policy, out }) => {
            let key = read_json::<AccountKeyFile>(&account)?.signing_key()?;
            let policy: Policy = read_json(&policy)?;
            if policy.account_key != key.public_key() {
                return Err(CliError::Usage("policy names a different account key".into()));
            }
            policy.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            write_json(&out, &policy.sign(&key))?;
        }
        Command::Policy(PolicyCmd::Update { key, policy, server }) => {
            let policy: SignedPolicy = read_json(&policy)?;
            let version = session(&key, &server, 1)?.update_policy(policy)?;
            println!("version {version}");
        }
        Command::Serve { config } => {
            let cfg = ServeConfig::load(&config)?;
            let running = serve(&cfg, system_clock())?;
            if let Some(a) = running.tcp_addr() {
                eprintln!("tcp listening on {a}");
            }
            if let Some(a) = running.http_addr() {
                eprintln!("http listening on {a}");
            }
            loop {
                std::thread::park();
            }
        }
        Command::Sign(args) => {
            let message = match (&args.message, &args.message_hex) {
                (Some(m), None) => m.as_bytes().to_vec(),
                (None, Some(h)) => hex::decode(h).map_err(|e| CliError::Usage(format!("--message-hex: {e}")))?,
                _ => return Err(CliError::Usage("give --message or --message-hex".into())),
            };
            let mut attributes = BTreeMap::new();
            for a in &args.attributes {
                let (k, v) = a.split_once('=').ok_or_else(|| CliError::Usage(format!("bad --attr {a:?}")))?;
                attributes.insert(k.to_owned(), v.to_owned());
            }
            let opts = SignOptions { action: parse_action(&args)?, device_id: args.device.clone(), attributes };
            let mut s = session(&args.key, &args.server, 1)?;
            s.set_auto_refill(false);
            match s.sign(&message, &opts)? {
                SignOutcome::Signed { signature, .. } => println!("{}", hex::encode(signature)),
                SignOutcome::Deferred { ticket_id, release_at_ms } => {
                    println!("{ticket_id} {release_at_ms}");
                    return Err(CliError::Deferred(ticket_id));
                }
            }
        }
        Command::Pool(PoolCmd::Status { key, server, batch }) => {
            let s = session(&key, &server, batch)?;
            let out = s.refill(batch)?;
            println!(
                "requested {} added {} rejected {} bytes_out {} bytes_in {} pool {}",
                out.requested,
                out.added,
                out.rejected,
                out.bytes_out,
                out.bytes_in,
                s.pool_len()
            );
        }
        Command::Ticket(TicketCmd::Status { key, server, ticket }) => {
            let info = session(&key, &server, 1)?.ticket(&ticket)?;
            println!("{}", serde_json::to_string(&info).expect("serializable"));
        }
        Command::Ticket(TicketCmd::Cancel { key, server, account, ticket }) => {
            let account = read_json::<AccountKeyFile>(&account)?.signing_key()?;
            session(&key, &server, 1)?.cancel(&ticket, &account)?;
            println!("cancelled");
        }
        Command::Bench(BenchCmd::Paillier { sizes, runs, csv }) => {
            let mut rows = Vec::new();
            for bits in parse_sizes(&sizes)? {
                eprintln!("{bits}-bit: generating key...");
                let sk = PaillierSecretKey::generate(bits, &mut OsRng).map_err(|e| CliError::Other(e.to_string()))?;
                rows.extend(bench::paillier_rows(&sk, runs.max(bench::MIN_RUNS)));
            }
            emit(&rows, csv.as_deref())?;
        }
        Command::Bench(BenchCmd::Phases { scheme, paillier_bits, runs, csv }) => {
            let sk = PaillierSecretKey::generate(paillier_bits, &mut OsRng).map_err(|e| CliError::Other(e.to_string()))?;
            let proof = KeyCorrectnessProof::prove(&sk).map_err(|e| CliError::Other(e.to_string()))?;
            emit(&bench::phase_rows(scheme, &sk, &proof, runs.max(bench::MIN_RUNS)), csv.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
