//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Barrier, Mutex, OnceLock};
use std::time::{Duration, Instant};

use apikey_cli::bench;
use apikey_cli::files::{serve, write_json, ExchangeKeyFile, ServeConfig, TestFlags};
use apikey_client::{
    fetch_exchange_key, mint_api_key, ClientError, FullKey, InProcess, Recorder, Session, SignOptions, SignOutcome,
    TcpTransport,
};
use apikey_core::account::{AccountScheme, AccountSigningKey};
use apikey_core::curve::{CurveId, CurvePoint};
use apikey_core::ecdsa::{
    complete_signature, compute_presignature, dh_client_complete, dh_client_init, dh_server_respond_with,
    generate_api_key, generate_api_key_audited, ApiKeyEcdsa, CompletionOptions, EcdsaClientEntry,
};
use apikey_core::eddsa::{decrypt_server_share, generate_api_key_ed_audited};
use apikey_core::encoding::scalar_to_bytes32;
use apikey_core::message::{digest_scalar, message_digest};
use apikey_core::paillier::{
    KeyCorrectnessProof, KeyMode, PaillierPublicKey, PaillierSecretKey, ProofParams, VerifiedPaillierKey,
};
use apikey_core::policy::{
    evaluate, record_usage, Action, Amount, DenyCode, Policy, Rule, SignContext, SignedPolicy, Stage, UsageLedger,
    Window,
};
use apikey_core::pool::{refill_ecdsa, ClientPool, PoolConfig};
use apikey_core::wire::{
    cancel_message, CancelRequest, ErrorCode, PrepareRequest, RegisterRequest, Response, SignRequest, TicketState,
};
use apikey_core::{KeyId, Scheme};
use apikey_service::{Clock, ExchangeService, ManualClock, Storage, SystemClock};
use curve25519_dalek::edwards::EdwardsPoint;
use curve25519_dalek::scalar::Scalar as EdScalar;
use k256::ecdsa::hazmat::SignPrimitive;
use k256::ecdsa::signature::Verifier;
use k256::elliptic_curve::sec1::ToEncodedPoint;
use k256::elliptic_curve::PrimeField;
use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use rand::rngs::OsRng;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

const START_MS: u64 = 1_700_000_000_000;
const HOUR_MS: u64 = 3_600_000;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn fail<E: std::fmt::Display>(context: &'static str) -> impl Fn(E) -> String {
    move |e| format!("{context}: {e}")
}

fn exchange(bits: u64) -> &'static (PaillierSecretKey, KeyCorrectnessProof) {
    static K1024: OnceLock<(PaillierSecretKey, KeyCorrectnessProof)> = OnceLock::new();
    static K2048: OnceLock<(PaillierSecretKey, KeyCorrectnessProof)> = OnceLock::new();
    let cell = match bits {
        1024 => &K1024,
        2048 => &K2048,
        _ => unreachable!("only 1024 and 2048 are used"),
    };
    cell.get_or_init(|| {
        let sk = PaillierSecretKey::generate(bits, &mut OsRng).expect("keygen");
        let proof = KeyCorrectnessProof::prove(&sk).expect("proof");
        (sk, proof)
    })
}

fn verified(bits: u64) -> VerifiedPaillierKey {
    let (sk, proof) = exchange(bits);
    VerifiedPaillierKey::verify(sk.public_key().clone(), proof).expect("honest proof")
}

fn open_service(bits: u64, storage: Storage, clock: Arc<dyn Clock>) -> Arc<ExchangeService> {
    let (sk, proof) = exchange(bits);
    Arc::new(ExchangeService::open(sk.clone(), proof.clone(), storage, clock).expect("service opens"))
}

fn signed_policy(account: &AccountSigningKey, version: u64, rules: Vec<Rule>) -> SignedPolicy {
    Policy { policy_id: "acceptance".into(), account_key: account.public_key(), version, rules }.sign(account)
}

fn account() -> AccountSigningKey {
    AccountSigningKey::generate(AccountScheme::Ed25519, &mut OsRng)
}

fn k256_scalar(v: &BigUint) -> k256::Scalar {
    Option::from(k256::Scalar::from_repr(scalar_to_bytes32(v).into())).expect("scalar below order")
}

fn k256_public_hex(secret: &[u8]) -> String {
    let sk = k256::SecretKey::from_slice(secret).expect("valid scalar");
    hex::encode(sk.public_key().to_encoded_point(true).as_bytes())
}

fn k256_verify(public_hex: &str, msg: &[u8], sig: &[u8]) -> bool {
    let Ok(vk) = k256::ecdsa::VerifyingKey::from_sec1_bytes(&hex::decode(public_hex).unwrap_or_default()) else {
        return false;
    };
    let Ok(sig) = k256::ecdsa::Signature::from_slice(sig) else {
        return false;
    };
    sig.normalize_s().is_none() && vk.verify(msg, &sig).is_ok()
}

fn withdrawal(asset: &str, amount: u128, destination: &str) -> Action {
    Action::Withdrawal { asset: asset.into(), amount: Amount(amount), destination: destination.into() }
}

fn trade(market: &str, amount: u128) -> Action {
    Action::Trade { market: market.into(), amount: Amount(amount) }
}

/// An API-key holder talking to the service handlers directly.
struct Party {
    key: ApiKeyEcdsa,
    pool: ClientPool<EcdsaClientEntry>,
}

impl Party {
    fn register(svc: &ExchangeService, account: &AccountSigningKey, rules: Vec<Rule>, bits: u64) -> Self {
        let curve = CurveId::Secp256k1;
        let x = curve.random_scalar(&mut OsRng);
        let key = generate_api_key(&x, curve, &verified(bits), &mut OsRng).expect("keygen");
        let resp = svc.handle_register(RegisterRequest {
            key_id: key.key_id().clone(),
            scheme: Scheme::Ecdsa,
            curve,
            public_key: key.public_key().to_hex(),
            policy: signed_policy(account, 1, rules),
            enc_server_share: None,
        });
        assert!(matches!(resp, Response::Registered { .. }), "{resp:?}");
        Self { key, pool: ClientPool::new(PoolConfig { batch_size: 16, low_water: 0 }) }
    }

    fn id(&self) -> &KeyId {
        self.key.key_id()
    }

    fn refill(&self, svc: &ExchangeService, count: usize) {
        refill_ecdsa(&self.pool, &self.key, count, &mut OsRng, |points| {
            let req = PrepareRequest { key_id: self.id().clone(), points: points.iter().map(CurvePoint::to_hex).collect() };
            match svc.handle_prepare(req) {
                Response::Prepared { points } => Ok(points
                    .into_iter()
                    .map(|p| p.point.and_then(|h| CurvePoint::from_hex(CurveId::Secp256k1, &h).ok()))
                    .collect()),
                other => Err(format!("{other:?}")),
            }
        })
        .expect("refill");
    }

    fn request(&self, svc: &ExchangeService, msg: &[u8], action: Action) -> SignRequest {
        if self.pool.is_empty() {
            self.refill(svc, 16);
        }
        let entry = self.pool.take().expect("entry").entry;
        presign(&self.key, entry, msg, action)
    }
}

fn presign(key: &ApiKeyEcdsa, entry: EcdsaClientEntry, msg: &[u8], action: Action) -> SignRequest {
    let m = digest_scalar(key.curve(), &message_digest(msg));
    let presig = compute_presignature(key, entry, &m, &mut OsRng).expect("presignature");
    SignRequest {
        key_id: key.key_id().clone(),
        message: hex::encode(msg),
        action,
        device_id: None,
        attributes: Default::default(),
        payload: hex::encode(presig.to_bytes(key.paillier_pk())),
    }
}

fn c1_ecdsa_signatures() -> Outcome {
    const COUNT: usize = 1000;
    let start = Instant::now();
    let (sk, proof) = exchange(2048);
    let svc = open_service(2048, Storage::Memory, Arc::new(SystemClock));
    let acct = account();
    let full = FullKey::generate(Scheme::Ecdsa, CurveId::Secp256k1, &mut OsRng);
    let secret = hex::decode(full.to_file().secret).map_err(fail("secret"))?;
    let public = k256_public_hex(&secret);
    let file = mint_api_key(full, sk.public_key(), proof, &acct.public_key(), 0, &mut OsRng).map_err(fail("mint"))?;
    ensure!(file.public_key == public, "minted public key differs from the full key's");
    let session = Session::open(InProcess::new(svc, None), file, PoolConfig { batch_size: 100, low_water: 0 })
        .map_err(fail("session"))?;
    session.register(signed_policy(&acct, 1, vec![])).map_err(fail("register"))?;
    let mut nonces = HashSet::new();
    for i in 0..COUNT {
        let msg = format!("order {i}");
        let out = session.sign(msg.as_bytes(), &SignOptions::default()).map_err(fail("sign"))?;
        let sig = out.signature().ok_or("signature deferred")?;
        ensure!(k256_verify(&public, msg.as_bytes(), sig), "signature {i} rejected by k256");
        ensure!(nonces.insert(sig[..32].to_vec()), "signature {i} reuses r");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:.1?}, limit 120 s");
    Ok(format!("{COUNT} secp256k1 signatures verified by k256 in {:.1} s (limit 120 s)", elapsed.as_secs_f64()))
}

fn c2_eddsa_signatures() -> Outcome {
    const COUNT: usize = 1000;
    let start = Instant::now();
    let (sk, proof) = exchange(2048);
    let svc = open_service(2048, Storage::Memory, Arc::new(SystemClock));
    let acct = account();
    let full = FullKey::generate(Scheme::Eddsa, CurveId::default(), &mut OsRng);
    let seed: [u8; 32] = hex::decode(full.to_file().secret).ok().and_then(|b| b.try_into().ok()).ok_or("seed")?;
    let verifier = ed25519_dalek::SigningKey::from_bytes(&seed).verifying_key();
    let file = mint_api_key(full, sk.public_key(), proof, &acct.public_key(), 0, &mut OsRng).map_err(fail("mint"))?;
    ensure!(file.public_key == hex::encode(verifier.as_bytes()), "minted public key differs from the seed's");
    let session = Session::open(InProcess::new(svc, None), file, PoolConfig { batch_size: 100, low_water: 0 })
        .map_err(fail("session"))?;
    session.register(signed_policy(&acct, 1, vec![])).map_err(fail("register"))?;
    let mut nonces = HashSet::new();
    for i in 0..COUNT {
        let msg = format!("order {i}");
        let out = session.sign(msg.as_bytes(), &SignOptions::default()).map_err(fail("sign"))?;
        let sig: [u8; 64] = out.signature().ok_or("signature deferred")?.try_into().map_err(fail("length"))?;
        let sig = ed25519_dalek::Signature::from_bytes(&sig);
        ensure!(verifier.verify_strict(msg.as_bytes(), &sig).is_ok(), "signature {i} rejected by ed25519-dalek");
        ensure!(nonces.insert(sig.r_bytes().to_vec()), "signature {i} reuses R");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:.1?}, limit 120 s");
    Ok(format!("{COUNT} Ed25519 signatures verified by ed25519-dalek in {:.1} s (limit 120 s)", elapsed.as_secs_f64()))
}

fn c3_bit_exact_vectors() -> Outcome {
    const COUNT: u64 = 128;
    let curve = CurveId::Secp256k1;
    let q = curve.order();
    let (sk, _) = exchange(2048);
    let vk = verified(2048);
    let one = BigUint::from(1u8);
    for i in 0..COUNT {
        let mut rng = ChaCha20Rng::seed_from_u64(0x5eed_0000 + i);
        let [x, rho, k1, k2] = std::array::from_fn(|_| rng.gen_biguint_range(&one, q));
        let mut msg = [0u8; 48];
        rng.fill_bytes(&mut msg);

        let (key, _) = generate_api_key_audited(&x, curve, &vk, Some(&rho), &mut OsRng).map_err(fail("keygen"))?;
        let r2 = curve.mul_base(&k2).map_err(fail("R2"))?;
        let (r1, joint) = dh_server_respond_with(&r2, &k1).map_err(fail("R1"))?;
        ensure!(dh_client_complete(&k2, &r1).map_err(fail("R"))? == joint, "vector {i}: DH points disagree");
        let entry = EcdsaClientEntry { point: joint, k2: k2.clone(), nonce: vk.precompute_nonce(&mut OsRng) };
        let m = digest_scalar(curve, &message_digest(&msg));
        let presig = compute_presignature(&key, entry, &m, &mut OsRng).map_err(fail("presignature"))?;
        let sig = complete_signature(sk, k1.clone(), &presig, &m, key.public_key(), CompletionOptions::default())
            .map_err(fail("completion"))?;

        let k = &k1 * &k2 % q;
        let (reference, _) = k256_scalar(&x)
            .try_sign_prehashed(k256_scalar(&k), &message_digest(&msg).into())
            .map_err(fail("k256"))?;
        let reference = reference.normalize_s().unwrap_or(reference);
        ensure!(sig.to_bytes()[..] == reference.to_bytes()[..], "vector {i}: threshold signature differs from k256");
    }
    Ok(format!("{COUNT} pinned (x, rho, k1, k2, message) vectors equal k256 with k = k1*k2"))
}

fn c4_share_recombination() -> Outcome {
    const COUNT: usize = 10_000;
    let start = Instant::now();
    let curve = CurveId::Secp256k1;
    let q = curve.order();
    let (sk, _) = exchange(1024);
    let vk = verified(1024);
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    for i in 0..COUNT {
        let x = rng.gen_biguint_range(&BigUint::from(1u8), q);
        let (key, audit) = generate_api_key_audited(&x, curve, &vk, None, &mut rng).map_err(fail("keygen"))?;
        ensure!(key.client_share() * &audit.server_share % q == x, "ecdsa key {i}: x1*x2 != x");
        ensure!(sk.decrypt(key.enc_server_share()).map_err(fail("decrypt"))? == audit.server_share, "ecdsa key {i}: ciphertext");
        ensure!(key.public_key().to_hex() == k256_public_hex(&scalar_to_bytes32(&x)), "ecdsa key {i}: public key");
    }
    for i in 0..COUNT {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let (key, audit) = generate_api_key_ed_audited(&seed, &vk, None, &mut rng).map_err(fail("keygen"))?;
        let client = Option::<EdScalar>::from(EdScalar::from_canonical_bytes(key.client_share_bytes()))
            .ok_or("client share is not canonical")?;
        let server = decrypt_server_share(sk, key.enc_server_share()).map_err(fail("decrypt"))?;
        ensure!(server == audit.server_share, "eddsa key {i}: ciphertext");
        let joint = EdwardsPoint::mul_base(&(client + server)).compress().to_bytes();
        let expected = ed25519_dalek::SigningKey::from_bytes(&seed).verifying_key().to_bytes();
        ensure!(joint == expected && key.public_key().as_bytes() == &expected, "eddsa key {i}: (a1 + a2)*B != A");
    }
    Ok(format!("{COUNT} keys per scheme recombine ({:.1} s)", start.elapsed().as_secs_f64()))
}

fn c5_pool_stress_and_restart() -> Outcome {
    const WORKERS: usize = 64;
    const POINTS: usize = 96;
    const RACERS: usize = 4;
    const SPARE: usize = 16;
    let dir = tempfile::tempdir().map_err(fail("tempdir"))?;
    let storage = || Storage::Dir { path: dir.path().to_path_buf(), pool_key: [9u8; 32] };
    let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(START_MS));
    let svc = open_service(1024, storage(), clock.clone());
    let acct = account();
    let party = Party::register(&svc, &acct, vec![], 1024);
    let curve = CurveId::Secp256k1;

    // Prepare by hand so several presignatures can share one nonce point.
    let (k2s, r2s): (Vec<_>, Vec<_>) = (0..POINTS + SPARE).map(|_| dh_client_init(curve, &mut OsRng)).unzip();
    let resp = svc.handle_prepare(PrepareRequest { key_id: party.id().clone(), points: r2s.iter().map(CurvePoint::to_hex).collect() });
    let Response::Prepared { points } = resp else { return Err(format!("prepare: {resp:?}")) };
    let mut joints = Vec::new();
    for (k2, reply) in k2s.iter().zip(points) {
        let r1 = CurvePoint::from_hex(curve, &reply.point.ok_or("point rejected")?).map_err(fail("R1"))?;
        joints.push((dh_client_complete(k2, &r1).map_err(fail("R"))?, k2.clone()));
    }
    let build = |i: usize, tag: &str| {
        let (point, k2) = joints[i].clone();
        let entry = EcdsaClientEntry { point, k2, nonce: party.key.paillier_pk().precompute_nonce(&mut OsRng) };
        presign(&party.key, entry, format!("point {i} {tag}").as_bytes(), Action::Raw)
    };
    let mut attempts: Vec<(usize, SignRequest)> =
        (0..POINTS).flat_map(|i| (0..RACERS).map(move |j| (i, j))).map(|(i, j)| (i, build(i, &j.to_string()))).collect();
    let replays: Vec<SignRequest> = (0..POINTS).map(|i| build(i, "after restart")).collect();
    let spare = build(POINTS, "spare");
    attempts.sort_by_key(|(i, _)| (i * 7919) % POINTS);

    let queue = Mutex::new(attempts);
    let results = Mutex::new(Vec::new());
    let barrier = Barrier::new(WORKERS);
    std::thread::scope(|s| {
        for _ in 0..WORKERS {
            s.spawn(|| {
                barrier.wait();
                loop {
                    let Some((i, req)) = queue.lock().unwrap().pop() else { break };
                    let msg = hex::decode(&req.message).unwrap();
                    let resp = svc.handle_sign(req, None);
                    results.lock().unwrap().push((i, msg, resp));
                }
            });
        }
    });
    let mut per_point: HashMap<usize, usize> = HashMap::new();
    let public = party.key.public_key().to_hex();
    for (i, msg, resp) in results.into_inner().unwrap() {
        match resp {
            Response::Signed { signature, .. } => {
                ensure!(k256_verify(&public, &msg, &hex::decode(signature).unwrap_or_default()), "bad signature");
                *per_point.entry(i).or_default() += 1;
            }
            Response::Error { code: ErrorCode::ReplayedPoint, .. } => {}
            other => return Err(format!("unexpected response {other:?}")),
        }
    }
    ensure!(per_point.values().all(|&n| n == 1) && per_point.len() == POINTS, "some R signed twice or never: {per_point:?}");
    ensure!(svc.pool_len(party.id()) == SPARE, "pool holds {} after the race", svc.pool_len(party.id()));

    // No shutdown path runs: the process state is simply abandoned.
    std::mem::forget(svc);
    let svc = open_service(1024, storage(), clock);
    ensure!(svc.pool_len(party.id()) == SPARE, "restart: pool holds {}", svc.pool_len(party.id()));
    for req in replays {
        let resp = svc.handle_sign(req, None);
        ensure!(matches!(resp, Response::Error { code: ErrorCode::ReplayedPoint, .. }), "consumed point signed after restart: {resp:?}");
    }
    ensure!(matches!(svc.handle_sign(spare, None), Response::Signed { .. }), "unused point lost in restart");
    Ok(format!(
        "{WORKERS} workers, {} attempts on {POINTS} points: each R signed once; {POINTS} replays refused after restart",
        POINTS * RACERS
    ))
}

fn c6_bandwidth() -> Outcome {
    let bound = bench::REFERENCE_PRESIGNATURE_BYTES as f64 * 1.2;
    let svc = open_service(2048, Storage::Memory, Arc::new(SystemClock));
    let party = Party::register(&svc, &account(), vec![], 2048);
    let (_, r2) = dh_client_init(CurveId::Secp256k1, &mut OsRng);
    let resp = svc.handle_prepare(PrepareRequest { key_id: party.id().clone(), points: vec![r2.to_hex()] });
    let Response::Prepared { points } = resp else { return Err(format!("prepare: {resp:?}")) };
    let r1 = hex::decode(points[0].point.as_deref().ok_or("point rejected")?).map_err(fail("hex"))?;
    let req = party.request(&svc, b"bandwidth", Action::Raw);
    let presig = req.payload.len() / 2;
    ensure!(r2.as_bytes().len() == 33 && r1.len() == 33, "prep points are {} and {} bytes", r2.as_bytes().len(), r1.len());
    ensure!(presig as f64 <= bound, "presignature is {presig} B, bound {bound:.0} B");
    ensure!(matches!(svc.handle_sign(req, None), Response::Signed { .. }), "presignature did not complete");
    Ok(format!("presignature {presig} B (reference 545 B, bound {bound:.0} B); prep points 33 B each way"))
}

fn c7_latency() -> Outcome {
    let (sk, proof) = exchange(2048);
    let rows = bench::phase_rows(Scheme::Ecdsa, sk, proof, bench::MIN_RUNS);
    let paillier = bench::paillier_rows(sk, bench::MIN_RUNS);
    let ms = |rows: &[bench::Row], op: &str| {
        rows.iter().find(|r| r.operation == op).map(|r| r.stats.median_us / 1000.0).expect("row present")
    };
    let finalize = ms(&rows, "finalize_client") + ms(&rows, "finalize_server");
    let prep = ms(&rows, "prepare_client");
    let decrypt = ms(&paillier, "paillier_decrypt") * 1000.0;
    let precompute = ms(&paillier, "paillier_precompute") * 1000.0;
    let (_, ref_pre, _, ref_dec) = bench::REFERENCE_PAILLIER[2];
    let detail = format!(
        "finalize {finalize:.2} ms (<= 40), prep client {prep:.2} ms (<= 130), decrypt {decrypt:.0} us = {:.2}x of {ref_dec}, precompute {precompute:.0} us = {:.2}x of {ref_pre}",
        decrypt / ref_dec,
        precompute / ref_pre
    );
    let within = |v: f64, r: f64| (0.5 * r..=10.0 * r).contains(&v);
    ensure!(finalize <= 40.0 && prep <= 130.0 && within(decrypt, ref_dec) && within(precompute, ref_pre), "{detail}");
    Ok(detail)
}

fn c8_toy_key() -> Outcome {
    let start = Instant::now();
    let sk = PaillierSecretKey::from_primes(5u8.into(), 7u8.into(), KeyMode::InsecureTest).map_err(fail("key"))?;
    let pk = sk.public_key();
    let n = 35u32;
    let n_big = BigUint::from(n);
    let n2 = BigUint::from(n * n);
    let units: Vec<u32> = (2..n).filter(|r| r.gcd(&n) == 1).collect();
    ensure!(pk.nonce_from_r(1u8.into()).is_err(), "trivial nonce r = 1 accepted");
    let enc = |m: u32, r: u32| pk.encrypt(&m.into(), pk.nonce_from_r(r.into()).expect("unit"));

    let mut seen = HashSet::new();
    for m in 0..n {
        for &r in &units {
            let c = enc(m, r).map_err(fail("encrypt"))?;
            let oracle = (BigUint::from(n + 1).modpow(&m.into(), &n2) * BigUint::from(r).modpow(&n_big, &n2)) % &n2;
            ensure!(*c.value() == oracle, "Enc({m}; {r}) disagrees with (1+n)^m r^n");
            ensure!(sk.decrypt(&c).map_err(fail("decrypt"))? == m.into(), "Dec(Enc({m}; {r})) != {m}");
            ensure!(sk.decrypt_with_lambda(&c).map_err(fail("decrypt"))? == m.into(), "lambda Dec(Enc({m})) != {m}");
            seen.insert(c.value().clone());
        }
    }
    // Every unit mod n^2 except the r = 1 encryptions 1 + m*n appears exactly once.
    let expected: HashSet<BigUint> =
        (1..n * n).filter(|v| v.gcd(&n) == 1 && v % n != 1).map(BigUint::from).collect();
    ensure!(seen == expected, "{} ciphertexts, {} expected", seen.len(), expected.len());
    for a in 0..n {
        for b in 0..n {
            let (ra, rb) = (units[(a as usize) % units.len()], units[(b as usize * 7) % units.len()]);
            let (ca, cb) = (enc(a, ra).map_err(fail("enc"))?, enc(b, rb).map_err(fail("enc"))?);
            let sum = sk.decrypt(&pk.add(&ca, &cb).map_err(fail("add"))?).map_err(fail("dec"))?;
            ensure!(sum == ((a + b) % n).into(), "Dec(Enc({a}) * Enc({b})) != a + b");
            let prod = sk.decrypt(&pk.mul_scalar(&ca, &b.into()).map_err(fail("mul"))?).map_err(fail("dec"))?;
            ensure!(prod == ((a * b) % n).into(), "Dec(Enc({a})^{b}) != a * b");
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!(
        "{} (m, r) pairs and {} homomorphism pairs in {:.0} ms",
        n as usize * units.len(),
        n * n,
        elapsed.as_secs_f64() * 1000.0
    ))
}

/// Expected admission for a request of `amount` at `t` given the released
/// `(time, amount)` events, by summing the window directly.
fn window_oracle(released: &[(u64, u128)], t: u64, window_ms: u64, amount: u128, max: u128) -> bool {
    let used: u128 = released.iter().filter(|&&(u, _)| u <= t && u + window_ms > t).map(|&(_, a)| a).sum();
    used + amount <= max
}

fn limit_trace(rule: Rule, max: u128, seed: u64) -> Result<(usize, usize), String> {
    const EVENTS: usize = 10_000;
    let acct = account();
    let policy = Policy { policy_id: "trace".into(), account_key: acct.public_key(), version: 1, rules: vec![rule.clone()] };
    let window = match &rule {
        Rule::WithdrawalLimit { window, .. } | Rule::TradeLimit { window, .. } => window.millis(),
        _ => unreachable!(),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut ledger = UsageLedger::new();
    let mut released = Vec::new();
    let (mut t, mut allowed) = (START_MS, 0);
    for i in 0..EVENTS {
        t += if rng.gen_bool(0.05) { rng.gen_range(0..3 * window) / 2 } else { rng.gen_range(0..20 * 60_000) };
        let amount = rng.gen_range(0..=max / 3);
        let counted = rng.gen_bool(0.8);
        let action = match (&rule, counted) {
            (Rule::WithdrawalLimit { .. }, true) => withdrawal("BTC", amount, "d"),
            (Rule::WithdrawalLimit { .. }, false) => withdrawal("ETH", amount, "d"),
            (_, true) => trade("BTC-USD", amount),
            (_, false) => trade("ETH-USD", amount),
        };
        let ctx = SignContext {
            api_key_id: KeyId::parse("trace").expect("id"),
            action,
            source_ip: None,
            device_id: None,
            attributes: Default::default(),
            timestamp_ms: t,
        };
        let verdict = evaluate(&policy, &ctx, &ledger, t, Stage::Request);
        let expected = !counted || window_oracle(&released, t, window, amount, max);
        ensure!(verdict.is_allow() == expected, "{} event {i}: engine {verdict:?}, oracle allow={expected}", rule.kind());
        record_usage(&mut ledger, &ctx, &verdict, &i.to_string());
        if verdict.is_allow() && counted {
            released.push((t, amount));
            allowed += 1;
        }
    }
    Ok((EVENTS, allowed))
}

fn c9_policy_safety() -> Outcome {
    let w = limit_trace(Rule::WithdrawalLimit { asset: "BTC".into(), max_amount: Amount(1000), window: Window::Day }, 1000, 91)?;
    let t = limit_trace(
        Rule::TradeLimit { market: Some("BTC-USD".into()), max_amount: Amount(5000), window: Window::Week },
        5000,
        92,
    )?;

    let clock = Arc::new(ManualClock::new(START_MS));
    let svc = open_service(1024, Storage::Memory, clock.clone());
    let acct = account();
    let limits = vec![
        Rule::WithdrawalLimit { asset: "BTC".into(), max_amount: Amount(100), window: Window::Day },
        Rule::AddressAllowlist { addresses: vec!["bc1qgood".into()] },
    ];
    let party = Party::register(&svc, &acct, limits, 1024);
    let mut rng = ChaCha20Rng::seed_from_u64(93);
    let mut denials = 0;
    for i in 0..150 {
        clock.advance(rng.gen_range(0..2 * HOUR_MS));
        let dest = if rng.gen_bool(0.2) { "bc1qbad" } else { "bc1qgood" };
        let action = match rng.gen_range(0..3) {
            0 => Action::Raw,
            _ => withdrawal("BTC", rng.gen_range(0..40), dest),
        };
        let req = party.request(&svc, format!("w{i}").as_bytes(), action);
        let before = svc.pool_len(party.id());
        match svc.handle_sign(req, None) {
            Response::Denied { .. } => {
                denials += 1;
                ensure!(svc.pool_len(party.id()) == before, "denial {i} changed the exchange pool");
            }
            Response::Signed { .. } => ensure!(svc.pool_len(party.id()) + 1 == before, "signature {i} did not consume one point"),
            other => return Err(format!("request {i}: {other:?}")),
        }
    }

    let delay_s = 3600;
    let delayed = Party::register(&svc, &acct, vec![Rule::TimeDelayedWithdrawal { delay: delay_s }], 1024);
    let mut tickets = Vec::new();
    for i in 0..20 {
        clock.advance(rng.gen_range(0..20 * 60_000));
        let req = delayed.request(&svc, format!("d{i}").as_bytes(), withdrawal("BTC", 1, "x"));
        let before = svc.pool_len(delayed.id());
        let resp = svc.handle_sign(req, None);
        let Response::Deferred { ticket_id, release_at_ms } = resp else { return Err(format!("not deferred: {resp:?}")) };
        ensure!(release_at_ms == clock.now_ms() + delay_s * 1000, "release time {release_at_ms}");
        ensure!(svc.pool_len(delayed.id()) == before, "deferral changed the exchange pool");
        let cancel = i % 3 == 0;
        if cancel {
            let signature = acct.sign(&cancel_message(&ticket_id));
            let r = svc.handle_cancel(CancelRequest { ticket_id: ticket_id.clone(), signature });
            ensure!(matches!(r, Response::Cancelled { .. }), "cancel: {r:?}");
        }
        tickets.push((ticket_id, release_at_ms, cancel));
    }
    let end = clock.now_ms() + 2 * delay_s * 1000;
    while clock.now_ms() < end {
        clock.advance(7 * 60_000);
        svc.process_due();
        let now = clock.now_ms();
        for (id, release_at, cancelled) in &tickets {
            let state = svc.ticket(id).ok_or("ticket vanished")?.state;
            let released = matches!(state, TicketState::Released { .. });
            ensure!(!(released && (*cancelled || now < *release_at)), "ticket {id} released early or after cancel");
            ensure!(released || *cancelled || now < *release_at, "ticket {id} still {state:?} after release time");
        }
    }
    Ok(format!(
        "{} withdrawal events ({} allowed) and {} trade events ({} allowed) match the window oracle; {denials} denials left the pool unchanged; 20 deferrals honoured release time and cancels",
        w.0, w.1, t.0, t.1
    ))
}

fn proof_mutations(sk: &PaillierSecretKey, proof: &KeyCorrectnessProof) -> Vec<(String, PaillierPublicKey, KeyCorrectnessProof)> {
    let pk = sk.public_key().clone();
    let n = pk.n().clone();
    let mut out = Vec::new();
    let mut push = |label: String, pk: PaillierPublicKey, p: KeyCorrectnessProof| out.push((label, pk, p));
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    for i in 0..proof.sigma.len() {
        let s = proof.sigma[i].clone();
        let j = (i + 1) % proof.sigma.len();
        let bit = rng.gen_range(0..n.bits() - 1);
        let variants: Vec<(&str, BigUint)> = vec![
            ("+1", &s + 1u8),
            ("-1", &s - 1u8),
            ("negated", &n - &s),
            ("+n", &s + &n),
            ("zero", BigUint::default()),
            ("swapped", proof.sigma[j].clone()),
            ("random", rng.gen_biguint_below(&n)),
            ("bit flip", &s ^ (BigUint::from(1u8) << bit)),
            ("squared", &s * &s % &n),
        ];
        for (what, v) in variants {
            let mut p = proof.clone();
            p.sigma[i] = v;
            push(format!("sigma[{i}] {what}"), pk.clone(), p);
        }
    }
    for (name, f) in [
        ("alpha+1", (|p: &mut ProofParams| p.alpha += 1) as fn(&mut ProofParams)),
        ("alpha-1", |p| p.alpha -= 1),
        ("m1+1", |p| p.m1 += 1),
        ("m1-1", |p| p.m1 -= 1),
        ("m2+1", |p| p.m2 += 1),
        ("m2-1", |p| p.m2 -= 1),
    ] {
        let mut p = proof.clone();
        f(&mut p.params);
        push(format!("params {name}"), pk.clone(), p);
    }
    let mut p = proof.clone();
    p.sigma.pop();
    push("sigma truncated".into(), pk.clone(), p);
    let mut p = proof.clone();
    p.sigma.push(proof.sigma[0].clone());
    push("sigma extended".into(), pk.clone(), p);
    let mut p = proof.clone();
    p.sigma.clear();
    push("sigma empty".into(), pk.clone(), p);
    for (what, m) in [("n+2", &n + 2u8), ("n-2", &n - 2u8), ("n*3", &n * 3u8)] {
        if let Ok(other) = PaillierPublicKey::from_modulus(m) {
            push(format!("modulus {what}"), other, proof.clone());
        }
    }
    out
}

fn c10_key_proof() -> Outcome {
    let mut keys = vec![exchange(2048).0.clone()];
    while keys.len() < 10 {
        keys.push(PaillierSecretKey::generate(2048, &mut OsRng).map_err(fail("keygen"))?);
    }
    for (i, sk) in keys.iter().enumerate() {
        let proof = KeyCorrectnessProof::prove(sk).map_err(fail("prove"))?;
        ensure!(proof.verify(sk.public_key(), ProofParams::STANDARD).is_ok(), "honest key {i} rejected");
    }
    let (sk, proof) = exchange(2048);
    let mutations = proof_mutations(sk, proof);
    ensure!(mutations.len() >= 100, "only {} mutations", mutations.len());
    for (label, pk, p) in &mutations {
        ensure!(p.verify(pk, ProofParams::STANDARD).is_err(), "mutation accepted: {label}");
        ensure!(VerifiedPaillierKey::verify(pk.clone(), p).is_err(), "mutation accepted by key wrapper: {label}");
    }
    let stats = bench::measure(20, || proof.verify(sk.public_key(), ProofParams::STANDARD).expect("honest"));
    let verify_ms = stats.median_us / 1000.0;
    ensure!(verify_ms <= 410.0, "2048-bit verification takes {verify_ms:.1} ms, bound 410 ms");
    Ok(format!(
        "10 honest 2048-bit keys accepted; {} single-field mutations rejected; verify {verify_ms:.1} ms (bound 410 ms)",
        mutations.len()
    ))
}

fn c11_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail("tempdir"))?;
    let (sk, proof) = exchange(2048);
    let key_path = dir.path().join("exchange.json");
    write_json(&key_path, &ExchangeKeyFile::new(sk, proof.clone())).map_err(fail("write key"))?;
    let cfg = ServeConfig {
        listen: Some("127.0.0.1:0".into()),
        http: None,
        http_threads: 1,
        paillier_key: key_path,
        storage: None,
        test: TestFlags::default(),
    };
    let running = serve(&cfg, Arc::new(SystemClock)).map_err(fail("serve"))?;
    let addr = running.tcp_addr().ok_or("no tcp listener")?;
    let wire = Recorder::new(TcpTransport::new(addr.to_string()));
    let mut steps = vec![format!("serve on {addr}")];

    let acct = account();
    let full = FullKey::generate(Scheme::Ecdsa, CurveId::Secp256k1, &mut OsRng);
    let public = k256_public_hex(&hex::decode(full.to_file().secret).map_err(fail("secret"))?);
    let (paillier, fetched) = fetch_exchange_key(&wire).map_err(fail("fetch"))?;
    let file = mint_api_key(full, &paillier, &fetched, &acct.public_key(), 0, &mut OsRng).map_err(fail("mint"))?;
    steps.push("mint".into());

    let mut session = Session::open(&wire, file, PoolConfig { batch_size: 8, low_water: 0 }).map_err(fail("open"))?;
    session.set_auto_refill(false);
    let rules = |addresses: Vec<&str>| {
        vec![
            Rule::MarketAllowlist { markets: vec!["BTC-USD".into()] },
            Rule::WithdrawalLimit { asset: "BTC".into(), max_amount: Amount(100), window: Window::Day },
            Rule::AddressAllowlist { addresses: addresses.into_iter().map(String::from).collect() },
        ]
    };
    session.register(signed_policy(&acct, 1, rules(vec!["bc1qcold"]))).map_err(fail("register"))?;
    steps.push("register".into());
    let added = session.refill(8).map_err(fail("prepare"))?.added;
    ensure!(added == 8, "prepared {added} of 8 points");
    steps.push(format!("prepare {added}"));
    let key_id = session.key_file().key_id.clone();
    let exchange_pool = || running.service.pool_len(&key_id);

    let sign = |steps: &mut Vec<String>, label: &str, msg: &[u8], action: Action| -> Result<Result<Vec<u8>, ClientError>, String> {
        wire.clear();
        let result = session.sign(msg, &SignOptions::action(action));
        let transcript = wire.transcript();
        ensure!(
            transcript.len() == 1 && transcript[0].method == "sign",
            "{label}: {} messages on the wire: {:?}",
            transcript.len(),
            transcript.iter().map(|t| t.method).collect::<Vec<_>>()
        );
        steps.push(format!("{label} ({} B out, {} B back)", transcript[0].request_bytes, transcript[0].response_bytes));
        Ok(result.map(|o| match o {
            SignOutcome::Signed { signature, .. } => signature,
            SignOutcome::Deferred { .. } => Vec::new(),
        }))
    };

    let sig = sign(&mut steps, "sign trade", b"buy 1 BTC-USD", trade("BTC-USD", 1))?.map_err(fail("trade"))?;
    ensure!(k256_verify(&public, b"buy 1 BTC-USD", &sig), "trade signature rejected by k256");

    let pool_before = exchange_pool();
    match sign(&mut steps, "denied withdrawal", b"withdraw 50 to hot", withdrawal("BTC", 50, "bc1qhot"))? {
        Err(ClientError::Denied { code: DenyCode::AddressNotAllowed, .. }) => {}
        other => return Err(format!("withdrawal to unlisted address: {other:?}")),
    }
    ensure!(exchange_pool() == pool_before, "denial consumed an exchange point");

    let version = session
        .update_policy(signed_policy(&acct, 2, rules(vec!["bc1qcold", "bc1qhot"])))
        .map_err(fail("policy update"))?;
    ensure!(version == 2, "policy version {version}");
    steps.push("policy update".into());

    let sig = sign(&mut steps, "allowed withdrawal", b"withdraw 50 to hot", withdrawal("BTC", 50, "bc1qhot"))?
        .map_err(fail("withdrawal"))?;
    ensure!(k256_verify(&public, b"withdraw 50 to hot", &sig), "withdrawal signature rejected by k256");
    ensure!(exchange_pool() == 8 - 2, "exchange pool holds {}", exchange_pool());
    drop(session);
    Ok(steps.join(" -> "))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("ecdsa-1000-signatures", c1_ecdsa_signatures),
        ("eddsa-1000-signatures", c2_eddsa_signatures),
        ("bit-exact-vectors", c3_bit_exact_vectors),
        ("share-recombination", c4_share_recombination),
        ("pool-stress-and-restart", c5_pool_stress_and_restart),
        ("bandwidth", c6_bandwidth),
        ("latency", c7_latency),
        ("toy-paillier", c8_toy_key),
        ("policy-safety", c9_policy_safety),
        ("key-proof", c10_key_proof),
        ("end-to-end-session", c11_end_to_end),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if only.is_some_and(|o| o != number) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {number:>2} {name} [{secs:.1} s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {number:>2} {name} [{secs:.1} s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
