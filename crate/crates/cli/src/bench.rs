//! Timing harness. Each operation runs a few warmup iterations, then at
//! least [`MIN_RUNS`] timed ones on one thread; we report the median and
//! the 90th percentile in microseconds.

use std::fmt::Write as _;
use std::time::Instant;

use apikey_core::curve::CurveId;
use apikey_core::ecdsa::{
    complete_signature, compute_presignature, dh_client_complete, dh_client_init, dh_server_respond,
    generate_api_key, verify_ecdsa, CompletionOptions, EcdsaClientEntry,
};
use apikey_core::eddsa::{
    decrypt_server_share, ed_client_complete, ed_client_init, ed_client_sign, ed_prepare, ed_server_complete,
    ed_server_respond, generate_api_key_ed, verify_ed25519, POINT_LEN,
};
use apikey_core::message::{digest_scalar, message_digest};
use apikey_core::paillier::{KeyCorrectnessProof, PaillierSecretKey, VerifiedPaillierKey};
use apikey_core::Scheme;
use num_bigint::RandBigInt;
use rand::rngs::OsRng;
use rand::RngCore;

pub const MIN_RUNS: usize = 100;
pub const WARMUP: usize = 5;
pub const CSV_HEADER: &str = "operation,key_size_or_scheme,median_us,p90_us,bytes";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub median_us: f64,
    pub p90_us: f64,
    pub runs: usize,
}

impl Stats {
    pub fn from_samples(mut samples_us: Vec<f64>) -> Self {
        assert!(!samples_us.is_empty(), "no samples");
        samples_us.sort_by(f64::total_cmp);
        let n = samples_us.len();
        let median_us = if n % 2 == 1 { samples_us[n / 2] } else { (samples_us[n / 2 - 1] + samples_us[n / 2]) / 2.0 };
        let p90_us = samples_us[((n * 9).div_ceil(10)).saturating_sub(1)];
        Self { median_us, p90_us, runs: n }
    }
}

/// Times `run` on a fresh input from `setup` each iteration; setup is not timed.
pub fn measure_with<I, O>(runs: usize, mut setup: impl FnMut() -> I, mut run: impl FnMut(I) -> O) -> Stats {
    for _ in 0..WARMUP {
        std::hint::black_box(run(setup()));
    }
    let samples = (0..runs.max(1))
        .map(|_| {
            let input = setup();
            let start = Instant::now();
            std::hint::black_box(run(input));
            start.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    Stats::from_samples(samples)
}

pub fn measure<O>(runs: usize, mut run: impl FnMut() -> O) -> Stats {
    measure_with(runs, || (), |_| run())
}

#[derive(Clone, Debug)]
pub struct Row {
    pub operation: &'static str,
    pub key_size_or_scheme: String,
    pub stats: Stats,
    pub bytes: Option<usize>,
    /// Published reference, as printed (e.g. "2081 us").
    pub reference: Option<String>,
}

pub fn csv(rows: &[Row]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let bytes = r.bytes.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{:.1},{:.1},{}",
            r.operation, r.key_size_or_scheme, r.stats.median_us, r.stats.p90_us, bytes
        );
    }
    out
}

pub fn table(rows: &[Row]) -> String {
    let mut out = format!(
        "{:<20} {:>8} {:>14} {:>14} {:>8}  {}\n",
        "operation", "size", "median", "p90", "bytes", "reference"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<20} {:>8} {:>11.1} us {:>11.1} us {:>8}  {}",
            r.operation,
            r.key_size_or_scheme,
            r.stats.median_us,
            r.stats.p90_us,
            r.bytes.map(|b| format!("{b} B")).unwrap_or_else(|| "-".into()),
            r.reference.as_deref().unwrap_or("-"),
        );
    }
    out
}

/// Published Paillier timings in microseconds: (bits, precompute, encrypt, decrypt).
/// The 512-bit encrypt figure is given only as "< 1".
pub const REFERENCE_PAILLIER: [(u64, f64, f64, f64); 6] = [
    (512, 320.0, 1.0, 106.0),
    (1024, 2106.0, 1.0, 453.0),
    (2048, 13595.0, 4.0, 2081.0),
    (3072, 39583.0, 7.0, 6032.0),
    (4096, 74151.0, 12.0, 13666.0),
    (8192, 420651.0, 35.0, 78387.0),
];

/// Published per-phase figures for secp256k1 at 2048-bit Paillier.
pub const REFERENCE_PREPARE_CLIENT_MS: f64 = 13.0;
pub const REFERENCE_PREPARE_SERVER_MS: f64 = 0.16;
pub const REFERENCE_FINALIZE_CLIENT_MS: f64 = 1.72;
pub const REFERENCE_FINALIZE_SERVER_MS: f64 = 2.46;
pub const REFERENCE_POINT_BYTES: usize = 33;
pub const REFERENCE_PRESIGNATURE_BYTES: usize = 545;

fn reference_paillier(bits: u64) -> Option<(f64, f64, f64)> {
    REFERENCE_PAILLIER.iter().find(|r| r.0 == bits).map(|r| (r.1, r.2, r.3))
}

fn us(v: f64) -> String {
    format!("{v} us")
}

/// Precompute, encrypt and decrypt timings for one key.
pub fn paillier_rows(sk: &PaillierSecretKey, runs: usize) -> Vec<Row> {
    let pk = sk.public_key();
    let bits = pk.bits();
    let reference = reference_paillier(bits);
    let size = bits.to_string();
    let precompute = measure(runs, || pk.precompute_nonce(&mut OsRng));
    let encrypt = measure_with(
        runs,
        || (OsRng.gen_biguint_below(pk.n()), pk.precompute_nonce(&mut OsRng)),
        |(m, nonce)| pk.encrypt(&m, nonce).expect("plaintext below n"),
    );
    let decrypt = measure_with(
        runs,
        || pk.encrypt_fresh(&OsRng.gen_biguint_below(pk.n()), &mut OsRng).expect("plaintext below n"),
        |c| sk.decrypt(&c).expect("valid ciphertext"),
    );
    let ct_len = pk.ciphertext_len();
    vec![
        Row { operation: "paillier_precompute", key_size_or_scheme: size.clone(), stats: precompute, bytes: None, reference: reference.map(|r| us(r.0)) },
        Row { operation: "paillier_encrypt", key_size_or_scheme: size.clone(), stats: encrypt, bytes: Some(ct_len), reference: reference.map(|r| us(r.1)) },
        Row { operation: "paillier_decrypt", key_size_or_scheme: size, stats: decrypt, bytes: Some(ct_len), reference: reference.map(|r| us(r.2)) },
    ]
}

fn ms(v: f64) -> String {
    format!("{v} ms")
}

/// Client and exchange compute per signing phase, and message sizes.
pub fn phase_rows(scheme: Scheme, sk: &PaillierSecretKey, proof: &KeyCorrectnessProof, runs: usize) -> Vec<Row> {
    let vk = VerifiedPaillierKey::verify_with(sk.public_key().clone(), proof, proof.params)
        .expect("exchange key matches its proof");
    let name = scheme.to_string();
    let with_ref = |operation, stats, bytes, reference: f64, ref_bytes: Option<usize>| Row {
        operation,
        key_size_or_scheme: name.clone(),
        stats,
        bytes,
        reference: (scheme == Scheme::Ecdsa)
            .then(|| ref_bytes.map_or_else(|| ms(reference), |b| format!("{} / {b} B", ms(reference)))),
    };
    let mut msg = [0u8; 32];
    match scheme {
        Scheme::Ecdsa => {
            let curve = CurveId::Secp256k1;
            let x = curve.random_scalar(&mut OsRng);
            let key = generate_api_key(&x, curve, &vk, &mut OsRng).expect("keygen");
            let (_, r2) = dh_client_init(curve, &mut OsRng);
            let (_, r1, _) = dh_server_respond(&r2, &mut OsRng).expect("valid point");

            let prep_client = measure(runs, || {
                let (k2, r2) = dh_client_init(curve, &mut OsRng);
                let point = dh_client_complete(&k2, &r1).expect("valid point");
                let nonce = vk.precompute_nonce(&mut OsRng);
                (r2, EcdsaClientEntry { point, k2, nonce })
            });
            let prep_server = measure(runs, || dh_server_respond(&r2, &mut OsRng).expect("valid point"));

            let fresh = || {
                let (k2, r2) = dh_client_init(curve, &mut OsRng);
                let (k1, r1, _) = dh_server_respond(&r2, &mut OsRng).expect("valid point");
                let point = dh_client_complete(&k2, &r1).expect("valid point");
                OsRng.fill_bytes(&mut msg);
                let m = digest_scalar(curve, &message_digest(&msg));
                (k1, EcdsaClientEntry { point, k2, nonce: vk.precompute_nonce(&mut OsRng) }, m)
            };
            let mut presig_bytes = 0;
            let mut signed = Vec::new();
            let mut fresh = fresh;
            let server = measure_with(
                runs,
                || {
                    let (k1, entry, m) = fresh();
                    let presig = compute_presignature(&key, entry, &m, &mut OsRng).expect("presignature");
                    (k1, presig, m)
                },
                |(k1, presig, m)| {
                    let sig = complete_signature(sk, k1, &presig, &m, key.public_key(), CompletionOptions::default())
                        .expect("signature verifies");
                    presig_bytes = presig.to_bytes(sk.public_key()).len();
                    signed.push((m, sig));
                },
            );
            let mut pending = signed.into_iter().cycle();
            let client = measure_with(
                runs,
                || {
                    let (_, entry, m) = fresh();
                    (entry, m, pending.next().expect("non-empty"))
                },
                |(entry, m, (m_prev, sig))| {
                    let presig = compute_presignature(&key, entry, &m, &mut OsRng).expect("presignature");
                    let bytes = presig.to_bytes(key.paillier_pk());
                    assert!(verify_ecdsa(key.public_key(), &m_prev, &sig));
                    bytes
                },
            );
            vec![
                with_ref("prepare_client", prep_client, Some(r2.as_bytes().len()), REFERENCE_PREPARE_CLIENT_MS, Some(REFERENCE_POINT_BYTES)),
                with_ref("prepare_server", prep_server, Some(r1.as_bytes().len()), REFERENCE_PREPARE_SERVER_MS, Some(REFERENCE_POINT_BYTES)),
                with_ref("finalize_client", client, Some(presig_bytes), REFERENCE_FINALIZE_CLIENT_MS, Some(REFERENCE_PRESIGNATURE_BYTES)),
                with_ref("finalize_server", server, None, REFERENCE_FINALIZE_SERVER_MS, None),
            ]
        }
        Scheme::Eddsa => {
            let mut secret = [0u8; 32];
            OsRng.fill_bytes(&mut secret);
            let key = generate_api_key_ed(&secret, &vk, &mut OsRng).expect("keygen");
            let server_share = decrypt_server_share(sk, key.enc_server_share()).expect("share decrypts");
            let (_, rc) = ed_client_init(&mut OsRng);
            let (_, rs, _) = ed_server_respond(&rc, &mut OsRng).expect("valid point");
            let prep_client = measure(runs, || {
                let (r_c, point) = ed_client_init(&mut OsRng);
                (point, ed_client_complete(&r_c, &rs).expect("valid point"))
            });
            let prep_server = measure(runs, || ed_server_respond(&rc, &mut OsRng).expect("valid point"));
            let mut finished = Vec::new();
            let server = measure_with(
                runs,
                || {
                    let (client, server) = ed_prepare(&mut OsRng, &mut OsRng).expect("prepare");
                    OsRng.fill_bytes(&mut msg);
                    (ed_client_sign(&key, client, &msg), server.r_s, msg)
                },
                |(partial, r_s, msg)| {
                    let sig = ed_server_complete(&server_share, r_s, &partial, &msg, key.public_key()).expect("verifies");
                    finished.push((msg, sig));
                },
            );
            let mut pending = finished.into_iter().cycle();
            let mut partial_len = 0;
            let client = measure_with(
                runs,
                || (ed_prepare(&mut OsRng, &mut OsRng).expect("prepare").0, pending.next().expect("non-empty")),
                |(entry, (m, sig))| {
                    let partial = ed_client_sign(&key, entry, &m);
                    partial_len = partial.to_bytes().len();
                    assert!(verify_ed25519(key.public_key(), &m, &sig));
                },
            );
            vec![
                with_ref("prepare_client", prep_client, Some(POINT_LEN), 0.0, None),
                with_ref("prepare_server", prep_server, Some(POINT_LEN), 0.0, None),
                with_ref("finalize_client", client, Some(partial_len), 0.0, None),
                with_ref("finalize_server", server, None, 0.0, None),
            ]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let s = Stats::from_samples((1..=100).map(f64::from).collect());
        assert_eq!(s.median_us, 50.5);
        assert_eq!(s.p90_us, 90.0);
        let s = Stats::from_samples(vec![3.0, 1.0, 2.0]);
        assert_eq!(s.median_us, 2.0);
        assert_eq!(s.p90_us, 3.0);
    }

    #[test]
    fn csv_shape() {
        let row = Row {
            operation: "paillier_decrypt",
            key_size_or_scheme: "2048".into(),
            stats: Stats { median_us: 1.24, p90_us: 2.0, runs: 100 },
            bytes: Some(512),
            reference: None,
        };
        let text = csv(&[row.clone(), Row { bytes: None, ..row }]);
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines, [CSV_HEADER, "paillier_decrypt,2048,1.2,2.0,512", "paillier_decrypt,2048,1.2,2.0,"]);
    }
}
