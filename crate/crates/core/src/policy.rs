//! Signing policies.
//!
//! A [`Policy`] is an ordered list of [`Rule`]s signed by the account key.
//! [`evaluate`] decides whether the exchange takes part in a signature,
//! given a [`SignContext`] built on the server and the key's
//! [`UsageLedger`]. All rules must pass; the first failure is reported.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::net::IpAddr;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::account::{AccountPublicKey, AccountSignature, AccountSigningKey};
use crate::KeyId;

/// Non-negative asset amount in the asset's smallest unit. JSON form is a
/// decimal string.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Amount(pub u128);

impl TryFrom<String> for Amount {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        let canonical = !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'));
        if !canonical {
            return Err(format!("amount {s:?} is not a canonical decimal string"));
        }
        s.parse().map(Amount).map_err(|e| format!("amount {s:?}: {e}"))
    }
}

impl From<Amount> for String {
    fn from(a: Amount) -> Self {
        a.0.to_string()
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Rolling window length. JSON form is seconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub enum Window {
    Day,
    Week,
    Month,
}

impl Window {
    pub const fn seconds(self) -> u64 {
        match self {
            Window::Day => 86_400,
            Window::Week => 7 * 86_400,
            Window::Month => 30 * 86_400,
        }
    }

    pub const fn millis(self) -> u64 {
        self.seconds() * 1000
    }
}

impl TryFrom<u64> for Window {
    type Error = String;

    fn try_from(s: u64) -> Result<Self, Self::Error> {
        match s {
            86_400 => Ok(Window::Day),
            604_800 => Ok(Window::Week),
            2_592_000 => Ok(Window::Month),
            other => Err(format!("window of {other} s is not one of 86400, 604800, 2592000")),
        }
    }
}

impl From<Window> for u64 {
    fn from(w: Window) -> Self {
        w.seconds()
    }
}

pub const MAX_WINDOW_MS: u64 = Window::Month.millis();

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Rule {
    WithdrawalLimit {
        asset: String,
        max_amount: Amount,
        window: Window,
    },
    TradeLimit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        market: Option<String>,
        max_amount: Amount,
        window: Window,
    },
    AddressAllowlist {
        addresses: Vec<String>,
    },
    MarketAllowlist {
        markets: Vec<String>,
    },
    IpAllowlist {
        cidrs: Vec<IpNet>,
    },
    DeviceAllowlist {
        devices: Vec<String>,
    },
    /// Client-asserted attribute, such as a location tag. Not verified.
    AttributeMatch {
        name: String,
        allowed: Vec<String>,
    },
    TimeDelayedWithdrawal {
        /// Seconds.
        delay: u64,
    },
}

impl Rule {
    fn validate(&self) -> Result<(), String> {
        let empty = match self {
            Rule::AddressAllowlist { addresses } => addresses.is_empty(),
            Rule::MarketAllowlist { markets } => markets.is_empty(),
            Rule::IpAllowlist { cidrs } => cidrs.is_empty(),
            Rule::DeviceAllowlist { devices } => devices.is_empty(),
            Rule::AttributeMatch { name, allowed } => name.is_empty() || allowed.is_empty(),
            Rule::TimeDelayedWithdrawal { delay } => *delay == 0,
            Rule::WithdrawalLimit { asset, .. } => asset.is_empty(),
            Rule::TradeLimit { market, .. } => market.as_deref() == Some(""),
        };
        if empty {
            return Err(format!("rule {} has an empty list or zero parameter", self.kind()));
        }
        Ok(())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Rule::WithdrawalLimit { .. } => "withdrawal_limit",
            Rule::TradeLimit { .. } => "trade_limit",
            Rule::AddressAllowlist { .. } => "address_allowlist",
            Rule::MarketAllowlist { .. } => "market_allowlist",
            Rule::IpAllowlist { .. } => "ip_allowlist",
            Rule::DeviceAllowlist { .. } => "device_allowlist",
            Rule::AttributeMatch { .. } => "attribute_match",
            Rule::TimeDelayedWithdrawal { .. } => "time_delayed_withdrawal",
        }
    }

    /// Rules that only make sense for a structured trade or withdrawal.
    fn is_action_specific(&self) -> bool {
        matches!(
            self,
            Rule::WithdrawalLimit { .. }
                | Rule::TradeLimit { .. }
                | Rule::AddressAllowlist { .. }
                | Rule::MarketAllowlist { .. }
                | Rule::TimeDelayedWithdrawal { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub policy_id: String,
    pub account_key: AccountPublicKey,
    pub version: u64,
    pub rules: Vec<Rule>,
}

impl Policy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.policy_id.is_empty() {
            return Err(PolicyError::Invalid("empty policy id".into()));
        }
        self.rules.iter().try_for_each(|r| r.validate().map_err(PolicyError::Invalid))
    }

    /// Canonical JSON: sorted keys, no insignificant whitespace.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(self)
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_bytes()).into()
    }

    pub fn sign(self, key: &AccountSigningKey) -> SignedPolicy {
        let signature = key.sign_digest(&self.digest());
        SignedPolicy { policy: self, signature }
    }

    fn has_action_specific_rules(&self) -> bool {
        self.rules.iter().any(Rule::is_action_specific)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedPolicy {
    pub policy: Policy,
    pub signature: AccountSignature,
}

impl SignedPolicy {
    /// The signature must verify under the account key named inside the
    /// policy, and the rules must be well formed.
    pub fn verify(&self) -> Result<(), PolicyError> {
        self.policy.validate()?;
        if !self.policy.account_key.verify_digest(&self.policy.digest(), &self.signature) {
            return Err(PolicyError::BadSignature);
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy signature does not verify under the account key")]
    BadSignature,
    #[error("stale policy version {offered}, current is {current}")]
    StaleVersion { current: u64, offered: u64 },
    #[error("policy names a different account key")]
    AccountKeyChanged,
    #[error("invalid policy: {0}")]
    Invalid(String),
}

/// Accepts `new` as the successor of `current` if it is signed by the same
/// account key and carries a strictly larger version.
pub fn update_policy(current: &SignedPolicy, new: SignedPolicy) -> Result<SignedPolicy, PolicyError> {
    if new.policy.account_key != current.policy.account_key {
        return Err(PolicyError::AccountKeyChanged);
    }
    new.verify()?;
    if new.policy.version <= current.policy.version {
        return Err(PolicyError::StaleVersion { current: current.policy.version, offered: new.policy.version });
    }
    Ok(new)
}

/// Serialises any value as canonical JSON: object keys sorted
/// lexicographically by their UTF-8 bytes, compact separators.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    fn write(v: &Value, out: &mut Vec<u8>) {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push(b'{');
                for (i, k) in keys.into_iter().enumerate() {
                    if i > 0 {
                        out.push(b',');
                    }
                    out.extend(serde_json::to_vec(k).expect("string"));
                    out.push(b':');
                    write(&map[k], out);
                }
                out.push(b'}');
            }
            Value::Array(items) => {
                out.push(b'[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(b',');
                    }
                    write(item, out);
                }
                out.push(b']');
            }
            scalar => out.extend(serde_json::to_vec(scalar).expect("scalar")),
        }
    }
    let value = serde_json::to_value(value).expect("policy types always serialise");
    let mut out = Vec::new();
    write(&value, &mut out);
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Trade { market: String, amount: Amount },
    Withdrawal { asset: String, amount: Amount, destination: String },
    Raw,
}

/// Everything the policy sees about one signing request. The timestamp and
/// source address come from the server, never from the request body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignContext {
    pub api_key_id: KeyId,
    pub action: Action,
    #[serde(default)]
    pub source_ip: Option<IpAddr>,
    #[serde(default)]
    pub device_id: Option<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    /// Milliseconds since the Unix epoch, UTC.
    pub timestamp_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenyCode {
    LimitExceeded,
    AddressNotAllowed,
    MarketNotAllowed,
    IpNotAllowed,
    DeviceNotAllowed,
    AttributeNotAllowed,
    RawNotPermitted,
    MalformedContext,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Deny { code: DenyCode, message: String },
    Defer { release_at_ms: u64 },
}

impl Verdict {
    fn deny(code: DenyCode, message: impl Into<String>) -> Self {
        Verdict::Deny { code, message: message.into() }
    }

    pub fn is_allow(&self) -> bool {
        matches!(self, Verdict::Allow)
    }
}

/// Whether a request is being admitted or a deferred one is being released.
/// Delay rules only apply on admission.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Request,
    Release,
}

/// What a usage event counts against.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UsageBucket {
    Withdrawal { asset: String },
    Trade { market: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub timestamp_ms: u64,
    pub bucket: UsageBucket,
    pub amount: Amount,
    pub signature_id: String,
}

/// Released usage for one API key, in timestamp order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    events: Vec<UsageEvent>,
    #[serde(default)]
    recorded: HashSet<String>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[UsageEvent] {
        &self.events
    }

    pub fn has_recorded(&self, signature_id: &str) -> bool {
        self.recorded.contains(signature_id)
    }

    /// Sum of events matching `pred` with timestamps in `(now - window, now]`.
    pub fn window_sum(&self, now_ms: u64, window: Window, pred: impl Fn(&UsageBucket) -> bool) -> u128 {
        let start = now_ms.checked_sub(window.millis());
        self.events
            .iter()
            .rev()
            .take_while(|e| start.is_none_or(|s| e.timestamp_ms > s))
            .filter(|e| e.timestamp_ms <= now_ms && pred(&e.bucket))
            .map(|e| e.amount.0)
            .fold(0u128, u128::saturating_add)
    }

    /// Drops events too old to count against any window. Signature ids stay
    /// so replays remain no-ops.
    pub fn prune(&mut self, now_ms: u64) {
        if let Some(start) = now_ms.checked_sub(MAX_WINDOW_MS) {
            self.events.retain(|e| e.timestamp_ms > start);
        }
    }

    /// Appends one event. Timestamps never go backwards: an event older
    /// than the newest recorded one is stamped with the newest time.
    pub fn push(&mut self, mut event: UsageEvent) -> bool {
        if !self.recorded.insert(event.signature_id.clone()) {
            return false;
        }
        if let Some(last) = self.events.last() {
            event.timestamp_ms = event.timestamp_ms.max(last.timestamp_ms);
        }
        self.events.push(event);
        true
    }
}

fn bucket_of(action: &Action) -> Option<(UsageBucket, Amount)> {
    match action {
        Action::Trade { market, amount } => Some((UsageBucket::Trade { market: market.clone() }, *amount)),
        Action::Withdrawal { asset, amount, .. } => Some((UsageBucket::Withdrawal { asset: asset.clone() }, *amount)),
        Action::Raw => None,
    }
}

/// Records a released signature. Only `Allow` verdicts count, and each
/// signature id is recorded at most once. Returns whether an event was
/// appended.
pub fn record_usage(ledger: &mut UsageLedger, ctx: &SignContext, verdict: &Verdict, signature_id: &str) -> bool {
    if !verdict.is_allow() || ledger.has_recorded(signature_id) {
        return false;
    }
    let Some((bucket, amount)) = bucket_of(&ctx.action) else {
        ledger.recorded.insert(signature_id.to_owned());
        return false;
    };
    ledger.push(UsageEvent { timestamp_ms: ctx.timestamp_ms, bucket, amount, signature_id: signature_id.to_owned() })
}

/// Pure policy decision for `ctx` at time `now_ms`.
pub fn evaluate(policy: &Policy, ctx: &SignContext, ledger: &UsageLedger, now_ms: u64, stage: Stage) -> Verdict {
    if ctx.action == Action::Raw && policy.has_action_specific_rules() {
        return Verdict::deny(
            DenyCode::RawNotPermitted,
            "raw signing is disabled while the policy restricts trades or withdrawals",
        );
    }
    let mut delay_s: Option<u64> = None;
    for (i, rule) in policy.rules.iter().enumerate() {
        let check = check_rule(rule, ctx, ledger, now_ms);
        match check {
            Check::Pass => {}
            Check::Fail(code, msg) => return Verdict::deny(code, format!("rule {i} ({}): {msg}", rule.kind())),
            Check::Delay(d) => {
                if stage == Stage::Request {
                    delay_s = Some(delay_s.map_or(d, |cur| cur.max(d)));
                }
            }
        }
    }
    match delay_s {
        Some(d) => Verdict::Defer { release_at_ms: now_ms.saturating_add(d.saturating_mul(1000)) },
        None => Verdict::Allow,
    }
}

enum Check {
    Pass,
    Fail(DenyCode, String),
    Delay(u64),
}

fn check_rule(rule: &Rule, ctx: &SignContext, ledger: &UsageLedger, now_ms: u64) -> Check {
    use Check::*;
    match (rule, &ctx.action) {
        (Rule::WithdrawalLimit { asset, max_amount, window }, Action::Withdrawal { asset: a, amount, .. }) if a == asset => {
            let used = ledger.window_sum(now_ms, *window, |b| matches!(b, UsageBucket::Withdrawal { asset: x } if x == asset));
            limit(used, *amount, *max_amount, *window)
        }
        (Rule::TradeLimit { market, max_amount, window }, Action::Trade { market: m, amount })
            if market.as_ref().is_none_or(|x| x == m) =>
        {
            let used = ledger.window_sum(now_ms, *window, |b| match b {
                UsageBucket::Trade { market: x } => market.as_ref().is_none_or(|want| want == x),
                UsageBucket::Withdrawal { .. } => false,
            });
            limit(used, *amount, *max_amount, *window)
        }
        (Rule::AddressAllowlist { addresses }, Action::Withdrawal { destination, .. }) => {
            if addresses.iter().any(|a| a == destination) {
                Pass
            } else {
                Fail(DenyCode::AddressNotAllowed, format!("destination {destination} is not allowlisted"))
            }
        }
        (Rule::MarketAllowlist { markets }, Action::Trade { market, .. }) => {
            if markets.iter().any(|m| m == market) {
                Pass
            } else {
                Fail(DenyCode::MarketNotAllowed, format!("market {market} is not allowlisted"))
            }
        }
        (Rule::IpAllowlist { cidrs }, _) => match ctx.source_ip {
            None => Fail(DenyCode::MalformedContext, "request has no source address".into()),
            Some(ip) if cidrs.iter().any(|net| net.contains(&ip)) => Pass,
            Some(ip) => Fail(DenyCode::IpNotAllowed, format!("source {ip} is outside the allowlist")),
        },
        (Rule::DeviceAllowlist { devices }, _) => match &ctx.device_id {
            None => Fail(DenyCode::MalformedContext, "request has no device id".into()),
            Some(d) if devices.contains(d) => Pass,
            Some(d) => Fail(DenyCode::DeviceNotAllowed, format!("device {d} is not allowlisted")),
        },
        (Rule::AttributeMatch { name, allowed }, _) => match ctx.attributes.get(name) {
            None => Fail(DenyCode::MalformedContext, format!("request has no attribute {name}")),
            Some(v) if allowed.contains(v) => Pass,
            Some(v) => Fail(DenyCode::AttributeNotAllowed, format!("{name}={v} is not allowed")),
        },
        (Rule::TimeDelayedWithdrawal { delay }, Action::Withdrawal { .. }) => Delay(*delay),
        _ => Pass,
    }
}

fn limit(used: u128, amount: Amount, max: Amount, window: Window) -> Check {
    match used.checked_add(amount.0) {
        Some(total) if total <= max.0 => Check::Pass,
        _ => Check::Fail(
            DenyCode::LimitExceeded,
            format!("{used} already used plus {amount} exceeds {max} per {} s", window.seconds()),
        ),
    }
}
