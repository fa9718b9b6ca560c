//! Vehicle data gateway: account linking through an authorization-code
//! flow, token refresh and periodic snapshot polling against a
//! manufacturer API. The manufacturer side is an in-process scripted mock
//! so everything runs hermetically on a simulated clock.
//!
//! Wire format (JSON bodies):
//!
//! * token endpoint request `{"grant_type": "authorization_code", "code": ..}`
//!   or `{"grant_type": "refresh_token", "refresh_token": ..}`, response
//!   `{"access": .., "refresh": .., "expires_in_s": ..}`; errors are
//!   status 400 with `{"error": "invalid_grant" | "access_denied"}`
//! * snapshot endpoint response
//!   `{"soc": .., "charging_power_kw": .., "expected_departure": ..}`,
//!   status 401 when the access token is not accepted

use std::collections::{HashSet, VecDeque};
use std::sync::{mpsc, Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{Metric, RawReading};

pub const POLL_PERIOD_S: i64 = 60;
pub const REQUEST_TIMEOUT_MS: u64 = 2_000;
/// Linked tokens this close to expiry are refreshed proactively.
pub const REFRESH_MARGIN_S: i64 = 60;

/// Shared simulated clock.
#[derive(Debug, Clone)]
pub struct SimClock(Arc<Mutex<DateTime<Utc>>>);

impl SimClock {
    pub fn new(t: DateTime<Utc>) -> Self {
        Self(Arc::new(Mutex::new(t)))
    }

    pub fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock")
    }

    pub fn advance(&self, d: Duration) {
        let mut t = self.0.lock().expect("clock lock");
        *t += d;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenState {
    Unlinked,
    PendingAuth {
        auth_url: String,
        nonce: String,
    },
    Linked {
        access: String,
        refresh: String,
        expiry: DateTime<Utc>,
    },
    Expired {
        refresh: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateKind {
    Unlinked,
    PendingAuth,
    Linked,
    Expired,
}

impl TokenState {
    pub fn kind(&self) -> StateKind {
        match self {
            TokenState::Unlinked => StateKind::Unlinked,
            TokenState::PendingAuth { .. } => StateKind::PendingAuth,
            TokenState::Linked { .. } => StateKind::Linked,
            TokenState::Expired { .. } => StateKind::Expired,
        }
    }
}

/// The allowed edges of the token state machine (self-loops included).
pub fn is_legal_transition(from: StateKind, to: StateKind) -> bool {
    use StateKind::*;
    matches!(
        (from, to),
        (Unlinked, Unlinked)
            | (Unlinked, PendingAuth)
            | (PendingAuth, PendingAuth)
            | (PendingAuth, Linked)
            | (PendingAuth, Unlinked)
            | (Linked, Linked)
            | (Linked, Expired)
            | (Linked, Unlinked)
            | (Expired, Expired)
            | (Expired, Linked)
            | (Expired, Unlinked)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSnapshot {
    pub ts: DateTime<Utc>,
    pub soc: f64,
    pub charging_power_kw: f64,
    pub expected_departure: Option<DateTime<Utc>>,
    pub stale: bool,
}

impl EvSnapshot {
    /// Age-based staleness: older than two poll periods at `now`.
    pub fn is_stale_at(&self, now: DateTime<Utc>) -> bool {
        now - self.ts > Duration::seconds(2 * POLL_PERIOD_S)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("account already linked or linking in progress")]
    AlreadyLinked,
    #[error("authorization code rejected")]
    InvalidCode,
    #[error("state nonce does not match a pending authorization")]
    NonceMismatch,
    #[error("user refused consent")]
    ConsentRefused,
    #[error("token refresh failed: {0}")]
    RefreshFailed(String),
    #[error("not linked")]
    NotLinked,
    #[error("access token rejected after refresh")]
    Unauthorized,
    #[error("upstream timed out and no earlier snapshot exists")]
    Timeout,
    #[error("malformed upstream response: {0}")]
    Protocol(String),
}

/// One canned upstream reaction.
#[derive(Debug, Clone, PartialEq)]
pub enum Scripted {
    /// Token endpoint success with the given lifetime.
    Token { expires_in_s: i64 },
    /// Token endpoint: code or refresh token not accepted.
    InvalidGrant,
    /// Token endpoint: the user declined.
    AccessDenied,
    Snapshot {
        soc: f64,
        charging_power_kw: f64,
        expected_departure: Option<DateTime<Utc>>,
    },
    /// Snapshot endpoint: 401.
    Unauthorized,
    /// Any endpoint: answer only after this many milliseconds.
    Delay(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: u16,
    pub body: String,
    pub latency_ms: u64,
}

#[derive(Debug, Default)]
struct ServerInner {
    token_script: VecDeque<Scripted>,
    snapshot_script: VecDeque<Scripted>,
    issued: u64,
    token_calls: usize,
    refresh_calls: usize,
    snapshot_calls: usize,
    default_soc: f64,
}

/// Scripted manufacturer API. Unscripted requests succeed with defaults.
#[derive(Debug, Clone, Default)]
pub struct MockServer(Arc<Mutex<ServerInner>>);

#[derive(Debug, Deserialize)]
struct TokenRequest {
    grant_type: String,
    #[serde(default)]
    code: Option<String>,
    #[serde(default)]
    refresh_token: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenBody {
    access: String,
    refresh: String,
    expires_in_s: i64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotBody {
    soc: f64,
    charging_power_kw: f64,
    expected_departure: Option<DateTime<Utc>>,
}

fn ok(body: String) -> Response {
    Response {
        status: 200,
        body,
        latency_ms: 20,
    }
}

fn error(status: u16, code: &str) -> Response {
    Response {
        status,
        body: serde_json::json!({ "error": code }).to_string(),
        latency_ms: 20,
    }
}

impl MockServer {
    pub fn new() -> Self {
        let s = Self::default();
        s.0.lock().expect("server lock").default_soc = 0.5;
        s
    }

    pub fn script_token(&self, r: Scripted) {
        self.0.lock().expect("server lock").token_script.push_back(r);
    }

    pub fn script_snapshot(&self, r: Scripted) {
        self.0.lock().expect("server lock").snapshot_script.push_back(r);
    }

    /// Total upstream requests received.
    pub fn calls(&self) -> usize {
        let g = self.0.lock().expect("server lock");
        g.token_calls + g.snapshot_calls
    }

    pub fn refresh_calls(&self) -> usize {
        self.0.lock().expect("server lock").refresh_calls
    }

    pub fn token_endpoint(&self, body: &str) -> Response {
        let mut g = self.0.lock().expect("server lock");
        g.token_calls += 1;
        let req: TokenRequest = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(_) => return error(400, "invalid_request"),
        };
        match req.grant_type.as_str() {
            "authorization_code" if req.code.is_some() => {}
            "refresh_token" if req.refresh_token.is_some() => g.refresh_calls += 1,
            _ => return error(400, "invalid_request"),
        }
        let mut latency = 20;
        let mut next = g.token_script.pop_front();
        if let Some(Scripted::Delay(ms)) = next {
            latency = ms;
            next = g.token_script.pop_front();
        }
        let mut resp = match next.unwrap_or(Scripted::Token { expires_in_s: 3600 }) {
            Scripted::Token { expires_in_s } => {
                g.issued += 1;
                let body = TokenBody {
                    access: format!("acc-{}", g.issued),
                    refresh: format!("ref-{}", g.issued),
                    expires_in_s,
                };
                ok(serde_json::to_string(&body).expect("token body"))
            }
            Scripted::AccessDenied => error(400, "access_denied"),
            _ => error(400, "invalid_grant"),
        };
        resp.latency_ms = latency;
        resp
    }

    pub fn snapshot_endpoint(&self, access: &str) -> Response {
        let mut g = self.0.lock().expect("server lock");
        g.snapshot_calls += 1;
        if access.is_empty() {
            return error(401, "unauthorized");
        }
        let mut latency = 20;
        let mut next = g.snapshot_script.pop_front();
        if let Some(Scripted::Delay(ms)) = next {
            latency = ms;
            next = g.snapshot_script.pop_front();
        }
        let soc = g.default_soc;
        let mut resp = match next {
            Some(Scripted::Unauthorized) => error(401, "unauthorized"),
            Some(Scripted::Snapshot {
                soc,
                charging_power_kw,
                expected_departure,
            }) => ok(serde_json::to_string(&SnapshotBody {
                soc,
                charging_power_kw,
                expected_departure,
            })
            .expect("snapshot body")),
            _ => ok(serde_json::to_string(&SnapshotBody {
                soc,
                charging_power_kw: 0.0,
                expected_departure: None,
            })
            .expect("snapshot body")),
        };
        resp.latency_ms = latency;
        resp
    }
}

/// Client side of one linked vehicle.
pub struct EvGateway {
    pub building: String,
    pub manufacturer: String,
    state: TokenState,
    server: MockServer,
    clock: SimClock,
    rng: ChaCha8Rng,
    used_nonces: HashSet<String>,
    last: Option<EvSnapshot>,
    transitions: Vec<(StateKind, StateKind)>,
}

impl EvGateway {
    pub fn new(building: &str, manufacturer: &str, server: MockServer, clock: SimClock, seed: u64) -> Self {
        Self {
            building: building.to_string(),
            manufacturer: manufacturer.to_string(),
            state: TokenState::Unlinked,
            server,
            clock,
            rng: ChaCha8Rng::seed_from_u64(seed),
            used_nonces: HashSet::new(),
            last: None,
            transitions: Vec::new(),
        }
    }

    pub fn state(&self) -> &TokenState {
        &self.state
    }

    /// Every state change so far, in order.
    pub fn transitions(&self) -> &[(StateKind, StateKind)] {
        &self.transitions
    }

    fn set(&mut self, s: TokenState) {
        self.transitions.push((self.state.kind(), s.kind()));
        self.state = s;
    }

    pub fn unlink(&mut self) {
        self.set(TokenState::Unlinked);
    }

    pub fn begin_authorization(&mut self) -> Result<&TokenState, GatewayError> {
        if self.state != TokenState::Unlinked {
            return Err(GatewayError::AlreadyLinked);
        }
        let nonce: String = (0..16).map(|_| format!("{:02x}", self.rng.gen::<u8>())).collect();
        let auth_url = format!(
            "https://auth.{m}.example/authorize?response_type=code&client_id=rec-{b}&state={nonce}",
            m = self.manufacturer,
            b = self.building
        );
        self.set(TokenState::PendingAuth { auth_url, nonce });
        Ok(&self.state)
    }

    fn parse_tokens(&mut self, resp: &Response) -> Result<TokenState, GatewayError> {
        let body: TokenBody = serde_json::from_str(&resp.body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
        Ok(TokenState::Linked {
            access: body.access,
            refresh: body.refresh,
            expiry: self.clock.now() + Duration::seconds(body.expires_in_s),
        })
    }

    fn error_code(resp: &Response) -> String {
        serde_json::from_str::<serde_json::Value>(&resp.body)
            .ok()
            .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
            .unwrap_or_default()
    }

    pub fn exchange_code(&mut self, code: &str, nonce: &str) -> Result<&TokenState, GatewayError> {
        let pending = match &self.state {
            TokenState::PendingAuth { nonce: n, .. } => n.clone(),
            _ => return Err(GatewayError::NonceMismatch),
        };
        if pending != nonce || self.used_nonces.contains(nonce) {
            return Err(GatewayError::NonceMismatch);
        }
        self.used_nonces.insert(pending);
        let req = serde_json::json!({ "grant_type": "authorization_code", "code": code }).to_string();
        let resp = self.server.token_endpoint(&req);
        if resp.latency_ms > REQUEST_TIMEOUT_MS {
            self.set(TokenState::Unlinked);
            return Err(GatewayError::Timeout);
        }
        if resp.status != 200 {
            self.set(TokenState::Unlinked);
            return Err(match Self::error_code(&resp).as_str() {
                "access_denied" => GatewayError::ConsentRefused,
                _ => GatewayError::InvalidCode,
            });
        }
        let linked = match self.parse_tokens(&resp) {
            Ok(s) => s,
            Err(e) => {
                self.set(TokenState::Unlinked);
                return Err(e);
            }
        };
        self.set(linked);
        Ok(&self.state)
    }

    /// Marks a linked token whose expiry has passed as expired.
    fn observe_expiry(&mut self) {
        if let TokenState::Linked { refresh, expiry, .. } = &self.state {
            if self.clock.now() >= *expiry {
                let refresh = refresh.clone();
                self.set(TokenState::Expired { refresh });
            }
        }
    }

    /// Refreshes an expired token or one close to expiry; a linked token
    /// far from expiry is left alone. One upstream attempt at most.
    pub fn refresh_token(&mut self) -> Result<&TokenState, GatewayError> {
        self.observe_expiry();
        let refresh = match &self.state {
            TokenState::Expired { refresh } => refresh.clone(),
            TokenState::Linked { refresh, expiry, .. } => {
                if *expiry - self.clock.now() > Duration::seconds(REFRESH_MARGIN_S) {
                    return Ok(&self.state);
                }
                refresh.clone()
            }
            _ => return Err(GatewayError::NotLinked),
        };
        let req = serde_json::json!({ "grant_type": "refresh_token", "refresh_token": refresh }).to_string();
        let resp = self.server.token_endpoint(&req);
        if resp.status != 200 || resp.latency_ms > REQUEST_TIMEOUT_MS {
            let why = if resp.latency_ms > REQUEST_TIMEOUT_MS {
                "timeout".to_string()
            } else {
                Self::error_code(&resp)
            };
            self.set(TokenState::Unlinked);
            return Err(GatewayError::RefreshFailed(why));
        }
        match self.parse_tokens(&resp) {
            Ok(s) => {
                self.set(s);
                Ok(&self.state)
            }
            Err(e) => {
                self.set(TokenState::Unlinked);
                Err(GatewayError::RefreshFailed(e.to_string()))
            }
        }
    }

    fn stale_previous(&self) -> Result<EvSnapshot, GatewayError> {
        match &self.last {
            Some(s) => Ok(EvSnapshot {
                stale: true,
                ..s.clone()
            }),
            None => Err(GatewayError::Timeout),
        }
    }

    /// Fetches the current vehicle snapshot. An expired token is refreshed
    /// first; a rejected token triggers one refresh and one retry. On
    /// timeout the previous snapshot is returned marked stale.
    pub fn poll_snapshot(&mut self) -> Result<EvSnapshot, GatewayError> {
        self.observe_expiry();
        if matches!(self.state, TokenState::Expired { .. }) {
            self.refresh_token()?;
        }
        let mut retried = false;
        loop {
            let access = match &self.state {
                TokenState::Linked { access, .. } => access.clone(),
                _ => return Err(GatewayError::NotLinked),
            };
            let resp = self.server.snapshot_endpoint(&access);
            if resp.latency_ms > REQUEST_TIMEOUT_MS {
                return self.stale_previous();
            }
            if resp.status == 401 {
                if retried {
                    return Err(GatewayError::Unauthorized);
                }
                retried = true;
                if let TokenState::Linked { refresh, .. } = &self.state {
                    let refresh = refresh.clone();
                    self.set(TokenState::Expired { refresh });
                }
                self.refresh_token()?;
                continue;
            }
            if resp.status != 200 {
                return Err(GatewayError::Protocol(format!("status {}", resp.status)));
            }
            let body: SnapshotBody =
                serde_json::from_str(&resp.body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
            if !(0.0..=1.0).contains(&body.soc) || !body.charging_power_kw.is_finite() {
                return Err(GatewayError::Protocol(format!("implausible snapshot soc {}", body.soc)));
            }
            let mut ts = self.clock.now();
            if let Some(prev) = &self.last {
                ts = ts.max(prev.ts);
            }
            let snap = EvSnapshot {
                ts,
                soc: body.soc,
                charging_power_kw: body.charging_power_kw,
                expected_departure: body.expected_departure,
                stale: false,
            };
            self.last = Some(snap.clone());
            return Ok(snap);
        }
    }
}

/// Polls a linked vehicle `ticks` times, advancing the simulated clock by
/// one poll period before each poll, and forwards fresh snapshots to the
/// telemetry queue as SoC and charging-power readings.
pub fn run_poller(mut gw: EvGateway, clock: SimClock, ticks: usize, tx: mpsc::Sender<RawReading>) -> EvGateway {
    let mut last_ts: Option<DateTime<Utc>> = None;
    for _ in 0..ticks {
        clock.advance(Duration::seconds(POLL_PERIOD_S));
        let Ok(snap) = gw.poll_snapshot() else { continue };
        if snap.stale || last_ts.is_some_and(|t| snap.ts <= t) {
            continue;
        }
        last_ts = Some(snap.ts);
        let id = gw.building.clone();
        let _ = tx.send(RawReading::new(&id, Metric::EvSoc, snap.ts, snap.soc));
        let _ = tx.send(RawReading::new(&id, Metric::EvPowerKw, snap.ts, snap.charging_power_kw));
    }
    gw
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, 18, 0, 0).unwrap()
    }

    fn setup() -> (EvGateway, MockServer, SimClock) {
        let server = MockServer::new();
        let clock = SimClock::new(t0());
        (
            EvGateway::new("B1", "acme", server.clone(), clock.clone(), 7),
            server,
            clock,
        )
    }

    fn nonce(gw: &EvGateway) -> String {
        match gw.state() {
            TokenState::PendingAuth { nonce, .. } => nonce.clone(),
            _ => panic!("not pending"),
        }
    }

    fn linked() -> (EvGateway, MockServer, SimClock) {
        let (mut gw, s, c) = setup();
        gw.begin_authorization().unwrap();
        let n = nonce(&gw);
        gw.exchange_code("code", &n).unwrap();
        (gw, s, c)
    }

    #[test]
    fn begin_creates_pending_with_nonce() {
        let (mut gw, _, _) = setup();
        let st = gw.begin_authorization().unwrap().clone();
        let TokenState::PendingAuth { auth_url, nonce } = st else {
            panic!()
        };
        assert_eq!(nonce.len(), 32);
        assert!(auth_url.starts_with("https://auth.acme.example/authorize?"));
        assert!(auth_url.ends_with(&format!("state={nonce}")));
    }

    #[test]
    fn nonces_are_fresh() {
        let (mut gw, _, _) = setup();
        gw.begin_authorization().unwrap();
        let a = nonce(&gw);
        gw.unlink();
        gw.begin_authorization().unwrap();
        assert_ne!(a, nonce(&gw));
    }

    #[test]
    fn linked_cannot_begin_again() {
        let (mut gw, _, _) = linked();
        assert_eq!(gw.begin_authorization(), Err(GatewayError::AlreadyLinked));
    }

    #[test]
    fn nonce_is_single_use() {
        let (mut gw, _, _) = setup();
        gw.begin_authorization().unwrap();
        let n = nonce(&gw);
        assert_eq!(gw.exchange_code("code", "wrong"), Err(GatewayError::NonceMismatch));
        gw.exchange_code("code", &n).unwrap();
        assert_eq!(gw.state().kind(), StateKind::Linked);
        assert_eq!(gw.exchange_code("code", &n), Err(GatewayError::NonceMismatch));
    }

    #[test]
    fn consent_refusal_unlinks() {
        let (mut gw, s, _) = setup();
        s.script_token(Scripted::AccessDenied);
        gw.begin_authorization().unwrap();
        let n = nonce(&gw);
        assert_eq!(gw.exchange_code("code", &n), Err(GatewayError::ConsentRefused));
        assert_eq!(*gw.state(), TokenState::Unlinked);
    }

    #[test]
    fn invalid_code() {
        let (mut gw, s, _) = setup();
        s.script_token(Scripted::InvalidGrant);
        gw.begin_authorization().unwrap();
        let n = nonce(&gw);
        assert_eq!(gw.exchange_code("bad", &n), Err(GatewayError::InvalidCode));
    }

    #[test]
    fn refresh_paths() {
        let (mut gw, s, c) = linked();
        let before = s.calls();
        gw.refresh_token().unwrap();
        assert_eq!(s.calls(), before, "far from expiry is a no-op");
        c.advance(Duration::seconds(3600));
        gw.refresh_token().unwrap();
        let TokenState::Linked { expiry, .. } = gw.state().clone() else {
            panic!()
        };
        assert!(expiry > c.now());
        c.advance(Duration::seconds(3600));
        s.script_token(Scripted::InvalidGrant);
        assert!(matches!(gw.refresh_token(), Err(GatewayError::RefreshFailed(_))));
        assert_eq!(*gw.state(), TokenState::Unlinked);
    }

    #[test]
    fn healthy_poll() {
        let (mut gw, s, _) = linked();
        s.script_snapshot(Scripted::Snapshot {
            soc: 0.42,
            charging_power_kw: 7.4,
            expected_departure: Some(t0() + Duration::hours(14)),
        });
        let snap = gw.poll_snapshot().unwrap();
        assert!(!snap.stale);
        assert_eq!(snap.soc, 0.42);
        assert_eq!(snap.ts, t0());
    }

    #[test]
    fn timeout_returns_previous_marked_stale() {
        let (mut gw, s, c) = linked();
        let first = gw.poll_snapshot().unwrap();
        c.advance(Duration::seconds(60));
        s.script_snapshot(Scripted::Delay(2_500));
        let second = gw.poll_snapshot().unwrap();
        assert!(second.stale);
        assert_eq!(second.ts, first.ts);
        assert_eq!(second.soc, first.soc);
    }

    #[test]
    fn expired_access_refreshes_once_then_polls() {
        let (mut gw, s, c) = linked();
        c.advance(Duration::seconds(3601));
        let before = s.calls();
        let snap = gw.poll_snapshot().unwrap();
        assert!(!snap.stale);
        assert_eq!(s.calls() - before, 2);
    }

    #[test]
    fn rejected_access_retries_once() {
        let (mut gw, s, _) = linked();
        s.script_snapshot(Scripted::Unauthorized);
        let before = s.refresh_calls();
        assert!(gw.poll_snapshot().is_ok());
        assert_eq!(s.refresh_calls() - before, 1);
        s.script_snapshot(Scripted::Unauthorized);
        s.script_snapshot(Scripted::Unauthorized);
        assert_eq!(gw.poll_snapshot(), Err(GatewayError::Unauthorized));
    }

    #[test]
    fn age_based_staleness() {
        let s = EvSnapshot {
            ts: t0(),
            soc: 0.5,
            charging_power_kw: 0.0,
            expected_departure: None,
            stale: false,
        };
        assert!(!s.is_stale_at(t0() + Duration::seconds(120)));
        assert!(s.is_stale_at(t0() + Duration::seconds(121)));
    }

    #[test]
    fn poller_feeds_monotone_readings() {
        let (gw, s, c) = linked();
        s.script_snapshot(Scripted::Snapshot {
            soc: 0.3,
            charging_power_kw: 7.4,
            expected_departure: None,
        });
        s.script_snapshot(Scripted::Delay(3_000));
        let (tx, rx) = mpsc::channel();
        let clock = c.clone();
        let handle = std::thread::spawn(move || run_poller(gw, clock, 5, tx));
        let gw = handle.join().unwrap();
        let got: Vec<RawReading> = rx.iter().collect();
        // one poll timed out, the other four produced two readings each
        assert_eq!(got.len(), 8);
        let soc_ts: Vec<_> = got
            .iter()
            .filter(|r| r.metric == Metric::EvSoc)
            .map(|r| r.timestamp)
            .collect();
        assert!(soc_ts.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(gw.state().kind(), StateKind::Linked);
    }
}
