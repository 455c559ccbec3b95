//! Token service: password and client-credentials grants issue HMAC-SHA256
//! signed bearer tokens (`header.claims.signature`, base64url without
//! padding). Verification needs only the token, the shared secret, the
//! clock and the revocation set.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::URL_SAFE_NO_PAD as B64URL;
use base64::Engine as _;
use hmac::{Hmac, KeyInit, Mac};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::SharedClock;
use crate::ids::IdGen;

type HmacSha256 = Hmac<Sha256>;

pub const ACCESS_TTL: Duration = Duration::from_secs(900);
pub const REFRESH_TTL: Duration = Duration::from_secs(24 * 3600);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthError {
    #[error("invalid credentials")]
    Unauthorized,
    #[error("scope {0} not granted")]
    ForbiddenScope(String),
    #[error("bad token signature")]
    BadSignature,
    #[error("token expired")]
    Expired,
    #[error("token lacks scope {0}")]
    InsufficientScope(String),
    #[error("token revoked")]
    Revoked,
    #[error("unknown refresh token")]
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claims {
    pub sub: String,
    pub iat: u64,
    pub exp: u64,
    pub scope: Vec<String>,
    pub jti: String,
}

impl Claims {
    pub fn has_scope(&self, scope: &str) -> bool {
        self.scope.iter().any(|s| s == scope)
    }
}

#[derive(Serialize, Deserialize, PartialEq)]
struct Header {
    alg: String,
    typ: String,
}

/// HMAC-SHA256 of `message` under `secret`.
pub fn hmac_sha256(secret: &[u8], message: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(secret).expect("HMAC accepts any key length");
    mac.update(message);
    mac.finalize().into_bytes().into()
}

/// Encodes and signs claims into the compact `h.c.s` form.
pub fn encode_token(secret: &[u8], claims: &Claims) -> String {
    let header = Header {
        alg: "HS256".into(),
        typ: "JWT".into(),
    };
    let h = B64URL.encode(serde_json::to_vec(&header).expect("header serializes"));
    let c = B64URL.encode(serde_json::to_vec(claims).expect("claims serialize"));
    let signing_input = format!("{h}.{c}");
    let sig = B64URL.encode(hmac_sha256(secret, signing_input.as_bytes()));
    format!("{signing_input}.{sig}")
}

/// Checks structure, algorithm and signature; returns the claims without
/// looking at expiry, scope or revocation.
pub fn decode_verified(secret: &[u8], token: &str) -> Result<Claims, AuthError> {
    let mut parts = token.split('.');
    let (Some(h), Some(c), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(AuthError::BadSignature);
    };
    let sig = B64URL.decode(s).map_err(|_| AuthError::BadSignature)?;
    let mut mac = HmacSha256::new_from_slice(secret).expect("HMAC accepts any key length");
    mac.update(h.as_bytes());
    mac.update(b".");
    mac.update(c.as_bytes());
    mac.verify_slice(&sig).map_err(|_| AuthError::BadSignature)?;
    let header: Header = B64URL
        .decode(h)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .ok_or(AuthError::BadSignature)?;
    if header.alg != "HS256" {
        return Err(AuthError::BadSignature);
    }
    B64URL
        .decode(c)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .ok_or(AuthError::BadSignature)
}

/// Salted SHA-256, hex encoded. Adequate for a local testbed only.
pub fn hash_password(salt: &str, password: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(b":");
    h.update(password.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredCredential {
    pub salt: String,
    pub hash: String,
    pub scopes: Vec<String>,
}

impl StoredCredential {
    pub fn new(salt: &str, password: &str, scopes: &[&str]) -> Self {
        StoredCredential {
            salt: salt.to_string(),
            hash: hash_password(salt, password),
            scopes: scopes.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn matches(&self, password: &str) -> bool {
        hash_password(&self.salt, password) == self.hash
    }
}

/// Lookup of user credentials; owned by whichever service stores users.
pub trait CredentialSource: Send + Sync {
    fn credential(&self, user: &str) -> Option<StoredCredential>;
}

impl CredentialSource for RwLock<HashMap<String, StoredCredential>> {
    fn credential(&self, user: &str) -> Option<StoredCredential> {
        self.read().get(user).cloned()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub refresh_id: String,
    pub sub: String,
    pub scopes: Vec<String>,
    /// Unix seconds.
    pub expires: u64,
    pub revoked: bool,
    pub successor: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStoreEntry {
    pub jti: String,
    pub revoked: bool,
}

/// Body of a successful token endpoint call.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub access_token: String,
    pub token_type: String,
    pub expires_in: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refresh_token: Option<String>,
}

#[derive(Clone, Debug)]
pub struct IssuedTokens {
    pub access: String,
    pub claims: Claims,
    pub refresh: Option<String>,
}

impl IssuedTokens {
    pub fn response(&self) -> TokenResponse {
        TokenResponse {
            access_token: self.access.clone(),
            token_type: "Bearer".into(),
            expires_in: self.claims.exp - self.claims.iat,
            refresh_token: self.refresh.clone(),
        }
    }
}

pub struct TokenService {
    clock: SharedClock,
    secret: Vec<u8>,
    users: Arc<dyn CredentialSource>,
    clients: RwLock<HashMap<String, StoredCredential>>,
    tokens: RwLock<HashMap<String, TokenStoreEntry>>,
    revoked: RwLock<HashSet<String>>,
    refresh: Mutex<HashMap<String, RefreshRecord>>,
    ids: IdGen,
}

impl std::fmt::Debug for TokenService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TokenService")
            .field("issued", &self.tokens.read().len())
            .field("revoked", &self.revoked.read().len())
            .finish()
    }
}

impl TokenService {
    pub fn new(clock: SharedClock, secret: &[u8], users: Arc<dyn CredentialSource>) -> Self {
        TokenService {
            clock,
            secret: secret.to_vec(),
            users,
            clients: RwLock::new(HashMap::new()),
            tokens: RwLock::new(HashMap::new()),
            revoked: RwLock::new(HashSet::new()),
            refresh: Mutex::new(HashMap::new()),
            ids: IdGen::new(),
        }
    }

    pub fn secret(&self) -> &[u8] {
        &self.secret
    }

    pub fn register_client(&self, client_id: &str, secret: &str, scopes: &[&str]) {
        let salt = format!("client:{client_id}");
        self.clients
            .write()
            .insert(client_id.to_string(), StoredCredential::new(&salt, secret, scopes));
    }

    fn grant_scopes(cred: &StoredCredential, requested: &[String]) -> Result<Vec<String>, AuthError> {
        if requested.is_empty() {
            return Ok(cred.scopes.clone());
        }
        for s in requested {
            if !cred.scopes.contains(s) {
                return Err(AuthError::ForbiddenScope(s.clone()));
            }
        }
        Ok(requested.to_vec())
    }

    fn mint_access(&self, sub: &str, scope: Vec<String>) -> (String, Claims) {
        let iat = self.clock.unix_secs();
        let claims = Claims {
            sub: sub.to_string(),
            iat,
            exp: iat + ACCESS_TTL.as_secs(),
            scope,
            jti: self.ids.next("jti"),
        };
        self.tokens.write().insert(
            claims.jti.clone(),
            TokenStoreEntry {
                jti: claims.jti.clone(),
                revoked: false,
            },
        );
        (encode_token(&self.secret, &claims), claims)
    }

    fn mint_refresh(&self, sub: &str, scopes: Vec<String>) -> String {
        let n = self.ids.next_raw();
        // keyed so ids cannot be guessed from the counter
        let id = hex::encode(&hmac_sha256(&self.secret, format!("refresh:{n}").as_bytes())[..16]);
        self.refresh.lock().insert(
            id.clone(),
            RefreshRecord {
                refresh_id: id.clone(),
                sub: sub.to_string(),
                scopes,
                expires: self.clock.unix_secs() + REFRESH_TTL.as_secs(),
                revoked: false,
                successor: None,
            },
        );
        id
    }

    /// Password grant. An empty scope request means every scope the user holds.
    pub fn issue(&self, user: &str, password: &str, scopes: &[String]) -> Result<IssuedTokens, AuthError> {
        let cred = self.users.credential(user).ok_or(AuthError::Unauthorized)?;
        if !cred.matches(password) {
            return Err(AuthError::Unauthorized);
        }
        let granted = Self::grant_scopes(&cred, scopes)?;
        let (access, claims) = self.mint_access(user, granted.clone());
        let refresh = self.mint_refresh(user, granted);
        Ok(IssuedTokens {
            access,
            claims,
            refresh: Some(refresh),
        })
    }

    /// Client-credentials grant; no refresh token is issued.
    pub fn issue_client(&self, client_id: &str, secret: &str, scopes: &[String]) -> Result<IssuedTokens, AuthError> {
        let cred = self
            .clients
            .read()
            .get(client_id)
            .cloned()
            .ok_or(AuthError::Unauthorized)?;
        if !cred.matches(secret) {
            return Err(AuthError::Unauthorized);
        }
        let granted = Self::grant_scopes(&cred, scopes)?;
        let (access, claims) = self.mint_access(client_id, granted);
        Ok(IssuedTokens {
            access,
            claims,
            refresh: None,
        })
    }

    /// Signature and expiry only.
    pub fn authenticate(&self, token: &str) -> Result<Claims, AuthError> {
        let claims = decode_verified(&self.secret, token)?;
        if self.clock.unix_secs() >= claims.exp {
            return Err(AuthError::Expired);
        }
        Ok(claims)
    }

    /// Full check in precedence order: signature, expiry, scope, revocation.
    pub fn verify(&self, token: &str, required_scope: &str) -> Result<Claims, AuthError> {
        let claims = self.authenticate(token)?;
        if !claims.has_scope(required_scope) {
            return Err(AuthError::InsufficientScope(required_scope.to_string()));
        }
        self.check_revoked(&claims)?;
        Ok(claims)
    }

    pub fn check_revoked(&self, claims: &Claims) -> Result<(), AuthError> {
        if self.revoked.read().contains(&claims.jti) {
            Err(AuthError::Revoked)
        } else {
            Ok(())
        }
    }

    /// Rotates a refresh token: the old one is revoked and points at its
    /// successor.
    pub fn refresh(&self, refresh_id: &str) -> Result<IssuedTokens, AuthError> {
        let (sub, scopes) = {
            let records = self.refresh.lock();
            let rec = records.get(refresh_id).ok_or(AuthError::Unknown)?;
            if rec.revoked {
                return Err(AuthError::Revoked);
            }
            if self.clock.unix_secs() >= rec.expires {
                return Err(AuthError::Expired);
            }
            (rec.sub.clone(), rec.scopes.clone())
        };
        let next = self.mint_refresh(&sub, scopes.clone());
        {
            let mut records = self.refresh.lock();
            let rec = records.get_mut(refresh_id).ok_or(AuthError::Unknown)?;
            if rec.revoked {
                // lost a race with a concurrent rotation
                records.remove(&next);
                return Err(AuthError::Revoked);
            }
            rec.revoked = true;
            rec.successor = Some(next.clone());
        }
        let (access, claims) = self.mint_access(&sub, scopes);
        Ok(IssuedTokens {
            access,
            claims,
            refresh: Some(next),
        })
    }

    pub fn refresh_record(&self, refresh_id: &str) -> Option<RefreshRecord> {
        self.refresh.lock().get(refresh_id).cloned()
    }

    /// Idempotent; unknown ids are ignored.
    pub fn revoke(&self, jti: &str) {
        let mut tokens = self.tokens.write();
        if let Some(entry) = tokens.get_mut(jti) {
            entry.revoked = true;
            self.revoked.write().insert(jti.to_string());
        }
    }

    pub fn token_entry(&self, jti: &str) -> Option<TokenStoreEntry> {
        self.tokens.read().get(jti).cloned()
    }
}
