//! Credentials and session tokens.

use std::collections::HashMap;
use std::sync::Mutex;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Duration, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use subtle::ConstantTimeEq;

pub const DEFAULT_ITERATIONS: u32 = 20_000;
const SALT_LEN: usize = 16;
const HASH_LEN: usize = 32;
const TOKEN_LEN: usize = 32;

/// A user as stored in the config file. The password itself is never kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthRecord {
    pub username: String,
    /// Hex-encoded PBKDF2-HMAC-SHA256 output.
    pub password_hash: String,
    /// Hex-encoded random salt.
    pub salt: String,
    #[serde(default = "default_iterations")]
    pub iterations: u32,
}

fn default_iterations() -> u32 {
    DEFAULT_ITERATIONS
}

fn derive(password: &str, salt: &[u8], iterations: u32) -> [u8; HASH_LEN] {
    let mut out = [0u8; HASH_LEN];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, iterations, &mut out);
    out
}

impl AuthRecord {
    pub fn create(username: &str, password: &str, iterations: u32) -> AuthRecord {
        let mut salt = [0u8; SALT_LEN];
        rand::rng().fill_bytes(&mut salt);
        AuthRecord {
            username: username.to_owned(),
            password_hash: hex::encode(derive(password, &salt, iterations)),
            salt: hex::encode(salt),
            iterations,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.username.is_empty() {
            return Err("empty username".into());
        }
        let salt = hex::decode(&self.salt).map_err(|e| format!("user {}: salt: {e}", self.username))?;
        let hash = hex::decode(&self.password_hash)
            .map_err(|e| format!("user {}: password_hash: {e}", self.username))?;
        if salt.is_empty() || hash.len() != HASH_LEN || self.iterations == 0 {
            return Err(format!("user {}: malformed credential record", self.username));
        }
        Ok(())
    }

    /// Constant-time comparison of the derived key.
    pub fn verify(&self, password: &str) -> bool {
        let (Ok(salt), Ok(expected)) = (hex::decode(&self.salt), hex::decode(&self.password_hash)) else {
            return false;
        };
        let derived = derive(password, &salt, self.iterations);
        derived.ct_eq(expected.as_slice()).into()
    }
}

pub struct Credentials {
    users: HashMap<String, AuthRecord>,
    /// Checked for unknown usernames so they cost the same as a wrong password.
    decoy: AuthRecord,
}

impl Credentials {
    pub fn new(users: Vec<AuthRecord>) -> Self {
        let iterations = users.first().map(|u| u.iterations).unwrap_or(DEFAULT_ITERATIONS);
        let decoy = AuthRecord::create("", "decoy", iterations);
        Credentials { users: users.into_iter().map(|u| (u.username.clone(), u)).collect(), decoy }
    }

    pub fn check(&self, username: &str, password: &str) -> bool {
        match self.users.get(username) {
            Some(record) => record.verify(password),
            None => {
                let _ = self.decoy.verify(password);
                false
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionToken {
    pub token: String,
    pub expires: DateTime<Utc>,
}

/// In-memory token table; a restart invalidates every session.
pub struct TokenStore {
    ttl: Duration,
    tokens: Mutex<HashMap<String, DateTime<Utc>>>,
}

impl TokenStore {
    pub fn new(ttl: Duration) -> Self {
        TokenStore { ttl, tokens: Mutex::new(HashMap::new()) }
    }

    pub fn issue(&self) -> SessionToken {
        let mut raw = [0u8; TOKEN_LEN];
        rand::rng().fill_bytes(&mut raw);
        let token = URL_SAFE_NO_PAD.encode(raw);
        let expires = Utc::now() + self.ttl;
        let mut tokens = self.tokens.lock().unwrap();
        let now = Utc::now();
        tokens.retain(|_, exp| *exp > now);
        tokens.insert(token.clone(), expires);
        SessionToken { token, expires }
    }

    pub fn is_live(&self, token: &str) -> bool {
        let mut tokens = self.tokens.lock().unwrap();
        match tokens.get(token) {
            Some(exp) if *exp > Utc::now() => true,
            Some(_) => {
                tokens.remove(token);
                false
            }
            None => false,
        }
    }
}
