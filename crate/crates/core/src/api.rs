//! Wire types of the embedding service, shared by server and client.

use serde::{Deserialize, Serialize};

use crate::hier::EventRecord;
use crate::synth::UserProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRequest {
    pub user_id: String,
    pub profile: UserProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixResponse {
    pub user_id: String,
    pub l_p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub user_id: String,
    pub query: String,
    /// Attaches the tuned prompt registered for this scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embedding: Vec<f64>,
    pub tokens_processed: usize,
    pub attention_pairs: usize,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRequest {
    pub user_id: String,
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub entries: usize,
    pub capacity: usize,
    pub cache_enabled: bool,
    pub profiles: u64,
    pub embeds: u64,
    pub refreshes: u64,
    pub cache_misses: u64,
    pub evictions: u64,
    pub errors: u64,
    pub tokens_processed: u64,
    pub scenarios: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// Stable machine-readable kind, e.g. `cache_miss`.
    pub code: String,
    pub message: String,
}
