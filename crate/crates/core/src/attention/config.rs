use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which features form the attention query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QueryMode {
    /// Fused high- and upsampled low-resolution features.
    Concat,
    HighOnly,
    LowOnly,
}

impl QueryMode {
    pub const ALL: [QueryMode; 3] = [QueryMode::LowOnly, QueryMode::HighOnly, QueryMode::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::Concat => "concat",
            QueryMode::HighOnly => "high_only",
            QueryMode::LowOnly => "low_only",
        }
    }
}

impl FromStr for QueryMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "concat" => Ok(QueryMode::Concat),
            "high_only" => Ok(QueryMode::HighOnly),
            "low_only" => Ok(QueryMode::LowOnly),
            _ => Err(format!("unknown query mode `{s}` (expected concat, high_only or low_only)")),
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Resolution at which keys and values are taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KeySource {
    /// The channel-reduced low-resolution map.
    LowRes,
    /// The low-resolution map after upsampling to the query grid.
    HighRes,
}

impl KeySource {
    pub const ALL: [KeySource; 2] = [KeySource::LowRes, KeySource::HighRes];

    pub fn as_str(self) -> &'static str {
        match self {
            KeySource::LowRes => "low_res",
            KeySource::HighRes => "high_res",
        }
    }
}

impl FromStr for KeySource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "low_res" => Ok(KeySource::LowRes),
            "high_res" => Ok(KeySource::HighRes),
            _ => Err(format!("unknown key source `{s}` (expected low_res or high_res)")),
        }
    }
}

impl fmt::Display for KeySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaiConfig {
    /// Width `C` of the fused query and the reduced low-resolution map.
    pub channels: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub out_channels: usize,
    /// Registered attention kernel name.
    pub attention: String,
    /// Attention passes sharing one set of projections.
    pub recurrence: usize,
    pub query: QueryMode,
    pub key_source: KeySource,
}

impl Default for GaiConfig {
    fn default() -> Self {
        GaiConfig {
            channels: 128,
            d_k: 8,
            d_v: 64,
            out_channels: 128,
            attention: "criss_cross".into(),
            recurrence: 2,
            query: QueryMode::Concat,
            key_source: KeySource::LowRes,
        }
    }
}

impl GaiConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("gai.{key}"), msg));
        if self.channels == 0 || self.out_channels == 0 {
            return bad("channels", "channel counts must be positive".into());
        }
        if self.d_k == 0 || self.d_k > self.channels {
            return bad("d_k", format!("must lie in [1, {}], got {}", self.channels, self.d_k));
        }
        if self.d_v == 0 || self.d_v > self.channels {
            return bad("d_v", format!("must lie in [1, {}], got {}", self.channels, self.d_v));
        }
        if self.recurrence == 0 {
            return bad("recurrence", "must be at least 1".into());
        }
        super::registry().get(&self.attention).map(|_| ())
    }
}
