use serde::{Deserialize, Serialize};

use super::RuntimeError;

/// Environment variables that override [`RuntimeConfig`] fields.
pub const ENV_KEYS: [&str; 7] = [
    "TDN_PRIMITIVE_CACHE_CAPACITY",
    "TDN_BLOCKED_FORMAT",
    "TDN_MEMPOOL_ENABLE",
    "TDN_TENSOR_POOL_LIMIT",
    "TDN_CONV_ADD_FUSION_SAFE",
    "TDN_NUM_THREADS",
    "TDN_CPU_AFFINITY",
];

/// Runtime tuning knobs.
///
/// * `primitive_cache_capacity`: scratch buffers (im2col and GEMM packing)
///   each worker keeps between ops; 0 allocates fresh buffers per op.
/// * `blocked_format`: pre-pack convolution weights into 8-channel blocks at
///   build time instead of packing on every call.
/// * `mempool_enable`: place activations in one liveness-planned arena; when
///   off every tensor gets its own buffer.
/// * `tensor_pool_limit`: arenas per worker kept alive across `infer` calls.
/// * `conv_add_fusion_safe`: only fuse a convolution into a residual add when
///   the add's other input has no other consumer.
/// * `cpu_affinity`: core list such as `0-7` or `0,2,4`; best effort.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub primitive_cache_capacity: usize,
    pub blocked_format: bool,
    pub mempool_enable: bool,
    pub tensor_pool_limit: usize,
    pub conv_add_fusion_safe: bool,
    pub num_threads: usize,
    pub cpu_affinity: String,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            primitive_cache_capacity: 4,
            blocked_format: false,
            mempool_enable: true,
            tensor_pool_limit: 1,
            conv_add_fusion_safe: false,
            num_threads: 8,
            cpu_affinity: "0-7".to_string(),
        }
    }
}

fn parse_flag(key: &str, value: &str) -> Result<bool, RuntimeError> {
    match value.trim() {
        "1" | "true" | "on" => Ok(true),
        "0" | "false" | "off" => Ok(false),
        _ => Err(RuntimeError::Config { key: key.into(), value: value.into() }),
    }
}

fn parse_count(key: &str, value: &str) -> Result<usize, RuntimeError> {
    value.trim().parse().map_err(|_| RuntimeError::Config { key: key.into(), value: value.into() })
}

impl RuntimeConfig {
    /// Sets one field by its config-file key (`primitive_cache_capacity`,
    /// ..., `cpu_affinity`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), RuntimeError> {
        match key {
            "primitive_cache_capacity" => self.primitive_cache_capacity = parse_count(key, value)?,
            "blocked_format" => self.blocked_format = parse_flag(key, value)?,
            "mempool_enable" => self.mempool_enable = parse_flag(key, value)?,
            "tensor_pool_limit" => self.tensor_pool_limit = parse_count(key, value)?,
            "conv_add_fusion_safe" => self.conv_add_fusion_safe = parse_flag(key, value)?,
            "num_threads" => {
                let n = parse_count(key, value)?;
                if n == 0 {
                    return Err(RuntimeError::Config { key: key.into(), value: value.into() });
                }
                self.num_threads = n;
            }
            "cpu_affinity" => {
                parse_core_list(value)?;
                self.cpu_affinity = value.trim().to_string();
            }
            _ => return Err(RuntimeError::Config { key: key.into(), value: value.into() }),
        }
        Ok(())
    }

    /// Applies `TDN_*` overrides from `lookup` (normally the process
    /// environment).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), RuntimeError> {
        for env in ENV_KEYS {
            if let Some(value) = lookup(env) {
                let key = env.trim_start_matches("TDN_").to_ascii_lowercase();
                self.set(&key, &value)?;
            }
        }
        Ok(())
    }

    pub fn from_env() -> Result<Self, RuntimeError> {
        let mut cfg = Self::default();
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }
}

/// Parses `0-7`, `0,2,4-5` or an empty string.
pub fn parse_core_list(spec: &str) -> Result<Vec<usize>, RuntimeError> {
    let bad = || RuntimeError::Config { key: "cpu_affinity".into(), value: spec.into() };
    let mut cores = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                cores.extend(a..=b);
            }
            None => cores.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(cores)
}

#[cfg(target_os = "linux")]
pub(crate) fn pin_current_thread(core: usize) {
    // SAFETY: cpu_set_t is plain data; sched_setaffinity only reads it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if core >= libc::CPU_SETSIZE as usize {
            return;
        }
        libc::CPU_SET(core, &mut set);
        let _ = libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
    }
}

#[cfg(not(target_os = "linux"))]
pub(crate) fn pin_current_thread(_core: usize) {}
