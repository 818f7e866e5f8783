//! Run-configuration plumbing: flat `key = value` files, typed extraction
//! with unknown-key rejection, and the resolved-config log that makes every
//! run reproducible from its output directory alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected `key = value`, got {raw:?}", i + 1);
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        if map.insert(k.clone(), v).is_some() {
            bail!("config line {}: duplicate key {k:?}", i + 1);
        }
    }
    Ok(map)
}

/// Key/value settings being consumed; whatever is left at the end is an error.
pub struct Settings(pub BTreeMap<String, String>);

impl Settings {
    pub fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    pub fn take_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow!("config key {key:?}: {e} (value {v:?})")),
        }
    }

    pub fn require<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.take_parse(key)?
            .with_context(|| format!("missing config key {key:?}"))
    }

    /// Reject anything not consumed so typos never pass silently.
    pub fn finish(self) -> Result<()> {
        if !self.0.is_empty() {
            let keys: Vec<_> = self.0.keys().cloned().collect();
            bail!("unknown config keys: {}", keys.join(", "));
        }
        Ok(())
    }
}

/// Current UTC time as `YYYYMMDD-HHMMSS`, from the system clock alone.
pub fn utc_timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let (days, rem) = (secs / 86_400, secs % 86_400);
    let (hh, mm, ss) = (rem / 3600, (rem / 60) % 60, rem % 60);
    // Civil-from-days on a calendar shifted so the 400-year cycle starts on
    // 0000-03-01; exact over the whole u64 range we can reach.
    let z = days as i64 + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let year = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = if month <= 2 { year + 1 } else { year };
    format!("{year:04}{month:02}{day:02}-{hh:02}{mm:02}{ss:02}")
}

pub fn default_out_dir(subcommand: &str) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}", utc_timestamp(), subcommand))
}

/// Render settings sorted as `key = value` lines, write them to
/// `resolved-config.txt` in `out_dir`, and return the rendered text.
pub fn write_resolved(out_dir: &Path, entries: &BTreeMap<String, String>) -> Result<String> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(v);
        text.push('\n');
    }
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let path = out_dir.join("resolved-config.txt");
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    Ok(text)
}

/// FNV-1a 64-bit hash as fixed-width hex; stable fingerprint for config text.
pub fn fnv1a64(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
