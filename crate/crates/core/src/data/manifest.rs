//! Line-delimited mixture manifests. One JSON object per line with the fields
//! `id, clean_path, noise_path, noise_offset, snr_db, split, seed` in that order.
//! Relative paths resolve against the manifest's directory.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound of the SNR range used for generated mixtures.
pub const SNR_MAX_DB: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Named subsets of a manifest. `TestLow` is the test split restricted to the
/// lowest third of the SNR range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSelector {
    Train,
    Val,
    Test,
    TestLow,
}

impl SplitSelector {
    pub fn matches(&self, e: &ManifestEntry) -> bool {
        match self {
            SplitSelector::Train => e.split == Split::Train,
            SplitSelector::Val => e.split == Split::Val,
            SplitSelector::Test => e.split == Split::Test,
            SplitSelector::TestLow => e.split == Split::Test && e.snr_db <= SNR_MAX_DB / 3.0,
        }
    }
}

impl FromStr for SplitSelector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            "test_low" => Ok(Self::TestLow),
            other => Err(Error::Config(format!("unknown split '{other}' (train|val|test|test_low)"))),
        }
    }
}

impl fmt::Display for SplitSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
            Self::TestLow => "test_low",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub clean_path: PathBuf,
    pub noise_path: PathBuf,
    pub noise_offset: usize,
    pub snr_db: f64,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|err| Error::Config(format!("{}:{}: {err}", path.display(), i + 1)))?;
            entries.push(e);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self { entries, base_dir };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::fs::File::create(path)?;
        for e in &self.entries {
            writeln!(out, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seeds = std::collections::HashSet::new();
        let mut ids = std::collections::HashSet::new();
        for e in &self.entries {
            if !(0.0..=SNR_MAX_DB).contains(&e.snr_db) {
                return Err(Error::Config(format!("entry {}: snr_db {} outside [0, 20]", e.id, e.snr_db)));
            }
            if !seeds.insert(e.seed) {
                return Err(Error::Config(format!("entry {}: duplicate seed {}", e.id, e.seed)));
            }
            if !ids.insert(e.id.clone()) {
                return Err(Error::Config(format!("duplicate entry id {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn select(&self, split: SplitSelector) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| split.matches(e)).collect()
    }
}

/// Uniform SNR draw on [0, 20] dB.
pub fn sample_snr(rng: &mut impl Rng) -> f64 {
    rng.random_range(0.0..=SNR_MAX_DB)
}

/// A clean utterance to be mixed, with the split it belongs to.
#[derive(Debug, Clone)]
pub struct CleanItem {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
}

/// Pairs every clean item with a noise file, offset and SNR drawn from a
/// per-entry generator seeded from `seed`.
pub fn generate_manifest(
    clean: &[CleanItem],
    noises: &[(PathBuf, usize)],
    seed: u64,
    base_dir: impl Into<PathBuf>,
) -> Result<Manifest> {
    if noises.is_empty() {
        return Err(Error::Config("no noise files to mix with".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(clean.len());
    let mut used = std::collections::HashSet::new();
    for item in clean {
        let mut entry_seed: u64 = master.random();
        while !used.insert(entry_seed) {
            entry_seed = master.random();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(entry_seed);
        let (noise_path, noise_len) = &noises[rng.random_range(0..noises.len())];
        let noise_offset = if *noise_len > 0 { rng.random_range(0..*noise_len) } else { 0 };
        entries.push(ManifestEntry {
            id: item.id.clone(),
            clean_path: item.path.clone(),
            noise_path: noise_path.clone(),
            noise_offset,
            snr_db: sample_snr(&mut rng),
            split: item.split,
            seed: entry_seed,
        });
    }
    let m = Manifest { entries, base_dir: base_dir.into() };
    m.validate()?;
    Ok(m)
}
