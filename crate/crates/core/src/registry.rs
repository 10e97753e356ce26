//! Content-addressed, versioned, append-only model store.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/index.json
//! <root>/store/<id>/<MAJOR.MINOR.PATCH>/manifest.lcam.json
//! <root>/advisories/<advisory_id>.json
//! ```
//!
//! Versions are never deleted; `yank` only flips a flag so past results stay
//! archived and citable. Writes take an exclusive on-disk marker; readers
//! see consistent snapshots because the index is swapped in atomically.
//!
//! Resolution is deterministic without backtracking: requirement sets grow
//! monotonically while traversing the currently-picked versions, and each
//! model pins the highest non-yanked version satisfying every requirement
//! collected for it. The loop ends when a full traversal discovers no new
//! requirement, which bounds iterations by the number of dependency
//! declarations in the registry.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon;
use crate::manifest::{self, ContentHash, ModelId, ModelManifest};
use crate::version::{Version, VersionReq};

pub const DEFAULT_RULESET_ID: &str = "default";
pub const DEFAULT_RULESET_VERSION: &str = "1.0.0";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("model {id}@{version} already published with different content (stored {stored}, attempted {attempted})")]
    DuplicateVersion {
        id: ModelId,
        version: Version,
        stored: ContentHash,
        attempted: ContentHash,
    },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("no version of '{id}' satisfies all requirements:\n{}", render_constraints(.constraints))]
    Unsatisfiable {
        id: ModelId,
        constraints: Vec<ConstraintReport>,
    },
    #[error("duplicate advisory id '{0}'")]
    DuplicateAdvisoryId(String),
    #[error("advisory '{id}' supersedes unknown advisory '{target}'")]
    DanglingSupersede { id: String, target: String },
    #[error("invalid advisory: {0}")]
    InvalidAdvisory(String),
    #[error("registry is locked by another writer ({0})")]
    Locked(String),
    #[error("manifest error: {0}")]
    Manifest(#[from] manifest::ManifestError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt registry file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn render_constraints(constraints: &[ConstraintReport]) -> String {
    constraints
        .iter()
        .map(|c| format!("  {c}"))
        .collect::<Vec<_>>()
        .join("\n")
}

type Result<T> = std::result::Result<T, RegistryError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub version: Version,
    pub hash: ContentHash,
    pub yanked: bool,
    pub published_at: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RegistryIndex {
    pub models: BTreeMap<ModelId, Vec<IndexEntry>>,
}

impl RegistryIndex {
    fn entry(&self, id: &ModelId, version: Version) -> Option<&IndexEntry> {
        self.models.get(id).and_then(|v| v.iter().find(|e| e.version == version))
    }

    /// Latest publication instant across the whole index; this is the
    /// snapshot time recorded in lockfiles so resolution stays a pure
    /// function of registry state.
    pub fn snapshot_time(&self) -> String {
        self.models
            .values()
            .flatten()
            .map(|e| e.published_at.as_str())
            .max()
            .unwrap_or("1970-01-01T00:00:00Z")
            .to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvisorySeverity {
    Info,
    Warning,
    Invalidated,
}

/// Invalidation record against a version range, mirroring how CVEs flow
/// through software dependency tooling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Advisory {
    pub advisory_id: String,
    pub model_id: ModelId,
    pub affected: VersionReq,
    pub severity: AdvisorySeverity,
    pub reason: String,
    pub published_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superseded_by: Option<String>,
}

impl Advisory {
    /// Advisory ids look like `LCA-2025-0001`.
    pub fn validate_id(id: &str) -> std::result::Result<(), String> {
        let b = id.as_bytes();
        let ok = b.len() == 13
            && id.starts_with("LCA-")
            && b[4..8].iter().all(|c| c.is_ascii_digit())
            && b[8] == b'-'
            && b[9..13].iter().all(|c| c.is_ascii_digit());
        if ok {
            Ok(())
        } else {
            Err(format!("advisory id '{id}' must match LCA-YYYY-NNNN"))
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        Self::validate_id(&self.advisory_id)?;
        if self.severity == AdvisorySeverity::Invalidated && self.reason.trim().is_empty() {
            return Err("invalidated advisories require a non-empty reason".to_string());
        }
        Ok(())
    }

    /// Superseded advisories no longer taint; the superseding record governs.
    pub fn is_active(&self) -> bool {
        self.superseded_by.is_none()
    }

    pub fn matches(&self, id: &ModelId, version: Version) -> bool {
        &self.model_id == id && self.affected.matches(version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LockPin {
    pub model_id: ModelId,
    pub version: Version,
    pub hash: ContentHash,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LockRoot {
    pub model_id: ModelId,
    pub version: Version,
}

/// Pinned, hash-verified closure of one root model: the unit of exact
/// recomputation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lockfile {
    pub root: LockRoot,
    pub pins: Vec<LockPin>,
    pub ruleset_id: String,
    pub ruleset_version: String,
    pub created_at: String,
    pub registry_snapshot_hash: ContentHash,
}

impl Lockfile {
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        canon::to_canonical_bytes(&serde_json::to_value(self).expect("serializable"))
    }

    pub fn from_slice(bytes: &[u8]) -> std::result::Result<Lockfile, String> {
        serde_json::from_slice(bytes).map_err(|e| format!("invalid lockfile: {e}"))
    }

    pub fn load(path: &Path) -> std::result::Result<Lockfile, String> {
        let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Lockfile::from_slice(&bytes)
    }

    pub fn hash(&self) -> ContentHash {
        ContentHash::of_bytes(&self.to_canonical_bytes())
    }

    pub fn pin(&self, id: &ModelId) -> Option<&LockPin> {
        self.pins.iter().find(|p| &p.model_id == id)
    }
}

/// One collected requirement with the dependency chain that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintReport {
    pub requirement: VersionReq,
    /// Path of (model, version) hops from the resolution root; empty for the
    /// root requirement itself.
    pub chain: Vec<(ModelId, Version)>,
}

impl std::fmt::Display for ConstraintReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.chain.is_empty() {
            write!(f, "{} (root requirement)", self.requirement)
        } else {
            let path: Vec<String> =
                self.chain.iter().map(|(id, v)| format!("{id}@{v}")).collect();
            write!(f, "{} (required via {})", self.requirement, path.join(" -> "))
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ResolveOptions {
    /// Allow a yanked version when it is pinned by an exact requirement.
    pub allow_yanked_exact: bool,
    pub ruleset_id: Option<String>,
    pub ruleset_version: Option<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct PublishOutcome {
    pub hash: ContentHash,
    /// True when (id, version) was already stored with identical content.
    pub idempotent: bool,
}

/// File-based registry rooted at a directory.
pub struct Registry {
    root: PathBuf,
}

struct WriterLock {
    path: PathBuf,
}

impl WriterLock {
    fn acquire(root: &Path) -> Result<WriterLock> {
        let path = root.join(".writer.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WriterLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(RegistryError::Locked(path.display().to_string()))
            }
            Err(source) => Err(RegistryError::Io { path, source }),
        }
    }
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Registry {
    /// Creates the directory layout. Idempotent on an existing registry.
    pub fn init(root: &Path) -> Result<Registry> {
        fs::create_dir_all(root.join("store")).map_err(|e| io_err(root, e))?;
        fs::create_dir_all(root.join("advisories")).map_err(|e| io_err(root, e))?;
        let index_path = root.join("index.json");
        if !index_path.exists() {
            let registry = Registry { root: root.to_path_buf() };
            registry.write_index(&RegistryIndex::default())?;
        }
        Ok(Registry { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<Registry> {
        if !root.join("index.json").exists() {
            return Err(RegistryError::NotFound(format!(
                "no registry at {} (missing index.json; run init)",
                root.display()
            )));
        }
        Ok(Registry { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn index(&self) -> Result<RegistryIndex> {
        let path = self.root.join("index.json");
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| RegistryError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    fn write_index(&self, index: &RegistryIndex) -> Result<()> {
        let bytes = canon::to_canonical_bytes(&serde_json::to_value(index).expect("serializable"));
        let path = self.root.join("index.json");
        let tmp = self.root.join("index.json.tmp");
        fs::write(&tmp, &bytes).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    /// SHA-256 of the canonical index: identifies the registry snapshot.
    pub fn snapshot_hash(&self) -> Result<ContentHash> {
        let index = self.index()?;
        let bytes = canon::to_canonical_bytes(&serde_json::to_value(&index).expect("serializable"));
        Ok(ContentHash::of_bytes(&bytes))
    }

    fn manifest_path(&self, id: &ModelId, version: Version) -> PathBuf {
        self.root
            .join("store")
            .join(id.as_str())
            .join(version.to_string())
            .join("manifest.lcam.json")
    }

    /// Stores a manifest. Republishing identical content is a no-op;
    /// republishing different content under the same (id, version) is an
    /// immutability breach and is rejected.
    pub fn publish(&self, m: &ModelManifest, at: DateTime<Utc>) -> Result<PublishOutcome> {
        let _lock = WriterLock::acquire(&self.root)?;
        let mut index = self.index()?;
        let bytes = manifest::canonicalize(m);
        let hash = ContentHash::of_bytes(&bytes);
        if let Some(existing) = index.entry(&m.id, m.version) {
            if existing.hash == hash {
                return Ok(PublishOutcome { hash, idempotent: true });
            }
            return Err(RegistryError::DuplicateVersion {
                id: m.id.clone(),
                version: m.version,
                stored: existing.hash,
                attempted: hash,
            });
        }
        let path = self.manifest_path(&m.id, m.version);
        fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| io_err(&path, e))?;
        fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
        let entries = index.models.entry(m.id.clone()).or_default();
        entries.push(IndexEntry {
            version: m.version,
            hash,
            yanked: false,
            published_at: format_timestamp(at),
        });
        entries.sort_by_key(|e| e.version);
        self.write_index(&index)?;
        Ok(PublishOutcome { hash, idempotent: false })
    }

    /// Flags a version as yanked; it stays retrievable and citable but is
    /// skipped by fresh resolutions. Optionally publishes an advisory in the
    /// same step.
    pub fn yank(&self, id: &ModelId, version: Version, advisory: Option<&Advisory>) -> Result<()> {
        {
            let _lock = WriterLock::acquire(&self.root)?;
            let mut index = self.index()?;
            let entries = index
                .models
                .get_mut(id)
                .ok_or_else(|| RegistryError::NotFound(format!("model '{id}'")))?;
            let entry = entries
                .iter_mut()
                .find(|e| e.version == version)
                .ok_or_else(|| RegistryError::NotFound(format!("{id}@{version}")))?;
            entry.yanked = true;
            self.write_index(&index)?;
        }
        if let Some(a) = advisory {
            self.publish_advisory(a)?;
        }
        Ok(())
    }

    pub fn get(&self, id: &ModelId, version: Version) -> Result<(ModelManifest, IndexEntry)> {
        let index = self.index()?;
        let entry = index
            .entry(id, version)
            .ok_or_else(|| RegistryError::NotFound(format!("{id}@{version}")))?
            .clone();
        let path = self.manifest_path(id, version);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let m = manifest::parse_manifest(&bytes)?;
        Ok((m, entry))
    }

    /// Versions of a model in ascending order, yanked flagged.
    pub fn list_versions(&self, id: &ModelId) -> Result<Vec<IndexEntry>> {
        let index = self.index()?;
        let mut entries = index
            .models
            .get(id)
            .ok_or_else(|| RegistryError::NotFound(format!("model '{id}'")))?
            .clone();
        entries.sort_by_key(|e| e.version);
        Ok(entries)
    }

    pub fn publish_advisory(&self, a: &Advisory) -> Result<()> {
        let _lock = WriterLock::acquire(&self.root)?;
        a.validate().map_err(RegistryError::InvalidAdvisory)?;
        let index = self.index()?;
        if !index.models.contains_key(&a.model_id) {
            return Err(RegistryError::NotFound(format!("model '{}'", a.model_id)));
        }
        let path = self.root.join("advisories").join(format!("{}.json", a.advisory_id));
        if path.exists() {
            return Err(RegistryError::DuplicateAdvisoryId(a.advisory_id.clone()));
        }
        if let Some(target) = &a.superseded_by {
            Advisory::validate_id(target).map_err(RegistryError::InvalidAdvisory)?;
            let target_path = self.root.join("advisories").join(format!("{target}.json"));
            if !target_path.exists() {
                return Err(RegistryError::DanglingSupersede {
                    id: a.advisory_id.clone(),
                    target: target.clone(),
                });
            }
        }
        let bytes = canon::to_canonical_bytes(&serde_json::to_value(a).expect("serializable"));
        fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    /// All advisories, sorted by advisory id.
    pub fn advisories(&self) -> Result<Vec<Advisory>> {
        let dir = self.root.join("advisories");
        let mut out = Vec::new();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(io_err(&dir, e)),
        };
        for entry in entries {
            let entry = entry.map_err(|e| io_err(&dir, e))?;
            let path = entry.path();
            if path.extension().and_then(|s| s.to_str()) != Some("json") {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            let a: Advisory = serde_json::from_slice(&bytes).map_err(|e| RegistryError::Corrupt {
                path: path.clone(),
                message: e.to_string(),
            })?;
            out.push(a);
        }
        out.sort_by(|a, b| a.advisory_id.cmp(&b.advisory_id));
        Ok(out)
    }

    /// Deterministic dependency resolution to a lockfile. For each reachable
    /// model the pick is the highest non-yanked version satisfying the
    /// conjunction of all requirements collected for it. Cycles in the
    /// version graph are allowed here; the graph module reports them later.
    pub fn resolve(
        &self,
        root_id: &ModelId,
        req: &VersionReq,
        opts: &ResolveOptions,
    ) -> Result<Lockfile> {
        let index = self.index()?;
        if !index.models.contains_key(root_id) {
            return Err(RegistryError::NotFound(format!("model '{root_id}'")));
        }

        type Key = (ModelId, Version, usize);
        #[derive(Clone)]
        struct Constraint {
            req: VersionReq,
            chain: Vec<(ModelId, Version)>,
        }
        let mut constraints: BTreeMap<ModelId, BTreeMap<Option<Key>, Constraint>> = BTreeMap::new();
        constraints
            .entry(root_id.clone())
            .or_default()
            .insert(None, Constraint { req: req.clone(), chain: Vec::new() });

        let mut manifest_cache: BTreeMap<(ModelId, Version), ModelManifest> = BTreeMap::new();

        loop {
            let mut pins: BTreeMap<ModelId, (Version, ContentHash)> = BTreeMap::new();
            let mut chains: BTreeMap<ModelId, Vec<(ModelId, Version)>> = BTreeMap::new();
            chains.insert(root_id.clone(), Vec::new());
            let mut frontier: BTreeSet<ModelId> = BTreeSet::new();
            frontier.insert(root_id.clone());
            let mut added = false;

            while let Some(id) = frontier.pop_first() {
                if pins.contains_key(&id) {
                    continue;
                }
                let entries = index
                    .models
                    .get(&id)
                    .ok_or_else(|| RegistryError::NotFound(format!("model '{id}'")))?;
                let cons = constraints.get(&id).expect("constraint present before visit");
                let pick = pick_version(entries, cons.values().map(|c| &c.req), opts)
                    .ok_or_else(|| RegistryError::Unsatisfiable {
                        id: id.clone(),
                        constraints: cons
                            .values()
                            .map(|c| ConstraintReport {
                                requirement: c.req.clone(),
                                chain: c.chain.clone(),
                            })
                            .collect(),
                    })?;
                pins.insert(id.clone(), (pick.version, pick.hash));

                let cache_key = (id.clone(), pick.version);
                if !manifest_cache.contains_key(&cache_key) {
                    let (m, _) = self.get(&id, pick.version)?;
                    manifest_cache.insert(cache_key.clone(), m);
                }
                let m = &manifest_cache[&cache_key];
                let own_chain = chains.get(&id).cloned().unwrap_or_default();
                let mut child_chain = own_chain.clone();
                child_chain.push((id.clone(), pick.version));

                for (idx, dep) in m.dependencies.iter().enumerate() {
                    if dep.cut_off.is_some() {
                        continue;
                    }
                    let key = Some((id.clone(), pick.version, idx));
                    let slot = constraints.entry(dep.model_id.clone()).or_default();
                    if !slot.contains_key(&key) {
                        slot.insert(
                            key,
                            Constraint {
                                req: dep.version_req.clone(),
                                chain: child_chain.clone(),
                            },
                        );
                        added = true;
                    }
                    chains.entry(dep.model_id.clone()).or_insert_with(|| child_chain.clone());
                    if !pins.contains_key(&dep.model_id) {
                        frontier.insert(dep.model_id.clone());
                    }
                }
            }

            if !added {
                let snapshot_hash = self.snapshot_hash()?;
                let pins_vec: Vec<LockPin> = pins
                    .iter()
                    .map(|(id, (version, hash))| LockPin {
                        model_id: id.clone(),
                        version: *version,
                        hash: *hash,
                    })
                    .collect();
                let root_version = pins[root_id].0;
                return Ok(Lockfile {
                    root: LockRoot { model_id: root_id.clone(), version: root_version },
                    pins: pins_vec,
                    ruleset_id: opts
                        .ruleset_id
                        .clone()
                        .unwrap_or_else(|| DEFAULT_RULESET_ID.to_string()),
                    ruleset_version: opts
                        .ruleset_version
                        .clone()
                        .unwrap_or_else(|| DEFAULT_RULESET_VERSION.to_string()),
                    created_at: index.snapshot_time(),
                    registry_snapshot_hash: snapshot_hash,
                });
            }
        }
    }
}

fn pick_version<'a, 'b, I>(
    entries: &'a [IndexEntry],
    reqs: I,
    opts: &ResolveOptions,
) -> Option<&'a IndexEntry>
where
    I: Iterator<Item = &'b VersionReq> + Clone,
{
    entries
        .iter()
        .filter(|e| {
            if e.yanked {
                // A yanked version stays resolvable only under an explicit
                // override combined with an exact pin on it.
                opts.allow_yanked_exact
                    && reqs.clone().any(|r| r.is_exact() == Some(e.version))
            } else {
                true
            }
        })
        .filter(|e| reqs.clone().all(|r| r.matches(e.version)))
        .max_by_key(|e| e.version)
}

fn io_err(path: &Path, source: std::io::Error) -> RegistryError {
    RegistryError::Io { path: path.to_path_buf(), source }
}

pub fn format_timestamp(at: DateTime<Utc>) -> String {
    at.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Publication timestamp for write operations: honors `SOURCE_DATE_EPOCH`
/// for reproducible registries, else the current wall clock.
pub fn publish_time() -> DateTime<Utc> {
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(secs) = epoch.trim().parse::<i64>() {
            if let Some(t) = DateTime::<Utc>::from_timestamp(secs, 0) {
                return t;
            }
        }
    }
    Utc::now()
}
