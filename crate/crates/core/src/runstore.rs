//! On-disk persistence: a write-once content-addressed store for
//! transcripts, mutable per-instance run state for resume, and finished run
//! records.
//!
//! Store files live at `<dir>/<first two hex chars>/<digest>` and start with a
//! header line `E2G-STORE v1 sha256:<payload digest>` followed by the raw
//! payload bytes.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const STORE_SCHEMA_VERSION: u32 = 1;
const HEADER_PREFIX: &str = "E2G-STORE v";
const ARCHIVE_FORMAT: &str = "e2g-archive";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("checksum mismatch or truncated file at {0}")]
    Checksum(PathBuf),
    #[error("unsupported store schema version {version} at {path}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("key {0} already holds a different payload")]
    Integrity(CacheKey),
    #[error("invalid cache key `{0}`")]
    InvalidKey(String),
    #[error("serialization error at {path}: {message}")]
    Serde { path: PathBuf, message: String },
    #[error("run record at {0} is finalized and cannot be rewritten")]
    Finalized(PathBuf),
    #[error("malformed archive line {line}: {reason}")]
    Archive { line: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 digest identifying a stored payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        CacheKey(sha256_hex(bytes))
    }

    pub fn parse(hex_digest: &str) -> Result<Self, StoreError> {
        let ok = hex_digest.len() == 64 && hex_digest.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if ok {
            Ok(CacheKey(hex_digest.to_string()))
        } else {
            Err(StoreError::InvalidKey(hex_digest.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Stored,
    AlreadyPresent,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn temp_path(dir: &Path, stem: &str) -> PathBuf {
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    dir.join(format!(".tmp-{stem}-{}-{n}", std::process::id()))
}

fn write_temp(dir: &Path, stem: &str, bytes: &[u8]) -> Result<PathBuf, StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = temp_path(dir, stem);
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    Ok(tmp)
}

/// Writes `bytes` to `path` through a temp file and rename, replacing any
/// previous content.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = write_temp(dir, &stem, bytes)?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// One namespace of write-once, checksummed, content-addressed files.
#[derive(Debug, Clone)]
pub struct ContentStore {
    dir: PathBuf,
}

impl ContentStore {
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(&key.as_str()[..2]).join(key.as_str())
    }

    fn encode(payload: &[u8]) -> Vec<u8> {
        let mut out = format!("{HEADER_PREFIX}{STORE_SCHEMA_VERSION} sha256:{}\n", sha256_hex(payload)).into_bytes();
        out.extend_from_slice(payload);
        out
    }

    fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<u8>, StoreError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| StoreError::Checksum(path.to_path_buf()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| StoreError::Checksum(path.to_path_buf()))?;
        let rest = header
            .strip_prefix(HEADER_PREFIX)
            .ok_or_else(|| StoreError::Checksum(path.to_path_buf()))?;
        let (version, digest) = rest
            .split_once(" sha256:")
            .ok_or_else(|| StoreError::Checksum(path.to_path_buf()))?;
        let version: u32 = version.parse().map_err(|_| StoreError::Checksum(path.to_path_buf()))?;
        if version != STORE_SCHEMA_VERSION {
            return Err(StoreError::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let payload = &bytes[nl + 1..];
        if sha256_hex(payload) != digest {
            return Err(StoreError::Checksum(path.to_path_buf()));
        }
        Ok(payload.to_vec())
    }

    fn check_existing(&self, key: &CacheKey, payload: &[u8]) -> Result<PutOutcome, StoreError> {
        match self.get(key)? {
            Some(existing) if existing == payload => Ok(PutOutcome::AlreadyPresent),
            _ => Err(StoreError::Integrity(key.clone())),
        }
    }

    /// Durably stores `payload` under `key`. Existing entries are never
    /// overwritten: an identical payload is accepted, a different one is an
    /// integrity error.
    pub fn put(&self, key: &CacheKey, payload: &[u8]) -> Result<PutOutcome, StoreError> {
        let path = self.path_for(key);
        if path.exists() {
            return self.check_existing(key, payload);
        }
        let dir = path.parent().expect("fan-out dir");
        let tmp = write_temp(dir, key.as_str(), &Self::encode(payload))?;
        // hard_link fails if the target exists, which makes the write-once
        // check atomic with respect to concurrent writers.
        let linked = fs::hard_link(&tmp, &path);
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => Ok(PutOutcome::Stored),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => self.check_existing(key, payload),
            Err(e) => Err(StoreError::Io { path, source: e }),
        }
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<Vec<u8>>, StoreError> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => Self::decode(&path, &bytes).map(Some),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(StoreError::Io { path, source: e }),
        }
    }

    /// All keys, sorted.
    pub fn keys(&self) -> Result<Vec<CacheKey>, StoreError> {
        let mut keys = Vec::new();
        let top = match fs::read_dir(&self.dir) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(keys),
            Err(e) => return Err(StoreError::Io { path: self.dir.clone(), source: e }),
        };
        for fan in top {
            let fan = fan.map_err(io_err(&self.dir))?;
            if !fan.path().is_dir() {
                continue;
            }
            for entry in fs::read_dir(fan.path()).map_err(io_err(&fan.path()))? {
                let entry = entry.map_err(io_err(&fan.path()))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if let Ok(key) = CacheKey::parse(&name) {
                    keys.push(key);
                }
            }
        }
        keys.sort();
        Ok(keys)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveHeader {
    format: String,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveEntry {
    namespace: String,
    key: CacheKey,
    sha256: String,
    payload_b64: String,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ImportSummary {
    pub stored: usize,
    pub already_present: usize,
}

/// Writes every entry of the named namespaces under `root` into a single
/// JSONL archive, sorted by namespace and key.
pub fn export_archive(root: &Path, namespaces: &[&str], out: &Path) -> Result<usize, StoreError> {
    let mut buf = serde_json::to_string(&ArchiveHeader {
        format: ARCHIVE_FORMAT.into(),
        version: STORE_SCHEMA_VERSION,
    })
    .expect("header")
        + "\n";
    let mut count = 0;
    let mut sorted: Vec<&str> = namespaces.to_vec();
    sorted.sort_unstable();
    for ns in sorted {
        let store = ContentStore::open(root.join(ns));
        for key in store.keys()? {
            let payload = store.get(&key)?.expect("listed key present");
            let entry = ArchiveEntry {
                namespace: ns.to_string(),
                key,
                sha256: sha256_hex(&payload),
                payload_b64: base64::engine::general_purpose::STANDARD.encode(&payload),
            };
            buf.push_str(&serde_json::to_string(&entry).expect("entry"));
            buf.push('\n');
            count += 1;
        }
    }
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    atomic_write(out, buf.as_bytes())?;
    Ok(count)
}

/// Imports an archive written by [`export_archive`] under write-once rules.
pub fn import_archive(root: &Path, archive: &Path) -> Result<ImportSummary, StoreError> {
    let file = File::open(archive).map_err(io_err(archive))?;
    let mut summary = ImportSummary::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(archive))?;
        let lineno = i + 1;
        if lineno == 1 {
            let header: ArchiveHeader = serde_json::from_str(&line).map_err(|e| StoreError::Archive {
                line: lineno,
                reason: e.to_string(),
            })?;
            if header.format != ARCHIVE_FORMAT || header.version != STORE_SCHEMA_VERSION {
                return Err(StoreError::Archive {
                    line: lineno,
                    reason: format!("unsupported archive {} v{}", header.format, header.version),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let entry: ArchiveEntry = serde_json::from_str(&line).map_err(|e| StoreError::Archive {
            line: lineno,
            reason: e.to_string(),
        })?;
        if entry.namespace.is_empty() || entry.namespace.contains(['/', '\\', '.']) {
            return Err(StoreError::Archive {
                line: lineno,
                reason: format!("invalid namespace `{}`", entry.namespace),
            });
        }
        let payload = base64::engine::general_purpose::STANDARD
            .decode(&entry.payload_b64)
            .map_err(|e| StoreError::Archive {
                line: lineno,
                reason: e.to_string(),
            })?;
        if sha256_hex(&payload) != entry.sha256 {
            return Err(StoreError::Archive {
                line: lineno,
                reason: "payload checksum mismatch".into(),
            });
        }
        let key = CacheKey::parse(entry.key.as_str())?;
        match ContentStore::open(root.join(&entry.namespace)).put(&key, &payload)? {
            PutOutcome::Stored => summary.stored += 1,
            PutOutcome::AlreadyPresent => summary.already_present += 1,
        }
    }
    Ok(summary)
}

/// Mutable per-instance state of an in-progress run, used for resume.
#[derive(Debug, Clone)]
pub struct RunState {
    dir: PathBuf,
}

impl RunState {
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path_for(&self, instance_id: &str) -> PathBuf {
        self.dir.join(format!("{}.json", &sha256_hex(instance_id.as_bytes())[..32]))
    }

    pub fn save<T: Serialize>(&self, instance_id: &str, state: &T) -> Result<(), StoreError> {
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let path = self.path_for(instance_id);
        let bytes = serde_json::to_vec(state).map_err(|e| StoreError::Serde {
            path: path.clone(),
            message: e.to_string(),
        })?;
        atomic_write(&path, &bytes)
    }

    pub fn load<T: DeserializeOwned>(&self, instance_id: &str) -> Result<Option<T>, StoreError> {
        let path = self.path_for(instance_id);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| StoreError::Serde {
                path,
                message: e.to_string(),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(StoreError::Io { path, source: e }),
        }
    }
}

pub const RECORD_FILE: &str = "record.json";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const META_FILE: &str = "meta.json";

/// Wall-clock metadata kept apart from the reproducible payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub started_at: String,
    pub finished_at: String,
    pub wall_clock_ms: u64,
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Writes a serializable value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| StoreError::Serde {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Serde {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Directory holding one finished run. Files are written once; the meta
/// file marks the run finalized.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn is_finalized(&self) -> bool {
        self.dir.join(META_FILE).exists()
    }

    pub fn state(&self) -> RunState {
        RunState::open(self.dir.join("state"))
    }

    /// Writes payload files and then the meta file. Refuses to touch a
    /// finalized run.
    pub fn finalize(&self, files: &[(&str, Vec<u8>)], meta: &RunMeta) -> Result<(), StoreError> {
        if self.is_finalized() {
            return Err(StoreError::Finalized(self.dir.clone()));
        }
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        for (name, bytes) in files {
            atomic_write(&self.dir.join(name), bytes)?;
        }
        write_json(&self.dir.join(META_FILE), meta)
    }

    pub fn read_file(&self, name: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.dir.join(name);
        fs::read(&path).map_err(io_err(&path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(s: &str) -> CacheKey {
        CacheKey::of_bytes(s.as_bytes())
    }

    #[test]
    fn put_get_and_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = ContentStore::open(dir.path());
        let k = key("a");
        assert_eq!(store.get(&k).unwrap(), None);
        assert_eq!(store.put(&k, b"payload").unwrap(), PutOutcome::Stored);
        assert_eq!(store.put(&k, b"payload").unwrap(), PutOutcome::AlreadyPresent);
        assert!(matches!(store.put(&k, b"other"), Err(StoreError::Integrity(_))));
        assert_eq!(store.get(&k).unwrap().as_deref(), Some(&b"payload"[..]));
        assert!(store.path_for(&k).starts_with(dir.path().join(&k.as_str()[..2])));
    }

    #[test]
    fn truncated_file_is_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = ContentStore::open(dir.path());
        let k = key("t");
        store.put(&k, b"a fairly long payload body").unwrap();
        let path = store.path_for(&k);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match store.get(&k) {
            Err(StoreError::Checksum(p)) => assert_eq!(p, path),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, b"E2G-STO").unwrap();
        assert!(matches!(store.get(&k), Err(StoreError::Checksum(_))));
    }

    #[test]
    fn version_header_checked() {
        let dir = tempfile::tempdir().unwrap();
        let store = ContentStore::open(dir.path());
        let k = key("v");
        let path = store.path_for(&k);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, format!("E2G-STORE v9 sha256:{}\nx", sha256_hex(b"x"))).unwrap();
        assert!(matches!(store.get(&k), Err(StoreError::UnsupportedVersion { version: 9, .. })));
    }

    #[test]
    fn concurrent_identical_puts_succeed() {
        let dir = tempfile::tempdir().unwrap();
        let store = ContentStore::open(dir.path());
        let k = key("c");
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| store.put(&k, b"same").unwrap());
            }
        });
        assert_eq!(store.get(&k).unwrap().as_deref(), Some(&b"same"[..]));
        assert_eq!(store.keys().unwrap(), vec![k]);
    }

    #[test]
    fn key_parse() {
        assert!(CacheKey::parse(&"a".repeat(64)).is_ok());
        assert!(CacheKey::parse("xyz").is_err());
        assert!(CacheKey::parse(&"A".repeat(64)).is_err());
        assert_eq!(
            key("abc").as_str(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn archive_round_trip() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        let store = ContentStore::open(src.path().join("transcripts"));
        for i in 0..5 {
            store.put(&key(&i.to_string()), format!("p{i}").as_bytes()).unwrap();
        }
        let arc = src.path().join("out/cache.e2garc");
        assert_eq!(export_archive(src.path(), &["transcripts"], &arc).unwrap(), 5);
        let s = import_archive(dst.path(), &arc).unwrap();
        assert_eq!(s, ImportSummary { stored: 5, already_present: 0 });
        let again = import_archive(dst.path(), &arc).unwrap();
        assert_eq!(again.already_present, 5);
        let copy = ContentStore::open(dst.path().join("transcripts"));
        assert_eq!(copy.get(&key("3")).unwrap().as_deref(), Some(&b"p3"[..]));
    }

    #[test]
    fn run_state_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let st = RunState::open(dir.path());
        st.save("id-1", &1u32).unwrap();
        st.save("id-1", &2u32).unwrap();
        assert_eq!(st.load::<u32>("id-1").unwrap(), Some(2));
        assert_eq!(st.load::<u32>("id-2").unwrap(), None);
    }

    #[test]
    fn finalized_run_is_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path().join("r1"));
        let meta = RunMeta {
            run_id: "r1".into(),
            started_at: now_rfc3339(),
            finished_at: now_rfc3339(),
            wall_clock_ms: 1,
        };
        run.finalize(&[(RECORD_FILE, b"{}".to_vec())], &meta).unwrap();
        assert!(matches!(
            run.finalize(&[(RECORD_FILE, b"{}".to_vec())], &meta),
            Err(StoreError::Finalized(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn put_get_byte_identity(payload in prop::collection::vec(any::<u8>(), 0..512)) {
            let dir = tempfile::tempdir().unwrap();
            let store = ContentStore::open(dir.path());
            let k = CacheKey::of_bytes(&payload);
            store.put(&k, &payload).unwrap();
            prop_assert_eq!(store.get(&k).unwrap(), Some(payload));
        }
    }
}
